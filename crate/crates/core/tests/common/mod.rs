//! Synthetic airfoil-like snapshot families shared by integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use mfcp_core::data::SnapshotSet;
use mfcp_core::Matrix;

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let (mut inv, mut f) = (0.0, 1.0 / base as f64);
    while i > 0 {
        inv += f * (i % base) as f64;
        i /= base;
        f /= base as f64;
    }
    inv
}

/// Halton points in [0,1]^3, skipping the origin.
pub fn design(n: usize) -> Matrix {
    Matrix::from_fn(n, 3, |i, k| radical_inverse(i + 1, [2, 3, 5][k]))
}

/// Angle of node `j` around a closed contour of `d` nodes.
pub fn theta(j: usize, d: usize) -> f64 {
    2.0 * PI * j as f64 / d as f64
}

pub fn contour(d: usize) -> Matrix {
    Matrix::from_fn(d, 2, |j, k| {
        let t = theta(j, d);
        if k == 0 {
            0.5 * (1.0 + t.cos())
        } else {
            0.06 * t.sin() * (1.0 + 0.5 * t.cos())
        }
    })
}

/// Smooth pressure-like field on the contour, nonlinear in the parameters.
pub fn field(t: f64, p: &[f64]) -> f64 {
    let x = 0.5 * (1.0 + t.cos());
    let peak = 0.2 + 0.3 * p[0];
    (0.5 + p[0]) * t.sin() + 0.6 * p[1] * (2.0 * t).cos()
        - 0.8 * p[2] * (-((x - peak) / 0.12).powi(2)).exp() * t.sin().signum()
        + 0.3 * p[0] * p[1] * t.cos()
}

/// `n` cases on a `d`-node contour named `case{i:03}`.
pub fn family(n: usize, d: usize) -> SnapshotSet {
    let params = design(n);
    let fields = Matrix::from_fn(d, n, |j, i| field(theta(j, d), params.row(i)));
    SnapshotSet::new(
        fields,
        contour(d),
        (0..d).map(|j| format!("n{j}")).collect(),
        (0..n).map(|i| format!("case{i:03}")).collect(),
        params,
        vec!["alpha".into(), "mach".into(), "thickness".into()],
    )
    .expect("synthetic family is well formed")
}

/// Periodic linear interpolation of values known at sorted node indices
/// `known` (out of `d` around the contour) back onto every node.
pub fn periodic_interp(known: &[usize], values: &[f64], d: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..known.len()).collect();
    order.sort_by_key(|&k| known[k]);
    let idx: Vec<usize> = order.iter().map(|&k| known[k]).collect();
    let val: Vec<f64> = order.iter().map(|&k| values[k]).collect();
    let m = idx.len();
    (0..d)
        .map(|j| {
            // first known index at or after j, wrapping around
            let hi = idx.iter().position(|&q| q >= j).unwrap_or(0);
            let lo = (hi + m - 1) % m;
            if idx[hi] == j {
                return val[hi];
            }
            let a = idx[lo] as f64;
            let mut b = idx[hi] as f64;
            let mut x = j as f64;
            if b <= a {
                b += d as f64;
            }
            if x < a {
                x += d as f64;
            }
            let w = (x - a) / (b - a);
            val[lo] * (1.0 - w) + val[hi] * w
        })
        .collect()
}
