//! Synthetic low-fidelity generators.
//!
//! Two families of degradation: precision (modal truncation, quantization,
//! noise, bias) and resolution (farthest-point sampling, k-NN averaging,
//! voxelization). [`DegradationRecipe`] chains them and records what each
//! stage did.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, SnapshotSet};
use crate::linalg::{point3, pca_axes, sq_dist, thin_svd, LinalgError, Matrix};
use crate::rng;

#[derive(Debug, Error)]
pub enum LofiError {
    #[error("invalid degradation parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodTruncation {
    pub reconstruction: Matrix,
    pub r_star: usize,
    /// Cumulative energy fraction of the retained modes.
    pub retained_energy: f64,
    pub singular_values: Vec<f64>,
}

/// Rank truncation of `x` (`D x N`, uncentered) keeping the fewest modes
/// whose cumulative squared singular values reach `energy`.
pub fn pod_truncate(x: &Matrix, energy: f64) -> Result<PodTruncation, LofiError> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(LofiError::Invalid(format!("energy must be in (0, 1], got {energy}")));
    }
    let svd = thin_svd(x)?;
    let sq: Vec<f64> = svd.sigma.iter().map(|s| s * s).collect();
    let total: f64 = sq.iter().sum();
    if total == 0.0 {
        return Ok(PodTruncation {
            reconstruction: x.clone(),
            r_star: 0,
            retained_energy: 1.0,
            singular_values: svd.sigma,
        });
    }
    let mut cum = 0.0;
    let mut r_star = sq.len();
    let mut retained = 1.0;
    for (r, s) in sq.iter().enumerate() {
        cum += s;
        if cum / total >= energy {
            r_star = r + 1;
            retained = cum / total;
            break;
        }
    }
    Ok(PodTruncation {
        reconstruction: svd.reconstruct(r_star),
        r_star,
        retained_energy: retained,
        singular_values: svd.sigma,
    })
}

fn check_points(points: &Matrix) -> Result<(), LofiError> {
    if points.rows() == 0 || points.cols() == 0 || points.cols() > 3 {
        return Err(LofiError::Invalid(format!(
            "point cloud must be n x 1..3 with n > 0, got {:?}",
            points.shape()
        )));
    }
    Ok(())
}

/// Greedy max-min selection starting at `start`. Ties go to the lowest index.
pub fn fps_from(points: &Matrix, m: usize, start: usize) -> Result<Vec<usize>, LofiError> {
    check_points(points)?;
    let n = points.rows();
    if m == 0 || m > n {
        return Err(LofiError::Invalid(format!("fps needs 1 <= m <= {n}, got {m}")));
    }
    if start >= n {
        return Err(LofiError::Invalid(format!("start index {start} out of range")));
    }
    let mut chosen = vec![start];
    let mut taken = vec![false; n];
    taken[start] = true;
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(start))).collect();
    while chosen.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !taken[i] && min_d[i] > best_d {
                best = i;
                best_d = min_d[i];
            }
        }
        taken[best] = true;
        chosen.push(best);
        let pb = points.row(best);
        for i in 0..n {
            let d = sq_dist(points.row(i), pb);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Farthest-point sampling with a random first point.
pub fn fps(points: &Matrix, m: usize, rng: &mut impl Rng) -> Result<Vec<usize>, LofiError> {
    check_points(points)?;
    let start = rng.random_range(0..points.rows());
    fps_from(points, m, start)
}

/// Indices of the `k` points nearest to `center`, ordered by (distance, index).
pub fn nearest(points: &Matrix, center: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..points.rows()).map(|i| (sq_dist(points.row(i), center), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

/// Mean of `values` (`n x F`) over the `k` nearest points of each center.
/// The center itself counts as a neighbor.
pub fn knn_average(points: &Matrix, values: &Matrix, centers: &[usize], k: usize) -> Result<Matrix, LofiError> {
    check_points(points)?;
    let n = points.rows();
    if values.rows() != n {
        return Err(LofiError::Invalid(format!("{} value rows for {n} points", values.rows())));
    }
    if k == 0 || k > n {
        return Err(LofiError::Invalid(format!("knn needs 1 <= k <= {n}, got {k}")));
    }
    if let Some(&c) = centers.iter().find(|&&c| c >= n) {
        return Err(LofiError::Invalid(format!("center index {c} out of range")));
    }
    let f = values.cols();
    let mut out = Matrix::zeros(centers.len(), f);
    for (r, &c) in centers.iter().enumerate() {
        let row = out.row_mut(r);
        for i in nearest(points, points.row(c), k) {
            for (o, v) in row.iter_mut().zip(values.row(i)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|o| *o /= k as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxelization {
    /// `m x 3` voxel centers in the original frame.
    pub centers: Matrix,
    /// `m x F` mean of member values.
    pub means: Matrix,
    /// Voxel row for each input point.
    pub assignment: Vec<usize>,
    /// Integer voxel coordinates, same order as `centers`.
    pub keys: Vec<[i64; 3]>,
}

/// Bins points into cubes of edge `size` and averages values per cube.
///
/// The lattice is aligned to integer multiples of `size` in the binning
/// frame (PCA frame when `pca_align`), so the first cell contains the
/// minimum corner. Output rows are sorted by integer voxel coordinates.
pub fn voxelize(points: &Matrix, values: &Matrix, size: f64, pca_align: bool) -> Result<Voxelization, LofiError> {
    check_points(points)?;
    let n = points.rows();
    if values.rows() != n {
        return Err(LofiError::Invalid(format!("{} value rows for {n} points", values.rows())));
    }
    if !(size > 0.0 && size.is_finite()) {
        return Err(LofiError::Invalid(format!("voxel size must be positive, got {size}")));
    }
    let frame = if pca_align { Some(pca_axes(points)?) } else { None };
    let local: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let p = point3(points.row(i));
            frame.as_ref().map_or(p, |f| f.to_local(p))
        })
        .collect();
    let mut anchor = [f64::INFINITY; 3];
    for p in &local {
        for a in 0..3 {
            anchor[a] = anchor[a].min(p[a]);
        }
    }
    let anchor = anchor.map(|m| (m / size).floor() * size);
    let key_of = |p: &[f64; 3]| -> [i64; 3] { std::array::from_fn(|a| ((p[a] - anchor[a]) / size).floor() as i64) };

    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in local.iter().enumerate() {
        cells.entry(key_of(p)).or_default().push(i);
    }
    let f = values.cols();
    let mut centers = Matrix::zeros(cells.len(), 3);
    let mut means = Matrix::zeros(cells.len(), f);
    let mut assignment = vec![0; n];
    let mut keys = Vec::with_capacity(cells.len());
    for (r, (key, members)) in cells.iter().enumerate() {
        let c_local: [f64; 3] = std::array::from_fn(|a| anchor[a] + (key[a] as f64 + 0.5) * size);
        let c = frame.as_ref().map_or(c_local, |fr| fr.to_global(c_local));
        centers.row_mut(r).copy_from_slice(&c);
        let row = means.row_mut(r);
        for &i in members {
            assignment[i] = r;
            for (o, v) in row.iter_mut().zip(values.row(i)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|o| *o /= members.len() as f64);
        keys.push(*key);
    }
    Ok(Voxelization {
        centers,
        means,
        assignment,
        keys,
    })
}

/// Snaps every entry to one of `levels` evenly spaced values spanning the
/// global range (both ends included). Exact midpoints go to the lower level.
pub fn quantize(x: &Matrix, levels: usize) -> Result<Matrix, LofiError> {
    if levels < 2 {
        return Err(LofiError::Invalid(format!("quantization needs at least 2 levels, got {levels}")));
    }
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if x.data().is_empty() || lo == hi {
        return Ok(x.clone());
    }
    let top = levels - 1;
    let step = (hi - lo) / top as f64;
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        let t = (*v - lo) / step;
        let i = ((t - 0.5).ceil().max(0.0) as usize).min(top);
        *v = if i == top { hi } else { lo + i as f64 * step };
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma^2)` noise (row-major draw order) and a constant.
pub fn perturb(x: &Matrix, sigma: f64, bias: f64, rng: &mut impl Rng) -> Result<Matrix, LofiError> {
    if !(sigma >= 0.0 && sigma.is_finite()) || !bias.is_finite() {
        return Err(LofiError::Invalid(format!("noise sigma {sigma} / bias {bias}")));
    }
    let mut out = x.clone();
    if sigma > 0.0 {
        let normal = Normal::new(bias, sigma).map_err(|e| LofiError::Invalid(e.to_string()))?;
        for v in out.as_mut_slice() {
            *v += normal.sample(rng);
        }
    } else {
        out.as_mut_slice().iter_mut().for_each(|v| *v += bias);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Stage {
    PodTruncate {
        energy: f64,
    },
    Fps {
        m: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    KnnAverage {
        m: usize,
        k: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Voxelize {
        size: f64,
        #[serde(default)]
        pca_align: bool,
    },
    Quantize {
        levels: usize,
    },
    Noise {
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Bias {
        c: f64,
    },
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::PodTruncate { .. } => "pod_truncate",
            Stage::Fps { .. } => "fps",
            Stage::KnnAverage { .. } => "knn_average",
            Stage::Voxelize { .. } => "voxelize",
            Stage::Quantize { .. } => "quantize",
            Stage::Noise { .. } => "noise",
            Stage::Bias { .. } => "bias",
        }
    }

    fn explicit_seed(&self) -> Option<Option<u64>> {
        match self {
            Stage::Fps { seed, .. } | Stage::KnnAverage { seed, .. } | Stage::Noise { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}

/// Ordered degradation stages plus the master seed for stages without an
/// explicit one (0 when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub op: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub nodes_in: usize,
    pub nodes_out: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_star: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retained_energy: Option<f64>,
    /// Selected nodes, as indices into the original node list.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub recipe: DegradationRecipe,
    pub stages: Vec<StageRecord>,
    pub snapshot_names: Vec<String>,
}

impl DegradationRecipe {
    pub fn validate(&self) -> Result<(), LofiError> {
        for (i, st) in self.stages.iter().enumerate() {
            let bad = |msg: String| Err(LofiError::Invalid(format!("stage {i} ({}): {msg}", st.name())));
            match *st {
                Stage::PodTruncate { energy } if !(energy > 0.0 && energy <= 1.0) => {
                    return bad(format!("energy {energy} outside (0, 1]"))
                }
                Stage::Fps { m: 0, .. } => return bad("m must be positive".into()),
                Stage::KnnAverage { m, k, .. } if m == 0 || k == 0 => return bad("m and k must be positive".into()),
                Stage::Voxelize { size, .. } if !(size > 0.0 && size.is_finite()) => {
                    return bad(format!("size {size} must be positive"))
                }
                Stage::Quantize { levels } if levels < 2 => return bad("levels must be at least 2".into()),
                Stage::Noise { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => {
                    return bad(format!("sigma {sigma} must be non-negative"))
                }
                Stage::Bias { c } if !c.is_finite() => return bad("bias must be finite".into()),
                _ => {}
            }
        }
        Ok(())
    }

    /// Seed used by stage `index`: the explicit one or a stream derived from
    /// the master seed and the stage position.
    pub fn stage_seed(&self, index: usize) -> Option<u64> {
        self.stages[index]
            .explicit_seed()
            .map(|s| s.unwrap_or_else(|| rng::sub_seed(self.seed.unwrap_or(0), "lofi-stage", index as u64)))
    }

    /// Runs every stage on `set`. Node-level stages act on shared node
    /// coordinates, so one mask serves all snapshots.
    pub fn apply(&self, set: &SnapshotSet) -> Result<(SnapshotSet, Provenance), LofiError> {
        self.validate()?;
        let mut fields = set.fields().clone();
        let mut coords = set.coords().clone();
        let mut node_ids = set.node_ids().to_vec();
        // original node index behind each current row, while rows are still original nodes
        let mut origin: Option<Vec<usize>> = Some((0..set.n_nodes()).collect());
        let mut records = Vec::with_capacity(self.stages.len());

        for (index, stage) in self.stages.iter().enumerate() {
            let seed = self.stage_seed(index);
            let mut rec = StageRecord {
                index,
                op: stage.name().to_owned(),
                seed,
                nodes_in: fields.rows(),
                ..StageRecord::default()
            };
            let mut rng = seed.map(|s| rng::stream(s, "lofi", 0));
            match *stage {
                Stage::PodTruncate { energy } => {
                    let pod = pod_truncate(&fields, energy)?;
                    rec.r_star = Some(pod.r_star);
                    rec.retained_energy = Some(pod.retained_energy);
                    fields = pod.reconstruction;
                }
                Stage::Fps { m, .. } => {
                    let idx = fps(&coords, m, rng.as_mut().expect("fps is seeded"))?;
                    fields = fields.select_rows(&idx);
                    coords = coords.select_rows(&idx);
                    node_ids = idx.iter().map(|&i| node_ids[i].clone()).collect();
                    origin = origin.map(|o| idx.iter().map(|&i| o[i]).collect());
                    rec.mask = origin.clone();
                }
                Stage::KnnAverage { m, k, .. } => {
                    let centers = fps(&coords, m, rng.as_mut().expect("knn is seeded"))?;
                    fields = knn_average(&coords, &fields, &centers, k)?;
                    coords = coords.select_rows(&centers);
                    node_ids = centers.iter().map(|&i| node_ids[i].clone()).collect();
                    origin = origin.map(|o| centers.iter().map(|&i| o[i]).collect());
                    rec.mask = origin.clone();
                }
                Stage::Voxelize { size, pca_align } => {
                    let vox = voxelize(&coords, &fields, size, pca_align)?;
                    fields = vox.means;
                    coords = vox.centers;
                    node_ids = (0..fields.rows()).map(|r| format!("v{r}")).collect();
                    origin = None;
                }
                Stage::Quantize { levels } => fields = quantize(&fields, levels)?,
                Stage::Noise { sigma, .. } => {
                    fields = perturb(&fields, sigma, 0.0, rng.as_mut().expect("noise is seeded"))?;
                }
                Stage::Bias { c } => {
                    fields.as_mut_slice().iter_mut().for_each(|v| *v += c);
                }
            }
            rec.nodes_out = fields.rows();
            log::debug!("lofi stage {index} {}: {} -> {} nodes", rec.op, rec.nodes_in, rec.nodes_out);
            records.push(rec);
        }
        let out = set.with_nodes(fields, coords, node_ids)?;
        let prov = Provenance {
            recipe: self.clone(),
            stages: records,
            snapshot_names: set.names().to_vec(),
        };
        Ok((out, prov))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn cloud(n: usize, dims: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, dims, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pod_rank_one_is_exact() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0];
        let x = Matrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        for e in [0.1, 0.5, 1.0] {
            let p = pod_truncate(&x, e).unwrap();
            assert_eq!(p.r_star, 1);
            for (a, b) in p.reconstruction.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn pod_constructed_spectrum() {
        let x = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = pod_truncate(&x, 0.9).unwrap();
        assert_eq!(p.r_star, 1);
        assert_eq!(pod_truncate(&x, 0.95).unwrap().r_star, 2);
        assert_eq!(pod_truncate(&x, 1.0).unwrap().r_star, 2);
        assert!(pod_truncate(&x, 0.0).is_err());
        assert!(pod_truncate(&x, 1.5).is_err());
    }

    #[test]
    fn fps_colinear_forced_order() {
        let pts = Matrix::from_fn(11, 1, |i, _| i as f64);
        assert_eq!(fps_from(&pts, 3, 0).unwrap(), vec![0, 10, 5]);
        let all = fps_from(&pts, 11, 0).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..11).collect::<Vec<_>>());
        assert!(fps_from(&pts, 12, 0).is_err());
    }

    #[test]
    fn fps_random_start_is_seeded() {
        let pts = cloud(30, 3, 1);
        let a = fps(&pts, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = fps(&pts, 5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    fn brute_fps_check(pts: &Matrix, sel: &[usize]) {
        for step in 1..sel.len() {
            let prev = &sel[..step];
            let score = |i: usize| {
                prev.iter()
                    .map(|&p| {
                        let d: f64 = pts.row(i).iter().zip(pts.row(p)).map(|(a, b)| (a - b) * (a - b)).sum();
                        d
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            let mut best = None;
            for i in 0..pts.rows() {
                if prev.contains(&i) {
                    continue;
                }
                match best {
                    None => best = Some((i, score(i))),
                    Some((_, s)) if score(i) > s => best = Some((i, score(i))),
                    _ => {}
                }
            }
            assert_eq!(sel[step], best.unwrap().0, "step {step}");
        }
    }

    #[test]
    fn fps_matches_exhaustive_argmax() {
        let pts = cloud(40, 3, 7);
        let sel = fps(&pts, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        brute_fps_check(&pts, &sel);
    }

    #[test]
    fn knn_trivial_cases() {
        let pts = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let vals = Matrix::from_rows(&[[0.0], [4.0]]).unwrap();
        let one = knn_average(&pts, &vals, &[0, 1], 1).unwrap();
        assert_eq!(one.data(), &[0.0, 4.0]);
        let two = knn_average(&pts, &vals, &[0, 1], 2).unwrap();
        assert_eq!(two.data(), &[2.0, 2.0]);
        assert!(knn_average(&pts, &vals, &[0], 3).is_err());
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        let pts = cloud(50, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let vals = Matrix::from_fn(50, 4, |_, _| rng.random_range(-1.0..1.0));
        let centers = [0, 7, 19, 49];
        let got = knn_average(&pts, &vals, &centers, 5).unwrap();
        for (r, &c) in centers.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..50)
                .map(|i| {
                    let d: f64 = (0..3).map(|a| (pts.get(i, a) - pts.get(c, a)).powi(2)).sum();
                    (d, i)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for f in 0..4 {
                let mut s = 0.0;
                for &(_, i) in &all[..5] {
                    s += vals.get(i, f);
                }
                assert_eq!(got.get(r, f), s / 5.0);
            }
        }
    }

    #[test]
    fn voxel_single_cell_example() {
        let pts = Matrix::from_rows(&[[0.1, 0.0, 0.0], [0.9, 0.0, 0.0]]).unwrap();
        let vals = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let v = voxelize(&pts, &vals, 1.0, false).unwrap();
        assert_eq!(v.centers.rows(), 1);
        assert_eq!(v.centers.get(0, 0), 0.5);
        assert_eq!(v.means.data(), &[2.0]);
    }

    #[test]
    fn tiny_voxels_keep_every_point() {
        let pts = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        let vals = Matrix::from_rows(&[[5.0], [6.0], [7.0]]).unwrap();
        let v = voxelize(&pts, &vals, 0.1, false).unwrap();
        assert_eq!(v.centers.rows(), 3);
        let mut means: Vec<f64> = v.means.data().to_vec();
        means.sort_by(f64::total_cmp);
        assert_eq!(means, vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn voxel_means_match_hash_map_oracle() {
        let pts = cloud(200, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals = Matrix::from_fn(200, 2, |_, _| rng.random_range(0.0..1.0));
        let size = 0.37;
        let v = voxelize(&pts, &vals, size, false).unwrap();
        let mut anchor = [f64::INFINITY; 3];
        for i in 0..200 {
            for a in 0..3 {
                anchor[a] = anchor[a].min(pts.get(i, a));
            }
        }
        let anchor = anchor.map(|m| (m / size).floor() * size);
        let mut oracle: HashMap<[i64; 3], (usize, [f64; 2])> = HashMap::new();
        for i in 0..200 {
            let key = [0, 1, 2].map(|a| ((pts.get(i, a) - anchor[a]) / size).floor() as i64);
            let e = oracle.entry(key).or_insert((0, [0.0; 2]));
            e.0 += 1;
            e.1[0] += vals.get(i, 0);
            e.1[1] += vals.get(i, 1);
        }
        assert_eq!(oracle.len(), v.keys.len());
        let mut sorted = v.keys.clone();
        sorted.sort();
        assert_eq!(sorted, v.keys);
        for (r, key) in v.keys.iter().enumerate() {
            let (cnt, sums) = oracle[key];
            assert_eq!(v.means.get(r, 0), sums[0] / cnt as f64);
            assert_eq!(v.means.get(r, 1), sums[1] / cnt as f64);
        }
    }

    #[test]
    fn pca_voxelization_follows_rigid_motion() {
        // anisotropic 4x2x2 grid centered at the origin; every cell boundary
        // sits well away from the points under either axis orientation
        let mut pts = Vec::new();
        for &x in &[-1.5, -0.5, 0.5, 1.5] {
            for &y in &[-0.5, 0.5] {
                for &z in &[-0.25, 0.25] {
                    pts.push([x, y, z]);
                }
            }
        }
        let base = Matrix::from_rows(&pts).unwrap();
        let vals = Matrix::from_fn(16, 1, |i, _| i as f64);
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let rot = [[c, -s, 0.0], [s * 0.8, c * 0.8, 0.6], [-s * 0.6, -c * 0.6, 0.8]];
        let shift = [3.0, -2.0, 0.5];
        let moved = Matrix::from_fn(16, 3, |i, a| (0..3).map(|b| rot[a][b] * pts[i][b]).sum::<f64>() + shift[a]);

        let v0 = voxelize(&base, &vals, 1.6, true).unwrap();
        let v1 = voxelize(&moved, &vals, 1.6, true).unwrap();
        assert_eq!(v0.centers.rows(), 8);
        assert_eq!(v1.centers.rows(), 8);
        for r in 0..8 {
            // same member sets, possibly in another voxel order
            let members0: Vec<usize> = (0..16).filter(|&i| v0.assignment[i] == r).collect();
            let r1 = v1.assignment[members0[0]];
            let members1: Vec<usize> = (0..16).filter(|&i| v1.assignment[i] == r1).collect();
            assert_eq!(members0, members1);
            assert_eq!(v0.means.row(r), v1.means.row(r1));
            let c0 = v0.centers.row(r);
            let want: Vec<f64> = (0..3).map(|a| (0..3).map(|b| rot[a][b] * c0[b]).sum::<f64>() + shift[a]).collect();
            for a in 0..3 {
                assert!((v1.centers.get(r1, a) - want[a]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn quantize_examples() {
        let x = Matrix::new(1, 3, vec![0.0, 0.3, 1.0]).unwrap();
        assert_eq!(quantize(&x, 2).unwrap().data(), &[0.0, 0.0, 1.0]);
        let mid = Matrix::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(quantize(&mid, 2).unwrap().data(), &[0.0, 0.0, 1.0]);
        let aligned = Matrix::new(1, 4, vec![0.0, 0.5, 1.0, 0.5]).unwrap();
        assert_eq!(quantize(&aligned, 3).unwrap(), aligned);
        let flat = Matrix::new(2, 2, vec![4.0; 4]).unwrap();
        assert_eq!(quantize(&flat, 5).unwrap(), flat);
        assert!(quantize(&x, 1).is_err());
    }

    #[test]
    fn perturb_trivial_and_statistics() {
        let x = cloud(3, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb(&x, 0.0, 0.0, &mut rng).unwrap(), x);
        let shifted = perturb(&x, 0.0, 5.0, &mut rng).unwrap();
        for (a, b) in shifted.data().iter().zip(x.data()) {
            assert_eq!(*a, b + 5.0);
        }
        let z = Matrix::zeros(1, 100_000);
        let c = 1.5;
        let y = perturb(&z, 1.0, c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let n = y.data().len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let std = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - c).abs() <= 0.02, "mean {mean}");
        assert!((std - 1.0).abs() <= 0.02, "std {std}");
        assert!(perturb(&z, -1.0, 0.0, &mut rng).is_err());
    }

    fn line_set(d: usize, n: usize) -> SnapshotSet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fields = Matrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
        let coords = Matrix::from_fn(d, 3, |i, a| if a == 0 { i as f64 / d as f64 } else { 0.0 });
        SnapshotSet::without_params(
            fields,
            coords,
            (0..d).map(|i| format!("n{i}")).collect(),
            (0..n).map(|k| format!("s{k}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn recipe_replays_bit_identically() {
        let set = line_set(40, 6);
        let recipe = DegradationRecipe {
            seed: Some(77),
            stages: vec![
                Stage::PodTruncate { energy: 0.9 },
                Stage::Fps { m: 12, seed: None },
                Stage::Noise { sigma: 0.01, seed: None },
                Stage::Quantize { levels: 16 },
            ],
        };
        let json = serde_json::to_string(&recipe).unwrap();
        let back: DegradationRecipe = serde_json::from_str(&json).unwrap();
        let (a, pa) = recipe.apply(&set).unwrap();
        let (b, pb) = back.apply(&set).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.n_nodes(), 12);
        assert_eq!(pa.stages[1].mask.as_ref().unwrap().len(), 12);
        assert!(pa.stages[0].r_star.unwrap() >= 1);
        // FPS keeps node ids of the original nodes it picked
        for (id, &orig) in a.node_ids().iter().zip(pa.stages[1].mask.as_ref().unwrap()) {
            assert_eq!(id, &format!("n{orig}"));
        }
    }

    #[test]
    fn inserting_a_stage_keeps_later_explicit_streams() {
        let set = line_set(30, 3);
        let base = DegradationRecipe {
            seed: Some(1),
            stages: vec![Stage::Fps { m: 10, seed: Some(5) }],
        };
        let longer = DegradationRecipe {
            seed: Some(1),
            stages: vec![Stage::Bias { c: 0.0 }, Stage::Fps { m: 10, seed: Some(5) }],
        };
        let (a, _) = base.apply(&set).unwrap();
        let (b, _) = longer.apply(&set).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recipe_json_schema() {
        let text = r#"{"seed": 3, "stages": [
            {"op": "pod_truncate", "energy": 0.96},
            {"op": "fps", "m": 5},
            {"op": "knn_average", "m": 4, "k": 2, "seed": 9},
            {"op": "voxelize", "size": 0.2, "pca_align": true},
            {"op": "quantize", "levels": 8},
            {"op": "noise", "sigma": 0.1},
            {"op": "bias", "c": -0.5}
        ]}"#;
        let r: DegradationRecipe = serde_json::from_str(text).unwrap();
        assert_eq!(r.stages.len(), 7);
        assert_eq!(r.stage_seed(2), Some(9));
        assert_eq!(r.stage_seed(0), None);
        let bad = DegradationRecipe {
            seed: None,
            stages: vec![Stage::Quantize { levels: 1 }],
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn pod_bracketing_and_error_identity(seed in any::<u64>(), rows in 2usize..20, cols in 2usize..12, energy in 0.05f64..1.0) {
            let x = cloud(rows, cols, seed);
            let p = pod_truncate(&x, energy).unwrap();
            let sq: Vec<f64> = p.singular_values.iter().map(|s| s * s).collect();
            let total: f64 = sq.iter().sum();
            let e = |r: usize| sq[..r].iter().sum::<f64>() / total;
            prop_assert!(e(p.r_star) >= energy);
            if p.r_star > 1 {
                prop_assert!(e(p.r_star - 1) < energy);
            }
            let err = x.sub(&p.reconstruction).unwrap().frobenius_norm().powi(2);
            let tail: f64 = sq[p.r_star..].iter().sum();
            prop_assert!((err - tail).abs() <= 1e-8 * total.max(1e-300));
        }

        #[test]
        fn fps_greedy_optimal(seed in any::<u64>(), n in 2usize..64, dims in 1usize..4) {
            let pts = cloud(n, dims, seed);
            let m = 1 + (seed as usize % n);
            let sel = fps(&pts, m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(sel.len(), m);
            brute_fps_check(&pts, &sel);
        }

        #[test]
        fn quantize_levels_and_idempotence(seed in any::<u64>(), levels in 2usize..40) {
            let x = cloud(7, 9, seed);
            let q = quantize(&x, levels).unwrap();
            let mut distinct: Vec<f64> = q.data().to_vec();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            prop_assert!(distinct.len() <= levels);
            prop_assert_eq!(quantize(&q, levels).unwrap(), q);
        }
    }
}
