//! Modulated conformal prediction and multi-split calibration.
//!
//! Residuals are normalized per component by a modulation vector `s`,
//! aggregated into one nonconformity score per sample, and the `k̂`-th
//! smallest calibration score scales `s` into a per-component radius.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::mfae::{MfaeError, MfaeModel, Pairs};
use crate::rng;

pub const S_FLOOR: f64 = 1e-8;
pub const DEFAULT_CAL_FRACTION: f64 = 0.3;
pub const DEFAULT_SPLITS: usize = 30;
// guards ceil() against (n+1)(1-delta) landing a rounding error above an integer
const K_HAT_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error("{n} calibration samples cannot support delta = {delta}: need rank {k_hat} <= {n}")]
    Insufficient { n: usize, delta: f64, k_hat: usize },
    #[error("split {split}: {source}")]
    Split {
        split: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[serde(rename = "linf")]
    LInf,
    NormalizedL2,
}

impl std::str::FromStr for ScoreKind {
    type Err = ConformalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linf" => Ok(ScoreKind::LInf),
            "normalized_l2" => Ok(ScoreKind::NormalizedL2),
            other => Err(ConformalError::Invalid(format!("unknown score '{other}'"))),
        }
    }
}

fn check_delta(delta: f64) -> Result<(), ConformalError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::Invalid(format!("delta must be in (0, 1), got {delta}")))
    }
}

/// Per-component population standard deviation of `residuals` (`n x D`),
/// floored at `s_floor`.
pub fn modulation(residuals: &Matrix, s_floor: f64) -> Result<Vec<f64>, ConformalError> {
    let (n, d) = residuals.shape();
    if n < 2 {
        return Err(ConformalError::Invalid(format!("modulation needs at least 2 residual rows, got {n}")));
    }
    if !(s_floor > 0.0) {
        return Err(ConformalError::Invalid(format!("s_floor must be positive, got {s_floor}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(residuals.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(residuals.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    Ok(var.into_iter().map(|v| (v / n as f64).sqrt().max(s_floor)).collect())
}

/// One nonconformity score per residual row.
pub fn scores(residuals: &Matrix, s: &[f64], kind: ScoreKind) -> Result<Vec<f64>, ConformalError> {
    if residuals.cols() != s.len() || s.is_empty() {
        return Err(ConformalError::Shape(format!(
            "{} residual columns, {} modulation entries",
            residuals.cols(),
            s.len()
        )));
    }
    if let Some(j) = s.iter().position(|v| !(*v > 0.0)) {
        return Err(ConformalError::Invalid(format!("modulation entry {j} is not positive")));
    }
    let d = s.len() as f64;
    Ok((0..residuals.rows())
        .map(|i| {
            let r = residuals.row(i).iter().zip(s).map(|(e, sj)| e.abs() / sj);
            match kind {
                ScoreKind::LInf => r.fold(0.0, f64::max),
                ScoreKind::NormalizedL2 => (r.map(|v| v * v).sum::<f64>() / d).sqrt(),
            }
        })
        .collect())
}

/// `k̂ = ceil((n + 1)(1 - delta))`, or an error when it exceeds `n`.
pub fn k_hat(n: usize, delta: f64) -> Result<usize, ConformalError> {
    check_delta(delta)?;
    let k = (((n + 1) as f64) * (1.0 - delta) - K_HAT_EPS).ceil().max(1.0) as usize;
    if k > n {
        return Err(ConformalError::Insufficient { n, delta, k_hat: k });
    }
    Ok(k)
}

/// The `k̂`-th smallest score.
pub fn critical_quantile(scores: &[f64], delta: f64) -> Result<f64, ConformalError> {
    if scores.is_empty() {
        return Err(ConformalError::Invalid("no calibration scores".into()));
    }
    let k = k_hat(scores.len(), delta)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub delta: f64,
    pub kind: ScoreKind,
    pub s: Vec<f64>,
    pub k_s: f64,
    pub radius: Vec<f64>,
}

impl ConformalCalibration {
    /// `s` from `modulation_residuals`, `k_s` from `calibration_residuals`.
    pub fn fit(
        modulation_residuals: &Matrix,
        calibration_residuals: &Matrix,
        delta: f64,
        kind: ScoreKind,
        s_floor: f64,
    ) -> Result<Self, ConformalError> {
        let s = modulation(modulation_residuals, s_floor)?;
        let sc = scores(calibration_residuals, &s, kind)?;
        let k_s = critical_quantile(&sc, delta)?;
        let radius = s.iter().map(|sj| k_s * sj).collect();
        Ok(Self {
            delta,
            kind,
            s,
            k_s,
            radius,
        })
    }
}

/// `(yhat - R, yhat + R)`.
pub fn band(pred: &[f64], radius: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ConformalError> {
    if pred.len() != radius.len() {
        return Err(ConformalError::Shape(format!(
            "prediction length {} vs radius length {}",
            pred.len(),
            radius.len()
        )));
    }
    let lower = pred.iter().zip(radius).map(|(y, r)| y - r).collect();
    let upper = pred.iter().zip(radius).map(|(y, r)| y + r).collect();
    Ok((lower, upper))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Fraction of samples with every component inside the band.
    pub nominal: f64,
    /// Fraction of all components inside the band.
    pub pointwise: f64,
    pub width_mean: f64,
    pub width_std: f64,
}

/// Coverage of explicit bands (`n x D` each). Membership is inclusive;
/// width statistics pool every `upper - lower` entry.
pub fn coverage_bands(lower: &Matrix, upper: &Matrix, truth: &Matrix) -> Result<Coverage, ConformalError> {
    if lower.shape() != truth.shape() || upper.shape() != truth.shape() {
        return Err(ConformalError::Shape(format!(
            "bands {:?}/{:?} vs truth {:?}",
            lower.shape(),
            upper.shape(),
            truth.shape()
        )));
    }
    let (n, d) = truth.shape();
    if n == 0 || d == 0 {
        return Err(ConformalError::Invalid("coverage of an empty set".into()));
    }
    let mut full = 0usize;
    let mut inside = 0usize;
    for i in 0..n {
        let hits = truth
            .row(i)
            .iter()
            .zip(lower.row(i).iter().zip(upper.row(i)))
            .filter(|(t, (lo, hi))| *lo <= *t && *t <= *hi)
            .count();
        inside += hits;
        if hits == d {
            full += 1;
        }
    }
    let widths: Vec<f64> = upper.data().iter().zip(lower.data()).map(|(u, l)| u - l).collect();
    let (width_mean, width_std) = mean_std(&widths);
    Ok(Coverage {
        nominal: full as f64 / n as f64,
        pointwise: inside as f64 / (n * d) as f64,
        width_mean,
        width_std,
    })
}

/// Coverage of `pred ± radius` against `truth` (`n x D`).
pub fn coverage(pred: &Matrix, radius: &[f64], truth: &Matrix) -> Result<Coverage, ConformalError> {
    if pred.cols() != radius.len() {
        return Err(ConformalError::Shape(format!(
            "{} prediction columns, radius length {}",
            pred.cols(),
            radius.len()
        )));
    }
    let lower = Matrix::from_fn(pred.rows(), pred.cols(), |i, j| pred.get(i, j) - radius[j]);
    let upper = Matrix::from_fn(pred.rows(), pred.cols(), |i, j| pred.get(i, j) + radius[j]);
    coverage_bands(&lower, &upper, truth)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Median; even counts average the two middle values.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty list");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Median epoch; an even count rounds the middle average up.
pub fn median_epoch(epochs: &[usize]) -> usize {
    assert!(!epochs.is_empty(), "median of an empty list");
    let mut v = epochs.to_vec();
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]).div_ceil(2)
    }
}

/// Outcome of fine-tuning on one calibration split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    /// `truth - prediction` on the calibration part (`n_cal x D`).
    pub cal_residuals: Matrix,
    pub best_epoch: usize,
}

/// Trains a fresh model on `train_idx` while monitoring `cal_idx`.
pub trait SplitTrainer: Sync {
    type Error: std::error::Error + Send + Sync + 'static;

    fn n_pairs(&self) -> usize;

    fn train_split(&self, split: usize, train_idx: &[usize], cal_idx: &[usize]) -> Result<SplitOutcome, Self::Error>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MscpConfig {
    pub splits: usize,
    pub cal_fraction: f64,
    pub delta: f64,
    pub kind: ScoreKind,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub s_floor: f64,
}

impl Default for MscpConfig {
    fn default() -> Self {
        Self {
            splits: DEFAULT_SPLITS,
            cal_fraction: DEFAULT_CAL_FRACTION,
            delta: 0.1,
            kind: ScoreKind::LInf,
            seed: 0,
            workers: 0,
            s_floor: S_FLOOR,
        }
    }
}

impl MscpConfig {
    /// Calibration size for `n` pairs: `round(cal_fraction * n)` kept in `1..n`.
    pub fn n_cal(&self, n: usize) -> usize {
        ((self.cal_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    }

    /// Random disjoint split for index `b`, both halves sorted.
    pub fn split_indices(&self, n: usize, b: usize) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(self.seed, "mscp-split", b as u64));
        let n_cal = self.n_cal(n);
        let mut cal = idx[..n_cal].to_vec();
        let mut train = idx[n_cal..].to_vec();
        cal.sort_unstable();
        train.sort_unstable();
        (train, cal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub index: usize,
    pub train_idx: Vec<usize>,
    pub cal_idx: Vec<usize>,
    pub s: Vec<f64>,
    pub k_s: f64,
    pub radius: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MscpResult {
    pub delta: f64,
    pub kind: ScoreKind,
    #[serde(rename = "B")]
    pub splits: usize,
    pub cal_fraction: f64,
    pub seed: u64,
    pub s_floor: f64,
    pub per_split: Vec<SplitRecord>,
    /// Component-wise median of the split radii.
    pub r_star: Vec<f64>,
    /// Median of the split best epochs.
    pub e_star: usize,
}

impl MscpResult {
    pub fn from_records(cfg: &MscpConfig, per_split: Vec<SplitRecord>) -> Result<Self, ConformalError> {
        if per_split.is_empty() {
            return Err(ConformalError::Invalid("no splits".into()));
        }
        let d = per_split[0].radius.len();
        if per_split.iter().any(|r| r.radius.len() != d) {
            return Err(ConformalError::Shape("split radii differ in length".into()));
        }
        let r_star = (0..d)
            .map(|j| median(&per_split.iter().map(|r| r.radius[j]).collect::<Vec<_>>()))
            .collect();
        let e_star = median_epoch(&per_split.iter().map(|r| r.best_epoch).collect::<Vec<_>>());
        Ok(Self {
            delta: cfg.delta,
            kind: cfg.kind,
            splits: per_split.len(),
            cal_fraction: cfg.cal_fraction,
            seed: cfg.seed,
            s_floor: cfg.s_floor,
            per_split,
            r_star,
            e_star,
        })
    }
}

/// Multi-split calibration: `splits` independent random calibration splits,
/// each fine-tuned and calibrated on its own, aggregated by medians.
pub fn mscp<T: SplitTrainer>(trainer: &T, cfg: &MscpConfig) -> Result<MscpResult, ConformalError> {
    check_delta(cfg.delta)?;
    if cfg.splits == 0 {
        return Err(ConformalError::Invalid("need at least one split".into()));
    }
    if !(cfg.cal_fraction > 0.0 && cfg.cal_fraction < 1.0) {
        return Err(ConformalError::Invalid(format!(
            "cal_fraction must be in (0, 1), got {}",
            cfg.cal_fraction
        )));
    }
    let n = trainer.n_pairs();
    if n < 3 {
        return Err(ConformalError::Invalid(format!("{n} training pairs are too few to split")));
    }
    let n_cal = cfg.n_cal(n);
    if n_cal < 2 {
        return Err(ConformalError::Invalid(format!(
            "calibration part of {n_cal} sample cannot estimate a spread"
        )));
    }
    k_hat(n_cal, cfg.delta)?;

    let run = |b: usize| -> Result<SplitRecord, ConformalError> {
        let (train_idx, cal_idx) = cfg.split_indices(n, b);
        let out = trainer
            .train_split(b, &train_idx, &cal_idx)
            .map_err(|e| ConformalError::Split {
                split: b,
                source: Box::new(e),
            })?;
        let cal = ConformalCalibration::fit(&out.cal_residuals, &out.cal_residuals, cfg.delta, cfg.kind, cfg.s_floor)
            .map_err(|e| ConformalError::Split {
                split: b,
                source: Box::new(e),
            })?;
        log::info!("split {b}: k_s = {:.4}, best epoch {}", cal.k_s, out.best_epoch);
        Ok(SplitRecord {
            index: b,
            train_idx,
            cal_idx,
            s: cal.s,
            k_s: cal.k_s,
            radius: cal.radius,
            best_epoch: out.best_epoch,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| ConformalError::Invalid(format!("thread pool: {e}")))?;
    let records: Vec<Result<SplitRecord, ConformalError>> =
        pool.install(|| (0..cfg.splits).into_par_iter().map(run).collect());
    let records = records.into_iter().collect::<Result<Vec<_>, _>>()?;
    MscpResult::from_records(cfg, records)
}

/// Fine-tunes clones of a pretrained model on index subsets of shared pairs.
pub struct MfaeSplitTrainer<'a> {
    pub model: &'a MfaeModel,
    pub x_lf: &'a Matrix,
    pub y_hf: &'a Matrix,
    pub max_epochs: usize,
    pub patience: usize,
}

impl SplitTrainer for MfaeSplitTrainer<'_> {
    type Error = MfaeError;

    fn n_pairs(&self) -> usize {
        self.x_lf.rows()
    }

    fn train_split(&self, _split: usize, train_idx: &[usize], cal_idx: &[usize]) -> Result<SplitOutcome, MfaeError> {
        let (tx, ty) = (self.x_lf.select_rows(train_idx), self.y_hf.select_rows(train_idx));
        let (cx, cy) = (self.x_lf.select_rows(cal_idx), self.y_hf.select_rows(cal_idx));
        let (model, report) = self.model.fine_tune(
            Pairs { x_lf: &tx, y_hf: &ty },
            &[],
            self.max_epochs,
            Some((Pairs { x_lf: &cx, y_hf: &cy }, self.patience)),
        )?;
        let pred = model.predict(&cx)?;
        let cal_residuals = cy.sub(&pred).map_err(crate::data::DataError::from)?;
        Ok(SplitOutcome {
            cal_residuals,
            best_epoch: report.best_epoch,
        })
    }
}
