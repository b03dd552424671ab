//! Snapshot sets, CSV I/O, normalization, resampling, splitting and metrics.
//!
//! Fields are stored node-major (`D x N`, one column per snapshot) as in the
//! CSV files. Networks consume sample-major matrices (`N x D`); use
//! [`SnapshotSet::samples`] to get one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::rng;

pub const STD_FLOOR: f64 = 1e-8;
const COORD_NAMES: [&str; 3] = ["x", "y", "z"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    fields: Matrix,
    coords: Matrix,
    node_ids: Vec<String>,
    names: Vec<String>,
    params: Matrix,
    param_names: Vec<String>,
}

impl SnapshotSet {
    pub fn new(
        fields: Matrix,
        coords: Matrix,
        node_ids: Vec<String>,
        names: Vec<String>,
        params: Matrix,
        param_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let (d, n) = fields.shape();
        if coords.rows() != d || node_ids.len() != d {
            return Err(DataError::Invalid(format!(
                "{d} field rows but {} coordinate rows and {} node ids",
                coords.rows(),
                node_ids.len()
            )));
        }
        if coords.cols() == 0 || coords.cols() > 3 {
            return Err(DataError::Invalid(format!(
                "coordinates need 1 to 3 columns, got {}",
                coords.cols()
            )));
        }
        if names.len() != n || params.rows() != n || params.cols() != param_names.len() {
            return Err(DataError::Invalid(format!(
                "{n} snapshots but {} names and {}x{} params for {} parameter names",
                names.len(),
                params.rows(),
                params.cols(),
                param_names.len()
            )));
        }
        check_unique(&names, "snapshot name")?;
        check_unique(&node_ids, "node id")?;
        check_unique(&param_names, "parameter name")?;
        Ok(Self {
            fields,
            coords,
            node_ids,
            names,
            params,
            param_names,
        })
    }

    /// Set without design parameters.
    pub fn without_params(fields: Matrix, coords: Matrix, node_ids: Vec<String>, names: Vec<String>) -> Result<Self, DataError> {
        let n = fields.cols();
        Self::new(fields, coords, node_ids, names, Matrix::zeros(n, 0), Vec::new())
    }

    pub fn fields(&self) -> &Matrix {
        &self.fields
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &Matrix {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn n_nodes(&self) -> usize {
        self.fields.rows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.fields.cols()
    }

    /// Sample-major copy of the fields (`N x D`).
    pub fn samples(&self) -> Matrix {
        self.fields.transpose()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Subset of snapshots, in the order given.
    pub fn select_snapshots(&self, idx: &[usize]) -> SnapshotSet {
        SnapshotSet {
            fields: self.fields.select_cols(idx),
            coords: self.coords.clone(),
            node_ids: self.node_ids.clone(),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            params: self.params.select_rows(idx),
            param_names: self.param_names.clone(),
        }
    }

    /// Same snapshots and parameters on a different node set.
    pub fn with_nodes(&self, fields: Matrix, coords: Matrix, node_ids: Vec<String>) -> Result<SnapshotSet, DataError> {
        Self::new(
            fields,
            coords,
            node_ids,
            self.names.clone(),
            self.params.clone(),
            self.param_names.clone(),
        )
    }

    /// Replaces the fields, keeping nodes, names and parameters.
    pub fn with_fields(&self, fields: Matrix) -> Result<SnapshotSet, DataError> {
        self.with_nodes(fields, self.coords.clone(), self.node_ids.clone())
    }
}

fn check_unique(items: &[String], what: &str) -> Result<(), DataError> {
    let mut seen = HashSet::with_capacity(items.len());
    for it in items {
        if !seen.insert(it.as_str()) {
            return Err(DataError::Invalid(format!("duplicate {what} '{it}'")));
        }
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_cell(cell: &str, line: u64, column: &str) -> Result<f64, DataError> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| DataError::Csv(format!("line {line}, column '{column}': '{cell}' is not a number")))?;
    if !v.is_finite() {
        return Err(DataError::Csv(format!("line {line}, column '{column}': non-finite value")));
    }
    Ok(v)
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(r)
}

/// Parses a fields file: `node,x[,y[,z]],<snapshot names...>`.
pub fn read_fields<R: Read>(r: R) -> Result<SnapshotSet, DataError> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.first().map(String::as_str) != Some("node") {
        return Err(DataError::Csv("first header column must be 'node'".into()));
    }
    let n_coord = header[1..]
        .iter()
        .zip(COORD_NAMES)
        .take_while(|(h, c)| h.as_str() == *c)
        .count();
    if n_coord == 0 {
        return Err(DataError::Csv("expected coordinate column 'x' after 'node'".into()));
    }
    let names: Vec<String> = header[1 + n_coord..].to_vec();
    let width = header.len();

    let mut node_ids = Vec::new();
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(DataError::Csv(format!(
                "line {line}: {} cells, header has {width}",
                rec.len()
            )));
        }
        node_ids.push(rec[0].to_owned());
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v = parse_cell(cell, line, &header[j])?;
            if j <= n_coord {
                coords.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let d = node_ids.len();
    if d == 0 {
        return Err(DataError::Csv("no node rows".into()));
    }
    let fields = Matrix::new(d, names.len(), values)?;
    let coords = Matrix::new(d, n_coord, coords)?;
    SnapshotSet::without_params(fields, coords, node_ids, names)
}

/// Parses a params file `name,<param...>` and attaches it to `set`.
pub fn read_params<R: Read>(set: SnapshotSet, r: R) -> Result<SnapshotSet, DataError> {
    let mut rdr = reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.first().map(String::as_str) != Some("name") {
        return Err(DataError::Csv("first params header column must be 'name'".into()));
    }
    let param_names = header[1..].to_vec();
    let p = param_names.len();
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(DataError::Csv(format!(
                "params line {line}: {} cells, header has {}",
                rec.len(),
                header.len()
            )));
        }
        let name = rec[0].to_owned();
        if set.index_of(&name).is_none() {
            return Err(DataError::Invalid(format!("params row for unknown snapshot '{name}'")));
        }
        let vals = rec
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, c)| parse_cell(c, line, &header[j]))
            .collect::<Result<Vec<_>, _>>()?;
        if rows.insert(name.clone(), vals).is_some() {
            return Err(DataError::Invalid(format!("duplicate params row '{name}'")));
        }
    }
    let mut data = Vec::with_capacity(set.n_snapshots() * p);
    for name in set.names() {
        let row = rows
            .get(name)
            .ok_or_else(|| DataError::Invalid(format!("no params row for snapshot '{name}'")))?;
        data.extend_from_slice(row);
    }
    let params = Matrix::new(set.n_snapshots(), p, data)?;
    SnapshotSet::new(set.fields, set.coords, set.node_ids, set.names, params, param_names)
}

pub fn write_fields<W: Write>(set: &SnapshotSet, w: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["node".to_owned()];
    header.extend(COORD_NAMES[..set.coords.cols()].iter().map(|s| s.to_string()));
    header.extend(set.names.iter().cloned());
    wtr.write_record(&header)?;
    for i in 0..set.n_nodes() {
        let mut rec = vec![set.node_ids[i].clone()];
        rec.extend(set.coords.row(i).iter().map(|v| fmt_f64(*v)));
        rec.extend(set.fields.row(i).iter().map(|v| fmt_f64(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| DataError::Csv(e.to_string()))?;
    Ok(())
}

pub fn write_params<W: Write>(set: &SnapshotSet, w: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["name".to_owned()];
    header.extend(set.param_names.iter().cloned());
    wtr.write_record(&header)?;
    for (k, name) in set.names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(set.params.row(k).iter().map(|v| fmt_f64(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| DataError::Csv(e.to_string()))?;
    Ok(())
}

/// 17 significant digits; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn load_csv(fields_path: &Path, params_path: Option<&Path>) -> Result<SnapshotSet, DataError> {
    let f = std::fs::File::open(fields_path).map_err(io_err(fields_path))?;
    let set = read_fields(std::io::BufReader::new(f))?;
    match params_path {
        Some(p) => {
            let f = std::fs::File::open(p).map_err(io_err(p))?;
            read_params(set, std::io::BufReader::new(f))
        }
        None => Ok(set),
    }
}

pub fn save_csv(set: &SnapshotSet, fields_path: &Path, params_path: Option<&Path>) -> Result<(), DataError> {
    let f = std::fs::File::create(fields_path).map_err(io_err(fields_path))?;
    write_fields(set, std::io::BufWriter::new(f))?;
    if let Some(p) = params_path {
        let f = std::fs::File::create(p).map_err(io_err(p))?;
        write_params(set, std::io::BufWriter::new(f))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    None,
    GlobalMinMax,
    #[default]
    PerNodeStandard,
}

impl std::str::FromStr for NormMode {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(NormMode::None),
            "global_min_max" => Ok(NormMode::GlobalMinMax),
            "per_node_standard" => Ok(NormMode::PerNodeStandard),
            other => Err(DataError::Invalid(format!("unknown normalization '{other}'"))),
        }
    }
}

/// Fitted normalization; applies feature-wise to sample-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NormStats {
    None,
    GlobalMinMax { min: f64, max: f64 },
    PerNodeStandard { mean: Vec<f64>, std: Vec<f64> },
}

impl NormStats {
    /// Fits on the rows of `samples` (`N x D`).
    pub fn fit(samples: &Matrix, mode: NormMode) -> Result<Self, DataError> {
        if mode != NormMode::None && samples.rows() == 0 {
            return Err(DataError::Invalid("cannot fit normalization on zero samples".into()));
        }
        Ok(match mode {
            NormMode::None => NormStats::None,
            NormMode::GlobalMinMax => {
                let (min, max) = samples
                    .data()
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                NormStats::GlobalMinMax { min, max }
            }
            NormMode::PerNodeStandard => {
                let (n, d) = samples.shape();
                let mut mean = vec![0.0; d];
                for i in 0..n {
                    for (m, v) in mean.iter_mut().zip(samples.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for i in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(samples.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let std = var.iter().map(|s| (s / n as f64).sqrt().max(STD_FLOOR)).collect();
                NormStats::PerNodeStandard { mean, std }
            }
        })
    }

    pub fn mode(&self) -> NormMode {
        match self {
            NormStats::None => NormMode::None,
            NormStats::GlobalMinMax { .. } => NormMode::GlobalMinMax,
            NormStats::PerNodeStandard { .. } => NormMode::PerNodeStandard,
        }
    }

    fn check_width(&self, d: usize) -> Result<(), DataError> {
        match self {
            NormStats::PerNodeStandard { mean, .. } if mean.len() != d => Err(DataError::Invalid(format!(
                "normalization fitted on {} features, data has {d}",
                mean.len()
            ))),
            _ => Ok(()),
        }
    }

    pub fn normalize(&self, samples: &Matrix) -> Result<Matrix, DataError> {
        self.check_width(samples.cols())?;
        let mut out = samples.clone();
        match self {
            NormStats::None => {}
            NormStats::GlobalMinMax { min, max } => {
                let range = max - min;
                for v in out.as_mut_slice() {
                    *v = if range > 0.0 { (*v - min) / range } else { 0.0 };
                }
            }
            NormStats::PerNodeStandard { mean, std } => {
                for i in 0..out.rows() {
                    for ((v, m), s) in out.row_mut(i).iter_mut().zip(mean).zip(std) {
                        *v = (*v - m) / s;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, samples: &Matrix) -> Result<Matrix, DataError> {
        self.check_width(samples.cols())?;
        let mut out = samples.clone();
        match self {
            NormStats::None => {}
            NormStats::GlobalMinMax { min, max } => {
                let range = max - min;
                for v in out.as_mut_slice() {
                    *v = *v * range + min;
                }
            }
            NormStats::PerNodeStandard { mean, std } => {
                for i in 0..out.rows() {
                    for ((v, m), s) in out.row_mut(i).iter_mut().zip(mean).zip(std) {
                        *v = *v * s + m;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Fits on every snapshot of `set` and returns the normalized set.
pub fn normalize(set: &SnapshotSet, mode: NormMode) -> Result<(SnapshotSet, NormStats), DataError> {
    let stats = NormStats::fit(&set.samples(), mode)?;
    let fields = stats.normalize(&set.samples())?.transpose();
    Ok((set.with_fields(fields)?, stats))
}

pub fn denormalize(set: &SnapshotSet, stats: &NormStats) -> Result<SnapshotSet, DataError> {
    let fields = stats.denormalize(&set.samples())?.transpose();
    set.with_fields(fields)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the truth is constant.
    pub r2: Option<f64>,
}

/// Pooled MAE, RMSE and R^2 over all entries.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics, DataError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(DataError::Invalid(format!(
            "metrics need equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let (mut abs, mut sq, mut tot) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let d = p - t;
        abs += d.abs();
        sq += d * d;
        tot += (t - mean) * (t - mean);
    }
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        r2: (tot > 0.0).then(|| 1.0 - sq / tot),
    })
}

pub fn matrix_metrics(pred: &Matrix, truth: &Matrix) -> Result<Metrics, DataError> {
    if pred.shape() != truth.shape() {
        return Err(DataError::Invalid(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    metrics(pred.data(), truth.data())
}

/// `x_i = (1 - cos(pi i / (n - 1))) / 2`, `i = 0..n`.
pub fn cosine_abscissae(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    1.0
                } else {
                    (1.0 - (std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()) / 2.0
                }
            })
            .collect(),
    }
}

/// Piecewise-linear interpolation on a strictly increasing grid; queries
/// outside the grid take the end values.
pub fn interp_linear(x: &[f64], y: &[f64], queries: &[f64]) -> Result<Vec<f64>, DataError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(DataError::Invalid(format!(
            "grid has {} abscissae and {} values",
            x.len(),
            y.len()
        )));
    }
    if let Some(i) = x.windows(2).position(|w| !(w[0] < w[1])) {
        return Err(DataError::Invalid(format!("grid not strictly increasing at index {}", i + 1)));
    }
    Ok(queries
        .iter()
        .map(|&q| {
            let hi = x.partition_point(|&v| v < q);
            if hi == 0 {
                y[0]
            } else if hi == x.len() {
                y[x.len() - 1]
            } else if x[hi] == q {
                y[hi]
            } else {
                let (x0, x1, y0, y1) = (x[hi - 1], x[hi], y[hi - 1], y[hi]);
                y0 + (q - x0) * ((y1 - y0) / (x1 - x0))
            }
        })
        .collect())
}

/// Resamples a chordwise distribution onto `target_n` cosine-spaced points.
pub fn cosine_resample(x: &[f64], values: &[f64], target_n: usize) -> Result<(Vec<f64>, Vec<f64>), DataError> {
    if target_n < 2 {
        return Err(DataError::Invalid(format!("target_n must be at least 2, got {target_n}")));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(DataError::Invalid("chord abscissae must lie in [0, 1]".into()));
    }
    let xs = cosine_abscissae(target_n);
    let ys = interp_linear(x, values, &xs)?;
    Ok((xs, ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    /// Tercile (0, 1, 2) of each parameter.
    pub bins: Vec<u8>,
    pub size: usize,
    pub hf: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub hf_fraction: f64,
    pub test_fraction: f64,
    /// Per parameter: the two tercile cut points.
    pub thresholds: Vec<[f64; 2]>,
    pub strata: Vec<StratumSummary>,
    pub hf_idx: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    /// Every snapshot not selected as high fidelity.
    pub complementary_idx: Vec<usize>,
    pub train_names: Vec<String>,
    pub test_names: Vec<String>,
    pub complementary_names: Vec<String>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Largest-remainder allocation of `target` items proportional to `sizes`;
/// ties go to the earlier stratum.
pub fn largest_remainder(sizes: &[usize], target: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| s * target / total).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(sizes[i] * target % total), i));
    let short = target - alloc.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        alloc[i] += 1;
    }
    alloc
}

/// Stratified selection of the high-fidelity subset and its train/test split.
///
/// Each parameter is cut into terciles; the joint cells are the strata.
pub fn stratified_split(set: &SnapshotSet, hf_fraction: f64, test_fraction: f64, seed: u64) -> Result<SplitPlan, DataError> {
    let n = set.n_snapshots();
    if !(hf_fraction > 0.0 && hf_fraction <= 1.0) {
        return Err(DataError::Invalid(format!("hf_fraction must be in (0, 1], got {hf_fraction}")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Invalid(format!("test_fraction must be in (0, 1), got {test_fraction}")));
    }
    let n_hf = (hf_fraction * n as f64).round() as usize;
    let n_test = (test_fraction * n_hf as f64).round() as usize;
    if n_test == 0 || n_test >= n_hf {
        return Err(DataError::Invalid(format!(
            "{n} snapshots give {n_hf} high-fidelity cases and {n_test} test cases; need at least one of each role"
        )));
    }

    let params = set.params();
    let thresholds: Vec<[f64; 2]> = (0..params.cols())
        .map(|j| {
            let mut col = params.col(j);
            col.sort_by(f64::total_cmp);
            [quantile_sorted(&col, 1.0 / 3.0), quantile_sorted(&col, 2.0 / 3.0)]
        })
        .collect();
    let mut strata: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let key = params
            .row(i)
            .iter()
            .zip(&thresholds)
            .map(|(v, t)| u8::from(*v > t[0]) + u8::from(*v > t[1]))
            .collect();
        strata.entry(key).or_default().push(i);
    }
    let cells = 3usize.saturating_pow(params.cols() as u32);
    if strata.len() < cells {
        log::debug!("{} of {cells} parameter strata are occupied", strata.len());
    }

    let keys: Vec<Vec<u8>> = strata.keys().cloned().collect();
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let hf_alloc = largest_remainder(&sizes, n_hf);
    let mut rng_hf = rng::stream(seed, "split-hf", 0);
    let mut hf_members: Vec<Vec<usize>> = Vec::with_capacity(keys.len());
    for (members, &take) in strata.values().zip(&hf_alloc) {
        let mut m = members.clone();
        m.shuffle(&mut rng_hf);
        m.truncate(take);
        hf_members.push(m);
    }

    let hf_sizes: Vec<usize> = hf_members.iter().map(Vec::len).collect();
    let test_alloc = largest_remainder(&hf_sizes, n_test);
    let mut rng_test = rng::stream(seed, "split-test", 0);
    let mut test_idx = Vec::with_capacity(n_test);
    let mut train_idx = Vec::with_capacity(n_hf - n_test);
    for (members, &take) in hf_members.iter().zip(&test_alloc) {
        let mut m = members.clone();
        m.shuffle(&mut rng_test);
        test_idx.extend_from_slice(&m[..take]);
        train_idx.extend_from_slice(&m[take..]);
    }
    let mut hf_idx: Vec<usize> = hf_members.iter().flatten().copied().collect();
    hf_idx.sort_unstable();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    let hf_set: HashSet<usize> = hf_idx.iter().copied().collect();
    let complementary_idx: Vec<usize> = (0..n).filter(|i| !hf_set.contains(i)).collect();

    let names = |idx: &[usize]| idx.iter().map(|&i| set.names()[i].clone()).collect();
    Ok(SplitPlan {
        seed,
        hf_fraction,
        test_fraction,
        thresholds,
        strata: keys
            .into_iter()
            .enumerate()
            .map(|(s, bins)| StratumSummary {
                bins,
                size: sizes[s],
                hf: hf_alloc[s],
                test: test_alloc[s],
            })
            .collect(),
        train_names: names(&train_idx),
        test_names: names(&test_idx),
        complementary_names: names(&complementary_idx),
        hf_idx,
        train_idx,
        test_idx,
        complementary_idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(d: usize, n: usize, p: usize, seed: u64) -> SnapshotSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fields = Matrix::from_fn(d, n, |_, _| rng.random_range(-3.0..3.0) * 10f64.powi(rng.random_range(-5..5)));
        let coords = Matrix::from_fn(d, 3, |_, _| rng.random_range(-1.0..1.0));
        let params = Matrix::from_fn(n, p, |_, _| rng.random_range(0.0..1.0));
        SnapshotSet::new(
            fields,
            coords,
            (0..d).map(|i| i.to_string()).collect(),
            (0..n).map(|k| format!("case_{k:03}")).collect(),
            params,
            (0..p).map(|j| format!("p{j}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn hand_written_file_parses_exactly() {
        let text = "node,x,y,z,a,b\n0,0.0,0.1,0,1.5,-2\n1,0.5,0.2,0,0.25,3e-3\n2,1.0,0.0,0,-0.125,7\n";
        let set = read_fields(text.as_bytes()).unwrap();
        assert_eq!(set.n_nodes(), 3);
        assert_eq!(set.names(), &["a", "b"]);
        assert_eq!(set.fields().col(0), vec![1.5, 0.25, -0.125]);
        assert_eq!(set.fields().col(1), vec![-2.0, 3e-3, 7.0]);
        assert_eq!(set.coords().row(1), &[0.5, 0.2, 0.0]);
    }

    #[test]
    fn empty_snapshot_list_is_valid() {
        let set = read_fields("node,x,y,z\n0,0,0,0\n1,1,0,0\n".as_bytes()).unwrap();
        assert_eq!(set.n_snapshots(), 0);
        assert_eq!(set.n_nodes(), 2);
    }

    #[test]
    fn two_dimensional_coordinates_are_accepted() {
        let set = read_fields("node,x,y,s0\n0,0,1,2\n".as_bytes()).unwrap();
        assert_eq!(set.coords().cols(), 2);
        let mut buf = Vec::new();
        write_fields(&set, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("node,x,y,s0"));
    }

    #[test]
    fn malformed_files_are_rejected() {
        let ragged = "node,x,y,z,a\n0,0,0,0,1\n1,0,0,0\n";
        assert!(matches!(read_fields(ragged.as_bytes()), Err(DataError::Csv(_))));
        let text = "node,x,y,z,a\n0,0,0,0,abc\n";
        let err = read_fields(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("'a'"), "{err}");
        let dup = "node,x,y,z,a,a\n0,0,0,0,1,2\n";
        assert!(matches!(read_fields(dup.as_bytes()), Err(DataError::Invalid(_))));
        assert!(read_fields("id,x,a\n".as_bytes()).is_err());
        assert!(read_fields("node,x,y,z,a\n0,0,0,0,NaN\n".as_bytes()).is_err());
    }

    #[test]
    fn params_are_matched_by_name() {
        let set = read_fields("node,x,a,b\n0,0,1,2\n".as_bytes()).unwrap();
        let set = read_params(set, "name,m,alpha\nb,0.7,3\na,0.5,1\n".as_bytes()).unwrap();
        assert_eq!(set.params().row(0), &[0.5, 1.0]);
        assert_eq!(set.params().row(1), &[0.7, 3.0]);
        let set2 = read_fields("node,x,a,b\n0,0,1,2\n".as_bytes()).unwrap();
        assert!(read_params(set2.clone(), "name,m\na,1\n".as_bytes()).is_err());
        assert!(read_params(set2, "name,m\na,1\nb,2\nc,3\n".as_bytes()).is_err());
    }

    #[test]
    fn random_set_round_trips_bit_exactly() {
        let set = random_set(17, 9, 3, 5);
        let dir = tempfile::tempdir().unwrap();
        let (f, p) = (dir.path().join("f.csv"), dir.path().join("p.csv"));
        save_csv(&set, &f, Some(&p)).unwrap();
        let back = load_csv(&f, Some(&p)).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn norm_none_is_identity() {
        let set = random_set(5, 4, 0, 1);
        let (out, stats) = normalize(&set, NormMode::None).unwrap();
        assert_eq!(out, set);
        assert_eq!(stats, NormStats::None);
    }

    #[test]
    fn constant_field_min_max_gives_zeros() {
        let s = Matrix::from_fn(3, 4, |_, _| 2.5);
        let stats = NormStats::fit(&s, NormMode::GlobalMinMax).unwrap();
        assert_eq!(stats, NormStats::GlobalMinMax { min: 2.5, max: 2.5 });
        let z = stats.normalize(&s).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.denormalize(&z).unwrap(), s);
    }

    #[test]
    fn per_node_standard_uses_floor_and_population_std() {
        let s = Matrix::from_rows(&[[1.0, 5.0], [3.0, 5.0]]).unwrap();
        let NormStats::PerNodeStandard { mean, std } = NormStats::fit(&s, NormMode::PerNodeStandard).unwrap() else {
            panic!()
        };
        assert_eq!(mean, vec![2.0, 5.0]);
        assert_eq!(std, vec![1.0, STD_FLOOR]);
    }

    #[test]
    fn min_max_maps_to_unit_interval() {
        let s = Matrix::from_rows(&[[-1.0, 3.0], [1.0, 0.0]]).unwrap();
        let stats = NormStats::fit(&s, NormMode::GlobalMinMax).unwrap();
        let z = stats.normalize(&s).unwrap();
        assert_eq!(z.data(), &[0.0, 1.0, 0.5, 0.25]);
    }

    #[test]
    fn metrics_hand_examples() {
        let t = [1.0, 2.0, 3.0, 6.0];
        let m = metrics(&t, &t).unwrap();
        assert_eq!((m.mae, m.rmse, m.r2), (0.0, 0.0, Some(1.0)));
        let mean = [3.0; 4];
        assert_eq!(metrics(&mean, &t).unwrap().r2, Some(0.0));
        assert_eq!(metrics(&[1.0, 2.0], &[4.0, 4.0]).unwrap().r2, None);
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn metrics_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Matrix::from_fn(13, 7, |_, _| rng.random_range(-1.0..1.0));
        let t = Matrix::from_fn(13, 7, |_, _| rng.random_range(-1.0..1.0));
        let m = matrix_metrics(&p, &t).unwrap();
        let (mut a, mut s, mut mu) = (0.0, 0.0, 0.0);
        let cnt = 91.0;
        for i in 0..13 {
            for j in 0..7 {
                mu += t.get(i, j);
            }
        }
        mu /= cnt;
        let mut tot = 0.0;
        for i in 0..13 {
            for j in 0..7 {
                let d = p.get(i, j) - t.get(i, j);
                a += d.abs();
                s += d * d;
                tot += (t.get(i, j) - mu).powi(2);
            }
        }
        assert!((m.mae - a / cnt).abs() <= 1e-12);
        assert!((m.rmse - (s / cnt).sqrt()).abs() <= 1e-12);
        assert!((m.r2.unwrap() - (1.0 - s / tot)).abs() <= 1e-12);
    }

    #[test]
    fn cosine_abscissae_closed_form() {
        let x = cosine_abscissae(5);
        let want = [0.0, (1.0 - 0.5f64.sqrt()) / 2.0, 0.5, (1.0 + 0.5f64.sqrt()) / 2.0, 1.0];
        for (a, b) in x.iter().zip(want) {
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }
        assert_eq!(x[0], 0.0);
        assert_eq!(x[4], 1.0);
        assert_eq!(cosine_abscissae(2), vec![0.0, 1.0]);
    }

    #[test]
    fn resample_endpoints_and_linear_exactness() {
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        let vals: Vec<f64> = grid.iter().map(|x| (x * 7.0).sin()).collect();
        let (_, two) = cosine_resample(&grid, &vals, 2).unwrap();
        assert_eq!(two, vec![vals[0], vals[200]]);

        let (xs, ys) = cosine_resample(&grid, &grid, 260).unwrap();
        assert_eq!(xs, ys);
    }

    #[test]
    fn resample_rejects_bad_grid() {
        assert!(cosine_resample(&[0.0, 0.5, 0.4, 1.0], &[0.0; 4], 5).is_err());
        assert!(cosine_resample(&[0.0, 1.0], &[0.0, 1.0], 1).is_err());
        assert!(cosine_resample(&[0.0, 2.0], &[0.0, 1.0], 3).is_err());
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[5, 5, 5], 4), vec![2, 1, 1]);
        assert_eq!(largest_remainder(&[10], 3), vec![3]);
        assert_eq!(largest_remainder(&[1, 2, 3], 6), vec![1, 2, 3]);
    }

    fn constant_params(n: usize) -> SnapshotSet {
        let fields = Matrix::zeros(2, n);
        SnapshotSet::new(
            fields,
            Matrix::zeros(2, 1),
            vec!["0".into(), "1".into()],
            (0..n).map(|k| format!("s{k}")).collect(),
            Matrix::from_fn(n, 2, |_, _| 1.0),
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn split_counts_for_single_stratum() {
        let set = constant_params(100);
        let plan = stratified_split(&set, 1.0, 0.25, 9).unwrap();
        assert_eq!(plan.strata.len(), 1);
        assert_eq!(plan.test_idx.len(), 25);
        assert_eq!(plan.train_idx.len(), 75);
        assert!(plan.complementary_idx.is_empty());

        let plan = stratified_split(&set, 0.8, 0.25, 9).unwrap();
        assert_eq!(plan.hf_idx.len(), 80);
        assert_eq!(plan.test_idx.len(), 20);
        assert_eq!(plan.complementary_idx.len(), 20);
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let set = random_set(3, 60, 2, 8);
        let a = stratified_split(&set, 0.5, 0.25, 1).unwrap();
        let b = stratified_split(&set, 0.5, 0.25, 1).unwrap();
        let c = stratified_split(&set, 0.5, 0.25, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.hf_idx, c.hf_idx);
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let set = constant_params(4);
        assert!(stratified_split(&set, 0.0, 0.25, 0).is_err());
        assert!(stratified_split(&set, 0.5, 1.0, 0).is_err());
        assert!(stratified_split(&set, 0.25, 0.5, 0).is_err());
    }

    #[test]
    fn grid_strata_receive_proportional_shares() {
        // 2-parameter 9x9 grid: nine equally sized joint strata
        let n = 81;
        let params = Matrix::from_fn(n, 2, |k, j| if j == 0 { (k / 9) as f64 } else { (k % 9) as f64 });
        let set = SnapshotSet::new(
            Matrix::zeros(1, n),
            Matrix::zeros(1, 1),
            vec!["0".into()],
            (0..n).map(|k| format!("s{k}")).collect(),
            params.clone(),
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let plan = stratified_split(&set, 0.6, 0.25, 4).unwrap();
        assert_eq!(plan.strata.len(), 9);
        let frac = plan.hf_idx.len() as f64 / n as f64;
        // counting oracle: rebin each index independently of the split code
        let bin = |v: f64| if v < 3.0 { 0 } else if v < 6.0 { 1 } else { 2 };
        let mut size = [0usize; 9];
        let mut chosen = [0usize; 9];
        for k in 0..n {
            let s = 3 * bin(params.get(k, 0)) + bin(params.get(k, 1));
            size[s] += 1;
            if plan.hf_idx.contains(&k) {
                chosen[s] += 1;
            }
        }
        for s in 0..9 {
            assert!((chosen[s] as f64 - frac * size[s] as f64).abs() <= 1.0, "stratum {s}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn normalization_round_trip(seed in any::<u64>(), mode in 0usize..3) {
            let mode = [NormMode::None, NormMode::GlobalMinMax, NormMode::PerNodeStandard][mode];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = random_set(6, 5, 0, seed);
            let set = base.with_fields(Matrix::from_fn(6, 5, |_, _| rng.random_range(-3.0..3.0))).unwrap();
            let (z, stats) = normalize(&set, mode).unwrap();
            let back = denormalize(&z, &stats).unwrap();
            for (a, b) in back.fields().data().iter().zip(set.fields().data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn split_partitions_indices(seed in any::<u64>(), n in 12usize..80, hf in 0.3f64..1.0, test in 0.1f64..0.5) {
            let set = random_set(2, n, 3, seed);
            if let Ok(plan) = stratified_split(&set, hf, test, seed) {
                let mut all: Vec<usize> = plan.train_idx.iter().chain(&plan.test_idx).chain(&plan.complementary_idx).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(plan.test_idx.len(), (test * plan.hf_idx.len() as f64).round() as usize);
            }
        }

        #[test]
        fn rmse_dominates_mae(seed in any::<u64>(), len in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
            let m = metrics(&p, &t).unwrap();
            prop_assert!(m.rmse * m.rmse >= m.mae * m.mae * (1.0 - 1e-12));
        }
    }
}
