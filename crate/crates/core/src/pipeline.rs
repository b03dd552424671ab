//! Five-step batch pipeline: degrade, pretrain, calibrate, finetune, evaluate.
//!
//! Steps communicate through files in the output directory, so each one can
//! be rerun on its own. Every randomized step draws from a named sub-seed of
//! the single master seed in the config.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{self, ConformalError, MfaeSplitTrainer, MscpConfig, MscpResult, ScoreKind, S_FLOOR};
use crate::data::{self, fmt_f64, DataError, NormMode, SnapshotSet, SplitPlan};
use crate::linalg::{LinalgError, Matrix};
use crate::lofi::{DegradationRecipe, LofiError, Provenance};
use crate::mfae::{self, MfaeConfig, MfaeError, MfaeModel, Pairs, Phase};
use crate::nn::{AdamConfig, NnError, TrainReport};
use crate::rng;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad input, missing artifact or infeasible setting (exit code 2).
    #[error("{0}")]
    Validation(String),
    /// Divergence or numerical breakdown (exit code 3).
    #[error("{0}")]
    Numeric(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Numeric(_) => 3,
        }
    }
}

fn is_numeric_nn(e: &NnError) -> bool {
    matches!(
        e,
        NnError::Diverged { .. } | NnError::NonFiniteParameter { .. } | NnError::Linalg(LinalgError::NonConvergence { .. })
    )
}

fn is_numeric_mfae(e: &MfaeError) -> bool {
    match e {
        MfaeError::Nn(n) => is_numeric_nn(n),
        MfaeError::Data(DataError::Linalg(LinalgError::NonConvergence { .. })) => true,
        _ => false,
    }
}

fn classify(numeric: bool, msg: String) -> PipelineError {
    if numeric {
        PipelineError::Numeric(msg)
    } else {
        PipelineError::Validation(msg)
    }
}

impl From<MfaeError> for PipelineError {
    fn from(e: MfaeError) -> Self {
        classify(is_numeric_mfae(&e), e.to_string())
    }
}

impl From<ConformalError> for PipelineError {
    fn from(e: ConformalError) -> Self {
        let numeric = match &e {
            ConformalError::Split { source, .. } => source.downcast_ref::<MfaeError>().is_some_and(is_numeric_mfae),
            _ => false,
        };
        classify(numeric, e.to_string())
    }
}

impl From<LofiError> for PipelineError {
    fn from(e: LofiError) -> Self {
        let numeric = matches!(e, LofiError::Linalg(LinalgError::NonConvergence { .. }));
        classify(numeric, e.to_string())
    }
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Validation(msg.into())
}

/// Flat `key = value` configuration. Relative paths resolve against
/// `base_dir` (the directory holding the config file).
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub base_dir: PathBuf,
    pub hf_fields: Option<String>,
    pub hf_params: Option<String>,
    pub lf_fields: Option<String>,
    pub lf_params: Option<String>,
    pub out_dir: String,
    pub recipe: Option<String>,
    pub seed: u64,
    pub hf_fraction: f64,
    pub test_fraction: f64,
    pub encoder_widths: Vec<usize>,
    pub latent_dim: Option<usize>,
    pub decoder_widths: Vec<usize>,
    pub upscaler_hidden: Option<usize>,
    pub force_adapter: bool,
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub finetune_lr: Option<f64>,
    pub normalization: NormMode,
    pub delta: f64,
    pub score: ScoreKind,
    pub splits: usize,
    pub cal_fraction: f64,
    pub patience: usize,
    pub max_finetune_epochs: usize,
    pub workers: usize,
    pub plot: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            base_dir: PathBuf::from("."),
            hf_fields: None,
            hf_params: None,
            lf_fields: None,
            lf_params: None,
            out_dir: "out".into(),
            recipe: None,
            seed: 0,
            hf_fraction: 1.0,
            test_fraction: 0.25,
            encoder_widths: vec![64, 32, 16],
            latent_dim: None,
            decoder_widths: vec![16, 32, 16],
            upscaler_hidden: None,
            force_adapter: false,
            pretrain_epochs: 5000,
            lr: 1e-3,
            finetune_lr: None,
            normalization: NormMode::PerNodeStandard,
            delta: 0.1,
            score: ScoreKind::LInf,
            splits: conformal::DEFAULT_SPLITS,
            cal_fraction: conformal::DEFAULT_CAL_FRACTION,
            patience: crate::nn::DEFAULT_PATIENCE,
            max_finetune_epochs: 5000,
            workers: 0,
            plot: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
    v.parse().map_err(|_| invalid(format!("config key '{key}': cannot parse '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, PipelineError> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool, PipelineError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(format!("config key '{key}': expected true or false, got '{v}'"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg = PipelineConfig {
            base_dir: base_dir.to_path_buf(),
            ..Default::default()
        };
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected 'key = value'", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(invalid(format!("config key '{key}' given twice")));
            }
            let s = || Some(v.to_owned());
            match key {
                "hf_fields" => cfg.hf_fields = s(),
                "hf_params" => cfg.hf_params = s(),
                "lf_fields" => cfg.lf_fields = s(),
                "lf_params" => cfg.lf_params = s(),
                "out_dir" => cfg.out_dir = v.to_owned(),
                "recipe" => cfg.recipe = s(),
                "seed" => cfg.seed = parse_num(key, v)?,
                "hf_fraction" => cfg.hf_fraction = parse_num(key, v)?,
                "test_fraction" => cfg.test_fraction = parse_num(key, v)?,
                "encoder_widths" => cfg.encoder_widths = parse_list(key, v)?,
                "latent_dim" => cfg.latent_dim = Some(parse_num(key, v)?),
                "decoder_widths" => cfg.decoder_widths = parse_list(key, v)?,
                "upscaler_hidden" => cfg.upscaler_hidden = Some(parse_num(key, v)?),
                "force_adapter" => cfg.force_adapter = parse_bool(key, v)?,
                "pretrain_epochs" => cfg.pretrain_epochs = parse_num(key, v)?,
                "lr" => cfg.lr = parse_num(key, v)?,
                "finetune_lr" => cfg.finetune_lr = Some(parse_num(key, v)?),
                "normalization" => cfg.normalization = v.parse()?,
                "delta" => cfg.delta = parse_num(key, v)?,
                "score" => cfg.score = v.parse()?,
                "splits" => cfg.splits = parse_num(key, v)?,
                "cal_fraction" => cfg.cal_fraction = parse_num(key, v)?,
                "patience" => cfg.patience = parse_num(key, v)?,
                "max_finetune_epochs" => cfg.max_finetune_epochs = parse_num(key, v)?,
                "workers" => cfg.workers = parse_num(key, v)?,
                "plot" => cfg.plot = parse_bool(key, v)?,
                other => return Err(invalid(format!("unknown config key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::parse(&text, &base)
    }

    /// File form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let opt = |v: &Option<String>| v.clone();
        for (k, v) in [
            ("hf_fields", opt(&self.hf_fields)),
            ("hf_params", opt(&self.hf_params)),
            ("lf_fields", opt(&self.lf_fields)),
            ("lf_params", opt(&self.lf_params)),
            ("recipe", opt(&self.recipe)),
        ] {
            if let Some(v) = v {
                put(k, v);
            }
        }
        put("out_dir", self.out_dir.clone());
        put("seed", self.seed.to_string());
        put("hf_fraction", self.hf_fraction.to_string());
        put("test_fraction", self.test_fraction.to_string());
        put("encoder_widths", join(&self.encoder_widths));
        if let Some(d) = self.latent_dim {
            put("latent_dim", d.to_string());
        }
        put("decoder_widths", join(&self.decoder_widths));
        if let Some(u) = self.upscaler_hidden {
            put("upscaler_hidden", u.to_string());
        }
        put("force_adapter", self.force_adapter.to_string());
        put("pretrain_epochs", self.pretrain_epochs.to_string());
        put("lr", self.lr.to_string());
        if let Some(lr) = self.finetune_lr {
            put("finetune_lr", lr.to_string());
        }
        let norm = match self.normalization {
            NormMode::None => "none",
            NormMode::GlobalMinMax => "global_min_max",
            NormMode::PerNodeStandard => "per_node_standard",
        };
        put("normalization", norm.into());
        put("delta", self.delta.to_string());
        let score = match self.score {
            ScoreKind::LInf => "linf",
            ScoreKind::NormalizedL2 => "normalized_l2",
        };
        put("score", score.into());
        put("splits", self.splits.to_string());
        put("cal_fraction", self.cal_fraction.to_string());
        put("patience", self.patience.to_string());
        put("max_finetune_epochs", self.max_finetune_epochs.to_string());
        put("workers", self.workers.to_string());
        put("plot", self.plot.to_string());
        out
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.cal_fraction > 0.0 && self.cal_fraction < 1.0) {
            return Err(invalid(format!("cal_fraction must be in (0, 1), got {}", self.cal_fraction)));
        }
        if !(self.hf_fraction > 0.0 && self.hf_fraction <= 1.0) {
            return Err(invalid(format!("hf_fraction must be in (0, 1], got {}", self.hf_fraction)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(invalid(format!("test_fraction must be in (0, 1), got {}", self.test_fraction)));
        }
        if self.splits == 0 || self.pretrain_epochs == 0 || self.max_finetune_epochs == 0 || self.patience == 0 {
            return Err(invalid("splits, epochs and patience must be positive"));
        }
        if !(self.lr > 0.0) || self.finetune_lr.is_some_and(|l| !(l > 0.0)) {
            return Err(invalid("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts::new(self.resolve(&self.out_dir))
    }

    pub fn split_seed(&self) -> u64 {
        rng::sub_seed(self.seed, "split", 0)
    }

    pub fn init_seed(&self) -> u64 {
        rng::sub_seed(self.seed, "init", 0)
    }

    pub fn mscp_seed(&self) -> u64 {
        rng::sub_seed(self.seed, "mscp", 0)
    }

    pub fn noise_seed(&self) -> u64 {
        rng::sub_seed(self.seed, "noise", 0)
    }

    fn mfae_config(&self, d_lf: usize, d_hf: usize, n_params: usize) -> Result<MfaeConfig, PipelineError> {
        let latent_dim = match (self.latent_dim, n_params) {
            (Some(d), _) => d,
            (None, p) if p > 0 => p,
            _ => return Err(invalid("latent_dim must be set when the data carry no design parameters")),
        };
        let cfg = MfaeConfig {
            d_lf,
            d_hf,
            encoder_widths: self.encoder_widths.clone(),
            latent_dim,
            decoder_widths: self.decoder_widths.clone(),
            upscaler_hidden: self.upscaler_hidden,
            force_adapter: self.force_adapter,
            hidden_activation: crate::nn::Activation::Relu,
            seed: self.init_seed(),
            pretrain_epochs: self.pretrain_epochs,
            adam: AdamConfig::default().with_lr(self.lr),
            finetune_lr: self.finetune_lr,
            normalization: self.normalization,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn mscp_config(&self) -> MscpConfig {
        MscpConfig {
            splits: self.splits,
            cal_fraction: self.cal_fraction,
            delta: self.delta,
            kind: self.score,
            seed: self.mscp_seed(),
            workers: self.workers,
            s_floor: S_FLOOR,
        }
    }
}

/// File layout inside the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }

    pub fn lf_fields(&self) -> PathBuf {
        self.dir.join("lf_fields.csv")
    }

    pub fn lf_params(&self) -> PathBuf {
        self.dir.join("lf_params.csv")
    }

    pub fn provenance(&self) -> PathBuf {
        self.dir.join("provenance.json")
    }

    pub fn split(&self) -> PathBuf {
        self.dir.join("split.json")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.dir.join("pretrained")
    }

    pub fn pretrain_history(&self) -> PathBuf {
        self.dir.join("pretrain_history.csv")
    }

    pub fn calibration(&self) -> PathBuf {
        self.dir.join("calibration.json")
    }

    pub fn model(&self) -> PathBuf {
        self.dir.join("model")
    }

    pub fn finetune_history(&self) -> PathBuf {
        self.dir.join("finetune_history.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }

    pub fn predictions(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("predictions_{tag}.csv"))
    }

    pub fn plot(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("band_{tag}.svg"))
    }
}

fn require(path: &Path, what: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("missing {what}: {}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| invalid(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T, PipelineError> {
    require(path, what)?;
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

fn load_set(fields: &Path, params: Option<PathBuf>, what: &str) -> Result<SnapshotSet, PipelineError> {
    require(fields, what)?;
    if let Some(p) = &params {
        require(p, &format!("{what} parameters"))?;
    }
    Ok(data::load_csv(fields, params.as_deref())?)
}

fn load_hf(cfg: &PipelineConfig) -> Result<SnapshotSet, PipelineError> {
    let f = cfg.hf_fields.as_ref().ok_or_else(|| invalid("config key 'hf_fields' is required"))?;
    load_set(&cfg.resolve(f), cfg.hf_params.as_ref().map(|p| cfg.resolve(p)), "high-fidelity fields")
}

fn load_lf(cfg: &PipelineConfig) -> Result<SnapshotSet, PipelineError> {
    let art = cfg.artifacts();
    let (fields, params) = match &cfg.lf_fields {
        Some(f) => (cfg.resolve(f), cfg.lf_params.as_ref().map(|p| cfg.resolve(p))),
        None => {
            let p = art.lf_params();
            (art.lf_fields(), p.exists().then_some(p))
        }
    };
    load_set(&fields, params, "low-fidelity fields")
}

/// Sample-major rows of `set` for `names`, in that order.
fn samples_by_name(set: &SnapshotSet, names: &[String], what: &str) -> Result<Matrix, PipelineError> {
    let idx = names
        .iter()
        .map(|n| set.index_of(n).ok_or_else(|| invalid(format!("snapshot '{n}' missing from the {what} set"))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(set.select_snapshots(&idx).samples())
}

/// The high-fidelity set with design parameters attached, borrowing them
/// from the low-fidelity set when the high-fidelity files carry none.
fn hf_with_params(hf: &SnapshotSet, lf: &SnapshotSet) -> Result<SnapshotSet, PipelineError> {
    if hf.params().cols() > 0 || lf.params().cols() == 0 {
        return Ok(hf.clone());
    }
    let rows = samples_by_name_params(lf, hf.names())?;
    Ok(SnapshotSet::new(
        hf.fields().clone(),
        hf.coords().clone(),
        hf.node_ids().to_vec(),
        hf.names().to_vec(),
        rows,
        lf.param_names().to_vec(),
    )?)
}

fn samples_by_name_params(set: &SnapshotSet, names: &[String]) -> Result<Matrix, PipelineError> {
    let idx = names
        .iter()
        .map(|n| {
            set.index_of(n)
                .ok_or_else(|| invalid(format!("snapshot '{n}' has no low-fidelity counterpart")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(set.params().select_rows(&idx))
}

fn history_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,train_loss\n");
    for (e, l) in report.train_loss.iter().enumerate() {
        let _ = writeln!(s, "{},{}", e + 1, fmt_f64(*l));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradeSummary {
    pub nodes_in: usize,
    pub nodes_out: usize,
    pub provenance: Provenance,
}

/// Applies the recipe to the high-fidelity set and writes the low-fidelity
/// set plus `provenance.json`.
pub fn cmd_degrade(cfg: &PipelineConfig) -> Result<DegradeSummary, PipelineError> {
    let recipe_path = cfg
        .recipe
        .as_ref()
        .map(|r| cfg.resolve(r))
        .ok_or_else(|| invalid("config key 'recipe' is required for degrade"))?;
    let mut recipe: DegradationRecipe = read_json(&recipe_path, "recipe")?;
    if recipe.seed.is_none() {
        recipe.seed = Some(cfg.noise_seed());
    }
    let hf = load_hf(cfg)?;
    let (lf, provenance) = recipe.apply(&hf)?;
    let art = cfg.artifacts();
    let (fields, params) = match &cfg.lf_fields {
        Some(f) => (cfg.resolve(f), cfg.lf_params.as_ref().map(|p| cfg.resolve(p))),
        None => (art.lf_fields(), (lf.params().cols() > 0).then(|| art.lf_params())),
    };
    for p in [Some(&fields), params.as_ref()].into_iter().flatten() {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
        }
    }
    data::save_csv(&lf, &fields, params.as_deref())?;
    write_text(&art.provenance(), &to_json(&provenance))?;
    log::info!("degraded {} -> {} nodes into {}", hf.n_nodes(), lf.n_nodes(), fields.display());
    Ok(DegradeSummary {
        nodes_in: hf.n_nodes(),
        nodes_out: lf.n_nodes(),
        provenance,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub plan: SplitPlan,
    pub report: TrainReport,
    pub lf_snapshots: usize,
}

/// Splits the high-fidelity cases, then pretrains on every low-fidelity
/// snapshot except those of high-fidelity test cases.
pub fn cmd_pretrain(cfg: &PipelineConfig) -> Result<PretrainSummary, PipelineError> {
    let hf = load_hf(cfg)?;
    let lf = load_lf(cfg)?;
    let hf = hf_with_params(&hf, &lf)?;
    for n in hf.names() {
        if lf.index_of(n).is_none() {
            return Err(invalid(format!("high-fidelity case '{n}' has no low-fidelity snapshot")));
        }
    }
    let plan = data::stratified_split(&hf, cfg.hf_fraction, cfg.test_fraction, cfg.split_seed())?;
    let test: HashSet<&String> = plan.test_names.iter().collect();
    let keep: Vec<usize> = (0..lf.n_snapshots()).filter(|&k| !test.contains(&lf.names()[k])).collect();
    let lf_train = lf.select_snapshots(&keep);
    let mcfg = cfg.mfae_config(lf.n_nodes(), hf.n_nodes(), hf.params().cols())?;
    log::info!(
        "pretraining on {} low-fidelity snapshots ({} excluded as test cases)",
        lf_train.n_snapshots(),
        plan.test_names.len()
    );
    let (model, report) = mfae::pretrain_set(&mcfg, &lf_train)?;
    let art = cfg.artifacts();
    write_text(&art.split(), &to_json(&plan))?;
    model.save(&art.pretrained())?;
    write_text(&art.pretrain_history(), &history_csv(&report))?;
    Ok(PretrainSummary {
        plan,
        report,
        lf_snapshots: lf_train.n_snapshots(),
    })
}

/// Contents of `calibration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub schema_version: u32,
    /// Names behind the pair indices in the split table.
    pub pair_names: Vec<String>,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(flatten)]
    pub result: MscpResult,
}

fn training_pairs(cfg: &PipelineConfig, plan: &SplitPlan) -> Result<(Matrix, Matrix), PipelineError> {
    let hf = load_hf(cfg)?;
    let lf = load_lf(cfg)?;
    let x = samples_by_name(&lf, &plan.train_names, "low-fidelity")?;
    let y = samples_by_name(&hf, &plan.train_names, "high-fidelity")?;
    Ok((x, y))
}

fn load_pretrained(art: &Artifacts) -> Result<MfaeModel, PipelineError> {
    require(&art.pretrained().join("meta.json"), "pretrained model bundle")?;
    let model = MfaeModel::load(&art.pretrained())?;
    if model.phase() != Phase::Pretrained {
        return Err(invalid("the pretrained bundle has already been fine-tuned"));
    }
    Ok(model)
}

/// Multi-split calibration on the high-fidelity training pairs.
pub fn cmd_calibrate(cfg: &PipelineConfig) -> Result<CalibrationFile, PipelineError> {
    let art = cfg.artifacts();
    let plan: SplitPlan = read_json(&art.split(), "split plan")?;
    let model = load_pretrained(&art)?;
    let (x, y) = training_pairs(cfg, &plan)?;
    let trainer = MfaeSplitTrainer {
        model: &model,
        x_lf: &x,
        y_hf: &y,
        max_epochs: cfg.max_finetune_epochs,
        patience: cfg.patience,
    };
    let result = conformal::mscp(&trainer, &cfg.mscp_config())?;
    log::info!("calibrated {} splits: E* = {}", result.splits, result.e_star);
    let file = CalibrationFile {
        schema_version: CALIBRATION_SCHEMA_VERSION,
        pair_names: plan.train_names.clone(),
        max_epochs: cfg.max_finetune_epochs,
        patience: cfg.patience,
        result,
    };
    write_text(&art.calibration(), &to_json(&file))?;
    Ok(file)
}

#[derive(Debug, Clone)]
pub struct FinetuneSummary {
    pub epochs: usize,
    pub report: TrainReport,
}

/// Fine-tunes on all high-fidelity training pairs for exactly `E*` epochs.
pub fn cmd_finetune(cfg: &PipelineConfig) -> Result<FinetuneSummary, PipelineError> {
    let art = cfg.artifacts();
    let plan: SplitPlan = read_json(&art.split(), "split plan")?;
    let cal: CalibrationFile = read_json(&art.calibration(), "calibration")?;
    let model = load_pretrained(&art)?;
    if cal.pair_names != plan.train_names {
        return Err(invalid("calibration was computed on a different training split"));
    }
    let (x, y) = training_pairs(cfg, &plan)?;
    let epochs = cal.result.e_star;
    if epochs == 0 {
        log::warn!("E* is 0: keeping the pretrained decoder and an untrained up-scaler");
    }
    let (tuned, report) = model.fine_tune(Pairs { x_lf: &x, y_hf: &y }, &plan.train_names, epochs, None)?;
    tuned.save(&art.model())?;
    write_text(&art.finetune_history(), &history_csv(&report))?;
    Ok(FinetuneSummary { epochs, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub n_snapshots: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub nominal: f64,
    pub pointwise: f64,
    pub band_width_mean: f64,
    pub band_width_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub delta: f64,
    pub score: ScoreKind,
    #[serde(rename = "B")]
    pub splits: usize,
    pub e_star: usize,
    pub test: SetReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complementary: Option<SetReport>,
}

/// Scores `pred ± radius` against `truth`.
pub fn set_report(pred: &Matrix, radius: &[f64], truth: &Matrix) -> Result<SetReport, PipelineError> {
    let m = data::matrix_metrics(pred, truth)?;
    let c = conformal::coverage(pred, radius, truth)?;
    Ok(SetReport {
        n_snapshots: truth.rows(),
        mae: m.mae,
        rmse: m.rmse,
        r2: m.r2,
        nominal: c.nominal,
        pointwise: c.pointwise,
        band_width_mean: c.width_mean,
        band_width_std: c.width_std,
    })
}

/// Long format: one row per (snapshot, node).
pub fn predictions_csv(names: &[String], node_ids: &[String], pred: &Matrix, radius: &[f64], truth: &Matrix) -> String {
    let mut s = String::from("snapshot,node,prediction,lower,upper,truth\n");
    for (i, name) in names.iter().enumerate() {
        for (j, node) in node_ids.iter().enumerate() {
            let p = pred.get(i, j);
            let _ = writeln!(
                s,
                "{name},{node},{},{},{},{}",
                fmt_f64(p),
                fmt_f64(p - radius[j]),
                fmt_f64(p + radius[j]),
                fmt_f64(truth.get(i, j))
            );
        }
    }
    s
}

/// Static sectional plot: shaded band, prediction line, truth markers,
/// against node index.
pub fn band_svg(title: &str, pred: &[f64], radius: &[f64], truth: &[f64]) -> String {
    let (w, h, pad) = (800.0, 400.0, 40.0);
    let n = pred.len().max(2);
    let lo = pred.iter().zip(radius).map(|(p, r)| p - r).chain(truth.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi = pred.iter().zip(radius).map(|(p, r)| p + r).chain(truth.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let sx = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1) as f64;
    // plot upward for larger values
    let sy = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / span;
    let mut band = String::new();
    for (i, (p, r)) in pred.iter().zip(radius).enumerate() {
        let _ = write!(band, "{:.2},{:.2} ", sx(i), sy(p + r));
    }
    for (i, (p, r)) in pred.iter().zip(radius).enumerate().rev() {
        let _ = write!(band, "{:.2},{:.2} ", sx(i), sy(p - r));
    }
    let line: String = pred.iter().enumerate().map(|(i, p)| format!("{:.2},{:.2} ", sx(i), sy(*p))).collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n\
         <polygon points=\"{}\" fill=\"#1f77b4\" fill-opacity=\"0.25\" stroke=\"none\"/>\n\
         <polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n",
        xml_escape(title),
        band.trim_end(),
        line.trim_end()
    );
    for (i, t) in truth.iter().enumerate() {
        let _ = writeln!(svg, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.8\" fill=\"black\"/>", sx(i), sy(*t));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Metrics and coverage on the test cases and, when high-fidelity truth
/// exists for them, the complementary cases.
pub fn cmd_evaluate(cfg: &PipelineConfig) -> Result<Report, PipelineError> {
    let art = cfg.artifacts();
    let plan: SplitPlan = read_json(&art.split(), "split plan")?;
    let cal: CalibrationFile = read_json(&art.calibration(), "calibration")?;
    require(&art.model().join("meta.json"), "fine-tuned model bundle")?;
    let model = MfaeModel::load(&art.model())?;
    if model.phase() != Phase::FineTuned {
        return Err(invalid("the model bundle has not been fine-tuned"));
    }
    let used: HashSet<&String> = model.training_snapshots().collect();
    if let Some(leak) = plan.test_names.iter().find(|n| used.contains(n)) {
        return Err(invalid(format!(
            "test snapshot '{leak}' appears in the model's training provenance"
        )));
    }
    let r_star = &cal.result.r_star;
    if r_star.len() != model.config().d_hf {
        return Err(invalid("calibration radius does not match the model output size"));
    }
    let hf = load_hf(cfg)?;
    let lf = load_lf(cfg)?;

    let evaluate = |tag: &str, names: &[String]| -> Result<SetReport, PipelineError> {
        let x = samples_by_name(&lf, names, "low-fidelity")?;
        let truth = samples_by_name(&hf, names, "high-fidelity")?;
        let pred = model.predict(&x)?;
        let rep = set_report(&pred, r_star, &truth)?;
        write_text(&art.predictions(tag), &predictions_csv(names, hf.node_ids(), &pred, r_star, &truth))?;
        if cfg.plot {
            let svg = band_svg(&format!("{tag}: {}", names[0]), pred.row(0), r_star, truth.row(0));
            if let Err(e) = write_text(&art.plot(tag), &svg) {
                log::warn!("plot not written: {e}");
            }
        }
        Ok(rep)
    };
    let test = evaluate("test", &plan.test_names)?;
    let comp_names: Vec<String> = plan
        .complementary_names
        .iter()
        .filter(|n| hf.index_of(n).is_some() && lf.index_of(n).is_some())
        .cloned()
        .collect();
    let complementary = if comp_names.is_empty() {
        None
    } else {
        Some(evaluate("complementary", &comp_names)?)
    };
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        delta: cal.result.delta,
        score: cal.result.kind,
        splits: cal.result.splits,
        e_star: cal.result.e_star,
        test,
        complementary,
    };
    write_text(&art.report(), &to_json(&report))?;
    Ok(report)
}
