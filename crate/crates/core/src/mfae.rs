//! Multi-fidelity autoencoder.
//!
//! Phase one trains encoder and decoder to reconstruct low-fidelity inputs.
//! Phase two freezes the encoder, keeps training the decoder on paired
//! high-fidelity targets and trains an optional up-scaler from scratch.
//! Prediction is `upscaler(decoder(encoder(x)))`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, NormMode, NormStats, SnapshotSet};
use crate::linalg::Matrix;
use crate::nn::{self, Activation, AdamConfig, Mlp, Monitor, NnError, TrainReport};
use crate::rng;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MfaeError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("wrong model phase: {0}")]
    Phase(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {message}")]
    Bundle { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfaeConfig {
    pub d_lf: usize,
    pub d_hf: usize,
    pub encoder_widths: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_widths: Vec<usize>,
    /// Up-scaler hidden width; `None` means `round(1.5 * d_lf)`.
    pub upscaler_hidden: Option<usize>,
    /// Insert the up-scaler even when `d_lf == d_hf`.
    pub force_adapter: bool,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: Activation,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub adam: AdamConfig,
    /// Phase-two learning rate; `None` means a tenth of `adam.lr`.
    pub finetune_lr: Option<f64>,
    pub normalization: NormMode,
}

fn default_hidden_activation() -> Activation {
    Activation::Relu
}

impl MfaeConfig {
    /// Small-database layout: encoder 64-32-16, latent 3, decoder 16-32-16.
    pub fn airfoil(d_lf: usize) -> Self {
        Self {
            d_lf,
            d_hf: 260,
            encoder_widths: vec![64, 32, 16],
            latent_dim: 3,
            decoder_widths: vec![16, 32, 16],
            upscaler_hidden: None,
            force_adapter: false,
            hidden_activation: Activation::Relu,
            seed: 0,
            pretrain_epochs: 5000,
            adam: AdamConfig::default(),
            finetune_lr: None,
            normalization: NormMode::PerNodeStandard,
        }
    }

    /// Large-database layout: 4000 -> 2 -> 49574 with an 8000-wide up-scaler.
    pub fn wing() -> Self {
        Self {
            d_lf: 4000,
            d_hf: 49574,
            encoder_widths: vec![1024, 512, 256, 64],
            latent_dim: 2,
            decoder_widths: vec![64, 256, 512, 1024],
            upscaler_hidden: Some(8000),
            ..Self::airfoil(4000)
        }
    }

    pub fn validate(&self) -> Result<(), MfaeError> {
        if self.d_lf == 0 || self.d_hf == 0 {
            return Err(MfaeError::Config("input and output sizes must be positive".into()));
        }
        if self.latent_dim == 0 || self.latent_dim > self.d_lf {
            return Err(MfaeError::Config(format!(
                "latent dimension {} must be in 1..={}",
                self.latent_dim, self.d_lf
            )));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) || self.upscaler_hidden == Some(0) {
            return Err(MfaeError::Config("layer widths must be positive".into()));
        }
        let lr_ok = |lr: f64| lr > 0.0 && lr.is_finite();
        if !lr_ok(self.adam.lr) || !self.finetune_lr.is_none_or(lr_ok) {
            return Err(MfaeError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn has_upscaler(&self) -> bool {
        self.force_adapter || self.d_lf != self.d_hf
    }

    pub fn upscaler_width(&self) -> usize {
        self.upscaler_hidden
            .unwrap_or_else(|| ((1.5 * self.d_lf as f64).round() as usize).max(1))
    }

    pub fn finetune_adam(&self) -> AdamConfig {
        self.adam.with_lr(self.finetune_lr.unwrap_or(self.adam.lr / 10.0))
    }

    pub fn encoder_seed(&self) -> u64 {
        rng::sub_seed(self.seed, "encoder", 0)
    }

    pub fn decoder_seed(&self) -> u64 {
        rng::sub_seed(self.seed, "decoder", 0)
    }

    pub fn upscaler_seed(&self) -> u64 {
        rng::sub_seed(self.seed, "upscaler", 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrained,
    FineTuned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfaeModel {
    config: MfaeConfig,
    encoder: Mlp,
    decoder: Mlp,
    upscaler: Option<Mlp>,
    phase: Phase,
    input_norm: NormStats,
    output_norm: NormStats,
    pretrain_snapshots: Vec<String>,
    finetune_snapshots: Vec<String>,
}

/// Pretrains encoder and decoder on low-fidelity samples (`N x d_lf`).
pub fn pretrain(config: &MfaeConfig, x_lf: &Matrix, names: &[String]) -> Result<(MfaeModel, TrainReport), MfaeError> {
    config.validate()?;
    if x_lf.cols() != config.d_lf {
        return Err(MfaeError::Dimension(format!(
            "low-fidelity samples have {} values, model expects {}",
            x_lf.cols(),
            config.d_lf
        )));
    }
    if x_lf.rows() == 0 {
        return Err(MfaeError::Dimension("no low-fidelity samples".into()));
    }
    let input_norm = NormStats::fit(x_lf, config.normalization)?;
    let z = input_norm.normalize(x_lf)?;
    let act = config.hidden_activation;
    let encoder = Mlp::build(
        config.d_lf,
        &config.encoder_widths,
        config.latent_dim,
        act,
        Activation::Identity,
        config.encoder_seed(),
    )?;
    let decoder = Mlp::build(
        config.latent_dim,
        &config.decoder_widths,
        config.d_lf,
        act,
        Activation::Identity,
        config.decoder_seed(),
    )?;
    let split = encoder.layers().len();
    let mut ae = encoder.stack(decoder)?;
    let report = nn::train(&mut ae, &z, &z, config.pretrain_epochs, config.adam, None)?;
    let mut encoder = ae;
    let mut decoder = encoder.split_off(split, config.decoder_seed())?;
    encoder.set_all_trainable(false);
    decoder.set_all_trainable(true);
    let model = MfaeModel {
        config: config.clone(),
        encoder,
        decoder,
        upscaler: None,
        phase: Phase::Pretrained,
        output_norm: input_norm.clone(),
        input_norm,
        pretrain_snapshots: names.to_vec(),
        finetune_snapshots: Vec::new(),
    };
    Ok((model, report))
}

pub fn pretrain_set(config: &MfaeConfig, lf: &SnapshotSet) -> Result<(MfaeModel, TrainReport), MfaeError> {
    pretrain(config, &lf.samples(), lf.names())
}

/// Paired data for fine-tuning or monitoring, sample-major.
#[derive(Debug, Clone, Copy)]
pub struct Pairs<'a> {
    pub x_lf: &'a Matrix,
    pub y_hf: &'a Matrix,
}

impl MfaeModel {
    pub fn config(&self) -> &MfaeConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn upscaler(&self) -> Option<&Mlp> {
        self.upscaler.as_ref()
    }

    pub fn input_norm(&self) -> &NormStats {
        &self.input_norm
    }

    pub fn output_norm(&self) -> &NormStats {
        &self.output_norm
    }

    pub fn pretrain_snapshots(&self) -> &[String] {
        &self.pretrain_snapshots
    }

    pub fn finetune_snapshots(&self) -> &[String] {
        &self.finetune_snapshots
    }

    /// Every snapshot name that has been used for training.
    pub fn training_snapshots(&self) -> impl Iterator<Item = &String> {
        self.pretrain_snapshots.iter().chain(&self.finetune_snapshots)
    }

    fn check_pairs(&self, p: &Pairs<'_>) -> Result<(), MfaeError> {
        if p.x_lf.cols() != self.config.d_lf || p.y_hf.cols() != self.config.d_hf || p.x_lf.rows() != p.y_hf.rows() {
            return Err(MfaeError::Dimension(format!(
                "pairs {:?} -> {:?}, model maps {} -> {}",
                p.x_lf.shape(),
                p.y_hf.shape(),
                self.config.d_lf,
                self.config.d_hf
            )));
        }
        if p.x_lf.rows() == 0 {
            return Err(MfaeError::Dimension("no training pairs".into()));
        }
        Ok(())
    }

    fn check_input(&self, x_lf: &Matrix) -> Result<(), MfaeError> {
        if x_lf.cols() != self.config.d_lf {
            return Err(MfaeError::Dimension(format!(
                "input has {} values, model expects {}",
                x_lf.cols(),
                self.config.d_lf
            )));
        }
        Ok(())
    }

    /// Phase two. `epochs` may be 0, which keeps the pretrained decoder and a
    /// freshly initialized up-scaler. With a monitor, training stops after
    /// `patience` epochs without improvement and the best epoch is kept.
    pub fn fine_tune(
        &self,
        train: Pairs<'_>,
        names: &[String],
        epochs: usize,
        monitor: Option<(Pairs<'_>, usize)>,
    ) -> Result<(MfaeModel, TrainReport), MfaeError> {
        if self.phase != Phase::Pretrained {
            return Err(MfaeError::Phase("fine-tuning needs a pretrained model".into()));
        }
        self.check_pairs(&train)?;
        if let Some((m, _)) = &monitor {
            self.check_pairs(m)?;
        }
        let cfg = &self.config;
        let output_norm = if cfg.has_upscaler() {
            NormStats::fit(train.y_hf, cfg.normalization)?
        } else {
            self.input_norm.clone()
        };
        let upscaler = if cfg.has_upscaler() {
            Some(Mlp::build(
                cfg.d_lf,
                &[cfg.upscaler_width()],
                cfg.d_hf,
                Activation::Relu,
                Activation::Identity,
                cfg.upscaler_seed(),
            )?)
        } else {
            None
        };
        let split = self.decoder.layers().len();
        let mut head = self.decoder.clone();
        head.set_all_trainable(true);
        if let Some(u) = upscaler {
            head = head.stack(u)?;
        }

        let latent = self.encoder.predict_batch(&self.input_norm.normalize(train.x_lf)?)?;
        let target = output_norm.normalize(train.y_hf)?;
        let val = match &monitor {
            Some((m, _)) => Some((
                self.encoder.predict_batch(&self.input_norm.normalize(m.x_lf)?)?,
                output_norm.normalize(m.y_hf)?,
            )),
            None => None,
        };
        let report = if epochs == 0 {
            TrainReport::default()
        } else {
            let mon = match (&val, &monitor) {
                (Some((vx, vy)), Some((_, patience))) => Some(Monitor {
                    inputs: vx,
                    targets: vy,
                    patience: *patience,
                }),
                _ => None,
            };
            nn::train(&mut head, &latent, &target, epochs, cfg.finetune_adam(), mon)?
        };

        let (decoder, upscaler) = if cfg.has_upscaler() {
            let up = head.split_off(split, cfg.upscaler_seed())?;
            (head, Some(up))
        } else {
            (head, None)
        };
        let model = MfaeModel {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder,
            upscaler,
            phase: Phase::FineTuned,
            input_norm: self.input_norm.clone(),
            output_norm,
            pretrain_snapshots: self.pretrain_snapshots.clone(),
            finetune_snapshots: names.to_vec(),
        };
        Ok((model, report))
    }

    /// Latent coordinates (`N x latent_dim`); any phase.
    pub fn encode(&self, x_lf: &Matrix) -> Result<Matrix, MfaeError> {
        self.check_input(x_lf)?;
        Ok(self.encoder.predict_batch(&self.input_norm.normalize(x_lf)?)?)
    }

    /// Autoencoder reconstruction of low-fidelity inputs in physical units.
    pub fn reconstruct(&self, x_lf: &Matrix) -> Result<Matrix, MfaeError> {
        if self.phase != Phase::Pretrained {
            return Err(MfaeError::Phase("reconstruction is defined for the pretrained model".into()));
        }
        let z = self.decoder.predict_batch(&self.encode(x_lf)?)?;
        Ok(self.input_norm.denormalize(&z)?)
    }

    /// High-fidelity prediction in physical units.
    pub fn predict(&self, x_lf: &Matrix) -> Result<Matrix, MfaeError> {
        if self.phase != Phase::FineTuned {
            return Err(MfaeError::Phase("prediction needs a fine-tuned model".into()));
        }
        let mut z = self.decoder.predict_batch(&self.encode(x_lf)?)?;
        if let Some(u) = &self.upscaler {
            z = u.predict_batch(&z)?;
        }
        Ok(self.output_norm.denormalize(&z)?)
    }

    pub fn predict_one(&self, x_lf: &[f64]) -> Result<Vec<f64>, MfaeError> {
        let x = Matrix::new(1, x_lf.len(), x_lf.to_vec()).map_err(DataError::from)?;
        Ok(self.predict(&x)?.into_data())
    }

    /// Writes `encoder.json`, `decoder.json`, optional `upscaler.json` and
    /// `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), MfaeError> {
        std::fs::create_dir_all(dir).map_err(|e| bundle_err(dir, e))?;
        write_file(&dir.join("encoder.json"), &self.encoder.to_json())?;
        write_file(&dir.join("decoder.json"), &self.decoder.to_json())?;
        let up_path = dir.join("upscaler.json");
        match &self.upscaler {
            Some(u) => write_file(&up_path, &u.to_json())?,
            None if up_path.exists() => std::fs::remove_file(&up_path).map_err(|e| bundle_err(&up_path, e))?,
            None => {}
        }
        let meta = BundleMeta {
            format_version: BUNDLE_FORMAT_VERSION,
            config: self.config.clone(),
            phase: self.phase,
            input_norm: self.input_norm.clone(),
            output_norm: self.output_norm.clone(),
            encoder_fingerprint: self.encoder.fingerprint(),
            seeds: BundleSeeds {
                master: self.config.seed,
                encoder: self.config.encoder_seed(),
                decoder: self.config.decoder_seed(),
                upscaler: self.upscaler.as_ref().map(|_| self.config.upscaler_seed()),
            },
            pretrain_snapshots: self.pretrain_snapshots.clone(),
            finetune_snapshots: self.finetune_snapshots.clone(),
        };
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        write_file(&dir.join("meta.json"), &text)
    }

    pub fn load(dir: &Path) -> Result<MfaeModel, MfaeError> {
        let meta_path = dir.join("meta.json");
        let meta: BundleMeta =
            serde_json::from_str(&read_file(&meta_path)?).map_err(|e| bundle_msg(&meta_path, e.to_string()))?;
        if meta.format_version != BUNDLE_FORMAT_VERSION {
            return Err(bundle_msg(&meta_path, format!("unsupported format version {}", meta.format_version)));
        }
        let load_net = |name: &str| -> Result<Mlp, MfaeError> {
            let p = dir.join(name);
            Mlp::from_json(&read_file(&p)?).map_err(|e| bundle_msg(&p, e.to_string()))
        };
        let encoder = load_net("encoder.json")?;
        let decoder = load_net("decoder.json")?;
        let upscaler = if dir.join("upscaler.json").exists() {
            Some(load_net("upscaler.json")?)
        } else {
            None
        };
        if encoder.fingerprint() != meta.encoder_fingerprint {
            return Err(bundle_msg(&dir.join("encoder.json"), "encoder does not match meta.json fingerprint".into()));
        }
        let cfg = &meta.config;
        let dims_ok = encoder.input_dim() == cfg.d_lf
            && encoder.output_dim() == cfg.latent_dim
            && decoder.input_dim() == cfg.latent_dim
            && decoder.output_dim() == cfg.d_lf
            && match &upscaler {
                Some(u) => u.input_dim() == cfg.d_lf && u.output_dim() == cfg.d_hf,
                None => meta.phase == Phase::Pretrained || cfg.d_lf == cfg.d_hf,
            };
        if !dims_ok {
            return Err(bundle_msg(dir, "network shapes disagree with the configuration".into()));
        }
        Ok(MfaeModel {
            config: meta.config,
            encoder,
            decoder,
            upscaler,
            phase: meta.phase,
            input_norm: meta.input_norm,
            output_norm: meta.output_norm,
            pretrain_snapshots: meta.pretrain_snapshots,
            finetune_snapshots: meta.finetune_snapshots,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleSeeds {
    master: u64,
    encoder: u64,
    decoder: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    upscaler: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    format_version: u32,
    config: MfaeConfig,
    phase: Phase,
    input_norm: NormStats,
    output_norm: NormStats,
    encoder_fingerprint: String,
    seeds: BundleSeeds,
    pretrain_snapshots: Vec<String>,
    finetune_snapshots: Vec<String>,
}

fn bundle_err(path: &Path, e: std::io::Error) -> MfaeError {
    bundle_msg(path, e.to_string())
}

fn bundle_msg(path: &Path, message: String) -> MfaeError {
    MfaeError::Bundle {
        path: path.display().to_string(),
        message,
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), MfaeError> {
    std::fs::write(path, text).map_err(|e| bundle_err(path, e))
}

fn read_file(path: &Path) -> Result<String, MfaeError> {
    std::fs::read_to_string(path).map_err(|e| bundle_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::matrix_metrics;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(d_lf: usize, d_hf: usize) -> MfaeConfig {
        MfaeConfig {
            d_lf,
            d_hf,
            encoder_widths: vec![16],
            latent_dim: 2,
            decoder_widths: vec![16],
            upscaler_hidden: Some(12),
            force_adapter: false,
            hidden_activation: Activation::Relu,
            seed: 3,
            pretrain_epochs: 300,
            adam: AdamConfig::default().with_lr(5e-3),
            finetune_lr: None,
            normalization: NormMode::PerNodeStandard,
        }
    }

    /// Two-parameter sinusoid family on `d` nodes.
    fn family(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Matrix::zeros(n, d);
        for k in 0..n {
            let a: f64 = rng.random_range(0.5..1.5);
            let ph: f64 = rng.random_range(0.0..1.0);
            for j in 0..d {
                let t = j as f64 / (d - 1) as f64;
                out.set(k, j, a * (std::f64::consts::PI * (t + ph)).sin());
            }
        }
        out
    }

    #[test]
    fn presets_match_layout_table() {
        let a = MfaeConfig::airfoil(40);
        assert_eq!((a.d_lf, a.d_hf, a.latent_dim), (40, 260, 3));
        assert_eq!(a.upscaler_width(), 60);
        assert!(a.has_upscaler());
        assert!(!MfaeConfig::airfoil(260).has_upscaler());
        let forced = MfaeConfig {
            force_adapter: true,
            ..MfaeConfig::airfoil(260)
        };
        assert!(forced.has_upscaler());
        let w = MfaeConfig::wing();
        assert_eq!((w.d_lf, w.d_hf, w.latent_dim, w.upscaler_width()), (4000, 49574, 2, 8000));
        assert!((w.finetune_adam().lr - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(8, 8);
        c.latent_dim = 9;
        assert!(c.validate().is_err());
        c.latent_dim = 0;
        assert!(c.validate().is_err());
        let mut c = small_config(8, 8);
        c.encoder_widths = vec![0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn airfoil_output_shape_and_latent_size() {
        let mut cfg = MfaeConfig::airfoil(40);
        cfg.pretrain_epochs = 1;
        let x = family(4, 40, 1);
        let y = family(4, 260, 1);
        let (m, _) = pretrain(&cfg, &x, &[]).unwrap();
        assert_eq!(m.encode(&x).unwrap().cols(), 3);
        let (ft, _) = m.fine_tune(Pairs { x_lf: &x, y_hf: &y }, &[], 1, None).unwrap();
        let out = ft.predict_one(x.row(0)).unwrap();
        assert_eq!(out.len(), 260);
        assert_eq!(ft.predict_one(x.row(0)).unwrap(), out);
    }

    #[test]
    fn single_snapshot_is_memorized() {
        let mut cfg = small_config(10, 10);
        cfg.normalization = NormMode::None;
        cfg.pretrain_epochs = 3000;
        let x = family(1, 10, 2);
        let (m, _) = pretrain(&cfg, &x, &[]).unwrap();
        let rec = m.reconstruct(&x).unwrap();
        let mse = rec.sub(&x).unwrap().data().iter().map(|v| v * v).sum::<f64>() / 10.0;
        assert!(mse <= 1e-4, "mse {mse}");
    }

    #[test]
    fn linear_full_rank_autoassociator() {
        let mut cfg = small_config(4, 4);
        cfg.latent_dim = 4;
        cfg.encoder_widths = vec![];
        cfg.decoder_widths = vec![];
        cfg.hidden_activation = Activation::Identity;
        cfg.pretrain_epochs = 4000;
        cfg.adam = AdamConfig::default().with_lr(1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let (_, rep) = pretrain(&cfg, &x, &[]).unwrap();
        let last = *rep.train_loss.last().unwrap();
        assert!(last <= 1e-6, "loss {last}");
    }

    #[test]
    fn two_parameter_family_generalizes() {
        let mut cfg = small_config(24, 24);
        cfg.encoder_widths = vec![32, 16];
        cfg.decoder_widths = vec![16, 32];
        cfg.pretrain_epochs = 3000;
        let train = family(80, 24, 10);
        let held = family(20, 24, 11);
        let (m, _) = pretrain(&cfg, &train, &[]).unwrap();
        let r2 = matrix_metrics(&m.reconstruct(&held).unwrap(), &held).unwrap().r2.unwrap();
        assert!(r2 >= 0.95, "held-out r2 {r2}");
    }

    #[test]
    fn fine_tune_freezes_encoder_and_composes_stepwise() {
        let cfg = small_config(12, 18);
        let x = family(20, 12, 5);
        let y = family(20, 18, 5);
        let (m, _) = pretrain(&cfg, &x, &[]).unwrap();
        let before = m.encoder().fingerprint();
        let lat_before = m.encode(&x).unwrap();
        let (ft, rep) = m.fine_tune(Pairs { x_lf: &x, y_hf: &y }, &[], 200, None).unwrap();
        assert_eq!(rep.train_loss.len(), 200);
        assert_eq!(ft.encoder().fingerprint(), before);
        assert_eq!(ft.encode(&x).unwrap(), lat_before);
        assert_ne!(ft.decoder(), m.decoder());

        // stepwise composition, exactly
        let z = ft.encoder().predict_batch(&ft.input_norm().normalize(&x).unwrap()).unwrap();
        let z = ft.decoder().predict_batch(&z).unwrap();
        let z = ft.upscaler().unwrap().predict_batch(&z).unwrap();
        let want = ft.output_norm().denormalize(&z).unwrap();
        assert_eq!(ft.predict(&x).unwrap(), want);

        assert!(matches!(
            ft.fine_tune(Pairs { x_lf: &x, y_hf: &y }, &[], 1, None),
            Err(MfaeError::Phase(_))
        ));
        assert!(matches!(m.predict(&x), Err(MfaeError::Phase(_))));
    }

    #[test]
    fn same_objective_starts_near_pretrain_loss() {
        let cfg = small_config(12, 12);
        let x = family(25, 12, 6);
        let (m, pre) = pretrain(&cfg, &x, &[]).unwrap();
        let (_, ft) = m.fine_tune(Pairs { x_lf: &x, y_hf: &x }, &[], 5, None).unwrap();
        let (a, b) = (*pre.train_loss.last().unwrap(), ft.train_loss[0]);
        assert!(b <= a * 1.05 + 1e-12, "pretrain {a}, fine-tune start {b}");
    }

    #[test]
    fn bias_shift_is_learned_with_adapter() {
        let mut cfg = small_config(10, 10);
        cfg.force_adapter = true;
        cfg.finetune_lr = Some(5e-3);
        let x = family(30, 10, 8);
        let c = 2.0;
        let mut y = x.clone();
        y.as_mut_slice().iter_mut().for_each(|v| *v += c);
        let (m, _) = pretrain(&cfg, &x, &[]).unwrap();
        let (ft, _) = m.fine_tune(Pairs { x_lf: &x, y_hf: &y }, &[], 2000, None).unwrap();
        let pred = ft.predict(&x).unwrap();
        let mse = pred.sub(&y).unwrap().data().iter().map(|v| v * v).sum::<f64>() / y.data().len() as f64;
        assert!(mse <= 1e-3 * c * c, "mse {mse}");
    }

    #[test]
    fn monitored_fine_tune_keeps_best_epoch() {
        let cfg = small_config(10, 14);
        let x = family(20, 10, 1);
        let y = family(20, 14, 1);
        let vx = family(8, 10, 2);
        let vy = family(8, 14, 3);
        let (m, _) = pretrain(&cfg, &x, &[]).unwrap();
        let (_, rep) = m
            .fine_tune(Pairs { x_lf: &x, y_hf: &y }, &[], 400, Some((Pairs { x_lf: &vx, y_hf: &vy }, 20)))
            .unwrap();
        assert!(rep.best_epoch <= rep.val_loss.len());
        if rep.stopped_early {
            assert_eq!(rep.val_loss.len(), rep.best_epoch + 20);
        }
    }

    #[test]
    fn zero_epoch_fine_tune_is_allowed() {
        let cfg = small_config(6, 9);
        let x = family(5, 6, 1);
        let y = family(5, 9, 1);
        let (m, _) = pretrain(&cfg, &x, &[]).unwrap();
        let (ft, rep) = m.fine_tune(Pairs { x_lf: &x, y_hf: &y }, &[], 0, None).unwrap();
        assert!(rep.train_loss.is_empty());
        assert_eq!(ft.decoder().layers(), m.decoder().layers());
        assert_eq!(ft.phase(), Phase::FineTuned);
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = small_config(8, 8);
        let x = family(10, 8, 3);
        let (a, ra) = pretrain(&cfg, &x, &[]).unwrap();
        let (b, rb) = pretrain(&cfg, &x, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn bundle_round_trip() {
        let cfg = small_config(8, 11);
        let x = family(10, 8, 3);
        let y = family(10, 11, 3);
        let names: Vec<String> = (0..10).map(|k| format!("c{k}")).collect();
        let (m, _) = pretrain(&cfg, &x, &names).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert!(!dir.path().join("upscaler.json").exists());
        assert_eq!(MfaeModel::load(dir.path()).unwrap(), m);

        let (ft, _) = m.fine_tune(Pairs { x_lf: &x, y_hf: &y }, &names[..3], 20, None).unwrap();
        ft.save(dir.path()).unwrap();
        let back = MfaeModel::load(dir.path()).unwrap();
        assert_eq!(back, ft);
        assert_eq!(back.predict(&x).unwrap(), ft.predict(&x).unwrap());
        assert_eq!(back.training_snapshots().count(), 13);

        // tampering with the encoder is detected
        let enc = dir.path().join("encoder.json");
        let text = std::fs::read_to_string(&enc).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["layers"][0]["biases"][0] = serde_json::json!(123.0);
        std::fs::write(&enc, doc.to_string()).unwrap();
        assert!(MfaeModel::load(dir.path()).is_err());
    }
}
