//! Flat `key = value` run configuration. Every run-affecting knob lives
//! here so a config file plus a seed pins a whole study. `#` starts a
//! comment, blank lines are skipped, keys outside the schema and keys
//! given twice are errors: a typo must fail loudly, not silently fall
//! back to a default.

use std::path::Path;

use crate::diffusion::{NoiseSchedule, ScheduleKind, SnapshotPolicy};
use crate::error::{Error, Result};
use crate::nets::{ClassifierArch, ConvSpec, DenoiserArch, OptimizerKind, TrainConfig};
use crate::pipeline::dataset::DatasetSpec;

pub fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
    }
}

pub fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam => "adam",
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    // dataset
    pub image_size: usize,
    pub min_object: usize,
    pub max_object: usize,
    /// Placement bounds for object centers; None means the full frame.
    pub place_rows: Option<(usize, usize)>,
    pub place_cols: Option<(usize, usize)>,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub dataset_count: usize,
    /// Base seed; CLI --seed overrides it.
    pub seed: u64,

    // classifier training
    pub classifier_epochs: usize,
    pub classifier_batch: usize,
    pub classifier_lr: f64,
    pub classifier_optimizer: OptimizerKind,

    // diffusion
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub schedule: ScheduleKind,
    pub denoiser_epochs: usize,
    pub denoiser_batch: usize,
    pub denoiser_lr: f64,
    pub denoiser_optimizer: OptimizerKind,
    pub hidden_channels: usize,
    pub denoiser_layers: usize,
    pub kernel: usize,
    pub embed_dim: usize,

    // gradient inversion
    pub invert_steps: usize,
    pub invert_lr: f64,
    pub invert_optimizer: OptimizerKind,
    pub tv_weight: f64,
    pub sign_grad: bool,
    pub snapshot_steps: Vec<usize>,

    // studies and evaluation
    pub mask_percentile: f64,
    pub study_pairs: usize,
    pub targets: Vec<usize>,
    pub fgsm_eps: f64,
    pub feature_layer: usize,
    pub trajectory: SnapshotPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 24,
            min_object: 3,
            max_object: 6,
            place_rows: None,
            place_cols: None,
            intensity_min: 0.6,
            intensity_max: 1.0,
            dataset_count: 240,
            seed: 7,
            classifier_epochs: 30,
            classifier_batch: 16,
            classifier_lr: 0.01,
            classifier_optimizer: OptimizerKind::Adam,
            t_max: 200,
            beta_min: 1e-4,
            beta_max: 0.035,
            schedule: ScheduleKind::Linear,
            denoiser_epochs: 40,
            denoiser_batch: 16,
            denoiser_lr: 3e-3,
            denoiser_optimizer: OptimizerKind::Adam,
            hidden_channels: 32,
            denoiser_layers: 4,
            kernel: 3,
            embed_dim: 16,
            invert_steps: 5000,
            invert_lr: 0.1,
            invert_optimizer: OptimizerKind::Adam,
            tv_weight: 0.0,
            sign_grad: false,
            snapshot_steps: vec![0, 1000, 3000, 5000],
            mask_percentile: 80.0,
            study_pairs: 20,
            targets: vec![0, 1],
            fgsm_eps: 0.1,
            feature_layer: 0,
            trajectory: SnapshotPolicy::Endpoints,
        }
    }
}

fn bad_value(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key {key:?}: cannot parse {value:?} as {want}"))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad_value(key, v, "an unsigned integer"))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| bad_value(key, v, "an unsigned integer"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| bad_value(key, v, "a number"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad_value(key, v, "true or false")),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|tok| tok.trim().parse().map_err(|_| bad_value(key, v, "a comma-separated list")))
        .collect()
}

fn parse_policy(key: &str, v: &str) -> Result<SnapshotPolicy> {
    match v {
        "endpoints" => Ok(SnapshotPolicy::Endpoints),
        "full" => Ok(SnapshotPolicy::Full),
        other => other
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(SnapshotPolicy::Every)
            .ok_or_else(|| bad_value(key, v, "endpoints, full, or a positive stride")),
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse_usize(key, value)?,
            "min_object" => self.min_object = parse_usize(key, value)?,
            "max_object" => self.max_object = parse_usize(key, value)?,
            "place_row_min" => self.place_rows.get_or_insert((0, usize::MAX)).0 = parse_usize(key, value)?,
            "place_row_max" => self.place_rows.get_or_insert((0, usize::MAX)).1 = parse_usize(key, value)?,
            "place_col_min" => self.place_cols.get_or_insert((0, usize::MAX)).0 = parse_usize(key, value)?,
            "place_col_max" => self.place_cols.get_or_insert((0, usize::MAX)).1 = parse_usize(key, value)?,
            "intensity_min" => self.intensity_min = parse_f64(key, value)?,
            "intensity_max" => self.intensity_max = parse_f64(key, value)?,
            "dataset_count" => self.dataset_count = parse_usize(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "classifier_epochs" => self.classifier_epochs = parse_usize(key, value)?,
            "classifier_batch" => self.classifier_batch = parse_usize(key, value)?,
            "classifier_lr" => self.classifier_lr = parse_f64(key, value)?,
            "classifier_optimizer" => self.classifier_optimizer = parse_optimizer(value)?,
            "t_max" => self.t_max = parse_usize(key, value)?,
            "beta_min" => self.beta_min = parse_f64(key, value)?,
            "beta_max" => self.beta_max = parse_f64(key, value)?,
            "schedule" => {
                self.schedule = ScheduleKind::parse(value)
                    .ok_or_else(|| bad_value(key, value, "a schedule name"))?
            }
            "denoiser_epochs" => self.denoiser_epochs = parse_usize(key, value)?,
            "denoiser_batch" => self.denoiser_batch = parse_usize(key, value)?,
            "denoiser_lr" => self.denoiser_lr = parse_f64(key, value)?,
            "denoiser_optimizer" => self.denoiser_optimizer = parse_optimizer(value)?,
            "hidden_channels" => self.hidden_channels = parse_usize(key, value)?,
            "denoiser_layers" => self.denoiser_layers = parse_usize(key, value)?,
            "kernel" => self.kernel = parse_usize(key, value)?,
            "embed_dim" => self.embed_dim = parse_usize(key, value)?,
            "invert_steps" => self.invert_steps = parse_usize(key, value)?,
            "invert_lr" => self.invert_lr = parse_f64(key, value)?,
            "invert_optimizer" => self.invert_optimizer = parse_optimizer(value)?,
            "tv_weight" => self.tv_weight = parse_f64(key, value)?,
            "sign_grad" => self.sign_grad = parse_bool(key, value)?,
            "snapshot_steps" => self.snapshot_steps = parse_usize_list(key, value)?,
            "mask_percentile" => self.mask_percentile = parse_f64(key, value)?,
            "study_pairs" => self.study_pairs = parse_usize(key, value)?,
            "targets" => self.targets = parse_usize_list(key, value)?,
            "fgsm_eps" => self.fgsm_eps = parse_f64(key, value)?,
            "feature_layer" => self.feature_layer = parse_usize(key, value)?,
            "trajectory" => self.trajectory = parse_policy(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", no + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(Error::Config(format!("key {key:?} has an empty value")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate config key {key:?}")));
            }
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    // ── Derived module configurations ──────────────────────────────────

    pub fn dataset_spec(&self) -> DatasetSpec {
        let full = (0, self.image_size.saturating_sub(1));
        let clip = |b: (usize, usize)| (b.0, b.1.min(self.image_size.saturating_sub(1)));
        DatasetSpec {
            height: self.image_size,
            width: self.image_size,
            min_half_extent: self.min_object,
            max_half_extent: self.max_object,
            row_range: self.place_rows.map(clip).unwrap_or(full),
            col_range: self.place_cols.map(clip).unwrap_or(full),
            intensity: (self.intensity_min, self.intensity_max),
            count: self.dataset_count,
            seed: crate::rng::sub_seed(self.seed, 0x0da7a),
        }
    }

    pub fn classifier_arch(&self) -> ClassifierArch {
        ClassifierArch {
            in_channels: 1,
            height: self.image_size,
            width: self.image_size,
            classes: 2,
            convs: vec![
                ConvSpec { out_channels: 8, kernel: self.kernel },
                ConvSpec { out_channels: 16, kernel: self.kernel },
            ],
        }
    }

    pub fn denoiser_arch(&self) -> DenoiserArch {
        DenoiserArch {
            in_channels: 1,
            hidden_channels: self.hidden_channels,
            layers: self.denoiser_layers,
            kernel: self.kernel,
            embed_dim: self.embed_dim,
            classes: 2,
            t_max: self.t_max,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        crate::diffusion::make_schedule(self.t_max, self.schedule, self.beta_min, self.beta_max)
    }

    pub fn classifier_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.classifier_epochs,
            batch_size: self.classifier_batch,
            learning_rate: self.classifier_lr,
            optimizer: self.classifier_optimizer,
            seed,
        }
    }

    pub fn denoiser_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.denoiser_epochs,
            batch_size: self.denoiser_batch,
            learning_rate: self.denoiser_lr,
            optimizer: self.denoiser_optimizer,
            seed,
        }
    }

    pub fn invert_config(&self, seed: u64) -> crate::noise::InvertConfig {
        crate::noise::InvertConfig {
            steps: self.invert_steps,
            learning_rate: self.invert_lr,
            optimizer: self.invert_optimizer,
            snapshots: Vec::new(),
            seed,
            tv_weight: self.tv_weight,
            sign_grad: self.sign_grad,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_empty_text() {
        let cfg = RunConfig::parse_str("").unwrap();
        assert_eq!(cfg.image_size, 24);
        assert_eq!(cfg.snapshot_steps, vec![0, 1000, 3000, 5000]);
        assert_eq!(cfg.mask_percentile, 80.0);
    }

    #[test]
    fn keys_comments_and_lists_parse() {
        let text = "\
# a full-line comment
image_size = 16
invert_steps = 100   # trailing comment
targets = 1,0
sign_grad = true
trajectory = 25
";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.image_size, 16);
        assert_eq!(cfg.invert_steps, 100);
        assert_eq!(cfg.targets, vec![1, 0]);
        assert!(cfg.sign_grad);
        assert!(matches!(cfg.trajectory, SnapshotPolicy::Every(25)));
    }

    #[test]
    fn unknown_key_error_names_the_key() {
        let err = RunConfig::parse_str("no_such_knob = 3").unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("no_such_knob"), "{msg}");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn duplicate_key_is_an_error() {
        let err = RunConfig::parse_str("seed = 1\nseed = 2").unwrap_err();
        assert!(format!("{err}").contains("duplicate"));
    }

    #[test]
    fn malformed_lines_and_values_are_errors() {
        assert!(RunConfig::parse_str("just words").is_err());
        assert!(RunConfig::parse_str("image_size =").is_err());
        assert!(RunConfig::parse_str("image_size = soon").is_err());
        assert!(RunConfig::parse_str("classifier_optimizer = adamw").is_err());
        assert!(RunConfig::parse_str("trajectory = 0").is_err());
    }

    #[test]
    fn placement_keys_build_the_dataset_spec() {
        let cfg = RunConfig::parse_str("place_col_max = 11").unwrap();
        let spec = cfg.dataset_spec();
        assert_eq!(spec.col_range, (0, 11));
        assert_eq!(spec.row_range, (0, 23));
        spec.validate().unwrap();
    }

    #[test]
    fn derived_configs_are_consistent() {
        let cfg = RunConfig::default();
        cfg.classifier_arch().validate().unwrap();
        cfg.denoiser_arch().validate().unwrap();
        let sched = cfg.noise_schedule().unwrap();
        assert_eq!(sched.t_max(), cfg.t_max);
        assert_eq!(cfg.denoiser_arch().t_max, sched.t_max());
    }
}
