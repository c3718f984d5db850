//! Run configuration: the hyperparameter bundle each normalizer trains
//! under, the dataset/network pairing, and the optional JSON file that
//! mirrors the command-line flags.

use std::path::{Path, PathBuf};

use normlab_core::error::{Error, Result};
use normlab_core::network::{
    build_cifar10_nv, build_deep_linear, build_fc_classifier, NetworkSpec, NormKind,
};
use normlab_core::optim::ScheduleKind;
use serde::Deserialize;

/// Which architecture a run trains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NetChoice {
    /// Two-layer classifier head sized for the synthetic blobs.
    BlobClassifier,
    /// The 12-layer image network.
    Cifar10Nv,
    /// Bias-free linear stack of the given depth and width.
    DeepLinear { depth: usize, width: usize },
}

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DataChoice {
    /// Synthetic Gaussian blobs, one centroid per class.
    Blobs,
    /// CIFAR-10 binary batches in the given directory.
    Cifar(PathBuf),
}

/// Which tensors the per-cadence diagnostics rows describe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackMode {
    /// Every layer's output.
    LayerOutputs,
    /// The normalizer outputs only.
    NormTaps,
}

/// Dimensions of the synthetic blob classifier problem.
pub const BLOB_CLASSES: usize = 4;
pub const BLOB_DIM: usize = 128;
pub const BLOB_HIDDEN: usize = 32;
/// Centroid offset; distinct class centers sit `BLOB_SEPARATION * sqrt(2)`
/// apart against unit per-coordinate noise.
pub const BLOB_SEPARATION: f64 = 6.0;

/// Schedule shape, final rate, and weight decay a normalizer trains
/// under; the starting rate is 0.01 for every scheme.
pub fn protocol_defaults(norm: NormKind) -> (ScheduleKind, f64, f64) {
    match norm {
        NormKind::None => (ScheduleKind::Linear, 1e-5, 0.0),
        NormKind::BatchNorm => (ScheduleKind::Linear, 1e-5, 0.002),
        NormKind::WeightNorm => (ScheduleKind::Linear, 1e-4, 0.0),
        NormKind::NormProp | NormKind::TreluWn => (ScheduleKind::Poly2, 1e-5, 0.001),
    }
}

/// Starting learning rate shared by every scheme's bundle.
pub const LR_INITIAL: f64 = 0.01;
/// Momentum coefficient shared by every scheme's bundle.
pub const MOMENTUM: f64 = 0.9;
/// Mini-batch size shared by every scheme's bundle.
pub const BATCH_SIZE: usize = 128;

/// Complete description of one training run. Every run is a pure
/// function of this structure; there are no unseeded choices.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub net: NetChoice,
    pub data: DataChoice,
    pub norm: NormKind,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard iteration cap; overrides `epochs` when set.
    pub iters: Option<usize>,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Record diagnostics every this many iterations.
    pub cadence: usize,
    /// Sample count for synthetic data; ignored for file-backed data.
    pub n_samples: usize,
    pub track: TrackMode,
}

impl TrainConfig {
    /// Blob-classifier run under the given normalizer's bundle.
    pub fn for_norm(norm: NormKind) -> Self {
        let (schedule, lr_final, weight_decay) = protocol_defaults(norm);
        TrainConfig {
            net: NetChoice::BlobClassifier,
            data: DataChoice::Blobs,
            norm,
            batch_size: BATCH_SIZE,
            epochs: 5,
            iters: None,
            seed: 0,
            schedule,
            lr_initial: LR_INITIAL,
            lr_final,
            momentum: MOMENTUM,
            weight_decay,
            cadence: 10,
            n_samples: 2048,
            track: TrackMode::LayerOutputs,
        }
    }

    /// Builds the network this config trains.
    pub fn build_net(&self) -> Result<NetworkSpec> {
        match self.net {
            NetChoice::BlobClassifier => {
                build_fc_classifier(BLOB_DIM, BLOB_HIDDEN, BLOB_CLASSES, self.norm)
            }
            NetChoice::Cifar10Nv => Ok(build_cifar10_nv(self.norm)),
            NetChoice::DeepLinear { depth, width } => {
                build_deep_linear(depth, width, BLOB_DIM, BLOB_CLASSES, self.norm)
            }
        }
    }

    /// Rejects configurations no run should start from.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if self.epochs == 0 && self.iters.is_none() {
            return Err(Error::Invalid(
                "need a positive epoch count or an iteration cap".into(),
            ));
        }
        if self.iters == Some(0) {
            return Err(Error::Invalid("iteration cap must be positive".into()));
        }
        if self.cadence == 0 {
            return Err(Error::Invalid("cadence must be positive".into()));
        }
        if matches!(self.data, DataChoice::Blobs) && self.n_samples < self.batch_size {
            return Err(Error::Invalid(format!(
                "{} samples cannot fill a batch of {}",
                self.n_samples, self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Invalid(format!(
                "weight decay {} must be finite and non-negative",
                self.weight_decay
            )));
        }
        self.build_net()?.validate()?;
        Ok(())
    }
}

/// Parses a normalizer name as the command line spells it.
pub fn parse_norm(s: &str) -> std::result::Result<NormKind, String> {
    match s {
        "none" => Ok(NormKind::None),
        "bn" => Ok(NormKind::BatchNorm),
        "wn" => Ok(NormKind::WeightNorm),
        "np" => Ok(NormKind::NormProp),
        "trelu-wn" => Ok(NormKind::TreluWn),
        other => Err(format!(
            "unknown normalizer '{other}' (expected none, bn, wn, np, trelu-wn)"
        )),
    }
}

/// Parses a schedule name as the command line spells it.
pub fn parse_schedule(s: &str) -> std::result::Result<ScheduleKind, String> {
    match s {
        "linear" => Ok(ScheduleKind::Linear),
        "poly2" => Ok(ScheduleKind::Poly2),
        other => Err(format!("unknown schedule '{other}' (expected linear, poly2)")),
    }
}

/// JSON config file carrying the same settings as the flags; any flag
/// given on the command line takes precedence over its file value.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub normalizer: Option<String>,
    pub lr: Option<f64>,
    pub schedule: Option<String>,
    pub epochs: Option<usize>,
    pub iters: Option<usize>,
    pub batch_size: Option<usize>,
    pub wd: Option<f64>,
    pub cadence: Option<usize>,
    pub data: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.into(), source: e })?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Format(format!("config file {}: {e}", path.display()))
        })
    }

    pub fn normalizer_kind(&self) -> Result<Option<NormKind>> {
        self.normalizer
            .as_deref()
            .map(|s| parse_norm(s).map_err(Error::Invalid))
            .transpose()
    }

    pub fn schedule_kind(&self) -> Result<Option<ScheduleKind>> {
        self.schedule
            .as_deref()
            .map(|s| parse_schedule(s).map_err(Error::Invalid))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundles_match_the_training_protocol() {
        for norm in [
            NormKind::None,
            NormKind::BatchNorm,
            NormKind::WeightNorm,
            NormKind::NormProp,
            NormKind::TreluWn,
        ] {
            let cfg = TrainConfig::for_norm(norm);
            assert_eq!(cfg.lr_initial, 0.01);
            assert_eq!(cfg.momentum, 0.9);
            assert_eq!(cfg.batch_size, 128);
            cfg.validate().unwrap();
        }
        let (kind, lr_final, wd) = protocol_defaults(NormKind::BatchNorm);
        assert_eq!((kind, lr_final, wd), (ScheduleKind::Linear, 1e-5, 0.002));
        let (kind, lr_final, wd) = protocol_defaults(NormKind::WeightNorm);
        assert_eq!((kind, lr_final, wd), (ScheduleKind::Linear, 1e-4, 0.0));
        let (kind, lr_final, wd) = protocol_defaults(NormKind::NormProp);
        assert_eq!((kind, lr_final, wd), (ScheduleKind::Poly2, 1e-5, 0.001));
        let (kind, lr_final, wd) = protocol_defaults(NormKind::TreluWn);
        assert_eq!((kind, lr_final, wd), (ScheduleKind::Poly2, 1e-5, 0.001));
        let (kind, lr_final, wd) = protocol_defaults(NormKind::None);
        assert_eq!((kind, lr_final, wd), (ScheduleKind::Linear, 1e-5, 0.0));
    }

    #[test]
    fn validation_rejects_degenerate_runs() {
        let mut cfg = TrainConfig::for_norm(NormKind::None);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_norm(NormKind::None);
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        cfg.iters = Some(100);
        cfg.validate().unwrap();
        cfg.iters = Some(0);
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_norm(NormKind::None);
        cfg.cadence = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_norm(NormKind::None);
        cfg.n_samples = 64;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_norm(NormKind::None);
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_norm(NormKind::None);
        cfg.weight_decay = -0.1;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::for_norm(NormKind::NormProp);
        cfg.net = NetChoice::DeepLinear { depth: 10, width: 32 };
        assert!(cfg.validate().is_err(), "rectifying normalizer in a linear stack");
    }

    #[test]
    fn flag_spellings_parse_and_reject() {
        assert_eq!(parse_norm("trelu-wn").unwrap(), NormKind::TreluWn);
        assert_eq!(parse_norm("bn").unwrap(), NormKind::BatchNorm);
        assert!(parse_norm("batchnorm").is_err());
        assert_eq!(parse_schedule("poly2").unwrap(), ScheduleKind::Poly2);
        assert!(parse_schedule("cosine").is_err());
    }

    #[test]
    fn file_config_parses_and_rejects_unknown_keys() {
        let dir = std::env::temp_dir().join("normlab-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("good.json");
        std::fs::write(
            &path,
            r#"{"normalizer": "wn", "lr": 0.02, "batch-size": 64, "schedule": "linear"}"#,
        )
        .unwrap();
        let fc = FileConfig::load(&path).unwrap();
        assert_eq!(fc.normalizer_kind().unwrap(), Some(NormKind::WeightNorm));
        assert_eq!(fc.schedule_kind().unwrap(), Some(ScheduleKind::Linear));
        assert_eq!(fc.lr, Some(0.02));
        assert_eq!(fc.batch_size, Some(64));
        assert_eq!(fc.seed, None);

        let bad = dir.join("bad.json");
        std::fs::write(&bad, r#"{"learning-rate": 0.02}"#).unwrap();
        assert!(matches!(FileConfig::load(&bad), Err(Error::Format(_))));

        let missing = dir.join("missing.json");
        assert!(matches!(FileConfig::load(&missing), Err(Error::Io { .. })));

        let unnorm = dir.join("unnorm.json");
        std::fs::write(&unnorm, r#"{"normalizer": "layer"}"#).unwrap();
        let fc = FileConfig::load(&unnorm).unwrap();
        assert!(fc.normalizer_kind().is_err());
    }
}
