//! Run configuration: a TOML document, overridden by command-line flags, and
//! written back in resolved form beside every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use webly_core::dataset::SynthConfig;
use webly_core::eval::TestSplit;
use webly_core::training::{BatchWellConfig, TrainConfig};
use webly_core::{Error, Result, VotingScheme};

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RunMethod {
    /// Co-training of all training modalities with consensus weights.
    #[default]
    Mmco,
    /// Online self-paced training of the test modality alone.
    OnlineWell,
    /// Alternating full-data reweighting and refitting of the test modality.
    BatchWell,
    /// Every weight fixed at 1.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            levels: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Voting-modality subsets; empty selects the dataset's default subsets.
    pub subsets: Vec<Vec<String>>,
}

/// Everything a command needs. Scalars precede tables so the document
/// serializes as valid TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub method: RunMethod,
    /// Save every modality model every this many epochs; 0 disables.
    pub checkpoint_every: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    pub test_split: TestSplit,
    pub train: TrainConfig,
    pub batch_well: BatchWellConfig,
    pub sweep: SweepConfig,
    pub ablation: AblationConfig,
}

/// Flags shared by the configurable commands. Each one overrides the
/// matching file value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub voting: Option<VotingScheme>,
    /// Comma-separated training modalities.
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<String>>,
    #[arg(long)]
    pub test_modality: Option<String>,
    #[arg(long)]
    pub p_init: Option<f64>,
    #[arg(long)]
    pub p_step: Option<f64>,
    #[arg(long)]
    pub p_max: Option<f64>,
    #[arg(long)]
    pub queue_capacity: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub method: Option<RunMethod>,
    /// Fraction of false positives per class in generated data.
    #[arg(long)]
    pub noise_level: Option<f64>,
    /// Dataset directory to train on instead of generated data.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub test_dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// The file named by `--config` (or defaults) with the flags applied.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut cfg = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.dataset {
            self.dataset = Some(p.clone());
        }
        if let Some(p) = &o.test_dataset {
            self.test_dataset = Some(p.clone());
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(noise) = o.noise_level {
            self.synth.get_or_insert_with(SynthConfig::default).noise_level = noise;
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            if let Some(s) = &mut self.synth {
                s.seed = seed;
            }
        }
        let t = &mut self.train;
        if let Some(v) = o.voting {
            t.voting = v;
        }
        if let Some(m) = &o.modalities {
            t.train_modalities = m.clone();
        }
        if let Some(m) = &o.test_modality {
            t.test_modality = m.clone();
        }
        if let Some(v) = o.p_init {
            t.schedule.p_init = v;
        }
        if let Some(v) = o.p_step {
            t.schedule.p_step = v;
        }
        if let Some(v) = o.p_max {
            t.schedule.p_max = v;
        }
        if let Some(v) = o.queue_capacity {
            t.schedule.queue_capacity = Some(v);
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.lr {
            t.optimizer.lr = v;
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config("no output directory: set `out` or pass --out"))
    }

    /// The generator settings for commands that only work on generated data.
    pub fn synth_only(&self) -> Result<SynthConfig> {
        if self.dataset.is_some() {
            return Err(Error::config("this command generates its data; remove `dataset`"));
        }
        let s = self.synth.clone().unwrap_or_default();
        s.validate()?;
        Ok(s)
    }

    /// Checks that exactly one data source is configured and validates it.
    pub fn check_source(&self) -> Result<()> {
        match (&self.dataset, &self.synth) {
            (Some(_), Some(_)) => Err(Error::config("set either `dataset` or a [synth] table, not both")),
            (None, None) => Err(Error::config("no data source: set `dataset` or a [synth] table")),
            (None, Some(s)) => {
                if self.test_dataset.is_some() {
                    return Err(Error::config(
                        "`test_dataset` needs `dataset`; generated data carries its own test split",
                    ));
                }
                s.validate()
            }
            (Some(_), None) => Ok(()),
        }
    }

    /// Creates the output directory and writes the resolved snapshot into it.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        let dir = self.out_dir()?;
        fs::create_dir_all(dir)
            .map_err(|e| Error::config(format!("output directory {} is not writable: {e}", dir.display())))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_toml())
            .map_err(|e| Error::config(format!("output directory {} is not writable: {e}", dir.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn populated_config_round_trips() {
        let mut cfg = RunConfig {
            dataset: Some("data/train".into()),
            out: Some("runs/a".into()),
            method: RunMethod::BatchWell,
            checkpoint_every: 5,
            ..RunConfig::default()
        };
        cfg.train.schedule.queue_capacity = Some(123);
        cfg.train.optimizer.lr = 0.01;
        cfg.train.voting = VotingScheme::Product;
        cfg.ablation.subsets = vec![vec!["m0".into(), "concat".into()]];
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_tables_take_defaults() {
        let cfg = RunConfig::from_toml("out = \"x\"\n[synth]\nnoise_level = 0.7\n[train]\nepochs = 3\n").unwrap();
        let synth = cfg.synth.unwrap();
        assert_eq!(synth.noise_level, 0.7);
        assert_eq!(synth.n_classes, SynthConfig::default().n_classes);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_toml("[train]\nepoch = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg =
            RunConfig::from_toml("[synth]\nseed = 4\n[train]\nseed = 4\nepochs = 9\nvoting = \"max\"\n").unwrap();
        cfg.apply(&Overrides {
            seed: Some(7),
            epochs: Some(2),
            voting: Some(VotingScheme::Average),
            modalities: Some(vec!["m0".into(), "concat".into()]),
            p_max: Some(0.8),
            queue_capacity: Some(50),
            ..Overrides::default()
        });
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.synth.as_ref().unwrap().seed, 7);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.voting, VotingScheme::Average);
        assert_eq!(cfg.train.train_modalities, ["m0", "concat"]);
        assert_eq!(cfg.train.schedule.p_max, 0.8);
        assert_eq!(cfg.train.schedule.queue_capacity, Some(50));
    }

    #[test]
    fn data_source_must_be_unique() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.check_source(), Err(Error::Config(_))));
        cfg.synth = Some(SynthConfig::default());
        cfg.check_source().unwrap();
        cfg.dataset = Some("d".into());
        assert!(matches!(cfg.check_source(), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_noise_fails_validation() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            noise_level: Some(1.5),
            ..Overrides::default()
        });
        assert!(matches!(cfg.synth_only(), Err(Error::Config(_))));
    }
}
