use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use nfad_core::pipeline::{DatasetKind, RunConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DatasetArg {
    Moons,
    Csv,
}

/// Flags shared by every subcommand. Each one overrides the matching key
/// of the config file.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long = "tail-p", global = true)]
    pub tail_p: Option<f64>,
    #[arg(long = "lambda-max", global = true)]
    pub lambda_max: Option<f64>,
    #[arg(long = "epochs-nf", global = true)]
    pub epochs_nf: Option<usize>,
    #[arg(long = "epochs-clf", global = true)]
    pub epochs_clf: Option<usize>,
    /// Comma-separated; `train-clf` uses the first entry.
    #[arg(long = "anomaly-counts", value_delimiter = ',', global = true)]
    pub anomaly_counts: Option<Vec<usize>>,
    /// Comma-separated seeds for `experiment`.
    #[arg(long, value_delimiter = ',', global = true)]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_enum, global = true)]
    pub dataset: Option<DatasetArg>,
    /// Input CSV (implies `--dataset csv`).
    #[arg(long, global = true)]
    pub csv: Option<PathBuf>,
    #[arg(long = "label-column", global = true)]
    pub label_column: Option<String>,
}

pub fn parse_toml(text: &str) -> nfad_core::Result<RunConfig> {
    toml::from_str(text).map_err(|e| {
        let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        nfad_core::Error::InvalidArgument(msg)
    })
}

pub fn read_config(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_toml(&text).with_context(|| format!("config {}", path.display()))
}

impl Overrides {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.tail_p {
            cfg.tail_p = v;
        }
        if let Some(v) = self.lambda_max {
            cfg.nf.lambda_max = v;
        }
        if let Some(v) = self.epochs_nf {
            cfg.nf.epochs = v;
        }
        if let Some(v) = self.epochs_clf {
            cfg.clf.epochs = v;
        }
        if let Some(v) = &self.anomaly_counts {
            cfg.anomaly_counts = v.clone();
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = v.clone();
        }
        if let Some(v) = &self.csv {
            cfg.dataset.csv = Some(v.clone());
            cfg.dataset.kind = DatasetKind::Csv;
        }
        if let Some(v) = self.dataset {
            cfg.dataset.kind = match v {
                DatasetArg::Moons => DatasetKind::Moons,
                DatasetArg::Csv => DatasetKind::Csv,
            };
        }
        if let Some(v) = &self.label_column {
            cfg.dataset.label_column = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
