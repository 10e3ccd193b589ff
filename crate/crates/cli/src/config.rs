//! Run configuration documents and their command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use mvfa_core::datalab::{self, SyntheticData};
use mvfa_core::{BackboneConfig, Dataset, HeadKind, Mode, RegionSizes, SyntheticSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Where the images come from: a directory written by `gen-data` (or laid
/// out the same way), or a synthetic set rendered in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Everything one run needs, as read from and echoed to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub data: DataSource,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            backbone: BackboneConfig::default(),
            data: DataSource::default(),
            output_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::usage(format!("invalid run config: {e}")))
    }

    /// Reads and parses a config file; an absent path gives the defaults.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                RunConfig::from_json(&text).map_err(|e| CliError::usage(format!("{}: {}", p.display(), e.message)))
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Cross-field checks: backbone, training settings against the feature
    /// size, and the synthetic spec against the backbone input.
    pub fn validate(&self) -> CliResult<()> {
        self.backbone.validate(self.train.region_sizes.max())?;
        let (h, w, _) = self.backbone.feature_shape();
        self.train.validate(h, w)?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.image_side != self.backbone.input_height || spec.image_side != self.backbone.input_width {
                return Err(CliError::usage(format!(
                    "synthetic image side {} does not match backbone input {}x{}",
                    spec.image_side, self.backbone.input_height, self.backbone.input_width
                )));
            }
        }
        Ok(())
    }

    /// Train and validation splits.
    pub fn load_data(&self) -> CliResult<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Path(root) => Ok(datalab::load_dataset(root)?),
            DataSource::Synthetic(spec) => {
                let SyntheticData { train, val } = datalab::synthesize(spec)?;
                Ok((train.data, val.data))
            }
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad list entry {p:?}")))
        .collect()
}

fn parse_region_sizes(s: &str) -> Result<RegionSizes, String> {
    RegionSizes::new(parse_list(s)?).map_err(|e| e.to_string())
}

/// One flag per configuration key; a given flag replaces the key's value.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub head: Option<HeadKind>,
    #[arg(long)]
    pub k: Option<usize>,
    /// comma-separated odd sizes, e.g. 3,5,7,9
    #[arg(long, value_parser = parse_region_sizes)]
    pub region_sizes: Option<RegionSizes>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, alias = "iters")]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub grid_side: Option<usize>,
    #[arg(long)]
    pub proto_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// read images from a dataset directory instead of the configured source
    #[arg(long)]
    pub data_path: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl TrainOverrides {
    pub fn apply(&self, c: &mut RunConfig) {
        let t = &mut c.train;
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    t.$field = v.clone();
                }
            )*};
        }
        set!(mode, head, k, region_sizes, batch_size, lr, iterations, seed, eta, grid_side, proto_dim, dropout, augment, eval_every);
        if let Some(p) = &self.data_path {
            c.data = DataSource::Path(p.clone());
        }
        if let Some(p) = &self.output_dir {
            c.output_dir = p.clone();
        }
    }
}

/// Parses a comma-separated list flag value.
pub fn list_arg<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    parse_list(s)
}
