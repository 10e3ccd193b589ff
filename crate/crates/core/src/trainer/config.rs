use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::sampler::RegionSizes;

/// Training/inference pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// GAP -> main head, no auxiliary branch
    #[serde(rename = "GAP")]
    Gap,
    /// AdaCAM-guided multi-view sampling
    #[serde(rename = "MFA")]
    Mfa,
    /// attention-mask-weighted GAP, no view sampling
    #[serde(rename = "WO_FEAAUG")]
    WoFeaAug,
    /// even-grid anchors; the auxiliary branch is trained but does not steer sampling
    #[serde(rename = "WO_ADACAM")]
    WoAdaCam,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Gap, Mode::Mfa, Mode::WoFeaAug, Mode::WoAdaCam];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Gap => "GAP",
            Mode::Mfa => "MFA",
            Mode::WoFeaAug => "WO_FEAAUG",
            Mode::WoAdaCam => "WO_ADACAM",
        }
    }

    pub fn has_aux(self) -> bool {
        !matches!(self, Mode::Gap)
    }

    /// Whether the main head sees sampled local views.
    pub fn samples_views(self) -> bool {
        matches!(self, Mode::Mfa | Mode::WoAdaCam)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}' (expected GAP, MFA, WO_FEAAUG, WO_ADACAM)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub head: HeadKind,
    /// anchors per image
    pub k: usize,
    pub region_sizes: RegionSizes,
    pub batch_size: usize,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
    /// attention mask steepness
    pub eta: f64,
    /// anchors per side of the even grid
    pub grid_side: usize,
    pub proto_dim: usize,
    pub dropout: f64,
    /// horizontal flip and pad-crop during training
    pub augment: bool,
    /// iterations between validation passes
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Mfa,
            head: HeadKind::SingleFc,
            k: 50,
            region_sizes: RegionSizes::default(),
            batch_size: 64,
            lr: 1e-4,
            iterations: 2000,
            seed: 0,
            eta: 10.0,
            grid_side: 7,
            proto_dim: 64,
            dropout: 0.5,
            augment: true,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    /// Checks the configuration against a feature map of `h x w`.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive and finite, got {}", self.lr));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive and finite, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if self.proto_dim == 0 {
            return bad("proto_dim must be >= 1".into());
        }
        self.region_sizes
            .check_fits(h, w)
            .map_err(|e| Error::Config(e.to_string()))?;
        match self.mode {
            Mode::Mfa if self.k == 0 || self.k > h * w => {
                bad(format!("k = {} must lie in 1..={} for {h}x{w} features", self.k, h * w))
            }
            Mode::WoAdaCam if self.grid_side == 0 || self.grid_side > h.min(w) => bad(format!(
                "grid_side = {} must lie in 1..={} for {h}x{w} features",
                self.grid_side,
                h.min(w)
            )),
            _ => Ok(()),
        }
    }

    /// Views per image fed to the main head.
    pub fn views_per_image(&self) -> usize {
        match self.mode {
            Mode::Mfa => self.k * self.region_sizes.len(),
            Mode::WoAdaCam => self.grid_side * self.grid_side * self.region_sizes.len(),
            Mode::Gap | Mode::WoFeaAug => 1,
        }
    }
}
