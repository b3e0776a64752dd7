use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected tiny or full)"))),
        }
    }
}

/// Network shape shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CBUnetConfig {
    pub preset: Preset,
    /// Number of encoder levels (pooling steps).
    pub depth: usize,
    /// Channels at the first level; doubles per level.
    pub base_channels: usize,
    pub attention_enabled: bool,
    pub histogram_branch_enabled: bool,
}

impl CBUnetConfig {
    pub fn tiny() -> Self {
        CBUnetConfig {
            preset: Preset::Tiny,
            depth: 2,
            base_channels: 8,
            attention_enabled: true,
            histogram_branch_enabled: true,
        }
    }

    pub fn full() -> Self {
        CBUnetConfig {
            preset: Preset::Full,
            depth: 4,
            base_channels: 32,
            attention_enabled: true,
            histogram_branch_enabled: true,
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Tiny => Self::tiny(),
            Preset::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!(
                "base_channels must be at least 4, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    /// Channels at encoder level `i`; level `depth` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.depth)
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        let m = self.multiple();
        if width == 0 || height == 0 || width % m != 0 || height % m != 0 {
            return Err(Error::Dimension(format!(
                "input {width}x{height} is not a nonzero multiple of {m}"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: CBUnetConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("bad network config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}
