use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// Architectural variant used by the ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSpec {
    /// The complete network.
    #[default]
    Full,
    /// Encoder-decoder path: two downsamplings, the bottom row, two upsamplings.
    Ednet,
    /// Grid without the inner exchange columns.
    Msnet,
    /// Fusion by plain addition.
    NoScab,
    /// Spatial attention only.
    NoCab,
    /// Channel attention only.
    NoSab,
    /// Output convolution without the post-processing block.
    NoPost,
    /// Pre-processing replaced by the RGB channels padded with zero maps.
    OriginalInputs,
    /// Pre-processing replaced by the hand-crafted 16-channel stack.
    DerivedInputs,
}

impl VariantSpec {
    pub const ALL: [VariantSpec; 9] = [
        Self::Full,
        Self::Ednet,
        Self::Msnet,
        Self::NoScab,
        Self::NoCab,
        Self::NoSab,
        Self::NoPost,
        Self::OriginalInputs,
        Self::DerivedInputs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Ednet => "ednet",
            Self::Msnet => "msnet",
            Self::NoScab => "no_scab",
            Self::NoCab => "no_cab",
            Self::NoSab => "no_sab",
            Self::NoPost => "no_post",
            Self::OriginalInputs => "original_inputs",
            Self::DerivedInputs => "derived_inputs",
        }
    }

    pub(crate) fn has_pre(self) -> bool {
        !matches!(self, Self::OriginalInputs | Self::DerivedInputs)
    }

    pub(crate) fn uses_cab(self) -> bool {
        !matches!(self, Self::NoScab | Self::NoCab)
    }

    pub(crate) fn uses_sab(self) -> bool {
        !matches!(self, Self::NoScab | Self::NoSab)
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// What the final convolution predicts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Three channels: the dehazed image itself.
    #[default]
    Direct,
    /// Two maps: transmission (squashed) and airlight (spatially averaged),
    /// combined through the inverted scattering model.
    Indirect,
}

impl OutputHead {
    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Indirect => "indirect",
        }
    }
}

impl FromStr for OutputHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "indirect" => Ok(Self::Indirect),
            _ => Err(Error::Config(format!("unknown output head `{s}`"))),
        }
    }
}

/// Complete architectural hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub scale_channels: Vec<usize>,
    pub rdbs_per_row: usize,
    pub rdb_convs: usize,
    pub growth_rate: usize,
    pub cab_reduction: usize,
    pub sab_kernel: usize,
    pub variant: VariantSpec,
    pub output_head: OutputHead,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rows: 3,
            cols: 6,
            scale_channels: vec![16, 32, 64],
            rdbs_per_row: 5,
            rdb_convs: 5,
            growth_rate: 16,
            cab_reduction: 16,
            sab_kernel: 7,
            variant: VariantSpec::Full,
            output_head: OutputHead::Direct,
        }
    }
}

impl GridConfig {
    /// A three-row grid with custom widths; everything else at defaults.
    pub fn with_widths(base: usize, growth: usize) -> Self {
        Self {
            scale_channels: vec![base, 2 * base, 4 * base],
            growth_rate: growth,
            ..Self::default()
        }
    }

    /// The `[4, 8, 16]`, growth-4 configuration used by the gradient suite.
    pub fn tiny() -> Self {
        Self::with_widths(4, 4)
    }

    pub fn variant(mut self, variant: VariantSpec) -> Self {
        self.variant = variant;
        self
    }

    pub fn head(mut self, head: OutputHead) -> Self {
        self.output_head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.rows < 2 {
            return err(format!("need at least 2 rows, got {}", self.rows));
        }
        if self.scale_channels.len() != self.rows {
            return err(format!(
                "{} rows but {} scale widths",
                self.rows,
                self.scale_channels.len()
            ));
        }
        if self.cols < 2 || !self.cols.is_multiple_of(2) {
            return err(format!("columns must be even and >= 2, got {}", self.cols));
        }
        if self.rdbs_per_row != self.cols - 1 {
            return err(format!(
                "{} columns need {} RDBs per row, got {}",
                self.cols,
                self.cols - 1,
                self.rdbs_per_row
            ));
        }
        if self.scale_channels[0] == 0 {
            return err("scale widths must be positive".into());
        }
        for w in self.scale_channels.windows(2) {
            if w[1] != 2 * w[0] {
                return err(format!(
                    "each scale must double the previous width: {:?}",
                    self.scale_channels
                ));
            }
        }
        if self.growth_rate < 1 {
            return err("growth rate must be >= 1".into());
        }
        if self.rdb_convs < 2 {
            return err("an RDB needs at least 2 convolutions".into());
        }
        if self.cab_reduction < 1 {
            return err("channel attention reduction must be >= 1".into());
        }
        if self.sab_kernel.is_multiple_of(2) {
            return err(format!(
                "spatial attention kernel must be odd, got {}",
                self.sab_kernel
            ));
        }
        let base = self.scale_channels[0];
        match self.variant {
            VariantSpec::DerivedInputs if base != crate::haze::DERIVED_CHANNELS => err(format!(
                "derived inputs provide {} channels but the first scale has {base}",
                crate::haze::DERIVED_CHANNELS
            )),
            VariantSpec::OriginalInputs if base < 3 => err(format!(
                "original inputs need >= 3 channels at the first scale, got {base}"
            )),
            _ => Ok(()),
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.rows - 1)
    }

    /// Columns carrying upsampling blocks; row-0 junctions here are the taps.
    pub fn tap_columns(&self) -> std::ops::Range<usize> {
        self.cols / 2..self.cols
    }

    /// Bottleneck width of the channel-attention perceptron for `channels`.
    pub fn cab_hidden(&self, channels: usize) -> usize {
        (channels / self.cab_reduction).max(2)
    }

    /// Output channels of the final convolution.
    pub fn out_channels(&self) -> usize {
        match self.output_head {
            OutputHead::Direct => 3,
            OutputHead::Indirect => 2,
        }
    }

    /// Short stable digest of the configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)[..16].to_string()
    }
}
