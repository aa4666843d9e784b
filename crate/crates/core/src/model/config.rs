use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// One decoder of `num_layers` independent layers.
    StackedBaseline,
    /// Two decoders, each applying one shared layer `num_layers` times.
    Psdp,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stacked" | "stacked-baseline" => Ok(Self::StackedBaseline),
            "psdp" => Ok(Self::Psdp),
            other => Err(format!("unknown variant {other:?} (expected stacked|psdp)")),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::StackedBaseline => "stacked",
            Self::Psdp => "psdp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_size: usize,
    pub num_heads: usize,
    pub head_size: usize,
    /// Always equal to `embed_size`; kept because the published tables list it.
    pub hidden_size: usize,
    pub ffn_size: usize,
    /// Layers per decoder for PSDP, total layers for the stacked baseline.
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("embed_size", self.embed_size),
            ("num_heads", self.num_heads),
            ("head_size", self.head_size),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("num_layers", self.num_layers),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.num_heads * self.head_size != self.embed_size {
            return Err(ModelError::InvalidConfig(format!(
                "num_heads * head_size must equal embed_size ({} * {} != {})",
                self.num_heads, self.head_size, self.embed_size
            )));
        }
        if self.hidden_size != self.embed_size {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_size must equal embed_size ({} != {})",
                self.hidden_size, self.embed_size
            )));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::InvalidConfig("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    /// The 12-layer 768-wide baseline shape; PSDP uses 6 layers per decoder.
    pub fn table1(variant: Variant) -> Self {
        Self {
            embed_size: 768,
            num_heads: 12,
            head_size: 64,
            hidden_size: 768,
            ffn_size: 3072,
            num_layers: match variant {
                Variant::StackedBaseline => 12,
                Variant::Psdp => 6,
            },
            max_seq_len: 512,
            vocab_size: 30_522,
            variant,
        }
    }

    /// English composition setup: two 12-layer decoders, 1200 wide.
    pub fn table2_english() -> Self {
        Self {
            embed_size: 1200,
            num_heads: 12,
            head_size: 100,
            hidden_size: 1200,
            ffn_size: 4800,
            num_layers: 12,
            max_seq_len: 128,
            vocab_size: 30_522,
            variant: Variant::Psdp,
        }
    }

    /// Couplet setup: as the English one with a 64-token window.
    pub fn table3_couplet() -> Self {
        Self {
            max_seq_len: 64,
            vocab_size: 21_128,
            ..Self::table2_english()
        }
    }
}
