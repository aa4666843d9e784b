//! Closed-form parameter accounting.
//!
//! These formulas are written independently of [`super::params::layout`]; the
//! tests check that the two always agree.

use super::{ModelConfig, Variant};

/// Bytes per stored parameter in a checkpoint.
pub const STORED_BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub per_layer: u64,
    /// Distinct layer parameter sets actually stored.
    pub layer_sets: u64,
    pub decoders_total: u64,
    pub mapping_weight: u64,
    pub mapping_bias: u64,
    pub token_embeddings: u64,
    pub position_embeddings: u64,
    pub final_norm: u64,
    pub total: u64,
}

impl ParamBreakdown {
    pub fn excluding_embeddings(&self) -> u64 {
        self.total - self.token_embeddings - self.position_embeddings
    }

    pub fn stored_bytes(&self) -> u64 {
        self.total * STORED_BYTES_PER_PARAM
    }
}

/// `4(E² + E)` attention + `EF + F + FE + E` feedforward + `4E` for two norms.
pub fn per_layer(e: u64, f: u64) -> u64 {
    4 * (e * e + e) + (e * f + f) + (f * e + e) + 4 * e
}

pub fn count_parameters(cfg: &ModelConfig) -> ParamBreakdown {
    let e = cfg.embed_size as u64;
    let f = cfg.ffn_size as u64;
    let per_layer = per_layer(e, f);
    let token_embeddings = cfg.vocab_size as u64 * e;
    let position_embeddings = cfg.max_seq_len as u64 * e;
    let (layer_sets, mapping_weight, mapping_bias, final_norm) = match cfg.variant {
        Variant::StackedBaseline => (cfg.num_layers as u64, 0, 0, 0),
        Variant::Psdp => (2, 2 * e * e, e, 2 * e),
    };
    let decoders_total = layer_sets * per_layer;
    ParamBreakdown {
        per_layer,
        layer_sets,
        decoders_total,
        mapping_weight,
        mapping_bias,
        token_embeddings,
        position_embeddings,
        final_norm,
        total: decoders_total
            + mapping_weight
            + mapping_bias
            + token_embeddings
            + position_embeddings
            + final_norm,
    }
}

/// The same model with every layer application given its own parameters: a
/// stacked decoder of `2N` layers for PSDP, the config itself otherwise.
pub fn unshared_counterpart(cfg: &ModelConfig) -> ModelConfig {
    match cfg.variant {
        Variant::StackedBaseline => *cfg,
        Variant::Psdp => ModelConfig {
            num_layers: 2 * cfg.num_layers,
            variant: Variant::StackedBaseline,
            ..*cfg
        },
    }
}

/// Shared decoder parameters as a fraction of the unshared decoder stack of
/// the same depth. `None` for the stacked baseline.
pub fn sharing_ratio(cfg: &ModelConfig) -> Option<f64> {
    match cfg.variant {
        Variant::StackedBaseline => None,
        Variant::Psdp => {
            let shared = count_parameters(cfg).decoders_total as f64;
            let unshared = count_parameters(&unshared_counterpart(cfg)).decoders_total as f64;
            Some(shared / unshared)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::params::layout;
    use super::*;
    use proptest::prelude::*;

    fn walk(cfg: &ModelConfig) -> u64 {
        layout(cfg).leaves().iter().map(|s| s.numel() as u64).sum()
    }

    #[test]
    fn table1_stacked_is_85m() {
        let cfg = ModelConfig::table1(Variant::StackedBaseline);
        let b = count_parameters(&cfg);
        assert_eq!(b.per_layer, 7_087_872);
        assert_eq!(b.excluding_embeddings(), 85_054_464);
        assert_eq!(b.total, walk(&cfg));
    }

    #[test]
    fn table1_psdp_claims() {
        let cfg = ModelConfig::table1(Variant::Psdp);
        let b = count_parameters(&cfg);
        assert_eq!(b.decoders_total, 14_175_744);
        assert_eq!(b.mapping_weight, 1_179_648);
        assert_eq!(b.mapping_bias, 768);
        let ratio = sharing_ratio(&cfg).unwrap();
        assert_eq!(format!("{:.2}", ratio * 100.0), "16.67");
        assert_eq!(b.total, walk(&cfg));
    }

    #[test]
    fn table2_core_count() {
        let b = count_parameters(&ModelConfig::table2_english());
        assert_eq!(
            b.decoders_total + b.mapping_weight + b.mapping_bias + b.final_norm,
            37_474_800
        );
    }

    #[test]
    fn degenerate_config_matches_walk() {
        let cfg = ModelConfig {
            embed_size: 2,
            num_heads: 1,
            head_size: 2,
            hidden_size: 2,
            ffn_size: 4,
            num_layers: 1,
            max_seq_len: 2,
            vocab_size: 3,
            variant: Variant::Psdp,
        };
        // per layer: 4·6 + (8+4) + (8+2) + 8 = 54
        assert_eq!(count_parameters(&cfg).per_layer, 54);
        assert_eq!(count_parameters(&cfg).total, walk(&cfg));
    }

    proptest! {
        #[test]
        fn closed_form_matches_layout(
            heads in 1usize..4, head in 1usize..5, f in 1usize..20,
            n in 1usize..5, t in 2usize..9, v in 1usize..30, psdp in any::<bool>(),
        ) {
            let e = heads * head;
            let cfg = ModelConfig {
                embed_size: e, num_heads: heads, head_size: head, hidden_size: e,
                ffn_size: f, num_layers: n, max_seq_len: t, vocab_size: v,
                variant: if psdp { Variant::Psdp } else { Variant::StackedBaseline },
            };
            prop_assert_eq!(count_parameters(&cfg).total, walk(&cfg));
        }
    }
}
