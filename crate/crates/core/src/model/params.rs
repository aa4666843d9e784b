//! Parameter trees, generic over what sits at the leaves.
//!
//! The same structs hold initialisation specs, concrete [`Tensor`]s, tape
//! [`Var`](crate::autodiff::Var)s, gradients and optimiser moments. Every
//! traversal visits leaves in one fixed declared order, which is also the
//! order tensors are written to checkpoints.

use super::{ModelConfig, Variant};

/// One modified-decoder layer: masked self-attention plus feedforward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gamma", "ln1_beta", "w1", "b1", "w2",
    "b2", "ln2_gamma", "ln2_beta",
];

impl<T> LayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
        }
    }

    pub fn leaves(&self) -> [&T; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    pub fn leaves_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdpParams<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub decoder_a: LayerParams<T>,
    pub decoder_b: LayerParams<T>,
    /// `[2E, E]` down-projection of the concatenated decoder outputs.
    pub mapping_weight: T,
    pub mapping_bias: T,
    pub final_gamma: T,
    pub final_beta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedParams<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams<T> {
    Stacked(StackedParams<T>),
    Psdp(PsdpParams<T>),
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        let f = &mut f;
        match self {
            Self::Stacked(p) => ModelParams::Stacked(StackedParams {
                token_embedding: f(&p.token_embedding),
                position_embedding: f(&p.position_embedding),
                layers: p.layers.iter().map(|l| l.map(f)).collect(),
            }),
            Self::Psdp(p) => ModelParams::Psdp(PsdpParams {
                token_embedding: f(&p.token_embedding),
                position_embedding: f(&p.position_embedding),
                decoder_a: p.decoder_a.map(f),
                decoder_b: p.decoder_b.map(f),
                mapping_weight: f(&p.mapping_weight),
                mapping_bias: f(&p.mapping_bias),
                final_gamma: f(&p.final_gamma),
                final_beta: f(&p.final_beta),
            }),
        }
    }

    /// Leaves in declared order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        match self {
            Self::Stacked(p) => {
                out.push(&p.token_embedding);
                out.push(&p.position_embedding);
                for l in &p.layers {
                    out.extend(l.leaves());
                }
            }
            Self::Psdp(p) => {
                out.push(&p.token_embedding);
                out.push(&p.position_embedding);
                out.extend(p.decoder_a.leaves());
                out.extend(p.decoder_b.leaves());
                out.extend([&p.mapping_weight, &p.mapping_bias, &p.final_gamma, &p.final_beta]);
            }
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        match self {
            Self::Stacked(p) => {
                out.push(&mut p.token_embedding);
                out.push(&mut p.position_embedding);
                for l in &mut p.layers {
                    out.extend(l.leaves_mut());
                }
            }
            Self::Psdp(p) => {
                out.push(&mut p.token_embedding);
                out.push(&mut p.position_embedding);
                out.extend(p.decoder_a.leaves_mut());
                out.extend(p.decoder_b.leaves_mut());
                out.extend([
                    &mut p.mapping_weight,
                    &mut p.mapping_bias,
                    &mut p.final_gamma,
                    &mut p.final_beta,
                ]);
            }
        }
        out
    }

    /// Dotted names matching [`leaves`](Self::leaves).
    pub fn names(&self) -> Vec<String> {
        let layer = |prefix: String| -> Vec<String> {
            LAYER_FIELDS.iter().map(|f| format!("{prefix}.{f}")).collect()
        };
        let mut out = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        match self {
            Self::Stacked(p) => {
                for i in 0..p.layers.len() {
                    out.extend(layer(format!("layers.{i}")));
                }
            }
            Self::Psdp(_) => {
                out.extend(layer("decoder_a".into()));
                out.extend(layer("decoder_b".into()));
                out.extend(
                    ["mapping_weight", "mapping_bias", "final_gamma", "final_beta"].map(String::from),
                );
            }
        }
        out
    }

    /// Rebuilds a tree shaped like `self` from leaves in declared order.
    /// Returns `None` if `items` has the wrong length.
    pub fn rebuild<U>(&self, items: Vec<U>) -> Option<ModelParams<U>> {
        if items.len() != self.leaves().len() {
            return None;
        }
        let mut it = items.into_iter();
        Some(self.map(|_| it.next().expect("length checked")))
    }
}

/// How a leaf is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(shape: &[usize], init: Init) -> Self {
        Self {
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn layer_layout(e: usize, f: usize) -> LayerParams<ParamSpec> {
    use Init::*;
    let w = |r, c| ParamSpec::new(&[r, c], Normal);
    let z = |n| ParamSpec::new(&[n], Zeros);
    let o = |n| ParamSpec::new(&[n], Ones);
    LayerParams {
        wq: w(e, e),
        bq: z(e),
        wk: w(e, e),
        bk: z(e),
        wv: w(e, e),
        bv: z(e),
        wo: w(e, e),
        bo: z(e),
        ln1_gamma: o(e),
        ln1_beta: z(e),
        w1: w(e, f),
        b1: z(f),
        w2: w(f, e),
        b2: z(e),
        ln2_gamma: o(e),
        ln2_beta: z(e),
    }
}

/// Every tensor the model allocates, without allocating anything.
pub fn layout(cfg: &ModelConfig) -> ModelParams<ParamSpec> {
    let (e, f) = (cfg.embed_size, cfg.ffn_size);
    let token_embedding = ParamSpec::new(&[cfg.vocab_size, e], Init::Normal);
    let position_embedding = ParamSpec::new(&[cfg.max_seq_len, e], Init::Normal);
    match cfg.variant {
        Variant::StackedBaseline => ModelParams::Stacked(StackedParams {
            token_embedding,
            position_embedding,
            layers: (0..cfg.num_layers).map(|_| layer_layout(e, f)).collect(),
        }),
        Variant::Psdp => ModelParams::Psdp(PsdpParams {
            token_embedding,
            position_embedding,
            decoder_a: layer_layout(e, f),
            decoder_b: layer_layout(e, f),
            mapping_weight: ParamSpec::new(&[2 * e, e], Init::Normal),
            mapping_bias: ParamSpec::new(&[e], Init::Zeros),
            final_gamma: ParamSpec::new(&[e], Init::Ones),
            final_beta: ParamSpec::new(&[e], Init::Zeros),
        }),
    }
}
