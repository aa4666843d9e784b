use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gelu;

fn tiny(variant: Variant, heads: usize) -> ModelConfig {
    ModelConfig {
        embed_size: 8,
        num_heads: heads,
        head_size: 8 / heads,
        hidden_size: 8,
        ffn_size: 16,
        num_layers: 2,
        max_seq_len: 5,
        vocab_size: 11,
        variant,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Replaces every parameter with uniform noise so biases and norms are
/// exercised too.
fn scrambled(model: &Model, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = model
        .params()
        .leaves()
        .iter()
        .map(|t| random_tensor(&mut rng, t.shape(), 0.5))
        .collect();
    Model::from_tensors(*model.config(), tensors).unwrap()
}

#[test]
fn causal_mask_examples() {
    let m = causal_mask(1).unwrap();
    assert!(m.allows(0, 0));
    let m = causal_mask(3).unwrap();
    let rows: Vec<Vec<usize>> = (0..3)
        .map(|i| (0..3).filter(|&j| m.allows(i, j)).collect())
        .collect();
    assert_eq!(rows, vec![vec![0], vec![0, 1], vec![0, 1, 2]]);
    assert!(causal_mask(0).is_err());
}

#[test]
fn config_validation() {
    let mut cfg = tiny(Variant::Psdp, 2);
    assert!(cfg.validate().is_ok());
    cfg.head_size = 3;
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("num_heads * head_size"), "{msg}");
    let mut cfg = tiny(Variant::Psdp, 2);
    cfg.max_seq_len = 1;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(Variant::Psdp, 2);
    cfg.ffn_size = 0;
    assert!(cfg.validate().is_err());
}

/// Plain-loop single-head decoder layer, written without the tape.
fn reference_layer(x: &[Vec<f64>], p: &LayerParams<Tensor>, e: usize, f: usize) -> Vec<Vec<f64>> {
    let t = x.len();
    let lin = |row: &[f64], w: &Tensor, b: &Tensor, n_out: usize| -> Vec<f64> {
        (0..n_out)
            .map(|j| {
                b.data()[j]
                    + row
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * w.data()[i * n_out + j])
                        .sum::<f64>()
            })
            .collect()
    };
    let norm = |row: &[f64], g: &Tensor, b: &Tensor| -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        row.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g.data()[i] + b.data()[i])
            .collect()
    };
    let q: Vec<_> = x.iter().map(|r| lin(r, &p.wq, &p.bq, e)).collect();
    let k: Vec<_> = x.iter().map(|r| lin(r, &p.wk, &p.bk, e)).collect();
    let v: Vec<_> = x.iter().map(|r| lin(r, &p.wv, &p.bv, e)).collect();
    let mut out = Vec::new();
    for i in 0..t {
        let scores: Vec<f64> = (0..=i)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (e as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let ctx: Vec<f64> = (0..e)
            .map(|c| (0..=i).map(|j| exps[j] / total * v[j][c]).sum())
            .collect();
        let attn = lin(&ctx, &p.wo, &p.bo, e);
        let res: Vec<f64> = x[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
        let a = norm(&res, &p.ln1_gamma, &p.ln1_beta);
        let hidden: Vec<f64> = lin(&a, &p.w1, &p.b1, f).into_iter().map(gelu).collect();
        let ffn = lin(&hidden, &p.w2, &p.b2, e);
        let res: Vec<f64> = a.iter().zip(&ffn).map(|(a, b)| a + b).collect();
        out.push(norm(&res, &p.ln2_gamma, &p.ln2_beta));
    }
    out
}

fn first_layer(model: &Model) -> LayerParams<Tensor> {
    match model.params() {
        ModelParams::Psdp(p) => p.decoder_a.clone(),
        ModelParams::Stacked(p) => p.layers[0].clone(),
    }
}

fn run_layer(cfg: &ModelConfig, layer: &LayerParams<Tensor>, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let lp = layer.map(&mut |t: &Tensor| tape.leaf(t.clone()));
    let xv = tape.leaf(x.clone());
    let mask = causal_mask(x.shape()[1]).unwrap();
    let out = decoder_layer_forward(&mut tape, xv, &lp, cfg, &mask).unwrap();
    tape.value(out).clone()
}

#[test]
fn single_head_layer_matches_reference() {
    let cfg = tiny(Variant::Psdp, 1);
    let model = scrambled(&Model::init(cfg, 1).unwrap(), 2);
    let layer = first_layer(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[1, 4, 8], 1.0);
    let got = run_layer(&cfg, &layer, &x);
    let rows: Vec<Vec<f64>> = x.data().chunks(8).map(|c| c.to_vec()).collect();
    let want: Vec<f64> = reference_layer(&rows, &layer, 8, 16).concat();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn layer_preserves_shape_and_is_causal() {
    let cfg = tiny(Variant::Psdp, 2);
    let model = scrambled(&Model::init(cfg, 4).unwrap(), 5);
    let layer = first_layer(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[2, 5, 8], 1.0);
    let base = run_layer(&cfg, &layer, &x);
    assert_eq!(base.shape(), &[2, 5, 8]);
    for t in 0..5 {
        let mut x2 = x.clone();
        for c in 0..8 {
            x2.data_mut()[t * 8 + c] += 0.3;
        }
        let out = run_layer(&cfg, &layer, &x2);
        for pos in 0..5 {
            let diff: f64 = (0..8)
                .map(|c| (out.data()[pos * 8 + c] - base.data()[pos * 8 + c]).abs())
                .sum();
            if pos < t {
                assert!(diff < 1e-12, "position {pos} moved when {t} changed");
            } else if pos == t {
                assert!(diff > 1e-6);
            }
        }
    }
}

#[test]
fn forward_shapes() {
    for variant in [Variant::Psdp, Variant::StackedBaseline] {
        let model = Model::init(tiny(variant, 2), 0).unwrap();
        let ids = IdTensor::new(2, 5, vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 10]).unwrap();
        assert_eq!(model.logits(&ids).unwrap().shape(), &[2, 5, 11]);
    }
}

#[test]
fn forward_rejects_long_and_invalid_input() {
    let model = Model::init(tiny(Variant::Psdp, 2), 0).unwrap();
    let long = IdTensor::from_row(&[0; 6]).unwrap();
    assert!(matches!(
        model.logits(&long),
        Err(ModelError::SequenceTooLong { len: 6, max: 5 })
    ));
    let bad = IdTensor::from_row(&[11]).unwrap();
    assert!(model.logits(&bad).is_err());
}

fn logits_row(model: &Model, ids: &[usize]) -> Tensor {
    model.logits(&IdTensor::from_row(ids).unwrap()).unwrap()
}

#[test]
fn logits_ignore_future_tokens() {
    for variant in [Variant::Psdp, Variant::StackedBaseline] {
        let model = scrambled(&Model::init(tiny(variant, 2), 7).unwrap(), 8);
        let ids = [1, 4, 2, 9, 3];
        let base = logits_row(&model, &ids);
        for t in 0..5 {
            let mut changed = ids;
            changed[t] = (changed[t] + 5) % 11;
            let out = logits_row(&model, &changed);
            for pos in 0..t {
                for v in 0..11 {
                    let i = pos * 11 + v;
                    assert!((out.data()[i] - base.data()[i]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn identical_decoders_collapse_to_scaled_single_output() {
    let cfg = tiny(Variant::Psdp, 2);
    let init = scrambled(&Model::init(cfg, 9).unwrap(), 10);
    let ModelParams::Psdp(mut p) = init.params().clone() else { unreachable!() };
    p.decoder_b = p.decoder_a.clone();
    let e = cfg.embed_size;
    let mut w = vec![0.0; 2 * e * e];
    for i in 0..e {
        w[i * e + i] = 0.5;
        w[(e + i) * e + i] = 0.5;
    }
    p.mapping_weight = Tensor::new([2 * e, e], w).unwrap();
    p.mapping_bias = Tensor::zeros([e]).unwrap();
    let model = Model::from_tensors(cfg, ModelParams::Psdp(p.clone()).leaves().into_iter().cloned().collect()).unwrap();

    let ids = IdTensor::from_row(&[3, 1, 4, 1, 5]).unwrap();
    let got = model.logits(&ids).unwrap();

    // Independent route: run decoder A alone and feed 2·o_A into the final norm.
    let mut tape = Tape::new();
    let tok = tape.leaf(p.token_embedding.clone());
    let pos = tape.leaf(p.position_embedding.clone());
    let layer = p.decoder_a.map(&mut |t: &Tensor| tape.leaf(t.clone()));
    let te = tape.embedding(tok, &ids).unwrap();
    let pe = tape
        .embedding(pos, &IdTensor::from_row(&[0, 1, 2, 3, 4]).unwrap())
        .unwrap();
    let mut h = tape.add(te, pe).unwrap();
    let mask = causal_mask(5).unwrap();
    for _ in 0..cfg.num_layers {
        h = decoder_layer_forward(&mut tape, h, &layer, &cfg, &mask).unwrap();
    }
    let doubled = tape.scale(h, 2.0);
    let g = tape.leaf(p.final_gamma.clone());
    let b = tape.leaf(p.final_beta.clone());
    let normed = tape.layer_norm(doubled, g, b, LAYER_NORM_EPS).unwrap();
    let want = tape.matmul_nt(normed, tok).unwrap();
    for (a, b) in got.data().iter().zip(tape.value(want).data()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn single_stacked_layer_is_layer_plus_head() {
    let mut cfg = tiny(Variant::StackedBaseline, 2);
    cfg.num_layers = 1;
    let model = scrambled(&Model::init(cfg, 11).unwrap(), 12);
    let ModelParams::Stacked(p) = model.params() else { unreachable!() };
    let ids = IdTensor::from_row(&[2, 7, 1]).unwrap();
    let got = model.logits(&ids).unwrap();

    let mut tape = Tape::new();
    let tok = tape.leaf(p.token_embedding.clone());
    let pos = tape.leaf(p.position_embedding.clone());
    let layer = p.layers[0].map(&mut |t: &Tensor| tape.leaf(t.clone()));
    let te = tape.embedding(tok, &ids).unwrap();
    let pe = tape.embedding(pos, &IdTensor::from_row(&[0, 1, 2]).unwrap()).unwrap();
    let x = tape.add(te, pe).unwrap();
    let out = decoder_layer_forward(&mut tape, x, &layer, &cfg, &causal_mask(3).unwrap()).unwrap();
    let want = tape.matmul_nt(out, tok).unwrap();
    for (a, b) in got.data().iter().zip(tape.value(want).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let model = Model::init(tiny(Variant::Psdp, 2), 13).unwrap();
    let ids = IdTensor::from_row(&[1, 2, 3]).unwrap();
    let a = model.logits(&ids).unwrap();
    let b = model.logits(&ids).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn tied_head_row_feeds_input_and_output() {
    let cfg = tiny(Variant::Psdp, 2);
    let model = scrambled(&Model::init(cfg, 14).unwrap(), 15);
    let base_without = logits_row(&model, &[1, 2]);
    let base_with = logits_row(&model, &[1, 7]);

    let mut tweaked = model.clone();
    let ModelParams::Psdp(p) = tweaked.params_mut() else { unreachable!() };
    for c in 0..8 {
        p.token_embedding.data_mut()[7 * 8 + c] += 0.25;
    }
    let without = logits_row(&tweaked, &[1, 2]);
    let with = logits_row(&tweaked, &[1, 7]);

    // Token 7 absent from the input: only its logit column moves.
    for pos in 0..2 {
        for v in 0..11 {
            let i = pos * 11 + v;
            let moved = (without.data()[i] - base_without.data()[i]).abs() > 1e-9;
            assert_eq!(moved, v == 7, "pos {pos} vocab {v}");
        }
    }
    // Token 7 present: position 1's representation changes every logit.
    for v in 0..11 {
        assert!((with.data()[11 + v] - base_with.data()[11 + v]).abs() > 1e-9);
    }
}

#[test]
fn init_is_deterministic_with_unit_gammas() {
    let cfg = tiny(Variant::Psdp, 2);
    let a = Model::init(cfg, 42).unwrap();
    let b = Model::init(cfg, 42).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, Model::init(cfg, 43).unwrap());
    let ModelParams::Psdp(p) = a.params() else { unreachable!() };
    for g in [&p.decoder_a.ln1_gamma, &p.decoder_b.ln2_gamma, &p.final_gamma] {
        assert!(g.data().iter().all(|&v| v == 1.0));
    }
    assert!(p.mapping_bias.data().iter().all(|&v| v == 0.0));
}

#[test]
fn init_weight_statistics() {
    let cfg = ModelConfig {
        embed_size: 768,
        num_heads: 12,
        head_size: 64,
        hidden_size: 768,
        ffn_size: 4,
        num_layers: 1,
        max_seq_len: 2,
        vocab_size: 2,
        variant: Variant::StackedBaseline,
    };
    let model = Model::init(cfg, 2024).unwrap();
    let ModelParams::Stacked(p) = model.params() else { unreachable!() };
    let w = p.layers[0].wq.data();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.002, "mean {mean}");
    assert!((std - 0.02).abs() < 0.002, "std {std}");
}

#[test]
fn decoders_have_distinct_storage_and_one_set_each() {
    let mut cfg = tiny(Variant::Psdp, 2);
    cfg.num_layers = 4;
    let model = Model::init(cfg, 1).unwrap();
    let ModelParams::Psdp(p) = model.params() else { unreachable!() };
    assert_ne!(p.decoder_a, p.decoder_b);
    // Depth does not change the stored parameter count.
    cfg.num_layers = 1;
    assert_eq!(model.num_parameters(), Model::init(cfg, 1).unwrap().num_parameters());
}

#[test]
fn from_tensors_checks_shapes() {
    let cfg = tiny(Variant::Psdp, 2);
    let model = Model::init(cfg, 0).unwrap();
    let mut tensors: Vec<Tensor> = model.params().leaves().into_iter().cloned().collect();
    tensors[3] = Tensor::zeros([3]).unwrap();
    assert!(matches!(
        Model::from_tensors(cfg, tensors.clone()),
        Err(ModelError::ParamShape { .. })
    ));
    tensors.pop();
    assert!(matches!(
        Model::from_tensors(cfg, tensors),
        Err(ModelError::ParamCount { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn allocated_storage_matches_closed_form(
        heads in 1usize..3, head in 1usize..4, f in 1usize..9,
        n in 1usize..4, t in 2usize..6, v in 1usize..12, psdp in any::<bool>(),
    ) {
        let e = heads * head;
        let cfg = ModelConfig {
            embed_size: e, num_heads: heads, head_size: head, hidden_size: e,
            ffn_size: f, num_layers: n, max_seq_len: t, vocab_size: v,
            variant: if psdp { Variant::Psdp } else { Variant::StackedBaseline },
        };
        let model = Model::init(cfg, 0).unwrap();
        prop_assert_eq!(model.num_parameters() as u64, count_parameters(&cfg).total);
    }
}
