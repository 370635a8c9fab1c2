//! Transformer question encoder.
//!
//! Token ids are embedded (padding rows zeroed), learned position
//! embeddings are added, and a stack of post-norm transformer layers with
//! padding-masked self-attention produces context-aware token features.
//! The pooled question vector is the masked mean over valid tokens.

use crate::autodiff::{Tape, TensorId};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{self, split_heads};
use crate::store::ParameterStore;
use rand::Rng;

pub const PARAM_PREFIX: &str = "qenc";

/// Token features `[max_len, d]` plus the pooled question vector `[d]`.
pub struct EncodedQuestion {
    pub tokens: TensorId,
    pub pooled: TensorId,
}

pub fn init(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    cfg: &ModelConfig,
    vocab_size: usize,
    max_len: usize,
) -> Result<()> {
    layers::init_embedding(store, rng, &format!("{PARAM_PREFIX}.embed"), vocab_size + 1, cfg.d)?;
    layers::init_embedding(store, rng, &format!("{PARAM_PREFIX}.pos"), max_len, cfg.d)?;
    let ffn_dim = cfg.d * 2;
    for l in 0..cfg.encoder_layers {
        let p = format!("{PARAM_PREFIX}.l{l}");
        for name in ["q", "k", "v", "o"] {
            layers::init_linear(store, rng, &format!("{p}.attn.{name}"), cfg.d, cfg.d, true)?;
        }
        layers::init_layer_norm(store, &format!("{p}.ln1"), cfg.d)?;
        layers::init_linear(store, rng, &format!("{p}.ffn.w1"), cfg.d, ffn_dim, true)?;
        layers::init_linear(store, rng, &format!("{p}.ffn.w2"), ffn_dim, cfg.d, true)?;
        layers::init_layer_norm(store, &format!("{p}.ln2"), cfg.d)?;
    }
    Ok(())
}

/// Encode one padded question row.
pub fn encode(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    ids: &[usize],
    valid: &[bool],
) -> Result<EncodedQuestion> {
    if ids.len() != valid.len() {
        return Err(Error::ShapeMismatch {
            op: "encode question",
            lhs: vec![ids.len()],
            rhs: vec![valid.len()],
        });
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::Degenerate("question with no valid tokens".into()));
    }
    let len = ids.len();
    let embed = tape.param(store, &format!("{PARAM_PREFIX}.embed"))?;
    let vocab_rows = tape.shape(embed)[0];
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_rows) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of {} entries",
            vocab_rows - 1
        )));
    }

    // Embed, zero the padding rows, add positions.
    let gathered = tape.gather_rows(embed, ids)?;
    let valid_f: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let valid_scale = tape.constant(&[len], valid_f)?;
    let masked_embed = tape.scale_rows(gathered, valid_scale)?;
    let pos = tape.param(store, &format!("{PARAM_PREFIX}.pos"))?;
    let pos_rows = tape.gather_rows(pos, &(0..len).collect::<Vec<_>>())?;
    let mut x = tape.add(masked_embed, pos_rows)?;

    // Keys restricted to valid tokens; every query row shares the mask.
    let mut attn_mask = vec![false; len * len];
    for i in 0..len {
        for j in 0..len {
            attn_mask[i * len + j] = valid[j];
        }
    }
    let head_dim = cfg.d / cfg.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    for l in 0..cfg.encoder_layers {
        let p = format!("{PARAM_PREFIX}.l{l}");
        let q = layers::linear(tape, store, &format!("{p}.attn.q"), x, cfg.dropout)?;
        let k = layers::linear(tape, store, &format!("{p}.attn.k"), x, cfg.dropout)?;
        let v = layers::linear(tape, store, &format!("{p}.attn.v"), x, cfg.dropout)?;
        let qh = split_heads(tape, q, cfg.heads)?;
        let kh = split_heads(tape, k, cfg.heads)?;
        let vh = split_heads(tape, v, cfg.heads)?;
        let mut outs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let kt = tape.transpose(kh[h])?;
            let logits = tape.matmul(qh[h], kt)?;
            let scaled = tape.scale(logits, scale);
            let attn = tape.masked_softmax_rows(scaled, &attn_mask)?;
            outs.push(tape.matmul(attn, vh[h])?);
        }
        let merged = tape.concat_cols(&outs)?;
        let o = layers::linear(tape, store, &format!("{p}.attn.o"), merged, cfg.dropout)?;
        let res1 = tape.add(x, o)?;
        x = layers::layer_norm(tape, store, &format!("{p}.ln1"), res1)?;

        let h1 = layers::linear(tape, store, &format!("{p}.ffn.w1"), x, cfg.dropout)?;
        let h1a = tape.relu(h1);
        let h2 = layers::linear(tape, store, &format!("{p}.ffn.w2"), h1a, cfg.dropout)?;
        let res2 = tape.add(x, h2)?;
        x = layers::layer_norm(tape, store, &format!("{p}.ln2"), res2)?;
    }

    let pooled = tape.mean_rows(x, valid)?;
    Ok(EncodedQuestion { tokens: x, pooled })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.d = 8;
        cfg.heads = 2;
        cfg.encoder_layers = 2;
        cfg
    }

    fn init_store(cfg: &ModelConfig, vocab: usize, len: usize, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        init(&mut store, &mut rng, cfg, vocab, len).unwrap();
        store
    }

    #[test]
    fn identical_questions_encode_identically() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 9, 6, 1);
        let ids = [3usize, 1, 4, 0, 0, 0];
        let valid = [true, true, true, false, false, false];
        let mut t1 = Tape::new();
        let e1 = encode(&mut t1, &store, &cfg, &ids, &valid).unwrap();
        let mut t2 = Tape::new();
        let e2 = encode(&mut t2, &store, &cfg, &ids, &valid).unwrap();
        assert_eq!(t1.data(e1.tokens), t2.data(e2.tokens));
        assert_eq!(t1.data(e1.pooled), t2.data(e2.pooled));
    }

    #[test]
    fn padding_ids_do_not_influence_outputs() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 9, 6, 2);
        let valid = [true, true, false, false, false, false];
        let mut t1 = Tape::new();
        let e1 = encode(&mut t1, &store, &cfg, &[2, 7, 0, 0, 0, 0], &valid).unwrap();
        // Different ids in padding slots must leave valid rows and pooling alone.
        let mut t2 = Tape::new();
        let e2 = encode(&mut t2, &store, &cfg, &[2, 7, 5, 1, 8, 3], &valid).unwrap();
        assert_eq!(t1.data(e1.pooled), t2.data(e2.pooled));
        for i in 0..2 {
            assert_eq!(
                &t1.data(e1.tokens)[i * 8..(i + 1) * 8],
                &t2.data(e2.tokens)[i * 8..(i + 1) * 8]
            );
        }
    }

    #[test]
    fn pooled_equals_masked_mean_of_tokens() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 9, 5, 3);
        let ids = [5usize, 2, 9, 0, 0];
        let valid = [true, true, true, false, false];
        let mut t = Tape::new();
        let e = encode(&mut t, &store, &cfg, &ids, &valid).unwrap();
        let toks = t.data(e.tokens).to_vec();
        for j in 0..cfg.d {
            let want = (toks[j] + toks[cfg.d + j] + toks[2 * cfg.d + j]) / 3.0;
            assert!((t.data(e.pooled)[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn no_valid_tokens_is_degenerate() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 9, 3, 4);
        let mut t = Tape::new();
        let err = encode(&mut t, &store, &cfg, &[0, 0, 0], &[false, false, false]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn out_of_vocabulary_id_is_data_error() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 4, 3, 5);
        let mut t = Tape::new();
        let err = encode(&mut t, &store, &cfg, &[5, 1, 0], &[true, true, false]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut store = init_store(&cfg, 6, 4, 6);
        let ids = [2usize, 5, 1, 0];
        let valid = [true, true, true, false];
        let probe: Vec<f64> = (0..cfg.d).map(|i| 0.3 + 0.1 * i as f64).collect();

        let run = |store: &ParameterStore| -> f64 {
            let mut t = Tape::new();
            let e = encode(&mut t, store, &cfg, &ids, &valid).unwrap();
            let w = t.constant(&[cfg.d], probe.clone()).unwrap();
            let p = t.mul(e.pooled, w).unwrap();
            let s = t.sum_all(p);
            t.data(s)[0]
        };

        let mut t = Tape::new();
        let e = encode(&mut t, &store, &cfg, &ids, &valid).unwrap();
        let w = t.constant(&[cfg.d], probe.clone()).unwrap();
        let p = t.mul(e.pooled, w).unwrap();
        let s = t.sum_all(p);
        t.backward(s).unwrap();
        let mut grads = std::collections::HashMap::new();
        for (name, g) in t.param_grads() {
            let e = grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in e.iter_mut().zip(&g) {
                *a += b;
            }
        }

        let analytic = grads.get("qenc.embed").unwrap().clone();
        let h = 1e-5;
        // Only rows that appear among valid ids receive gradient.
        for &row in &[2usize, 5, 1] {
            for col in [0usize, 3] {
                let idx = row * cfg.d + col;
                let orig = store.get("qenc.embed").unwrap().value[idx];
                store.get_mut("qenc.embed").unwrap().value[idx] = orig + h;
                let up = run(&store);
                store.get_mut("qenc.embed").unwrap().value[idx] = orig - h;
                let down = run(&store);
                store.get_mut("qenc.embed").unwrap().value[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "row {row} col {col}: {a} vs {numeric}");
            }
        }
    }
}
