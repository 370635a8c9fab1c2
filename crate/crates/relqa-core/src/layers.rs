//! Parameterized building blocks: weight-normalized linear maps, layer
//! norm, and embeddings. Each block owns a name prefix in the parameter
//! store; `init_*` creates the parameters, the forward helpers replay them
//! onto a tape.
//!
//! Every linear map is weight-normalized: the effective weight row is
//! `gain * direction / ||direction||`, so direction length and output
//! scale train independently. Dropout follows each affine output.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::store::ParameterStore;
use rand::Rng;

/// Create direction, gain and optional bias for a weight-normalized linear
/// map from `fan_in` to `fan_out`. The gain starts at the direction row
/// norms so the initial effective weight equals the sampled matrix.
pub fn init_linear(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    store.insert_xavier(&format!("{prefix}.dir"), fan_out, fan_in, rng)?;
    let dir = store.get(&format!("{prefix}.dir"))?.value.clone();
    let gains: Vec<f64> = (0..fan_out)
        .map(|r| {
            dir[r * fan_in..(r + 1) * fan_in]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    store.insert(&format!("{prefix}.gain"), &[fan_out], gains)?;
    if bias {
        store.insert_zeros(&format!("{prefix}.bias"), &[fan_out])?;
    }
    Ok(())
}

/// Apply a weight-normalized linear map to `x` of shape `[m, fan_in]`,
/// then dropout with probability `dropout_p`.
pub fn linear(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
    dropout_p: f64,
) -> Result<TensorId> {
    let dir = tape.param(store, &format!("{prefix}.dir"))?;
    let gain = tape.param(store, &format!("{prefix}.gain"))?;
    let sq = tape.mul(dir, dir)?;
    let row_sq = tape.sum_rows(sq)?;
    if tape.data(row_sq).iter().any(|&v| v == 0.0) {
        return Err(Error::Numeric(format!(
            "zero-norm direction row in {prefix:?}"
        )));
    }
    let norm = tape.sqrt(row_sq)?;
    let inv = tape.recip(norm)?;
    let unit_scale = tape.mul(gain, inv)?;
    let weight = tape.scale_rows(dir, unit_scale)?;
    let wt = tape.transpose(weight)?;
    let mut y = tape.matmul(x, wt)?;
    let bias_name = format!("{prefix}.bias");
    if store.contains(&bias_name) {
        let bias = tape.param(store, &bias_name)?;
        y = tape.add_row(y, bias)?;
    }
    tape.dropout(y, dropout_p)
}

pub fn init_layer_norm(store: &mut ParameterStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert_full(&format!("{prefix}.gain"), &[dim], 1.0)?;
    store.insert_zeros(&format!("{prefix}.bias"), &[dim])
}

pub fn layer_norm(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: TensorId,
) -> Result<TensorId> {
    let gain = tape.param(store, &format!("{prefix}.gain"))?;
    let bias = tape.param(store, &format!("{prefix}.bias"))?;
    tape.layer_norm_rows(x, gain, bias, 1e-5)
}

pub fn init_embedding(
    store: &mut ParameterStore,
    rng: &mut impl Rng,
    name: &str,
    rows: usize,
    dim: usize,
) -> Result<()> {
    store.insert_uniform(name, &[rows, dim], 0.05, rng)
}

/// Slice per-head column blocks out of a `[m, d]` projection.
pub fn split_heads(tape: &mut Tape, x: TensorId, heads: usize) -> Result<Vec<TensorId>> {
    let d = tape.shape(x)[1];
    if d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let hd = d / heads;
    (0..heads)
        .map(|h| tape.slice_cols(x, h * hd, (h + 1) * hd))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with_linear(prefix: &str, fan_in: usize, fan_out: usize, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        init_linear(&mut store, &mut rng, prefix, fan_in, fan_out, true).unwrap();
        store
    }

    #[test]
    fn gain_at_row_norm_reduces_to_plain_linear() {
        let store = store_with_linear("fc", 3, 2, 1);
        let dir = store.get("fc.dir").unwrap().value.clone();
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 3], vec![0.4, -1.2, 2.0], false).unwrap();
        let y = linear(&mut tape, &store, "fc", x, 0.0).unwrap();
        // With gain == ||dir|| the effective weight is dir itself.
        for r in 0..2 {
            let want: f64 = (0..3).map(|c| dir[r * 3 + c] * tape.data(x)[c]).sum();
            assert!((tape.data(y)[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn output_invariant_to_direction_rescaling() {
        let mut store = store_with_linear("fc", 4, 3, 2);
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8], false).unwrap();
        let y1 = linear(&mut tape, &store, "fc", x, 0.0).unwrap();
        let out1 = tape.data(y1).to_vec();

        for v in &mut store.get_mut("fc.dir").unwrap().value {
            *v *= 10.0;
        }
        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8], false).unwrap();
        let y2 = linear(&mut tape2, &store, "fc", x2, 0.0).unwrap();
        for (a, b) in out1.iter().zip(tape2.data(y2)) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_norm_direction_row_is_numeric_error() {
        let mut store = store_with_linear("fc", 3, 2, 3);
        for v in &mut store.get_mut("fc.dir").unwrap().value[0..3] {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(&[1, 3], vec![1.0, 1.0, 1.0], false).unwrap();
        let err = linear(&mut tape, &store, "fc", x, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }
}
