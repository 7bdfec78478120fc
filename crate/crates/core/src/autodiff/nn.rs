//! Neural building blocks assembled from graph ops.
//!
//! Each block has a `define_*` function that registers its parameters under a
//! name prefix and a forward function that looks them up by the same names.
//! Activations are `tokens × features` matrices.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{init, ParamStore};
use super::tensor::{Real, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

const LN_EPS: f64 = 1e-5;

pub fn define_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.w"), init::xavier(rng, fan_in, fan_out))?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

/// `x · W + b`.
pub fn linear<T: Real>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn define_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0))?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[dim]))
}

pub fn layer_norm<T: Real>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(&format!("{prefix}.gamma"))?;
    let beta = g.param(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Scaled dot-product attention split over `n_heads` column blocks:
/// `softmax(Q_h K_hᵀ / √d_head) V_h` per head, heads concatenated.
///
/// Keys whose `key_mask` entry is `false` receive zero weight; a query with
/// every key masked produces a zero output row.
pub fn attention<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    Ok(attention_with_weights(g, q, k, v, n_heads, key_mask)?.0)
}

/// [`attention`] that also returns each head's weight matrix.
pub fn attention_with_weights<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(q).cols();
    if n_heads == 0 || d % n_heads != 0 {
        return Err(AutodiffError::Config(format!(
            "model dim {d} is not divisible by {n_heads} heads"
        )));
    }
    if g.value(k).cols() != d || g.value(k).rows() != g.value(v).rows() {
        return Err(AutodiffError::shape(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    let d_head = d / n_heads;
    let dv_head = g.value(v).cols() / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * d_head, d_head)?,
                g.slice_cols(k, h * d_head, d_head)?,
                g.slice_cols(v, h * dv_head, dv_head)?,
            )
        };
        // Scaling the queries is cheaper than scaling the score matrix.
        let qh = g.scale(qh, scale)?;
        let scores = g.matmul_t(qh, false, kh, true)?;
        let w = g.softmax_rows_masked(scores, key_mask)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok((out, weights))
}

pub fn define_multi_head_attention<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    for proj in ["q", "v", "o"] {
        define_linear(store, rng, &format!("{prefix}.{proj}"), dim, dim)?;
    }
    // A key bias shifts every score of a query row equally, which softmax
    // ignores, so keys are projected without one.
    store.insert(&format!("{prefix}.k.w"), init::xavier(rng, dim, dim))
}

/// Projects queries from `x` and keys/values from `memory`, attends, and
/// projects the concatenated heads.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    memory: Var,
    prefix: &str,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let q = linear(g, x, &format!("{prefix}.q"))?;
    let kw = g.param(&format!("{prefix}.k.w"))?;
    let k = g.matmul(memory, kw)?;
    let v = linear(g, memory, &format!("{prefix}.v"))?;
    let heads = attention(g, q, k, v, n_heads, key_mask)?;
    linear(g, heads, &format!("{prefix}.o"))
}

fn define_feed_forward<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dim: usize,
    hidden: usize,
) -> Result<()> {
    define_linear(store, rng, &format!("{prefix}.ff1"), dim, hidden)?;
    define_linear(store, rng, &format!("{prefix}.ff2"), hidden, dim)
}

fn feed_forward<T: Real>(g: &mut Graph<'_, T>, x: Var, prefix: &str, dropout: f64) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.ff1"))?;
    let h = g.gelu(h)?;
    let h = g.dropout(h, dropout)?;
    linear(g, h, &format!("{prefix}.ff2"))
}

fn residual_norm<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    sub: Var,
    prefix: &str,
    dropout: f64,
) -> Result<Var> {
    let sub = g.dropout(sub, dropout)?;
    let sum = g.add(x, sub)?;
    layer_norm(g, sum, prefix)
}

pub fn define_encoder_layer<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dim: usize,
    ff_hidden: usize,
) -> Result<()> {
    define_multi_head_attention(store, rng, &format!("{prefix}.attn"), dim)?;
    define_layer_norm(store, &format!("{prefix}.ln1"), dim)?;
    define_feed_forward(store, rng, prefix, dim, ff_hidden)?;
    define_layer_norm(store, &format!("{prefix}.ln2"), dim)
}

/// Post-norm transformer encoder layer.
pub fn encoder_layer<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    prefix: &str,
    n_heads: usize,
    key_mask: Option<&[bool]>,
    dropout: f64,
) -> Result<Var> {
    let a = multi_head_attention(g, x, x, &format!("{prefix}.attn"), n_heads, key_mask)?;
    let x = residual_norm(g, x, a, &format!("{prefix}.ln1"), dropout)?;
    let f = feed_forward(g, x, prefix, dropout)?;
    residual_norm(g, x, f, &format!("{prefix}.ln2"), dropout)
}

pub fn define_decoder_layer<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    dim: usize,
    ff_hidden: usize,
) -> Result<()> {
    define_multi_head_attention(store, rng, &format!("{prefix}.self"), dim)?;
    define_layer_norm(store, &format!("{prefix}.ln1"), dim)?;
    define_multi_head_attention(store, rng, &format!("{prefix}.cross"), dim)?;
    define_layer_norm(store, &format!("{prefix}.ln2"), dim)?;
    define_feed_forward(store, rng, prefix, dim, ff_hidden)?;
    define_layer_norm(store, &format!("{prefix}.ln3"), dim)
}

/// Post-norm transformer decoder layer: self-attention, cross-attention onto
/// `memory`, feed-forward.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    memory: Var,
    prefix: &str,
    n_heads: usize,
    self_mask: Option<&[bool]>,
    memory_mask: Option<&[bool]>,
    dropout: f64,
) -> Result<Var> {
    let a = multi_head_attention(g, x, x, &format!("{prefix}.self"), n_heads, self_mask)?;
    let x = residual_norm(g, x, a, &format!("{prefix}.ln1"), dropout)?;
    let c = multi_head_attention(g, x, memory, &format!("{prefix}.cross"), n_heads, memory_mask)?;
    let x = residual_norm(g, x, c, &format!("{prefix}.ln2"), dropout)?;
    let f = feed_forward(g, x, prefix, dropout)?;
    residual_norm(g, x, f, &format!("{prefix}.ln3"), dropout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::Mode;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let q = g.constant(m(1, 2, &[0.3, -1.0])).unwrap();
        let k = g.constant(m(1, 2, &[2.0, 0.5])).unwrap();
        let v = g.constant(m(1, 2, &[7.0, -3.0])).unwrap();
        let out = attention(&mut g, q, k, v, 1, None).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, -3.0]);
    }

    #[test]
    fn uniform_keys_average_values() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let q = g.constant(m(2, 4, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 2.0, 1.0])).unwrap();
        let k = g.constant(Tensor::full(&[3, 4], 0.7)).unwrap();
        let v = g
            .constant(m(3, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.0, 1.0, -1.0, 0.0]))
            .unwrap();
        let out = attention(&mut g, q, k, v, 2, None).unwrap();
        for r in 0..2 {
            let row = g.value(out).row(r);
            for (got, want) in row.iter().zip([2.0, 3.0, 3.0, 4.0]) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fully_masked_query_outputs_zero() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let q = g.constant(m(1, 2, &[1.0, 1.0])).unwrap();
        let k = g.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let v = g.constant(m(2, 2, &[4.0, 5.0, 6.0, 7.0])).unwrap();
        let (out, w) =
            attention_with_weights(&mut g, q, k, v, 1, Some(&[false, false])).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
        assert_eq!(g.value(w[0]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let q = g.constant(Tensor::zeros(&[2, 6])).unwrap();
        let err = attention(&mut g, q, q, q, 4, None).unwrap_err();
        assert!(matches!(err, AutodiffError::Config(_)));
    }
}
