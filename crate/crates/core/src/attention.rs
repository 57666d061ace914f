//! Efficient self-attention over pyramid-pooled keys/values, and
//! lesion-aware cross-attention against a single lesion token.

use crate::autograd::{Graph, Var};
use crate::config::LesionPooling;
use crate::dynamic_kernel::extract_lesion_feature;
use crate::error::{Error, Result};
use crate::ops::LesionGate;
use crate::params::{linear_specs, ParamSpec, ParamStore};

/// Pooling grid sizes, in token order.
pub const PYRAMID_BINS: [usize; 3] = [1, 3, 5];
/// Pooled token count, `1·1 + 3·3 + 5·5`.
pub const POOLED_TOKENS: usize = 35;
pub const FF_EXPANSION: usize = 4;

pub fn esa_prefix(stage: usize) -> String {
    format!("esa{stage}")
}

pub fn lca_prefix(stage: usize) -> String {
    format!("lca{stage}")
}

/// Projections `q, k, v, o` plus the two feed-forward layers of one block.
pub fn block_specs(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for p in ["q", "k", "v", "o"] {
        specs.extend(linear_specs(&format!("{prefix}.{p}"), channels, channels));
    }
    let hidden = FF_EXPANSION * channels;
    specs.extend(linear_specs(&format!("{prefix}.ff1"), hidden, channels));
    specs.extend(linear_specs(&format!("{prefix}.ff2"), channels, hidden));
    specs
}

/// `B×C×H×W` → `B×35×C`: 1×1, then 3×3, then 5×5 adaptive average bins,
/// each row-major.
pub fn pyramid_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(PYRAMID_BINS.len());
    for bins in PYRAMID_BINS {
        let pooled = g.adaptive_avg_pool(x, bins, bins)?;
        parts.push(g.to_tokens(pooled)?);
    }
    g.concat(&parts, 1)
}

/// Multi-head scaled dot-product attention with per-head projections
/// `{prefix}.q/k/v` and output projection `{prefix}.o`.
pub fn multi_head_attention(
    g: &mut Graph,
    params: &ParamStore,
    prefix: &str,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
) -> Result<Var> {
    let q = params.linear(g, &format!("{prefix}.q"), queries)?;
    let k = params.linear(g, &format!("{prefix}.k"), keys)?;
    let v = params.linear(g, &format!("{prefix}.v"), values)?;
    let attended = g.attention(q, k, v, heads)?;
    params.linear(g, &format!("{prefix}.o"), attended)
}

/// `x + FF(x)` with a rectified two-layer feed-forward.
fn feed_forward_residual(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = params.linear(g, &format!("{prefix}.ff1"), x)?;
    let h = g.relu(h);
    let h = params.linear(g, &format!("{prefix}.ff2"), h)?;
    g.add(x, h)
}

fn spatial(g: &Graph, x: Var, what: &str) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [_, _, h, w] => Ok((h, w)),
        ref s => Err(Error::Shape(format!("{what}: expected B×C×H×W, got {s:?}"))),
    }
}

/// Self-attention of every pixel against the 35 pooled tokens, residual,
/// then feed-forward with residual.
pub fn esa_block(g: &mut Graph, params: &ParamStore, stage: usize, x: Var, heads: usize) -> Result<Var> {
    let prefix = esa_prefix(stage);
    let (h, w) = spatial(g, x, "esa")?;
    let tokens = g.to_tokens(x)?;
    let pooled = pyramid_pool(g, x)?;
    let attended = multi_head_attention(g, params, &prefix, tokens, pooled, pooled, heads)?;
    let y = g.add(tokens, attended)?;
    let y = feed_forward_residual(g, params, &prefix, y)?;
    g.from_tokens(y, h, w)
}

/// Cross-attention of every pixel of `x` against the lesion token extracted
/// from `x` with the same-resolution prediction `logits`.
#[allow(clippy::too_many_arguments)]
pub fn lca_block(
    g: &mut Graph,
    params: &ParamStore,
    stage: usize,
    x: Var,
    logits: Var,
    heads: usize,
    gate: LesionGate,
    pooling: LesionPooling,
) -> Result<Var> {
    let prefix = lca_prefix(stage);
    let (h, w) = spatial(g, x, "lca")?;
    let (b, c) = (g.shape(x)[0], g.shape(x)[1]);
    let lesion = extract_lesion_feature(g, x, logits, false, pooling, stage)?;
    let token = g.reshape(lesion.values, &[b, 1, c])?;
    let tokens = g.to_tokens(x)?;
    let q = params.linear(g, &format!("{prefix}.q"), tokens)?;
    let k = params.linear(g, &format!("{prefix}.k"), token)?;
    let v = params.linear(g, &format!("{prefix}.v"), token)?;
    let attended = g.lesion_attention(q, k, v, heads, gate).map_err(|e| match e {
        Error::Numeric { what, .. } => Error::Numeric { stage, what },
        other => other,
    })?;
    let attended = params.linear(g, &format!("{prefix}.o"), attended)?;
    let y = g.add(tokens, attended)?;
    let y = feed_forward_residual(g, params, &prefix, y)?;
    g.from_tokens(y, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::attention_weights;
    use crate::tensor::Tensor;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn zero_outputs(mut p: ParamStore, prefix: &str) -> ParamStore {
        for name in ["o.weight", "o.bias", "ff2.weight", "ff2.bias"] {
            p.get_mut(&format!("{prefix}.{name}")).unwrap().data_mut().fill(0.0);
        }
        p
    }

    #[test]
    fn pyramid_pool_always_35_rows() {
        for (h, w) in [(1, 1), (2, 3), (7, 7), (16, 9)] {
            let mut g = Graph::new();
            let x = g.constant(rand_tensor(&[2, 3, h, w], 1));
            let t = pyramid_pool(&mut g, x).unwrap();
            assert_eq!(g.shape(t), [2, POOLED_TOKENS, 3]);
        }
    }

    #[test]
    fn single_pixel_pools_to_itself() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 4, 1, 1], vec![0.1, -2.0, 3.5, 7.0]).unwrap());
        let t = pyramid_pool(&mut g, x).unwrap();
        for row in g.value(t).data().chunks(4) {
            assert_eq!(row, [0.1, -2.0, 3.5, 7.0]);
        }
    }

    #[test]
    fn first_pooled_row_is_the_global_mean() {
        let x = rand_tensor(&[1, 2, 6, 10], 5);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let t = pyramid_pool(&mut g, xv).unwrap();
        for ch in 0..2 {
            let mean = x.data()[ch * 60..(ch + 1) * 60].iter().sum::<f64>() / 60.0;
            assert!((g.value(t).data()[ch] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let q = rand_tensor(&[1, 5, 8], 2);
        let row = rand_tensor(&[8], 3);
        let k = Tensor::from_fn(&[1, 6, 8], |i| row.data()[i % 8]);
        let w = attention_weights(&q, &k, 2).unwrap();
        assert!(w.data().iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-12));
    }

    #[test]
    fn esa_keeps_shape_and_attends_35_tokens() {
        let c = 16;
        let p = ParamStore::init(&block_specs("esa3", c), 4);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[1, c, 16, 16], 6));
        let y = esa_block(&mut g, &p, 3, x, 4).unwrap();
        assert_eq!(g.shape(y), [1, c, 16, 16]);
    }

    #[test]
    fn zeroed_output_projections_make_blocks_identity() {
        let c = 8;
        let x = rand_tensor(&[2, c, 5, 4], 8);
        let p = zero_outputs(ParamStore::init(&block_specs("esa4", c), 1), "esa4");
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = esa_block(&mut g, &p, 4, xv, 2).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-15);

        let p = zero_outputs(ParamStore::init(&block_specs("lca2", c), 1), "lca2");
        let logits = g.constant(rand_tensor(&[2, 1, 5, 4], 9));
        let y = lca_block(&mut g, &p, 2, xv, logits, 2, LesionGate::Sigmoid, LesionPooling::Sum).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn vanishing_lesion_token_with_zero_biases_is_near_identity() {
        let c = 8;
        let x = rand_tensor(&[1, c, 4, 4], 10);
        let mut p = ParamStore::init(&block_specs("lca3", c), 3);
        p.get_mut("lca3.ff2.weight").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let logits = g.constant(Tensor::full(&[1, 1, 4, 4], -80.0));
        let y = lca_block(&mut g, &p, 3, xv, logits, 2, LesionGate::Sigmoid, LesionPooling::Sum).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn equal_queries_get_equal_enhancement() {
        let c = 8;
        let p = ParamStore::init(&block_specs("lca2", c), 11);
        // two pixels with identical feature vectors
        let mut x = rand_tensor(&[1, c, 2, 2], 12);
        for ch in 0..c {
            x.data_mut()[ch * 4 + 3] = x.data()[ch * 4];
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let logits = g.constant(rand_tensor(&[1, 1, 2, 2], 13));
        let y = lca_block(&mut g, &p, 2, xv, logits, 4, LesionGate::Sigmoid, LesionPooling::Sum).unwrap();
        let yv = g.value(y).data();
        for ch in 0..c {
            assert_eq!(yv[ch * 4], yv[ch * 4 + 3]);
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        let p = ParamStore::init(&block_specs("esa5", 6), 0);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[1, 6, 2, 2], 1));
        assert!(matches!(esa_block(&mut g, &p, 5, x, 4), Err(Error::Config(_))));
    }
}
