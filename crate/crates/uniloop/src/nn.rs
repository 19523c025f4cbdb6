//! Transformer building blocks over the tape: linear layers, layer norm,
//! multi-head attention, and pre-norm residual blocks, plus parameter
//! registration and deterministic Gaussian init.

use crate::tape::{Bound, Mat, ParamId, ParamStore, Tape, Var, NEG_MASK};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Box–Muller standard normal draw; two uniforms per sample keeps the
/// stream layout simple and reproducible.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn gaussian_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| standard_normal(rng) * std)
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Registers `name.w` (fan_in×fan_out, std 1/√fan_in) and `name.b` (zeros).
pub fn register_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> LinearIds {
    let std = 1.0 / (fan_in as f64).sqrt();
    LinearIds {
        w: store.register(&format!("{name}.w"), gaussian_mat(rng, fan_in, fan_out, std)),
        b: store.register(&format!("{name}.b"), Mat::zeros((1, fan_out))),
    }
}

pub fn linear(
    tape: &mut Tape,
    store: &ParamStore,
    bound: &mut Bound,
    x: Var,
    ids: LinearIds,
) -> Var {
    let w = bound.var(tape, store, ids.w);
    let b = bound.var(tape, store, ids.b);
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormIds {
    pub g: ParamId,
    pub b: ParamId,
}

pub fn register_layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> LayerNormIds {
    LayerNormIds {
        g: store.register(&format!("{name}.g"), Mat::from_elem((1, dim), 1.0)),
        b: store.register(&format!("{name}.b"), Mat::zeros((1, dim))),
    }
}

pub fn layer_norm(
    tape: &mut Tape,
    store: &ParamStore,
    bound: &mut Bound,
    x: Var,
    ids: LayerNormIds,
) -> Var {
    let g = bound.var(tape, store, ids.g);
    let b = bound.var(tape, store, ids.b);
    tape.layer_norm(x, g, b)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

pub fn register_attention(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> AttentionIds {
    AttentionIds {
        q: register_linear(store, &format!("{name}.q"), d, d, rng),
        k: register_linear(store, &format!("{name}.k"), d, d, rng),
        v: register_linear(store, &format!("{name}.v"), d, d, rng),
        o: register_linear(store, &format!("{name}.o"), d, d, rng),
    }
}

/// Multi-head scaled dot-product self-attention. `bias`, when given, is an
/// additive (n×n) score matrix applied to every head — the causal mask, or
/// a probe mask in interaction tests.
pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    bound: &mut Bound,
    x: Var,
    ids: AttentionIds,
    n_heads: usize,
    bias: Option<&Mat>,
) -> Var {
    let d = tape.value(x).ncols();
    assert!(d % n_heads == 0, "width {d} not divisible by heads {n_heads}");
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear(tape, store, bound, x, ids.q);
    let k = linear(tape, store, bound, x, ids.k);
    let v = linear(tape, store, bound, x, ids.v);

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.matmul_nt(qh, kh);
        let scaled = tape.scale(scores, scale);
        let masked = match bias {
            Some(m) => tape.add_const(scaled, m),
            None => scaled,
        };
        let att = tape.softmax_rows(masked);
        heads.push(tape.matmul(att, vh));
    }
    let joined = tape.concat_cols(&heads);
    linear(tape, store, bound, joined, ids.o)
}

#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: LinearIds,
    pub w2: LinearIds,
}

pub const MLP_RATIO: usize = 4;

pub fn register_mlp(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> MlpIds {
    MlpIds {
        w1: register_linear(store, &format!("{name}.w1"), d, MLP_RATIO * d, rng),
        w2: register_linear(store, &format!("{name}.w2"), MLP_RATIO * d, d, rng),
    }
}

pub fn mlp(tape: &mut Tape, store: &ParamStore, bound: &mut Bound, x: Var, ids: MlpIds) -> Var {
    let h = linear(tape, store, bound, x, ids.w1);
    let a = tape.silu(h);
    linear(tape, store, bound, a, ids.w2)
}

/// One pre-norm residual block: x += attn(ln(x)); x += mlp(ln(x)).
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1: LayerNormIds,
    pub attn: AttentionIds,
    pub ln2: LayerNormIds,
    pub mlp: MlpIds,
}

pub fn register_block(
    store: &mut ParamStore,
    name: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> BlockIds {
    BlockIds {
        ln1: register_layer_norm(store, &format!("{name}.ln1"), d),
        attn: register_attention(store, &format!("{name}.attn"), d, rng),
        ln2: register_layer_norm(store, &format!("{name}.ln2"), d),
        mlp: register_mlp(store, &format!("{name}.mlp"), d, rng),
    }
}

pub fn block(
    tape: &mut Tape,
    store: &ParamStore,
    bound: &mut Bound,
    x: Var,
    ids: BlockIds,
    n_heads: usize,
    bias: Option<&Mat>,
) -> Var {
    let n1 = layer_norm(tape, store, bound, x, ids.ln1);
    let a = attention(tape, store, bound, n1, ids.attn, n_heads, bias);
    let x = tape.add(x, a);
    let n2 = layer_norm(tape, store, bound, x, ids.ln2);
    let m = mlp(tape, store, bound, n2, ids.mlp);
    tape.add(x, m)
}

/// Additive causal mask: position i may attend to j ≤ i.
pub fn causal_mask(n: usize) -> Mat {
    Mat::from_shape_fn((n, n), |(i, j)| if j > i { NEG_MASK } else { 0.0 })
}

/// Sinusoidal feature row for a scalar (diffusion time embedding).
pub fn sinusoidal_row(value: f64, dim: usize) -> Mat {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    Mat::from_shape_fn((1, dim), |(_, j)| {
        let pair = j / 2;
        let freq = (10_000f64).powf(-(pair as f64) / half as f64);
        if j % 2 == 0 {
            (value * freq).sin()
        } else {
            (value * freq).cos()
        }
    })
}
