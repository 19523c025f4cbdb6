//! Joint future generation: one full-attention transformer denoises video
//! patch tokens and action rows together under rectified-flow matching,
//! conditioned on the loop state and the shared noise level.

use crate::embed::{self, EmbedderIds, D_A, D_V, PATCHES_PER_GROUP, TEMPORAL_GROUP};
use crate::nn::{
    attention, layer_norm, linear, mlp, register_attention, register_layer_norm, register_linear,
    register_mlp, sinusoidal_row, AttentionIds, LayerNormIds, LinearIds, MlpIds,
};
use crate::tape::{Bound, Mat, ParamId, ParamStore, Tape, Var};
use crate::world::{Action, Frame};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub d_z: usize,
    pub n_steps: usize,
    /// Temporal groups covering the clean observation prefix.
    pub prefix_groups: usize,
    /// Temporal groups covering the generated future.
    pub future_groups: usize,
    pub horizon: usize,
}

impl GenConfig {
    pub fn default_for(d_z: usize) -> Self {
        GenConfig {
            layers: 4,
            width: 256,
            heads: 4,
            d_z,
            n_steps: 10,
            prefix_groups: 1,
            future_groups: 4,
            horizon: 8,
        }
    }

    pub fn video_rows(&self) -> usize {
        (self.prefix_groups + self.future_groups) * PATCHES_PER_GROUP
    }

    pub fn prefix_rows(&self) -> usize {
        self.prefix_groups * PATCHES_PER_GROUP
    }

    /// Video tokens, then action rows, then the noise-level token.
    pub fn n_tokens(&self) -> usize {
        self.video_rows() + self.horizon + 1
    }

    pub fn action_row_range(&self) -> std::ops::Range<usize> {
        self.video_rows()..self.video_rows() + self.horizon
    }
}

/// Which video latent rows are clean conditioning versus generated future.
/// The two index sets are complementary and cover every row.
#[derive(Debug, Clone)]
pub struct FutureMasks {
    /// (video_rows, 1): 1.0 on future rows, 0.0 on prefix rows.
    pub future: Mat,
}

impl FutureMasks {
    pub fn for_config(cfg: &GenConfig) -> Self {
        let rows = cfg.video_rows();
        let prefix = cfg.prefix_rows();
        FutureMasks {
            future: Mat::from_shape_fn((rows, 1), |(i, _)| if i < prefix { 0.0 } else { 1.0 }),
        }
    }

    pub fn future_full(&self) -> Mat {
        let rows = self.future.nrows();
        Mat::from_shape_fn((rows, D_V), |(i, _)| self.future[(i, 0)])
    }

    pub fn cond_full(&self) -> Mat {
        self.future_full().mapv(|v| 1.0 - v)
    }

    pub fn n_future_rows(&self) -> usize {
        self.future.iter().filter(|&&v| v == 1.0).count()
    }

    /// Complementarity and coverage: every row is exactly one of the two.
    pub fn well_formed(&self) -> bool {
        self.future.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// x_s = M_cond⊙x + M_fut⊙((1-s)·x + s·ε): prefix rows stay clean at every
/// noise level.
pub fn noise_video(x: &Mat, eps: &Mat, s: f64, masks: &FutureMasks) -> Mat {
    let fut = masks.future_full();
    let cond = masks.cond_full();
    &cond * x + &fut * &((1.0 - s) * x + &(s * eps))
}

/// Velocity target u = M_fut⊙(ε − x); identically zero on the prefix.
pub fn video_velocity_target(x: &Mat, eps: &Mat, masks: &FutureMasks) -> Mat {
    masks.future_full() * &(eps - x)
}

/// x_s = (1-s)·x + s·ε over the whole action chunk.
pub fn noise_action(x: &Mat, eps: &Mat, s: f64) -> Mat {
    (1.0 - s) * x + &(s * eps)
}

pub fn action_velocity_target(x: &Mat, eps: &Mat) -> Mat {
    eps - x
}

#[derive(Debug, Clone, Copy)]
pub struct GenBlockIds {
    pub ln1: LayerNormIds,
    pub attn: AttentionIds,
    /// Conditioning injection: with a single conditioning token, one-key
    /// cross-attention collapses to value-then-output projection of that
    /// token broadcast to every row (softmax over one key is 1), so only
    /// those two maps are kept.
    pub z_v: LinearIds,
    pub z_o: LinearIds,
    pub ln2: LayerNormIds,
    pub mlp: MlpIds,
}

#[derive(Debug, Clone)]
pub struct GenIds {
    pub pos: ParamId,
    pub z_proj: LinearIds,
    pub z_ln: LayerNormIds,
    pub blocks: Vec<GenBlockIds>,
    pub lnf: LayerNormIds,
    pub head_v: LinearIds,
    pub head_a: LinearIds,
}

pub fn register_generator(
    store: &mut ParamStore,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> GenIds {
    let d = cfg.width;
    let std = 1.0 / (d as f64).sqrt();
    let pos = store.register("gen.pos", crate::nn::gaussian_mat(rng, cfg.n_tokens(), d, std));
    let z_proj = register_linear(store, "gen.z_proj", cfg.d_z, d, rng);
    let z_ln = register_layer_norm(store, "gen.z_ln", d);
    let blocks = (0..cfg.layers)
        .map(|i| GenBlockIds {
            ln1: register_layer_norm(store, &format!("gen.blk{i}.ln1"), d),
            attn: register_attention(store, &format!("gen.blk{i}.attn"), d, rng),
            z_v: register_linear(store, &format!("gen.blk{i}.zin.v"), d, d, rng),
            z_o: register_linear(store, &format!("gen.blk{i}.zin.o"), d, d, rng),
            ln2: register_layer_norm(store, &format!("gen.blk{i}.ln2"), d),
            mlp: register_mlp(store, &format!("gen.blk{i}.mlp"), d, rng),
        })
        .collect();
    let lnf = register_layer_norm(store, "gen.lnf", d);
    let head_v = register_linear(store, "gen.head_v", d, D_V, rng);
    let head_a = register_linear(store, "gen.head_a", d, D_A, rng);
    GenIds {
        pos,
        z_proj,
        z_ln,
        blocks,
        lnf,
        head_v,
        head_a,
    }
}

/// Predicted velocities for both modalities from the joint token sequence
/// [video | actions | s]. `attn_bias` is an optional additive (n×n) score
/// matrix — an interaction probe for tests, None in production.
#[allow(clippy::too_many_arguments)]
pub fn predict_velocity(
    tape: &mut Tape,
    store: &ParamStore,
    bound: &mut Bound,
    eids: &EmbedderIds,
    gids: &GenIds,
    cfg: &GenConfig,
    z: Var,
    video_noised: Var,
    actions_noised: Var,
    s: f64,
    attn_bias: Option<&Mat>,
) -> Result<(Var, Var)> {
    let (vr, ar) = (tape.value(video_noised).dim(), tape.value(actions_noised).dim());
    if vr != (cfg.video_rows(), D_V) || ar != (cfg.horizon, D_A) {
        return Err(Error::Shape {
            context: "predict_velocity".into(),
            expected: format!(
                "video ({}, {D_V}), actions ({}, {D_A})",
                cfg.video_rows(),
                cfg.horizon
            ),
            got: format!("video {vr:?}, actions {ar:?}"),
        });
    }

    let v_tok = embed::lift_video(tape, store, bound, video_noised, eids);
    let a_tok = embed::lift_actions(tape, store, bound, actions_noised, eids);
    let s_feat = tape.input(sinusoidal_row(s, cfg.width));
    let rows = tape.concat_rows(&[v_tok, a_tok, s_feat]);

    let pos = bound.var(tape, store, gids.pos);
    let mut x = tape.add(rows, pos);
    // The noise level also modulates every token additively.
    x = tape.add_row(x, s_feat);

    let z_lift = linear(tape, store, bound, z, gids.z_proj);
    let z_norm = layer_norm(tape, store, bound, z_lift, gids.z_ln);

    for blk in &gids.blocks {
        let n1 = layer_norm(tape, store, bound, x, blk.ln1);
        let a = attention(tape, store, bound, n1, blk.attn, cfg.heads, attn_bias);
        x = tape.add(x, a);
        let zv = linear(tape, store, bound, z_norm, blk.z_v);
        let zo = linear(tape, store, bound, zv, blk.z_o);
        x = tape.add_row(x, zo);
        let n2 = layer_norm(tape, store, bound, x, blk.ln2);
        let m = mlp(tape, store, bound, n2, blk.mlp);
        x = tape.add(x, m);
    }
    let h = layer_norm(tape, store, bound, x, gids.lnf);

    let h_video = tape.slice_rows(h, 0, cfg.video_rows());
    let h_action = tape.slice_rows(h, cfg.video_rows(), cfg.horizon);
    let u_v = linear(tape, store, bound, h_video, gids.head_v);
    let u_a = linear(tape, store, bound, h_action, gids.head_a);
    Ok((u_v, u_a))
}

/// How the action chunk evolves during sampling.
pub enum ActionPath<'a> {
    /// Denoise actions jointly with video.
    Denoise,
    /// Hold actions fixed at the given normalized rows; video-only denoising.
    Clamped(&'a Mat),
}

/// Explicit Euler integration from s=1 down to 0 in `n_steps` equal steps:
/// x ← x − û·ds. The video prefix rows are re-clamped to the clean prefix
/// every step, so they pass through bit-exactly. The velocity comes from a
/// closure so exactness can be checked against an oracle field.
pub fn integrate_flow<F>(
    cfg: &GenConfig,
    masks: &FutureMasks,
    video_init: &Mat,
    action_init: &Mat,
    n_steps: usize,
    action_path: ActionPath<'_>,
    mut velocity: F,
) -> Result<(Mat, Mat)>
where
    F: FnMut(&Mat, &Mat, f64) -> Result<(Mat, Mat)>,
{
    assert!(n_steps > 0, "need at least one integration step");
    debug_assert_eq!(video_init.dim(), (cfg.video_rows(), D_V));
    debug_assert_eq!(action_init.dim(), (cfg.horizon, D_A));
    let fut = masks.future_full();
    let cond = masks.cond_full();
    let clamp_prefix = |x: &Mat| &cond * video_init + &fut * x;

    let mut xv = clamp_prefix(video_init);
    let mut xa = match &action_path {
        ActionPath::Denoise => action_init.clone(),
        ActionPath::Clamped(target) => (*target).clone(),
    };
    let ds = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let s = 1.0 - k as f64 * ds;
        let (uv, ua) = velocity(&xv, &xa, s)?;
        xv = clamp_prefix(&(&xv - &(&fut * &uv * ds)));
        if let ActionPath::Denoise = action_path {
            xa = &xa - &(&ua * ds);
        }
    }
    Ok((xv, xa))
}

/// Model-velocity closure over a forward-only tape.
fn model_velocity<'a>(
    store: &'a ParamStore,
    eids: &'a EmbedderIds,
    gids: &'a GenIds,
    cfg: &'a GenConfig,
    z: &'a Mat,
) -> impl FnMut(&Mat, &Mat, f64) -> Result<(Mat, Mat)> + 'a {
    move |xv, xa, s| {
        let mut tape = Tape::new();
        let mut bound = Bound::new(store);
        let zv = tape.input(z.clone());
        let vv = tape.input(xv.clone());
        let av = tape.input(xa.clone());
        let (uv, ua) =
            predict_velocity(&mut tape, store, &mut bound, eids, gids, cfg, zv, vv, av, s, None)?;
        Ok((tape.value(uv).clone(), tape.value(ua).clone()))
    }
}

/// Draws the sampling noise in a fixed serial order: all future video rows,
/// then all action rows.
pub fn draw_noise(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> (Mat, Mat) {
    let eps_v = crate::nn::gaussian_mat(rng, cfg.video_rows(), D_V, 1.0);
    let eps_a = crate::nn::gaussian_mat(rng, cfg.horizon, D_A, 1.0);
    (eps_v, eps_a)
}

pub struct SampledFuture {
    pub frames: Vec<Frame>,
    pub actions: Vec<Action>,
}

/// Imagines H future frames and plans H actions jointly from the loop state
/// and the clean observation prefix.
pub fn sample_future(
    store: &ParamStore,
    eids: &EmbedderIds,
    gids: &GenIds,
    cfg: &GenConfig,
    z: &Mat,
    prefix_frames: &[Frame],
    rng: &mut ChaCha8Rng,
) -> Result<SampledFuture> {
    let (video_init, masks) = prefix_init(cfg, prefix_frames, rng)?;
    let eps_a = crate::nn::gaussian_mat(rng, cfg.horizon, D_A, 1.0);
    let (xv, xa) = integrate_flow(
        cfg,
        &masks,
        &video_init,
        &eps_a,
        cfg.n_steps,
        ActionPath::Denoise,
        model_velocity(store, eids, gids, cfg, z),
    )?;
    let frames = decode_future_rows(cfg, &xv)?;
    let actions = embed::decode_actions(&xa)?;
    Ok(SampledFuture { frames, actions })
}

/// Imagines future frames with the action chunk clamped to the given
/// actions at every integration step (no action noise is drawn).
pub fn sample_future_action_conditioned(
    store: &ParamStore,
    eids: &EmbedderIds,
    gids: &GenIds,
    cfg: &GenConfig,
    z: &Mat,
    prefix_frames: &[Frame],
    actions: &[Action],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Frame>> {
    if actions.len() != cfg.horizon {
        return Err(Error::Shape {
            context: "sample_future_action_conditioned".into(),
            expected: format!("{} actions", cfg.horizon),
            got: actions.len().to_string(),
        });
    }
    let (video_init, masks) = prefix_init(cfg, prefix_frames, rng)?;
    let target = embed::normalize_actions(actions);
    let (xv, _) = integrate_flow(
        cfg,
        &masks,
        &video_init,
        &target,
        cfg.n_steps,
        ActionPath::Clamped(&target),
        model_velocity(store, eids, gids, cfg, z),
    )?;
    decode_future_rows(cfg, &xv)
}

/// Clean prefix tokens in the conditioning rows, fresh noise in the future
/// rows.
fn prefix_init(
    cfg: &GenConfig,
    prefix_frames: &[Frame],
    rng: &mut ChaCha8Rng,
) -> Result<(Mat, FutureMasks)> {
    if prefix_frames.len() != cfg.prefix_groups * TEMPORAL_GROUP {
        return Err(Error::Shape {
            context: "sampling prefix".into(),
            expected: format!("{} frames", cfg.prefix_groups * TEMPORAL_GROUP),
            got: prefix_frames.len().to_string(),
        });
    }
    let masks = FutureMasks::for_config(cfg);
    let prefix = embed::encode_video(prefix_frames)?;
    let eps_v = crate::nn::gaussian_mat(rng, cfg.video_rows(), D_V, 1.0);
    let mut video_init = eps_v;
    video_init
        .slice_mut(ndarray::s![..cfg.prefix_rows(), ..])
        .assign(&prefix.tokens);
    Ok((video_init, masks))
}

fn decode_future_rows(cfg: &GenConfig, xv: &Mat) -> Result<Vec<Frame>> {
    let latent = embed::VideoLatent {
        tokens: xv
            .slice(ndarray::s![cfg.prefix_rows().., ..])
            .to_owned(),
        groups: cfg.future_groups,
    };
    embed::decode_video(&latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gaussian_mat;
    use crate::tape::NEG_MASK;
    use rand::SeedableRng;

    fn tiny_cfg() -> GenConfig {
        GenConfig {
            layers: 2,
            width: 32,
            heads: 2,
            d_z: 16,
            n_steps: 4,
            prefix_groups: 1,
            future_groups: 4,
            horizon: 8,
        }
    }

    fn setup(seed: u64) -> (ParamStore, EmbedderIds, GenIds, GenConfig) {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let eids = embed::register_embedders(&mut store, cfg.width, &mut rng);
        let gids = register_generator(&mut store, &cfg, &mut rng);
        (store, eids, gids, cfg)
    }

    #[test]
    fn masks_are_complementary_and_covering() {
        let cfg = tiny_cfg();
        let m = FutureMasks::for_config(&cfg);
        assert!(m.well_formed());
        assert_eq!(m.future.nrows(), cfg.video_rows());
        assert_eq!(m.n_future_rows(), cfg.future_groups * PATCHES_PER_GROUP);
        let full = m.future_full() + m.cond_full();
        assert!(full.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn noising_identities_hold_pointwise() {
        let cfg = tiny_cfg();
        let masks = FutureMasks::for_config(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian_mat(&mut rng, cfg.video_rows(), D_V, 1.0);
        let eps = gaussian_mat(&mut rng, cfg.video_rows(), D_V, 1.0);

        let at_zero = noise_video(&x, &eps, 0.0, &masks);
        assert_eq!(at_zero, x);
        let at_one = noise_video(&x, &eps, 1.0, &masks);
        for i in 0..cfg.prefix_rows() {
            assert_eq!(at_one.row(i), x.row(i), "prefix row {i} noised");
        }
        for i in cfg.prefix_rows()..cfg.video_rows() {
            assert_eq!(at_one.row(i), eps.row(i), "future row {i} not pure noise");
        }
        let u = video_velocity_target(&x, &eps, &masks);
        for i in 0..cfg.prefix_rows() {
            assert!(u.row(i).iter().all(|&v| v == 0.0));
        }

        let xa = gaussian_mat(&mut rng, cfg.horizon, D_A, 1.0);
        let ea = gaussian_mat(&mut rng, cfg.horizon, D_A, 1.0);
        let s = 0.37;
        let xs = noise_action(&xa, &ea, s);
        let want = (1.0 - s) * &xa + &(s * &ea);
        let worst = (&xs - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-15);
    }

    #[test]
    fn euler_is_exact_under_the_oracle_velocity_field() {
        // Straight-path flow from a single target has constant velocity
        // ε − x*, so explicit Euler lands exactly for any step count.
        let cfg = tiny_cfg();
        let masks = FutureMasks::for_config(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_star = gaussian_mat(&mut rng, cfg.video_rows(), D_V, 1.0);
        let a_star = gaussian_mat(&mut rng, cfg.horizon, D_A, 1.0);
        let eps_v = gaussian_mat(&mut rng, cfg.video_rows(), D_V, 1.0);
        let eps_a = gaussian_mat(&mut rng, cfg.horizon, D_A, 1.0);

        let mut video_init = eps_v.clone();
        video_init
            .slice_mut(ndarray::s![..cfg.prefix_rows(), ..])
            .assign(&x_star.slice(ndarray::s![..cfg.prefix_rows(), ..]));

        for n_steps in [1usize, 2, 8, 50] {
            let (xv, xa) = integrate_flow(
                &cfg,
                &masks,
                &video_init,
                &eps_a,
                n_steps,
                ActionPath::Denoise,
                |_, _, _| Ok((&eps_v - &x_star, &eps_a - &a_star)),
            )
            .unwrap();
            for i in 0..cfg.prefix_rows() {
                assert_eq!(xv.row(i), video_init.row(i), "prefix drifted, n={n_steps}");
            }
            let worst_v = (&xv - &x_star)
                .slice(ndarray::s![cfg.prefix_rows().., ..])
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let worst_a = (&xa - &a_star).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst_v < 1e-6, "video error {worst_v} at n={n_steps}");
            assert!(worst_a < 1e-6, "action error {worst_a} at n={n_steps}");
        }
    }

    #[test]
    fn velocity_shapes_and_determinism() {
        let (store, eids, gids, cfg) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = gaussian_mat(&mut rng, 1, cfg.d_z, 1.0);
        let xv = gaussian_mat(&mut rng, cfg.video_rows(), D_V, 1.0);
        let xa = gaussian_mat(&mut rng, cfg.horizon, D_A, 1.0);

        let run = |s: f64| {
            let mut tape = Tape::new();
            let mut bound = Bound::new(&store);
            let zv = tape.input(z.clone());
            let vv = tape.input(xv.clone());
            let av = tape.input(xa.clone());
            let (uv, ua) = predict_velocity(
                &mut tape, &store, &mut bound, &eids, &gids, &cfg, zv, vv, av, s, None,
            )
            .unwrap();
            (tape.value(uv).clone(), tape.value(ua).clone())
        };
        let (uv1, ua1) = run(0.5);
        let (uv2, ua2) = run(0.5);
        assert_eq!(uv1, uv2);
        assert_eq!(ua1, ua2);
        assert_eq!(uv1.dim(), (cfg.video_rows(), D_V));
        assert_eq!(ua1.dim(), (cfg.horizon, D_A));
        assert!(uv1.iter().chain(ua1.iter()).all(|v| v.is_finite()));

        let (uv3, _) = run(0.1);
        assert_ne!(uv1, uv3, "noise level must modulate the prediction");
    }

    #[test]
    fn loop_state_modulates_both_heads() {
        let (store, eids, gids, cfg) = setup(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xv = gaussian_mat(&mut rng, cfg.video_rows(), D_V, 1.0);
        let xa = gaussian_mat(&mut rng, cfg.horizon, D_A, 1.0);
        let z1 = gaussian_mat(&mut rng, 1, cfg.d_z, 1.0);
        let z2 = gaussian_mat(&mut rng, 1, cfg.d_z, 1.0);

        let run = |z: &Mat| {
            let mut tape = Tape::new();
            let mut bound = Bound::new(&store);
            let zv = tape.input(z.clone());
            let vv = tape.input(xv.clone());
            let av = tape.input(xa.clone());
            let (uv, ua) = predict_velocity(
                &mut tape, &store, &mut bound, &eids, &gids, &cfg, zv, vv, av, 0.5, None,
            )
            .unwrap();
            (tape.value(uv).clone(), tape.value(ua).clone())
        };
        let (uv1, ua1) = run(&z1);
        let (uv2, ua2) = run(&z2);
        assert_ne!(uv1, uv2, "video head ignores z");
        assert_ne!(ua1, ua2, "action head ignores z");
    }

    #[test]
    fn blocking_action_to_video_attention_changes_action_velocity() {
        let (store, eids, gids, cfg) = setup(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = gaussian_mat(&mut rng, 1, cfg.d_z, 1.0);
        let xv = gaussian_mat(&mut rng, cfg.video_rows(), D_V, 1.0);
        let xa = gaussian_mat(&mut rng, cfg.horizon, D_A, 1.0);

        let n = cfg.n_tokens();
        let mut bias = Mat::zeros((n, n));
        for i in cfg.action_row_range() {
            for j in 0..cfg.video_rows() {
                bias[(i, j)] = NEG_MASK;
            }
        }
        let run = |b: Option<&Mat>| {
            let mut tape = Tape::new();
            let mut bound = Bound::new(&store);
            let zv = tape.input(z.clone());
            let vv = tape.input(xv.clone());
            let av = tape.input(xa.clone());
            let (uv, ua) = predict_velocity(
                &mut tape, &store, &mut bound, &eids, &gids, &cfg, zv, vv, av, 0.5, b,
            )
            .unwrap();
            (tape.value(uv).clone(), tape.value(ua).clone())
        };
        let (_, ua_open) = run(None);
        let (_, ua_blocked) = run(Some(&bias));
        assert_ne!(
            ua_open, ua_blocked,
            "action tokens must be attending to video tokens"
        );
    }

    #[test]
    fn sampling_is_deterministic_and_in_bounds() {
        let (store, eids, gids, cfg) = setup(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = gaussian_mat(&mut rng, 1, cfg.d_z, 1.0);
        let prefix = vec![Frame::filled([40, 80, 120]); cfg.prefix_groups * TEMPORAL_GROUP];

        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let out1 = sample_future(&store, &eids, &gids, &cfg, &z, &prefix, &mut r1).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let out2 = sample_future(&store, &eids, &gids, &cfg, &z, &prefix, &mut r2).unwrap();

        assert_eq!(out1.frames.len(), cfg.horizon);
        assert_eq!(out1.actions.len(), cfg.horizon);
        for (a, b) in out1.frames.iter().zip(&out2.frames) {
            assert_eq!(a.pixels, b.pixels);
        }
        for (a, b) in out1.actions.iter().zip(&out2.actions) {
            assert_eq!((a.dx, a.dy, a.grip), (b.dx, b.dy, b.grip));
        }
        for a in &out1.actions {
            assert!(a.dx.abs() <= crate::world::STEP_MAX);
            assert!(a.dy.abs() <= crate::world::STEP_MAX);
            assert!((0.0..=1.0).contains(&a.grip));
        }
    }

    #[test]
    fn conditioning_on_actions_changes_imagined_frames() {
        let (store, eids, gids, cfg) = setup(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = gaussian_mat(&mut rng, 1, cfg.d_z, 1.0);
        let prefix = vec![Frame::filled([90, 10, 10]); cfg.prefix_groups * TEMPORAL_GROUP];
        let strong = vec![
            Action {
                dx: 0.1,
                dy: 0.1,
                grip: 1.0
            };
            cfg.horizon
        ];
        let weak = vec![Action::ZERO_OPEN; cfg.horizon];

        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let f1 =
            sample_future_action_conditioned(&store, &eids, &gids, &cfg, &z, &prefix, &strong, &mut r1)
                .unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let f2 =
            sample_future_action_conditioned(&store, &eids, &gids, &cfg, &z, &prefix, &weak, &mut r2)
                .unwrap();
        assert_eq!(f1.len(), cfg.horizon);
        assert!(
            f1.iter().zip(&f2).any(|(a, b)| a.pixels != b.pixels),
            "clamped actions had no effect on imagination"
        );
    }

    #[test]
    fn gradients_reach_generator_and_shared_embedders() {
        let (store, eids, gids, cfg) = setup(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut tape = Tape::new();
        let mut bound = Bound::new(&store);
        let z = tape.input(gaussian_mat(&mut rng, 1, cfg.d_z, 1.0));
        let xv = tape.input(gaussian_mat(&mut rng, cfg.video_rows(), D_V, 1.0));
        let xa = tape.input(gaussian_mat(&mut rng, cfg.horizon, D_A, 1.0));
        let (uv, ua) = predict_velocity(
            &mut tape, &store, &mut bound, &eids, &gids, &cfg, z, xv, xa, 0.5, None,
        )
        .unwrap();
        let sv = tape.mul(uv, uv);
        let sa = tape.mul(ua, ua);
        let rv = tape.sum_all(sv, 1.0);
        let ra = tape.sum_all(sa, 1.0);
        let root = tape.add(rv, ra);
        let grads = tape.backward(root);
        let mut acc = crate::tape::Grads::zeros(&store);
        grads.accumulate_params(&tape, 1.0, &mut acc);
        for (pid, label) in [
            (eids.video_lift.w, "shared video lift"),
            (eids.action_lift1.w, "shared action lift"),
            (gids.z_proj.w, "z projection"),
            (gids.blocks[0].z_v.w, "z injection value"),
            (gids.blocks[1].attn.q.w, "attention"),
            (gids.head_v.w, "video head"),
            (gids.head_a.w, "action head"),
        ] {
            let g = acc.dense(&store, pid);
            assert!(
                g.iter().any(|v| v.abs() > 1e-12),
                "{label} received no gradient"
            );
        }
    }
}
