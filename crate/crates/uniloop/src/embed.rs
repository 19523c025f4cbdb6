//! Shared modality embedders: a fixed orthonormal video patchify with an
//! exact inverse, affine action normalization, and the learned liftings
//! used by both networks (one parameter set, identity of storage).

use crate::nn::{gaussian_mat, linear, register_linear, LinearIds};
use crate::tape::{Bound, Mat, ParamStore, Tape, Var};
use crate::world::{Action, Frame, FRAME_SIDE, STEP_MAX};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

pub const PATCH: usize = 8;
pub const TEMPORAL_GROUP: usize = 2;
pub const PATCH_GRID: usize = FRAME_SIDE / PATCH; // 4
pub const PATCHES_PER_GROUP: usize = PATCH_GRID * PATCH_GRID; // 16
/// Latent width of one spatiotemporal patch: 8×8 px × 3 channels × 2 frames.
pub const D_V: usize = PATCH * PATCH * 3 * TEMPORAL_GROUP; // 384

/// Translation step bound maps to [-0.8, 0.8]; a power-of-two scale keeps
/// normalize/denormalize bit-exact for every representable input.
pub const ACTION_SCALE: f64 = 8.0;
pub const D_A: usize = 3;

const MIX_SEED: u64 = 271_828;

static Q_MIX: OnceLock<Mat> = OnceLock::new();

/// The fixed orthonormal mixing matrix (D_V×D_V), built once by modified
/// Gram–Schmidt on a seeded Gaussian draw.
pub fn ortho_mix() -> &'static Mat {
    Q_MIX.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(MIX_SEED);
        modified_gram_schmidt(gaussian_mat(&mut rng, D_V, D_V, 1.0))
    })
}

fn modified_gram_schmidt(mut a: Mat) -> Mat {
    let n = a.ncols();
    for j in 0..n {
        for i in 0..j {
            let dot = a.column(i).dot(&a.column(j));
            let qi = a.column(i).to_owned();
            a.column_mut(j).zip_mut_with(&qi, |x, &q| *x -= dot * q);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt();
        assert!(norm > 1e-8, "rank-deficient draw in column {j}");
        a.column_mut(j).mapv_inplace(|v| v / norm);
    }
    a
}

/// Patchified video window: one row per spatiotemporal patch, mixed through
/// the fixed orthonormal map.
#[derive(Debug, Clone)]
pub struct VideoLatent {
    /// (groups·16, D_V)
    pub tokens: Mat,
    pub groups: usize,
}

/// Patchifies frames (temporal group 2, spatial patch 8×8, pixels scaled to
/// [0,1]) and applies the orthonormal mix. Token row g·16 + py·4 + px; raw
/// component index ((dt·8 + y)·8 + x)·3 + c.
pub fn encode_video(frames: &[Frame]) -> Result<VideoLatent> {
    if frames.is_empty() || frames.len() % TEMPORAL_GROUP != 0 {
        return Err(Error::Shape {
            context: "encode_video".into(),
            expected: format!("a positive multiple of {TEMPORAL_GROUP} frames"),
            got: format!("{} frames", frames.len()),
        });
    }
    let groups = frames.len() / TEMPORAL_GROUP;
    let mut raw = Mat::zeros((groups * PATCHES_PER_GROUP, D_V));
    for g in 0..groups {
        for py in 0..PATCH_GRID {
            for px in 0..PATCH_GRID {
                let row = g * PATCHES_PER_GROUP + py * PATCH_GRID + px;
                for dt in 0..TEMPORAL_GROUP {
                    let frame = &frames[g * TEMPORAL_GROUP + dt];
                    for y in 0..PATCH {
                        for x in 0..PATCH {
                            for c in 0..3 {
                                let v = frame.get(py * PATCH + y, px * PATCH + x)[c];
                                raw[(row, ((dt * PATCH + y) * PATCH + x) * 3 + c)] =
                                    f64::from(v) / 255.0;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(VideoLatent {
        tokens: raw.dot(&ortho_mix().t()),
        groups,
    })
}

/// Exact linear inverse of `encode_video`, then clamp to [0,1] and quantize
/// back to bytes.
pub fn decode_video(latent: &VideoLatent) -> Result<Vec<Frame>> {
    let expected_rows = latent.groups * PATCHES_PER_GROUP;
    if latent.tokens.dim() != (expected_rows, D_V) {
        return Err(Error::Shape {
            context: "decode_video".into(),
            expected: format!("({expected_rows}, {D_V})"),
            got: format!("{:?}", latent.tokens.dim()),
        });
    }
    let raw = latent.tokens.dot(ortho_mix());
    let mut frames = vec![Frame::filled([0, 0, 0]); latent.groups * TEMPORAL_GROUP];
    for g in 0..latent.groups {
        for py in 0..PATCH_GRID {
            for px in 0..PATCH_GRID {
                let row = g * PATCHES_PER_GROUP + py * PATCH_GRID + px;
                for dt in 0..TEMPORAL_GROUP {
                    let frame = &mut frames[g * TEMPORAL_GROUP + dt];
                    for y in 0..PATCH {
                        for x in 0..PATCH {
                            for c in 0..3 {
                                let v = raw[(row, ((dt * PATCH + y) * PATCH + x) * 3 + c)];
                                let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                                let at = ((py * PATCH + y) * FRAME_SIDE + px * PATCH + x) * 3 + c;
                                frame.pixels[at] = byte;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(frames)
}

/// Affine map from action bounds to [-1,1] per dimension.
pub fn normalize_action(a: &Action) -> [f64; 3] {
    [
        a.dx * ACTION_SCALE,
        a.dy * ACTION_SCALE,
        2.0 * a.grip - 1.0,
    ]
}

/// Inverse affine map, clamped to the legal action box. Errors on
/// non-finite latents (a denoiser blow-up must not silently clamp).
pub fn decode_action(v: [f64; 3]) -> Result<Action> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format(format!("non-finite action latent {v:?}")));
    }
    Ok(Action {
        dx: (v[0] / ACTION_SCALE).clamp(-STEP_MAX, STEP_MAX),
        dy: (v[1] / ACTION_SCALE).clamp(-STEP_MAX, STEP_MAX),
        grip: ((v[2] + 1.0) / 2.0).clamp(0.0, 1.0),
    })
}

/// Normalized (H, 3) action rows.
pub fn normalize_actions(actions: &[Action]) -> Mat {
    let mut m = Mat::zeros((actions.len(), D_A));
    for (i, a) in actions.iter().enumerate() {
        let row = normalize_action(a);
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

pub fn decode_actions(m: &Mat) -> Result<Vec<Action>> {
    m.rows()
        .into_iter()
        .map(|r| decode_action([r[0], r[1], r[2]]))
        .collect()
}

/// Handles to the learned liftings shared by the backbone and generator.
/// Registered once under `embed.*`; both consumers hold the same ids.
#[derive(Debug, Clone, Copy)]
pub struct EmbedderIds {
    pub video_lift: LinearIds,
    pub action_lift1: LinearIds,
    pub action_lift2: LinearIds,
    pub state_proj: LinearIds,
}

pub fn register_embedders(store: &mut ParamStore, d: usize, rng: &mut ChaCha8Rng) -> EmbedderIds {
    EmbedderIds {
        video_lift: register_linear(store, "embed.video_lift", D_V, d, rng),
        action_lift1: register_linear(store, "embed.action_lift.l1", D_A, d, rng),
        action_lift2: register_linear(store, "embed.action_lift.l2", d, d, rng),
        state_proj: register_linear(store, "embed.state_proj", D_A, d, rng),
    }
}

/// Lifts mixed video tokens (N, D_V) into model width.
pub fn lift_video(
    tape: &mut Tape,
    store: &ParamStore,
    bound: &mut Bound,
    tokens: Var,
    ids: &EmbedderIds,
) -> Var {
    linear(tape, store, bound, tokens, ids.video_lift)
}

/// Lifts normalized action rows (N, 3) into model width via a two-layer MLP.
pub fn lift_actions(
    tape: &mut Tape,
    store: &ParamStore,
    bound: &mut Bound,
    rows: Var,
    ids: &EmbedderIds,
) -> Var {
    let h = linear(tape, store, bound, rows, ids.action_lift1);
    let a = tape.silu(h);
    linear(tape, store, bound, a, ids.action_lift2)
}

/// Projects proprio rows (N, 3) into model width.
pub fn lift_proprio(
    tape: &mut Tape,
    store: &ParamStore,
    bound: &mut Bound,
    rows: Var,
    ids: &EmbedderIds,
) -> Var {
    linear(tape, store, bound, rows, ids.state_proj)
}
