//! Closed-loop evaluation: receding-horizon rollouts, the imagination
//! alignment metric, compositional and zero-shot protocols with machine
//! checked leak guards, the four-variant ablation table, and report files.

use crate::backbone::{encode_context, greedy_decode, GreedyOut};
use crate::data::{self, MultimodalContext, Vocabulary, WindowConfig};
use crate::generator::{sample_future, sample_future_action_conditioned};
use crate::tape::{Bound, Mat, Tape};
use crate::training::{Model, TrainHyper, Trainer, ZSource};
use crate::world::episode::generate_episode;
use crate::world::splits::{EpisodeRef, SplitConfig, Splits};
use crate::world::tasks::{canonical_start, oracle_policy, scene_stream_seed, Task};
use crate::world::{render, step, Action, Frame, WorldState, FRAME_LEN};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub const DEFAULT_MAX_STEPS: usize = 96;
pub const DEFAULT_REPLAN_STRIDE: usize = 4;

/// What produces plans inside a rollout: the trained model, or the world's
/// own scripted controller with simulator-lookahead imagination (the
/// harness self-test; its imagination is exact by construction).
pub enum Planner<'a> {
    Model {
        model: &'a Model,
        z_source: ZSource,
        vocab: &'a Vocabulary,
    },
    Oracle,
}

/// One planning pass: reasoning trace, imagined future, planned chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub cot_ids: Vec<u32>,
    pub cot: String,
    pub cot_truncated: bool,
    pub imagined_frames: Vec<Frame>,
    pub planned_actions: Vec<Action>,
}

/// Everything recorded at one replan point.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplanRecord {
    /// World step index at which this plan was made.
    pub step: usize,
    pub cot_ids: Vec<u32>,
    pub cot: String,
    pub cot_truncated: bool,
    pub imagined_frames: Vec<Frame>,
    pub planned_actions: Vec<Action>,
    pub executed_actions: Vec<Action>,
}

/// Full closed-loop trace of one evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub task_id: String,
    pub seed: u64,
    pub replans: Vec<ReplanRecord>,
    /// Start frame plus one frame per executed step.
    pub realized_frames: Vec<Frame>,
    /// Decided solely by world-side predicates.
    pub success: bool,
    pub steps_used: usize,
    /// Composed-task diagnostic: first phase done, second never reached.
    pub transition_failure: bool,
    /// Per-replan mean squared error between imagined and realized frames.
    pub alignment: Vec<f64>,
    /// Set when planning aborted mid-rollout; the record is partial.
    pub fault: Option<String>,
}

/// Mean per-pixel squared error between two frames in [0,1] units. Zero
/// iff the frames are byte-identical.
pub fn frame_mse(a: &Frame, b: &Frame) -> f64 {
    debug_assert_eq!(a.pixels.len(), FRAME_LEN);
    debug_assert_eq!(b.pixels.len(), FRAME_LEN);
    a.pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) / 255.0;
            d * d
        })
        .sum::<f64>()
        / FRAME_LEN as f64
}

/// Mean of the per-replan alignment curve.
pub fn imagination_alignment(record: &RolloutRecord) -> Result<f64> {
    if record.alignment.is_empty() {
        return Err(Error::User(format!(
            "rollout of `{}` seed {} executed no steps; no frames to align",
            record.task_id, record.seed
        )));
    }
    Ok(record.alignment.iter().sum::<f64>() / record.alignment.len() as f64)
}

/// Per-replan noise stream: independent of other replans, fixed by
/// (task, seed, replan index) so records replay exactly.
pub fn plan_noise_seed(task_id: &str, seed: u64, replan: usize) -> u64 {
    scene_stream_seed(task_id, seed).wrapping_add((replan as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn quantize_proprio(p: [f64; 3]) -> [f64; 3] {
    p.map(|v| v as f32 as f64)
}

/// Assembles the context from live rollout history with the same padding
/// conventions as the offline sample builder: frames and proprio windows
/// end at the current step inclusive, actions strictly before it, zeros
/// where history is short.
pub fn live_context(
    instruction_ids: &[u32],
    frames: &[Frame],
    proprio: &[[f64; 3]],
    actions: &[Action],
    w: &WindowConfig,
) -> MultimodalContext {
    assert_eq!(frames.len(), proprio.len());
    assert_eq!(frames.len(), actions.len() + 1);
    let mut past_frames = Vec::with_capacity(w.k_o);
    let mut prop = Vec::with_capacity(w.k_o);
    for i in 0..w.k_o {
        let idx = frames.len() as i64 - w.k_o as i64 + i as i64;
        if idx >= 0 {
            past_frames.push(frames[idx as usize].clone());
            prop.push(proprio[idx as usize]);
        } else {
            past_frames.push(Frame::filled([0, 0, 0]));
            prop.push([0.0, 0.0, 0.0]);
        }
    }
    let mut past_actions = Vec::with_capacity(w.k_a);
    for i in 0..w.k_a {
        let idx = actions.len() as i64 - w.k_a as i64 + i as i64;
        if idx >= 0 {
            let a = actions[idx as usize];
            past_actions.push([a.dx, a.dy, a.grip]);
        } else {
            past_actions.push([0.0, 0.0, 0.0]);
        }
    }
    MultimodalContext {
        past_actions,
        instruction_ids: instruction_ids.to_vec(),
        past_frames,
        proprio: prop,
    }
}

/// Loop state for a context, by either source. Returns the greedy trace
/// when reasoning ran (the reasoning-free source skips decoding entirely).
pub fn loop_state(
    model: &Model,
    z_source: ZSource,
    ctx: &MultimodalContext,
) -> Result<(Mat, Option<GreedyOut>)> {
    let h: Mat = match z_source {
        ZSource::CotEot => {
            let g = greedy_decode(
                &model.store,
                &model.eids,
                &model.bids,
                &model.bcfg,
                ctx,
                &model.wcfg,
            )?;
            let h = g.h_eot.clone();
            return Ok((project_z(model, &h), Some(g)));
        }
        ZSource::LastContext => {
            let mut tape = Tape::new();
            let mut bound = Bound::new(&model.store);
            let v = encode_context(
                &mut tape,
                &model.store,
                &mut bound,
                &model.eids,
                &model.bids,
                &model.bcfg,
                ctx,
                &model.wcfg,
            )?;
            let hidden = tape.value(v);
            let last = hidden.nrows() - 1;
            hidden.row(last).insert_axis(ndarray::Axis(0)).to_owned()
        }
    };
    Ok((project_z(model, &h), None))
}

fn project_z(model: &Model, h: &Mat) -> Mat {
    let w = model.store.get(model.bids.p_phi.w);
    let b = model.store.get(model.bids.p_phi.b);
    h.dot(w) + b
}

impl Planner<'_> {
    fn horizon(&self, fallback: usize) -> usize {
        match self {
            Planner::Model { model, .. } => model.gcfg.horizon,
            Planner::Oracle => fallback,
        }
    }

    fn plan(
        &self,
        task: &Task,
        state: &WorldState,
        ctx: &MultimodalContext,
        noise_seed: u64,
        h: usize,
    ) -> Result<Plan> {
        match self {
            Planner::Model {
                model,
                z_source,
                vocab,
            } => {
                let (z, greedy) = loop_state(model, *z_source, ctx)?;
                let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                let fut = sample_future(
                    &model.store,
                    &model.eids,
                    &model.gids,
                    &model.gcfg,
                    &z,
                    &ctx.past_frames,
                    &mut rng,
                )?;
                let (cot_ids, cot, cot_truncated) = match greedy {
                    Some(g) => {
                        let text = vocab.detokenize(&g.trace);
                        (g.trace, text, g.truncated)
                    }
                    None => (Vec::new(), String::new(), false),
                };
                Ok(Plan {
                    cot_ids,
                    cot,
                    cot_truncated,
                    imagined_frames: fut.frames,
                    planned_actions: fut.actions,
                })
            }
            Planner::Oracle => {
                // Lookahead imagination: simulate the controller forward H
                // steps; imagined frames are renders of those states, so
                // alignment over executed steps is exactly zero.
                let mut sim = state.clone();
                let mut frames = Vec::with_capacity(h);
                let mut actions = Vec::with_capacity(h);
                for _ in 0..h {
                    let a = if task.done(&sim) {
                        Action::ZERO_OPEN
                    } else {
                        oracle_policy(task, &sim)?.quantized()
                    };
                    sim = step(&sim, a);
                    frames.push(render(&sim));
                    actions.push(a);
                }
                Ok(Plan {
                    cot_ids: Vec::new(),
                    cot: format!("{} <act> {}", task.video_cot(), task.action_cot()),
                    cot_truncated: false,
                    imagined_frames: frames,
                    planned_actions: actions,
                })
            }
        }
    }
}

/// Receding-horizon closed loop: plan H steps, execute the first k, replan
/// from the new observation; stop on the world's success predicate or at
/// `max_steps`. Planning faults (non-finite decodes) abort with a partial
/// record carrying the fault text.
pub fn rollout(
    planner: &Planner<'_>,
    task_id: &str,
    seed: u64,
    h: usize,
    k: usize,
    max_steps: usize,
) -> Result<RolloutRecord> {
    if k == 0 || k > h {
        return Err(Error::Config(format!(
            "replan stride must satisfy 1 ≤ k ≤ H (got k={k}, H={h})"
        )));
    }
    if h != planner.horizon(h) {
        return Err(Error::Config(format!(
            "model plans a fixed horizon of {} steps, asked for {h}",
            planner.horizon(h)
        )));
    }
    let task = Task::parse(task_id)?;
    let (w, instruction_ids) = match planner {
        Planner::Model { model, vocab, .. } => {
            let ids = data::fit_ids(vocab.tokenize(&task.instruction()), model.wcfg.instr_len);
            (model.wcfg, ids)
        }
        Planner::Oracle => (WindowConfig::default(), Vec::new()),
    };

    let mut state = canonical_start(&task, seed)?;
    let mut frames = vec![render(&state)];
    let mut proprio = vec![quantize_proprio(state.proprio())];
    let mut actions: Vec<Action> = Vec::new();

    let mut record = RolloutRecord {
        task_id: task_id.to_string(),
        seed,
        replans: Vec::new(),
        realized_frames: Vec::new(),
        success: task.done(&state),
        steps_used: 0,
        transition_failure: false,
        alignment: Vec::new(),
        fault: None,
    };

    while !record.success && record.steps_used < max_steps {
        let replan_idx = record.replans.len();
        let ctx = live_context(&instruction_ids, &frames, &proprio, &actions, &w);
        let noise_seed = plan_noise_seed(task_id, seed, replan_idx);
        let plan = match planner.plan(&task, &state, &ctx, noise_seed, h) {
            Ok(p) => p,
            Err(e @ (Error::Format(_) | Error::NonFinite { .. })) => {
                record.fault = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };

        let mut executed = Vec::with_capacity(k);
        for j in 0..k {
            if record.success || record.steps_used >= max_steps {
                break;
            }
            let a = plan.planned_actions[j].quantized();
            state = step(&state, a);
            frames.push(render(&state));
            proprio.push(quantize_proprio(state.proprio()));
            actions.push(a);
            executed.push(a);
            record.steps_used += 1;
            record.success = task.done(&state);
        }

        // Imagined frame j predicts the frame after executed step j.
        let base = frames.len() - executed.len();
        let mse = executed
            .iter()
            .enumerate()
            .map(|(j, _)| frame_mse(&plan.imagined_frames[j], &frames[base + j]))
            .sum::<f64>()
            / executed.len().max(1) as f64;
        record.alignment.push(mse);
        record.replans.push(ReplanRecord {
            step: record.steps_used - executed.len(),
            cot_ids: plan.cot_ids,
            cot: plan.cot,
            cot_truncated: plan.cot_truncated,
            imagined_frames: plan.imagined_frames,
            planned_actions: plan.planned_actions,
            executed_actions: executed,
        });
    }

    record.transition_failure = !record.success && task.failed_at_transition(&state);
    record.realized_frames = frames;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Protocols.

/// What the evaluated checkpoint was trained on; the material for leak
/// guards. Stored in checkpoint metadata and re-read at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProvenance {
    pub task_ids: Vec<String>,
    pub seeds: Vec<u64>,
}

impl TrainProvenance {
    pub fn from_refs(refs: &[EpisodeRef]) -> TrainProvenance {
        let task_ids: BTreeSet<String> = refs.iter().map(|r| r.task_id.clone()).collect();
        let seeds: BTreeSet<u64> = refs.iter().map(|r| r.seed).collect();
        TrainProvenance {
            task_ids: task_ids.into_iter().collect(),
            seeds: seeds.into_iter().collect(),
        }
    }

    pub fn to_meta(&self, meta: &mut serde_json::Map<String, serde_json::Value>) {
        meta.insert(
            "train_provenance".into(),
            serde_json::to_value(self).expect("provenance serializes"),
        );
    }

    pub fn from_meta(meta: &serde_json::Map<String, serde_json::Value>) -> Result<TrainProvenance> {
        let v = meta.get("train_provenance").ok_or_else(|| {
            Error::Refused("checkpoint records no training provenance; cannot verify splits".into())
        })?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub protocol: String,
    pub task_id: String,
    pub seeds: Vec<u64>,
    pub successes: Vec<bool>,
    pub success_rate: f64,
    /// 95% bootstrap interval over the per-seed success flags.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Fraction of seeds that completed the first phase but not the second.
    pub transition_failure_fraction: f64,
    /// Absent when every rollout faulted before executing a step.
    pub mean_alignment: Option<f64>,
    pub config_hash: String,
}

/// Percentile bootstrap CI for a success rate. Deterministic under `seed`.
pub fn bootstrap_ci(successes: &[bool], resamples: usize, seed: u64) -> (f64, f64) {
    assert!(!successes.is_empty() && resamples > 0);
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = successes.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let hits = (0..n).filter(|_| successes[rng.gen_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite rates"));
    let low = means[(resamples as f64 * 0.025) as usize];
    let high = means[((resamples as f64 * 0.975) as usize).min(resamples - 1)];
    (low, high)
}

pub struct ProtocolSpec {
    pub protocol: String,
    pub task_id: String,
    pub seeds: Vec<u64>,
    pub h: usize,
    pub k: usize,
    pub max_steps: usize,
    pub config_hash: String,
}

/// Runs one rollout per seed after machine-checking the leak guards: the
/// evaluated task must be absent from training, and eval seeds must be
/// disjoint from training seeds.
pub fn run_protocol(
    planner: &Planner<'_>,
    spec: &ProtocolSpec,
    provenance: &TrainProvenance,
) -> Result<(ProtocolResult, Vec<RolloutRecord>)> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("protocol needs at least one seed".into()));
    }
    if provenance.task_ids.iter().any(|t| t == &spec.task_id) {
        return Err(Error::Refused(format!(
            "task `{}` appears in the training data; held-out evaluation is impossible",
            spec.task_id
        )));
    }
    let train_seeds: BTreeSet<u64> = provenance.seeds.iter().copied().collect();
    if let Some(s) = spec.seeds.iter().find(|s| train_seeds.contains(s)) {
        return Err(Error::Refused(format!(
            "eval seed {s} overlaps the training seeds"
        )));
    }

    let mut records = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        records.push(rollout(
            planner,
            &spec.task_id,
            seed,
            spec.h,
            spec.k,
            spec.max_steps,
        )?);
    }
    let successes: Vec<bool> = records.iter().map(|r| r.success).collect();
    let rate = successes.iter().filter(|&&s| s).count() as f64 / successes.len() as f64;
    let (ci_low, ci_high) = bootstrap_ci(&successes, 1000, scene_stream_seed(&spec.task_id, 0));
    let transition = records.iter().filter(|r| r.transition_failure).count() as f64
        / records.len() as f64;
    let aligns: Vec<f64> = records
        .iter()
        .filter_map(|r| imagination_alignment(r).ok())
        .collect();
    let mean_alignment = if aligns.is_empty() {
        None
    } else {
        Some(aligns.iter().sum::<f64>() / aligns.len() as f64)
    };
    Ok((
        ProtocolResult {
            protocol: spec.protocol.clone(),
            task_id: spec.task_id.clone(),
            seeds: spec.seeds.clone(),
            successes,
            success_rate: rate,
            ci_low,
            ci_high,
            transition_failure_fraction: transition,
            mean_alignment,
            config_hash: spec.config_hash.clone(),
        },
        records,
    ))
}

/// Composed-instruction protocol: additionally requires the eval task to be
/// composed and every training task atomic.
pub fn run_compositional(
    planner: &Planner<'_>,
    spec: &ProtocolSpec,
    provenance: &TrainProvenance,
) -> Result<(ProtocolResult, Vec<RolloutRecord>)> {
    if !Task::parse(&spec.task_id)?.is_composed() {
        return Err(Error::Config(format!(
            "`{}` is not a composed task",
            spec.task_id
        )));
    }
    for t in &provenance.task_ids {
        if Task::parse(t)?.is_composed() {
            return Err(Error::Refused(format!(
                "training data contains composed task `{t}`; compositional protocol is void"
            )));
        }
    }
    run_protocol(planner, spec, provenance)
}

/// Zero-shot protocol over an unseen task family (atomic or composed).
pub fn run_zero_shot(
    planner: &Planner<'_>,
    spec: &ProtocolSpec,
    provenance: &TrainProvenance,
) -> Result<(ProtocolResult, Vec<RolloutRecord>)> {
    run_protocol(planner, spec, provenance)
}

// ---------------------------------------------------------------------------
// Ablations.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Action loss only: no text, no video.
    ActionOnly,
    /// Loop state read from the last context row; reasoning never decoded.
    NoCot,
    /// Video loss disabled, text and action kept.
    NoVideoLoss,
    /// The full unified objective.
    FullUnified,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [
            Variant::ActionOnly,
            Variant::NoCot,
            Variant::NoVideoLoss,
            Variant::FullUnified,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ActionOnly => "action_only",
            Variant::NoCot => "no_cot",
            Variant::NoVideoLoss => "no_video_loss",
            Variant::FullUnified => "full_unified",
        }
    }

    /// Applies the ablation to the base hyperparameters. Budgets (steps,
    /// batch size, learning rate) are never touched.
    pub fn apply(self, base: TrainHyper) -> TrainHyper {
        let mut h = base;
        match self {
            Variant::ActionOnly => {
                h.lambda_text = 0.0;
                h.lambda_video = 0.0;
            }
            Variant::NoCot => h.z_source = ZSource::LastContext,
            Variant::NoVideoLoss => h.lambda_video = 0.0,
            Variant::FullUnified => {}
        }
        h
    }
}

/// One training-and-evaluation job shared by every ablation variant.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub bcfg: crate::backbone::BackboneConfig,
    pub gcfg: crate::generator::GenConfig,
    pub wcfg: WindowConfig,
    pub base_hyper: TrainHyper,
    pub split: SplitConfig,
    pub sample_stride: usize,
    pub model_seed: u64,
    pub train_seed: u64,
    pub eval_seeds: Vec<u64>,
    pub k: usize,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub transition_failure_fraction: f64,
    pub mean_alignment: Option<f64>,
    pub config_hash: String,
}

/// Every effective parameter of one ablation variant, as sorted key/value
/// text; the config hash is the digest of this map.
pub fn variant_params(cfg: &AblationConfig, variant: Variant) -> BTreeMap<String, String> {
    let h = variant.apply(cfg.base_hyper);
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("backbone.layers", cfg.bcfg.layers.to_string());
    put("backbone.width", cfg.bcfg.width.to_string());
    put("backbone.heads", cfg.bcfg.heads.to_string());
    put("backbone.d_z", cfg.bcfg.d_z.to_string());
    put("backbone.max_cot", cfg.bcfg.max_cot.to_string());
    put("backbone.vocab_size", cfg.bcfg.vocab_size.to_string());
    put("gen.layers", cfg.gcfg.layers.to_string());
    put("gen.width", cfg.gcfg.width.to_string());
    put("gen.heads", cfg.gcfg.heads.to_string());
    put("gen.n_steps", cfg.gcfg.n_steps.to_string());
    put("gen.prefix_groups", cfg.gcfg.prefix_groups.to_string());
    put("gen.future_groups", cfg.gcfg.future_groups.to_string());
    put("window.k_a", cfg.wcfg.k_a.to_string());
    put("window.k_o", cfg.wcfg.k_o.to_string());
    put("window.horizon", cfg.wcfg.horizon.to_string());
    put("window.instr_len", cfg.wcfg.instr_len.to_string());
    put("hyper.lambda_text", format!("{}", h.lambda_text));
    put("hyper.lambda_video", format!("{}", h.lambda_video));
    put("hyper.lambda_action", format!("{}", h.lambda_action));
    put("hyper.lr", format!("{}", h.lr));
    put("hyper.clip", format!("{}", h.clip));
    put("hyper.batch_size", h.batch_size.to_string());
    put("hyper.total_steps", h.total_steps.to_string());
    put("hyper.z_source", format!("{:?}", h.z_source));
    put("data.task_a", cfg.split.task_a.clone());
    put("data.task_b", cfg.split.task_b.clone());
    put("data.train_per_task", cfg.split.train_per_task.to_string());
    put("data.sample_stride", cfg.sample_stride.to_string());
    put("seeds.model", cfg.model_seed.to_string());
    put("seeds.train", cfg.train_seed.to_string());
    put(
        "eval.seeds",
        cfg.eval_seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    put("eval.k", cfg.k.to_string());
    put("eval.max_steps", cfg.max_steps.to_string());
    m
}

/// SHA-256 over the sorted `key=value` lines.
pub fn hash_params(params: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in params {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds the training sample set an ablation run trains on.
fn ablation_samples(cfg: &AblationConfig, vocab: &Vocabulary) -> Result<(Vec<data::TrainingSample>, Splits)> {
    let splits = crate::world::splits::make_splits(&cfg.split)?;
    splits.assert_no_leak()?;
    let mut samples = Vec::new();
    for r in splits.train_atomic_a.iter().chain(&splits.train_atomic_b) {
        let ep = generate_episode(&r.task_id, r.seed)?;
        samples.extend(data::episode_samples(&ep, cfg.sample_stride, &cfg.wcfg, vocab)?);
    }
    Ok((samples, splits))
}

/// Trains one variant from scratch and evaluates it on the composed task.
/// Returns the row plus the trained model for reuse (AC experiments compare
/// variants directly).
pub fn run_variant(
    cfg: &AblationConfig,
    variant: Variant,
    vocab: &Vocabulary,
) -> Result<(AblationRow, Trainer)> {
    let hyper = variant.apply(cfg.base_hyper);
    let base = cfg.base_hyper;
    if hyper.total_steps != base.total_steps
        || hyper.batch_size != base.batch_size
        || hyper.lr != base.lr
    {
        return Err(Error::Config(format!(
            "variant {} changed the training budget",
            variant.name()
        )));
    }
    let (samples, splits) = ablation_samples(cfg, vocab)?;
    let model = Model::new(cfg.bcfg, cfg.gcfg, cfg.wcfg, cfg.model_seed);
    let mut trainer = Trainer::new(model, hyper, cfg.train_seed);
    trainer.run(&samples, hyper.total_steps, 0, |_| Ok(()), |_| Ok(()))?;

    let provenance = TrainProvenance::from_refs(
        &splits
            .train_atomic_a
            .iter()
            .chain(&splits.train_atomic_b)
            .cloned()
            .collect::<Vec<_>>(),
    );
    let composed = format!("{}+{}", cfg.split.task_a, cfg.split.task_b);
    let spec = ProtocolSpec {
        protocol: format!("compositional/{}", variant.name()),
        task_id: composed,
        seeds: cfg.eval_seeds.clone(),
        h: cfg.gcfg.horizon,
        k: cfg.k,
        max_steps: cfg.max_steps,
        config_hash: hash_params(&variant_params(cfg, variant)),
    };
    let planner = Planner::Model {
        model: &trainer.model,
        z_source: hyper.z_source,
        vocab,
    };
    let (result, _records) = run_compositional(&planner, &spec, &provenance)?;
    let row = AblationRow {
        variant: variant.name().to_string(),
        success_rate: result.success_rate,
        ci_low: result.ci_low,
        ci_high: result.ci_high,
        transition_failure_fraction: result.transition_failure_fraction,
        mean_alignment: result.mean_alignment,
        config_hash: spec.config_hash,
    };
    Ok((row, trainer))
}

/// The four-variant table: identical budgets, shared data and eval seeds.
pub fn run_ablations(cfg: &AblationConfig, vocab: &Vocabulary) -> Result<Vec<AblationRow>> {
    Variant::all()
        .into_iter()
        .map(|v| run_variant(cfg, v, vocab).map(|(row, _)| row))
        .collect()
}

// ---------------------------------------------------------------------------
// Reports.

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// CSV column contracts, documented next to the writer that enforces them.
pub const RESULTS_CSV_HEADER: &str =
    "protocol,task_id,n_seeds,success_rate,ci_low,ci_high,transition_failure_fraction,mean_alignment,config_hash";
pub const ABLATIONS_CSV_HEADER: &str =
    "variant,success_rate,ci_low,ci_high,transition_failure_fraction,mean_alignment,config_hash";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub results: Vec<ProtocolResult>,
    pub ablations: Vec<AblationRow>,
}

impl Report {
    pub fn new(results: Vec<ProtocolResult>, ablations: Vec<AblationRow>) -> Report {
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            results,
            ablations,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `report.json`, `results.csv`, `ablations.csv` (when present) and
/// `success_rates.png` into `dir`; returns every path written.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_vec_pretty(report)?)?;
    written.push(json_path);

    let csv_path = dir.join("results.csv");
    let mut csv = String::from(RESULTS_CSV_HEADER);
    csv.push('\n');
    for r in &report.results {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.protocol,
            r.task_id,
            r.seeds.len(),
            r.success_rate,
            r.ci_low,
            r.ci_high,
            r.transition_failure_fraction,
            fmt_opt(r.mean_alignment),
            r.config_hash
        ));
    }
    std::fs::write(&csv_path, csv)?;
    written.push(csv_path);

    if !report.ablations.is_empty() {
        let path = dir.join("ablations.csv");
        let mut csv = String::from(ABLATIONS_CSV_HEADER);
        csv.push('\n');
        for r in &report.ablations {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.variant,
                r.success_rate,
                r.ci_low,
                r.ci_high,
                r.transition_failure_fraction,
                fmt_opt(r.mean_alignment),
                r.config_hash
            ));
        }
        std::fs::write(&path, csv)?;
        written.push(path);
    }

    let png_path = dir.join("success_rates.png");
    let bars: Vec<(String, f64, f64, f64)> = report
        .results
        .iter()
        .map(|r| (r.protocol.clone(), r.success_rate, r.ci_low, r.ci_high))
        .chain(
            report
                .ablations
                .iter()
                .map(|r| (r.variant.clone(), r.success_rate, r.ci_low, r.ci_high)),
        )
        .collect();
    write_bar_chart(&bars, &png_path)?;
    written.push(png_path);
    Ok(written)
}

/// Bare-metal bar chart: one bar per entry with a CI whisker, dark on
/// light, no text (labels live in the CSV next to it).
fn write_bar_chart(bars: &[(String, f64, f64, f64)], path: &Path) -> Result<()> {
    let (wbar, gap, height, margin) = (48u32, 16u32, 240u32, 12u32);
    let width = margin * 2 + bars.len().max(1) as u32 * (wbar + gap);
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([245, 245, 245]));
    let plot_h = (height - 2 * margin) as f64;
    let y_of = |v: f64| (height - margin) as i64 - (v.clamp(0.0, 1.0) * plot_h) as i64;

    for (i, (_, rate, lo, hi)) in bars.iter().enumerate() {
        let x0 = margin as i64 + i as i64 * (wbar + gap) as i64;
        for x in x0..x0 + wbar as i64 {
            for y in y_of(*rate)..=(height - margin) as i64 {
                img.put_pixel(x as u32, y as u32, image::Rgb([70, 110, 180]));
            }
        }
        // CI whisker down the bar's center line.
        let cx = (x0 + wbar as i64 / 2) as u32;
        for y in y_of(*hi)..=y_of(*lo) {
            img.put_pixel(cx, y as u32, image::Rgb([30, 30, 30]));
        }
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Imagination probes used by the acceptance experiments.

/// Mean squared error between the model's imagined future frames and the
/// ground-truth future of a held-out sample. With `conditioned` the video
/// is denoised under the true action chunk (world-model probe); without,
/// the model plans its own actions jointly.
pub fn imagined_future_mse(
    model: &Model,
    z_source: ZSource,
    sample: &data::TrainingSample,
    conditioned: bool,
    noise_seed: u64,
) -> Result<f64> {
    let (z, _) = loop_state(model, z_source, &sample.context)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let frames = if conditioned {
        sample_future_action_conditioned(
            &model.store,
            &model.eids,
            &model.gids,
            &model.gcfg,
            &z,
            &sample.context.past_frames,
            &sample.future_actions,
            &mut rng,
        )?
    } else {
        sample_future(
            &model.store,
            &model.eids,
            &model.gids,
            &model.gcfg,
            &z,
            &sample.context.past_frames,
            &mut rng,
        )?
        .frames
    };
    let n = frames.len();
    Ok(frames
        .iter()
        .zip(&sample.future_frames)
        .map(|(a, b)| frame_mse(a, b))
        .sum::<f64>()
        / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::generator::GenConfig;
    use crate::world::tasks::{
        TASK_COMPOSED_SEEN, TASK_INSERT_SEEN, TASK_INSERT_UNSEEN, TASK_PRESS_SEEN,
    };
    use rand::Rng;

    fn tiny_model(seed: u64) -> (Model, Vocabulary) {
        let vocab = Vocabulary::build();
        let w = WindowConfig::default();
        let bcfg = BackboneConfig {
            layers: 2,
            width: 32,
            heads: 2,
            d_z: 16,
            max_cot: 64,
            vocab_size: vocab.len(),
        };
        let gcfg = GenConfig {
            layers: 2,
            width: 32,
            heads: 2,
            d_z: 16,
            n_steps: 2,
            prefix_groups: 1,
            future_groups: 4,
            horizon: 8,
        };
        (Model::new(bcfg, gcfg, w, seed), vocab)
    }

    fn oracle_provenance() -> TrainProvenance {
        TrainProvenance {
            task_ids: vec![TASK_INSERT_SEEN.into(), TASK_PRESS_SEEN.into()],
            seeds: (10_000..10_010).collect(),
        }
    }

    #[test]
    fn oracle_rollout_succeeds_with_exact_imagination() {
        let rec = rollout(&Planner::Oracle, TASK_INSERT_SEEN, 3, 8, 4, 96).unwrap();
        assert!(rec.success);
        assert!(rec.fault.is_none());
        assert!(rec.steps_used <= 96);
        assert_eq!(rec.realized_frames.len(), rec.steps_used + 1);
        for a in &rec.alignment {
            assert_eq!(*a, 0.0, "lookahead imagination must match execution");
        }
        for r in &rec.replans {
            assert!(r.executed_actions.len() <= 4);
            assert_eq!(r.planned_actions.len(), 8);
            assert_eq!(r.imagined_frames.len(), 8);
        }
        assert_eq!(imagination_alignment(&rec).unwrap(), 0.0);
    }

    #[test]
    fn oracle_chains_both_phases_of_a_composed_task() {
        let rec = rollout(&Planner::Oracle, TASK_COMPOSED_SEEN, 11, 8, 4, 96).unwrap();
        assert!(rec.success, "oracle must finish composed tasks");
        assert!(!rec.transition_failure);
    }

    #[test]
    fn full_stride_gives_ceil_steps_over_h_replans() {
        let rec = rollout(&Planner::Oracle, TASK_PRESS_SEEN, 5, 8, 8, 96).unwrap();
        assert!(rec.success);
        let expect = rec.steps_used.div_ceil(8);
        assert_eq!(rec.replans.len(), expect);
    }

    #[test]
    fn stride_longer_than_horizon_is_rejected() {
        match rollout(&Planner::Oracle, TASK_PRESS_SEEN, 5, 8, 9, 96) {
            Err(Error::Config(_)) => {}
            other => panic!("expected Config error, got {other:?}"),
        }
        assert!(rollout(&Planner::Oracle, TASK_PRESS_SEEN, 5, 8, 0, 96).is_err());
    }

    #[test]
    fn alignment_zero_iff_frames_identical() {
        let a = Frame::filled([10, 20, 30]);
        let mut b = a.clone();
        assert_eq!(frame_mse(&a, &b), 0.0);
        b.pixels[0] = 11;
        assert!(frame_mse(&a, &b) > 0.0);
    }

    #[test]
    fn noise_alignment_matches_analytic_expectation() {
        // Uniform-noise imagination vs a real frame: E[(U-p)²] per pixel is
        // 1/12 + (1/2 - p)², U uniform on [0,1].
        let ep = generate_episode(TASK_INSERT_SEEN, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut empirical = 0.0;
        let mut analytic = 0.0;
        for f in &ep.frames {
            let mut noise = Frame::filled([0, 0, 0]);
            for px in noise.pixels.iter_mut() {
                *px = rng.gen_range(0..=255u8);
            }
            empirical += frame_mse(&noise, f);
            analytic += f
                .pixels
                .iter()
                .map(|&p| {
                    let p = p as f64 / 255.0;
                    1.0 / 12.0 + (0.5 - p) * (0.5 - p)
                })
                .sum::<f64>()
                / FRAME_LEN as f64;
        }
        empirical /= ep.frames.len() as f64;
        analytic /= ep.frames.len() as f64;
        assert!(
            (empirical - analytic).abs() < 0.01,
            "empirical {empirical} vs analytic {analytic}"
        );
    }

    #[test]
    fn live_context_matches_offline_builder() {
        let vocab = Vocabulary::build();
        let w = WindowConfig::default();
        let ep = generate_episode(TASK_INSERT_SEEN, 7).unwrap();
        let instr = data::fit_ids(vocab.tokenize(&ep.instruction), w.instr_len);
        for t in [0usize, 1, 4] {
            let offline = data::build_context(&ep, t, &w, &vocab).unwrap();
            let live = live_context(
                &instr,
                &ep.frames[..=t],
                &ep.proprio[..=t],
                &ep.actions[..t],
                &w,
            );
            assert_eq!(offline, live, "context diverges at t={t}");
        }
    }

    #[test]
    fn untrained_model_rollout_is_deterministic_and_well_formed() {
        let (model, vocab) = tiny_model(3);
        let planner = Planner::Model {
            model: &model,
            z_source: ZSource::CotEot,
            vocab: &vocab,
        };
        let rec1 = rollout(&planner, TASK_PRESS_SEEN, 42, 8, 4, 8).unwrap();
        let rec2 = rollout(&planner, TASK_PRESS_SEEN, 42, 8, 4, 8).unwrap();
        assert_eq!(rec1, rec2, "same checkpoint, task, seed must replay");
        assert!(rec1.steps_used <= 8);
        assert_eq!(rec1.replans.len(), 2);
        for r in &rec1.replans {
            assert_eq!(r.executed_actions.len(), 4);
            assert_eq!(r.imagined_frames.len(), 8);
            assert!(!r.cot_ids.is_empty());
        }
        // Untrained plans wander; alignment must still be finite and positive.
        for a in &rec1.alignment {
            assert!(a.is_finite() && *a >= 0.0);
        }
    }

    #[test]
    fn reasoning_free_planner_skips_the_trace() {
        let (model, vocab) = tiny_model(4);
        let planner = Planner::Model {
            model: &model,
            z_source: ZSource::LastContext,
            vocab: &vocab,
        };
        let rec = rollout(&planner, TASK_PRESS_SEEN, 42, 8, 4, 4).unwrap();
        for r in &rec.replans {
            assert!(r.cot_ids.is_empty());
            assert!(r.cot.is_empty());
        }
    }

    #[test]
    fn wrong_horizon_for_model_is_a_config_error() {
        let (model, vocab) = tiny_model(5);
        let planner = Planner::Model {
            model: &model,
            z_source: ZSource::CotEot,
            vocab: &vocab,
        };
        assert!(matches!(
            rollout(&planner, TASK_PRESS_SEEN, 1, 16, 4, 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn protocol_refuses_training_leaks() {
        let prov = oracle_provenance();
        let mut spec = ProtocolSpec {
            protocol: "compositional".into(),
            task_id: TASK_COMPOSED_SEEN.into(),
            seeds: vec![500_000, 500_001],
            h: 8,
            k: 4,
            max_steps: 64,
            config_hash: "t".into(),
        };
        // Seed overlap.
        spec.seeds = vec![10_003];
        assert!(matches!(
            run_compositional(&Planner::Oracle, &spec, &prov),
            Err(Error::Refused(_))
        ));
        // Task leak.
        spec.seeds = vec![500_000];
        spec.task_id = TASK_INSERT_SEEN.into();
        assert!(matches!(
            run_protocol(&Planner::Oracle, &spec, &prov),
            Err(Error::Refused(_))
        ));
        // Composed task in training data voids the compositional protocol.
        spec.task_id = TASK_COMPOSED_SEEN.into();
        let mut dirty = prov.clone();
        dirty.task_ids.push(TASK_COMPOSED_SEEN.into());
        assert!(matches!(
            run_compositional(&Planner::Oracle, &spec, &dirty),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn oracle_protocol_scores_full_marks() {
        let spec = ProtocolSpec {
            protocol: "compositional".into(),
            task_id: TASK_COMPOSED_SEEN.into(),
            seeds: (500_000..500_005).collect(),
            h: 8,
            k: 4,
            max_steps: 128,
            config_hash: "oracle".into(),
        };
        let (res, records) =
            run_compositional(&Planner::Oracle, &spec, &oracle_provenance()).unwrap();
        assert_eq!(res.success_rate, 1.0);
        assert_eq!(res.ci_low, 1.0);
        assert_eq!(res.ci_high, 1.0);
        assert_eq!(res.transition_failure_fraction, 0.0);
        assert_eq!(res.mean_alignment, Some(0.0));
        assert_eq!(records.len(), 5);
    }

    #[test]
    fn bootstrap_interval_brackets_the_rate() {
        let flags = [true, true, true, false, true, false, true, true];
        let (lo, hi) = bootstrap_ci(&flags, 1000, 7);
        let rate = 6.0 / 8.0;
        assert!(lo <= rate && rate <= hi);
        assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        assert_eq!(bootstrap_ci(&flags, 1000, 7), (lo, hi), "deterministic");
        assert_eq!(bootstrap_ci(&[true, true], 500, 1), (1.0, 1.0));
    }

    #[test]
    fn unified_and_action_only_hashes_differ_only_in_lambdas() {
        let (model, _) = tiny_model(1);
        let cfg = AblationConfig {
            bcfg: model.bcfg,
            gcfg: model.gcfg,
            wcfg: model.wcfg,
            base_hyper: TrainHyper::default(),
            split: SplitConfig {
                train_per_task: 2,
                eval_unseen_per_task: 0,
                unseen_tasks: vec![],
                ..SplitConfig::default()
            },
            sample_stride: 4,
            model_seed: 1,
            train_seed: 2,
            eval_seeds: vec![500_000, 500_001],
            k: 4,
            max_steps: 16,
        };
        let full = variant_params(&cfg, Variant::FullUnified);
        let action_only = variant_params(&cfg, Variant::ActionOnly);
        let differing: Vec<&String> = full
            .iter()
            .filter(|(k, v)| action_only.get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        assert_eq!(
            differing,
            vec!["hyper.lambda_text", "hyper.lambda_video"],
            "ablation must differ only in loss weights"
        );
        assert_ne!(
            hash_params(&full),
            hash_params(&action_only),
            "hashes must separate the variants"
        );
        let no_cot = variant_params(&cfg, Variant::NoCot);
        let diff_b: Vec<&String> = full
            .iter()
            .filter(|(k, v)| no_cot.get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        assert_eq!(diff_b, vec!["hyper.z_source"]);
    }

    #[test]
    fn tiny_ablation_table_runs_end_to_end() {
        let vocab = Vocabulary::build();
        let w = WindowConfig::default();
        let bcfg = BackboneConfig {
            layers: 1,
            width: 32,
            heads: 2,
            d_z: 16,
            max_cot: 64,
            vocab_size: vocab.len(),
        };
        let gcfg = GenConfig {
            layers: 1,
            width: 32,
            heads: 2,
            d_z: 16,
            n_steps: 1,
            prefix_groups: 1,
            future_groups: 4,
            horizon: 8,
        };
        let mut hyper = TrainHyper::default();
        hyper.total_steps = 2;
        hyper.batch_size = 2;
        let cfg = AblationConfig {
            bcfg,
            gcfg,
            wcfg: w,
            base_hyper: hyper,
            split: SplitConfig {
                train_per_task: 1,
                eval_unseen_per_task: 0,
                unseen_tasks: vec![],
                ..SplitConfig::default()
            },
            sample_stride: 4,
            model_seed: 3,
            train_seed: 4,
            eval_seeds: vec![500_000],
            k: 4,
            max_steps: 8,
        };
        let rows = run_ablations(&cfg, &vocab).unwrap();
        assert_eq!(rows.len(), 4);
        let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(
            names,
            ["action_only", "no_cot", "no_video_loss", "full_unified"]
        );
        let hashes: BTreeSet<&String> = rows.iter().map(|r| &r.config_hash).collect();
        assert_eq!(hashes.len(), 4, "each variant has its own config hash");
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let result = ProtocolResult {
            protocol: "zero_shot".into(),
            task_id: TASK_INSERT_UNSEEN.into(),
            seeds: vec![600_000, 600_001],
            successes: vec![true, false],
            success_rate: 0.5,
            ci_low: 0.0,
            ci_high: 1.0,
            transition_failure_fraction: 0.0,
            mean_alignment: Some(0.25),
            config_hash: "abc".into(),
        };
        let row = AblationRow {
            variant: "full_unified".into(),
            success_rate: 0.5,
            ci_low: 0.0,
            ci_high: 1.0,
            transition_failure_fraction: 0.0,
            mean_alignment: Some(0.1),
            config_hash: "def".into(),
        };
        let report = Report::new(vec![result], vec![row]);
        let written = emit_report(&report, dir.path()).unwrap();
        assert_eq!(written.len(), 4);

        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let csv = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap(), RESULTS_CSV_HEADER);

        let png = std::fs::read(dir.path().join("success_rates.png")).unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    }

    #[test]
    fn imagination_probe_runs_both_conditioned_and_free() {
        let (model, vocab) = tiny_model(6);
        let ep = generate_episode(TASK_INSERT_SEEN, 7).unwrap();
        let sample = data::build_sample(&ep, 0, &model.wcfg, &vocab).unwrap();
        let free = imagined_future_mse(&model, ZSource::CotEot, &sample, false, 11).unwrap();
        let cond = imagined_future_mse(&model, ZSource::CotEot, &sample, true, 11).unwrap();
        assert!(free.is_finite() && free > 0.0);
        assert!(cond.is_finite() && cond > 0.0);
    }
}
