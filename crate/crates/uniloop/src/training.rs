//! Joint training: one computation graph per sample (reasoning pass → loop
//! state → generation pass), a three-part objective with per-element mean
//! reductions, Adam with cosine decay and norm clipping, finite-difference
//! gradient verification, and a bit-reproducible single-file checkpoint.

use crate::backbone::{self, BackboneConfig, BackboneIds};
use crate::data::{self, TrainingBatch, TrainingSample, WindowConfig};
use crate::embed::{self, EmbedderIds, D_A, D_V};
use crate::generator::{self, FutureMasks, GenConfig, GenIds};
use crate::tape::{Bound, Grads, Mat, ParamStore, Tape, Var};
use crate::world::Frame;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Where the loop state is read from: the trace terminator (default) or the
/// last context position (the reasoning-free ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZSource {
    CotEot,
    LastContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lambda_text: f64,
    pub lambda_video: f64,
    pub lambda_action: f64,
    pub lr: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub z_source: ZSource,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lambda_text: 1.0,
            lambda_video: 1.0,
            lambda_action: 1.0,
            lr: 3e-4,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            total_steps: 1000,
            z_source: ZSource::CotEot,
        }
    }
}

/// The full parameter set plus structural configuration. Embedder
/// parameters are registered once and referenced by both networks.
pub struct Model {
    pub store: ParamStore,
    pub eids: EmbedderIds,
    pub bids: BackboneIds,
    pub gids: GenIds,
    pub bcfg: BackboneConfig,
    pub gcfg: GenConfig,
    pub wcfg: WindowConfig,
}

impl Model {
    /// Registration order is fixed (embedders, backbone, generator) so
    /// parameter ids are stable across runs and checkpoint loads.
    pub fn new(bcfg: BackboneConfig, gcfg: GenConfig, wcfg: WindowConfig, seed: u64) -> Model {
        assert_eq!(
            bcfg.width, gcfg.width,
            "shared embedders require equal backbone/generator width"
        );
        assert_eq!(bcfg.d_z, gcfg.d_z, "loop-state width mismatch");
        assert_eq!(gcfg.horizon, wcfg.horizon, "future horizon mismatch");
        assert_eq!(
            gcfg.prefix_groups * embed::TEMPORAL_GROUP,
            wcfg.k_o,
            "generator prefix must cover the observation window"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let eids = embed::register_embedders(&mut store, bcfg.width, &mut rng);
        let bids = backbone::register_backbone(&mut store, &bcfg, &wcfg, &mut rng);
        let gids = generator::register_generator(&mut store, &gcfg, &mut rng);
        Model {
            store,
            eids,
            bids,
            gids,
            bcfg,
            gcfg,
            wcfg,
        }
    }

    pub fn masks(&self) -> FutureMasks {
        FutureMasks::for_config(&self.gcfg)
    }
}

/// Per-step loss summary. `total` is computed from the reported means by
/// the λ-weighted identity, so the decomposition holds exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub total: f64,
    pub text: f64,
    pub video: f64,
    pub action: f64,
    pub text_tokens: usize,
    pub video_elems: usize,
    pub action_elems: usize,
    pub grad_norm: f64,
    pub lr: f64,
    pub warnings: Vec<String>,
}

/// Pre-drawn per-sample noise, in a fixed serial order (s, video noise,
/// action noise per sample) so training is reproducible.
pub struct BatchNoise {
    pub draws: Vec<(f64, Mat, Mat)>,
}

pub fn draw_batch_noise(gcfg: &GenConfig, n: usize, rng: &mut ChaCha8Rng) -> BatchNoise {
    let draws = (0..n)
        .map(|_| {
            let s: f64 = rng.gen_range(0.0..1.0);
            let eps_v = crate::nn::gaussian_mat(rng, gcfg.video_rows(), D_V, 1.0);
            let eps_a = crate::nn::gaussian_mat(rng, gcfg.horizon, D_A, 1.0);
            (s, eps_v, eps_a)
        })
        .collect();
    BatchNoise { draws }
}

/// Batch-level denominators for per-token / per-element means.
struct Denoms {
    text_tokens: usize,
    video_elems: usize,
    action_elems: usize,
}

fn denominators(batch: &TrainingBatch, gcfg: &GenConfig) -> Denoms {
    let text_tokens = batch
        .samples
        .iter()
        .flat_map(|s| &s.cot_ids)
        .filter(|&&t| t != data::PAD)
        .count();
    let masks = FutureMasks::for_config(gcfg);
    let video_elems = batch.samples.len() * masks.n_future_rows() * D_V;
    let action_elems = batch
        .samples
        .iter()
        .flat_map(|s| &s.action_valid)
        .filter(|&&v| v)
        .count()
        * D_A;
    Denoms {
        text_tokens,
        video_elems,
        action_elems,
    }
}

struct SampleTerms {
    tape: Tape,
    root: Var,
    nll_sum: f64,
    sq_sum: f64,
    sl1_sum: f64,
}

/// Builds the whole per-sample graph: teacher-forced reasoning, loop-state
/// projection, joint velocity prediction, and the three loss terms scaled
/// by λ/denominator so summing roots over the batch gives the total.
#[allow(clippy::too_many_arguments)]
fn sample_graph(
    model: &Model,
    hyper: &TrainHyper,
    sample: &TrainingSample,
    s: f64,
    eps_v: &Mat,
    eps_a: &Mat,
    denoms: &Denoms,
    masks: &FutureMasks,
) -> Result<SampleTerms> {
    let mut tape = Tape::new();
    let mut bound = Bound::new(&model.store);

    let tf = backbone::teacher_forced(
        &mut tape,
        &model.store,
        &mut bound,
        &model.eids,
        &model.bids,
        &model.bcfg,
        &sample.context,
        &model.wcfg,
        &sample.cot_ids,
    )?;
    let h = match hyper.z_source {
        ZSource::CotEot => tf.h_eot,
        ZSource::LastContext => {
            let c = data::ModalityLayout::context(&model.wcfg).total_len();
            tape.slice_rows(tf.hidden, c - 1, 1)
        }
    };
    let z = backbone::project_loop_state(&mut tape, &model.store, &mut bound, &model.bids, h);

    // Clean targets: the full video window (prefix ++ future) and the
    // normalized action chunk.
    let mut window: Vec<Frame> = sample.context.past_frames.clone();
    window.extend(sample.future_frames.iter().cloned());
    let x_v = embed::encode_video(&window)?.tokens;
    let x_a = embed::normalize_actions(&sample.future_actions);

    let xs_v = generator::noise_video(&x_v, eps_v, s, masks);
    let xs_a = generator::noise_action(&x_a, eps_a, s);
    let u_v = generator::video_velocity_target(&x_v, eps_v, masks);
    let u_a = generator::action_velocity_target(&x_a, eps_a);

    let xs_v_in = tape.input(xs_v);
    let xs_a_in = tape.input(xs_a);
    let (uv_hat, ua_hat) = generator::predict_velocity(
        &mut tape,
        &model.store,
        &mut bound,
        &model.eids,
        &model.gids,
        &model.gcfg,
        z,
        xs_v_in,
        xs_a_in,
        s,
        None,
    )?;

    let sq_var = tape.masked_sq_err(uv_hat, &u_v, &masks.future_full(), 1.0);
    let m_a = Mat::from_shape_fn((model.gcfg.horizon, D_A), |(i, _)| {
        if sample.action_valid[i] {
            1.0
        } else {
            0.0
        }
    });
    let sl1_var = tape.masked_smooth_l1(ua_hat, &u_a, &m_a, 1.0, SMOOTH_L1_BETA);

    let mut parts = Vec::new();
    if hyper.lambda_text != 0.0 && denoms.text_tokens > 0 {
        parts.push(tape.scale(tf.nll_sum, hyper.lambda_text / denoms.text_tokens as f64));
    }
    if hyper.lambda_video != 0.0 {
        parts.push(tape.scale(sq_var, hyper.lambda_video / denoms.video_elems as f64));
    }
    if hyper.lambda_action != 0.0 && denoms.action_elems > 0 {
        parts.push(tape.scale(sl1_var, hyper.lambda_action / denoms.action_elems as f64));
    }
    let root = match parts.len() {
        0 => tape.input(Mat::zeros((1, 1))),
        1 => parts[0],
        _ => {
            let mut acc = parts[0];
            for p in &parts[1..] {
                acc = tape.add(acc, *p);
            }
            acc
        }
    };

    Ok(SampleTerms {
        nll_sum: tape.scalar(tf.nll_sum),
        sq_sum: tape.scalar(sq_var),
        sl1_sum: tape.scalar(sl1_var),
        tape,
        root,
    })
}

/// Forward+backward over a batch. Gradients are exact sums over samples;
/// the report carries per-token / per-element means and the λ-weighted
/// total computed from them.
pub fn total_loss(
    model: &Model,
    hyper: &TrainHyper,
    batch: &TrainingBatch,
    noise: &BatchNoise,
    step: usize,
) -> Result<(LossReport, Grads)> {
    assert_eq!(batch.samples.len(), noise.draws.len(), "noise/batch mismatch");
    let masks = model.masks();
    let denoms = denominators(batch, &model.gcfg);
    let mut grads = Grads::zeros(&model.store);
    let mut nll = 0.0;
    let mut sq = 0.0;
    let mut sl1 = 0.0;
    let mut bad: Vec<usize> = Vec::new();

    for (i, (sample, (s, eps_v, eps_a))) in
        batch.samples.iter().zip(&noise.draws).enumerate()
    {
        let terms = sample_graph(model, hyper, sample, *s, eps_v, eps_a, &denoms, &masks)?;
        if !(terms.nll_sum.is_finite() && terms.sq_sum.is_finite() && terms.sl1_sum.is_finite())
        {
            bad.push(i);
            continue;
        }
        nll += terms.nll_sum;
        sq += terms.sq_sum;
        sl1 += terms.sl1_sum;
        let adj = terms.tape.backward(terms.root);
        adj.accumulate_params(&terms.tape, 1.0, &mut grads);
    }
    if !bad.is_empty() {
        return Err(Error::NonFinite { step, batch: bad });
    }

    let mut warnings = Vec::new();
    let text = if denoms.text_tokens > 0 {
        nll / denoms.text_tokens as f64
    } else {
        warnings.push("no chain-of-thought tokens in batch; text loss reported as 0".into());
        0.0
    };
    let video = sq / denoms.video_elems as f64;
    let action = if denoms.action_elems > 0 {
        sl1 / denoms.action_elems as f64
    } else {
        warnings.push("action mask empty across batch; action loss reported as 0".into());
        0.0
    };
    let total =
        hyper.lambda_text * text + hyper.lambda_video * video + hyper.lambda_action * action;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            step,
            batch: (0..batch.samples.len()).collect(),
        });
    }
    Ok((
        LossReport {
            step,
            total,
            text,
            video,
            action,
            text_tokens: denoms.text_tokens,
            video_elems: denoms.video_elems,
            action_elems: denoms.action_elems,
            grad_norm: 0.0,
            lr: 0.0,
            warnings,
        },
        grads,
    ))
}

/// Forward-only total, for finite-difference checks.
pub fn total_loss_value(
    model: &Model,
    hyper: &TrainHyper,
    batch: &TrainingBatch,
    noise: &BatchNoise,
) -> Result<f64> {
    let masks = model.masks();
    let denoms = denominators(batch, &model.gcfg);
    let mut total = 0.0;
    for (sample, (s, eps_v, eps_a)) in batch.samples.iter().zip(&noise.draws) {
        let terms = sample_graph(model, hyper, sample, *s, eps_v, eps_a, &denoms, &masks)?;
        total += terms.tape.scalar(terms.root);
    }
    Ok(total)
}

/// Cosine decay from the base rate to zero across the step budget.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam first/second moment buffers, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let m = store.ids().map(|id| Mat::zeros(store.get(id).dim())).collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &Grads,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.dense(store, id);
            let k = id.index();
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| {
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            });
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// Owns the model, optimizer state, and the rng that drives shuffling and
/// noise; everything needed to resume a run bit-identically.
pub struct Trainer {
    pub model: Model,
    pub hyper: TrainHyper,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: Model, hyper: TrainHyper, train_seed: u64) -> Trainer {
        let adam = AdamState::new(&model.store);
        Trainer {
            model,
            hyper,
            adam,
            rng: ChaCha8Rng::seed_from_u64(train_seed),
            step: 0,
        }
    }

    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<LossReport> {
        let noise = draw_batch_noise(&self.model.gcfg, batch.samples.len(), &mut self.rng);
        let (mut report, mut grads) = total_loss(&self.model, &self.hyper, batch, &noise, self.step)?;
        let norm = grads.global_norm();
        report.grad_norm = norm;
        if norm > self.hyper.clip && norm > 0.0 {
            grads.scale(self.hyper.clip / norm);
        }
        let lr = cosine_lr(self.hyper.lr, self.step, self.hyper.total_steps);
        report.lr = lr;
        self.adam.apply(
            &mut self.model.store,
            &grads,
            lr,
            self.hyper.beta1,
            self.hyper.beta2,
            self.hyper.adam_eps,
        );
        self.step += 1;
        Ok(report)
    }

    /// Uniformly shuffled epochs over the sample set until the step budget
    /// is exhausted. `on_step` sees every report; `on_eval` runs every
    /// `eval_every` steps (0 disables) on the current parameter snapshot.
    pub fn run<F, G>(
        &mut self,
        samples: &[TrainingSample],
        steps: usize,
        eval_every: usize,
        mut on_step: F,
        mut on_eval: G,
    ) -> Result<()>
    where
        F: FnMut(&LossReport) -> Result<()>,
        G: FnMut(&Trainer) -> Result<()>,
    {
        if samples.is_empty() {
            return Err(Error::User("no training samples".into()));
        }
        let bs = self.hyper.batch_size.max(1);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut cursor = order.len(); // force shuffle on first use
        let mut done = 0;
        while done < steps {
            if cursor + bs > order.len() {
                order.shuffle(&mut self.rng);
                cursor = 0;
            }
            let chunk: Vec<TrainingSample> = order[cursor..(cursor + bs).min(order.len())]
                .iter()
                .map(|&i| samples[i].clone())
                .collect();
            cursor += bs;
            let batch = data::collate(chunk, &self.model.wcfg)?;
            let report = self.train_step(&batch)?;
            on_step(&report)?;
            done += 1;
            if eval_every > 0 && done % eval_every == 0 {
                on_eval(self)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoint: magic, version, JSON header, then f64 little-endian blobs for
// every named parameter followed by Adam moments in the same order.

const CKPT_MAGIC: &[u8; 4] = b"ULC1";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    step: usize,
    hyper: TrainHyper,
    bcfg: BackboneConfig,
    gcfg: GenConfig,
    wcfg: WindowCfgSer,
    adam_t: u64,
    rng: ChaCha8Rng,
    params: Vec<CkptParam>,
    /// Arbitrary run metadata (resolved config, dataset hashes, task list).
    #[serde(default)]
    meta: serde_json::Map<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    rows: usize,
    cols: usize,
}

/// WindowConfig mirror so the chosen windows travel with the weights.
#[derive(Serialize, Deserialize, Clone, Copy)]
struct WindowCfgSer {
    k_a: usize,
    k_o: usize,
    horizon: usize,
    instr_len: usize,
}

impl From<WindowConfig> for WindowCfgSer {
    fn from(w: WindowConfig) -> Self {
        WindowCfgSer {
            k_a: w.k_a,
            k_o: w.k_o,
            horizon: w.horizon,
            instr_len: w.instr_len,
        }
    }
}

impl From<WindowCfgSer> for WindowConfig {
    fn from(w: WindowCfgSer) -> Self {
        WindowConfig {
            k_a: w.k_a,
            k_o: w.k_o,
            horizon: w.horizon,
            instr_len: w.instr_len,
        }
    }
}

fn write_mat(out: &mut impl Write, m: &Mat) -> Result<()> {
    for v in m.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_mat(inp: &mut impl Read, rows: usize, cols: usize) -> Result<Mat> {
    let mut buf = vec![0u8; rows * cols * 8];
    inp.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Mat::from_shape_vec((rows, cols), vals)
        .map_err(|e| Error::Format(format!("checkpoint array shape: {e}")))
}

pub fn save_checkpoint(
    trainer: &Trainer,
    meta: serde_json::Map<String, serde_json::Value>,
    path: &std::path::Path,
) -> Result<()> {
    let store = &trainer.model.store;
    let params: Vec<CkptParam> = store
        .ids()
        .map(|id| {
            let (rows, cols) = store.get(id).dim();
            CkptParam {
                name: store.name(id).to_string(),
                rows,
                cols,
            }
        })
        .collect();
    let header = CkptHeader {
        version: CKPT_VERSION,
        step: trainer.step,
        hyper: trainer.hyper,
        bcfg: trainer.model.bcfg,
        gcfg: trainer.model.gcfg,
        wcfg: trainer.model.wcfg.into(),
        adam_t: trainer.adam.t,
        rng: trainer.rng.clone(),
        params,
        meta,
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&CKPT_VERSION.to_le_bytes())?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    for id in store.ids() {
        write_mat(&mut out, store.get(id))?;
    }
    for m in &trainer.adam.m {
        write_mat(&mut out, m)?;
    }
    for v in &trainer.adam.v {
        write_mat(&mut out, v)?;
    }
    out.flush()?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub trainer: Trainer,
    pub meta: serde_json::Map<String, serde_json::Value>,
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<LoadedCheckpoint> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut ver = [0u8; 4];
    inp.read_exact(&mut ver)?;
    if u32::from_le_bytes(ver) != CKPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            u32::from_le_bytes(ver)
        )));
    }
    let mut len = [0u8; 8];
    inp.read_exact(&mut len)?;
    let mut header_json = vec![0u8; u64::from_le_bytes(len) as usize];
    inp.read_exact(&mut header_json)?;
    let header: CkptHeader = serde_json::from_slice(&header_json)?;

    // Rebuild the structure, then overwrite every tensor by name; the init
    // draw is discarded.
    let mut model = Model::new(header.bcfg, header.gcfg, header.wcfg.into(), 0);
    if model.store.len() != header.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model defines {}",
            header.params.len(),
            model.store.len()
        )));
    }
    for p in &header.params {
        let id = model.store.id(&p.name).ok_or_else(|| {
            Error::Format(format!("checkpoint tensor `{}` unknown to this model", p.name))
        })?;
        let expect = model.store.get(id).dim();
        if expect != (p.rows, p.cols) {
            return Err(Error::Format(format!(
                "tensor `{}`: checkpoint shape ({}, {}) vs model {:?}",
                p.name, p.rows, p.cols, expect
            )));
        }
        *model.store.get_mut(id) = read_mat(&mut inp, p.rows, p.cols)?;
    }
    let mut adam = AdamState::new(&model.store);
    adam.t = header.adam_t;
    for slot in adam.m.iter_mut() {
        *slot = read_mat(&mut inp, slot.nrows(), slot.ncols())?;
    }
    for slot in adam.v.iter_mut() {
        *slot = read_mat(&mut inp, slot.nrows(), slot.ncols())?;
    }
    let trainer = Trainer {
        model,
        hyper: header.hyper,
        adam,
        rng: header.rng,
        step: header.step,
    };
    Ok(LoadedCheckpoint {
        trainer,
        meta: header.meta,
    })
}

/// Describes a checkpoint from its header alone — the parameter blobs are
/// never read, so this is cheap even for large files.
pub fn checkpoint_header_summary(path: &std::path::Path) -> Result<serde_json::Value> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    inp.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut ver = [0u8; 4];
    inp.read_exact(&mut ver)?;
    let mut len = [0u8; 8];
    inp.read_exact(&mut len)?;
    let mut header_json = vec![0u8; u64::from_le_bytes(len) as usize];
    inp.read_exact(&mut header_json)?;
    let header: CkptHeader = serde_json::from_slice(&header_json)?;
    let scalars: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
    Ok(serde_json::json!({
        "version": header.version,
        "step": header.step,
        "hyper": header.hyper,
        "backbone": header.bcfg,
        "generator": header.gcfg,
        "window": header.wcfg,
        "adam_t": header.adam_t,
        "tensors": header.params.len(),
        "scalars": scalars,
        "meta": header.meta,
    }))
}

// ---------------------------------------------------------------------------
// Gradient verification.

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().fold(0.0, |m, g| m.max(g.max_rel_err))
    }
}

fn group_of(name: &str) -> String {
    name.split('.').next().unwrap_or("other").to_string()
}

/// Central finite differences against the analytic gradient on up to
/// `max_per_group` randomly sampled scalars per parameter group.
pub fn check_gradients(
    model: &mut Model,
    hyper: &TrainHyper,
    batch: &TrainingBatch,
    fd_eps: f64,
    max_per_group: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = draw_batch_noise(&model.gcfg, batch.samples.len(), &mut rng);
    let (_, grads) = total_loss(model, hyper, batch, &noise, 0)?;

    let mut by_group: std::collections::BTreeMap<String, Vec<(crate::tape::ParamId, usize, usize)>> =
        Default::default();
    for id in model.store.ids() {
        let name = model.store.name(id).to_string();
        let (rows, cols) = model.store.get(id).dim();
        let entry = by_group.entry(group_of(&name)).or_default();
        for r in 0..rows {
            for c in 0..cols {
                entry.push((id, r, c));
            }
        }
    }

    let mut groups = Vec::new();
    for (group, mut scalars) in by_group {
        scalars.shuffle(&mut rng);
        scalars.truncate(max_per_group);
        let mut max_rel = 0.0f64;
        let mut worst = String::new();
        let checked = scalars.len();
        for (id, r, c) in scalars {
            let orig = model.store.get(id)[(r, c)];
            model.store.get_mut(id)[(r, c)] = orig + fd_eps;
            let plus = total_loss_value(model, hyper, batch, &noise)?;
            model.store.get_mut(id)[(r, c)] = orig - fd_eps;
            let minus = total_loss_value(model, hyper, batch, &noise)?;
            model.store.get_mut(id)[(r, c)] = orig;
            let fd = (plus - minus) / (2.0 * fd_eps);
            let analytic = grads.dense(&model.store, id)[(r, c)];
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{r},{c}]", model.store.name(id));
            }
        }
        groups.push(GroupCheck {
            group,
            checked,
            max_rel_err: max_rel,
            worst_param: worst,
        });
    }
    Ok(GradCheckReport { groups })
}

/// Largest absolute gradient entry for the named tensor (0 if untouched).
pub fn max_abs_grad(store: &ParamStore, grads: &Grads, name: &str) -> f64 {
    let id = store.id(name).expect("known parameter");
    grads
        .get(id)
        .map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .unwrap_or(0.0)
}

/// True when every tensor whose name starts with `prefix` has an exactly
/// zero (or absent) gradient.
pub fn prefix_grad_is_zero(store: &ParamStore, grads: &Grads, prefix: &str) -> bool {
    store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .all(|id| match grads.get(id) {
            None => true,
            Some(g) => g.iter().all(|&v| v == 0.0),
        })
}
