//! Tokenizer, multimodal context assembly, future-window extraction, and
//! batching. Everything here is a pure function of the episode contents.

use crate::world::episode::Episode;
use crate::world::tasks::{Task, ALL_TASK_IDS};
use crate::world::{Action, Frame};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const VOCAB_SCHEMA_VERSION: u32 = 1;
pub const MAX_VOCAB: usize = 512;

/// Reserved token ids. The word list starts right after the last special.
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// End-of-thought: terminates every chain-of-thought and is where the loop
/// state is read off.
pub const EOT: u32 = 3;
pub const UNK: u32 = 4;
pub const TAG_VID: u32 = 5;
pub const TAG_ACT: u32 = 6;
pub const TAG_TXT: u32 = 7;
pub const TAG_STA: u32 = 8;

const SPECIALS: [(&str, u32); 9] = [
    ("<pad>", PAD),
    ("<bos>", BOS),
    ("<eos>", EOS),
    ("<eot>", EOT),
    ("<unk>", UNK),
    ("<vid>", TAG_VID),
    ("<act>", TAG_ACT),
    ("<txt>", TAG_TXT),
    ("<sta>", TAG_STA),
];

/// Whitespace-normalized lowercase word tokenizer over the template
/// vocabulary; everything off-template maps to UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds the vocabulary from every template string any known task can
    /// produce, so generated corpora never contain UNK.
    pub fn build() -> Vocabulary {
        let mut set = std::collections::BTreeSet::new();
        for id in ALL_TASK_IDS {
            let t = Task::parse(id).expect("registry task parses");
            for text in [t.instruction(), t.video_cot(), t.action_cot()] {
                for w in normalize(&text).split_whitespace() {
                    set.insert(w.to_string());
                }
            }
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|(s, _)| s.to_string()).collect();
        words.extend(set);
        assert!(words.len() <= MAX_VOCAB, "vocabulary exceeds size bound");
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or("<unk>")
    }

    /// `[BOS, word ids…, EOS]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(normalize(text).split_whitespace().map(|w| self.id(w)));
        ids.push(EOS);
        ids
    }

    /// Joins word tokens with single spaces, dropping BOS/EOS/PAD framing.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != BOS && id != EOS && id != PAD)
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Chain-of-thought target: `<vid> …scene clause… <act> …motor clause…
    /// <eot>`, the exact sequence teacher forcing trains on.
    pub fn cot_target(&self, video_cot: &str, action_cot: &str) -> Vec<u32> {
        let mut ids = vec![TAG_VID];
        ids.extend(normalize(video_cot).split_whitespace().map(|w| self.id(w)));
        ids.push(TAG_ACT);
        ids.extend(normalize(action_cot).split_whitespace().map(|w| self.id(w)));
        ids.push(EOT);
        ids
    }

    /// JSON list, index = id, wrapped with a schema version.
    pub fn to_json(&self) -> String {
        let doc = VocabDoc {
            schema_version: VOCAB_SCHEMA_VERSION,
            tokens: self.words.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Vocabulary> {
        let doc: VocabDoc = serde_json::from_str(json)?;
        if doc.schema_version != VOCAB_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported vocabulary schema_version {}",
                doc.schema_version
            )));
        }
        for (i, (word, id)) in SPECIALS.iter().enumerate() {
            if doc.tokens.get(i).map(|s| s.as_str()) != Some(*word) {
                return Err(Error::Format(format!(
                    "special token {id} must be `{word}` at index {i}"
                )));
            }
        }
        let index: BTreeMap<String, u32> = doc
            .tokens
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        if index.len() != doc.tokens.len() {
            return Err(Error::Format("vocabulary has duplicate tokens".into()));
        }
        Ok(Vocabulary {
            words: doc.tokens,
            index,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct VocabDoc {
    schema_version: u32,
    tokens: Vec<String>,
}

pub fn normalize(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Everything the policy sees at step t: `(a_<t, l, o_≤t, s_≤t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalContext {
    /// Last `k_a` actions before t, zero rows where history is short.
    pub past_actions: Vec<[f64; 3]>,
    /// Instruction padded/truncated to the fixed instruction length.
    pub instruction_ids: Vec<u32>,
    /// Last `k_o` frames ending at step t, zero frames where short.
    pub past_frames: Vec<Frame>,
    /// Proprio triples aligned with `past_frames`.
    pub proprio: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    pub k_a: usize,
    pub k_o: usize,
    pub horizon: usize,
    pub instr_len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            k_a: 4,
            k_o: 2,
            horizon: 8,
            instr_len: 16,
        }
    }
}

/// Pads or truncates token ids to exactly `len`, PAD on the right.
pub fn fit_ids(mut ids: Vec<u32>, len: usize) -> Vec<u32> {
    ids.truncate(len);
    while ids.len() < len {
        ids.push(PAD);
    }
    ids
}

/// Assembles the context at step t. Frames and proprio windows end at t
/// inclusive; the action window is strictly before t.
pub fn build_context(
    ep: &Episode,
    t: usize,
    w: &WindowConfig,
    vocab: &Vocabulary,
) -> Result<MultimodalContext> {
    // Effective step count; equals len(actions) except for video-only
    // episodes, where the frame sequence still defines valid steps.
    let n = ep.frames.len().saturating_sub(1);
    if t >= n {
        return Err(Error::User(format!(
            "context step {t} out of range for episode with {n} steps"
        )));
    }

    let mut past_actions = Vec::with_capacity(w.k_a);
    for i in 0..w.k_a {
        // Window covers steps t-k_a .. t-1.
        let idx = t as i64 - w.k_a as i64 + i as i64;
        if idx >= 0 && (idx as usize) < ep.actions.len() {
            let a = ep.actions[idx as usize];
            past_actions.push([a.dx, a.dy, a.grip]);
        } else {
            past_actions.push([0.0, 0.0, 0.0]);
        }
    }

    let mut past_frames = Vec::with_capacity(w.k_o);
    let mut proprio = Vec::with_capacity(w.k_o);
    for i in 0..w.k_o {
        // Window covers steps t-k_o+1 ..= t.
        let idx = t as i64 - w.k_o as i64 + 1 + i as i64;
        if idx >= 0 {
            past_frames.push(ep.frames[idx as usize].clone());
            proprio.push(ep.proprio[idx as usize]);
        } else {
            past_frames.push(Frame::filled([0, 0, 0]));
            proprio.push([0.0, 0.0, 0.0]);
        }
    }

    Ok(MultimodalContext {
        past_actions,
        instruction_ids: fit_ids(vocab.tokenize(&ep.instruction), w.instr_len),
        past_frames,
        proprio,
    })
}

/// One teacher-forcing sample: context at t plus the H-step future.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub context: MultimodalContext,
    pub cot_ids: Vec<u32>,
    /// Frames at steps t+1 ..= t+H; repeats the terminal frame past the end.
    pub future_frames: Vec<Frame>,
    /// Actions at steps t ..= t+H-1 (raw units), zero rows past the end.
    pub future_actions: Vec<Action>,
    /// True exactly on rows of `future_actions` that exist in the episode.
    pub action_valid: Vec<bool>,
    pub task_id: String,
    pub seed: u64,
    pub t: usize,
}

/// Extracts the sample at step t. Futures shorter than H are padded by
/// holding the last frame and masking the missing action rows out of M_a.
pub fn build_sample(
    ep: &Episode,
    t: usize,
    w: &WindowConfig,
    vocab: &Vocabulary,
) -> Result<TrainingSample> {
    let context = build_context(ep, t, w, vocab)?;
    let n = ep.actions.len();
    let video_only = ep.is_video_only();

    let mut future_frames = Vec::with_capacity(w.horizon);
    let mut future_actions = Vec::with_capacity(w.horizon);
    let mut action_valid = Vec::with_capacity(w.horizon);
    for j in 0..w.horizon {
        let fidx = (t + 1 + j).min(ep.frames.len() - 1);
        future_frames.push(ep.frames[fidx].clone());
        let aidx = t + j;
        if !video_only && aidx < n {
            future_actions.push(ep.actions[aidx]);
            action_valid.push(true);
        } else {
            future_actions.push(Action::ZERO_OPEN);
            action_valid.push(false);
        }
    }

    Ok(TrainingSample {
        context,
        cot_ids: vocab.cot_target(&ep.video_cot, &ep.action_cot),
        future_frames,
        future_actions,
        action_valid,
        task_id: ep.task_id.clone(),
        seed: ep.seed,
        t,
    })
}

/// All samples of an episode at the given stride of t.
pub fn episode_samples(
    ep: &Episode,
    stride: usize,
    w: &WindowConfig,
    vocab: &Vocabulary,
) -> Result<Vec<TrainingSample>> {
    assert!(stride > 0);
    let n = if ep.is_video_only() {
        ep.frames.len() - 1
    } else {
        ep.actions.len()
    };
    (0..n)
        .step_by(stride)
        .map(|t| build_sample(ep, t, w, vocab))
        .collect()
}

/// A batch is a checked, CoT-padded list of samples sharing one layout.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub samples: Vec<TrainingSample>,
    /// Common padded CoT length.
    pub cot_len: usize,
}

/// Validates shared window shapes and pads CoT targets to the batch max.
pub fn collate(mut samples: Vec<TrainingSample>, w: &WindowConfig) -> Result<TrainingBatch> {
    if samples.is_empty() {
        return Err(Error::User("cannot collate an empty batch".into()));
    }
    for s in &samples {
        let ok = s.context.past_actions.len() == w.k_a
            && s.context.past_frames.len() == w.k_o
            && s.context.proprio.len() == w.k_o
            && s.context.instruction_ids.len() == w.instr_len
            && s.future_frames.len() == w.horizon
            && s.future_actions.len() == w.horizon
            && s.action_valid.len() == w.horizon;
        if !ok {
            return Err(Error::Shape {
                context: "collate".into(),
                expected: format!("windows (k_a={}, k_o={}, H={})", w.k_a, w.k_o, w.horizon),
                got: format!(
                    "(k_a={}, k_o={}, H={})",
                    s.context.past_actions.len(),
                    s.context.past_frames.len(),
                    s.future_frames.len()
                ),
            });
        }
    }
    let cot_len = samples.iter().map(|s| s.cot_ids.len()).max().unwrap();
    for s in &mut samples {
        while s.cot_ids.len() < cot_len {
            s.cot_ids.push(PAD);
        }
    }
    Ok(TrainingBatch { samples, cot_len })
}

impl TrainingBatch {
    /// (B, H, 32, 32, 3) — documented layout of stacked future frames.
    pub fn future_frame_shape(&self, w: &WindowConfig) -> (usize, usize, usize, usize, usize) {
        (self.samples.len(), w.horizon, 32, 32, 3)
    }

    /// (B, H, 3) — documented layout of stacked future actions.
    pub fn future_action_shape(&self, w: &WindowConfig) -> (usize, usize, usize) {
        (self.samples.len(), w.horizon, 3)
    }
}

/// Where each modality sits in the backbone's context token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    TagVid,
    Video,
    TagSta,
    Proprio,
    TagTxt,
    Text,
    TagAct,
    PastActions,
}

/// Contiguous, non-overlapping segments covering the context sequence.
/// A pure function of the window configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityLayout {
    pub segments: Vec<(Modality, usize, usize)>,
}

pub use crate::embed::{PATCHES_PER_GROUP, TEMPORAL_GROUP};

impl ModalityLayout {
    pub fn context(w: &WindowConfig) -> ModalityLayout {
        assert!(
            w.k_o % TEMPORAL_GROUP == 0,
            "k_o must be a multiple of the temporal group"
        );
        let video_tokens = (w.k_o / TEMPORAL_GROUP) * PATCHES_PER_GROUP;
        let mut segments = Vec::new();
        let mut at = 0;
        let mut push = |m: Modality, len: usize, at: &mut usize| {
            segments.push((m, *at, len));
            *at += len;
        };
        push(Modality::TagVid, 1, &mut at);
        push(Modality::Video, video_tokens, &mut at);
        push(Modality::TagSta, 1, &mut at);
        push(Modality::Proprio, w.k_o, &mut at);
        push(Modality::TagTxt, 1, &mut at);
        push(Modality::Text, w.instr_len, &mut at);
        push(Modality::TagAct, 1, &mut at);
        push(Modality::PastActions, w.k_a, &mut at);
        ModalityLayout { segments }
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|(_, _, len)| len).sum()
    }

    pub fn segment(&self, m: Modality) -> (usize, usize) {
        self.segments
            .iter()
            .find(|(mm, _, _)| *mm == m)
            .map(|&(_, start, len)| (start, len))
            .expect("modality present")
    }

    /// Segments must be contiguous, non-overlapping, and covering.
    pub fn well_formed(&self) -> bool {
        let mut at = 0;
        for &(_, start, len) in &self.segments {
            if start != at {
                return false;
            }
            at += len;
        }
        at == self.total_len()
    }
}
