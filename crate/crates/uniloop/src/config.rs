//! Flat key=value run configuration.
//!
//! Resolution order is fixed: built-in defaults, then an optional config
//! file, then command-line overrides. Every key is documented in [`KEYS`];
//! anything else is rejected. The resolved map — every effective parameter,
//! defaults included — serializes to sorted text and hashes to a stable
//! digest that travels with checkpoints and reports.

use crate::eval::hash_params;
use crate::generator::GenConfig;
use crate::training::{TrainHyper, ZSource};
use crate::world::splits::SplitConfig;
use crate::{backbone::BackboneConfig, data::WindowConfig, embed::TEMPORAL_GROUP};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usize,
    U64,
    F64,
    Str,
    StrList,
    ZSource,
}

/// Every documented key: name, default, value kind, one-line help.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.layers", "4", "decoder blocks in the context/reasoning network"),
    ("model.width", "256", "hidden width shared by both networks"),
    ("model.heads", "4", "attention heads in the context/reasoning network"),
    ("model.d_z", "128", "loop-state width"),
    ("model.max_cot", "128", "reasoning-trace token budget"),
    ("gen.layers", "4", "blocks in the future generator"),
    ("gen.heads", "4", "attention heads in the future generator"),
    ("gen.n_steps", "10", "denoising steps when sampling futures"),
    ("window.k_o", "2", "observed past frames per context window"),
    ("window.k_a", "4", "past actions per context window"),
    ("window.horizon", "8", "future steps planned and denoised jointly"),
    ("window.instr_len", "16", "instruction token budget"),
    ("loss.lambda_text", "1", "weight on the reasoning-trace loss"),
    ("loss.lambda_video", "1", "weight on the future-video loss"),
    ("loss.lambda_action", "1", "weight on the future-action loss"),
    ("train.lr", "0.0003", "peak learning rate (cosine decay to zero)"),
    ("train.clip", "1", "global gradient-norm clip"),
    ("train.batch_size", "8", "samples per optimizer step"),
    ("train.total_steps", "1000", "optimizer steps"),
    ("train.eval_every", "0", "checkpoint snapshot interval; 0 disables"),
    ("train.z_source", "cot_eot", "loop-state read: cot_eot | last_context"),
    ("train.sample_stride", "4", "window stride when slicing episodes"),
    ("seed.model", "1", "parameter initialization seed"),
    ("seed.train", "2", "data order and noise seed"),
    ("data.task_a", "insert_red_blue", "first training task (atomic)"),
    ("data.task_b", "press_green", "second training task (atomic)"),
    ("data.train_per_task", "300", "training episodes per atomic task"),
    ("data.eval_composed", "50", "held-out composed-instruction episodes"),
    (
        "data.unseen_tasks",
        "insert_yellow_purple,press_orange,insert_yellow_purple+press_orange",
        "zero-shot task families, comma-separated",
    ),
    ("data.eval_unseen_per_task", "50", "held-out episodes per unseen task"),
    ("data.video_only_per_task", "0", "action-free co-training episodes per unseen atomic task"),
    ("eval.k", "4", "steps executed per replan"),
    ("eval.max_steps", "96", "environment step budget per rollout"),
    ("eval.limit", "0", "cap on eval episodes per protocol; 0 = all planned"),
];

fn kind_of(key: &str) -> Kind {
    match key {
        "train.lr" | "train.clip" | "loss.lambda_text" | "loss.lambda_video"
        | "loss.lambda_action" => Kind::F64,
        "seed.model" | "seed.train" => Kind::U64,
        "train.z_source" => Kind::ZSource,
        "data.task_a" | "data.task_b" => Kind::Str,
        "data.unseen_tasks" => Kind::StrList,
        _ => Kind::Usize,
    }
}

/// The resolved configuration: a complete map over [`KEYS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }
}

/// Splits one `key = value` line; `#` starts a comment, blank lines are
/// skipped. Returns `None` for lines with nothing on them.
fn parse_line(line: &str) -> Result<Option<(String, String)>> {
    let body = line.split('#').next().unwrap_or("").trim();
    if body.is_empty() {
        return Ok(None);
    }
    let (k, v) = body.split_once('=').ok_or_else(|| {
        Error::Config(format!("expected `key = value`, got `{}`", body))
    })?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

impl RunConfig {
    /// Defaults, then the file (if any), then overrides, then validation.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::User(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (i, line) in text.lines().enumerate() {
                let parsed = parse_line(line)
                    .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
                if let Some((k, v)) = parsed {
                    cfg.set(&k, &v)?;
                }
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key, rejecting unknown names and unparseable values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!(
                "unknown configuration key `{key}` (see `uniloop keys` for the full list)"
            )));
        }
        check_kind(key, value)?;
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| {
            panic!("`{key}` is not a documented configuration key")
        })
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated at set time")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated at set time")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated at set time")
    }

    pub fn z_source(&self) -> ZSource {
        match self.get("train.z_source") {
            "last_context" => ZSource::LastContext,
            _ => ZSource::CotEot,
        }
    }

    /// Cross-field checks beyond per-value parsing.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let k_o = self.usize("window.k_o");
        let h = self.usize("window.horizon");
        if k_o == 0 || k_o % TEMPORAL_GROUP != 0 {
            return fail(format!(
                "window.k_o must be a positive multiple of {TEMPORAL_GROUP}, got {k_o}"
            ));
        }
        if h == 0 || h % TEMPORAL_GROUP != 0 {
            return fail(format!(
                "window.horizon must be a positive multiple of {TEMPORAL_GROUP}, got {h}"
            ));
        }
        let width = self.usize("model.width");
        for heads_key in ["model.heads", "gen.heads"] {
            let heads = self.usize(heads_key);
            if heads == 0 || width % heads != 0 {
                return fail(format!(
                    "model.width {width} must divide evenly into {heads_key} = {heads}"
                ));
            }
        }
        let k = self.usize("eval.k");
        if k == 0 || k > h {
            return fail(format!("eval.k must satisfy 1 ≤ k ≤ window.horizon, got {k}"));
        }
        for key in ["model.layers", "gen.layers", "gen.n_steps", "model.d_z",
                    "train.batch_size", "train.total_steps", "window.instr_len",
                    "train.sample_stride", "eval.max_steps"] {
            if self.usize(key) == 0 {
                return fail(format!("{key} must be positive"));
            }
        }
        for key in ["train.lr", "train.clip"] {
            if self.f64(key) <= 0.0 {
                return fail(format!("{key} must be positive"));
            }
        }
        for key in ["loss.lambda_text", "loss.lambda_video", "loss.lambda_action"] {
            if self.f64(key) < 0.0 {
                return fail(format!("{key} must be non-negative"));
            }
        }
        Ok(())
    }

    // -- Typed views consumed by the rest of the crate. ---------------------

    pub fn backbone(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            layers: self.usize("model.layers"),
            width: self.usize("model.width"),
            heads: self.usize("model.heads"),
            d_z: self.usize("model.d_z"),
            max_cot: self.usize("model.max_cot"),
            vocab_size,
        }
    }

    /// Generator structure is derived: width and loop-state size are shared
    /// with the backbone, temporal groups follow the chosen windows.
    pub fn generator(&self) -> GenConfig {
        GenConfig {
            layers: self.usize("gen.layers"),
            width: self.usize("model.width"),
            heads: self.usize("gen.heads"),
            d_z: self.usize("model.d_z"),
            n_steps: self.usize("gen.n_steps"),
            prefix_groups: self.usize("window.k_o") / TEMPORAL_GROUP,
            future_groups: self.usize("window.horizon") / TEMPORAL_GROUP,
            horizon: self.usize("window.horizon"),
        }
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            k_a: self.usize("window.k_a"),
            k_o: self.usize("window.k_o"),
            horizon: self.usize("window.horizon"),
            instr_len: self.usize("window.instr_len"),
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            lambda_text: self.f64("loss.lambda_text"),
            lambda_video: self.f64("loss.lambda_video"),
            lambda_action: self.f64("loss.lambda_action"),
            lr: self.f64("train.lr"),
            clip: self.f64("train.clip"),
            batch_size: self.usize("train.batch_size"),
            total_steps: self.usize("train.total_steps"),
            z_source: self.z_source(),
            ..TrainHyper::default()
        }
    }

    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            task_a: self.get("data.task_a").to_string(),
            task_b: self.get("data.task_b").to_string(),
            train_per_task: self.usize("data.train_per_task"),
            eval_composed: self.usize("data.eval_composed"),
            unseen_tasks: self
                .get("data.unseen_tasks")
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            eval_unseen_per_task: self.usize("data.eval_unseen_per_task"),
            video_only_per_task: self.usize("data.video_only_per_task"),
        }
    }

    /// Digest over every effective parameter; any change to any key changes
    /// the hash.
    pub fn hash(&self) -> String {
        hash_params(&self.values)
    }

    /// Sorted `key = value` text, reloadable by [`RunConfig::resolve`].
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved run configuration\n");
        let _ = writeln!(out, "# hash {}", self.hash());
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run_config.txt");
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

fn check_kind(key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    let bad = |kind: &str| {
        Err(Error::Config(format!("{key}: `{value}` is not {kind}")))
    };
    match kind_of(key) {
        Kind::Usize => {
            if value.parse::<usize>().is_err() {
                return bad("a non-negative integer");
            }
        }
        Kind::U64 => {
            if value.parse::<u64>().is_err() {
                return bad("a non-negative integer");
            }
        }
        Kind::F64 => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => {}
            _ => return bad("a finite number"),
        },
        Kind::ZSource => {
            if !matches!(value, "cot_eot" | "last_context") {
                return bad("one of cot_eot | last_context");
            }
        }
        Kind::Str | Kind::StrList => {
            if value.is_empty() {
                return bad("a non-empty string");
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Model;
    use crate::world::splits::make_splits;

    #[test]
    fn defaults_cover_every_documented_key_and_validate() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.entries().count(), KEYS.len());
        cfg.validate().expect("defaults are self-consistent");
    }

    #[test]
    fn default_views_match_the_library_defaults() {
        let cfg = RunConfig::default();
        let vocab = crate::data::Vocabulary::build();
        assert_eq!(cfg.backbone(vocab.len()), BackboneConfig::default_for(vocab.len()));
        assert_eq!(cfg.generator(), GenConfig::default_for(128));
        assert_eq!(cfg.window(), WindowConfig::default());
        assert_eq!(cfg.hyper(), TrainHyper::default());
        let default_split = SplitConfig::default();
        let got = cfg.split();
        assert_eq!(got.task_a, default_split.task_a);
        assert_eq!(got.unseen_tasks, default_split.unseen_tasks);
        assert_eq!(got.train_per_task, default_split.train_per_task);
    }

    #[test]
    fn derived_model_structure_is_constructible() {
        let cfg = RunConfig::default();
        let vocab = crate::data::Vocabulary::build();
        // Constructor asserts the cross-network width/horizon contracts.
        let _ = Model::new(cfg.backbone(vocab.len()), cfg.generator(), cfg.window(), 0);
        make_splits(&cfg.split()).expect("default split plan is valid");
    }

    #[test]
    fn file_then_flag_resolution_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment line\n\nmodel.width = 64   # trailing comment\ntrain.lr=0.001\n",
        )
        .unwrap();
        let flags = vec![("train.lr".to_string(), "0.002".to_string())];
        let cfg = RunConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!(cfg.usize("model.width"), 64, "file overrides default");
        assert_eq!(cfg.f64("train.lr"), 0.002, "flag overrides file");
        assert_eq!(cfg.usize("model.layers"), 4, "untouched keys keep defaults");
    }

    #[test]
    fn unknown_key_and_bad_value_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("model.depth", "4").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "unknown key: {err}");
        let err = cfg.set("model.width", "wide").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "bad integer: {err}");
        let err = cfg.set("train.z_source", "oracle").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "bad enum: {err}");
        let err = cfg.set("train.lr", "NaN").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "non-finite float: {err}");
    }

    #[test]
    fn cross_field_validation_catches_inconsistency() {
        for (key, value) in [
            ("window.k_o", "3"),
            ("window.horizon", "5"),
            ("model.heads", "3"),
            ("eval.k", "9"),
            ("train.lr", "0"),
        ] {
            let mut cfg = RunConfig::default();
            cfg.set(key, value).unwrap();
            let err = cfg.validate().unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{key}: {err}");
        }
    }

    #[test]
    fn hash_changes_with_any_key_and_only_then() {
        let base = RunConfig::default().hash();
        assert_eq!(base, RunConfig::default().hash(), "hash is deterministic");
        for (key, _, _) in KEYS {
            let mut cfg = RunConfig::default();
            let bumped = match kind_of(key) {
                Kind::Usize | Kind::U64 => (cfg.u64(key) + 2).to_string(),
                Kind::F64 => format!("{}", cfg.f64(key) + 0.125),
                Kind::ZSource => "last_context".to_string(),
                Kind::Str => "press_orange".to_string(),
                Kind::StrList => "press_orange".to_string(),
            };
            cfg.set(key, &bumped).unwrap();
            assert_ne!(cfg.hash(), base, "changing {key} must change the hash");
        }
    }

    #[test]
    fn resolved_text_round_trips_through_resolve() {
        let mut cfg = RunConfig::default();
        cfg.set("model.width", "64").unwrap();
        cfg.set("train.z_source", "last_context").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = cfg.write_resolved(dir.path()).unwrap();
        let reloaded = RunConfig::resolve(Some(&path), &[]).unwrap();
        assert_eq!(reloaded, cfg);
        assert_eq!(reloaded.hash(), cfg.hash());
    }

    #[test]
    fn z_source_values_map_to_the_training_enum() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.z_source(), ZSource::CotEot);
        cfg.set("train.z_source", "last_context").unwrap();
        assert_eq!(cfg.z_source(), ZSource::LastContext);
    }
}
