//! Train/eval split planning and materialization to an episode store.
//!
//! Composed tasks are evaluation-only by construction, and the planner
//! rejects any configuration that would leak one into a training split.
//! Every split draws from its own disjoint seed range.

use super::episode::{generate_episode, save_episode};
use super::tasks::Task;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

/// Reference to one episode: enough to regenerate it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRef {
    pub task_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    /// First training task (atomic).
    pub task_a: String,
    /// Second training task (atomic).
    pub task_b: String,
    pub train_per_task: usize,
    pub eval_composed: usize,
    /// Unseen-family tasks evaluated zero-shot.
    pub unseen_tasks: Vec<String>,
    pub eval_unseen_per_task: usize,
    /// When nonzero, unseen atomic tasks contribute this many video-only
    /// training episodes (actions stripped).
    pub video_only_per_task: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        use super::tasks::*;
        SplitConfig {
            task_a: TASK_INSERT_SEEN.into(),
            task_b: TASK_PRESS_SEEN.into(),
            train_per_task: 300,
            eval_composed: 50,
            unseen_tasks: vec![
                TASK_INSERT_UNSEEN.into(),
                TASK_PRESS_UNSEEN.into(),
                TASK_COMPOSED_UNSEEN.into(),
            ],
            eval_unseen_per_task: 50,
            video_only_per_task: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train_atomic_a: Vec<EpisodeRef>,
    pub train_atomic_b: Vec<EpisodeRef>,
    pub eval_composed_ab: Vec<EpisodeRef>,
    pub eval_unseen: Vec<EpisodeRef>,
    /// Video-only co-training refs (empty unless configured).
    pub train_video_only: Vec<EpisodeRef>,
}

// Disjoint seed bases per split; each task inside a split gets its own
// 10_000-wide block.
const BLOCK: u64 = 10_000;
const BASE_TRAIN_A: u64 = 1 * BLOCK;
const BASE_TRAIN_B: u64 = 2 * BLOCK;
const BASE_COMPOSED: u64 = 50 * BLOCK;
const BASE_UNSEEN: u64 = 60 * BLOCK;
const BASE_VIDEO_ONLY: u64 = 90 * BLOCK;

fn refs(task_id: &str, base: u64, count: usize) -> Vec<EpisodeRef> {
    (0..count as u64)
        .map(|i| EpisodeRef {
            task_id: task_id.to_string(),
            seed: base + i,
        })
        .collect()
}

/// Builds the split plan. Rejects composed tasks in any training split and
/// counts that overflow a seed block.
pub fn make_splits(cfg: &SplitConfig) -> Result<Splits> {
    let a = Task::parse(&cfg.task_a)?;
    let b = Task::parse(&cfg.task_b)?;
    for (name, t) in [("task_a", &a), ("task_b", &b)] {
        if t.is_composed() {
            return Err(Error::Config(format!(
                "composed task `{}` cannot appear in training split {name}",
                t.id
            )));
        }
    }
    for count in [
        cfg.train_per_task,
        cfg.eval_composed,
        cfg.eval_unseen_per_task,
        cfg.video_only_per_task,
    ] {
        if count as u64 >= BLOCK {
            return Err(Error::Config(format!(
                "split count {count} exceeds the per-task seed block"
            )));
        }
    }

    let composed_id = format!("{}+{}", cfg.task_a, cfg.task_b);
    Task::parse(&composed_id)?;

    let mut eval_unseen = Vec::new();
    let mut video_only = Vec::new();
    for (i, id) in cfg.unseen_tasks.iter().enumerate() {
        let t = Task::parse(id)?;
        eval_unseen.extend(refs(id, BASE_UNSEEN + i as u64 * BLOCK, cfg.eval_unseen_per_task));
        if cfg.video_only_per_task > 0 && !t.is_composed() {
            video_only.extend(refs(
                id,
                BASE_VIDEO_ONLY + i as u64 * BLOCK,
                cfg.video_only_per_task,
            ));
        }
    }

    Ok(Splits {
        train_atomic_a: refs(&cfg.task_a, BASE_TRAIN_A, cfg.train_per_task),
        train_atomic_b: refs(&cfg.task_b, BASE_TRAIN_B, cfg.train_per_task),
        eval_composed_ab: refs(&composed_id, BASE_COMPOSED, cfg.eval_composed),
        eval_unseen,
        train_video_only: video_only,
    })
}

impl Splits {
    pub fn split_names() -> [&'static str; 5] {
        [
            "train_atomic_a",
            "train_atomic_b",
            "eval_composed_ab",
            "eval_unseen",
            "train_video_only",
        ]
    }

    pub fn by_name(&self, name: &str) -> Option<&[EpisodeRef]> {
        match name {
            "train_atomic_a" => Some(&self.train_atomic_a),
            "train_atomic_b" => Some(&self.train_atomic_b),
            "eval_composed_ab" => Some(&self.eval_composed_ab),
            "eval_unseen" => Some(&self.eval_unseen),
            "train_video_only" => Some(&self.train_video_only),
            _ => None,
        }
    }

    /// Training refs must never include a composed task. Called both at
    /// planning and before any training run on loaded data.
    pub fn assert_no_leak(&self) -> Result<()> {
        for r in self
            .train_atomic_a
            .iter()
            .chain(&self.train_atomic_b)
            .chain(&self.train_video_only)
        {
            if Task::parse(&r.task_id)?.is_composed() {
                return Err(Error::Config(format!(
                    "composed task `{}` leaked into a training split",
                    r.task_id
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for name in Self::split_names() {
            for r in self.by_name(name).unwrap() {
                if !seen.insert(r.seed) {
                    return Err(Error::Config(format!(
                        "seed {} appears in more than one split",
                        r.seed
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stable content hash of the plan.
    pub fn plan_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("splits serialize");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StoreManifest {
    pub schema_version: u32,
    pub plan_hash: String,
    pub counts: std::collections::BTreeMap<String, usize>,
    pub splits: Splits,
}

/// Generates every referenced episode and writes the store layout:
/// `root/<split>/ep_<task>_<seed>/…` plus `root/manifest.json`.
pub fn materialize(splits: &Splits, root: &Path, force: bool) -> Result<PathBuf> {
    splits.assert_no_leak()?;
    fs::create_dir_all(root)?;
    let mut counts = std::collections::BTreeMap::new();
    for name in Splits::split_names() {
        let refs = splits.by_name(name).unwrap();
        counts.insert(name.to_string(), refs.len());
        if refs.is_empty() {
            continue;
        }
        let split_dir = root.join(name);
        fs::create_dir_all(&split_dir)?;
        for r in refs {
            let mut ep = generate_episode(&r.task_id, r.seed)?;
            if name == "train_video_only" {
                ep = ep.strip_actions();
            }
            save_episode(&ep, &split_dir, force)?;
        }
    }
    let manifest = StoreManifest {
        schema_version: 1,
        plan_hash: splits.plan_hash(),
        counts,
        splits: splits.clone(),
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

/// Loads the store manifest written by [`materialize`].
pub fn load_store_manifest(root: &Path) -> Result<StoreManifest> {
    let bytes = fs::read(root.join("manifest.json"))
        .map_err(|e| Error::User(format!("no episode store at {}: {e}", root.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::tasks::TASK_COMPOSED_SEEN;

    #[test]
    fn default_plan_matches_documented_counts() {
        let s = make_splits(&SplitConfig::default()).unwrap();
        assert_eq!(s.train_atomic_a.len(), 300);
        assert_eq!(s.train_atomic_b.len(), 300);
        assert_eq!(s.eval_composed_ab.len(), 50);
        assert_eq!(s.eval_unseen.len(), 150);
        assert!(s.train_video_only.is_empty());
        s.assert_no_leak().unwrap();
    }

    #[test]
    fn composed_training_task_is_rejected() {
        let cfg = SplitConfig {
            task_a: TASK_COMPOSED_SEEN.into(),
            ..SplitConfig::default()
        };
        assert!(matches!(make_splits(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn no_composed_ids_or_shared_seeds_in_train() {
        let mut cfg = SplitConfig::default();
        cfg.video_only_per_task = 10;
        let s = make_splits(&cfg).unwrap();
        assert_eq!(s.train_video_only.len(), 20, "composed unseen excluded");
        s.assert_no_leak().unwrap();
        for r in s.train_atomic_a.iter().chain(&s.train_atomic_b) {
            assert!(!r.task_id.contains('+'));
        }
        // Tampering introduces a leak that assert_no_leak catches.
        let mut bad = s.clone();
        bad.train_atomic_a.push(EpisodeRef {
            task_id: TASK_COMPOSED_SEEN.into(),
            seed: 999,
        });
        assert!(bad.assert_no_leak().is_err());
    }

    #[test]
    fn plan_hash_is_stable_and_sensitive() {
        let a = make_splits(&SplitConfig::default()).unwrap();
        let b = make_splits(&SplitConfig::default()).unwrap();
        assert_eq!(a.plan_hash(), b.plan_hash());
        let mut cfg = SplitConfig::default();
        cfg.train_per_task = 299;
        let c = make_splits(&cfg).unwrap();
        assert_ne!(a.plan_hash(), c.plan_hash());
    }

    #[test]
    fn materialize_writes_store_and_strips_video_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SplitConfig {
            train_per_task: 2,
            eval_composed: 1,
            eval_unseen_per_task: 1,
            video_only_per_task: 1,
            ..SplitConfig::default()
        };
        let splits = make_splits(&cfg).unwrap();
        materialize(&splits, dir.path(), false).unwrap();
        let manifest = load_store_manifest(dir.path()).unwrap();
        assert_eq!(manifest.counts["train_atomic_a"], 2);
        assert_eq!(manifest.plan_hash, splits.plan_hash());

        let vo_ref = &splits.train_video_only[0];
        let ep = crate::world::episode::load_episode(
            &dir.path()
                .join("train_video_only")
                .join(crate::world::episode::episode_dir_name(&vo_ref.task_id, vo_ref.seed)),
        )
        .unwrap();
        assert!(ep.is_video_only());
    }
}
