//! Command-line front end: thin drivers over data generation, training,
//! evaluation, rollouts, and inspection.
//!
//! Every command resolves one [`RunConfig`] (defaults ← config file ←
//! `--set` overrides) and writes the resolved text next to its outputs, so
//! any result directory states exactly what produced it. Environment
//! overrides are limited to `UNILOOP_OUT_ROOT` (prefix for relative output
//! paths) and `UNILOOP_THREADS` (validated; compute is single-threaded).

use crate::config::{RunConfig, KEYS};
use crate::data::{episode_samples, Vocabulary};
use crate::eval::{
    emit_report, imagination_alignment, rollout, run_compositional, run_zero_shot, AblationConfig,
    Planner, ProtocolSpec, Report, RolloutRecord, TrainProvenance,
};
use crate::training::{
    checkpoint_header_summary, load_checkpoint, save_checkpoint, Model, Trainer,
};
use crate::world::episode::{
    episode_dir_name, generate_episode, load_episode, replay_matches,
};
use crate::world::splits::{load_store_manifest, make_splits, materialize, EpisodeRef, Splits};
use crate::world::{Frame, FRAME_SIDE};
use crate::{Error, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "uniloop",
    version,
    about = "Unified reasoning/imagination/action loop on a synthetic tabletop",
    after_help = "Configuration keys are listed by `uniloop keys`; every key \
                  can be set in a config file or with --set key=value."
)]
pub struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub set: Vec<(String, String)>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Plan train/eval splits and write the episode store.
    GenData {
        /// Store directory to create.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Overwrite an existing non-empty store.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoint.bin, train_log.csv, run_config.txt.
    Train {
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Episode store written by gen-data (default: regenerate episodes
        /// in memory from the configured split plan).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Evaluate under held-out protocols and emit report files.
    Eval {
        /// Checkpoint to evaluate (compositional / zero-shot).
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Output directory for report.json / CSVs / chart.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// compositional | zero-shot | all | ablations (ablations retrain
        /// every variant from scratch; use a reduced config).
        #[arg(long, default_value = "all")]
        protocol: String,
    },
    /// Run one closed-loop rollout and record it.
    Rollout {
        /// Checkpoint to plan with (or pass --oracle).
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Task id, e.g. insert_red_blue+press_green.
        #[arg(long)]
        task: String,
        /// Scene seed.
        #[arg(long)]
        seed: u64,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Write every realized and imagined frame as PNG.
        #[arg(long)]
        dump_frames: bool,
        /// Plan with the scripted controller and simulator lookahead
        /// instead of a model (harness self-test).
        #[arg(long)]
        oracle: bool,
    },
    /// Describe a checkpoint file, an episode directory, or an episode store.
    Inspect {
        /// Path to a checkpoint or a directory holding manifest.json.
        path: PathBuf,
    },
    /// List every configuration key with its default and meaning.
    Keys,
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

/// Entry point used by main; maps every failure to the documented exit
/// codes (0 ok, 1 after a bad request, 2 after an internal failure).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let out_root = env_overrides()?;
    match cli.cmd {
        Cmd::Keys => {
            cmd_keys();
            return Ok(());
        }
        Cmd::Inspect { ref path } => return cmd_inspect(path),
        _ => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set)?;
    match cli.cmd {
        Cmd::GenData { out, force } => cmd_gen_data(&cfg, &under_root(&out_root, &out), force),
        Cmd::Train { out, data } => {
            cmd_train(&cfg, &under_root(&out_root, &out), data.as_deref())
        }
        Cmd::Eval {
            checkpoint,
            out,
            protocol,
        } => cmd_eval(
            &cfg,
            checkpoint.as_deref(),
            &under_root(&out_root, &out),
            &protocol,
        ),
        Cmd::Rollout {
            checkpoint,
            task,
            seed,
            out,
            dump_frames,
            oracle,
        } => cmd_rollout(
            &cfg,
            checkpoint.as_deref(),
            &task,
            seed,
            &under_root(&out_root, &out),
            dump_frames,
            oracle,
        ),
        Cmd::Keys | Cmd::Inspect { .. } => unreachable!("handled above"),
    }
}

/// Validates the two supported environment overrides and returns the
/// output-root prefix, if any.
fn env_overrides() -> Result<Option<PathBuf>> {
    if let Ok(v) = std::env::var("UNILOOP_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => {
                return Err(Error::Config(format!(
                    "UNILOOP_THREADS: `{v}` is not a positive integer"
                )))
            }
            Ok(n) if n > 1 => {
                eprintln!("note: UNILOOP_THREADS={n} requested; compute runs on one thread")
            }
            Ok(_) => {}
        }
    }
    Ok(match std::env::var("UNILOOP_OUT_ROOT") {
        Ok(v) if !v.trim().is_empty() => Some(PathBuf::from(v)),
        _ => None,
    })
}

fn under_root(root: &Option<PathBuf>, path: &Path) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

fn cmd_keys() {
    println!("{:<28} {:<9} meaning [default]", "key", "type");
    for (key, default, help) in KEYS {
        let kind = if key.contains("lambda") || *key == "train.lr" || *key == "train.clip" {
            "float"
        } else if matches!(*key, "data.task_a" | "data.task_b" | "data.unseen_tasks") {
            "string"
        } else if *key == "train.z_source" {
            "enum"
        } else {
            "integer"
        };
        println!("{key:<28} {kind:<9} {help} [{default}]");
    }
}

fn load_checkpoint_cli(path: &Path) -> Result<crate::training::LoadedCheckpoint> {
    if !path.is_file() {
        return Err(Error::User(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    load_checkpoint(path)
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    let splits = make_splits(&cfg.split())?;
    if !force && out.exists() && std::fs::read_dir(out)?.next().is_some() {
        return Err(Error::User(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    materialize(&splits, out, force)?;
    cfg.write_resolved(out)?;
    let manifest = load_store_manifest(out)?;
    println!("episode store {}", out.display());
    println!("plan hash {}", manifest.plan_hash);
    for (name, n) in &manifest.counts {
        println!("  {name}: {n} episodes");
    }
    Ok(())
}

/// Loads (or regenerates) the training splits and slices them into windows.
fn training_samples(
    cfg: &RunConfig,
    data: Option<&Path>,
    vocab: &Vocabulary,
) -> Result<(Vec<crate::data::TrainingSample>, Splits, Vec<EpisodeRef>)> {
    let splits = match data {
        Some(root) => load_store_manifest(root)?.splits,
        None => make_splits(&cfg.split())?,
    };
    splits.assert_no_leak()?;
    let wcfg = cfg.window();
    let stride = cfg.usize("train.sample_stride");
    let mut samples = Vec::new();
    let mut train_refs = Vec::new();
    for name in ["train_atomic_a", "train_atomic_b", "train_video_only"] {
        for r in splits.by_name(name).expect("known split") {
            let ep = match data {
                Some(root) => {
                    load_episode(&root.join(name).join(episode_dir_name(&r.task_id, r.seed)))?
                }
                None => {
                    let ep = generate_episode(&r.task_id, r.seed)?;
                    if name == "train_video_only" {
                        ep.strip_actions()
                    } else {
                        ep
                    }
                }
            };
            samples.extend(episode_samples(&ep, stride, &wcfg, vocab)?);
            train_refs.push(r.clone());
        }
    }
    Ok((samples, splits, train_refs))
}

fn cmd_train(cfg: &RunConfig, out: &Path, data: Option<&Path>) -> Result<()> {
    let vocab = Vocabulary::build();
    let (samples, splits, train_refs) = training_samples(cfg, data, &vocab)?;
    println!(
        "{} training samples from {} episodes",
        samples.len(),
        train_refs.len()
    );

    let model = Model::new(
        cfg.backbone(vocab.len()),
        cfg.generator(),
        cfg.window(),
        cfg.u64("seed.model"),
    );
    let hyper = cfg.hyper();
    let mut trainer = Trainer::new(model, hyper, cfg.u64("seed.train"));

    std::fs::create_dir_all(out)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("train_log.csv"))?);
    writeln!(log, "step,total,text,video,action,grad_norm,lr")?;

    let mut meta = serde_json::Map::new();
    meta.insert("config_hash".into(), json!(cfg.hash()));
    meta.insert("data_plan_hash".into(), json!(splits.plan_hash()));
    TrainProvenance::from_refs(&train_refs).to_meta(&mut meta);
    let cfg_obj: serde_json::Map<String, serde_json::Value> = cfg
        .entries()
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    meta.insert("run_config".into(), serde_json::Value::Object(cfg_obj));

    let print_every = (hyper.total_steps / 20).max(1);
    let snapshot_meta = meta.clone();
    let snapshot_dir = out.to_path_buf();
    trainer.run(
        &samples,
        hyper.total_steps,
        cfg.usize("train.eval_every"),
        |report| {
            writeln!(
                log,
                "{},{},{},{},{},{},{}",
                report.step,
                report.total,
                report.text,
                report.video,
                report.action,
                report.grad_norm,
                report.lr
            )?;
            for w in &report.warnings {
                eprintln!("warning: step {}: {w}", report.step);
            }
            if report.step == 1 || report.step % print_every == 0 {
                println!(
                    "step {:>6}  total {:.4}  text {:.4}  video {:.4}  action {:.4}",
                    report.step, report.total, report.text, report.video, report.action
                );
            }
            Ok(())
        },
        |tr| {
            let path = snapshot_dir.join(format!("checkpoint_step_{:06}.bin", tr.step));
            save_checkpoint(tr, snapshot_meta.clone(), &path)?;
            println!("snapshot {}", path.display());
            Ok(())
        },
    )?;
    log.flush()?;

    let ckpt = out.join("checkpoint.bin");
    save_checkpoint(&trainer, meta, &ckpt)?;
    cfg.write_resolved(out)?;
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// Truncates planned eval refs to `eval.limit` when it is nonzero.
fn capped<'a>(cfg: &RunConfig, refs: &'a [EpisodeRef]) -> &'a [EpisodeRef] {
    let limit = cfg.usize("eval.limit");
    if limit == 0 {
        refs
    } else {
        &refs[..limit.min(refs.len())]
    }
}

fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path, protocol: &str) -> Result<()> {
    if !matches!(protocol, "compositional" | "zero-shot" | "all" | "ablations") {
        return Err(Error::User(format!(
            "unknown protocol `{protocol}` (compositional | zero-shot | all | ablations)"
        )));
    }
    let vocab = Vocabulary::build();
    let splits = make_splits(&cfg.split())?;
    let k = cfg.usize("eval.k");
    let max_steps = cfg.usize("eval.max_steps");

    let mut results = Vec::new();
    let mut ablations = Vec::new();

    if matches!(protocol, "compositional" | "zero-shot" | "all") {
        let path = checkpoint.ok_or_else(|| {
            Error::User("--checkpoint is required for rollout protocols".into())
        })?;
        let loaded = load_checkpoint_cli(path)?;
        let provenance = TrainProvenance::from_meta(&loaded.meta)?;
        let config_hash = loaded
            .meta
            .get("config_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let planner = Planner::Model {
            model: &loaded.trainer.model,
            z_source: loaded.trainer.hyper.z_source,
            vocab: &vocab,
        };
        let h = loaded.trainer.model.wcfg.horizon;

        let mut protocols: Vec<ProtocolSpec> = Vec::new();
        if matches!(protocol, "compositional" | "all") {
            let refs = capped(cfg, &splits.eval_composed_ab);
            if refs.is_empty() {
                return Err(Error::Config(
                    "data.eval_composed is zero; nothing to evaluate".into(),
                ));
            }
            protocols.push(ProtocolSpec {
                protocol: "compositional".into(),
                task_id: refs[0].task_id.clone(),
                seeds: refs.iter().map(|r| r.seed).collect(),
                h,
                k,
                max_steps,
                config_hash: config_hash.clone(),
            });
        }
        if matches!(protocol, "zero-shot" | "all") {
            let mut by_task: std::collections::BTreeMap<String, Vec<u64>> = Default::default();
            for r in &splits.eval_unseen {
                by_task.entry(r.task_id.clone()).or_default().push(r.seed);
            }
            let limit = cfg.usize("eval.limit");
            for (task_id, mut seeds) in by_task {
                if limit > 0 {
                    seeds.truncate(limit);
                }
                protocols.push(ProtocolSpec {
                    protocol: "zero_shot".into(),
                    task_id,
                    seeds,
                    h,
                    k,
                    max_steps,
                    config_hash: config_hash.clone(),
                });
            }
        }
        for spec in &protocols {
            let (result, _records) = if spec.protocol == "compositional" {
                run_compositional(&planner, spec, &provenance)?
            } else {
                run_zero_shot(&planner, spec, &provenance)?
            };
            println!(
                "{:>14} {:<36} success {:>5.1}%  ci [{:.2}, {:.2}]  n={}",
                result.protocol,
                result.task_id,
                100.0 * result.success_rate,
                result.ci_low,
                result.ci_high,
                result.seeds.len()
            );
            results.push(result);
        }
    }

    if protocol == "ablations" {
        let refs = capped(cfg, &splits.eval_composed_ab);
        if refs.is_empty() {
            return Err(Error::Config(
                "data.eval_composed is zero; nothing to evaluate".into(),
            ));
        }
        let acfg = AblationConfig {
            bcfg: cfg.backbone(vocab.len()),
            gcfg: cfg.generator(),
            wcfg: cfg.window(),
            base_hyper: cfg.hyper(),
            split: cfg.split(),
            sample_stride: cfg.usize("train.sample_stride"),
            model_seed: cfg.u64("seed.model"),
            train_seed: cfg.u64("seed.train"),
            eval_seeds: refs.iter().map(|r| r.seed).collect(),
            k,
            max_steps,
        };
        ablations = crate::eval::run_ablations(&acfg, &vocab)?;
        for row in &ablations {
            println!(
                "{:<16} success {:>5.1}%  ci [{:.2}, {:.2}]",
                row.variant,
                100.0 * row.success_rate,
                row.ci_low,
                row.ci_high
            );
        }
    }

    let report = Report::new(results, ablations);
    let files = emit_report(&report, out)?;
    cfg.write_resolved(out)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_rollout(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    task: &str,
    seed: u64,
    out: &Path,
    dump_frames: bool,
    oracle: bool,
) -> Result<()> {
    let vocab = Vocabulary::build();
    let k = cfg.usize("eval.k");
    let max_steps = cfg.usize("eval.max_steps");
    let record = if oracle {
        rollout(
            &Planner::Oracle,
            task,
            seed,
            cfg.usize("window.horizon"),
            k,
            max_steps,
        )?
    } else {
        let path = checkpoint
            .ok_or_else(|| Error::User("pass --checkpoint FILE or --oracle".into()))?;
        let loaded = load_checkpoint_cli(path)?;
        let planner = Planner::Model {
            model: &loaded.trainer.model,
            z_source: loaded.trainer.hyper.z_source,
            vocab: &vocab,
        };
        let h = loaded.trainer.model.wcfg.horizon;
        rollout(&planner, task, seed, h, k, max_steps)?
    };

    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("rollout.json"),
        serde_json::to_vec_pretty(&rollout_summary(&record))?,
    )?;
    if dump_frames {
        write_rollout_frames(&record, out)?;
    }
    cfg.write_resolved(out)?;
    println!(
        "{} seed {}: {} after {} steps ({} replans){}",
        record.task_id,
        record.seed,
        if record.success { "success" } else { "failure" },
        record.steps_used,
        record.replans.len(),
        match &record.fault {
            Some(f) => format!("  [planner fault: {f}]"),
            None => String::new(),
        }
    );
    println!("record {}", out.join("rollout.json").display());
    Ok(())
}

/// Serializable view of a rollout: everything except the raw frames.
fn rollout_summary(record: &RolloutRecord) -> serde_json::Value {
    let replans: Vec<serde_json::Value> = record
        .replans
        .iter()
        .map(|r| {
            json!({
                "step": r.step,
                "cot": r.cot,
                "cot_truncated": r.cot_truncated,
                "planned_actions": r.planned_actions
                    .iter()
                    .map(|a| [a.dx, a.dy, a.grip])
                    .collect::<Vec<_>>(),
                "executed_steps": r.executed_actions.len(),
            })
        })
        .collect();
    json!({
        "task_id": record.task_id,
        "seed": record.seed,
        "success": record.success,
        "steps_used": record.steps_used,
        "transition_failure": record.transition_failure,
        "fault": record.fault,
        "alignment": record.alignment,
        "mean_alignment": imagination_alignment(record).ok(),
        "replans": replans,
    })
}

fn write_frame_png(frame: &Frame, path: &Path) -> Result<()> {
    let side = FRAME_SIDE as u32;
    let img = image::RgbImage::from_raw(side, side, frame.pixels.clone())
        .ok_or_else(|| Error::Format("frame buffer has the wrong length".into()))?;
    img.save(path)
        .map_err(|e| Error::User(format!("cannot write {}: {e}", path.display())))
}

fn write_rollout_frames(record: &RolloutRecord, out: &Path) -> Result<()> {
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    for (i, frame) in record.realized_frames.iter().enumerate() {
        write_frame_png(frame, &frames_dir.join(format!("realized_{i:03}.png")))?;
    }
    for (ri, replan) in record.replans.iter().enumerate() {
        let dir = frames_dir.join(format!("imagined_replan_{ri:02}"));
        std::fs::create_dir_all(&dir)?;
        for (j, frame) in replan.imagined_frames.iter().enumerate() {
            write_frame_png(frame, &dir.join(format!("imagined_{j:02}.png")))?;
        }
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    if path.is_file() {
        let summary = checkpoint_header_summary(path)?;
        println!("checkpoint {}", path.display());
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }
    let manifest = path.join("manifest.json");
    if !manifest.is_file() {
        return Err(Error::User(format!(
            "{}: expected a checkpoint file or a directory containing manifest.json",
            path.display()
        )));
    }
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest)?)?;
    if raw.get("plan_hash").is_some() {
        let store = load_store_manifest(path)?;
        println!("episode store {}", path.display());
        println!("plan hash {}", store.plan_hash);
        for (name, n) in &store.counts {
            println!("  {name}: {n} episodes");
        }
        return Ok(());
    }
    let ep = load_episode(path)?;
    println!("episode {} seed {}", ep.task_id, ep.seed);
    println!("instruction: {}", ep.instruction);
    println!("video reasoning: {}", ep.video_cot);
    if ep.action_cot.is_empty() {
        println!("action reasoning: (stripped)");
    } else {
        println!("action reasoning: {}", ep.action_cot);
    }
    println!(
        "frames {}  actions {}  proprio {}",
        ep.frames.len(),
        ep.actions.len(),
        ep.proprio.len()
    );
    if !ep.is_video_only() {
        if replay_matches(&ep)? {
            println!("replay: bit-exact");
        } else {
            return Err(Error::Format(
                "stored frames do not replay from stored actions".into(),
            ));
        }
    }
    Ok(())
}
