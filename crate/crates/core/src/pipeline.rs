//! Command implementations behind the `robotize` binary.
//!
//! Every command takes a resolved [`PipelineConfig`] plus explicit paths and
//! writes progress lines to a caller-supplied sink, so the same code paths are
//! exercised by the CLI and by tests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
use crate::datagen::{generate_dataset, DatasetConfig, Manifest, Split, MANIFEST_FILE};
use crate::dit::{self, DiT, DiTConfig};
use crate::error::{Error, Result};
use crate::flow::train::{load_adapted, smoothed, TraceRow, TrainConfig, TrainPair, Trainer};
use crate::flow::{edit_clip, encode_latent, SamplerConfig};
use crate::lora::LoraSet;
use crate::metrics::{evaluate_pairs, EvalReport};
use crate::video::{VideoClip, CLIP_MAGIC};

pub const BASE_CKPT: &str = "base.ckpt";
pub const ADAPTER_CKPT: &str = "adapter.ckpt";
pub const LOSS_TRACE: &str = "loss.tsv";
pub const PRETRAIN_TRACE: &str = "pretrain_loss.tsv";
pub const TRAIN_CONFIG: &str = "train_config.json";
pub const ROBOTIZE_SUMMARY: &str = "summary.tsv";

/// Everything a run can be configured with. The root `seed` is copied into
/// each component so one number reproduces the whole pipeline.
///
/// `pretrain` trains the whole base model to reproduce its input on clips of
/// both embodiments before the adapters are finetuned on the pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub model: DiTConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

fn default_pretrain() -> TrainConfig {
    TrainConfig {
        steps: 3000,
        lr: 3e-3,
        full_model: true,
        ..TrainConfig::default()
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: crate::rng::DEFAULT_SEED,
            data: DatasetConfig::default(),
            model: DiTConfig::default(),
            pretrain: default_pretrain(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

impl PipelineConfig {
    fn propagate_seed(&mut self) {
        self.data.seed = self.seed;
        self.pretrain.seed = crate::rng::derive_seed(self.seed, "pretrain", &[]);
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        if !self.pretrain.full_model {
            return Err(Error::config("pretrain.full_model must be true"));
        }
        self.train.validate()?;
        if self.sampler.steps == 0 {
            return Err(Error::config("sampler.steps must be at least 1"));
        }
        Ok(())
    }
}

/// Sets `dotted.key` in a JSON object tree. The value is parsed as JSON when
/// possible and taken as a bare string otherwise.
pub fn apply_override(root: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::config(format!("override key {key:?} has an empty segment")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one segment")
}

fn merge_json(into: &mut serde_json::Value, from: serde_json::Value) {
    match (into, from) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads an optional JSON config file, applies `key=value` overrides and an
/// optional seed, then validates.
pub fn load_config(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<PipelineConfig> {
    let mut root = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    // missing keys take the defaults of their section, not of the section's type
    let mut full = serde_json::to_value(PipelineConfig::default()).map_err(|e| Error::config(e.to_string()))?;
    merge_json(&mut full, root);
    let root = full;
    let mut cfg: PipelineConfig = serde_json::from_value(root).map_err(|e| Error::config(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.propagate_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn say(log: &mut dyn Write, msg: impl AsRef<str>) {
    // progress output is best effort
    let _ = writeln!(log, "{}", msg.as_ref());
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenDataSummary {
    pub manifest: PathBuf,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
}

pub fn cmd_gen_data(cfg: &PipelineConfig, out: &Path, overwrite: bool, log: &mut dyn Write) -> Result<GenDataSummary> {
    let m = generate_dataset(&cfg.data, out, overwrite)?;
    let count = |s| m.split(s).count();
    let summary = GenDataSummary {
        manifest: out.join(MANIFEST_FILE),
        train_pairs: count(Split::Train),
        val_pairs: count(Split::Val),
        train_scenes: cfg.data.scenes - cfg.data.validation_scenes,
        val_scenes: cfg.data.validation_scenes,
    };
    say(
        log,
        format!(
            "wrote {} pairs to {}: train {} pairs / {} scenes, val {} pairs / {} scenes",
            m.records.len(),
            summary.manifest.display(),
            summary.train_pairs,
            summary.train_scenes,
            summary.val_pairs,
            summary.val_scenes
        ),
    );
    Ok(summary)
}

/// Encodes every pair of a split into latent grids.
pub fn load_pairs(manifest: &Manifest, split: Split, model: &DiTConfig) -> Result<Vec<TrainPair>> {
    manifest
        .split(split)
        .map(|r| {
            let cond = VideoClip::read(&manifest.resolve(&r.human_path))?;
            let target = VideoClip::read(&manifest.resolve(&r.humanoid_path))?;
            Ok(TrainPair {
                cond: encode_latent(&cond, model.patch)?,
                target: encode_latent(&target, model.patch)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    pub overwrite: bool,
    /// Train on only the first `n` training pairs.
    pub max_pairs: Option<usize>,
    /// Reuse this base checkpoint instead of pretraining a new one.
    pub base: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub trainable: usize,
    pub final_loss: f64,
    pub trace: Vec<TraceRow>,
}

fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| TraceRow::parse(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

fn trace_text(rows: &[TraceRow]) -> String {
    rows.iter().map(|r| r.to_line() + "\n").collect()
}

/// Identity pairs (target = condition) over both clips of every training pair.
pub fn identity_pairs(pairs: &[TrainPair]) -> Vec<TrainPair> {
    pairs
        .iter()
        .flat_map(|p| [p.cond.clone(), p.target.clone()])
        .map(|g| TrainPair {
            cond: g.clone(),
            target: g,
        })
        .collect()
}

fn run_steps(trainer: &mut Trainer, data: &[TrainPair], steps: u64, label: &str, trace: &mut Vec<TraceRow>, log: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    while trainer.step_count() < steps {
        let row = trainer.step(data)?;
        trace.push(row);
        if (row.step + 1) % 100 == 0 || row.step + 1 == steps {
            let losses: Vec<f64> = trace.iter().map(|r| r.loss).collect();
            say(
                log,
                format!(
                    "{label}step {:>5}  loss {:.5}  lr {:.2e}  {:.1}s",
                    row.step + 1,
                    smoothed(&losses, 50).last().copied().unwrap_or(f64::NAN),
                    row.lr,
                    start.elapsed().as_secs_f64()
                ),
            );
        }
    }
    Ok(())
}

/// Initialises a base model and pretrains it on identity pairs built from
/// `pairs`. Returns the model and its loss trace.
pub fn pretrain_base(cfg: &PipelineConfig, pairs: &[TrainPair], log: &mut dyn Write) -> Result<(DiT<f32>, Vec<TraceRow>)> {
    let base = DiT::init(cfg.model.clone(), cfg.seed)?;
    let mut trace = Vec::new();
    if cfg.pretrain.steps == 0 {
        return Ok((base, trace));
    }
    let data = identity_pairs(pairs);
    let mut trainer = Trainer::new(cfg.pretrain.clone(), base)?;
    say(
        log,
        format!(
            "pretraining {} base parameters on {} clips for {} steps",
            trainer.trainable_count(),
            data.len(),
            cfg.pretrain.steps
        ),
    );
    run_steps(&mut trainer, &data, cfg.pretrain.steps, "pretrain ", &mut trace, log)?;
    Ok((trainer.model().clone(), trace))
}

/// Trains adapters on the manifest's training split. Writes the base and
/// adapter checkpoints, the loss traces and the resolved config into `out`.
/// Without `--resume` or `--base` the base is first pretrained.
pub fn cmd_train(cfg: &PipelineConfig, manifest: &Path, out: &Path, opts: &TrainOptions, log: &mut dyn Write) -> Result<TrainSummary> {
    let m = Manifest::read(manifest)?;
    let base_path = out.join(BASE_CKPT);
    let adapter_path = out.join(ADAPTER_CKPT);
    let trace_path = out.join(LOSS_TRACE);
    let (mut trainer, mut trace) = if opts.resume {
        let base = dit::from_checkpoint(&Checkpoint::read(&base_path)?, &base_path)?;
        let ck = Checkpoint::read(&adapter_path)?;
        let saved: TrainConfig = ck
            .header_json()?
            .and_then(|h| serde_json::from_value(h["train"].clone()).ok())
            .ok_or_else(|| Error::format(&adapter_path, "adapter header lacks its training config"))?;
        if (TrainConfig { steps: cfg.train.steps, ..saved }) != cfg.train {
            return Err(Error::config("resumed run must use the saved training config (only steps may change)"));
        }
        let tr = Trainer::from_checkpoint(cfg.train.clone(), base, &ck, &adapter_path)?;
        let done = tr.step_count();
        let trace: Vec<TraceRow> = read_trace(&trace_path)?.into_iter().filter(|r| r.step < done).collect();
        if trace.len() as u64 != done {
            return Err(Error::format(&trace_path, format!("trace has {} rows for {done} completed steps", trace.len())));
        }
        say(log, format!("resuming at step {done}"));
        (tr, trace)
    } else {
        if adapter_path.exists() && !opts.overwrite {
            return Err(Error::invalid(format!(
                "{} already exists (pass --overwrite or --resume)",
                adapter_path.display()
            )));
        }
        create_dir(out)?;
        let base = match &opts.base {
            Some(p) => {
                let ck = Checkpoint::read(p)?;
                let base = dit::from_checkpoint(&ck, p)?;
                ck.write(&base_path)?;
                base
            }
            None => {
                let pairs = load_pairs(&m, Split::Train, &cfg.model)?;
                let (base, pre) = pretrain_base(cfg, &pairs, log)?;
                write_file(&out.join(PRETRAIN_TRACE), trace_text(&pre).as_bytes())?;
                let header = serde_json::json!({ "seed": cfg.seed, "pretrain_steps": cfg.pretrain.steps });
                dit::to_checkpoint(&base, header)?.write(&base_path)?;
                base
            }
        };
        (Trainer::new(cfg.train.clone(), base)?, Vec::new())
    };
    let mut data = load_pairs(&m, Split::Train, &trainer.model().config)?;
    if let Some(n) = opts.max_pairs {
        data.truncate(n);
    }
    if data.is_empty() {
        return Err(Error::invalid(format!("{} has no training pairs", manifest.display())));
    }
    say(
        log,
        format!(
            "training {} parameters on {} pairs for {} steps",
            trainer.trainable_count(),
            data.len(),
            cfg.train.steps
        ),
    );
    run_steps(&mut trainer, &data, cfg.train.steps, "", &mut trace, log)?;
    trainer.to_checkpoint()?.write(&adapter_path)?;
    write_file(&trace_path, trace_text(&trace).as_bytes())?;
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::config(e.to_string()))?;
    write_file(&out.join(TRAIN_CONFIG), json.as_bytes())?;
    let losses: Vec<f64> = trace.iter().map(|r| r.loss).collect();
    Ok(TrainSummary {
        steps: trainer.step_count(),
        trainable: trainer.trainable_count(),
        final_loss: smoothed(&losses, 50).last().copied().unwrap_or(f64::NAN),
        trace,
    })
}

/// A model ready for editing: a base checkpoint alone, or adapters on top of
/// the base they were trained against (`base` defaults to `base.ckpt` beside
/// the adapter file).
pub fn load_model(checkpoint: &Path, base: Option<&Path>) -> Result<(DiT<f32>, Option<LoraSet<f32>>)> {
    let ck = Checkpoint::read(checkpoint)?;
    let kind = ck
        .header_json()?
        .and_then(|h| h.get("kind").and_then(|k| k.as_str()).map(str::to_string))
        .ok_or_else(|| Error::format(checkpoint, "checkpoint header lacks a kind"))?;
    match kind.as_str() {
        "base" => Ok((dit::from_checkpoint(&ck, checkpoint)?, None)),
        "adapter" => {
            let base_path = match base {
                Some(p) => p.to_path_buf(),
                None => checkpoint.with_file_name(BASE_CKPT),
            };
            let base = dit::from_checkpoint(&Checkpoint::read(&base_path)?, &base_path)?;
            let (model, lora) = load_adapted(&base, &ck, checkpoint)?;
            Ok((model, Some(lora)))
        }
        other => Err(Error::format(checkpoint, format!("unknown checkpoint kind {other:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditSummary {
    pub frames: usize,
    pub seconds: f64,
}

impl EditSummary {
    pub fn seconds_per_frame(&self) -> f64 {
        self.seconds / self.frames.max(1) as f64
    }
}

fn edit_one(model: &DiT<f32>, lora: Option<&LoraSet<f32>>, clip: &VideoClip, cfg: &PipelineConfig) -> Result<(VideoClip, EditSummary)> {
    model.config.patch.check_divides(clip.frames(), clip.height(), clip.width())?;
    let start = Instant::now();
    let edited = edit_clip(model, lora, clip, &cfg.sampler, &cfg.train.prompt)?;
    let summary = EditSummary {
        frames: clip.frames(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((edited, summary))
}

fn check_writable(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::invalid(format!("{} already exists (pass --overwrite to replace it)", path.display())));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_edit(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    base: Option<&Path>,
    input: &Path,
    output: &Path,
    ppm_dir: Option<&Path>,
    overwrite: bool,
    log: &mut dyn Write,
) -> Result<EditSummary> {
    check_writable(output, overwrite)?;
    let (model, lora) = load_model(checkpoint, base)?;
    let clip = VideoClip::read(input)?;
    let (edited, summary) = edit_one(&model, lora.as_ref(), &clip, cfg)?;
    edited.write(output)?;
    if let Some(dir) = ppm_dir {
        let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "frame".into());
        edited.export_ppm(dir, &stem)?;
    }
    say(
        log,
        format!(
            "edited {} frames in {:.2}s ({:.3} s/frame) -> {}",
            summary.frames,
            summary.seconds,
            summary.seconds_per_frame(),
            output.display()
        ),
    );
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotizeSummary {
    /// `(clip id, frames, seconds per frame)` in file-name order.
    pub edited: Vec<(String, usize, f64)>,
    /// `(clip id, reason)`.
    pub skipped: Vec<(String, String)>,
}

impl RobotizeSummary {
    pub fn total_frames(&self) -> usize {
        self.edited.iter().map(|e| e.1).sum()
    }
}

fn list_clips(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut clips: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "xhv"))
        .collect();
    clips.sort();
    Ok(clips)
}

/// Edits every `.xhv` clip in `input` into `output`, skipping invalid ones.
#[allow(clippy::too_many_arguments)]
pub fn cmd_robotize(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    base: Option<&Path>,
    input: &Path,
    output: &Path,
    overwrite: bool,
    log: &mut dyn Write,
) -> Result<RobotizeSummary> {
    let clips = list_clips(input)?;
    if clips.is_empty() {
        return Err(Error::invalid(format!("{} contains no .xhv clips", input.display())));
    }
    let (model, lora) = load_model(checkpoint, base)?;
    create_dir(output)?;
    let mut summary = RobotizeSummary {
        edited: Vec::new(),
        skipped: Vec::new(),
    };
    for path in clips {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let dest = output.join(format!("{id}.xhv"));
        check_writable(&dest, overwrite)?;
        let result = VideoClip::read(&path).and_then(|clip| edit_one(&model, lora.as_ref(), &clip, cfg));
        match result {
            Ok((edited, s)) => {
                edited.write(&dest)?;
                say(log, format!("{id}\t{}\t{:.4}", s.frames, s.seconds_per_frame()));
                summary.edited.push((id, s.frames, s.seconds_per_frame()));
            }
            Err(e) => {
                say(log, format!("skipped {id}: {e}"));
                summary.skipped.push((id, e.to_string()));
            }
        }
    }
    let mut text = String::from("id\tframes\tseconds_per_frame\n");
    for (id, frames, spf) in &summary.edited {
        text += &format!("{id}\t{frames}\t{spf:.6}\n");
    }
    write_file(&output.join(ROBOTIZE_SUMMARY), text.as_bytes())?;
    say(
        log,
        format!(
            "edited {} clips ({} frames), skipped {}",
            summary.edited.len(),
            summary.total_frames(),
            summary.skipped.len()
        ),
    );
    Ok(summary)
}

pub enum EvalSource<'a> {
    /// Run the sampler with this checkpoint on every human clip.
    Model { checkpoint: &'a Path, base: Option<&'a Path> },
    /// Read pre-edited clips named `<human clip stem>.xhv` from a directory.
    Edited(&'a Path),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub split: Split,
    pub model: EvalReport,
    /// The unedited human clip scored against the humanoid ground truth.
    pub baseline: EvalReport,
    pub delta_psnr: f64,
}

impl EvalOutcome {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("outcome serializes")
    }
}

/// Scores edits of a manifest split against the humanoid ground truth, next
/// to the copy-input baseline. `limit` keeps only the first `n` pairs.
pub fn cmd_eval(
    cfg: &PipelineConfig,
    source: EvalSource<'_>,
    manifest: &Path,
    split: Split,
    limit: Option<usize>,
    log: &mut dyn Write,
) -> Result<EvalOutcome> {
    let m = Manifest::read(manifest)?;
    let records: Vec<_> = m.split(split).take(limit.unwrap_or(usize::MAX)).collect();
    if records.is_empty() {
        return Err(Error::invalid(format!("{} has no {split} pairs", manifest.display())));
    }
    let pairs: Vec<(String, VideoClip, VideoClip)> = records
        .iter()
        .map(|r| {
            Ok((
                r.pair_id.clone(),
                VideoClip::read(&m.resolve(&r.human_path))?,
                VideoClip::read(&m.resolve(&r.humanoid_path))?,
            ))
        })
        .collect::<Result<_>>()?;
    let predictions: Vec<VideoClip> = match source {
        EvalSource::Model { checkpoint, base } => {
            let (model, lora) = load_model(checkpoint, base)?;
            pairs
                .par_iter()
                .map(|(_, human, _)| edit_clip(&model, lora.as_ref(), human, &cfg.sampler, &cfg.train.prompt))
                .collect::<Result<_>>()?
        }
        EvalSource::Edited(dir) => records
            .iter()
            .map(|r| {
                let stem = r.human_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                VideoClip::read(&dir.join(format!("{stem}.xhv")))
            })
            .collect::<Result<_>>()?,
    };
    let scored: Vec<(String, VideoClip, VideoClip)> = pairs
        .iter()
        .zip(predictions)
        .map(|((id, _, gt), p)| (id.clone(), p, gt.clone()))
        .collect();
    let model = evaluate_pairs(&scored)?;
    let baseline_items: Vec<(String, VideoClip, VideoClip)> = pairs.into_iter().collect();
    let baseline = evaluate_pairs(&baseline_items)?;
    let delta_psnr = model.mean_psnr - baseline.mean_psnr;
    say(
        log,
        format!(
            "{split}: {} clips  model PSNR {:.3} dB  SSIM {:.4}  MSE {:.2}  |  copy baseline PSNR {:.3} dB  |  delta {:+.3} dB",
            model.clips.len(),
            model.mean_psnr,
            model.mean_ssim,
            model.mean_mse,
            baseline.mean_psnr,
            delta_psnr
        ),
    );
    Ok(EvalOutcome {
        split,
        model,
        baseline,
        delta_psnr,
    })
}

/// Human-readable description of a clip, checkpoint, manifest or JSON report.
pub fn cmd_inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CLIP_MAGIC) {
        let c = VideoClip::from_bytes(&bytes, path)?;
        let (lo, hi) = c.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let [t, h, w, ch] = c.dims();
        return Ok(format!(
            "clip {}\n  frames {t}, {h}x{w}, {ch} channels, {}/{} fps\n  values [{lo:.4}, {hi:.4}]",
            path.display(),
            c.fps().0,
            c.fps().1
        ));
    }
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ck = Checkpoint::from_bytes(&bytes, path)?;
        let mut s = format!("checkpoint {}\n", path.display());
        if let Some(h) = ck.header_json()? {
            s += &format!("  header {}\n", serde_json::to_string_pretty(&h).unwrap_or_default().replace('\n', "\n  "));
        }
        let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
        for (name, t) in &ck.tensors {
            let group = if name.starts_with("optim/") { "optimizer state" } else { "parameters" };
            *groups.entry(group).or_default() += t.numel();
        }
        s += &format!("  {} tensors", ck.tensors.len());
        for (g, n) in groups {
            s += &format!(", {n} {g}");
        }
        s += "\n";
        for (name, t) in &ck.tensors {
            if !name.starts_with("optim/") {
                s += &format!("  {name} {:?}\n", t.shape());
            }
        }
        return Ok(s);
    }
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "unrecognised binary file"))?;
    if let Ok(o) = serde_json::from_str::<EvalOutcome>(&text) {
        return Ok(format!(
            "evaluation report {} ({} split, {} clips, {} frames)\n  model PSNR {:.3} dB  SSIM {:.4}  MSE {:.2}\n  copy baseline PSNR {:.3} dB  SSIM {:.4}  MSE {:.2}\n  delta {:+.3} dB",
            path.display(),
            o.split,
            o.model.clips.len(),
            o.model.frames,
            o.model.mean_psnr,
            o.model.mean_ssim,
            o.model.mean_mse,
            o.baseline.mean_psnr,
            o.baseline.mean_ssim,
            o.baseline.mean_mse,
            o.delta_psnr
        ));
    }
    if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
        return Ok(format!(
            "evaluation report {} ({} clips)\n  PSNR {:.3} dB  SSIM {:.4}  MSE {:.2}",
            path.display(),
            r.clips.len(),
            r.mean_psnr,
            r.mean_ssim,
            r.mean_mse
        ));
    }
    if let Ok(cfg) = serde_json::from_str::<PipelineConfig>(&text) {
        return Ok(format!(
            "config {}\n{}",
            path.display(),
            serde_json::to_string_pretty(&cfg).unwrap_or_default()
        ));
    }
    if path.extension().is_some_and(|x| x == "tsv") {
        if let Ok(m) = Manifest::read(path) {
            return Ok(format!(
                "manifest {}\n  {} pairs: {} train, {} val",
                path.display(),
                m.records.len(),
                m.split(Split::Train).count(),
                m.split(Split::Val).count()
            ));
        }
        if let Ok(rows) = read_trace(path) {
            let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
            let sm = smoothed(&losses, 50);
            return Ok(format!(
                "loss trace {}\n  {} steps, first {:.5}, final smoothed {:.5}",
                path.display(),
                rows.len(),
                losses.first().copied().unwrap_or(f64::NAN),
                sm.last().copied().unwrap_or(f64::NAN)
            ));
        }
    }
    Err(Error::format(path, "not a clip, checkpoint, manifest, trace, config or report"))
}
