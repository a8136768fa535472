//! `strokesyn` command-line front end.
//!
//! Every run writes under `<out_dir>/<run-id>/`: the payload files, the
//! effective `config.toml` and a `manifest.json`. `--out` moves the primary
//! payload elsewhere. Failures print one JSON line on stderr,
//! `{"error": <kind>, "message": ..}`, and exit with 2 (usage), 3 (config)
//! or 1 (runtime).

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use strokesyn_core::evaluation::{one_shot_experiment, VerificationReport};
use strokesyn_core::ink::{corpus_scale, normalize, to_stroke5, InkSequence, ScaleMode, Stroke5Sequence};
use strokesyn_core::segmentation::{segment, velocity_profile, BoundaryCause, SegmentationMode, MAX_MODEL_LEN};
use strokesyn_core::synthesis::{batch_synthesize, export_latents, item_id, ModelRegistry};
use strokesyn_core::training::{TrainState, Trainer};
use strokesyn_core::vae::Model;
use toml::Value;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{ConfigError, ConfigLoader, RunConfig};
use crate::io::{read_dataset_path, write_dataset, ColumnMap, Format};
use crate::manifest::{run_id, unix_now, FileDigest, Manifest};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    fn parts(&self) -> (&'static str, &str) {
        match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Config(m) => ("config", m),
            CliError::Runtime(m) => ("runtime", m),
        }
    }

    /// The single line printed on stderr.
    pub fn line(&self) -> String {
        let (kind, message) = self.parts();
        serde_json::json!({ "error": kind, "message": message }).to_string()
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "strokesyn", version, about = "Segment, train, synthesize and evaluate on-line handwriting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input dataset (file or directory); sets data.input.
    #[arg(long = "in", value_name = "PATH")]
    input: Option<PathBuf>,
    /// Primary output file (default: inside the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parent of the run directory; sets out_dir.
    #[arg(long)]
    outdir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset format: jsonl or svc (default: from the extension).
    #[arg(long)]
    format: Option<String>,
    /// Dotted config override, e.g. `train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct SegFlags {
    /// velocity or none.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// unit-step or timestamped.
    #[arg(long)]
    derivative: Option<String>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    /// Checkpoint to load into the registry. Repeatable; replaces `models`.
    #[arg(long = "model", value_name = "CKPT")]
    models: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthFlags {
    #[arg(long)]
    tau: Option<f64>,
    /// Selects the registry model trained with this KL weight.
    #[arg(long)]
    wkl: Option<f64>,
    /// Synthetic samples per input.
    #[arg(long = "n")]
    n_samples: Option<usize>,
    /// absolute or chained.
    #[arg(long)]
    placement: Option<String>,
    /// corpus or per-segment.
    #[arg(long)]
    normalization: Option<String>,
    /// Sample the latent code even at tau = 0.
    #[arg(long)]
    stochastic_latent: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split sequences into velocity segments.
    Segment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seg: SegFlags,
        /// Also write velocity profiles as CSV.
        #[arg(long)]
        velocity: Option<PathBuf>,
    },
    /// Train one model on the (segmented) dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seg: SegFlags,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        wkl: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Ramp the KL weight up from 0 over train.kl_warmup_steps.
        #[arg(long)]
        kl_anneal: bool,
    },
    /// Generate synthetic renditions of every input sequence.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seg: SegFlags,
        #[command(flatten)]
        models: ModelFlags,
        #[command(flatten)]
        synth: SynthFlags,
        /// Write per-sample coordinate traces as CSV.
        #[arg(long)]
        traces: bool,
    },
    /// One-shot verification with optional synthetic enrolment.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seg: SegFlags,
        #[command(flatten)]
        models: ModelFlags,
        #[command(flatten)]
        synth: SynthFlags,
        /// Synthetic enrolment sizes, comma separated.
        #[arg(long = "k", value_delimiter = ',')]
        k_synth: Vec<usize>,
        #[arg(long)]
        impostors_per_subject: Option<usize>,
    },
    /// Encoder means of whole sequences as CSV.
    ExportLatents {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        models: ModelFlags,
        #[arg(long)]
        wkl: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Segment { .. } => "segment",
            Command::Train { .. } => "train",
            Command::Synthesize { .. } => "synthesize",
            Command::Evaluate { .. } => "evaluate",
            Command::ExportLatents { .. } => "export-latents",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Segment { common, .. }
            | Command::Train { common, .. }
            | Command::Synthesize { common, .. }
            | Command::Evaluate { common, .. }
            | Command::ExportLatents { common, .. } => common,
        }
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

fn snake(s: &str) -> Value {
    Value::String(s.replace('-', "_"))
}

/// Flag values as dotted overrides, applied after `--set`.
fn flag_overrides(cmd: &Command) -> Vec<(&'static str, Value)> {
    let mut v: Vec<(&'static str, Value)> = Vec::new();
    let c = cmd.common();
    if let Some(p) = &c.input {
        v.push(("data.input", path_value(p)));
    }
    if let Some(p) = &c.outdir {
        v.push(("out_dir", path_value(p)));
    }
    if let Some(s) = c.seed {
        v.push(("seed", Value::Integer(s as i64)));
    }
    if let Some(f) = &c.format {
        v.push(("data.format", Value::String(f.clone())));
    }
    let seg = |v: &mut Vec<(&'static str, Value)>, s: &SegFlags| {
        if let Some(p) = &s.policy {
            v.push(("segmentation.mode", snake(p)));
        }
        if let Some(n) = s.min_len {
            v.push(("segmentation.min_len", Value::Integer(n as i64)));
        }
        if let Some(n) = s.max_len {
            v.push(("segmentation.max_len", Value::Integer(n as i64)));
        }
        if let Some(d) = &s.derivative {
            v.push(("segmentation.derivative", snake(d)));
        }
    };
    let models = |v: &mut Vec<(&'static str, Value)>, m: &ModelFlags| {
        if !m.models.is_empty() {
            let list = m.models.iter().map(|p| Value::Table([("path".to_string(), path_value(p))].into_iter().collect())).collect();
            v.push(("models", Value::Array(list)));
        }
    };
    let synth = |v: &mut Vec<(&'static str, Value)>, s: &SynthFlags| {
        if let Some(t) = s.tau {
            v.push(("synthesis.tau", Value::Float(t)));
        }
        if let Some(w) = s.wkl {
            v.push(("synthesis.w_kl_model", Value::Float(w)));
        }
        if let Some(n) = s.n_samples {
            v.push(("synthesis.n_samples", Value::Integer(n as i64)));
        }
        if let Some(p) = &s.placement {
            v.push(("synthesis.placement_mode", snake(p)));
        }
        if let Some(p) = &s.normalization {
            v.push(("synthesis.normalization", snake(p)));
        }
        if s.stochastic_latent {
            v.push(("synthesis.stochastic_latent", Value::Boolean(true)));
        }
    };
    match cmd {
        Command::Segment { seg: s, .. } => seg(&mut v, s),
        Command::Train { seg: s, steps, batch_size, lr, wkl, checkpoint_every, kl_anneal, .. } => {
            seg(&mut v, s);
            if let Some(n) = steps {
                v.push(("train.steps", Value::Integer(*n as i64)));
            }
            if let Some(n) = batch_size {
                v.push(("train.batch_size", Value::Integer(*n as i64)));
            }
            if let Some(x) = lr {
                v.push(("train.learning_rate", Value::Float(*x)));
            }
            if let Some(x) = wkl {
                v.push(("train.w_kl", Value::Float(*x)));
            }
            if let Some(n) = checkpoint_every {
                v.push(("train.checkpoint_every", Value::Integer(*n as i64)));
            }
            if *kl_anneal {
                v.push(("train.kl_anneal", Value::Boolean(true)));
            }
        }
        Command::Synthesize { seg: s, models: m, synth: y, .. } => {
            seg(&mut v, s);
            models(&mut v, m);
            synth(&mut v, y);
        }
        Command::Evaluate { seg: s, models: m, synth: y, k_synth, impostors_per_subject, .. } => {
            seg(&mut v, s);
            models(&mut v, m);
            synth(&mut v, y);
            if !k_synth.is_empty() {
                v.push(("evaluation.k_synth", Value::Array(k_synth.iter().map(|&k| Value::Integer(k as i64)).collect())));
            }
            if let Some(n) = impostors_per_subject {
                v.push(("evaluation.protocol.impostors_per_subject", Value::Integer(*n as i64)));
            }
        }
        Command::ExportLatents { models: m, wkl, .. } => {
            models(&mut v, m);
            if let Some(w) = wkl {
                v.push(("synthesis.w_kl_model", Value::Float(*w)));
            }
        }
    }
    v
}

fn load_config<K: AsRef<str>, V: AsRef<str>>(cmd: &Command, env: impl IntoIterator<Item = (K, V)>) -> Result<RunConfig, CliError> {
    let c = cmd.common();
    let mut loader = ConfigLoader::new();
    if let Some(p) = &c.config {
        loader = loader.file(p)?;
    }
    loader = loader.env(env)?;
    for s in &c.set {
        loader = loader.set(s)?;
    }
    for (k, v) in flag_overrides(cmd) {
        loader = loader.set_value(k, v)?;
    }
    Ok(loader.finish()?)
}

fn input_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(runtime)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && Format::from_path(p).is_ok())
            .collect();
        files.sort();
        Ok(files)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

/// Paths written by a subcommand plus problems that did not abort it.
#[derive(Default)]
struct Outcome {
    artifacts: Vec<PathBuf>,
    warnings: Vec<String>,
    summary: Vec<String>,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    run_dir: PathBuf,
    out: Option<PathBuf>,
}

impl Ctx<'_> {
    /// `--out` if given, else `default` inside the run directory.
    fn primary(&self, default: &str) -> Result<PathBuf, CliError> {
        let p = self.out.clone().unwrap_or_else(|| self.run_dir.join(default));
        ensure_parent(&p)?;
        Ok(p)
    }

    fn sub(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.run_dir.join(rel);
        ensure_parent(&p)?;
        Ok(p)
    }
}

fn ensure_parent(p: &Path) -> Result<(), CliError> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn create(p: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(p).map(BufWriter::new).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
}

fn write_json_lines<T: Serialize>(p: &Path, items: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = create(p)?;
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(runtime)?;
        w.write_all(b"\n").map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

fn csv_writer(p: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))
}

fn registry(cfg: &RunConfig) -> Result<ModelRegistry, CliError> {
    if cfg.models.is_empty() {
        return Err(CliError::Config("no models given (use --model or [[models]])".into()));
    }
    checkpoint::load_registry(&cfg.models).map_err(runtime)
}

#[derive(Serialize)]
struct SegmentRecord<'a> {
    parent_id: String,
    label: &'a str,
    index: usize,
    start_idx: usize,
    /// Inclusive.
    end_idx: usize,
    cause: BoundaryCause,
    end_cause: BoundaryCause,
}

fn cmd_segment(ctx: &Ctx, data: &[InkSequence], velocity: Option<&Path>) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();
    let mut records = Vec::new();
    let mut vel = match velocity {
        Some(p) => {
            ensure_parent(p)?;
            let mut w = csv_writer(p)?;
            w.write_record(["parent_id", "sample", "v", "mu", "sigma"]).map_err(runtime)?;
            out.artifacts.push(p.to_path_buf());
            Some(w)
        }
        None => None,
    };
    for (i, ink) in data.iter().enumerate() {
        let id = item_id(ink, i);
        let segs = segment(ink, &ctx.cfg.segmentation).map_err(|e| CliError::Runtime(format!("sequence {id}: {e}")))?;
        for (k, s) in segs.iter().enumerate() {
            records.push(SegmentRecord {
                parent_id: id.clone(),
                label: &ink.label,
                index: k,
                start_idx: s.start_idx,
                end_idx: s.end_idx,
                cause: s.cause,
                end_cause: s.end_cause,
            });
        }
        if let Some(w) = vel.as_mut() {
            let prof = velocity_profile(ink, ctx.cfg.segmentation.derivative).map_err(runtime)?;
            for (n, v) in prof.v.iter().enumerate() {
                w.write_record([id.clone(), n.to_string(), v.to_string(), prof.mu.to_string(), prof.sigma.to_string()]).map_err(runtime)?;
            }
        }
    }
    if let Some(mut w) = vel {
        w.flush().map_err(runtime)?;
    }
    let p = ctx.primary("segments.jsonl")?;
    write_json_lines(&p, &records)?;
    out.summary.push(format!("{} sequences, {} segments", data.len(), records.len()));
    out.artifacts.insert(0, p);
    Ok(out)
}

/// Splits the dataset per the segmentation policy into stroke-5 pieces.
fn training_pieces(cfg: &RunConfig, data: &[InkSequence]) -> Result<Vec<Stroke5Sequence>, CliError> {
    let mut pieces = Vec::new();
    for (i, ink) in data.iter().enumerate() {
        let id = item_id(ink, i);
        if cfg.segmentation.mode == SegmentationMode::None && ink.len() > MAX_MODEL_LEN {
            return Err(CliError::Runtime(format!("sequence {id} has {} samples; unsegmented training allows 300", ink.len())));
        }
        for s in segment(ink, &cfg.segmentation).map_err(|e| CliError::Runtime(format!("sequence {id}: {e}")))? {
            pieces.push(to_stroke5(&s.extract(ink)).map_err(|e| CliError::Runtime(format!("sequence {id}: {e}")))?);
        }
    }
    Ok(pieces)
}

fn cmd_train(ctx: &Ctx, data: &[InkSequence]) -> Result<Outcome, CliError> {
    let cfg = ctx.cfg;
    let pieces = training_pieces(cfg, data)?;
    let scale = corpus_scale(&pieces).map_err(runtime)?;
    let normalized: Vec<Stroke5Sequence> =
        pieces.iter().map(|p| normalize(p, ScaleMode::Fixed(scale)).map(|(s, _)| s)).collect::<Result<_, _>>().map_err(runtime)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed).map_err(runtime)?;
    model.data_scale = scale;
    let mut trainer = Trainer::new(model, cfg.train.clone(), &normalized).map_err(runtime)?;
    let final_path = ctx.primary("checkpoints/model.ckpt")?;
    let mut out = Outcome::default();
    let mut saved: Vec<PathBuf> = Vec::new();
    let mut failure: Option<String> = None;
    let total = cfg.train.steps;
    let w_kl = cfg.train.w_kl;
    let run_dir = ctx.run_dir.clone();
    let mut on_checkpoint = |s: &TrainState| {
        let path = if s.step >= total { final_path.clone() } else { run_dir.join(format!("checkpoints/step-{:06}.ckpt", s.step)) };
        let result = ensure_parent(&path)
            .map_err(|e| e.parts().1.to_string())
            .and_then(|_| checkpoint::save(&path, &s.model, CheckpointMeta { w_kl: Some(w_kl), step: s.step }).map_err(|e| e.to_string()));
        match result {
            Ok(()) => saved.push(path),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    };
    trainer.run(&mut on_checkpoint).map_err(runtime)?;
    if let Some(e) = failure {
        return Err(CliError::Runtime(e));
    }
    let log = ctx.sub("logs/train.csv")?;
    let mut w = csv_writer(&log)?;
    w.write_record(["step", "l_r", "l_kl", "total"]).map_err(runtime)?;
    for r in &trainer.state.history {
        w.write_record([r.step.to_string(), r.l_r.to_string(), r.l_kl.to_string(), r.total.to_string()]).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    if let Some(last) = trainer.state.history.last() {
        out.summary.push(format!("{} pieces, scale {scale}, step {}: l_r {:.4} l_kl {:.4}", pieces.len(), last.step, last.l_r, last.l_kl));
    }
    // the final checkpoint first, then the intermediate ones in order
    saved.rotate_right(1);
    out.artifacts.extend(saved);
    out.artifacts.push(log);
    Ok(out)
}

fn file_stub(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_trace(p: &Path, ink: &InkSequence) -> Result<(), CliError> {
    let mut w = csv_writer(p)?;
    w.write_record(["sample", "x", "y", "t", "pen_down"]).map_err(runtime)?;
    for (n, s) in ink.samples.iter().enumerate() {
        let t = s.t.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([n.to_string(), s.x.to_string(), s.y.to_string(), t, u8::from(s.pen_down).to_string()]).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

fn cmd_synthesize(ctx: &Ctx, data: &[InkSequence], traces: bool) -> Result<Outcome, CliError> {
    let reg = registry(ctx.cfg)?;
    let results = batch_synthesize(data, &reg, &ctx.cfg.synthesis);
    let mut out = Outcome::default();
    let mut samples = Vec::new();
    let mut reports = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rep) => {
                for o in &rep.outputs {
                    let mut o = o.clone();
                    o.metadata.insert("source".into(), rep.input_id.clone());
                    samples.push(o);
                }
                reports.push(rep);
            }
            Err(e) => out.warnings.push(format!("sequence {}: {e}", item_id(&data[i], i))),
        }
    }
    if reports.is_empty() && !data.is_empty() {
        return Err(CliError::Runtime(format!("every sequence failed; first: {}", out.warnings[0])));
    }
    let p = ctx.primary("samples/samples.jsonl")?;
    let mut w = create(&p)?;
    write_dataset(&mut w, &samples, Format::Jsonl, &ColumnMap::default()).map_err(runtime)?;
    w.flush().map_err(runtime)?;
    out.artifacts.push(p);
    let rp = ctx.sub("samples/reports.jsonl")?;
    write_json_lines(&rp, &reports)?;
    out.artifacts.push(rp);
    if traces {
        for (i, rep) in reports.iter().enumerate() {
            let stub = file_stub(&rep.input_id);
            let src = data.iter().enumerate().find(|(k, d)| item_id(d, *k) == rep.input_id).map_or(&data[i], |(_, d)| d);
            let p = ctx.sub(&format!("samples/traces/{stub}-input.csv"))?;
            write_trace(&p, src)?;
            out.artifacts.push(p);
            for (j, o) in rep.outputs.iter().enumerate() {
                let p = ctx.sub(&format!("samples/traces/{stub}-{j:03}.csv"))?;
                write_trace(&p, o)?;
                out.artifacts.push(p);
            }
        }
    }
    out.summary.push(format!("{} inputs, {} samples, {} failures", data.len(), samples.len(), out.warnings.len()));
    Ok(out)
}

fn cmd_evaluate(ctx: &Ctx, data: &[InkSequence]) -> Result<Outcome, CliError> {
    let cfg = ctx.cfg;
    let reg = if cfg.evaluation.k_synth.iter().any(|&k| k > 0) { registry(cfg)? } else { ModelRegistry::new() };
    let mut out = Outcome::default();
    let mut reports: Vec<VerificationReport> = Vec::new();
    for &k in &cfg.evaluation.k_synth {
        let rep = one_shot_experiment(data, &reg, k, &cfg.synthesis, &cfg.evaluation.protocol).map_err(runtime)?;
        for s in &rep.skipped {
            out.warnings.push(format!("subject {s} skipped: needs 2 genuine samples and 1 impostor"));
        }
        out.summary.push(format!("k_synth {k}: eer {:.4} at threshold {:.4}", rep.eer, rep.eer_threshold));
        reports.push(rep);
    }
    out.warnings.dedup();
    let p = ctx.primary("reports/report.json")?;
    let mut w = create(&p)?;
    serde_json::to_writer_pretty(&mut w, &reports).map_err(runtime)?;
    w.write_all(b"\n").map_err(runtime)?;
    w.flush().map_err(runtime)?;
    out.artifacts.push(p);
    let dp = ctx.sub("reports/det.csv")?;
    let mut w = csv_writer(&dp)?;
    w.write_record(["k_synth", "far", "frr"]).map_err(runtime)?;
    for r in &reports {
        for (far, frr) in &r.det_points {
            w.write_record([r.k_synth.to_string(), far.to_string(), frr.to_string()]).map_err(runtime)?;
        }
    }
    w.flush().map_err(runtime)?;
    out.artifacts.push(dp);
    Ok(out)
}

fn cmd_export_latents(ctx: &Ctx, data: &[InkSequence]) -> Result<Outcome, CliError> {
    let reg = registry(ctx.cfg)?;
    let rows = export_latents(data, &reg, &ctx.cfg.synthesis).map_err(runtime)?;
    let mut out = Outcome::default();
    let p = ctx.primary("latents.csv")?;
    let mut w = csv_writer(&p)?;
    let width = reg.get(ctx.cfg.synthesis.w_kl_model).map_or(0, |m| m.config.latent_dim);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..width).map(|k| format!("z{k}")));
    w.write_record(&header).map_err(runtime)?;
    let mut n = 0;
    for (i, r) in rows.into_iter().enumerate() {
        match r {
            Ok(row) => {
                let mut rec = vec![row.id, row.label];
                rec.extend(row.z.iter().map(f64::to_string));
                w.write_record(&rec).map_err(runtime)?;
                n += 1;
            }
            Err(e) => out.warnings.push(format!("sequence {}: {e}", item_id(&data[i], i))),
        }
    }
    w.flush().map_err(runtime)?;
    out.artifacts.push(p);
    out.summary.push(format!("{n} embeddings of width {width}"));
    Ok(out)
}

fn execute<K: AsRef<str>, V: AsRef<str>>(cli: Cli, argv: &[String], env: impl IntoIterator<Item = (K, V)>) -> Result<Vec<String>, CliError> {
    let started = unix_now();
    let cmd = cli.command;
    let name = cmd.name();
    let cfg = load_config(&cmd, env)?;
    let input = cfg.data.input.clone().ok_or_else(|| CliError::Config("no input dataset (use --in or data.input)".into()))?;
    if !input.exists() {
        return Err(CliError::Config(format!("input does not exist: {}", input.display())));
    }
    for m in &cfg.models {
        if !m.path.exists() {
            return Err(CliError::Config(format!("model does not exist: {}", m.path.display())));
        }
    }
    let data = read_dataset_path(&input, cfg.data.format, &cfg.data.columns).map_err(runtime)?;
    let mut inputs = Vec::new();
    for f in input_files(&input)?.iter().chain(cfg.models.iter().map(|m| &m.path)) {
        inputs.push(FileDigest::of(f).map_err(|e| CliError::Runtime(format!("{}: {e}", f.display())))?);
    }
    let id = run_id(name, &cfg, &inputs);
    let run_dir = std::path::absolute(cfg.out_dir.join(&id)).map_err(runtime)?;
    fs::create_dir_all(&run_dir).map_err(|e| CliError::Runtime(format!("{}: {e}", run_dir.display())))?;
    let ctx = Ctx { cfg: &cfg, run_dir: run_dir.clone(), out: cmd.common().out.clone() };
    let outcome = match &cmd {
        Command::Segment { velocity, .. } => cmd_segment(&ctx, &data, velocity.as_deref()),
        Command::Train { .. } => cmd_train(&ctx, &data),
        Command::Synthesize { traces, .. } => cmd_synthesize(&ctx, &data, *traces),
        Command::Evaluate { .. } => cmd_evaluate(&ctx, &data),
        Command::ExportLatents { .. } => cmd_export_latents(&ctx, &data),
    }?;
    let cfg_path = run_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(runtime)?;
    let mut artifacts = Vec::new();
    for p in outcome.artifacts.iter().chain(std::iter::once(&cfg_path)) {
        artifacts.push(FileDigest::of(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?);
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: name.into(),
        run_id: id,
        argv: argv.to_vec(),
        seed: cfg.seed,
        config: cfg.clone(),
        inputs,
        artifacts,
        warnings: outcome.warnings.clone(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    let mp = run_dir.join("manifest.json");
    fs::write(&mp, serde_json::to_vec_pretty(&manifest).map_err(runtime)?).map_err(runtime)?;
    let mut lines = outcome.summary;
    lines.extend(outcome.warnings.iter().map(|w| format!("warning: {w}")));
    lines.push(format!("run directory: {}", run_dir.display()));
    Ok(lines)
}

/// Runs the tool on `argv` (program name first) with the given environment
/// and returns the exit code.
pub fn run<I, T, K, V>(argv: I, env: impl IntoIterator<Item = (K, V)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{}", e.render());
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            let err = CliError::Usage(first);
            eprintln!("{}", err.line());
            return err.exit_code();
        }
    };
    let argv_s: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, &argv_s, env) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

/// [`run`] with the process arguments and environment.
pub fn dispatch() -> i32 {
    run(std::env::args_os(), std::env::vars())
}
