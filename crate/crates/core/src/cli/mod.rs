//! Command-line front end: `gen`, `train`, `infer`, `eval`, `ablate`.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 checkpoint or config
//! incompatibility, 4 piece-set mismatch between predictions and references.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::inference::{
    ablation_rows, evaluate, evaluate_baseline, format_ablation, iterative_decode, one_shot_decode,
    order_statistics, BaselineConfig, DecodeMode, DecodeOptions, DecodeTrace, Decoded, EvalInput, EvalPiece,
    EvalReport,
};
use crate::model::{ChordModel, ModelConfig, ModelError};
use crate::numerics::{decode_checkpoint, parallel_map, NumericsError};
use crate::score_io::{
    build_piano_roll, frames_for_beats, load_entry, load_labels, parse_midi, read_manifest, segments_to_targets,
    write_labels, ManifestEntry, PATCH_SIZE,
};
use crate::training::synth::{make_synthetic_corpus, SynthConfig};
use crate::training::{config_hash, load_examples, run_training, TrainError, TrainOutputs, Trainer, TrainingExample};
use crate::vocab::FrameTargets;

pub use config::{parse_config_text, RunConfig};

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl std::fmt::Display) -> CliError {
        CliError {
            code: 2,
            message: m.to_string(),
        }
    }

    pub fn checkpoint(m: impl std::fmt::Display) -> CliError {
        CliError {
            code: 3,
            message: m.to_string(),
        }
    }

    pub fn mismatch(m: impl std::fmt::Display) -> CliError {
        CliError {
            code: 4,
            message: m.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Model(ModelError::Mismatch { .. }) | TrainError::Numerics(NumericsError::Checkpoint(_)) => {
                CliError::checkpoint(e)
            }
            other => CliError::usage(other),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "chordrec", version, about = "Symbolic chord recognition: corpus generation, training, decoding and evaluation")]
pub struct Cli {
    /// Worker threads for per-piece work; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Force single-threaded execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus with a 9:1 piece split.
    Gen(GenArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Decode one MIDI file or every piece of a manifest.
    Infer(InferArgs),
    /// Score predicted label files against references.
    Eval(EvalArgs),
    /// Compare the full model, one-shot decoding, a boundary-free model and the template baseline.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub pieces: usize,
    #[arg(long, default_value_t = 16)]
    pub beats: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub rearticulate_prob: f64,
    #[arg(long, default_value_t = 0.05)]
    pub no_chord_prob: f64,
    #[arg(long, default_value_t = 0.4)]
    pub inversion_prob: f64,
}

/// Overrides for every model and training field; unset flags keep the
/// config-file or default value.
#[derive(Debug, Args, Default)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    #[arg(long)]
    pub context_radius: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub use_boundary: Option<bool>,
    #[arg(long)]
    pub use_iterative: Option<bool>,
    #[arg(long)]
    pub teacher_forced_boundaries: Option<bool>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_pieces: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    #[arg(long)]
    pub w_boundary: Option<f64>,
    #[arg(long)]
    pub w_root: Option<f64>,
    #[arg(long)]
    pub w_quality: Option<f64>,
    #[arg(long)]
    pub w_bass: Option<f64>,
    #[arg(long)]
    pub augment: Option<bool>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

impl ConfigOverrides {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        macro_rules! push {
            ($($f:ident),*) => {$(
                if let Some(x) = &self.$f {
                    v.push((stringify!($f), x.to_string()));
                }
            )*};
        }
        push!(
            d_model, encoder_layers, heads, ffn_mult, context_radius, dropout, use_boundary, use_iterative,
            teacher_forced_boundaries, model_seed, warmup_steps, lr_min, lr_max, max_grad_norm, weight_decay,
            batch_pieces, max_tokens, epochs, max_steps, mask_rate, w_boundary, w_root, w_quality, w_bass, augment,
            checkpoint_every
        );
        v
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest (overrides `manifest` in the config file).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Held-out manifest, scored after training.
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    /// Output directory for checkpoints, metrics and the resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds both initialization and the training stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A single MIDI file to decode.
    #[arg(long, conflicts_with = "manifest")]
    pub midi: Option<PathBuf>,
    /// Label file to write for `--midi`.
    #[arg(long, requires = "midi")]
    pub out: Option<PathBuf>,
    /// Decode every piece of a manifest into `--out-dir`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub out_dir: Option<PathBuf>,
    /// Single decoder pass instead of confidence-ordered decoding.
    #[arg(long)]
    pub one_shot: bool,
    /// Skip the decode-trace sidecar.
    #[arg(long)]
    pub no_trace: bool,
    /// Config file that must agree with the checkpoint's model layout.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted `<piece>.lab` files (and optional traces).
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference manifest, or a directory of `<piece>.lab` files.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Also score a training-free baseline (`rule`); needs a manifest reference.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Report directory (defaults to `--pred`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Checkpoint of the full model.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Checkpoint trained with `use_boundary = false`.
    #[arg(long)]
    pub ckpt_no_boundary: Option<PathBuf>,
    /// Pieces to score.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let threads = if cli.deterministic { 1 } else { cli.threads.max(1) };
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a, threads),
        Command::Infer(a) => cmd_infer(&a, threads),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::usage(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    if a.pieces == 0 || a.beats == 0 {
        return Err(CliError::usage("--pieces and --beats must be at least 1"));
    }
    let probs = [a.rearticulate_prob, a.no_chord_prob, a.inversion_prob];
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(CliError::usage("probabilities must lie in [0, 1]"));
    }
    let cfg = SynthConfig {
        pieces: a.pieces,
        beats_per_piece: a.beats,
        seed: a.seed,
        rearticulate_prob: a.rearticulate_prob,
        no_chord_prob: a.no_chord_prob,
        inversion_prob: a.inversion_prob,
    };
    let files = make_synthetic_corpus(&a.out, &cfg).map_err(CliError::usage)?;
    let mut kv = BTreeMap::new();
    kv.insert("pieces".to_string(), a.pieces.to_string());
    kv.insert("beats".to_string(), a.beats.to_string());
    kv.insert("seed".to_string(), a.seed.to_string());
    kv.insert("rearticulate_prob".to_string(), a.rearticulate_prob.to_string());
    kv.insert("no_chord_prob".to_string(), a.no_chord_prob.to_string());
    kv.insert("inversion_prob".to_string(), a.inversion_prob.to_string());
    let hash = config_hash(&kv);
    let mut text = format!("# config_hash = {hash}\n");
    for (k, v) in &kv {
        text.push_str(&format!("{k} = {v}\n"));
    }
    write_file(&a.out.join("corpus.cfg"), text)?;
    println!(
        "wrote {} pieces to {} ({} train, {} test)",
        a.pieces,
        a.out.display(),
        files.train_ids.len(),
        files.test_ids.len()
    );
    Ok(())
}

fn load_manifest_examples(path: &Path) -> CliResult<(Vec<ManifestEntry>, Vec<TrainingExample>)> {
    let entries = read_manifest(path).map_err(CliError::usage)?;
    if entries.is_empty() {
        return Err(CliError::usage(format!("{}: manifest lists no pieces", path.display())));
    }
    let examples = load_examples(&entries).map_err(CliError::usage)?;
    Ok((entries, examples))
}

fn accuracy_line(label: &str, r: &EvalReport) -> String {
    format!(
        "{label}: root {:.2}%  quality {:.2}%  bass {:.2}%  full {:.2}%",
        100.0 * r.macro_root,
        100.0 * r.macro_quality,
        100.0 * r.macro_bass,
        100.0 * r.macro_full
    )
}

fn eval_inputs(examples: &[TrainingExample]) -> Vec<EvalInput<'_>> {
    examples
        .iter()
        .map(|e| EvalInput {
            roll: &e.piece.roll,
            reference: &e.targets,
        })
        .collect()
}

pub fn cmd_train(a: &TrainArgs, threads: usize) -> CliResult<()> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        rc.set("seed", &s.to_string())?;
        rc.set("model_seed", &s.to_string())?;
    }
    for (k, v) in a.overrides.pairs() {
        rc.set(k, &v)?;
    }
    if let Some(m) = &a.manifest {
        rc.manifest = Some(m.clone());
    }
    if let Some(m) = &a.test_manifest {
        rc.test_manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        rc.out = Some(o.clone());
    }
    let manifest = rc
        .manifest
        .clone()
        .ok_or_else(|| CliError::usage("no training manifest (use --manifest or `manifest =` in the config)"))?;
    if !manifest.is_file() {
        return Err(CliError::usage(format!("manifest {} does not exist", manifest.display())));
    }
    let out = rc.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let (_, train) = load_manifest_examples(&manifest)?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| CliError::checkpoint(format!("{}: {e}", p.display())))?;
            let ckpt = decode_checkpoint(&bytes).map_err(CliError::checkpoint)?;
            Trainer::resume(&ckpt, &train)?
        }
        None => {
            rc.model.validate().map_err(CliError::usage)?;
            let model = ChordModel::new(rc.model.clone()).map_err(CliError::usage)?;
            Trainer::new(model, rc.train.clone(), &train)?
        }
    };
    trainer.threads = threads;
    let hash = config_hash(&rc.to_kv());
    write_file(&out.join("run.cfg"), rc.to_text())?;
    let outputs = TrainOutputs {
        checkpoint_dir: Some(out.join("checkpoints")),
        metrics: Some(out.join("metrics.ndjson")),
    };
    let total = trainer.total_steps();
    println!(
        "training {} pieces for {} steps (config {hash}, {} parameters)",
        train.len(),
        total,
        trainer.model.num_parameters()
    );
    run_training(&mut trainer, &train, &outputs, |r| {
        if r.step % 100 == 0 || r.step + 1 == total {
            println!("step {:>6}  lr {:.3e}  loss {:.4}", r.step, r.lr, r.loss);
        }
    })?;

    let model = &trainer.model;
    let mode = if model.config.use_iterative {
        DecodeMode::Iterative
    } else {
        DecodeMode::OneShot
    };
    let (report, _) = crate::inference::evaluate_model(model, &eval_inputs(&train), mode).map_err(CliError::usage)?;
    println!("{}", accuracy_line("train", &report));
    if let Some(tm) = &rc.test_manifest {
        let (_, test) = load_manifest_examples(tm)?;
        let (report, _) =
            crate::inference::evaluate_model(model, &eval_inputs(&test), mode).map_err(CliError::usage)?;
        println!("{}", accuracy_line("test", &report));
    }
    println!("checkpoint: {}", out.join("checkpoints").join("last.ckpt").display());
    Ok(())
}

/// Loads a model from a checkpoint; any decoding or layout problem is exit 3.
pub fn load_model(path: &Path) -> CliResult<(ChordModel, BTreeMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
    let ckpt = decode_checkpoint(&bytes).map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
    let cfg = ModelConfig::from_kv(&ckpt.metadata).map_err(CliError::checkpoint)?;
    let mut model = ChordModel::new(cfg).map_err(CliError::checkpoint)?;
    ckpt.restore_into(&mut model.params).map_err(CliError::checkpoint)?;
    Ok((model, ckpt.metadata))
}

fn check_compatible(model: &ModelConfig, config: &Path) -> CliResult<()> {
    let rc = RunConfig::from_file(config)?;
    let want = rc.model.to_kv();
    let have = model.to_kv();
    for key in ModelConfig::STRUCTURAL_KEYS {
        if want.get(key) != have.get(key) {
            return Err(CliError::checkpoint(format!(
                "config/checkpoint mismatch for {key}: config has {}, checkpoint has {}",
                want.get(key).map_or("?", |s| s),
                have.get(key).map_or("?", |s| s)
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TraceFile<'a> {
    config_hash: &'a str,
    seed: &'a str,
    trace: &'a DecodeTrace,
}

fn decode_piece(model: &ChordModel, roll: &crate::score_io::PianoRoll, one_shot: bool) -> CliResult<Decoded> {
    let d = if one_shot {
        one_shot_decode(model, roll, DecodeOptions::default())
    } else {
        iterative_decode(model, roll, DecodeOptions::default())
    };
    d.map_err(CliError::usage)
}

fn write_prediction(out: &Path, d: &Decoded, meta: &BTreeMap<String, String>, trace: bool) -> CliResult<()> {
    let hash = meta.get("config_hash").map_or("unknown", |s| s);
    let seed = meta.get("seed").map_or("unknown", |s| s);
    let mode = match d.trace.mode {
        DecodeMode::Iterative => "iterative",
        DecodeMode::OneShot => "one_shot",
    };
    let mut text = format!("# config_hash: {hash}\n# seed: {seed}\n# decoder: {mode}\n");
    text.push_str(&write_labels(&d.segments()));
    write_file(out, text)?;
    if trace {
        let file = TraceFile {
            config_hash: hash,
            seed,
            trace: &d.trace,
        };
        let json = serde_json::to_string(&file).expect("trace serializes");
        write_file(&trace_path(out), json)?;
    }
    Ok(())
}

pub fn trace_path(label_file: &Path) -> PathBuf {
    let mut s = label_file.as_os_str().to_owned();
    s.push(".trace.json");
    PathBuf::from(s)
}

pub fn cmd_infer(a: &InferArgs, threads: usize) -> CliResult<()> {
    let (model, meta) = load_model(&a.ckpt)?;
    if let Some(c) = &a.config {
        check_compatible(&model.config, c)?;
    }
    let one_shot = a.one_shot || !model.config.use_iterative;
    if let Some(midi) = &a.midi {
        let out = a.out.clone().unwrap_or_else(|| midi.with_extension("lab"));
        let bytes = fs::read(midi).map_err(|e| CliError::usage(format!("{}: {e}", midi.display())))?;
        let score = parse_midi(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", midi.display())))?;
        let total = score.notes.iter().map(|n| n.end()).fold(0.0, f64::max);
        let id = midi.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let roll = build_piano_roll(&id, &score.notes, total).roll;
        if roll.num_tokens() == 0 {
            return Err(CliError::usage(format!("{}: no notes", midi.display())));
        }
        let d = decode_piece(&model, &roll, one_shot)?;
        write_prediction(&out, &d, &meta, !a.no_trace)?;
        println!("wrote {}", out.display());
        return Ok(());
    }
    let (Some(manifest), Some(out_dir)) = (&a.manifest, &a.out_dir) else {
        return Err(CliError::usage("give --midi [--out] or --manifest --out-dir"));
    };
    let entries = read_manifest(manifest).map_err(CliError::usage)?;
    let results = parallel_map(&entries, threads, |e| -> CliResult<(String, Decoded)> {
        let piece = load_entry(e).map_err(CliError::usage)?;
        Ok((e.piece_id(), decode_piece(&model, &piece.roll, one_shot)?))
    });
    for r in results {
        let (id, d) = r?;
        write_prediction(&out_dir.join(format!("{id}.lab")), &d, &meta, !a.no_trace)?;
    }
    println!("wrote {} predictions to {}", entries.len(), out_dir.display());
    Ok(())
}

struct Reference {
    targets: FrameTargets,
    roll: Option<crate::score_io::PianoRoll>,
}

fn load_references(path: &Path) -> CliResult<BTreeMap<String, Reference>> {
    let mut out = BTreeMap::new();
    if path.is_file() {
        for e in read_manifest(path).map_err(CliError::usage)? {
            let piece = load_entry(&e).map_err(CliError::usage)?;
            let targets = crate::score_io::labels_to_frame_targets(&piece);
            out.insert(
                e.piece_id(),
                Reference {
                    targets,
                    roll: Some(piece.roll),
                },
            );
        }
    } else if path.is_dir() {
        for (id, file) in label_files(path)? {
            let text = fs::read_to_string(&file).map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
            let segs = load_labels(&text).map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
            let end = segs.last().map_or(0.0, |s| s.end);
            let tokens = frames_for_beats(end) / PATCH_SIZE;
            out.insert(
                id,
                Reference {
                    targets: segments_to_targets(&segs, tokens),
                    roll: None,
                },
            );
        }
    } else {
        return Err(CliError::usage(format!("{} does not exist", path.display())));
    }
    Ok(out)
}

fn label_files(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
    let mut v: Vec<(String, PathBuf)> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lab"))
        .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p.clone())))
        .collect();
    v.sort();
    Ok(v)
}

#[derive(Deserialize)]
struct TraceFileOwned {
    trace: DecodeTrace,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    if let Some(b) = &a.baseline {
        if b != "rule" {
            return Err(CliError::usage(format!("unknown baseline {b:?} (expected \"rule\")")));
        }
    }
    let refs = load_references(&a.reference)?;
    let preds = label_files(&a.pred)?;
    let pred_ids: Vec<&String> = preds.iter().map(|(i, _)| i).collect();
    let missing: Vec<&String> = refs.keys().filter(|k| !pred_ids.contains(k)).collect();
    let extra: Vec<&String> = pred_ids.iter().copied().filter(|k| !refs.contains_key(*k)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        let list = |v: &[&String]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        return Err(CliError::mismatch(format!(
            "piece sets differ; missing predictions: [{}]; unknown predictions: [{}]",
            list(&missing),
            list(&extra)
        )));
    }
    let mut pieces = Vec::new();
    let mut traces = Vec::new();
    for (id, file) in &preds {
        let reference = &refs[id].targets;
        let text = fs::read_to_string(file).map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
        let segs = load_labels(&text).map_err(|e| CliError::usage(format!("{}: {e}", file.display())))?;
        let prediction = segments_to_targets(&segs, reference.len());
        let mut boundary_probs = None;
        let tp = trace_path(file);
        if tp.is_file() {
            let json = fs::read_to_string(&tp).map_err(|e| CliError::usage(format!("{}: {e}", tp.display())))?;
            let t: TraceFileOwned =
                serde_json::from_str(&json).map_err(|e| CliError::usage(format!("{}: {e}", tp.display())))?;
            if t.trace.boundary_probs.len() == reference.len() {
                boundary_probs = Some(t.trace.boundary_probs.clone());
            }
            traces.push(t.trace);
        }
        pieces.push(EvalPiece {
            piece_id: id.clone(),
            reference: reference.clone(),
            prediction,
            boundary_probs,
        });
    }
    let mut report = evaluate(&pieces).map_err(CliError::mismatch)?;
    let iterative: Vec<DecodeTrace> = traces.into_iter().filter(|t| t.mode == DecodeMode::Iterative).collect();
    if !iterative.is_empty() {
        report.order = Some(order_statistics(&iterative));
    }
    let out = a.out.clone().unwrap_or_else(|| a.pred.clone());
    let mut kv = BTreeMap::new();
    kv.insert("pred".to_string(), a.pred.display().to_string());
    kv.insert("ref".to_string(), a.reference.display().to_string());
    kv.insert("baseline".to_string(), a.baseline.clone().unwrap_or_default());
    let hash = config_hash(&kv);
    write_report(&out, "eval", &report, &hash)?;
    println!("{}", accuracy_line("model", &report));

    if a.baseline.is_some() {
        let owned: Vec<(&crate::score_io::PianoRoll, &FrameTargets)> = refs
            .values()
            .map(|r| {
                r.roll
                    .as_ref()
                    .map(|roll| (roll, &r.targets))
                    .ok_or_else(|| CliError::usage("--baseline needs --ref to be a manifest with MIDI files"))
            })
            .collect::<CliResult<_>>()?;
        let inputs: Vec<EvalInput> = owned
            .iter()
            .map(|(roll, reference)| EvalInput { roll, reference })
            .collect();
        let base = evaluate_baseline(&inputs, &BaselineConfig::default()).map_err(CliError::mismatch)?;
        write_report(&out, "baseline", &base, &hash)?;
        println!("{}", accuracy_line("rule baseline", &base));
    }
    Ok(())
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport, hash: &str) -> CliResult<()> {
    let text = format!("config_hash: {hash}\n{}", report.to_text());
    write_file(&dir.join(format!("{stem}_report.txt")), text)?;
    let mut json: serde_json::Value = serde_json::from_str(&report.to_json()).expect("report json");
    json["config_hash"] = serde_json::Value::String(hash.to_string());
    write_file(
        &dir.join(format!("{stem}_summary.json")),
        serde_json::to_string_pretty(&json).expect("json"),
    )?;
    write_file(&dir.join(format!("{stem}_confusion.csv")), report.confusion_csv())
}

pub fn cmd_ablate(a: &AblateArgs) -> CliResult<()> {
    let (full, meta) = load_model(&a.ckpt)?;
    let plain = match &a.ckpt_no_boundary {
        Some(p) => {
            let (m, _) = load_model(p)?;
            if m.config.use_boundary {
                return Err(CliError::checkpoint(format!(
                    "{} was trained with use_boundary = true",
                    p.display()
                )));
            }
            Some(m)
        }
        None => None,
    };
    let (_, examples) = load_manifest_examples(&a.manifest)?;
    let rows = ablation_rows(&full, plain.as_ref(), &eval_inputs(&examples)).map_err(CliError::usage)?;
    let hash = meta.get("config_hash").cloned().unwrap_or_default();
    let table = format_ablation(&rows);
    print!("{table}");
    if let Some(out) = &a.out {
        write_file(&out.join("ablation.txt"), format!("config_hash: {hash}\n{table}"))?;
        let json = serde_json::json!({ "config_hash": hash, "rows": rows });
        write_file(&out.join("ablation.json"), serde_json::to_string_pretty(&json).expect("json"))?;
    }
    Ok(())
}
