//! Masked-element training: random slot masks, joint boundary and element
//! losses, 12-key augmentation, token-capped batching, AdamW with warm-up
//! and cosine decay, and resumable checkpoints.

pub mod synth;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ChordModel, DecoderTokens, ForwardOptions, ForwardOutput, ModelConfig, ModelError, SlotInput};
use crate::numerics::{
    adamw_step, clip_grad_norm, encode_checkpoint, parallel_map, lr_at_step, AdamWConfig, Checkpoint, Graph, Gradients,
    LrSchedule, NumericsError, OptimizerState,
};
use crate::score_io::{labels_to_frame_targets, LabeledPiece, ScoreError, NUM_KEYS};
use crate::vocab::{transpose, transpose_roll, FrameTargets, Segment};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} in batch [{}]", pieces.join(", "))]
    NonFiniteLoss { step: u64, pieces: Vec<String> },
    #[error("no masked slot in the batch")]
    DegenerateBatch,
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl TrainError {
    fn io(path: &Path, e: impl std::fmt::Display) -> TrainError {
        TrainError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

/// Optimization and data settings. Serialized as flat `key = value` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub max_grad_norm: f64,
    pub weight_decay: f64,
    /// Pieces per batch, at most.
    pub batch_pieces: usize,
    /// Token budget per batch; a single longer piece still forms its own batch.
    pub max_tokens: usize,
    /// Passes over the training pieces; 0 leaves the length to `max_steps`.
    pub epochs: usize,
    /// Optimizer steps; 0 leaves the length to `epochs`.
    pub max_steps: u64,
    pub seed: u64,
    pub mask_rate: f64,
    pub w_boundary: f64,
    pub w_root: f64,
    pub w_quality: f64,
    pub w_bass: f64,
    pub augment: bool,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 100,
            lr_min: 1e-5,
            lr_max: 1e-3,
            max_grad_norm: 2.0,
            weight_decay: 0.01,
            batch_pieces: 8,
            max_tokens: 4096,
            epochs: 0,
            max_steps: 2000,
            seed: 0,
            mask_rate: 0.5,
            w_boundary: 1.0,
            w_root: 1.0,
            w_quality: 1.0,
            w_bass: 1.0,
            augment: true,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return bad(format!("mask_rate {} outside (0, 1]", self.mask_rate));
        }
        let w = [self.w_boundary, self.w_root, self.w_quality, self.w_bass];
        if w.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad(format!("loss weights must be positive, got {w:?}"));
        }
        if self.batch_pieces == 0 || self.max_tokens == 0 {
            return bad("batch_pieces and max_tokens must be positive".into());
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return bad("one of epochs or max_steps must be positive".into());
        }
        if !(self.max_grad_norm > 0.0) || self.weight_decay < 0.0 {
            return bad("max_grad_norm must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            boundary: self.w_boundary,
            slots: [self.w_root, self.w_quality, self.w_bass],
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("warmup_steps", self.warmup_steps.to_string());
        put("lr_min", self.lr_min.to_string());
        put("lr_max", self.lr_max.to_string());
        put("max_grad_norm", self.max_grad_norm.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("batch_pieces", self.batch_pieces.to_string());
        put("max_tokens", self.max_tokens.to_string());
        put("epochs", self.epochs.to_string());
        put("max_steps", self.max_steps.to_string());
        put("seed", self.seed.to_string());
        put("mask_rate", self.mask_rate.to_string());
        put("w_boundary", self.w_boundary.to_string());
        put("w_root", self.w_root.to_string());
        put("w_quality", self.w_quality.to_string());
        put("w_bass", self.w_bass.to_string());
        put("augment", self.augment.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        m
    }

    /// Sets one field from text; returns whether the key belongs here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, TrainError> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value
                .parse()
                .map_err(|_| TrainError::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "warmup_steps" => self.warmup_steps = p(key, value)?,
            "lr_min" => self.lr_min = p(key, value)?,
            "lr_max" => self.lr_max = p(key, value)?,
            "max_grad_norm" => self.max_grad_norm = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "batch_pieces" => self.batch_pieces = p(key, value)?,
            "max_tokens" => self.max_tokens = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "max_steps" => self.max_steps = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "mask_rate" => self.mask_rate = p(key, value)?,
            "w_boundary" => self.w_boundary = p(key, value)?,
            "w_root" => self.w_root = p(key, value)?,
            "w_quality" => self.w_quality = p(key, value)?,
            "w_bass" => self.w_bass = p(key, value)?,
            "augment" => self.augment = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// FNV-1a over the sorted `key=value` lines, as 16 hex digits.
pub fn config_hash(kv: &BTreeMap<String, String>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (k, v) in kv {
        for b in k.bytes().chain(*b"=").chain(v.bytes()).chain(*b"\n") {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Independent generator for one training step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1) << 1);
    rng
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 1) | 1);
    rng
}

/// Which slots of each token are hidden from the decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    pub slots: Vec<[bool; 3]>,
}

impl MaskPattern {
    pub fn all(tokens: usize) -> MaskPattern {
        MaskPattern {
            slots: vec![[true; 3]; tokens],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn masked_count(&self, slot: usize) -> usize {
        self.slots.iter().filter(|m| m[slot]).count()
    }

    /// Decoder inputs: masked slots hidden, the rest showing their target class.
    pub fn decoder_tokens(&self, targets: &FrameTargets) -> Vec<DecoderTokens> {
        self.slots
            .iter()
            .enumerate()
            .map(|(t, m)| {
                std::array::from_fn(|s| {
                    if m[s] {
                        SlotInput::Masked
                    } else {
                        SlotInput::Committed(targets.element(t, s))
                    }
                })
            })
            .collect()
    }
}

/// Masks each slot independently with probability `mask_rate`, redrawing a
/// token's three slots until at least one is masked. At rate 0.5 each slot
/// ends up masked with probability 4/7.
pub fn sample_mask(rng: &mut impl Rng, tokens: usize, mask_rate: f64) -> MaskPattern {
    let slots = (0..tokens)
        .map(|_| {
            if mask_rate <= 0.0 {
                let mut m = [false; 3];
                m[rng.gen_range(0..3)] = true;
                return m;
            }
            // redraw until a slot is masked
            loop {
                let m: [bool; 3] = std::array::from_fn(|_| rng.gen_bool(mask_rate.min(1.0)));
                if m.iter().any(|x| *x) {
                    return m;
                }
            }
        })
        .collect();
    MaskPattern { slots }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub boundary: f64,
    /// Root, quality, bass.
    pub slots: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            boundary: 1.0,
            slots: [1.0; 3],
        }
    }
}

/// Denominators of the mean losses. Pieces of one batch share the batch
/// totals so that their losses add up to the batch mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossNorm {
    pub tokens: usize,
    pub masked: [usize; 3],
}

impl LossNorm {
    pub fn of(mask: &MaskPattern) -> LossNorm {
        LossNorm {
            tokens: mask.len(),
            masked: std::array::from_fn(|s| mask.masked_count(s)),
        }
    }

    pub fn merge(self, other: LossNorm) -> LossNorm {
        LossNorm {
            tokens: self.tokens + other.tokens,
            masked: std::array::from_fn(|s| self.masked[s] + other.masked[s]),
        }
    }
}

/// Weighted total plus unweighted component means.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: crate::numerics::Var,
    pub boundary: f64,
    /// Root, quality, bass.
    pub slots: [f64; 3],
}

/// `w_b * mean BCE over all tokens + sum_s w_s * mean CE over masked slots`.
///
/// With `norm = None` the means run over this piece alone.
pub fn compute_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    targets: &FrameTargets,
    mask: &MaskPattern,
    weights: &LossWeights,
    norm: Option<LossNorm>,
) -> Result<LossBreakdown, TrainError> {
    let n = out.encoding.tokens;
    if targets.len() != n || mask.len() != n {
        return Err(TrainError::Model(ModelError::Input(format!(
            "{n} tokens, {} targets, {} mask rows",
            targets.len(),
            mask.len()
        ))));
    }
    let norm = norm.unwrap_or_else(|| LossNorm::of(mask));
    if norm.masked.iter().sum::<usize>() == 0 {
        return Err(TrainError::DegenerateBatch);
    }
    let b_targets = targets.boundaries.iter().map(|&b| f64::from(b)).collect();
    let b = g.bce_with_logits(out.encoding.boundary_logits, b_targets, 1.0 / norm.tokens.max(1) as f64)?;
    let boundary = g.value(b).item();
    let mut total = g.scale(b, weights.boundary);
    let mut slots = [0.0; 3];
    for s in 0..3 {
        if norm.masked[s] == 0 {
            continue;
        }
        let tgt = (0..n)
            .map(|t| mask.slots[t][s].then(|| targets.element(t, s)))
            .collect();
        let logits = out.logits.slot(crate::model::Slot::ALL[s]);
        let ce = g.cross_entropy(logits, tgt, 1.0 / norm.masked[s] as f64)?;
        slots[s] = g.value(ce).item();
        let weighted = g.scale(ce, weights.slots[s]);
        total = g.add(total, weighted)?;
    }
    Ok(LossBreakdown { total, boundary, slots })
}

/// A piece ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub piece: LabeledPiece,
    pub targets: FrameTargets,
}

impl TrainingExample {
    pub fn new(piece: LabeledPiece) -> TrainingExample {
        let targets = labels_to_frame_targets(&piece);
        TrainingExample { piece, targets }
    }

    pub fn piece_id(&self) -> &str {
        self.piece.roll.piece_id()
    }

    pub fn tokens(&self) -> usize {
        self.targets.len()
    }
}

/// The representative of `k (mod 12)` that keeps every note on the keyboard,
/// preferring the upward shift.
fn fitting_shift(piece: &LabeledPiece, k: i32) -> i32 {
    let (mut lo, mut hi) = (usize::MAX, 0);
    for t in 0..piece.roll.num_frames() {
        for key in piece.roll.active_keys(t) {
            lo = lo.min(key);
            hi = hi.max(key);
        }
    }
    if lo == usize::MAX || k == 0 {
        return k;
    }
    let fits = |s: i32| lo as i32 + s >= 0 && hi as i32 + s < NUM_KEYS as i32;
    [k, k - 12].into_iter().find(|s| fits(*s)).unwrap_or(k)
}

/// Transposes a piece's roll and labels together by `k` semitones.
pub fn transpose_piece(piece: &LabeledPiece, k: i32) -> LabeledPiece {
    if k == 0 {
        return piece.clone();
    }
    let shift = fitting_shift(piece, k);
    LabeledPiece {
        roll: transpose_roll(&piece.roll, shift),
        segments: piece
            .segments
            .iter()
            .map(|s| Segment {
                label: transpose(s.label, k),
                ..*s
            })
            .collect(),
        key: piece.key.map(|mut key| {
            key.tonic = ((key.tonic as i32 + k).rem_euclid(12)) as u8;
            key
        }),
        total_beats: piece.total_beats,
    }
}

/// Applies a uniformly drawn 12-key shift; returns the shift used.
pub fn augment_piece(piece: &LabeledPiece, rng: &mut impl Rng) -> (LabeledPiece, i32) {
    let k = rng.gen_range(0..12);
    (transpose_piece(piece, k), k)
}

/// Pieces of each batch of one epoch, by index into the training set.
pub fn epoch_batches(tokens: &[usize], cfg: &TrainConfig, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.shuffle(&mut epoch_rng(cfg.seed, epoch));
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_tokens = 0;
    for i in order {
        if !cur.is_empty() && (cur.len() == cfg.batch_pieces || cur_tokens + tokens[i] > cfg.max_tokens) {
            batches.push(std::mem::take(&mut cur));
            cur_tokens = 0;
        }
        cur.push(i);
        cur_tokens += tokens[i];
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub boundary: f64,
    pub root: f64,
    pub quality: f64,
    pub bass: f64,
    pub grad_norm: f64,
    pub pieces: usize,
    pub tokens: usize,
}

/// Model, optimizer and schedule with a step counter; everything else a
/// step needs is derived from `(seed, step)`.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ChordModel,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub schedule: LrSchedule,
    pub step: u64,
    /// Worker threads for per-piece passes; results do not depend on it.
    pub threads: usize,
    plan: Vec<Vec<usize>>,
    plan_epoch: u64,
    plan_start: u64,
}

impl Trainer {
    pub fn new(model: ChordModel, config: TrainConfig, data: &[TrainingExample]) -> Result<Trainer, TrainError> {
        config.validate()?;
        if data.is_empty() {
            return Err(TrainError::Config("no training pieces".into()));
        }
        let tokens: Vec<usize> = data.iter().map(|e| e.tokens()).collect();
        let per_epoch = epoch_batches(&tokens, &config, 0).len() as u64;
        let by_epochs = config.epochs as u64 * per_epoch;
        let total = match (config.max_steps, by_epochs) {
            (0, e) => e,
            (m, 0) => m,
            (m, e) => m.min(e),
        };
        let warmup = config.warmup_steps.min(total.saturating_sub(1));
        let schedule = LrSchedule::new(warmup, config.lr_min, config.lr_max, total)?;
        let optimizer = OptimizerState::new(
            &model.params,
            AdamWConfig {
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
        );
        Ok(Trainer {
            model,
            optimizer,
            config,
            schedule,
            step: 0,
            threads: 1,
            plan: Vec::new(),
            plan_epoch: u64::MAX,
            plan_start: 0,
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.schedule.total_steps
    }

    /// Learning rate applied by the update of (0-based) step `step`.
    pub fn lr_for(&self, step: u64) -> f64 {
        lr_at_step(&self.schedule, step + 1)
    }

    /// Indices into `data` of the pieces trained on at `step`.
    pub fn batch_indices(&mut self, step: u64, data: &[TrainingExample]) -> Vec<usize> {
        let tokens: Vec<usize> = data.iter().map(|e| e.tokens()).collect();
        self.batch_for(step, &tokens)
    }

    fn batch_for(&mut self, step: u64, tokens: &[usize]) -> Vec<usize> {
        if self.plan_epoch == u64::MAX || step < self.plan_start {
            self.plan_epoch = 0;
            self.plan_start = 0;
            self.plan = epoch_batches(tokens, &self.config, 0);
        }
        while step >= self.plan_start + self.plan.len() as u64 {
            self.plan_start += self.plan.len() as u64;
            self.plan_epoch += 1;
            self.plan = epoch_batches(tokens, &self.config, self.plan_epoch);
        }
        self.plan[(step - self.plan_start) as usize].clone()
    }

    /// Runs one optimizer step on the batch scheduled for `self.step`.
    pub fn train_step(&mut self, data: &[TrainingExample]) -> Result<StepRecord, TrainError> {
        let tokens: Vec<usize> = data.iter().map(|e| e.tokens()).collect();
        let step = self.step;
        let batch = self.batch_for(step, &tokens);
        let mut rng = step_rng(self.config.seed, step);

        let mut prepared = Vec::with_capacity(batch.len());
        for &i in &batch {
            let ex = &data[i];
            let ex = if self.config.augment {
                let (piece, _) = augment_piece(&ex.piece, &mut rng);
                TrainingExample::new(piece)
            } else {
                ex.clone()
            };
            let mask = sample_mask(&mut rng, ex.tokens(), self.config.mask_rate);
            let dropout_seed: u64 = rng.gen();
            prepared.push((ex, mask, dropout_seed));
        }
        let norm = prepared
            .iter()
            .map(|(_, m, _)| LossNorm::of(m))
            .reduce(LossNorm::merge)
            .expect("batch is non-empty");
        let weights = self.config.weights();
        let names = || prepared.iter().map(|(e, ..)| e.piece_id().to_string()).collect::<Vec<_>>();

        let model = &self.model;
        let per_piece = parallel_map(&prepared, self.threads, |(ex, mask, seed)| {
            let mut g = Graph::new(&model.params);
            let mut piece_rng = ChaCha8Rng::seed_from_u64(*seed);
            let slots = mask.decoder_tokens(&ex.targets);
            let opts = ForwardOptions {
                dropout_rng: Some(&mut piece_rng),
                teacher_boundaries: model
                    .config
                    .teacher_forced_boundaries
                    .then_some(&ex.targets.boundaries[..]),
            };
            let out = model.forward_full(&mut g, &ex.piece.roll, &slots, opts)?;
            let parts = compute_loss(&mut g, &out, &ex.targets, mask, &weights, Some(norm))?;
            let value = g.value(parts.total).item();
            if !value.is_finite() {
                return Ok((value, parts.boundary, parts.slots, None));
            }
            let grads = g.backward(parts.total)?;
            Ok::<_, TrainError>((value, parts.boundary, parts.slots, Some(grads)))
        });

        let mut grads = Gradients::new(self.model.params.len());
        let mut record = StepRecord {
            step,
            lr: self.lr_for(step),
            loss: 0.0,
            boundary: 0.0,
            root: 0.0,
            quality: 0.0,
            bass: 0.0,
            grad_norm: 0.0,
            pieces: prepared.len(),
            tokens: norm.tokens,
        };
        for result in per_piece {
            let (value, boundary, slots, piece_grads) = result?;
            let Some(piece_grads) = piece_grads else {
                return Err(TrainError::NonFiniteLoss { step, pieces: names() });
            };
            record.loss += value;
            record.boundary += boundary;
            record.root += slots[0];
            record.quality += slots[1];
            record.bass += slots[2];
            grads.merge(&piece_grads);
        }

        let params = &mut self.model.params;
        params.zero_grads();
        params.accumulate(&grads)?;
        record.grad_norm = clip_grad_norm(params, self.config.max_grad_norm);
        adamw_step(params, &mut self.optimizer, record.lr).map_err(|e| match e {
            NumericsError::NanGradient(_) => TrainError::NonFiniteLoss { step, pieces: names() },
            other => other.into(),
        })?;
        self.step += 1;
        Ok(record)
    }

    /// Metadata embedded in checkpoints: both configs, the step, and a hash
    /// of the configs.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut kv = self.model.config.to_kv();
        kv.extend(self.config.to_kv());
        let hash = config_hash(&kv);
        kv.insert("config_hash".into(), hash);
        kv.insert("step".into(), self.step.to_string());
        kv.insert("total_steps".into(), self.total_steps().to_string());
        kv
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        encode_checkpoint(&self.metadata(), &self.model.params, Some(&self.optimizer))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.checkpoint_bytes()).map_err(|e| TrainError::io(path, e))
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::save`].
    pub fn resume(ckpt: &Checkpoint, data: &[TrainingExample]) -> Result<Trainer, TrainError> {
        let model_cfg = ModelConfig::from_kv(&ckpt.metadata)?;
        let mut cfg = TrainConfig::default();
        for (k, v) in &ckpt.metadata {
            cfg.set(k, v)?;
        }
        let mut model = ChordModel::new(model_cfg)?;
        ckpt.restore_into(&mut model.params)?;
        let mut trainer = Trainer::new(model, cfg, data)?;
        if let Some(opt) = &ckpt.optimizer {
            trainer.optimizer = opt.clone();
        }
        trainer.step = ckpt
            .metadata
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::Config("checkpoint has no step".into()))?;
        Ok(trainer)
    }
}

/// Where the training loop writes.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Runs the trainer to completion, logging one JSON line per step and
/// saving checkpoints every `checkpoint_every` steps and at the end.
/// `on_step` sees each record as it is produced.
pub fn run_training(
    trainer: &mut Trainer,
    data: &[TrainingExample],
    outputs: &TrainOutputs,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>, TrainError> {
    let mut log = match &outputs.metrics {
        Some(p) => {
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(trainer.step > 0)
                .write(true)
                .truncate(trainer.step == 0)
                .open(p)
                .map_err(|e| TrainError::io(p, e))?;
            Some((p.clone(), std::io::BufWriter::new(file)))
        }
        None => None,
    };
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    }
    let mut records = Vec::new();
    while !trainer.is_done() {
        let rec = trainer.train_step(data)?;
        on_step(&rec);
        if let Some((p, w)) = &mut log {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| TrainError::io(p, e))?;
        }
        records.push(rec);
        if let Some(dir) = &outputs.checkpoint_dir {
            let every = trainer.config.checkpoint_every;
            if trainer.is_done() || (every > 0 && trainer.step.is_multiple_of(every)) {
                trainer.save(&checkpoint_path(dir, trainer.step))?;
                trainer.save(&dir.join("last.ckpt"))?;
            }
        }
    }
    if let Some((p, w)) = &mut log {
        w.flush().map_err(|e| TrainError::io(p, e))?;
    }
    Ok(records)
}

/// Builds a trainer and runs it: the whole training pipeline in one call.
pub fn train_loop(
    data: &[TrainingExample],
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    outputs: &TrainOutputs,
) -> Result<(Trainer, Vec<StepRecord>), TrainError> {
    let model = ChordModel::new(model_cfg)?;
    let mut trainer = Trainer::new(model, train_cfg, data)?;
    let records = run_training(&mut trainer, data, outputs, |_| {})?;
    Ok((trainer, records))
}

/// Loads every manifest entry as a training example.
pub fn load_examples(entries: &[crate::score_io::ManifestEntry]) -> Result<Vec<TrainingExample>, TrainError> {
    entries
        .iter()
        .map(|e| Ok(TrainingExample::new(crate::score_io::load_entry(e)?)))
        .collect()
}
