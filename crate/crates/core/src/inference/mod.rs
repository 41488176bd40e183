//! Decoding, evaluation, decoding-order statistics and the template baseline.

mod baseline;
mod eval;

use serde::{Deserialize, Serialize};

use crate::model::{ChordModel, DecoderTokens, ForwardOptions, ModelError, Slot, SlotInput, ALL_MASKED};
use crate::numerics::{softmax, Graph};
use crate::score_io::{PianoRoll, PATCH_SIZE};
use crate::vocab::{frames_to_segments, ChordLabel, FrameTargets, Segment};

pub use baseline::{rule_based_baseline, template_scores, BaselineConfig};
pub use eval::{
    evaluate, order_statistics, BoundaryScores, EvalError, EvalPiece, EvalReport, OrderStats,
    PieceScores, CHAINS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Iterative,
    OneShot,
}

/// Decoding record of one token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    /// Slots in commit order. One-shot decoding commits all at once and
    /// records slot order.
    pub order: Vec<Slot>,
    /// `confidences[i][s]`: max softmax of slot `s` at iteration `i`, `None`
    /// once the slot is committed.
    pub confidences: Vec<[Option<f64>; 3]>,
    pub label: String,
    pub classes: [usize; 3],
}

/// Decoding record of one piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub piece_id: String,
    pub mode: DecodeMode,
    /// Boundary probability per token (recorded, not used by decoding).
    pub boundary_probs: Vec<f64>,
    pub tokens: Vec<TokenTrace>,
    /// Per iteration, the logits of all tokens for each slot, flattened
    /// `[tokens * classes]`. Only kept when requested.
    #[serde(skip)]
    pub logits: Vec<[Vec<f64>; 3]>,
}

impl DecodeTrace {
    /// Slot inputs in force at iteration `i`: everything committed before it.
    pub fn inputs_at(&self, iteration: usize) -> Vec<DecoderTokens> {
        self.tokens
            .iter()
            .map(|t| {
                let mut x = ALL_MASKED;
                if self.mode == DecodeMode::Iterative {
                    for slot in t.order.iter().take(iteration) {
                        x[slot.index()] = SlotInput::Committed(t.classes[slot.index()]);
                    }
                }
                x
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Keep every iteration's logits in the trace.
    pub record_logits: bool,
}

/// Decoded labels with their trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub predictions: FrameTargets,
    pub trace: DecodeTrace,
}

impl Decoded {
    pub fn segments(&self) -> Vec<Segment> {
        frames_to_segments(&normalized(&self.predictions), PATCH_SIZE)
    }
}

/// Collapses predictions that mix N with pitched elements to N, so that
/// they survive a label-file round trip.
pub fn normalized(pred: &FrameTargets) -> FrameTargets {
    let labels: Vec<ChordLabel> = pred
        .labels()
        .into_iter()
        .map(|l| {
            let [r, q, b] = l.indices();
            ChordLabel::new(r as u8, l.quality(), b as u8)
                .or_else(|| {
                    (r < 12 && q < 14).then(|| ChordLabel::root_position(r as u8, l.quality()))
                })
                .unwrap_or(ChordLabel::NO_CHORD)
        })
        .collect();
    FrameTargets::from_labels(&labels)
}

fn argmax_conf(row: &[f64]) -> (usize, f64) {
    let p = softmax(row);
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    (best, p[best])
}

/// The open slot with the highest confidence; ties go to the earlier slot
/// (root, then quality, then bass). `None` when every slot is committed.
pub fn pick_commit(confidences: &[Option<f64>; 3]) -> Option<Slot> {
    let mut best: Option<(Slot, f64)> = None;
    for s in Slot::ALL {
        if let Some(p) = confidences[s.index()] {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((s, p));
            }
        }
    }
    best.map(|(s, _)| s)
}

/// Encoder half for a piece, shared by both decoders.
fn encode(
    model: &ChordModel,
    g: &mut Graph,
    roll: &PianoRoll,
) -> Result<crate::model::PieceEncoding, ModelError> {
    model.encode_piece(g, roll, &mut ForwardOptions::default())
}

fn sigmoid_all(g: &Graph, v: crate::numerics::Var) -> Vec<f64> {
    g.value(v).data().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect()
}

/// Runs the decoder over all tokens with the given inputs; returns the
/// logits of each slot as `[tokens * classes]`.
pub fn decode_logits(
    model: &ChordModel,
    g: &mut Graph,
    enc: &crate::model::PieceEncoding,
    inputs: &[DecoderTokens],
) -> Result<[Vec<f64>; 3], ModelError> {
    let x = model.decoder_inputs(g, inputs)?;
    let out = model.decode_step(g, x, enc.context, enc.tokens, None)?;
    Ok(Slot::ALL.map(|s| g.value(out.slot(s)).data().to_vec()))
}

/// Confidence-ordered decoding: every token starts fully masked and, over
/// three decoder passes, commits the argmax of its most confident open slot
/// (ties go to root, then quality, then bass).
pub fn iterative_decode(model: &ChordModel, roll: &PianoRoll, opts: DecodeOptions) -> Result<Decoded, ModelError> {
    let mut g = Graph::new(&model.params);
    let enc = encode(model, &mut g, roll)?;
    let n = enc.tokens;
    let counts = crate::model::CLASS_COUNTS;
    let mut inputs: Vec<DecoderTokens> = vec![ALL_MASKED; n];
    let mut traces: Vec<TokenTrace> = (0..n)
        .map(|_| TokenTrace {
            order: Vec::with_capacity(3),
            confidences: Vec::with_capacity(3),
            label: String::new(),
            classes: [0; 3],
        })
        .collect();
    let mut kept = Vec::new();
    for _ in 0..3 {
        let logits = decode_logits(model, &mut g, &enc, &inputs)?;
        for t in 0..n {
            let mut conf = [None; 3];
            let mut argmax = [0; 3];
            for s in Slot::ALL {
                if inputs[t][s.index()] != SlotInput::Masked {
                    continue;
                }
                let c = counts[s.index()];
                let (class, p) = argmax_conf(&logits[s.index()][t * c..(t + 1) * c]);
                conf[s.index()] = Some(p);
                argmax[s.index()] = class;
            }
            let slot = pick_commit(&conf).expect("an open slot remains");
            let class = argmax[slot.index()];
            inputs[t][slot.index()] = SlotInput::Committed(class);
            traces[t].order.push(slot);
            traces[t].classes[slot.index()] = class;
            traces[t].confidences.push(conf);
        }
        if opts.record_logits {
            kept.push(logits);
        }
    }
    finish(model, &g, &enc, roll, DecodeMode::Iterative, traces, kept)
}

/// Single decoder pass with every slot masked; all three argmaxes commit at once.
pub fn one_shot_decode(model: &ChordModel, roll: &PianoRoll, opts: DecodeOptions) -> Result<Decoded, ModelError> {
    let mut g = Graph::new(&model.params);
    let enc = encode(model, &mut g, roll)?;
    let n = enc.tokens;
    let counts = crate::model::CLASS_COUNTS;
    let logits = decode_logits(model, &mut g, &enc, &vec![ALL_MASKED; n])?;
    let traces = (0..n)
        .map(|t| {
            let mut conf = [None; 3];
            let mut classes = [0; 3];
            for s in 0..3 {
                let c = counts[s];
                let (class, p) = argmax_conf(&logits[s][t * c..(t + 1) * c]);
                conf[s] = Some(p);
                classes[s] = class;
            }
            TokenTrace {
                order: Slot::ALL.to_vec(),
                confidences: vec![conf],
                label: String::new(),
                classes,
            }
        })
        .collect();
    let kept = if opts.record_logits { vec![logits] } else { Vec::new() };
    finish(model, &g, &enc, roll, DecodeMode::OneShot, traces, kept)
}

fn finish(
    _model: &ChordModel,
    g: &Graph,
    enc: &crate::model::PieceEncoding,
    roll: &PianoRoll,
    mode: DecodeMode,
    mut tokens: Vec<TokenTrace>,
    logits: Vec<[Vec<f64>; 3]>,
) -> Result<Decoded, ModelError> {
    let labels: Vec<ChordLabel> = tokens
        .iter()
        .map(|t| ChordLabel::from_indices(t.classes[0], t.classes[1], t.classes[2]))
        .collect();
    for (t, l) in tokens.iter_mut().zip(&labels) {
        t.label = l.to_string();
    }
    Ok(Decoded {
        predictions: FrameTargets::from_labels(&labels),
        trace: DecodeTrace {
            piece_id: roll.piece_id().to_string(),
            mode,
            boundary_probs: sigmoid_all(g, enc.boundary_logits),
            tokens,
            logits,
        },
    })
}

/// Dispatches on the model's `use_iterative` flag.
pub fn decode(model: &ChordModel, roll: &PianoRoll, opts: DecodeOptions) -> Result<Decoded, ModelError> {
    if model.config.use_iterative {
        iterative_decode(model, roll, opts)
    } else {
        one_shot_decode(model, roll, opts)
    }
}

/// Re-runs each recorded iteration from the trace's commits and returns the
/// logits, for comparison with the logits kept during decoding.
pub fn replay_trace(model: &ChordModel, roll: &PianoRoll, trace: &DecodeTrace) -> Result<Vec<[Vec<f64>; 3]>, ModelError> {
    let mut g = Graph::new(&model.params);
    let enc = encode(model, &mut g, roll)?;
    let iterations = match trace.mode {
        DecodeMode::Iterative => 3,
        DecodeMode::OneShot => 1,
    };
    (0..iterations)
        .map(|i| decode_logits(model, &mut g, &enc, &trace.inputs_at(i)))
        .collect()
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    /// `None` when the row's model was not supplied.
    pub root: Option<f64>,
    pub quality: Option<f64>,
    pub bass: Option<f64>,
    pub full: Option<f64>,
}

impl AblationRow {
    fn from_report(name: &str, r: Option<&EvalReport>) -> AblationRow {
        AblationRow {
            name: name.to_string(),
            root: r.map(|r| r.macro_root),
            quality: r.map(|r| r.macro_quality),
            bass: r.map(|r| r.macro_bass),
            full: r.map(|r| r.macro_full),
        }
    }
}

/// A piece to evaluate: roll plus reference targets.
#[derive(Debug, Clone)]
pub struct EvalInput<'a> {
    pub roll: &'a PianoRoll,
    pub reference: &'a FrameTargets,
}

/// Decodes and scores a set of pieces with one decoder.
pub fn evaluate_model(
    model: &ChordModel,
    pieces: &[EvalInput<'_>],
    mode: DecodeMode,
) -> Result<(EvalReport, Vec<DecodeTrace>), crate::inference::EvalError> {
    let mut evals = Vec::with_capacity(pieces.len());
    let mut traces = Vec::with_capacity(pieces.len());
    for p in pieces {
        let d = match mode {
            DecodeMode::Iterative => iterative_decode(model, p.roll, DecodeOptions::default()),
            DecodeMode::OneShot => one_shot_decode(model, p.roll, DecodeOptions::default()),
        }
        .map_err(|e| EvalError::Model(e.to_string()))?;
        evals.push(EvalPiece {
            piece_id: p.roll.piece_id().to_string(),
            reference: p.reference.clone(),
            prediction: d.predictions,
            boundary_probs: Some(d.trace.boundary_probs.clone()),
        });
        traces.push(d.trace);
    }
    let mut report = evaluate(&evals)?;
    if mode == DecodeMode::Iterative && !traces.is_empty() {
        report.order = Some(order_statistics(&traces));
    }
    Ok((report, traces))
}

/// Scores the template baseline on a set of pieces.
pub fn evaluate_baseline(pieces: &[EvalInput<'_>], cfg: &BaselineConfig) -> Result<EvalReport, EvalError> {
    let evals: Vec<EvalPiece> = pieces
        .iter()
        .map(|p| EvalPiece {
            piece_id: p.roll.piece_id().to_string(),
            reference: p.reference.clone(),
            prediction: rule_based_baseline(p.roll, cfg),
            boundary_probs: None,
        })
        .collect();
    evaluate(&evals)
}

/// The four comparison rows: full model, the same checkpoint decoded in one
/// shot, a boundary-free model decoded in one shot, and the template baseline.
pub fn ablation_rows(
    full: &ChordModel,
    no_boundary: Option<&ChordModel>,
    pieces: &[EvalInput<'_>],
) -> Result<Vec<AblationRow>, EvalError> {
    let (iter, _) = evaluate_model(full, pieces, DecodeMode::Iterative)?;
    let (shot, _) = evaluate_model(full, pieces, DecodeMode::OneShot)?;
    let plain = match no_boundary {
        Some(m) => Some(evaluate_model(m, pieces, DecodeMode::OneShot)?.0),
        None => None,
    };
    let rule = evaluate_baseline(pieces, &BaselineConfig::default())?;
    Ok(vec![
        AblationRow::from_report("full", Some(&iter)),
        AblationRow::from_report("w/o ID", Some(&shot)),
        AblationRow::from_report("w/o BD+ID", plain.as_ref()),
        AblationRow::from_report("rule-based", Some(&rule)),
    ])
}

/// Plain-text table of ablation rows, accuracies in percent.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("     n/a".to_string(), |v| format!("{:8.2}", 100.0 * v));
    let mut out = format!("{:<12}{:>8}{:>8}{:>8}{:>8}\n", "model", "root", "quality", "bass", "full");
    for r in rows {
        out.push_str(&format!(
            "{:<12}{}{}{}{}\n",
            r.name,
            pct(r.root),
            pct(r.quality),
            pct(r.bass),
            pct(r.full)
        ));
    }
    out
}
