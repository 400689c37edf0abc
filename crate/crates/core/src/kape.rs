//! Knowledge activation probability entropy.
//!
//! A neuron's activation probability under a setting is the fraction of
//! counted positions where its gate activation is strictly positive. The
//! internal-knowledge (IK) and external-knowledge (EK) probabilities are
//! L1-normalized into a pair whose binary entropy (nats) is the KAPE score.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::error::{Error, Result};
use crate::model::{forward, DeactivationSet, ForwardOptions, ModelWeights, TraceLevel};
use crate::tokenizer::TokenId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Positions that predict the teacher-forced reference answer.
    #[default]
    AnswerSpan,
    All,
}

impl fmt::Display for PositionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositionMode::AnswerSpan => "answer_span",
            PositionMode::All => "all",
        })
    }
}

impl FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "answer_span" | "answer-span" => Ok(PositionMode::AnswerSpan),
            "all" => Ok(PositionMode::All),
            other => Err(Error::Config(format!("unknown position mode `{other}`"))),
        }
    }
}

/// One sequence to count over: a prompt and the answer that follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct CountItem {
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

impl CountItem {
    /// Teacher-forced input and the positions to count.
    pub fn sequence(&self, mode: PositionMode) -> (Vec<TokenId>, Vec<usize>) {
        let mut seq = self.prompt.clone();
        if self.answer.len() > 1 {
            seq.extend_from_slice(&self.answer[..self.answer.len() - 1]);
        }
        let positions = match mode {
            PositionMode::All => (0..seq.len()).collect(),
            PositionMode::AnswerSpan if self.answer.is_empty() || self.prompt.is_empty() => {
                Vec::new()
            }
            PositionMode::AnswerSpan => {
                let start = self.prompt.len() - 1;
                (start..start + self.answer.len()).collect()
            }
        };
        (seq, positions)
    }
}

/// Per-neuron counts of strictly positive gate activations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationCounts {
    pub n_layers: usize,
    pub d_ff: usize,
    /// `[layer * d_ff + neuron]`
    pub active: Vec<u64>,
    pub positions: u64,
    pub examples: usize,
    pub skipped: usize,
}

impl ActivationCounts {
    pub fn new(n_layers: usize, d_ff: usize) -> Self {
        Self {
            n_layers,
            d_ff,
            active: vec![0; n_layers * d_ff],
            positions: 0,
            examples: 0,
            skipped: 0,
        }
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.active.iter_mut().zip(&other.active) {
            *a += b;
        }
        self.positions += other.positions;
        self.examples += other.examples;
        self.skipped += other.skipped;
        self
    }

    /// Raw activation probabilities, zero when nothing was counted.
    pub fn probabilities(&self) -> Vec<f64> {
        if self.positions == 0 {
            return vec![0.0; self.active.len()];
        }
        self.active
            .iter()
            .map(|&c| c as f64 / self.positions as f64)
            .collect()
    }
}

/// Counts gate activations over `items`; items with no countable position
/// are skipped and tallied.
pub fn activation_counts<S: Scalar>(
    weights: &ModelWeights<S>,
    items: &[CountItem],
    mode: PositionMode,
) -> Result<ActivationCounts> {
    let (n, f) = (weights.config.n_layers, weights.config.d_ff);
    items
        .par_iter()
        .map(|item| {
            let mut c = ActivationCounts::new(n, f);
            let (seq, positions) = item.sequence(mode);
            if positions.is_empty() || seq.is_empty() {
                c.skipped = 1;
                return Ok(c);
            }
            let (_, trace) = forward(weights, &seq, &ForwardOptions::traced(TraceLevel::Full))?;
            for (l, gate) in trace.gate.iter().enumerate() {
                for &p in &positions {
                    for (j, &g) in gate.row(p).iter().enumerate() {
                        if g > S::zero() {
                            c.active[l * f + j] += 1;
                        }
                    }
                }
            }
            c.positions = positions.len() as u64;
            c.examples = 1;
            Ok(c)
        })
        .try_reduce(|| ActivationCounts::new(n, f), |a, b| Ok(a.merge(b)))
}

/// Raw probability per neuron, `[layer * d_ff + neuron]`.
pub fn activation_probability<S: Scalar>(
    weights: &ModelWeights<S>,
    items: &[CountItem],
    mode: PositionMode,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Dataset(
            "activation statistics need a nonempty dataset".into(),
        ));
    }
    Ok(activation_counts(weights, items, mode)?.probabilities())
}

/// L1-normalized pair, or `None` when both are zero.
pub fn normalize_pair(raw_ik: f64, raw_ek: f64) -> Option<(f64, f64)> {
    let s = raw_ik + raw_ek;
    if s <= 0.0 {
        return None;
    }
    Some((raw_ik / s, raw_ek / s))
}

fn xlnx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Binary entropy in nats.
pub fn kape_score(p_ik: f64, p_ek: f64) -> f64 {
    if p_ik == p_ek {
        return std::f64::consts::LN_2;
    }
    let h = -(xlnx(p_ik) + xlnx(p_ek));
    if h <= 0.0 {
        0.0
    } else {
        h.min(std::f64::consts::LN_2)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NeuronClass {
    #[serde(rename = "IK")]
    Ik,
    #[serde(rename = "EK")]
    Ek,
    #[default]
    #[serde(rename = "none")]
    None,
}

impl fmt::Display for NeuronClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeuronClass::Ik => "IK",
            NeuronClass::Ek => "EK",
            NeuronClass::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KapeRow {
    pub layer: usize,
    pub neuron: usize,
    pub raw_ik: f64,
    pub raw_ek: f64,
    /// Empty when both raw probabilities are zero.
    pub p_ik: Option<f64>,
    pub p_ek: Option<f64>,
    pub kape: f64,
    pub class: NeuronClass,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KapeTable {
    pub rows: Vec<KapeRow>,
}

impl KapeTable {
    /// Builds the table from raw probabilities laid out `[layer * d_ff + j]`.
    pub fn from_raw(d_ff: usize, raw_ik: &[f64], raw_ek: &[f64]) -> Result<Self> {
        if raw_ik.len() != raw_ek.len() || d_ff == 0 || raw_ik.len() % d_ff != 0 {
            return Err(Error::Shape(format!(
                "raw probability vectors of length {} and {} do not tile d_ff = {d_ff}",
                raw_ik.len(),
                raw_ek.len()
            )));
        }
        let rows = raw_ik
            .iter()
            .zip(raw_ek)
            .enumerate()
            .map(|(k, (&ik, &ek))| KapeRow::new(k / d_ff, k % d_ff, ik, ek))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, class: NeuronClass) -> usize {
        self.rows.iter().filter(|r| r.class == class).count()
    }
}

impl KapeRow {
    pub fn new(layer: usize, neuron: usize, raw_ik: f64, raw_ek: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&raw_ik) || !(0.0..=1.0).contains(&raw_ek) {
            return Err(Error::Contract(format!(
                "raw probabilities ({raw_ik}, {raw_ek}) outside [0, 1] at ({layer}, {neuron})"
            )));
        }
        let pair = normalize_pair(raw_ik, raw_ek);
        let kape = pair.map_or(std::f64::consts::LN_2, |(a, b)| kape_score(a, b));
        Ok(Self {
            layer,
            neuron,
            raw_ik,
            raw_ek,
            p_ik: pair.map(|p| p.0),
            p_ek: pair.map(|p| p.1),
            kape,
            class: NeuronClass::None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub fraction: f64,
    pub min_raw: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            fraction: 0.01,
            min_raw: 0.2,
        }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction {} outside (0, 1]",
                self.fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.min_raw) {
            return Err(Error::Config(format!(
                "min_raw {} outside [0, 1]",
                self.min_raw
            )));
        }
        Ok(())
    }

    pub fn candidate_count(&self, n: usize) -> usize {
        ((self.fraction * n as f64).ceil() as usize).min(n)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub candidates: usize,
    pub ik: DeactivationSet,
    pub ek: DeactivationSet,
}

/// Lowest-KAPE candidates, thresholded and classified. Updates the
/// table's class column.
pub fn select_knowledge_neurons(
    table: &mut KapeTable,
    params: SelectionParams,
) -> Result<Selection> {
    params.validate()?;
    let mut order: Vec<usize> = (0..table.rows.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&table.rows[a], &table.rows[b]);
        ra.kape
            .total_cmp(&rb.kape)
            .then(ra.layer.cmp(&rb.layer))
            .then(ra.neuron.cmp(&rb.neuron))
    });
    let candidates = params.candidate_count(order.len());
    let mut sel = Selection {
        candidates,
        ..Default::default()
    };
    for r in table.rows.iter_mut() {
        r.class = NeuronClass::None;
    }
    for &k in &order[..candidates] {
        let r = &mut table.rows[k];
        if r.raw_ik.max(r.raw_ek) < params.min_raw {
            continue;
        }
        match r.raw_ik.partial_cmp(&r.raw_ek) {
            Some(Ordering::Greater) => {
                r.class = NeuronClass::Ik;
                sel.ik.insert(r.layer, r.neuron);
            }
            Some(Ordering::Less) => {
                r.class = NeuronClass::Ek;
                sel.ek.insert(r.layer, r.neuron);
            }
            _ => {}
        }
    }
    Ok(sel)
}
