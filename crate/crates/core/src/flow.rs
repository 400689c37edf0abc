//! Information flow between prompt components, per layer.
//!
//! Attention flow sums attention probabilities over heads and over the
//! (row, column) pairs linking two spans. Saliency flow does the same on
//! `S_l = Σ_h |∂L/∂A_{h,l} ⊙ A_{h,l}|`, where `L` is the teacher-forced
//! loss of a reference answer.
//!
//! Direction: "flow from source to target" reads columns from the source
//! span and rows from the target span, since under a causal mask a row can
//! only receive from earlier columns. [`Convention::RowsFromSource`] swaps the
//! two roles (rows from the source) for auditing.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, ForwardOptions, ForwardTrace, ModelWeights, ParamVars};
use crate::spans::{AssembledPrompt, SpanMap, SpanName};
use crate::tokenizer::TokenId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Rows in the target span, columns in the source span.
    #[default]
    SourceFirst,
    /// Rows in the source span, columns in the target span.
    RowsFromSource,
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::SourceFirst => "source-first",
            Convention::RowsFromSource => "rows-from-source",
        })
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source-first" => Ok(Convention::SourceFirst),
            "rows-from-source" => Ok(Convention::RowsFromSource),
            other => Err(Error::Config(format!("unknown flow convention `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Raw,
    /// Divide by `heads · |rows| · |cols|`.
    Mean,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Raw => "raw",
            Normalization::Mean => "mean",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Normalization::Raw),
            "mean" => Ok(Normalization::Mean),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

fn roles<'a>(
    spans: &'a SpanMap,
    source: SpanName,
    target: SpanName,
    convention: Convention,
) -> Result<(&'a [usize], &'a [usize])> {
    let (s, t) = (spans.get(source), spans.get(target));
    if s.is_empty() {
        return Err(Error::EmptySpan(source.to_string()));
    }
    if t.is_empty() {
        return Err(Error::EmptySpan(target.to_string()));
    }
    Ok(match convention {
        Convention::SourceFirst => (t, s),
        Convention::RowsFromSource => (s, t),
    })
}

/// Sums `mats` (`[heads, t, t]` row-major) over heads and the given
/// rows × columns, skipping the diagonal.
fn block_sum(
    mat: &[f64],
    heads: usize,
    t: usize,
    rows: &[usize],
    cols: &[usize],
    norm: Normalization,
) -> f64 {
    let mut total = 0.0;
    for h in 0..heads {
        let base = h * t * t;
        for &i in rows {
            let row = &mat[base + i * t..base + (i + 1) * t];
            for &j in cols {
                if i != j {
                    total += row[j];
                }
            }
        }
    }
    match norm {
        Normalization::Raw => total,
        Normalization::Mean => total / (heads * rows.len() * cols.len()) as f64,
    }
}

/// Per-layer attention flow from `source` to `target`.
pub fn attention_flow<S: Scalar>(
    trace: &ForwardTrace<S>,
    spans: &SpanMap,
    source: SpanName,
    target: SpanName,
    normalize: Normalization,
    convention: Convention,
) -> Result<Vec<f64>> {
    trace.require_attention()?;
    let (rows, cols) = roles(spans, source, target, convention)?;
    let t = trace.seq_len;
    if rows.iter().chain(cols).any(|&i| i >= t) {
        return Err(Error::Contract("span index beyond traced sequence".into()));
    }
    Ok(trace
        .attention
        .iter()
        .map(|a| block_sum(&a.to_f64_vec(), trace.n_heads, t, rows, cols, normalize))
        .collect())
}

/// Per-layer saliency flow on head-summed matrices `S_l` (`[t, t]` each).
pub fn saliency_flow(
    saliency: &[Tensor<f64>],
    spans: &SpanMap,
    source: SpanName,
    target: SpanName,
    normalize: Normalization,
    convention: Convention,
) -> Result<Vec<f64>> {
    let (rows, cols) = roles(spans, source, target, convention)?;
    saliency
        .iter()
        .map(|s| {
            let t = s.shape()[0];
            if rows.iter().chain(cols).any(|&i| i >= t) {
                return Err(Error::Contract("span index beyond saliency matrix".into()));
            }
            Ok(block_sum(s.data(), 1, t, rows, cols, normalize))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyOptions {
    /// Pair each gradient entry with the transposed attention entry.
    pub transpose: bool,
    /// Constant factor on the loss.
    pub loss_scale: f64,
}

impl Default for SaliencyOptions {
    fn default() -> Self {
        Self {
            transpose: false,
            loss_scale: 1.0,
        }
    }
}

/// Gradient of the answer loss with respect to every attention matrix,
/// plus the attention itself, for a teacher-forced prompt + answer.
pub struct AttentionGrads {
    /// Per layer `[heads, t, t]`.
    pub attention: Vec<Tensor<f64>>,
    pub grad: Vec<Tensor<f64>>,
    pub loss: f64,
    pub seq_len: usize,
    pub n_heads: usize,
}

/// Teacher-forces `answer` after `prompt` and backpropagates the mean
/// answer-token cross-entropy (times `loss_scale`) to the attention maps.
pub fn attention_gradients<S: Scalar>(
    weights: &ModelWeights<S>,
    prompt: &[TokenId],
    answer: &[TokenId],
    loss_scale: f64,
    opts: &ForwardOptions<'_>,
) -> Result<AttentionGrads> {
    if answer.is_empty() {
        return Err(Error::Contract("reference answer must be nonempty".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must be nonempty".into()));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&answer[..answer.len() - 1]);
    let t = seq.len();
    let mut tape = Tape::<S>::new();
    let params = ParamVars::register(&mut tape, weights, true);
    let fw = forward_on_tape(&mut tape, &params, &weights.config, &[&seq], opts)?;
    let mut targets = vec![0usize; t];
    let mut keep = vec![false; t];
    for (i, &a) in answer.iter().enumerate() {
        targets[prompt.len() - 1 + i] = a as usize;
        keep[prompt.len() - 1 + i] = true;
    }
    let ce = tape.cross_entropy(fw.logits, &targets, &keep)?;
    let loss = tape.scale(ce, S::from_f64_lossy(loss_scale));
    tape.backward(loss)?;
    let grad = fw
        .attention
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.cast())
                .ok_or(Error::Contract("attention gradient unavailable".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionGrads {
        attention: fw.attention.iter().map(|&v| tape.value(v).cast()).collect(),
        grad,
        loss: tape.value(loss).data()[0].as_f64(),
        seq_len: t,
        n_heads: weights.config.n_heads,
    })
}

impl AttentionGrads {
    /// `S_l = Σ_h |G_{h,l} ⊙ A_{h,l}|` (or `A^T` with `transpose`).
    pub fn saliency(&self, transpose: bool) -> Vec<Tensor<f64>> {
        let t = self.seq_len;
        self.attention
            .iter()
            .zip(&self.grad)
            .map(|(a, g)| {
                let mut s = Tensor::zeros(&[t, t]);
                let (ad, gd) = (a.data(), g.data());
                for h in 0..self.n_heads {
                    let base = h * t * t;
                    for i in 0..t {
                        for j in 0..t {
                            let av = if transpose {
                                ad[base + j * t + i]
                            } else {
                                ad[base + i * t + j]
                            };
                            s.data_mut()[i * t + j] += (gd[base + i * t + j] * av).abs();
                        }
                    }
                }
                s
            })
            .collect()
    }
}

/// Per-layer saliency matrices for a prompt and its reference answer.
pub fn saliency_matrices<S: Scalar>(
    weights: &ModelWeights<S>,
    prompt: &[TokenId],
    reference_answer: &[TokenId],
    opts: SaliencyOptions,
) -> Result<Vec<Tensor<f64>>> {
    let g = attention_gradients(
        weights,
        prompt,
        reference_answer,
        opts.loss_scale,
        &ForwardOptions::default(),
    )?;
    Ok(g.saliency(opts.transpose))
}

/// The three key-sourced directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Kc,
    Kq,
    Ka,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Kc, Direction::Kq, Direction::Ka];

    pub fn spans(self) -> (SpanName, SpanName) {
        match self {
            Direction::Kc => (SpanName::Key, SpanName::Context),
            Direction::Kq => (SpanName::Key, SpanName::Query),
            Direction::Ka => (SpanName::Key, SpanName::Answer),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Kc => "kc",
            Direction::Kq => "kq",
            Direction::Ka => "ka",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowCurves {
    pub kc: Vec<f64>,
    pub kq: Vec<f64>,
    pub ka: Vec<f64>,
}

impl FlowCurves {
    pub fn get(&self, d: Direction) -> &[f64] {
        match d {
            Direction::Kc => &self.kc,
            Direction::Kq => &self.kq,
            Direction::Ka => &self.ka,
        }
    }

    fn get_mut(&mut self, d: Direction) -> &mut Vec<f64> {
        match d {
            Direction::Kc => &mut self.kc,
            Direction::Kq => &mut self.kq,
            Direction::Ka => &mut self.ka,
        }
    }

    fn zeros(n: usize) -> Self {
        Self {
            kc: vec![0.0; n],
            kq: vec![0.0; n],
            ka: vec![0.0; n],
        }
    }
}

/// Six per-layer curves: attention and saliency flow in each direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowProfile {
    pub n_layers: usize,
    pub convention: Convention,
    pub normalization: Normalization,
    /// Number of examples averaged into this profile.
    pub examples: usize,
    pub attention: FlowCurves,
    pub saliency: FlowCurves,
    /// Saliency with the attention transposed before the product.
    pub saliency_transposed: FlowCurves,
}

impl FlowProfile {
    /// `(metric name, curve)` pairs: `if_a_*`, `if_s_*`, then `if_st_*`
    /// for the transposed saliency.
    pub fn curves(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (tag, c) in [
            ("a", &self.attention),
            ("s", &self.saliency),
            ("st", &self.saliency_transposed),
        ] {
            for d in Direction::ALL {
                out.push((format!("if_{tag}_{d}"), c.get(d)));
            }
        }
        out
    }

    fn parts_mut(&mut self) -> [&mut FlowCurves; 3] {
        [
            &mut self.attention,
            &mut self.saliency,
            &mut self.saliency_transposed,
        ]
    }

    fn parts(&self) -> [&FlowCurves; 3] {
        [&self.attention, &self.saliency, &self.saliency_transposed]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowSettings {
    pub convention: Convention,
    pub normalization: Normalization,
    pub loss_scale: Option<f64>,
}

/// Traced forward + backward over one assembled RAG prompt with its
/// located key, returning every curve.
pub fn flow_profile<S: Scalar>(
    weights: &ModelWeights<S>,
    prompt: &AssembledPrompt,
    reference_answer: &[TokenId],
    settings: &FlowSettings,
) -> Result<FlowProfile> {
    if prompt.spans.key.is_empty() {
        return Err(Error::EmptySpan("key".into()));
    }
    let g = attention_gradients(
        weights,
        &prompt.tokens,
        reference_answer,
        settings.loss_scale.unwrap_or(1.0),
        &ForwardOptions::default(),
    )?;
    let sal = g.saliency(false);
    let sal_t = g.saliency(true);
    let n = weights.config.n_layers;
    let mut profile = FlowProfile {
        n_layers: n,
        convention: settings.convention,
        normalization: settings.normalization,
        examples: 1,
        attention: FlowCurves::zeros(n),
        saliency: FlowCurves::zeros(n),
        saliency_transposed: FlowCurves::zeros(n),
    };
    for d in Direction::ALL {
        let (src, tgt) = d.spans();
        let (rows, cols) = roles(&prompt.spans, src, tgt, settings.convention)?;
        *profile.attention.get_mut(d) = g
            .attention
            .iter()
            .map(|a| {
                block_sum(
                    a.data(),
                    g.n_heads,
                    g.seq_len,
                    rows,
                    cols,
                    settings.normalization,
                )
            })
            .collect();
        *profile.saliency.get_mut(d) = saliency_flow(
            &sal,
            &prompt.spans,
            src,
            tgt,
            settings.normalization,
            settings.convention,
        )?;
        *profile.saliency_transposed.get_mut(d) = saliency_flow(
            &sal_t,
            &prompt.spans,
            src,
            tgt,
            settings.normalization,
            settings.convention,
        )?;
    }
    Ok(profile)
}

/// Per-layer arithmetic mean of profiles that share settings and depth.
pub fn mean_profile(profiles: &[FlowProfile]) -> Result<FlowProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::Dataset("no profiles to aggregate".into()))?;
    let n = first.n_layers;
    if profiles.iter().any(|p| {
        p.n_layers != n
            || p.convention != first.convention
            || p.normalization != first.normalization
    }) {
        return Err(Error::Contract(
            "profiles differ in depth or settings".into(),
        ));
    }
    let total: usize = profiles.iter().map(|p| p.examples).sum();
    let mut out = FlowProfile {
        examples: total,
        attention: FlowCurves::zeros(n),
        saliency: FlowCurves::zeros(n),
        saliency_transposed: FlowCurves::zeros(n),
        ..first.clone()
    };
    for p in profiles {
        let w = p.examples as f64;
        for (acc, src) in out.parts_mut().into_iter().zip(p.parts()) {
            for d in Direction::ALL {
                for (a, v) in acc.get_mut(d).iter_mut().zip(src.get(d)) {
                    *a += w * v;
                }
            }
        }
    }
    for acc in out.parts_mut() {
        for d in Direction::ALL {
            acc.get_mut(d).iter_mut().for_each(|v| *v /= total as f64);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Refinement,
    Elicitation,
    Expression,
    Contestation,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Refinement,
        Stage::Elicitation,
        Stage::Expression,
        Stage::Contestation,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Refinement => "refinement",
            Stage::Elicitation => "elicitation",
            Stage::Expression => "expression",
            Stage::Contestation => "contestation",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageMethod {
    #[default]
    Quartile,
    Changepoint,
}

impl FromStr for StageMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quartile" => Ok(StageMethod::Quartile),
            "changepoint" => Ok(StageMethod::Changepoint),
            other => Err(Error::Config(format!("unknown stage method `{other}`"))),
        }
    }
}

/// Four contiguous layer ranges covering `0..n_layers` in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSegmentation {
    pub n_layers: usize,
    pub method: StageMethod,
    pub ranges: [Range<usize>; 4],
}

impl StageSegmentation {
    pub fn from_bounds(n_layers: usize, method: StageMethod, b: [usize; 3]) -> Self {
        Self {
            n_layers,
            method,
            ranges: [0..b[0], b[0]..b[1], b[1]..b[2], b[2]..n_layers],
        }
    }

    pub fn range(&self, stage: Stage) -> Range<usize> {
        self.ranges[stage as usize].clone()
    }

    pub fn stage_of(&self, layer: usize) -> Option<Stage> {
        Stage::ALL
            .into_iter()
            .find(|&s| self.range(s).contains(&layer))
    }

    pub fn is_valid(&self) -> bool {
        self.ranges[0].start == 0
            && self.ranges[3].end == self.n_layers
            && self.ranges.iter().all(|r| r.start < r.end)
            && self.ranges.windows(2).all(|w| w[0].end == w[1].start)
    }
}

/// Splits `n_layers` into four blocks of equal size (±1).
pub fn quartile_stages(n_layers: usize) -> Result<StageSegmentation> {
    if n_layers < 4 {
        return Err(Error::TooFewLayers(n_layers));
    }
    let b = [n_layers / 4, n_layers / 2, 3 * n_layers / 4];
    Ok(StageSegmentation::from_bounds(
        n_layers,
        StageMethod::Quartile,
        b,
    ))
}

/// Best 4-segment piecewise-constant fit of `curve` by dynamic programming.
/// Ties resolve to the earliest boundaries.
pub fn changepoint_stages(curve: &[f64]) -> Result<StageSegmentation> {
    let n = curve.len();
    if n < 4 {
        return Err(Error::TooFewLayers(n));
    }
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, &v) in curve.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
        prefix_sq[i + 1] = prefix_sq[i] + v * v;
    }
    // Squared error of a constant fit on curve[a..b].
    let sse = |a: usize, b: usize| {
        let len = (b - a) as f64;
        let s = prefix[b] - prefix[a];
        (prefix_sq[b] - prefix_sq[a] - s * s / len).max(0.0)
    };
    const K: usize = 4;
    // cost[k][j]: best error covering curve[..j] with k+1 segments.
    let mut cost = vec![vec![f64::INFINITY; n + 1]; K];
    let mut back = vec![vec![0usize; n + 1]; K];
    for j in 1..=n {
        cost[0][j] = sse(0, j);
    }
    for k in 1..K {
        for j in k + 1..=n {
            for i in k..j {
                let c = cost[k - 1][i] + sse(i, j);
                if c < cost[k][j] - 1e-12 * c.abs().max(1.0) {
                    cost[k][j] = c;
                    back[k][j] = i;
                }
            }
        }
    }
    let mut bounds = [0usize; 3];
    let mut j = n;
    for k in (1..K).rev() {
        j = back[k][j];
        bounds[k - 1] = j;
    }
    Ok(StageSegmentation::from_bounds(
        n,
        StageMethod::Changepoint,
        bounds,
    ))
}

/// Segments a profile's layers; the changepoint method fits `IF_a^{kq}`.
pub fn segment_stages(profile: &FlowProfile, method: StageMethod) -> Result<StageSegmentation> {
    match method {
        StageMethod::Quartile => quartile_stages(profile.n_layers),
        StageMethod::Changepoint => changepoint_stages(&profile.attention.kq),
    }
}
