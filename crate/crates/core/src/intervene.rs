//! Stage-wise key-to-query attention cuts and neuron deactivation runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::flow::{Stage, StageSegmentation};
use crate::model::{sequence_logprob, DeactivationSet, ExtraMask, ModelWeights, SequenceProb};
use crate::spans::{SpanMap, SpanName};
use crate::tokenizer::TokenId;

/// Layers an intervention applies to.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    #[default]
    All,
    Stage(Stage),
    Layers(Vec<usize>),
}

impl LayerSelector {
    /// Sorted, deduplicated layer indices.
    pub fn resolve(
        &self,
        n_layers: usize,
        segmentation: Option<&StageSegmentation>,
    ) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = match self {
            LayerSelector::All => (0..n_layers).collect(),
            LayerSelector::Stage(s) => {
                let seg = segmentation
                    .ok_or_else(|| Error::Contract(format!("stage `{s}` needs a segmentation")))?;
                if seg.n_layers != n_layers {
                    return Err(Error::Contract(format!(
                        "segmentation covers {} layers, model has {n_layers}",
                        seg.n_layers
                    )));
                }
                seg.range(*s).collect()
            }
            LayerSelector::Layers(v) => v.clone(),
        };
        out.sort_unstable();
        out.dedup();
        if let Some(&bad) = out.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Contract(format!(
                "layer {bad} out of range for {n_layers} layers"
            )));
        }
        Ok(out)
    }
}

/// A serializable intervention: exactly one payload per kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InterventionSpec {
    AttentionCut {
        #[serde(default)]
        layers: LayerSelector,
        source: SpanName,
        target: SpanName,
    },
    NeuronDeactivate {
        #[serde(default)]
        layers: LayerSelector,
        neurons: DeactivationSet,
    },
}

impl InterventionSpec {
    pub fn key_to_query(layers: LayerSelector) -> Self {
        InterventionSpec::AttentionCut {
            layers,
            source: SpanName::Key,
            target: SpanName::Query,
        }
    }

    pub fn layers(&self) -> &LayerSelector {
        match self {
            InterventionSpec::AttentionCut { layers, .. }
            | InterventionSpec::NeuronDeactivate { layers, .. } => layers,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Deactivation set restricted to the selected layers.
    pub fn deactivations(
        &self,
        n_layers: usize,
        seg: Option<&StageSegmentation>,
    ) -> Result<Option<DeactivationSet>> {
        match self {
            InterventionSpec::NeuronDeactivate { layers, neurons } => {
                let keep = layers.resolve(n_layers, seg)?;
                Ok(Some(
                    neurons
                        .iter()
                        .copied()
                        .filter(|(l, _)| keep.contains(l))
                        .collect(),
                ))
            }
            InterventionSpec::AttentionCut { .. } => Ok(None),
        }
    }

    /// Extra attention mask for the selected layers.
    pub fn mask(
        &self,
        spans: &SpanMap,
        n_layers: usize,
        seg: Option<&StageSegmentation>,
    ) -> Result<Option<ExtraMask>> {
        match self {
            InterventionSpec::AttentionCut {
                layers,
                source,
                target,
            } => {
                let layers = layers.resolve(n_layers, seg)?;
                build_attention_cut(spans, *source, *target, &layers, n_layers).map(Some)
            }
            InterventionSpec::NeuronDeactivate { .. } => Ok(None),
        }
    }
}

/// `-inf` at every (row in `target`, column in `source`) for each listed
/// layer, sized to the prompt.
pub fn build_attention_cut(
    spans: &SpanMap,
    source: SpanName,
    target: SpanName,
    layers: &[usize],
    n_layers: usize,
) -> Result<ExtraMask> {
    let (cols, rows) = (spans.get(source), spans.get(target));
    if cols.is_empty() {
        return Err(Error::EmptySpan(source.to_string()));
    }
    if rows.is_empty() {
        return Err(Error::EmptySpan(target.to_string()));
    }
    let t = spans.prompt_length;
    let mut base = Tensor::<f64>::zeros(&[t, t]);
    for &i in rows {
        for &j in cols {
            base.data_mut()[i * t + j] = f64::NEG_INFINITY;
        }
    }
    let mut mask = ExtraMask::new(n_layers);
    for &l in layers {
        if l >= n_layers {
            return Err(Error::Contract(format!(
                "layer {l} out of range for {n_layers} layers"
            )));
        }
        mask.set_layer(l, base.clone());
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbMode {
    #[default]
    GeometricMean,
    Joint,
}

impl ProbMode {
    pub fn of(self, p: &SequenceProb) -> f64 {
        match self {
            ProbMode::GeometricMean => p.geometric_mean,
            ProbMode::Joint => p.joint(),
        }
    }
}

impl fmt::Display for ProbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbMode::GeometricMean => "geometric_mean",
            ProbMode::Joint => "joint",
        })
    }
}

impl FromStr for ProbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric_mean" | "geometric-mean" => Ok(ProbMode::GeometricMean),
            "joint" => Ok(ProbMode::Joint),
            other => Err(Error::Config(format!("unknown probability mode `{other}`"))),
        }
    }
}

/// `P(answer | prompt) - P(answer | prompt, key-to-query cut on layers)`.
pub fn prob_delta<S: Scalar>(
    weights: &ModelWeights<S>,
    prompt: &[TokenId],
    spans: &SpanMap,
    answer: &[TokenId],
    layers: &[usize],
    mode: ProbMode,
) -> Result<f64> {
    if answer.is_empty() {
        return Err(Error::Contract("answer tokenizes to nothing".into()));
    }
    let n = weights.config.n_layers;
    let mask = build_attention_cut(spans, SpanName::Key, SpanName::Query, layers, n)?;
    let base = sequence_logprob(weights, prompt, answer, None, None)?;
    let cut = sequence_logprob(weights, prompt, answer, Some(&mask), None)?;
    Ok(mode.of(&base) - mode.of(&cut))
}

/// `d` for each of the four stages, sharing one unmasked pass.
pub fn stage_deltas<S: Scalar>(
    weights: &ModelWeights<S>,
    prompt: &[TokenId],
    spans: &SpanMap,
    answer: &[TokenId],
    segmentation: &StageSegmentation,
    mode: ProbMode,
) -> Result<[f64; 4]> {
    if answer.is_empty() {
        return Err(Error::Contract("answer tokenizes to nothing".into()));
    }
    let n = weights.config.n_layers;
    let base = mode.of(&sequence_logprob(weights, prompt, answer, None, None)?);
    let mut out = [0.0; 4];
    for (k, stage) in Stage::ALL.into_iter().enumerate() {
        let layers = LayerSelector::Stage(stage).resolve(n, Some(segmentation))?;
        let mask = build_attention_cut(spans, SpanName::Key, SpanName::Query, &layers, n)?;
        let cut = sequence_logprob(weights, prompt, answer, Some(&mask), None)?;
        out[k] = base - mode.of(&cut);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::quartile_stages;

    fn spans() -> SpanMap {
        SpanMap {
            context: vec![0, 1],
            key: vec![2, 3],
            query: vec![5, 6],
            answer: vec![7],
            prompt_length: 8,
        }
    }

    #[test]
    fn cut_matches_double_loop() {
        let s = spans();
        let m = build_attention_cut(&s, SpanName::Key, SpanName::Query, &[1, 3], 4).unwrap();
        assert_eq!(m.masked_layers(), vec![1, 3]);
        let t = m.layer(1).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let cut = s.query.contains(&i) && s.key.contains(&j);
                assert_eq!(t.get(&[i, j]) == f64::NEG_INFINITY, cut, "({i},{j})");
                if !cut {
                    assert_eq!(t.get(&[i, j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_layer_set_is_empty_mask() {
        let m = build_attention_cut(&spans(), SpanName::Key, SpanName::Query, &[], 4).unwrap();
        assert!(m.is_empty());
        assert!(m.masked_layers().is_empty());
    }

    #[test]
    fn empty_span_is_an_error() {
        let mut s = spans();
        s.key.clear();
        assert!(matches!(
            build_attention_cut(&s, SpanName::Key, SpanName::Query, &[0], 4),
            Err(Error::EmptySpan(_))
        ));
    }

    #[test]
    fn selectors_resolve() {
        let seg = quartile_stages(8).unwrap();
        assert_eq!(
            LayerSelector::Stage(Stage::Expression)
                .resolve(8, Some(&seg))
                .unwrap(),
            vec![4, 5]
        );
        assert_eq!(LayerSelector::All.resolve(3, None).unwrap(), vec![0, 1, 2]);
        assert!(LayerSelector::Layers(vec![9]).resolve(8, None).is_err());
        assert!(LayerSelector::Stage(Stage::Refinement)
            .resolve(8, None)
            .is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = InterventionSpec::key_to_query(LayerSelector::Stage(Stage::Elicitation));
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(InterventionSpec::from_json(&json).unwrap(), spec);
        let text =
            r#"{"kind":"neuron_deactivate","layers":{"layers":[0]},"neurons":[[0,3],[1,2]]}"#;
        let spec = InterventionSpec::from_json(text).unwrap();
        let set = spec.deactivations(2, None).unwrap().unwrap();
        assert_eq!(set.iter().copied().collect::<Vec<_>>(), vec![(0, 3)]);
        assert!(InterventionSpec::from_json(r#"{"kind":"attention_cut","source":"key"}"#).is_err());
    }
}
