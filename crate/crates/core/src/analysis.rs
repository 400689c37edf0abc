//! Dataset-level runners that turn QA examples into flow profiles, stage
//! heatmaps, KAPE tables and logit-lens trajectories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::corpus::{Answerer, DocumentSetting, QaExample, Tier};
use crate::error::{Error, Result};
use crate::flow::{
    flow_profile, mean_profile, FlowProfile, FlowSettings, Stage, StageSegmentation,
};
use crate::intervene::{stage_deltas, ProbMode};
use crate::kape::{activation_counts, ActivationCounts, CountItem, KapeTable, PositionMode};
use crate::model::{
    forward, logit_lens, ForwardOptions, LensMode, LensSource, ModelWeights, TraceLevel,
};
use crate::report::{HeatmapRow, LensRow};
use crate::spans::{assemble_closed_book, assemble_rag, AssembledPrompt, KeyOptions, Templates};
use crate::tokenizer::{TokenId, Tokenizer, EOS};

/// Model plus the text machinery every runner needs.
#[derive(Clone, Copy)]
pub struct Lab<'a, S: Scalar> {
    pub weights: &'a ModelWeights<S>,
    pub tokenizer: &'a Tokenizer,
    pub templates: &'a Templates,
    pub key_options: KeyOptions,
}

impl<'a, S: Scalar> Lab<'a, S> {
    pub fn new(
        weights: &'a ModelWeights<S>,
        tokenizer: &'a Tokenizer,
        templates: &'a Templates,
    ) -> Self {
        Self {
            weights,
            tokenizer,
            templates,
            key_options: KeyOptions::default(),
        }
    }

    pub fn answerer(&self) -> Answerer<'a, S> {
        Answerer::new(self.weights, self.tokenizer, self.templates)
    }

    /// RAG prompt over the tier's passage with that passage's answer as key.
    pub fn rag_prompt(&self, ex: &QaExample, tier: Tier) -> Result<(AssembledPrompt, String)> {
        let passage = ex.passage(tier)?;
        let key = ex.passage_answer(tier).ok_or_else(|| {
            Error::Dataset(format!(
                "no answer recorded for the {tier} passage of `{}`",
                ex.question
            ))
        })?;
        let p = assemble_rag(
            self.tokenizer,
            self.templates,
            &[passage],
            &ex.question,
            Some(key),
            self.key_options,
        )?;
        Ok((p, key.to_string()))
    }

    pub fn answer_tokens(&self, text: &str) -> Vec<TokenId> {
        self.tokenizer.encode(text)
    }

    /// The model's closed-book greedy answer tokens.
    pub fn internal_answer(&self, ex: &QaExample) -> Result<Vec<TokenId>> {
        let prompt = assemble_closed_book(self.tokenizer, self.templates, &ex.question);
        crate::model::generate_greedy(self.weights, &prompt.tokens, 8, &[EOS], None)
    }
}

/// Mean profile over the examples whose key could be located.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFlow {
    pub tier: Tier,
    pub profile: FlowProfile,
    pub used: usize,
    pub skipped: usize,
}

pub fn dataset_flow<S: Scalar>(
    lab: &Lab<'_, S>,
    examples: &[QaExample],
    tier: Tier,
    settings: &FlowSettings,
) -> Result<DatasetFlow> {
    let per: Vec<Option<FlowProfile>> = examples
        .par_iter()
        .map(|ex| {
            let (prompt, key) = lab.rag_prompt(ex, tier)?;
            if !prompt.key_located {
                return Ok(None);
            }
            flow_profile(lab.weights, &prompt, &lab.answer_tokens(&key), settings).map(Some)
        })
        .collect::<Result<_>>()?;
    let skipped = per.iter().filter(|p| p.is_none()).count();
    let profiles: Vec<FlowProfile> = per.into_iter().flatten().collect();
    if profiles.is_empty() {
        return Err(Error::Dataset(format!(
            "no {tier} example had a locatable key"
        )));
    }
    Ok(DatasetFlow {
        tier,
        used: profiles.len(),
        profile: mean_profile(&profiles)?,
        skipped,
    })
}

/// Stage × tier mean `d`, for the passage's answer and the model's own
/// closed-book answer.
pub fn stage_heatmap<S: Scalar>(
    lab: &Lab<'_, S>,
    examples: &[QaExample],
    tiers: &[Tier],
    segmentation: &StageSegmentation,
    mode: ProbMode,
) -> Result<Vec<HeatmapRow>> {
    let internal: Vec<Vec<TokenId>> = examples
        .par_iter()
        .map(|ex| lab.internal_answer(ex))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &tier in tiers {
        let per: Vec<(Option<[f64; 4]>, Option<[f64; 4]>)> = examples
            .par_iter()
            .zip(&internal)
            .map(|(ex, int)| {
                let Ok((prompt, key)) = lab.rag_prompt(ex, tier) else {
                    return Ok((None, None));
                };
                if !prompt.key_located {
                    return Ok((None, None));
                }
                let ext = lab.answer_tokens(&key);
                let d_ext = stage_deltas(
                    lab.weights,
                    &prompt.tokens,
                    &prompt.spans,
                    &ext,
                    segmentation,
                    mode,
                )?;
                let d_int = if int.is_empty() {
                    None
                } else {
                    Some(stage_deltas(
                        lab.weights,
                        &prompt.tokens,
                        &prompt.spans,
                        int,
                        segmentation,
                        mode,
                    )?)
                };
                Ok((Some(d_ext), d_int))
            })
            .collect::<Result<_>>()?;
        for (k, stage) in Stage::ALL.into_iter().enumerate() {
            let ext: Vec<f64> = per.iter().filter_map(|(e, _)| e.map(|d| d[k])).collect();
            let int: Vec<f64> = per.iter().filter_map(|(_, i)| i.map(|d| d[k])).collect();
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            let r = segmentation.range(stage);
            rows.push(HeatmapRow {
                stage,
                tier,
                layer_start: r.start,
                layer_end: r.end,
                d_external: mean(&ext).unwrap_or(0.0),
                d_internal: mean(&int),
                n_external: ext.len(),
                n_internal: int.len(),
                prob_mode: mode.to_string(),
            });
        }
    }
    Ok(rows)
}

/// Which prompts feed one side of the KAPE comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KapeSetting {
    /// Closed-book prompt, internal knowledge.
    ClosedBookIk,
    /// Prompt with the gold passage, external knowledge.
    RagGoldEk,
}

pub fn kape_items(
    tokenizer: &Tokenizer,
    templates: &Templates,
    examples: &[QaExample],
    setting: KapeSetting,
) -> Result<Vec<CountItem>> {
    examples
        .iter()
        .map(|ex| {
            let prompt = match setting {
                KapeSetting::ClosedBookIk => {
                    assemble_closed_book(tokenizer, templates, &ex.question).tokens
                }
                KapeSetting::RagGoldEk => {
                    let p = ex.passage(Tier::Positive)?;
                    assemble_rag(
                        tokenizer,
                        templates,
                        &[p],
                        &ex.question,
                        None,
                        KeyOptions::default(),
                    )?
                    .tokens
                }
            };
            Ok(CountItem {
                prompt,
                answer: tokenizer.encode(ex.gold()),
            })
        })
        .collect()
}

/// Which answer is teacher-forced at the counted positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerSource {
    /// The example's gold answer.
    #[default]
    Reference,
    /// The model's own greedy answer under the same prompt.
    Generated,
}

impl std::fmt::Display for AnswerSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnswerSource::Reference => "reference",
            AnswerSource::Generated => "generated",
        })
    }
}

impl std::str::FromStr for AnswerSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(AnswerSource::Reference),
            "generated" => Ok(AnswerSource::Generated),
            other => Err(Error::Config(format!("unknown answer source `{other}`"))),
        }
    }
}

/// `kape_items` with the answer taken from `source`. Generated answers stop
/// at end-of-sequence; an empty one leaves the item with nothing to count.
pub fn kape_items_with<S: Scalar>(
    lab: &Lab<'_, S>,
    examples: &[QaExample],
    setting: KapeSetting,
    source: AnswerSource,
) -> Result<Vec<CountItem>> {
    let items = kape_items(lab.tokenizer, lab.templates, examples, setting)?;
    match source {
        AnswerSource::Reference => Ok(items),
        AnswerSource::Generated => items
            .into_par_iter()
            .map(|it| {
                let answer =
                    crate::model::generate_greedy(lab.weights, &it.prompt, 8, &[EOS], None)?;
                Ok(CountItem { answer, ..it })
            })
            .collect(),
    }
}

/// Activation counts under both settings and the resulting table.
pub struct KapeRun {
    pub ik: ActivationCounts,
    pub ek: ActivationCounts,
    pub table: KapeTable,
}

pub fn kape_run<S: Scalar>(
    weights: &ModelWeights<S>,
    ik_items: &[CountItem],
    ek_items: &[CountItem],
    positions: PositionMode,
) -> Result<KapeRun> {
    if ik_items.is_empty() || ek_items.is_empty() {
        return Err(Error::Dataset("both KAPE settings need examples".into()));
    }
    let ik = activation_counts(weights, ik_items, positions)?;
    let ek = activation_counts(weights, ek_items, positions)?;
    if ik.skipped + ek.skipped > 0 {
        log::warn!(
            "{} examples had no countable positions",
            ik.skipped + ek.skipped
        );
    }
    let table = KapeTable::from_raw(
        weights.config.d_ff,
        &ik.probabilities(),
        &ek.probabilities(),
    )?;
    Ok(KapeRun { ik, ek, table })
}

/// Mean lens logits of the internal and external answer at the first token
/// where they differ, for every layer, both sources, cumulative mode.
pub fn lens_trajectories<S: Scalar>(
    lab: &Lab<'_, S>,
    examples: &[QaExample],
    tier: Tier,
) -> Result<(Vec<LensRow>, usize)> {
    let n = lab.weights.config.n_layers;
    let sources = [LensSource::PostMha, LensSource::PostMlp];
    type Acc = Vec<[f64; 4]>;
    let per: Vec<Option<Acc>> = examples
        .par_iter()
        .map(|ex| -> Result<Option<Acc>> {
            let int = lab.internal_answer(ex)?;
            let (prompt, key) = lab.rag_prompt(ex, tier)?;
            let ext = lab.answer_tokens(&key);
            let Some(k) = (0..int.len().min(ext.len())).find(|&i| int[i] != ext[i]) else {
                return Ok(None);
            };
            let mut seq = prompt.tokens.clone();
            seq.extend_from_slice(&ext[..k]);
            if seq.len() > lab.weights.config.max_seq {
                return Ok(None);
            }
            let (_, trace) = forward(lab.weights, &seq, &ForwardOptions::traced(TraceLevel::Full))?;
            let pos = seq.len() - 1;
            let mut acc = Vec::with_capacity(n);
            for layer in 0..n {
                let mut cell = [0.0; 4];
                for (s, &src) in sources.iter().enumerate() {
                    let logits =
                        logit_lens(lab.weights, &trace, pos, LensMode::Cumulative, layer, src)?;
                    cell[2 * s] = logits[int[k] as usize];
                    cell[2 * s + 1] = logits[ext[k] as usize];
                }
                acc.push(cell);
            }
            Ok(Some(acc))
        })
        .collect::<Result<_>>()?;
    let used: Vec<&Acc> = per.iter().flatten().collect();
    let skipped = per.len() - used.len();
    let mut rows = Vec::new();
    for (s, src) in ["post_mha", "post_mlp"].iter().enumerate() {
        for (a, answer) in ["internal", "external"].iter().enumerate() {
            for layer in 0..n {
                let sum: f64 = used.iter().map(|acc| acc[layer][2 * s + a]).sum();
                rows.push(LensRow {
                    layer,
                    source: src.to_string(),
                    mode: "cumulative".into(),
                    answer: answer.to_string(),
                    logit: if used.is_empty() {
                        0.0
                    } else {
                        sum / used.len() as f64
                    },
                    n: used.len(),
                });
            }
        }
    }
    Ok((rows, skipped))
}

/// Fraction of examples whose greedy answer under `document` is the fake one.
pub fn follow_rate<S: Scalar>(
    lab: &Lab<'_, S>,
    examples: &[QaExample],
    deactivations: Option<&crate::model::DeactivationSet>,
) -> Result<crate::corpus::EvalResult> {
    crate::corpus::evaluate(
        &lab.answerer(),
        examples,
        DocumentSetting::NOISY,
        deactivations,
        if deactivations.is_some() {
            "deactivate"
        } else {
            "none"
        },
        Default::default(),
    )
}

/// Paired changes of a binary outcome between a baseline and a treated run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub n: usize,
    /// Examples that went from 0 to 1.
    pub up: usize,
    /// Examples that went from 1 to 0.
    pub down: usize,
    /// Exact two-sided binomial p-value over the discordant pairs.
    pub p_value: f64,
}

impl SignTest {
    pub fn new(up: usize, down: usize, n: usize) -> Self {
        let m = up + down;
        let p_value = if m == 0 {
            1.0
        } else {
            let b = statrs::distribution::Binomial::new(0.5, m as u64).expect("valid binomial");
            (2.0 * statrs::distribution::DiscreteCDF::cdf(&b, up.min(down) as u64)).min(1.0)
        };
        Self {
            n,
            up,
            down,
            p_value,
        }
    }

    /// Pairs `base` and `treated` by position.
    pub fn paired(base: &[bool], treated: &[bool]) -> Result<Self> {
        if base.len() != treated.len() {
            return Err(Error::Contract(format!(
                "sign test needs paired outcomes, got {} and {}",
                base.len(),
                treated.len()
            )));
        }
        let up = base.iter().zip(treated).filter(|&(&b, &t)| !b && t).count();
        let down = base.iter().zip(treated).filter(|&(&b, &t)| b && !t).count();
        Ok(Self::new(up, down, base.len()))
    }

    /// +1 when more examples moved up than down, -1 for the reverse, else 0.
    pub fn direction(&self) -> i32 {
        (self.up as i64 - self.down as i64).signum() as i32
    }
}

/// Per-example fake-following flags of an evaluation.
pub fn follow_flags(r: &crate::corpus::EvalResult) -> Vec<bool> {
    r.examples
        .iter()
        .map(|e| e.follows_fake.unwrap_or(false))
        .collect()
}
