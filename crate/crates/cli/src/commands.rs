use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ragscope::analysis::{
    dataset_flow, follow_flags, kape_items_with, kape_run, lens_trajectories, stage_heatmap,
    AnswerSource, DatasetFlow, KapeSetting, Lab, SignTest,
};
use ragscope::autograd::{Activation, Scalar};
use ragscope::corpus::{
    evaluate, generate_world, make_split, read_jsonl, train_on_world, world_tokenizer,
    DocumentSetting, EvalResult, FactWorld, LossPoint, ModelShape, QaExample, Split, Tier,
    ToySetup, TrainConfig, TrainMix, WorldParams,
};
use ragscope::flow::{
    changepoint_stages, quartile_stages, Convention, FlowSettings, Normalization, StageMethod,
    StageSegmentation,
};
use ragscope::intervene::ProbMode;
use ragscope::kape::{select_knowledge_neurons, PositionMode, SelectionParams};
use ragscope::model::{load_weights, write_weights, DeactivationSet, ModelWeights};
use ragscope::report::{
    flow_rows, stage_rows, EvalRow, JsonReport, KapeSummary, OutputSet, ReportMeta,
};
use ragscope::spans::Templates;
use ragscope::tokenizer::Tokenizer;

use crate::config::required;

/// What every output embeds.
#[derive(Serialize)]
pub struct RunConfig<'a, C> {
    pub command: &'a str,
    pub seed: u64,
    pub config_file: Option<String>,
    pub params: &'a C,
}

pub struct Ctx {
    pub seed: u64,
    pub out: PathBuf,
    pub config_file: Option<PathBuf>,
}

impl Ctx {
    fn meta<C: Serialize>(&self, command: &str, params: &C) -> Result<ReportMeta> {
        Ok(ReportMeta::new(&RunConfig {
            command,
            seed: self.seed,
            config_file: self.config_file.as_ref().map(|p| p.display().to_string()),
            params,
        })?)
    }
}

fn report<T: Serialize + serde::de::DeserializeOwned>(
    kind: &str,
    meta: &ReportMeta,
    records: Vec<T>,
    notes: &[&str],
) -> JsonReport<T> {
    let mut r = JsonReport::new(kind, meta, records);
    r.notes = notes.iter().map(|s| s.to_string()).collect();
    r
}

fn finish(out: OutputSet) {
    for p in out.commit() {
        println!("{}", p.display());
    }
}

struct Model {
    weights: ModelWeights<f64>,
    tokenizer: Tokenizer,
    templates: Templates,
}

impl Model {
    fn load(
        weights: &Option<PathBuf>,
        tokenizer: &Option<PathBuf>,
        templates: &Option<PathBuf>,
    ) -> Result<Self> {
        let w = required(weights, "weights")?;
        let tok = tokenizer
            .clone()
            .unwrap_or_else(|| w.with_file_name("tokenizer.json"));
        let templates = match templates {
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                let t: Templates = serde_json::from_str(&raw)
                    .with_context(|| format!("parsing {}", p.display()))?;
                t.validate()?;
                t
            }
            None => Templates::default(),
        };
        Ok(Self {
            weights: load_weights(&w)?,
            tokenizer: Tokenizer::load(&tok)?,
            templates,
        })
    }

    fn lab(&self) -> Lab<'_, f64> {
        Lab::new(&self.weights, &self.tokenizer, &self.templates)
    }
}

fn load_data(path: &Option<PathBuf>, name: &str) -> Result<Vec<QaExample>> {
    let p = required(path, name)?;
    let data = read_jsonl(&p)?;
    if data.is_empty() {
        bail!("{} holds no examples", p.display());
    }
    Ok(data)
}

fn load_set(path: &Path) -> Result<DeactivationSet> {
    let raw =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&raw)
        .with_context(|| format!("parsing neuron set {}", path.display()))?)
}

fn jsonl_bytes(examples: &[QaExample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.push(b'\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldCfg {
    pub entities: usize,
    pub relations: usize,
    pub objects: usize,
    pub holdout: f64,
    pub context: f64,
}

impl Default for WorldCfg {
    fn default() -> Self {
        let w = ToySetup::default().world;
        Self {
            entities: w.n_entities,
            relations: w.n_relations,
            objects: w.objects_per_relation,
            holdout: w.holdout_fraction,
            context: w.context_fraction,
        }
    }
}

impl WorldCfg {
    fn params(&self) -> WorldParams {
        WorldParams {
            n_entities: self.entities,
            n_relations: self.relations,
            objects_per_relation: self.objects,
            holdout_fraction: self.holdout,
            context_fraction: self.context,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SplitCount {
    split: Split,
    facts: usize,
    file: String,
}

fn write_world(
    out: &mut OutputSet,
    world: &FactWorld,
    templates: &Templates,
) -> Result<Vec<SplitCount>> {
    out.write_json("world.json", world)?;
    out.write_json("tokenizer.json", &world_tokenizer(world, templates))?;
    let mut counts = Vec::new();
    for split in [Split::Trained, Split::Context, Split::Holdout] {
        let examples = make_split(world, split)?;
        let file = format!("{split}.jsonl");
        out.write(&file, &jsonl_bytes(&examples)?)?;
        counts.push(SplitCount {
            split,
            facts: examples.len(),
            file,
        });
    }
    Ok(counts)
}

pub fn gen_world(ctx: &Ctx, cfg: &WorldCfg) -> Result<()> {
    let meta = ctx.meta("gen-world", cfg)?;
    let templates = Templates::default();
    let world = generate_world(ctx.seed, &cfg.params())?;
    let mut out = OutputSet::create(&ctx.out)?;
    let counts = write_world(&mut out, &world, &templates)?;
    out.write_json(
        "world_summary.json",
        &report("world_summary", &meta, counts, &[]),
    )?;
    finish(out);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    /// Existing world file; generated from the seed when absent.
    pub world: Option<PathBuf>,
    pub entities: usize,
    pub relations: usize,
    pub objects: usize,
    pub holdout: f64,
    pub context: f64,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub activation: Activation,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub warmup: usize,
    pub grad_clip: f64,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub statements: bool,
    pub closed_book: usize,
    pub rag_positive: bool,
    pub distractors: Vec<Tier>,
    pub copy_drills: usize,
}

impl Default for TrainCfg {
    fn default() -> Self {
        let s = ToySetup::default();
        let w = WorldCfg::default();
        Self {
            world: None,
            entities: w.entities,
            relations: w.relations,
            objects: w.objects,
            holdout: w.holdout,
            context: w.context,
            layers: s.model.n_layers,
            heads: s.model.n_heads,
            d_model: s.model.d_model,
            d_ff: s.model.d_ff,
            max_seq: s.model.max_seq,
            activation: s.model.activation,
            steps: s.train.steps,
            lr: s.train.learning_rate,
            batch: s.train.batch,
            warmup: s.train.warmup,
            grad_clip: s.train.grad_clip,
            min_lr_ratio: s.train.min_lr_ratio,
            weight_decay: s.train.weight_decay,
            statements: s.mix.statements,
            closed_book: s.mix.closed_book,
            rag_positive: s.mix.rag_positive,
            distractors: s.mix.rag_distractors,
            copy_drills: s.mix.copy_drills,
        }
    }
}

impl TrainCfg {
    fn setup(&self, seed: u64) -> ToySetup {
        ToySetup {
            world: WorldCfg {
                entities: self.entities,
                relations: self.relations,
                objects: self.objects,
                holdout: self.holdout,
                context: self.context,
            }
            .params(),
            model: ModelShape {
                n_layers: self.layers,
                n_heads: self.heads,
                d_model: self.d_model,
                d_ff: self.d_ff,
                max_seq: self.max_seq,
                activation: self.activation,
            },
            mix: TrainMix {
                statements: self.statements,
                closed_book: self.closed_book,
                rag_positive: self.rag_positive,
                rag_distractors: self.distractors.clone(),
                copy_drills: self.copy_drills,
            },
            train: TrainConfig {
                steps: self.steps,
                learning_rate: self.lr,
                batch: self.batch,
                seed,
                warmup: self.warmup,
                grad_clip: self.grad_clip,
                min_lr_ratio: self.min_lr_ratio,
                weight_decay: self.weight_decay,
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    steps: usize,
    final_loss: f64,
    n_params: usize,
    vocab_size: usize,
    closed_book_em_trained: f64,
}

pub fn train(ctx: &Ctx, cfg: &TrainCfg) -> Result<()> {
    let meta = ctx.meta("train", cfg)?;
    let templates = Templates::default();
    let setup = cfg.setup(ctx.seed);
    let world = match &cfg.world {
        Some(p) => FactWorld::load(p)?,
        None => generate_world(ctx.seed, &setup.world)?,
    };
    let total = setup.train.steps;
    let toy = train_on_world::<f32>(world, &setup, &templates, ctx.seed, |p: LossPoint| {
        if p.step % 100 == 0 || p.step + 1 == total {
            log::info!("step {:>5}/{total}  loss {:.4}", p.step, p.loss);
        }
    })?;
    let mut out = OutputSet::create(&ctx.out)?;
    let counts = write_world(&mut out, &toy.world, &templates)?;
    let mut bytes = Vec::new();
    write_weights(&toy.weights, &mut bytes, <f32 as Scalar>::WIDTH)?;
    out.write("weights.bin", &bytes)?;
    out.write_csv("loss.csv", &toy.loss, &meta)?;

    let trained = make_split(&toy.world, Split::Trained)?;
    let eval = evaluate(
        &ragscope::corpus::Answerer::new(&toy.weights, &toy.tokenizer, &templates),
        &trained,
        DocumentSetting::ClosedBook,
        None,
        "none",
        Default::default(),
    )?;
    let summary = TrainSummary {
        steps: toy.loss.len(),
        final_loss: toy.loss.last().map_or(f64::NAN, |p| p.loss),
        n_params: toy.weights.n_params(),
        vocab_size: toy.tokenizer.vocab_size(),
        closed_book_em_trained: eval.em,
    };
    out.write_json(
        "train_summary.json",
        &report("train_summary", &meta, vec![summary], &[]),
    )?;
    out.write_json("splits.json", &report("splits", &meta, counts, &[]))?;
    finish(out);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCfg {
    pub weights: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// `closed_book` or a tier name.
    pub documents: Vec<String>,
    pub deactivate: Option<PathBuf>,
    pub max_new: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        Self {
            weights: None,
            tokenizer: None,
            templates: None,
            data: None,
            documents: vec!["closed_book".into(), "positive".into(), "fake".into()],
            deactivate: None,
            max_new: 8,
        }
    }
}

fn emit_eval(
    out: &mut OutputSet,
    meta: &ReportMeta,
    name: &str,
    results: Vec<EvalResult>,
) -> Result<()> {
    let rows: Vec<EvalRow> = results.iter().map(EvalRow::of).collect();
    out.write_csv(&format!("{name}.csv"), &rows, meta)?;
    out.write_json(
        &format!("{name}.json"),
        &report(
            name,
            meta,
            results,
            &["em, cem, f1 and fake_follow are percentages"],
        ),
    )?;
    Ok(())
}

pub fn eval(ctx: &Ctx, cfg: &EvalCfg) -> Result<()> {
    let meta = ctx.meta("eval", cfg)?;
    let model = Model::load(&cfg.weights, &cfg.tokenizer, &cfg.templates)?;
    let data = load_data(&cfg.data, "data")?;
    let settings = cfg
        .documents
        .iter()
        .map(|d| d.parse::<DocumentSetting>())
        .collect::<ragscope::Result<Vec<_>>>()?;
    let set = cfg.deactivate.as_deref().map(load_set).transpose()?;
    let mut answerer = model.lab().answerer();
    answerer.max_new = cfg.max_new;
    let label = if set.is_some() { "deactivate" } else { "none" };
    let results = settings
        .into_iter()
        .map(|s| evaluate(&answerer, &data, s, set.as_ref(), label, Default::default()))
        .collect::<ragscope::Result<Vec<_>>>()?;
    let mut out = OutputSet::create(&ctx.out)?;
    emit_eval(&mut out, &meta, "eval", results)?;
    finish(out);
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowCfg {
    pub weights: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub tier: Option<Tier>,
    pub convention: Convention,
    pub normalization: Normalization,
    pub loss_scale: Option<f64>,
}

const FLOW_NOTES: &[&str] = &[
    "if_a_*: attention flow; if_s_*: saliency flow |G*A|; if_st_*: saliency flow |G*A^T|",
    "kc: key to context, kq: key to query, ka: key to answer",
];

fn emit_flow(out: &mut OutputSet, meta: &ReportMeta, flow: &DatasetFlow) -> Result<()> {
    out.write_csv("flow_profile.csv", &flow_rows(&flow.profile), meta)?;
    out.write_json(
        "flow_profile.json",
        &report("flow_profile", meta, vec![flow.clone()], FLOW_NOTES),
    )?;
    Ok(())
}

fn flow_settings(
    convention: Convention,
    normalization: Normalization,
    loss_scale: Option<f64>,
) -> FlowSettings {
    FlowSettings {
        convention,
        normalization,
        loss_scale,
    }
}

pub fn flow(ctx: &Ctx, cfg: &FlowCfg) -> Result<()> {
    let meta = ctx.meta("flow", cfg)?;
    let model = Model::load(&cfg.weights, &cfg.tokenizer, &cfg.templates)?;
    let data = load_data(&cfg.data, "data")?;
    let settings = flow_settings(cfg.convention, cfg.normalization, cfg.loss_scale);
    let flow = dataset_flow(
        &model.lab(),
        &data,
        cfg.tier.unwrap_or(Tier::Positive),
        &settings,
    )?;
    if flow.skipped > 0 {
        log::warn!(
            "{} examples skipped: key not found in passage",
            flow.skipped
        );
    }
    let mut out = OutputSet::create(&ctx.out)?;
    emit_flow(&mut out, &meta, &flow)?;
    finish(out);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesCfg {
    pub profile: Option<PathBuf>,
    pub method: StageMethod,
    /// Curve the changepoint method segments.
    pub curve: String,
}

impl Default for StagesCfg {
    fn default() -> Self {
        Self {
            profile: None,
            method: StageMethod::Quartile,
            curve: "if_a_kq".into(),
        }
    }
}

fn segment(flow: &DatasetFlow, method: StageMethod, curve: &str) -> Result<StageSegmentation> {
    Ok(match method {
        StageMethod::Quartile => quartile_stages(flow.profile.n_layers)?,
        StageMethod::Changepoint => {
            let curves = flow.profile.curves();
            let Some((_, c)) = curves.iter().find(|(name, _)| name == curve) else {
                bail!("profile has no curve `{curve}`");
            };
            changepoint_stages(c)?
        }
    })
}

fn emit_stages(out: &mut OutputSet, meta: &ReportMeta, segs: &[StageSegmentation]) -> Result<()> {
    let rows: Vec<_> = segs.iter().flat_map(stage_rows).collect();
    out.write_csv("stages.csv", &rows, meta)?;
    out.write_json(
        "stages.json",
        &report(
            "stages",
            meta,
            segs.to_vec(),
            &["ranges are half-open layer intervals"],
        ),
    )?;
    Ok(())
}

pub fn stages(ctx: &Ctx, cfg: &StagesCfg) -> Result<()> {
    let meta = ctx.meta("stages", cfg)?;
    let path = required(&cfg.profile, "profile")?;
    let profile = JsonReport::<DatasetFlow>::read(&path)?;
    let Some(flow) = profile.records.first() else {
        bail!("{} holds no profile", path.display());
    };
    let seg = segment(flow, cfg.method, &cfg.curve)?;
    let mut out = OutputSet::create(&ctx.out)?;
    emit_stages(&mut out, &meta, &[seg])?;
    finish(out);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntervenCfg {
    pub weights: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Output of `stages`; quartile stages when absent.
    pub stages: Option<PathBuf>,
    pub tiers: Vec<Tier>,
    pub prob_mode: ProbMode,
}

impl Default for IntervenCfg {
    fn default() -> Self {
        Self {
            weights: None,
            tokenizer: None,
            templates: None,
            data: None,
            stages: None,
            tiers: Tier::RELEVANCE.to_vec(),
            prob_mode: ProbMode::default(),
        }
    }
}

const HEATMAP_NOTES: &[&str] = &[
    "d = P(answer) without intervention minus P(answer) with key-to-query attention cut on the stage's layers",
    "external: the answer stated by the tier's passage; internal: the model's closed-book greedy answer",
];

pub fn intervene(ctx: &Ctx, cfg: &IntervenCfg) -> Result<()> {
    let meta = ctx.meta("intervene", cfg)?;
    let model = Model::load(&cfg.weights, &cfg.tokenizer, &cfg.templates)?;
    let data = load_data(&cfg.data, "data")?;
    let seg = match &cfg.stages {
        Some(p) => {
            let r = JsonReport::<StageSegmentation>::read(p)?;
            let Some(s) = r.records.into_iter().next() else {
                bail!("{} holds no segmentation", p.display());
            };
            if s.n_layers != model.weights.config.n_layers || !s.is_valid() {
                bail!(
                    "{} does not segment this model's {} layers",
                    p.display(),
                    model.weights.config.n_layers
                );
            }
            s
        }
        None => quartile_stages(model.weights.config.n_layers)?,
    };
    let rows = stage_heatmap(&model.lab(), &data, &cfg.tiers, &seg, cfg.prob_mode)?;
    let mut out = OutputSet::create(&ctx.out)?;
    out.write_csv("heatmap.csv", &rows, &meta)?;
    out.write_json(
        "heatmap.json",
        &report("heatmap", &meta, rows, HEATMAP_NOTES),
    )?;
    finish(out);
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KapeCfg {
    pub weights: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    /// Answered closed-book.
    pub ik_data: Option<PathBuf>,
    /// Answered with the positive passage.
    pub ek_data: Option<PathBuf>,
    pub fraction: Option<f64>,
    pub min_raw: Option<f64>,
    pub positions: PositionMode,
    pub answers: AnswerSource,
}

struct KapeOutcome {
    ik: DeactivationSet,
    ek: DeactivationSet,
}

fn run_kape(
    out: &mut OutputSet,
    meta: &ReportMeta,
    model: &Model,
    ik_data: &[QaExample],
    ek_data: &[QaExample],
    params: SelectionParams,
    positions: PositionMode,
    answers: AnswerSource,
) -> Result<KapeOutcome> {
    let lab = model.lab();
    let ik_items = kape_items_with(&lab, ik_data, KapeSetting::ClosedBookIk, answers)?;
    let ek_items = kape_items_with(&lab, ek_data, KapeSetting::RagGoldEk, answers)?;
    let mut run = kape_run(&model.weights, &ik_items, &ek_items, positions)?;
    let sel = select_knowledge_neurons(&mut run.table, params)?;
    let mut summary = KapeSummary::new(&run.table, &sel, params, &positions.to_string());
    summary.ik_examples = run.ik.examples;
    summary.ek_examples = run.ek.examples;
    summary.skipped_examples = run.ik.skipped + run.ek.skipped;
    out.write_csv("kape_table.csv", &run.table.rows, meta)?;
    out.write_json(
        "kape_summary.json",
        &report(
            "kape_summary",
            meta,
            vec![summary],
            &["p_ik and p_ek are empty when a neuron never fires under either setting; its score is then ln 2"],
        ),
    )?;
    out.write_json("ik_neurons.json", &sel.ik)?;
    out.write_json("ek_neurons.json", &sel.ek)?;
    Ok(KapeOutcome {
        ik: sel.ik,
        ek: sel.ek,
    })
}

pub fn kape(ctx: &Ctx, cfg: &KapeCfg) -> Result<()> {
    let meta = ctx.meta("kape", cfg)?;
    let model = Model::load(&cfg.weights, &cfg.tokenizer, &cfg.templates)?;
    let ik = load_data(&cfg.ik_data, "ik-data")?;
    let ek = load_data(&cfg.ek_data, "ek-data")?;
    let d = SelectionParams::default();
    let params = SelectionParams {
        fraction: cfg.fraction.unwrap_or(d.fraction),
        min_raw: cfg.min_raw.unwrap_or(d.min_raw),
    };
    let mut out = OutputSet::create(&ctx.out)?;
    run_kape(
        &mut out,
        &meta,
        &model,
        &ik,
        &ek,
        params,
        cfg.positions,
        cfg.answers,
    )?;
    finish(out);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeactivateCfg {
    pub weights: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub document: String,
    pub ik: Option<PathBuf>,
    pub ek: Option<PathBuf>,
    /// Also deactivate a seeded random set of the larger set's size.
    pub random_baseline: bool,
}

impl Default for DeactivateCfg {
    fn default() -> Self {
        Self {
            weights: None,
            tokenizer: None,
            templates: None,
            data: None,
            document: "fake".into(),
            ik: None,
            ek: None,
            random_baseline: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DeactivationRecord {
    intervention: String,
    neurons: usize,
    /// `fake_follow` for the fake tier, `em` otherwise.
    outcome: String,
    rate: f64,
    /// Paired against the undeactivated run; absent for that run itself.
    sign_test: Option<SignTest>,
    eval: EvalRow,
}

fn run_deactivations(
    out: &mut OutputSet,
    meta: &ReportMeta,
    model: &Model,
    data: &[QaExample],
    document: DocumentSetting,
    sets: &[(String, DeactivationSet)],
) -> Result<Vec<DeactivationRecord>> {
    let answerer = model.lab().answerer();
    let fake = document == DocumentSetting::NOISY;
    let flags = |r: &EvalResult| -> Vec<bool> {
        if fake {
            follow_flags(r)
        } else {
            r.examples.iter().map(|e| e.em).collect()
        }
    };
    let rate = |r: &EvalResult| {
        if fake {
            r.fake_follow.unwrap_or(0.0)
        } else {
            r.em
        }
    };
    let base = evaluate(&answerer, data, document, None, "none", Default::default())?;
    let base_flags = flags(&base);
    let mut records = vec![DeactivationRecord {
        intervention: "none".into(),
        neurons: 0,
        outcome: if fake { "fake_follow" } else { "em" }.into(),
        rate: rate(&base),
        sign_test: None,
        eval: EvalRow::of(&base),
    }];
    let mut results = vec![base];
    for (name, set) in sets {
        set.validate(&model.weights.config)?;
        let r = evaluate(
            &answerer,
            data,
            document,
            Some(set),
            name,
            Default::default(),
        )?;
        records.push(DeactivationRecord {
            intervention: name.clone(),
            neurons: set.len(),
            outcome: records[0].outcome.clone(),
            rate: rate(&r),
            sign_test: Some(SignTest::paired(&base_flags, &flags(&r))?),
            eval: EvalRow::of(&r),
        });
        results.push(r);
    }
    let rows: Vec<EvalRow> = results.iter().map(EvalRow::of).collect();
    out.write_csv("deactivate.csv", &rows, meta)?;
    out.write_json(
        "deactivate.json",
        &report(
            "deactivate",
            meta,
            records.clone(),
            &["sign_test counts examples whose outcome flipped relative to the undeactivated run"],
        ),
    )?;
    Ok(records)
}

fn named_sets(
    ik: Option<DeactivationSet>,
    ek: Option<DeactivationSet>,
    random: bool,
    model: &Model,
    seed: u64,
) -> Vec<(String, DeactivationSet)> {
    let mut sets = Vec::new();
    let size = ik
        .as_ref()
        .map_or(0, |s| s.len())
        .max(ek.as_ref().map_or(0, |s| s.len()));
    if let Some(s) = ik {
        sets.push(("deactivate_ik".to_string(), s));
    }
    if let Some(s) = ek {
        sets.push(("deactivate_ek".to_string(), s));
    }
    if random && size > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sets.push((
            "deactivate_random".to_string(),
            DeactivationSet::random(&model.weights.config, size, &mut rng),
        ));
    }
    sets
}

pub fn deactivate(ctx: &Ctx, cfg: &DeactivateCfg) -> Result<()> {
    let meta = ctx.meta("deactivate", cfg)?;
    let model = Model::load(&cfg.weights, &cfg.tokenizer, &cfg.templates)?;
    let data = load_data(&cfg.data, "data")?;
    let document: DocumentSetting = cfg.document.parse()?;
    let ik = cfg.ik.as_deref().map(load_set).transpose()?;
    let ek = cfg.ek.as_deref().map(load_set).transpose()?;
    if ik.is_none() && ek.is_none() {
        return Err(crate::config::usage("give at least one of --ik and --ek"));
    }
    let sets = named_sets(ik, ek, cfg.random_baseline, &model, ctx.seed);
    let mut out = OutputSet::create(&ctx.out)?;
    run_deactivations(&mut out, &meta, &model, &data, document, &sets)?;
    finish(out);
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LensCfg {
    pub weights: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub tier: Option<Tier>,
}

const LENS_NOTES: &[&str] = &[
    "tracked token: the first position where the closed-book answer and the passage's answer differ, teacher-forced on the shared prefix",
    "examples whose two answers agree on every compared token are skipped",
];

fn emit_lens(
    out: &mut OutputSet,
    meta: &ReportMeta,
    model: &Model,
    data: &[QaExample],
    tier: Tier,
) -> Result<()> {
    let (rows, skipped) = lens_trajectories(&model.lab(), data, tier)?;
    if skipped > 0 {
        log::warn!("logit lens skipped {skipped} examples without a divergent token");
    }
    out.write_csv("logit_lens.csv", &rows, meta)?;
    let mut r = report("logit_lens", meta, rows, LENS_NOTES);
    r.notes.push(format!("skipped {skipped} of {}", data.len()));
    out.write_json("logit_lens.json", &r)?;
    Ok(())
}

pub fn logitlens(ctx: &Ctx, cfg: &LensCfg) -> Result<()> {
    let meta = ctx.meta("logitlens", cfg)?;
    let model = Model::load(&cfg.weights, &cfg.tokenizer, &cfg.templates)?;
    let data = load_data(&cfg.data, "data")?;
    let mut out = OutputSet::create(&ctx.out)?;
    emit_lens(
        &mut out,
        &meta,
        &model,
        &data,
        cfg.tier.unwrap_or(Tier::Fake),
    )?;
    finish(out);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportCfg {
    /// Output directory of `train`.
    pub model: Option<PathBuf>,
    pub convention: Convention,
    pub normalization: Normalization,
    pub loss_scale: Option<f64>,
    pub stage_method: StageMethod,
    pub stage_curve: String,
    pub tiers: Vec<Tier>,
    pub prob_mode: ProbMode,
    pub fraction: f64,
    pub min_raw: f64,
    pub positions: PositionMode,
    pub answers: AnswerSource,
}

impl Default for ReportCfg {
    fn default() -> Self {
        let sel = SelectionParams::default();
        Self {
            model: None,
            convention: Convention::default(),
            normalization: Normalization::default(),
            loss_scale: None,
            stage_method: StageMethod::Quartile,
            stage_curve: "if_a_kq".into(),
            tiers: Tier::RELEVANCE.to_vec(),
            prob_mode: ProbMode::default(),
            fraction: sel.fraction,
            min_raw: sel.min_raw,
            positions: PositionMode::default(),
            answers: AnswerSource::default(),
        }
    }
}

/// Every analysis on a model from `train`: evaluation, flow, stages,
/// heatmap, KAPE with deactivation and logit lens.
pub fn full_report(ctx: &Ctx, cfg: &ReportCfg) -> Result<()> {
    let meta = ctx.meta("report", cfg)?;
    let dir = required(&cfg.model, "model")?;
    let model = Model::load(&Some(dir.join("weights.bin")), &None, &None)?;
    let world = FactWorld::load(dir.join("world.json"))?;
    let trained = make_split(&world, Split::Trained)?;
    let mut external = make_split(&world, Split::Holdout)?;
    external.extend(make_split(&world, Split::Context)?);
    if trained.is_empty() || external.is_empty() {
        bail!("world needs both trained and holdout or context facts");
    }
    let lab = model.lab();
    let answerer = lab.answerer();
    let mut out = OutputSet::create(&ctx.out)?;

    log::info!("evaluating");
    let mut results = Vec::new();
    for (name, data) in [("trained", &trained), ("external", &external)] {
        for doc in [
            DocumentSetting::ClosedBook,
            DocumentSetting::GOLD,
            DocumentSetting::NOISY,
        ] {
            results.push(evaluate(
                &answerer,
                data,
                doc,
                None,
                name,
                Default::default(),
            )?);
        }
    }
    emit_eval(&mut out, &meta, "eval", results)?;

    log::info!("flow profile");
    let settings = flow_settings(cfg.convention, cfg.normalization, cfg.loss_scale);
    let flow = dataset_flow(&lab, &external, Tier::Positive, &settings)?;
    emit_flow(&mut out, &meta, &flow)?;
    let seg = segment(&flow, cfg.stage_method, &cfg.stage_curve)?;
    emit_stages(&mut out, &meta, std::slice::from_ref(&seg))?;

    log::info!("stage heatmap");
    let rows = stage_heatmap(&lab, &external, &cfg.tiers, &seg, cfg.prob_mode)?;
    out.write_csv("heatmap.csv", &rows, &meta)?;
    out.write_json(
        "heatmap.json",
        &report("heatmap", &meta, rows, HEATMAP_NOTES),
    )?;

    log::info!("knowledge neurons");
    let params = SelectionParams {
        fraction: cfg.fraction,
        min_raw: cfg.min_raw,
    };
    let sel = run_kape(
        &mut out,
        &meta,
        &model,
        &trained,
        &external,
        params,
        cfg.positions,
        cfg.answers,
    )?;
    let sets = named_sets(Some(sel.ik), Some(sel.ek), true, &model, ctx.seed);
    run_deactivations(
        &mut out,
        &meta,
        &model,
        &trained,
        DocumentSetting::NOISY,
        &sets,
    )?;

    log::info!("logit lens");
    emit_lens(&mut out, &meta, &model, &trained, Tier::Fake)?;
    finish(out);
    Ok(())
}
