mod common;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ragscope::autograd::Tensor;
use ragscope::flow::{
    attention_flow, attention_gradients, flow_profile, mean_profile, saliency_flow,
    saliency_matrices, Convention, Direction, FlowSettings, Normalization, SaliencyOptions,
};
use ragscope::model::{forward, ForwardOptions, ForwardTrace, TraceLevel};
use ragscope::spans::{assemble_rag, KeyOptions, SpanMap, SpanName, Templates};
use ragscope::tokenizer::Tokenizer;

fn random_trace(rng: &mut ChaCha8Rng, layers: usize, heads: usize, t: usize) -> ForwardTrace<f64> {
    let attention = (0..layers)
        .map(|_| {
            let mut a = Tensor::zeros(&[heads, t, t]);
            for h in 0..heads {
                for i in 0..t {
                    let raw: Vec<f64> = (0..=i).map(|_| rng.random::<f64>()).collect();
                    let z: f64 = raw.iter().sum();
                    for (j, v) in raw.iter().enumerate() {
                        a.data_mut()[(h * t + i) * t + j] = v / z;
                    }
                }
            }
            a
        })
        .collect();
    ForwardTrace {
        level: TraceLevel::Attention,
        seq_len: t,
        n_heads: heads,
        attention,
        gate: vec![],
        mha_delta: vec![],
        mlp_delta: vec![],
        hidden: vec![],
        embedded: None,
    }
}

fn random_subset(rng: &mut ChaCha8Rng, t: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..t).collect();
    idx.shuffle(rng);
    let k = rng.random_range(1..=t);
    let mut s = idx[..k].to_vec();
    s.sort_unstable();
    s
}

fn spans_of(source: Vec<usize>, target: Vec<usize>, t: usize) -> SpanMap {
    SpanMap {
        key: source,
        query: target,
        prompt_length: t,
        ..Default::default()
    }
}

/// Flow from `source` into `target`: rows in the target, columns in the
/// source, diagonal excluded.
fn naive(
    trace: &ForwardTrace<f64>,
    layer: usize,
    rows: &[usize],
    cols: &[usize],
    mean: bool,
) -> f64 {
    let mut s = 0.0;
    for h in 0..trace.n_heads {
        for &i in rows {
            for &j in cols {
                if i != j {
                    s += trace.attn(layer, h, i, j);
                }
            }
        }
    }
    if mean {
        s / (trace.n_heads * rows.len() * cols.len()) as f64
    } else {
        s
    }
}

#[test]
fn vectorized_flow_matches_triple_loop() {
    let mut rng = common::rng(21);
    for case in 0..100 {
        let heads = rng.random_range(1..=8);
        let t = rng.random_range(4..=64);
        let layers = rng.random_range(1..=3);
        let trace = random_trace(&mut rng, layers, heads, t);
        let src = random_subset(&mut rng, t);
        let tgt = random_subset(&mut rng, t);
        let spans = spans_of(src.clone(), tgt.clone(), t);
        for (norm, mean) in [(Normalization::Raw, false), (Normalization::Mean, true)] {
            let fwd = attention_flow(
                &trace,
                &spans,
                SpanName::Key,
                SpanName::Query,
                norm,
                Convention::SourceFirst,
            )
            .unwrap();
            let rev = attention_flow(
                &trace,
                &spans,
                SpanName::Key,
                SpanName::Query,
                norm,
                Convention::RowsFromSource,
            )
            .unwrap();
            assert_eq!(fwd.len(), layers);
            for l in 0..layers {
                let a = naive(&trace, l, &tgt, &src, mean);
                let b = naive(&trace, l, &src, &tgt, mean);
                assert!(
                    (fwd[l] - a).abs() <= 1e-9,
                    "case {case} layer {l}: {} vs {a}",
                    fwd[l]
                );
                assert!(
                    (rev[l] - b).abs() <= 1e-9,
                    "case {case} layer {l}: {} vs {b}",
                    rev[l]
                );
            }
        }
    }
}

#[test]
fn flow_from_a_later_span_is_exactly_zero() {
    let mut rng = common::rng(22);
    for _ in 0..50 {
        let t = rng.random_range(4..=40);
        let cut = rng.random_range(1..t);
        let heads = rng.random_range(1..=4);
        let trace = random_trace(&mut rng, 2, heads, t);
        let target: Vec<usize> = (0..cut).collect();
        let source: Vec<usize> = (cut..t).collect();
        let spans = spans_of(source, target, t);
        for norm in [Normalization::Raw, Normalization::Mean] {
            let f = attention_flow(
                &trace,
                &spans,
                SpanName::Key,
                SpanName::Query,
                norm,
                Convention::SourceFirst,
            )
            .unwrap();
            assert!(f.iter().all(|&v| v == 0.0));
        }
    }

    let w = common::model::<f64>(common::config(3, 4, 16, 32, 40), 5, 10.0);
    let seq = common::tokens(&mut rng, 20, 40);
    let (_, trace) = forward(&w, &seq, &ForwardOptions::traced(TraceLevel::Attention)).unwrap();
    let spans = spans_of((12..20).collect(), (0..12).collect(), 20);
    let f = attention_flow(
        &trace,
        &spans,
        SpanName::Key,
        SpanName::Query,
        Normalization::Raw,
        Convention::SourceFirst,
    )
    .unwrap();
    assert_eq!(f, vec![0.0; 3]);
    let sal = saliency_matrices(&w, &seq[..18], &seq[18..], SaliencyOptions::default()).unwrap();
    let spans = spans_of((12..18).collect(), (0..12).collect(), 18);
    let f = saliency_flow(
        &sal,
        &spans,
        SpanName::Key,
        SpanName::Query,
        Normalization::Raw,
        Convention::SourceFirst,
    )
    .unwrap();
    assert_eq!(f, vec![0.0; 3]);
}

#[test]
fn saliency_flow_matches_elementwise_products() {
    let w = common::model::<f64>(common::config(2, 3, 12, 24, 30), 6, 10.0);
    let mut rng = common::rng(23);
    let prompt = common::tokens(&mut rng, 14, 30);
    let answer = common::tokens(&mut rng, 3, 30);
    let g = attention_gradients(&w, &prompt, &answer, 1.0, &ForwardOptions::default()).unwrap();
    let t = g.seq_len;
    let sal = g.saliency(false);
    let sal_t = g.saliency(true);
    let src: Vec<usize> = vec![2, 3, 4, 9];
    let tgt: Vec<usize> = vec![5, 10, 11, 12, 13];
    let spans = spans_of(src.clone(), tgt.clone(), prompt.len());
    let f = saliency_flow(
        &sal,
        &spans,
        SpanName::Key,
        SpanName::Query,
        Normalization::Raw,
        Convention::SourceFirst,
    )
    .unwrap();
    let ft = saliency_flow(
        &sal_t,
        &spans,
        SpanName::Key,
        SpanName::Query,
        Normalization::Raw,
        Convention::SourceFirst,
    )
    .unwrap();
    for l in 0..2 {
        let (a, gr) = (g.attention[l].data(), g.grad[l].data());
        let mut want = 0.0;
        let mut want_t = 0.0;
        for &i in &tgt {
            for &j in &src {
                if i == j {
                    continue;
                }
                let mut cell = 0.0;
                let mut cell_t = 0.0;
                for h in 0..3 {
                    cell += (gr[(h * t + i) * t + j] * a[(h * t + i) * t + j]).abs();
                    cell_t += (gr[(h * t + i) * t + j] * a[(h * t + j) * t + i]).abs();
                }
                want += cell;
                want_t += cell_t;
            }
        }
        assert!((f[l] - want).abs() <= 1e-12 * want.max(1.0));
        assert!((ft[l] - want_t).abs() <= 1e-12 * want_t.max(1.0));
        assert!(want > 0.0);
    }
}

fn toy_prompt() -> (Tokenizer, ragscope::spans::AssembledPrompt) {
    let templates = Templates::default();
    let passage = "the capital of velm is zorba .";
    let question = "what is the capital of velm ?";
    let tok = Tokenizer::build([
        passage,
        question,
        templates.rag.as_str(),
        templates.answer_prompt.as_str(),
    ]);
    let p = assemble_rag(
        &tok,
        &templates,
        &[passage],
        question,
        Some("zorba"),
        KeyOptions::default(),
    )
    .unwrap();
    assert!(p.key_located);
    (tok, p)
}

#[test]
fn profile_curves_agree_with_prompt_only_traces() {
    let (tok, prompt) = toy_prompt();
    let mut cfg = common::config(4, 2, 16, 32, tok.vocab_size());
    cfg.max_seq = 48;
    let w = common::model::<f64>(cfg, 12, 10.0);
    let answer = tok.encode("zorba");
    let (_, trace) = forward(
        &w,
        &prompt.tokens,
        &ForwardOptions::traced(TraceLevel::Attention),
    )
    .unwrap();
    for norm in [Normalization::Raw, Normalization::Mean] {
        for conv in [Convention::SourceFirst, Convention::RowsFromSource] {
            let settings = FlowSettings {
                convention: conv,
                normalization: norm,
                loss_scale: None,
            };
            let p = flow_profile(&w, &prompt, &answer, &settings).unwrap();
            assert_eq!(p.curves().len(), 9);
            for d in Direction::ALL {
                let (src, tgt) = d.spans();
                let want = attention_flow(&trace, &prompt.spans, src, tgt, norm, conv).unwrap();
                for (a, b) in p.attention.get(d).iter().zip(&want) {
                    assert!((a - b).abs() <= 1e-12, "{d}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn doubling_the_loss_doubles_saliency_only() {
    let (tok, prompt) = toy_prompt();
    let w = common::model::<f64>(common::config(4, 2, 16, 32, tok.vocab_size()), 13, 10.0);
    let answer = tok.encode("zorba");
    let one = flow_profile(&w, &prompt, &answer, &FlowSettings::default()).unwrap();
    let two = flow_profile(
        &w,
        &prompt,
        &answer,
        &FlowSettings {
            loss_scale: Some(2.0),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(one.attention, two.attention);
    for d in Direction::ALL {
        for (a, b) in one.saliency.get(d).iter().zip(two.saliency.get(d)) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn mean_profile_weights_by_examples() {
    let (tok, prompt) = toy_prompt();
    let w = common::model::<f64>(common::config(4, 2, 16, 32, tok.vocab_size()), 14, 10.0);
    let a = flow_profile(&w, &prompt, &tok.encode("zorba"), &FlowSettings::default()).unwrap();
    let b = flow_profile(&w, &prompt, &tok.encode("velm"), &FlowSettings::default()).unwrap();
    let ab = mean_profile(&[a.clone(), b.clone()]).unwrap();
    let abb = mean_profile(&[ab.clone(), b.clone()]).unwrap();
    assert_eq!(abb.examples, 3);
    for d in Direction::ALL {
        for l in 0..4 {
            let want = (a.saliency.get(d)[l] + 2.0 * b.saliency.get(d)[l]) / 3.0;
            assert!((abb.saliency.get(d)[l] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
}
