mod common;

use std::f64::consts::LN_2;

use rand::Rng;

use ragscope::kape::{
    activation_counts, kape_score, normalize_pair, select_knowledge_neurons, CountItem, KapeRow,
    KapeTable, NeuronClass, PositionMode, SelectionParams,
};
use ragscope::model::{forward, ForwardOptions, TraceLevel};

#[test]
fn endpoints_are_exact() {
    assert_eq!(kape_score(0.5, 0.5), LN_2);
    assert_eq!(kape_score(1.0, 0.0), 0.0);
    assert_eq!(kape_score(0.0, 1.0), 0.0);
    let r = KapeRow::new(2, 7, 0.4, 0.4).unwrap();
    assert_eq!(r.kape, LN_2);
}

#[test]
fn scores_stay_in_range_and_match_entropy() {
    let mut rng = common::rng(51);
    for _ in 0..5000 {
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        let a = if rng.random_bool(0.05) { 0.0 } else { a };
        let r = KapeRow::new(0, 0, a, b).unwrap();
        assert!((0.0..=LN_2).contains(&r.kape), "{a} {b}: {}", r.kape);
        if let Some((p, q)) = normalize_pair(a, b) {
            assert!((p + q - 1.0).abs() < 1e-15);
            let h: f64 = [p, q]
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|&x| -x * x.ln())
                .sum();
            assert!((r.kape - h).abs() < 1e-12);
        }
    }
}

#[test]
fn selection_takes_the_ceiling_fraction() {
    let mut rng = common::rng(52);
    for n in [1usize, 7, 99, 100, 101, 250, 1000] {
        for fraction in [0.001, 0.01, 0.05, 0.3, 1.0] {
            let ik: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let ek: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let mut table = KapeTable::from_raw(1, &ik, &ek).unwrap();
            let params = SelectionParams {
                fraction,
                min_raw: 0.0,
            };
            let sel = select_knowledge_neurons(&mut table, params).unwrap();
            let want = (fraction * n as f64).ceil() as usize;
            assert_eq!(sel.candidates, want);
            assert_eq!(
                sel.ik.len() + sel.ek.len(),
                table
                    .rows
                    .iter()
                    .filter(|r| r.class != NeuronClass::None)
                    .count()
            );
            assert!(sel.ik.len() + sel.ek.len() <= want);
        }
    }
}

#[test]
fn planted_neurons_are_recovered_exactly() {
    let (layers, d_ff) = (7, 100);
    let n = layers * d_ff;
    let mut rng = common::rng(53);
    // Background neurons fire about equally under both settings.
    let mut ik: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..0.7)).collect();
    let mut ek: Vec<f64> = ik
        .iter()
        .map(|&v| v * rng.random_range(0.8..1.25))
        .collect();
    let planted_ik = [(0, 5), (3, 77), (6, 99)];
    let planted_ek = [(0, 50), (1, 3), (5, 42)];
    for &(l, j) in &planted_ik {
        ik[l * d_ff + j] = 0.9;
        ek[l * d_ff + j] = 0.01;
    }
    for &(l, j) in &planted_ek {
        ik[l * d_ff + j] = 0.0;
        ek[l * d_ff + j] = 0.6;
    }
    // Skewed but too rarely active to count.
    ik[7] = 0.1;
    ek[7] = 0.0;
    let mut table = KapeTable::from_raw(d_ff, &ik, &ek).unwrap();
    let sel = select_knowledge_neurons(
        &mut table,
        SelectionParams {
            fraction: 0.01,
            min_raw: 0.2,
        },
    )
    .unwrap();
    assert_eq!(sel.candidates, 7);
    assert_eq!(
        sel.ik.iter().copied().collect::<Vec<_>>(),
        planted_ik.to_vec()
    );
    assert_eq!(
        sel.ek.iter().copied().collect::<Vec<_>>(),
        planted_ek.to_vec()
    );
    assert_eq!(table.count(NeuronClass::Ik), 3);
    assert_eq!(table.count(NeuronClass::Ek), 3);
    assert_eq!(table.rows[7].class, NeuronClass::None);
    assert_eq!(table.rows[7].kape, 0.0);
}

#[test]
fn counts_match_traced_gates() {
    let w = common::model::<f64>(common::config(2, 2, 16, 24, 30), 54, 3.0);
    let mut rng = common::rng(55);
    let items: Vec<CountItem> = (0..12)
        .map(|k| {
            let plen = rng.random_range(1..10);
            let alen = k % 4;
            CountItem {
                prompt: common::tokens(&mut rng, plen, 30),
                answer: common::tokens(&mut rng, alen, 30),
            }
        })
        .collect();
    for mode in [PositionMode::AnswerSpan, PositionMode::All] {
        let got = activation_counts(&w, &items, mode).unwrap();
        let mut active = vec![0u64; 2 * 24];
        let mut positions = 0u64;
        let mut skipped = 0;
        for it in &items {
            let mut seq = it.prompt.clone();
            seq.extend(it.answer.iter().take(it.answer.len().saturating_sub(1)));
            let rows: Vec<usize> = match mode {
                PositionMode::All => (0..seq.len()).collect(),
                PositionMode::AnswerSpan => {
                    (it.prompt.len() - 1..it.prompt.len() - 1 + it.answer.len()).collect()
                }
            };
            if rows.is_empty() {
                skipped += 1;
                continue;
            }
            let (_, trace) = forward(&w, &seq, &ForwardOptions::traced(TraceLevel::Full)).unwrap();
            for l in 0..2 {
                for &p in &rows {
                    for j in 0..24 {
                        if trace.gate[l].row(p)[j] > 0.0 {
                            active[l * 24 + j] += 1;
                        }
                    }
                }
            }
            positions += rows.len() as u64;
        }
        assert_eq!(got.active, active);
        assert_eq!(got.positions, positions);
        assert_eq!(got.skipped, skipped);
        assert_eq!(got.examples + got.skipped, items.len());
        assert!(active.iter().any(|&c| c > 0) && active.iter().any(|&c| c < positions));
    }
}
