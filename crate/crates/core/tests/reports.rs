mod common;

use rand::Rng;

use ragscope::analysis::{stage_heatmap, Lab, SignTest};
use ragscope::corpus::{
    generate_world, make_split, world_tokenizer, ModelShape, Split, Tier, WorldParams,
};
use ragscope::flow::quartile_stages;
use ragscope::intervene::ProbMode;
use ragscope::kape::{KapeRow, NeuronClass};
use ragscope::model::ModelWeights;
use ragscope::report::{csv_bytes, read_csv, JsonReport, OutputSet, ReportMeta, SCHEMA_VERSION};
use ragscope::spans::Templates;

fn random_rows(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<KapeRow> {
    (0..n)
        .map(|k| {
            let ik = if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random::<f64>()
            };
            let ek = if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random::<f64>()
            };
            let mut r = KapeRow::new(k / 10, k % 10, ik, ek).unwrap();
            r.class = [NeuronClass::Ik, NeuronClass::Ek, NeuronClass::None][k % 3];
            r
        })
        .collect()
}

fn parse_opt(s: &str) -> Option<f64> {
    (!s.is_empty()).then(|| s.parse().unwrap())
}

#[test]
fn csv_and_json_carry_the_same_records() {
    let mut rng = common::rng(71);
    let dir = tempfile::tempdir().unwrap();
    let meta = ReportMeta::new(&serde_json::json!({"seed": 3, "fraction": 0.01})).unwrap();
    let rows = random_rows(&mut rng, 100);
    let mut out = OutputSet::create(dir.path()).unwrap();
    let csv_path = out.write_csv("kape_table.csv", &rows, &meta).unwrap();
    let json_path = out
        .write_json(
            "kape_table.json",
            &JsonReport::new("kape_table", &meta, rows.clone()),
        )
        .unwrap();
    out.commit();

    let back: JsonReport<KapeRow> = JsonReport::read(&json_path).unwrap();
    assert_eq!(back.records, rows);
    assert_eq!(back.config_hash, meta.config_hash);
    assert_eq!(back.schema_version, SCHEMA_VERSION);

    let table = read_csv(&csv_path).unwrap();
    assert_eq!(table.len(), 100);
    for (m, r) in table.iter().zip(&rows) {
        assert_eq!(m["layer"].parse::<usize>().unwrap(), r.layer);
        assert_eq!(m["neuron"].parse::<usize>().unwrap(), r.neuron);
        assert_eq!(m["raw_ik"].parse::<f64>().unwrap(), r.raw_ik);
        assert_eq!(m["raw_ek"].parse::<f64>().unwrap(), r.raw_ek);
        assert_eq!(parse_opt(&m["p_ik"]), r.p_ik);
        assert_eq!(parse_opt(&m["p_ek"]), r.p_ek);
        assert_eq!(m["kape"].parse::<f64>().unwrap(), r.kape);
        assert_eq!(m["class"], r.class.to_string());
        assert_eq!(m["schema_version"], SCHEMA_VERSION.to_string());
        assert_eq!(m["config_hash"], meta.config_hash);
    }
}

#[test]
fn empty_outputs_keep_their_headers() {
    let meta = ReportMeta::new(&serde_json::json!({})).unwrap();
    let bytes = csv_bytes::<KapeRow>(&[], &meta).unwrap();
    assert_eq!(
        String::from_utf8(bytes).unwrap(),
        "layer,neuron,raw_ik,raw_ek,p_ik,p_ek,kape,class,schema_version,config_hash\n"
    );
    let json =
        serde_json::to_value(JsonReport::<KapeRow>::new("kape_table", &meta, vec![])).unwrap();
    assert_eq!(json["records"], serde_json::json!([]));
}

#[test]
fn uncommitted_outputs_are_removed() {
    let dir = tempfile::tempdir().unwrap();
    let meta = ReportMeta::new(&1).unwrap();
    let path = {
        let mut out = OutputSet::create(dir.path().join("run")).unwrap();
        let p = out
            .write_csv("a.csv", &random_rows(&mut common::rng(72), 3), &meta)
            .unwrap();
        assert!(p.exists());
        p
    };
    assert!(!path.exists());
    assert_eq!(
        std::fs::read_dir(dir.path().join("run")).unwrap().count(),
        0
    );
}

#[test]
fn schema_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let meta = ReportMeta::new(&1).unwrap();
    let mut v = serde_json::to_value(JsonReport::<u32>::new("x", &meta, vec![1, 2])).unwrap();
    v["schema_version"] = serde_json::json!(SCHEMA_VERSION + 1);
    let p = dir.path().join("x.json");
    std::fs::write(&p, v.to_string()).unwrap();
    assert!(JsonReport::<u32>::read(&p).is_err());
}

#[test]
fn heatmap_has_a_row_per_stage_and_tier() {
    let templates = Templates::default();
    let world = generate_world(
        4,
        &WorldParams {
            n_entities: 12,
            n_relations: 2,
            objects_per_relation: 5,
            holdout_fraction: 0.25,
            context_fraction: 0.0,
        },
    )
    .unwrap();
    let tok = world_tokenizer(&world, &templates);
    let shape = ModelShape {
        n_layers: 5,
        n_heads: 2,
        d_model: 16,
        d_ff: 24,
        ..Default::default()
    };
    let w = ModelWeights::<f64>::init(shape.config(tok.vocab_size()), 9).unwrap();
    let lab = Lab::new(&w, &tok, &templates);
    let examples = make_split(&world, Split::Holdout).unwrap();
    let seg = quartile_stages(5).unwrap();
    for tiers in [&Tier::RELEVANCE[..], &[Tier::Positive, Tier::Fake][..]] {
        let rows =
            stage_heatmap(&lab, &examples[..3], tiers, &seg, ProbMode::GeometricMean).unwrap();
        assert_eq!(rows.len(), 4 * tiers.len());
        for (k, r) in rows.iter().enumerate() {
            assert_eq!(r.tier, tiers[k / 4]);
            assert_eq!(r.layer_start..r.layer_end, seg.ranges[k % 4]);
            assert!(r.d_external.is_finite());
        }
    }
}

/// Two-sided exact binomial p-value summed term by term.
fn binomial_p(up: usize, down: usize) -> f64 {
    let m = up + down;
    if m == 0 {
        return 1.0;
    }
    let k = up.min(down);
    let mut tail = 0.0;
    for i in 0..=k {
        let mut c = 1.0f64;
        for j in 0..i {
            c = c * (m - j) as f64 / (j + 1) as f64;
        }
        tail += c * 0.5f64.powi(m as i32);
    }
    (2.0 * tail).min(1.0)
}

#[test]
fn sign_test_matches_binomial_sum() {
    for (up, down) in [(0, 0), (3, 0), (0, 5), (10, 10), (12, 3), (1, 30), (40, 55)] {
        let t = SignTest::new(up, down, 200);
        assert!(
            (t.p_value - binomial_p(up, down)).abs() < 1e-12,
            "{up} {down}"
        );
        assert_eq!(t.direction(), (up as i32 - down as i32).signum());
    }
    let base = [false, true, true, false, false];
    let treated = [true, false, true, true, false];
    let t = SignTest::paired(&base, &treated).unwrap();
    assert_eq!((t.up, t.down, t.n), (2, 1, 5));
    assert!(SignTest::paired(&base, &treated[..4]).is_err());
}
