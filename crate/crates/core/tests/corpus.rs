use std::collections::BTreeSet;

use ragscope::corpus::{
    build_toy, generate_world, make_qa, make_split, read_jsonl, training_texts, world_tokenizer,
    write_jsonl, ModelShape, Split, Tier, ToySetup, TrainConfig, TrainMix, WorldParams,
};
use ragscope::model::{load_weights, save_weights};
use ragscope::spans::Templates;

fn params() -> WorldParams {
    WorldParams {
        n_entities: 40,
        n_relations: 3,
        objects_per_relation: 8,
        holdout_fraction: 0.15,
        context_fraction: 0.2,
    }
}

#[test]
fn worlds_are_deterministic_and_well_formed() {
    let a = generate_world(5, &params()).unwrap();
    assert_eq!(a, generate_world(5, &params()).unwrap());
    assert_ne!(a.entities, generate_world(6, &params()).unwrap().entities);
    a.validate().unwrap();
    assert_eq!(a.facts.len(), 40 * 3);
    let pairs: BTreeSet<(usize, usize)> = a.facts.iter().map(|f| (f.subject, f.relation)).collect();
    assert_eq!(pairs.len(), a.facts.len());
    assert_eq!(a.indices(Split::Holdout).len(), 18);
    assert_eq!(a.indices(Split::Context).len(), 24);
    assert_eq!(a.indices(Split::Trained).len(), 78);
    let names: BTreeSet<&String> = a
        .entities
        .iter()
        .chain(a.relations.iter().flat_map(|r| &r.objects))
        .collect();
    assert_eq!(names.len(), a.entities.len() + 3 * 8);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("world.json");
    a.save(&p).unwrap();
    assert_eq!(ragscope::corpus::FactWorld::load(&p).unwrap(), a);
}

#[test]
fn bad_world_parameters_are_rejected() {
    for bad in [
        WorldParams {
            holdout_fraction: 0.0,
            ..params()
        },
        WorldParams {
            holdout_fraction: 0.6,
            context_fraction: 0.4,
            ..params()
        },
        WorldParams {
            objects_per_relation: 1,
            ..params()
        },
        WorldParams {
            n_relations: 99,
            ..params()
        },
        WorldParams {
            n_entities: 0,
            ..params()
        },
    ] {
        assert!(generate_world(1, &bad).is_err());
    }
}

#[test]
fn fake_passages_differ_from_positive_only_in_the_answer() {
    let world = generate_world(7, &params()).unwrap();
    for i in 0..world.facts.len() {
        let ex = make_qa(&world, i).unwrap();
        assert_eq!(ex, make_qa(&world, i).unwrap());
        let gold = ex.gold();
        let fake = ex.fake_answer.as_deref().unwrap();
        assert_ne!(gold, fake);
        let pos: Vec<&str> = ex.passage(Tier::Positive).unwrap().split(' ').collect();
        let fak: Vec<&str> = ex.passage(Tier::Fake).unwrap().split(' ').collect();
        assert_eq!(pos.len(), fak.len());
        let diff: Vec<(&str, &str)> = pos
            .iter()
            .zip(&fak)
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (*a, *b))
            .collect();
        assert_eq!(diff, vec![(gold, fake)]);
        for t in [Tier::Hard, Tier::HardMinus, Tier::Random] {
            if let Ok(p) = ex.passage(t) {
                assert!(
                    !p.split(' ').any(|w| w == gold),
                    "{t} passage states the gold answer"
                );
                assert_ne!(p, ex.passage(Tier::Positive).unwrap());
            }
        }
        assert_eq!(ex.provenance, world.facts[i].split);
    }
}

#[test]
fn jsonl_round_trips() {
    let world = generate_world(8, &params()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for split in [Split::Trained, Split::Context, Split::Holdout] {
        let ex = make_split(&world, split).unwrap();
        let p = dir.path().join(format!("{split}.jsonl"));
        write_jsonl(&p, &ex).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), ex);
    }
    let p = dir.path().join("broken.jsonl");
    std::fs::write(&p, "{\"question\": 1}\n").unwrap();
    assert!(read_jsonl(&p).is_err());
}

#[test]
fn holdout_facts_never_reach_training() {
    let world = generate_world(9, &params()).unwrap();
    let templates = Templates::default();
    let texts = training_texts(&world, &templates, &TrainMix::default()).unwrap();
    for i in world.indices(Split::Holdout) {
        let f = &world.facts[i];
        let stmt = world.statement(f);
        assert!(!texts
            .iter()
            .any(|t| t.prompt.contains(&stmt) || t.answer.contains(&stmt)));
        let q = world.question(f);
        assert!(!texts.iter().any(|t| t.prompt.contains(&q)));
    }
    let tok = world_tokenizer(&world, &templates);
    for t in &texts {
        let text = format!("{} {}", t.prompt, t.answer);
        let ids = tok.encode(&text);
        assert!(
            ids.iter()
                .all(|&id| !ragscope::tokenizer::Tokenizer::is_byte(id)),
            "{text}"
        );
    }
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let setup = ToySetup {
        world: WorldParams {
            n_entities: 10,
            ..params()
        },
        model: ModelShape {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            ..Default::default()
        },
        train: TrainConfig {
            steps: 15,
            batch: 4,
            ..TrainConfig::default()
        },
        ..ToySetup::default()
    };
    let templates = Templates::default();
    let a = build_toy::<f32>(&setup, &templates, 11, |_| {}).unwrap();
    let b = build_toy::<f32>(&setup, &templates, 11, |_| {}).unwrap();
    let c = build_toy::<f32>(&setup, &templates, 12, |_| {}).unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.weights, b.weights);
    assert_ne!(a.loss, c.loss);
    assert!(a.loss.last().unwrap().loss < a.loss[0].loss);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("w.bin");
    save_weights(&a.weights, &p).unwrap();
    assert_eq!(load_weights::<f32>(&p).unwrap(), a.weights);
}
