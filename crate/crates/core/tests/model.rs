mod common;

use common::*;
use depht::chart::log_add;
use depht::features::FeatureSet;
use depht::model::{ModelConfig, Optimizer};
use depht::optim::LbfgsConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn full_with_embeddings() -> FeatureSet {
    FeatureSet {
        embedding: true,
        ..FeatureSet::full()
    }
}

#[test]
fn loss_matches_enumerated_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for g in grammars() {
        let cap = 3;
        for n in 1..=3 {
            let s = sentence(n);
            let emb = random_embeddings(s.words(), 3, &mut rng);
            let config = ModelConfig {
                cap,
                l2: 0.0,
                features: full_with_embeddings(),
                neural: true,
                ..ModelConfig::default()
            };
            let model = model_for(&g, std::slice::from_ref(&s), config, Some(emb.clone()));
            let theta: Vec<f64> = (0..model.param_count()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let mut scored = model.clone();
            scored.set_params(&theta);
            let everything = all_trees(&s, &g, cap);
            let tree_score = |tree: &depht::HybridTree| {
                let nodes = tree.layout(n, |u| g.unit(u).arity()).unwrap();
                let counts = model.index().counts_direct(&nodes, &s, Some(&emb));
                let mut v = model.index().dot(&counts, &theta[..model.weights().len()]);
                let bank = scored.bilinear().unwrap();
                for node in &nodes {
                    let ep = if node.head == 0 { vec![0.0; 3] } else { emb.get(s.token(node.head)).to_vec() };
                    v += bank.score(node.unit, &ep, emb.get(s.token(node.anchor)));
                }
                v
            };
            let log_z = everything.iter().fold(f64::NEG_INFINITY, |z, t| log_add(z, tree_score(t)));
            for mr in g.enumerate_mrs(cap, 1000).unwrap() {
                let gold_trees = trees(&s, &mr, &g, cap);
                if gold_trees.is_empty() {
                    continue;
                }
                let prepared = model.prepare(&[instance(&s, &mr, &g)]);
                let num = gold_trees.iter().fold(f64::NEG_INFINITY, |z, t| log_add(z, tree_score(t)));
                let loss = model.instance_loss(&prepared[0], &theta, None);
                assert!((loss - (log_z - num)).abs() <= 1e-8, "{loss} vs {}", log_z - num);
                checked += 1;
            }
        }
    }
    assert!(checked > 20);
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = &grammars()[5];
    for n in 2..=3 {
        let s = sentence(n);
        let emb = random_embeddings(s.words(), 2, &mut rng);
        let config = ModelConfig {
            cap: 3,
            l2: 0.03,
            features: full_with_embeddings(),
            neural: true,
            ..ModelConfig::default()
        };
        let model = model_for(g, std::slice::from_ref(&s), config, Some(emb));
        let mr = g.enumerate_mrs(2, 10).unwrap().pop().unwrap();
        let prepared = model.prepare(&[instance(&s, &mr, g)]);
        assert_eq!(prepared.len(), 1);
        let theta: Vec<f64> = (0..model.param_count()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (worst, _) = gradient_check(&model, &prepared[0], &theta, 1e-5);
        assert!(worst <= 1e-4, "relative error {worst}");
    }
}

#[test]
fn symmetric_instance_has_zero_gradient_at_origin() {
    // Two MRs, each with one tree on one word; at w = 0 they are equally
    // likely, so a feature firing in both contributes nothing.
    let g = &depht::SemanticGrammar::from_units(
        [unit("Q", "a", &["E"]), unit("E", "e", &[]), unit("E", "d", &[])],
        ty("Q"),
    );
    let s = sentence(1);
    let config = ModelConfig {
        cap: 2,
        l2: 0.0,
        ..ModelConfig::default()
    };
    let model = model_for(g, std::slice::from_ref(&s), config, None);
    let mr = g.enumerate_mrs(2, 10).unwrap().remove(0);
    let prepared = model.prepare(&[instance(&s, &mr, g)]);
    let theta = vec![0.0; model.param_count()];
    let mut grad = vec![0.0; theta.len()];
    let loss = model.instance_loss(&prepared[0], &theta, Some(&mut grad));
    assert!((loss - 2f64.ln()).abs() < 1e-12);
    let shared = model.index().id_of_name("pattern|Q:a(E)|X").unwrap();
    assert!(grad[shared].abs() < 1e-12);
}

#[test]
fn fully_observed_case_converges() {
    let g = &grammars()[6];
    let s = sentence(1);
    let config = ModelConfig {
        cap: 2,
        l2: 0.01,
        ..ModelConfig::default()
    };
    let mut model = model_for(g, std::slice::from_ref(&s), config, None);
    let data: Vec<_> = g
        .enumerate_mrs(2, 10)
        .unwrap()
        .iter()
        .take(3)
        .map(|mr| instance(&s, mr, g))
        .collect();
    let cfg = LbfgsConfig {
        rel_tol: 0.0,
        grad_tol: 1e-7,
        ..LbfgsConfig::default()
    };
    let report = model.train(&data, &Optimizer::Lbfgs(cfg)).unwrap();
    assert!(report.grad_norm < 1e-5, "{report:?}");
}

#[test]
fn thread_count_does_not_change_the_objective() {
    let data = toy_corpus();
    let mut model = depht::Model::from_corpus(
        ModelConfig {
            cap: 6,
            ..ModelConfig::default()
        },
        &data,
        None,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta: Vec<f64> = (0..model.param_count()).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let prepared = model.prepare(&data);
    let mut g1 = vec![0.0; theta.len()];
    let mut g4 = vec![0.0; theta.len()];
    let l1 = model.objective(&prepared, &theta, &mut g1, &model.thread_pool());
    model.config_mut().threads = 4;
    let l4 = model.objective(&prepared, &theta, &mut g4, &model.thread_pool());
    assert_eq!(l1, l4);
    assert_eq!(g1, g4);
}

#[test]
fn undersized_cap_drops_instances() {
    let data = toy_corpus();
    let model = depht::Model::from_corpus(
        ModelConfig {
            cap: 3,
            ..ModelConfig::default()
        },
        &data,
        None,
    )
    .unwrap();
    let prepared = model.prepare(&data);
    let deep = data.iter().filter(|i| i.gold.depth() > 3).count();
    assert!(deep > 0);
    assert_eq!(prepared.len(), data.len() - deep);
}

#[test]
fn training_is_reproducible() {
    let data = toy_corpus();
    let run = || {
        let mut model = depht::Model::from_corpus(
            ModelConfig {
                cap: 6,
                ..ModelConfig::default()
            },
            &data[..6],
            None,
        )
        .unwrap();
        model.train(&data[..6], &Optimizer::Sgd { lr: 0.05, epochs: 3 }).unwrap();
        model.to_bytes()
    };
    assert_eq!(run(), run());
}
