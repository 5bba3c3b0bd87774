#![allow(dead_code)]

use depht::chart::{log_add, Potentials};
use depht::corpus::{load_corpus, Instance};
use depht::features::FeatureIndex;
use depht::funql::{IndexedMr, SemanticGrammar, SemanticType, SemanticUnit, SignatureTable};
use depht::model::{Model, ModelConfig, Prepared};
use depht::neural::EmbeddingTable;
use depht::hybridtree::{enumerate_trees, HybridTree, Sentence};
use rand::Rng;

pub fn ty(name: &str) -> SemanticType {
    SemanticType::new(name).unwrap()
}

pub fn unit(ret: &str, f: &str, args: &[&str]) -> SemanticUnit {
    SemanticUnit::new(ty(ret), f, args.iter().map(|a| ty(a)).collect()).unwrap()
}

/// Small grammars with at most four units that together cover arities 0, 1
/// and 2, all rooted at `Q`.
pub fn grammars() -> Vec<SemanticGrammar> {
    let g = |units: Vec<SemanticUnit>| SemanticGrammar::from_units(units, ty("Q"));
    vec![
        g(vec![unit("Q", "q", &[])]),
        g(vec![unit("Q", "a", &["E"]), unit("E", "e", &[])]),
        g(vec![unit("Q", "a", &["E"]), unit("E", "g", &["E"]), unit("E", "e", &[])]),
        g(vec![unit("Q", "a", &["E"]), unit("E", "f", &["E", "E"]), unit("E", "e", &[])]),
        g(vec![unit("Q", "p", &["E", "F"]), unit("E", "e", &[]), unit("F", "f", &[])]),
        g(vec![
            unit("Q", "a", &["E"]),
            unit("E", "f", &["E", "E"]),
            unit("E", "g", &["E"]),
            unit("E", "e", &[]),
        ]),
        g(vec![
            unit("Q", "a", &["E"]),
            unit("Q", "b", &["E"]),
            unit("E", "e", &[]),
            unit("E", "d", &[]),
        ]),
    ]
}

pub fn sentence(n: usize) -> Sentence {
    Sentence::new((0..n).map(|i| format!("w{i}")).collect()).unwrap()
}

pub fn random_potentials<R: Rng>(n: usize, m: usize, rng: &mut R) -> Potentials {
    let mut pot = Potentials::zeros(n, m);
    for x in pot.arc_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    for x in pot.trans_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    for x in pot.pattern_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    let words = (0..m * (n + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    pot.set_words(words);
    pot
}

pub fn trees(s: &Sentence, mr: &IndexedMr, g: &SemanticGrammar, cap: usize) -> Vec<HybridTree> {
    enumerate_trees(s, mr, |u| g.unit(u).arity(), cap, 8, 5_000_000).unwrap()
}

/// `(log-sum-exp, max)` of tree scores over the given trees.
pub fn brute(s: &Sentence, g: &SemanticGrammar, pot: &Potentials, trees: &[HybridTree]) -> (f64, f64) {
    let mut z = f64::NEG_INFINITY;
    let mut best = f64::NEG_INFINITY;
    for tree in trees {
        let nodes = tree.layout(s.len(), |u| g.unit(u).arity()).unwrap();
        let score = pot.tree_score(&nodes);
        z = log_add(z, score);
        best = best.max(score);
    }
    (z, best)
}

/// Every hybrid tree of every MR of depth at most `cap`.
pub fn all_trees(s: &Sentence, g: &SemanticGrammar, cap: usize) -> Vec<HybridTree> {
    let mut out = Vec::new();
    for mr in g.enumerate_mrs(cap, 100_000).unwrap() {
        out.extend(trees(s, &mr, g, cap));
    }
    out
}

pub fn random_embeddings<R: Rng>(words: &[String], dim: usize, rng: &mut R) -> EmbeddingTable {
    let mut table = EmbeddingTable::new(dim);
    for w in words {
        table.insert(w.clone(), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    }
    table
}

/// Model over a fixed grammar whose index covers the given sentences.
pub fn model_for(
    g: &SemanticGrammar,
    sentences: &[Sentence],
    config: ModelConfig,
    emb: Option<EmbeddingTable>,
) -> Model {
    let dim = emb.as_ref().map_or(0, |e| e.dim());
    let index = FeatureIndex::build(g, sentences, config.features, dim);
    Model::new(config, g.clone(), index, emb).unwrap()
}

pub fn instance(s: &Sentence, mr: &IndexedMr, g: &SemanticGrammar) -> Instance {
    Instance {
        sentence: s.clone(),
        gold: mr.to_mr(g).unwrap(),
        language: "en".into(),
    }
}

/// Largest relative error between the analytic gradient of
/// `instance_loss + l2 |theta|^2` and central differences with step `h`.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(model: &Model, inst: &Prepared, theta: &[f64], h: f64) -> (f64, usize) {
    let l2 = model.config().l2;
    let f = |x: &[f64], g: Option<&mut [f64]>| {
        model.instance_loss(inst, x, g) + l2 * x.iter().map(|v| v * v).sum::<f64>()
    };
    let mut grad = vec![0.0; theta.len()];
    f(theta, Some(&mut grad));
    for (g, t) in grad.iter_mut().zip(theta) {
        *g += 2.0 * l2 * t;
    }
    let mut worst: f64 = 0.0;
    let mut x = theta.to_vec();
    for k in 0..theta.len() {
        x[k] = theta[k] + h;
        let up = f(&x, None);
        x[k] = theta[k] - h;
        let down = f(&x, None);
        x[k] = theta[k];
        let numeric = (up - down) / (2.0 * h);
        let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    (worst, theta.len())
}

/// Path of a file under `tests/data`.
pub fn data_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn toy_corpus() -> Vec<Instance> {
    let table = SignatureTable::load(data_path("signatures.tsv")).unwrap();
    let loaded = load_corpus(data_path("toy.txt"), &table, "en").unwrap();
    assert!(loaded.errors.is_empty(), "{:?}", loaded.errors);
    loaded.instances
}
