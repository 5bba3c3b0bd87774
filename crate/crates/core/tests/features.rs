mod common;

use common::*;
use depht::chart::Marginals;
use depht::features::{FeatureIndex, FeatureSet};
use depht::hybridtree::Sentence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn counts_decompose_over_enumerated_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set = FeatureSet {
        embedding: true,
        ..FeatureSet::full()
    };
    let mut trees_seen = 0;
    for g in grammars() {
        for n in 1..=3 {
            let s = sentence(n);
            let emb = random_embeddings(s.words(), 2, &mut rng);
            let index = FeatureIndex::build(&g, std::slice::from_ref(&s), set, 2);
            let weights: Vec<f64> = (0..index.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sf = index.sentence_features(&s, Some(&emb));
            let pot = sf.potentials(&weights);
            for tree in all_trees(&s, &g, 3) {
                let nodes = tree.layout(n, |u| g.unit(u).arity()).unwrap();
                let parts = index.counts_by_parts(&nodes, &s, Some(&emb));
                let direct = index.counts_direct(&nodes, &s, Some(&emb));
                assert_eq!(parts.keys().collect::<Vec<_>>(), direct.keys().collect::<Vec<_>>());
                for (k, v) in &parts {
                    assert!((direct[k] - v).abs() < 1e-12, "{k}");
                }
                assert!((pot.tree_score(&nodes) - index.dot(&direct, &weights)).abs() < 1e-9);

                let mut grad = vec![0.0; index.len()];
                sf.accumulate(&Marginals::of_tree(&nodes, n, g.len()), 1.0, &mut grad);
                for (k, v) in &direct {
                    assert!((grad[index.id_of_name(k).unwrap()] - v).abs() < 1e-12, "{k}");
                }
                trees_seen += 1;
            }
        }
    }
    assert!(trees_seen > 100);
}

#[test]
fn extraction_never_grows_the_index() {
    let data = toy_corpus();
    let model = depht::Model::from_corpus(depht::ModelConfig::default(), &data, None).unwrap();
    let index = model.index().clone();
    let unseen = Sentence::from_text("which mountains are higher than everest in nepal ?").unwrap();
    let sf = index.sentence_features(&unseen, None);
    let pot = sf.potentials(model.weights());
    assert_eq!(index.len(), model.index().len());
    assert_eq!(pot.words(), unseen.len());
    let _ = model.decode(&unseen);
    assert_eq!(model.index().len(), index.len());
}
