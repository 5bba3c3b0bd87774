//! Semantic parsing with latent dependency-based hybrid trees.
//!
//! A sentence is paired with a tree-structured FunQL meaning representation
//! through a latent projective dependency tree whose arcs carry semantic
//! units. The model is a latent-variable CRF trained with exact
//! inside-outside inference and decoded with Viterbi search over the same
//! chart.

pub mod chart;
pub mod corpus;
pub mod features;
pub mod funql;
pub mod hybridtree;
pub mod model;
pub mod neural;
pub mod optim;

pub use chart::{Chart, Derivation, LabelSpace, Marginals, Potentials};
pub use corpus::{evaluate, load_corpus, parse_corpus, Instance, Metrics};
pub use features::{FeatureIndex, FeatureSet};
pub use funql::{
    build_grammar, parse_mr, serialize_mr, IndexedMr, MeaningRepresentation, SemanticGrammar,
    SemanticType, SemanticUnit, SignatureTable, UnitId,
};
pub use hybridtree::{HybridTree, Pattern, Sentence};
pub use model::{Model, ModelConfig, Optimizer};
