//! The latent-variable CRF: objective, gradient, training and decoding.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::chart::{viterbi, Chart, ChartError, Derivation, LabelSpace, Marginals, Potentials};
use crate::corpus::Instance;
use crate::features::{FeatureError, FeatureIndex, FeatureSet, SentenceFeatures};
use crate::funql::{FunqlError, IndexedMr, MeaningRepresentation, SemanticGrammar, SemanticType, SemanticUnit};
use crate::hybridtree::Sentence;
use crate::neural::{BilinearBank, EmbeddingTable, NeuralError};
use crate::optim::{self, LbfgsConfig, OptimError};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no training instances")]
    EmptyCorpus,

    #[error("gold meaning representations have different root types ({0} and {1})")]
    MixedRootTypes(String, String),

    #[error("the neural scorer needs an embedding table")]
    MissingEmbeddings,

    #[error("no training instance is derivable under depth cap {cap}")]
    NothingTrainable { cap: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("model file line {line}: {message}")]
    Format { line: usize, message: String },

    #[error(transparent)]
    Funql(#[from] FunqlError),

    #[error(transparent)]
    Features(#[from] FeatureError),

    #[error(transparent)]
    Neural(#[from] NeuralError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Depth cap on meaning representations and self-loop chains.
    pub cap: usize,
    pub l2: f64,
    pub features: FeatureSet,
    pub neural: bool,
    pub threads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cap: 20,
            l2: 0.03,
            features: FeatureSet::full(),
            neural: false,
            threads: 1,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Lbfgs(LbfgsConfig),
    Sgd { lr: f64, epochs: usize },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Lbfgs(LbfgsConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// L-BFGS: objective per iteration. SGD: summed objective per epoch.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub used: usize,
    pub dropped: usize,
}

/// A training instance with its sentence-level tables resolved.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sentence: Sentence,
    pub gold: IndexedMr,
    feats: SentenceFeatures,
    vectors: Option<Vec<Vec<f64>>>,
    clamped: LabelSpace,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    grammar: SemanticGrammar,
    index: FeatureIndex,
    weights: Vec<f64>,
    embeddings: Option<EmbeddingTable>,
    embedding_path: Option<PathBuf>,
    bilinear: Option<BilinearBank>,
    unclamped: LabelSpace,
}

impl Model {
    /// Builds the grammar and feature index from training data. Weights
    /// start at zero and the bilinear bank, if any, at small random values.
    pub fn from_corpus(
        config: ModelConfig,
        instances: &[Instance],
        embeddings: Option<EmbeddingTable>,
    ) -> Result<Self, ModelError> {
        let first = instances.first().ok_or(ModelError::EmptyCorpus)?;
        let root_type = first.gold.root().unit.return_type().clone();
        if let Some(other) = instances
            .iter()
            .map(|i| i.gold.root().unit.return_type())
            .find(|t| **t != root_type)
        {
            return Err(ModelError::MixedRootTypes(root_type.to_string(), other.to_string()));
        }
        let golds: Vec<MeaningRepresentation> = instances.iter().map(|i| i.gold.clone()).collect();
        let grammar = crate::funql::build_grammar(&golds, root_type)?;
        let sentences: Vec<Sentence> = instances.iter().map(|i| i.sentence.clone()).collect();
        let emb_dim = embeddings.as_ref().map_or(0, EmbeddingTable::dim);
        let index = FeatureIndex::build(&grammar, &sentences, config.features, emb_dim);
        Self::new(config, grammar, index, embeddings)
    }

    pub fn new(
        config: ModelConfig,
        grammar: SemanticGrammar,
        index: FeatureIndex,
        embeddings: Option<EmbeddingTable>,
    ) -> Result<Self, ModelError> {
        if (config.neural || config.features.embedding) && embeddings.is_none() {
            return Err(ModelError::MissingEmbeddings);
        }
        let bilinear = if config.neural {
            let dim = embeddings.as_ref().map_or(0, EmbeddingTable::dim);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            Some(BilinearBank::random(grammar.len(), dim, &mut rng))
        } else {
            None
        };
        let unclamped = LabelSpace::unclamped(&grammar);
        Ok(Model {
            weights: vec![0.0; index.len()],
            config,
            grammar,
            index,
            embeddings,
            embedding_path: None,
            bilinear,
            unclamped,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn grammar(&self) -> &SemanticGrammar {
        &self.grammar
    }

    pub fn index(&self) -> &FeatureIndex {
        &self.index
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bilinear(&self) -> Option<&BilinearBank> {
        self.bilinear.as_ref()
    }

    pub fn bilinear_mut(&mut self) -> Option<&mut BilinearBank> {
        self.bilinear.as_mut()
    }

    pub fn embeddings(&self) -> Option<&EmbeddingTable> {
        self.embeddings.as_ref()
    }

    /// Path recorded in the model file for reloading the embeddings.
    pub fn set_embedding_path(&mut self, path: impl Into<PathBuf>) {
        self.embedding_path = Some(path.into());
    }

    /// Linear weights followed by the bilinear entries.
    pub fn params(&self) -> Vec<f64> {
        let mut theta = self.weights.clone();
        if let Some(bank) = &self.bilinear {
            theta.extend_from_slice(bank.params());
        }
        theta
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        let k = self.weights.len();
        self.weights.copy_from_slice(&theta[..k]);
        if let Some(bank) = &mut self.bilinear {
            bank.params_mut().copy_from_slice(&theta[k..]);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bilinear.as_ref().map_or(0, |b| b.params().len())
    }

    fn token_vectors(&self, sentence: &Sentence) -> Option<Vec<Vec<f64>>> {
        let emb = self.embeddings.as_ref()?;
        self.bilinear.as_ref()?;
        Some(
            (0..=sentence.len())
                .map(|t| {
                    if t == 0 {
                        vec![0.0; emb.dim()]
                    } else {
                        emb.get(&self.index.normalize(sentence.token(t))).to_vec()
                    }
                })
                .collect(),
        )
    }

    fn sentence_tables(&self, sentence: &Sentence) -> (SentenceFeatures, Option<Vec<Vec<f64>>>) {
        (
            self.index.sentence_features(sentence, self.embeddings.as_ref()),
            self.token_vectors(sentence),
        )
    }

    fn build_potentials(
        &self,
        feats: &SentenceFeatures,
        vectors: Option<&Vec<Vec<f64>>>,
        theta: &[f64],
    ) -> Potentials {
        let k = self.weights.len();
        let mut pot = feats.potentials(&theta[..k]);
        if let (Some(bank), Some(vectors)) = (&self.bilinear, vectors) {
            let bank = BilinearBank::from_params(bank.units(), bank.dim(), theta[k..].to_vec());
            add_bilinear(&mut pot, &bank, vectors);
        }
        pot
    }

    /// Log-potentials of a sentence under the current parameters.
    pub fn potentials(&self, sentence: &Sentence) -> Potentials {
        let (feats, vectors) = self.sentence_tables(sentence);
        self.build_potentials(&feats, vectors.as_ref(), &self.params())
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.unclamped
    }

    /// Resolves instances against the frozen index. Instances whose gold
    /// tree is deeper than the cap, uses units outside the grammar, or has
    /// no hybrid tree at all are dropped with a warning.
    pub fn prepare(&self, instances: &[Instance]) -> Vec<Prepared> {
        let mut out = Vec::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            let gold = match IndexedMr::new(&inst.gold, &self.grammar) {
                Ok(g) => g,
                Err(e) => {
                    log::warn!("instance {i}: {e}; skipped");
                    continue;
                }
            };
            if gold.depth() > self.config.cap {
                log::warn!("instance {i}: gold depth {} exceeds cap {}; skipped", gold.depth(), self.config.cap);
                continue;
            }
            let clamped = LabelSpace::clamped(&gold, &self.grammar);
            let zero = Potentials::zeros(inst.sentence.len(), self.grammar.len());
            if Chart::inside(&zero, &clamped, self.config.cap).partition().is_err() {
                log::warn!("instance {i}: gold meaning representation has no hybrid tree; skipped");
                continue;
            }
            let (feats, vectors) = self.sentence_tables(&inst.sentence);
            out.push(Prepared {
                sentence: inst.sentence.clone(),
                gold,
                feats,
                vectors,
                clamped,
            });
        }
        out
    }

    /// `log Z_unclamped - log Z_clamped` and its gradient for one instance,
    /// without regularization.
    pub fn instance_loss(&self, inst: &Prepared, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let pot = self.build_potentials(&inst.feats, inst.vectors.as_ref(), theta);
        let cap = self.config.cap;
        let free = Chart::inside(&pot, &self.unclamped, cap);
        let gold = Chart::inside(&pot, &inst.clamped, cap);
        let loss = free.log_z() - gold.log_z();
        if let Some(grad) = grad {
            let diff = free.marginals().minus(&gold.marginals());
            let k = self.weights.len();
            inst.feats.accumulate(&diff, 1.0, &mut grad[..k]);
            if let (Some(bank), Some(vectors)) = (&self.bilinear, &inst.vectors) {
                bilinear_gradient(bank, vectors, &diff, &mut grad[k..]);
            }
        }
        loss
    }

    /// Full objective `sum(log Z_u - log Z_c) + l2 * |theta|^2` and its
    /// gradient. Instances are processed in fixed chunks and the chunk sums
    /// are added in order, so the result does not depend on the thread
    /// count.
    pub fn objective(&self, data: &[Prepared], theta: &[f64], grad: &mut [f64], pool: &rayon::ThreadPool) -> f64 {
        const CHUNK: usize = 8;
        let dim = theta.len();
        let parts: Vec<(f64, Vec<f64>)> = pool.install(|| {
            data.par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = vec![0.0; dim];
                    let mut loss = 0.0;
                    for inst in chunk {
                        loss += self.instance_loss(inst, theta, Some(&mut g));
                    }
                    (loss, g)
                })
                .collect()
        });
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let l2 = self.config.l2;
        for (g, t) in grad.iter_mut().zip(theta) {
            *g += 2.0 * l2 * t;
            loss += l2 * t * t;
        }
        loss
    }

    pub fn thread_pool(&self) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.threads.max(1))
            .build()
            .expect("thread pool")
    }

    pub fn train(&mut self, instances: &[Instance], optimizer: &Optimizer) -> Result<TrainReport, ModelError> {
        let data = self.prepare(instances);
        let dropped = instances.len() - data.len();
        if data.is_empty() {
            return Err(ModelError::NothingTrainable { cap: self.config.cap });
        }
        let mut report = match optimizer {
            Optimizer::Lbfgs(cfg) => self.train_lbfgs(&data, cfg)?,
            Optimizer::Sgd { lr, epochs } => self.train_sgd(&data, *lr, *epochs)?,
        };
        report.used = data.len();
        report.dropped = dropped;
        Ok(report)
    }

    fn train_lbfgs(&mut self, data: &[Prepared], cfg: &LbfgsConfig) -> Result<TrainReport, ModelError> {
        let pool = self.thread_pool();
        let mut theta = self.params();
        let result = optim::minimize(|x, g| self.objective(data, x, g, &pool), &mut theta, cfg);
        let report = result.map_err(|e: OptimError| ModelError::Diverged(e.to_string()))?;
        self.set_params(&theta);
        Ok(TrainReport {
            trace: report.trace,
            iterations: report.iterations,
            converged: report.converged,
            grad_norm: report.grad_norm,
            used: 0,
            dropped: 0,
        })
    }

    /// Plain per-instance SGD; each step carries `1/|D|` of the L2 term.
    fn train_sgd(&mut self, data: &[Prepared], lr: f64, epochs: usize) -> Result<TrainReport, ModelError> {
        let mut theta = self.params();
        let mut grad = vec![0.0; theta.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let l2 = self.config.l2 / data.len() as f64;
        let mut trace = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let mut loss = self.instance_loss(&data[i], &theta, Some(&mut grad));
                for (t, g) in theta.iter_mut().zip(&grad) {
                    loss += l2 * *t * *t;
                    *t -= lr * (g + 2.0 * l2 * *t);
                }
                if !loss.is_finite() {
                    return Err(ModelError::Diverged(format!("loss is {loss} in epoch {}", epoch + 1)));
                }
                total += loss;
            }
            log::info!("epoch {}: objective {total:.6}", epoch + 1);
            trace.push(total);
        }
        self.set_params(&theta);
        let grad_norm = {
            let pool = self.thread_pool();
            let mut g = vec![0.0; theta.len()];
            self.objective(data, &theta, &mut g, &pool);
            g.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        Ok(TrainReport {
            trace,
            iterations: epochs,
            converged: true,
            grad_norm,
            used: 0,
            dropped: 0,
        })
    }

    /// Best meaning representation and hybrid tree for a sentence.
    pub fn decode(&self, sentence: &Sentence) -> Result<Decoded, ChartError> {
        let pot = self.potentials(sentence);
        let Derivation { tree, mr, score } = viterbi(&pot, &self.unclamped, self.config.cap)?;
        let meaning = mr.to_mr(&self.grammar).map_err(|_| ChartError::NoDerivation)?;
        Ok(Decoded {
            meaning,
            tree,
            indexed: mr,
            score,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Text manifest, sorted `key<TAB>id<TAB>weight` lines, then the
    /// bilinear tensor as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "depht-model {FORMAT_VERSION}");
        let _ = writeln!(s, "cap {}", c.cap);
        let _ = writeln!(s, "l2 {}", c.l2);
        let _ = writeln!(s, "features {}", c.features.name());
        let _ = writeln!(s, "lowercase {}", c.features.lowercase);
        let _ = writeln!(s, "embedding_features {}", c.features.embedding);
        let _ = writeln!(s, "neural {}", c.neural);
        let _ = writeln!(s, "seed {}", c.seed);
        let _ = writeln!(s, "embedding_dim {}", self.embeddings.as_ref().map_or(0, EmbeddingTable::dim));
        let path = self.embedding_path.as_ref().map(|p| p.display().to_string());
        let _ = writeln!(s, "embedding_path {}", path.as_deref().unwrap_or("-"));
        let _ = writeln!(s, "root_type {}", self.grammar.root_type());
        let _ = writeln!(s, "units {}", self.grammar.len());
        for u in self.grammar.units() {
            let args: Vec<&str> = u.arg_types().iter().map(|t| t.name()).collect();
            let _ = writeln!(s, "{}\t{}\t{}", u.return_type(), u.function(), args.join(","));
        }
        let mut lines: Vec<(String, usize)> = (0..self.index.len()).map(|i| (self.index.key_name(i), i)).collect();
        lines.sort();
        let _ = writeln!(s, "weights {}", lines.len());
        for (key, id) in lines {
            let _ = writeln!(s, "{key}\t{id}\t{}", self.weights[id]);
        }
        let bank = self.bilinear.as_ref();
        let _ = writeln!(s, "bilinear {}", bank.map_or(0, |b| b.params().len()));
        let mut bytes = s.into_bytes();
        if let Some(bank) = bank {
            for v in bank.params() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    /// Loads a model. Embeddings are taken from `embeddings` when given,
    /// otherwise from the path recorded at training time.
    pub fn load(path: impl AsRef<Path>, embeddings: Option<EmbeddingTable>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?, embeddings)
    }

    pub fn from_bytes(bytes: &[u8], embeddings: Option<EmbeddingTable>) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0, line: 0 };
        let version: u32 = r.field("depht-model")?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported format version {version}")));
        }
        let cap: usize = r.field("cap")?;
        let l2: f64 = r.field("l2")?;
        let set_name: String = r.field("features")?;
        let mut features = FeatureSet::parse(&set_name)?;
        features.lowercase = r.field("lowercase")?;
        features.embedding = r.field("embedding_features")?;
        let neural: bool = r.field("neural")?;
        let seed: u64 = r.field("seed")?;
        let emb_dim: usize = r.field("embedding_dim")?;
        let emb_path: String = r.field("embedding_path")?;
        let root_type = SemanticType::new(r.field::<String>("root_type")?)?;
        let n_units: usize = r.field("units")?;
        let mut units = Vec::with_capacity(n_units);
        for _ in 0..n_units {
            let line = r.line()?;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(r.err("expected RET<TAB>function<TAB>args".into()));
            }
            let args = cols[2]
                .split(',')
                .filter(|a| !a.is_empty())
                .map(SemanticType::new)
                .collect::<Result<Vec<_>, _>>()?;
            units.push(SemanticUnit::new(SemanticType::new(cols[0])?, cols[1], args)?);
        }
        let grammar = SemanticGrammar::from_units(units, root_type);
        if grammar.len() != n_units {
            return Err(r.err("duplicate unit".into()));
        }
        let n_weights: usize = r.field("weights")?;
        let mut rows: Vec<(usize, String, f64)> = Vec::with_capacity(n_weights);
        for _ in 0..n_weights {
            let line = r.line()?;
            let cols: Vec<&str> = line.rsplitn(3, '\t').collect();
            let parsed = match cols.as_slice() {
                [w, id, key] => w.parse().ok().zip(id.parse().ok()).map(|(w, id)| (id, key.to_string(), w)),
                _ => None,
            };
            rows.push(parsed.ok_or_else(|| r.err("expected key<TAB>id<TAB>weight".into()))?);
        }
        rows.sort_by_key(|row| row.0);
        if rows.iter().enumerate().any(|(i, row)| row.0 != i) {
            return Err(r.err("feature ids are not 0..n".into()));
        }
        let index = FeatureIndex::from_keys(&grammar, features, emb_dim, rows.iter().map(|row| row.1.as_str()))?;
        let n_bilinear: usize = r.field("bilinear")?;

        let embeddings = match embeddings {
            Some(e) => Some(e),
            None if emb_dim > 0 && emb_path != "-" => Some(EmbeddingTable::load(&emb_path)?),
            None => None,
        };
        if let Some(e) = &embeddings {
            if e.dim() != emb_dim {
                return Err(r.err(format!("embedding dimension {} but model expects {emb_dim}", e.dim())));
            }
        }
        let config = ModelConfig {
            cap,
            l2,
            features,
            neural,
            threads: 1,
            seed,
        };
        let mut model = Model::new(config, grammar, index, embeddings)?;
        if emb_path != "-" {
            model.embedding_path = Some(PathBuf::from(emb_path));
        }
        for (id, _, w) in &rows {
            model.weights[*id] = *w;
        }
        let tail = &bytes[r.pos..];
        match &mut model.bilinear {
            Some(bank) if bank.params().len() == n_bilinear && tail.len() == 8 * n_bilinear => {
                for (dst, chunk) in bank.params_mut().iter_mut().zip(tail.chunks_exact(8)) {
                    *dst = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
                }
            }
            None if n_bilinear == 0 && tail.is_empty() => {}
            _ => return Err(r.err("bilinear block does not match the grammar and embedding size".into())),
        }
        Ok(model)
    }
}

/// Output of [`Model::decode`].
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub meaning: MeaningRepresentation,
    pub tree: crate::hybridtree::HybridTree,
    pub indexed: IndexedMr,
    pub score: f64,
}

/// Adds `e_p^T U_u e_a` to every arc potential.
pub fn add_bilinear(pot: &mut Potentials, bank: &BilinearBank, vectors: &[Vec<f64>]) {
    let n = pot.words();
    let m = pot.units();
    let d = bank.dim();
    let arc = pot.arc_mut();
    for a in 1..=n {
        let proj = bank.project(&vectors[a]);
        for p in 1..=n {
            let ep = &vectors[p];
            for u in 0..m {
                let s: f64 = ep.iter().zip(&proj[u * d..(u + 1) * d]).map(|(x, y)| x * y).sum();
                arc[(p * (n + 1) + a) * m + u] += s;
            }
        }
    }
}

/// `G_u += sum_p e_p (sum_a mu(p, a, u) e_a)^T`.
pub fn bilinear_gradient(bank: &BilinearBank, vectors: &[Vec<f64>], marg: &Marginals, grad: &mut [f64]) {
    let n = marg.words();
    let d = bank.dim();
    let mut mixed = vec![0.0; d];
    for u in 0..bank.units() {
        for p in 1..=n {
            mixed.iter_mut().for_each(|v| *v = 0.0);
            let mut any = false;
            for (a, ea) in vectors.iter().enumerate().skip(1) {
                let mu = marg.arc(p, a, u);
                if mu != 0.0 {
                    any = true;
                    mixed.iter_mut().zip(ea).for_each(|(m, e)| *m += mu * e);
                }
            }
            if any {
                bank.accumulate_gradient(u, &vectors[p], &mixed, 1.0, grad);
            }
        }
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    line: usize,
}

impl Reader<'_> {
    fn err(&self, message: String) -> ModelError {
        ModelError::Format {
            line: self.line,
            message,
        }
    }

    fn line(&mut self) -> Result<String, ModelError> {
        self.line += 1;
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unexpected end of file".into()))?;
        self.pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| self.err("not UTF-8".into()))
    }

    fn field<T: std::str::FromStr>(&mut self, name: &str) -> Result<T, ModelError> {
        let line = self.line()?;
        let value = line
            .strip_prefix(name)
            .and_then(|v| v.strip_prefix(' '))
            .ok_or_else(|| self.err(format!("expected `{name}`")))?;
        value
            .parse()
            .map_err(|_| self.err(format!("bad value for `{name}`: {value}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;
    use crate::funql::SignatureTable;

    const SIGS: &str = "\
answer\tQUERY\tSTATE
state(all)\tSTATE\t
next_to_2\tSTATE\tSTATE
stateid\tSTATE\tSTATENAME
";

    const DATA: &str = "\
states bordering texas
answer(next_to_2(stateid('texas')))

what states
answer(state(all))

texas
answer(stateid('texas'))
";

    fn corpus() -> Vec<Instance> {
        let table = SignatureTable::parse(SIGS).unwrap();
        parse_corpus(DATA, &table, "en").instances
    }

    #[test]
    fn loss_is_at_least_the_penalty() {
        let data = corpus();
        let config = ModelConfig {
            l2: 0.01,
            cap: 4,
            ..ModelConfig::default()
        };
        let model = Model::from_corpus(config, &data, None).unwrap();
        let prepared = model.prepare(&data);
        assert_eq!(prepared.len(), 3);
        let theta: Vec<f64> = (0..model.param_count()).map(|i| ((i % 7) as f64 - 3.0) / 5.0).collect();
        let mut grad = vec![0.0; theta.len()];
        let loss = model.objective(&prepared, &theta, &mut grad, &model.thread_pool());
        let penalty: f64 = 0.01 * theta.iter().map(|t| t * t).sum::<f64>();
        assert!(loss >= penalty);
        for inst in &prepared {
            assert!(model.instance_loss(inst, &theta, None) >= -1e-9);
        }
    }

    #[test]
    fn fits_tiny_corpus() {
        let data = corpus();
        let config = ModelConfig {
            l2: 0.001,
            cap: 4,
            ..ModelConfig::default()
        };
        let mut model = Model::from_corpus(config, &data, None).unwrap();
        let report = model.train(&data, &Optimizer::default()).unwrap();
        assert!(report.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for inst in &data {
            assert_eq!(model.decode(&inst.sentence).unwrap().meaning, inst.gold);
        }
    }

    #[test]
    fn sgd_reduces_loss() {
        let data = corpus();
        let config = ModelConfig {
            cap: 4,
            ..ModelConfig::default()
        };
        let mut model = Model::from_corpus(config, &data, None).unwrap();
        let report = model.train(&data, &Optimizer::Sgd { lr: 0.05, epochs: 20 }).unwrap();
        assert_eq!(report.trace.len(), 20);
        assert!(report.trace.last().unwrap() < &report.trace[0]);
    }

    #[test]
    fn save_load_is_exact() {
        let data = corpus();
        let mut emb = EmbeddingTable::new(2);
        emb.insert("texas", vec![0.5, -1.0]);
        emb.insert("states", vec![1.0, 0.25]);
        let config = ModelConfig {
            cap: 4,
            neural: true,
            ..ModelConfig::default()
        };
        let mut model = Model::from_corpus(config, &data, Some(emb.clone())).unwrap();
        let theta: Vec<f64> = (0..model.param_count()).map(|i| (i as f64).sin() / 3.0).collect();
        model.set_params(&theta);
        let bytes = model.to_bytes();
        let again = Model::from_bytes(&bytes, Some(emb)).unwrap();
        assert_eq!(again.params(), model.params());
        assert_eq!(again.to_bytes(), bytes);
        let s = &data[0].sentence;
        assert_eq!(again.potentials(s), model.potentials(s));
        assert!(Model::from_bytes(&bytes[..bytes.len() - 3], None).is_err());
    }

    #[test]
    fn mixed_roots_are_rejected() {
        let mut data = corpus();
        let table = SignatureTable::parse(SIGS).unwrap();
        data.push(Instance {
            sentence: Sentence::from_text("texas").unwrap(),
            gold: crate::funql::parse_mr("stateid('texas')", &table).unwrap(),
            language: "en".into(),
        });
        assert!(matches!(
            Model::from_corpus(ModelConfig::default(), &data, None),
            Err(ModelError::MixedRootTypes(..))
        ));
        assert!(matches!(
            Model::from_corpus(
                ModelConfig {
                    neural: true,
                    ..ModelConfig::default()
                },
                &data[..1],
                None
            ),
            Err(ModelError::MissingEmbeddings)
        ));
    }
}
