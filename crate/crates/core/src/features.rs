//! Feature families, the frozen feature index, and the mapping between
//! weights and chart potentials.
//!
//! Keys are `family|unit|detail`, e.g. `word|RIVER:traverse(STATE)|run`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::chart::{Marginals, Potentials};
use crate::funql::{SemanticGrammar, UnitId};
use crate::hybridtree::{patterns_for, Pattern, Sentence, TreeNode, ROOT_TOKEN};
use crate::neural::EmbeddingTable;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("unknown feature set `{0}` (expected basic, basic+hm, basic+bow or full)")]
    UnknownSet(String),

    #[error("malformed feature key `{0}`")]
    MalformedKey(String),

    #[error("feature key `{0}` refers to a unit outside the grammar")]
    UnknownUnit(String),

    #[error("duplicate feature key `{0}`")]
    Duplicate(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Word,
    Pattern,
    Transition,
    HeadWord,
    ModifierWord,
    BagOfWords,
    Embedding,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Word,
        Family::Pattern,
        Family::Transition,
        Family::HeadWord,
        Family::ModifierWord,
        Family::BagOfWords,
        Family::Embedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Word => "word",
            Family::Pattern => "pattern",
            Family::Transition => "trans",
            Family::HeadWord => "head",
            Family::ModifierWord => "mod",
            Family::BagOfWords => "bow",
            Family::Embedding => "emb",
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Which families are active. The basic families (word, pattern,
/// transition) are always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct FeatureSet {
    pub head_modifier: bool,
    pub bag_of_words: bool,
    pub embedding: bool,
    pub lowercase: bool,
}

impl FeatureSet {
    pub fn basic() -> Self {
        FeatureSet::default()
    }

    pub fn full() -> Self {
        FeatureSet {
            head_modifier: true,
            bag_of_words: true,
            ..FeatureSet::default()
        }
    }

    /// Parses `basic`, `basic+hm`, `basic+bow` or `full`.
    pub fn parse(name: &str) -> Result<Self, FeatureError> {
        let mut set = FeatureSet::basic();
        match name {
            "basic" => {}
            "basic+hm" => set.head_modifier = true,
            "basic+bow" => set.bag_of_words = true,
            "full" => set = FeatureSet::full(),
            other => return Err(FeatureError::UnknownSet(other.to_string())),
        }
        Ok(set)
    }

    /// Name of the ablation regime, ignoring the embedding and case flags.
    pub fn name(&self) -> &'static str {
        match (self.head_modifier, self.bag_of_words) {
            (false, false) => "basic",
            (true, false) => "basic+hm",
            (false, true) => "basic+bow",
            (true, true) => "full",
        }
    }

    pub fn enabled(&self, family: Family) -> bool {
        match family {
            Family::Word | Family::Pattern | Family::Transition => true,
            Family::HeadWord | Family::ModifierWord => self.head_modifier,
            Family::BagOfWords => self.bag_of_words,
            Family::Embedding => self.embedding,
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureKey {
    pub family: Family,
    pub unit: u32,
    /// Word id, pattern index, child unit or embedding dimension.
    pub arg: u32,
}

/// A chart-local piece of a hybrid tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Local {
    Arc { head: usize, modifier: usize, unit: UnitId },
    Words { unit: UnitId, lo: usize, hi: usize },
    Pattern { unit: UnitId, pattern: Pattern },
    Transition { parent: UnitId, child: UnitId },
}

/// Chart-local parts of a laid-out tree.
pub fn parts(nodes: &[TreeNode]) -> Vec<Local> {
    let mut out = Vec::new();
    for node in nodes {
        out.push(Local::Arc {
            head: node.head,
            modifier: node.anchor,
            unit: node.unit,
        });
        out.push(Local::Pattern {
            unit: node.unit,
            pattern: node.pattern,
        });
        if let Some((lo, hi)) = node.owned() {
            out.push(Local::Words { unit: node.unit, lo, hi });
        }
        for &c in &node.children {
            out.push(Local::Transition {
                parent: node.unit,
                child: nodes[c].unit,
            });
        }
    }
    out
}

/// Tokens covered by the bag of words of arc `head -> modifier`; the root
/// token is never included.
pub fn bow_span(head: usize, modifier: usize) -> (usize, usize) {
    (head.min(modifier).max(1), head.max(modifier))
}

/// Interned feature keys, frozen once built.
#[derive(Clone, Debug)]
pub struct FeatureIndex {
    set: FeatureSet,
    unit_names: Vec<String>,
    emb_dim: usize,
    vocab: Vec<String>,
    word_ids: HashMap<String, u32>,
    keys: Vec<FeatureKey>,
    ids: HashMap<FeatureKey, usize>,
}

impl FeatureIndex {
    fn empty(grammar: &SemanticGrammar, set: FeatureSet, emb_dim: usize) -> Self {
        let mut index = FeatureIndex {
            set,
            unit_names: grammar.units().iter().map(|u| u.to_string()).collect(),
            emb_dim: if set.embedding { emb_dim } else { 0 },
            vocab: Vec::new(),
            word_ids: HashMap::new(),
            keys: Vec::new(),
            ids: HashMap::new(),
        };
        index.intern(ROOT_TOKEN);
        index
    }

    /// Every key that can fire on the training sentences under any unit of
    /// the grammar.
    pub fn build(grammar: &SemanticGrammar, sentences: &[Sentence], set: FeatureSet, emb_dim: usize) -> Self {
        let mut index = Self::empty(grammar, set, emb_dim);
        for s in sentences {
            for w in s.words() {
                let w = index.normalize(w);
                index.intern(&w);
            }
        }
        let words = index.vocab.len() as u32;
        for u in 0..grammar.len() {
            let u32u = u as u32;
            for &p in patterns_for(grammar.unit(u).arity()) {
                index.add(Family::Pattern, u32u, p.index() as u32);
            }
            for k in 0..grammar.unit(u).arity() {
                for &v in grammar.allowed_children(u, k) {
                    index.add(Family::Transition, u32u, v as u32);
                }
            }
            for w in 0..words {
                if w != 0 {
                    index.add(Family::Word, u32u, w);
                }
                if set.head_modifier {
                    index.add(Family::HeadWord, u32u, w);
                    if w != 0 {
                        index.add(Family::ModifierWord, u32u, w);
                    }
                }
                if set.bag_of_words && w != 0 {
                    index.add(Family::BagOfWords, u32u, w);
                }
            }
            for k in 0..index.emb_dim {
                index.add(Family::Embedding, u32u, k as u32);
            }
        }
        index
    }

    /// Rebuilds an index from keys listed in id order.
    pub fn from_keys<'k>(
        grammar: &SemanticGrammar,
        set: FeatureSet,
        emb_dim: usize,
        keys: impl IntoIterator<Item = &'k str>,
    ) -> Result<Self, FeatureError> {
        let mut index = Self::empty(grammar, set, emb_dim);
        let by_name: HashMap<String, u32> = index
            .unit_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        for key in keys {
            let bad = || FeatureError::MalformedKey(key.to_string());
            let mut fields = key.splitn(3, '|');
            let (Some(family), Some(unit), Some(detail)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(bad());
            };
            let family = Family::from_name(family).ok_or_else(bad)?;
            let unit = *by_name
                .get(unit)
                .ok_or_else(|| FeatureError::UnknownUnit(key.to_string()))?;
            let arg = match family {
                Family::Word | Family::HeadWord | Family::ModifierWord | Family::BagOfWords => index.intern(detail),
                Family::Pattern => Pattern::from_name(detail).map_err(|_| bad())?.index() as u32,
                Family::Transition => *by_name
                    .get(detail)
                    .ok_or_else(|| FeatureError::UnknownUnit(key.to_string()))?,
                Family::Embedding => detail.parse().map_err(|_| bad())?,
            };
            let fk = FeatureKey { family, unit, arg };
            if index.ids.contains_key(&fk) {
                return Err(FeatureError::Duplicate(key.to_string()));
            }
            index.add(family, unit, arg);
        }
        Ok(index)
    }

    fn intern(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.word_ids.get(word) {
            return id;
        }
        let id = self.vocab.len() as u32;
        self.vocab.push(word.to_string());
        self.word_ids.insert(word.to_string(), id);
        id
    }

    fn add(&mut self, family: Family, unit: u32, arg: u32) {
        let key = FeatureKey { family, unit, arg };
        if !self.ids.contains_key(&key) {
            self.ids.insert(key, self.keys.len());
            self.keys.push(key);
        }
    }

    pub fn normalize(&self, word: &str) -> String {
        if self.set.lowercase && word != ROOT_TOKEN {
            word.to_lowercase()
        } else {
            word.to_string()
        }
    }

    pub fn set(&self) -> FeatureSet {
        self.set
    }

    pub fn embedding_dim(&self) -> usize {
        self.emb_dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn units(&self) -> usize {
        self.unit_names.len()
    }

    pub fn id(&self, key: &FeatureKey) -> Option<usize> {
        self.ids.get(key).copied()
    }

    /// Looks a key up by its string form; unseen keys give `None`.
    pub fn id_of_name(&self, name: &str) -> Option<usize> {
        let mut fields = name.splitn(3, '|');
        let family = Family::from_name(fields.next()?)?;
        let unit_name = fields.next()?;
        let unit = self.unit_names.iter().position(|n| n == unit_name)? as u32;
        let detail = fields.next()?;
        let arg = match family {
            Family::Word | Family::HeadWord | Family::ModifierWord | Family::BagOfWords => *self.word_ids.get(detail)?,
            Family::Pattern => Pattern::from_name(detail).ok()?.index() as u32,
            Family::Transition => self.unit_names.iter().position(|n| n == detail)? as u32,
            Family::Embedding => detail.parse().ok()?,
        };
        self.id(&FeatureKey { family, unit, arg })
    }

    pub fn key(&self, id: usize) -> FeatureKey {
        self.keys[id]
    }

    pub fn key_name(&self, id: usize) -> String {
        let k = self.keys[id];
        let detail = match k.family {
            Family::Word | Family::HeadWord | Family::ModifierWord | Family::BagOfWords => {
                self.vocab[k.arg as usize].clone()
            }
            Family::Pattern => Pattern::ALL[k.arg as usize].name().to_string(),
            Family::Transition => self.unit_names[k.arg as usize].clone(),
            Family::Embedding => k.arg.to_string(),
        };
        format!("{}|{}|{}", k.family.name(), self.unit_names[k.unit as usize], detail)
    }

    fn name(&self, family: Family, unit: UnitId, detail: &str) -> String {
        format!("{}|{}|{}", family.name(), self.unit_names[unit], detail)
    }

    /// Feature names and values fired by one local part, with repetition.
    pub fn extract(&self, local: &Local, sentence: &Sentence, emb: Option<&EmbeddingTable>) -> Vec<(String, f64)> {
        let word = |t: usize| self.normalize(sentence.token(t));
        let mut out = Vec::new();
        match *local {
            Local::Words { unit, lo, hi } => {
                for t in lo..=hi {
                    out.push((self.name(Family::Word, unit, &word(t)), 1.0));
                }
            }
            Local::Pattern { unit, pattern } => out.push((self.name(Family::Pattern, unit, pattern.name()), 1.0)),
            Local::Transition { parent, child } => {
                out.push((self.name(Family::Transition, parent, &self.unit_names[child]), 1.0))
            }
            Local::Arc { head, modifier, unit } => {
                if self.set.head_modifier {
                    out.push((self.name(Family::HeadWord, unit, &word(head)), 1.0));
                    out.push((self.name(Family::ModifierWord, unit, &word(modifier)), 1.0));
                }
                if self.set.bag_of_words {
                    let (lo, hi) = bow_span(head, modifier);
                    for t in lo..=hi {
                        out.push((self.name(Family::BagOfWords, unit, &word(t)), 1.0));
                    }
                }
                if let (true, Some(emb)) = (self.emb_dim > 0, emb) {
                    let vec = |t: usize| -> Vec<f64> {
                        if t == 0 {
                            vec![0.0; emb.dim()]
                        } else {
                            emb.get(&word(t)).to_vec()
                        }
                    };
                    let avg = crate::neural::average_embedding(&vec(head), &vec(modifier));
                    for (k, v) in avg.into_iter().enumerate().take(self.emb_dim) {
                        out.push((self.name(Family::Embedding, unit, &k.to_string()), v));
                    }
                }
            }
        }
        out
    }

    /// Feature counts of a whole tree, summed over its local parts.
    pub fn counts_by_parts(
        &self,
        nodes: &[TreeNode],
        sentence: &Sentence,
        emb: Option<&EmbeddingTable>,
    ) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for part in parts(nodes) {
            for (k, v) in self.extract(&part, sentence, emb) {
                *out.entry(k).or_insert(0.0) += v;
            }
        }
        out
    }

    /// Feature counts of a whole tree computed token by token, without the
    /// part decomposition.
    pub fn counts_direct(
        &self,
        nodes: &[TreeNode],
        sentence: &Sentence,
        emb: Option<&EmbeddingTable>,
    ) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let mut bump = |k: String, v: f64| *out.entry(k).or_insert(0.0) += v;
        for t in 1..=sentence.len() {
            let w = self.normalize(sentence.token(t));
            for node in nodes {
                if node.owned().is_some_and(|(l, r)| l <= t && t <= r) {
                    bump(self.name(Family::Word, node.unit, &w), 1.0);
                }
                if self.set.bag_of_words {
                    let (l, r) = bow_span(node.head, node.anchor);
                    if l <= t && t <= r {
                        bump(self.name(Family::BagOfWords, node.unit, &w), 1.0);
                    }
                }
            }
        }
        for node in nodes {
            bump(self.name(Family::Pattern, node.unit, node.pattern.name()), 1.0);
            for &c in &node.children {
                bump(self.name(Family::Transition, node.unit, &self.unit_names[nodes[c].unit]), 1.0);
            }
            if self.set.head_modifier {
                bump(self.name(Family::HeadWord, node.unit, &self.normalize(sentence.token(node.head))), 1.0);
                bump(self.name(Family::ModifierWord, node.unit, &self.normalize(sentence.token(node.anchor))), 1.0);
            }
            if let (true, Some(emb)) = (self.emb_dim > 0, emb) {
                for k in 0..self.emb_dim {
                    let ep = if node.head == 0 { 0.0 } else { emb.get(&self.normalize(sentence.token(node.head)))[k] };
                    let ec = emb.get(&self.normalize(sentence.token(node.anchor)))[k];
                    bump(self.name(Family::Embedding, node.unit, &k.to_string()), (ep + ec) / 2.0);
                }
            }
        }
        out
    }

    /// `w . f` for sparse named counts; unseen keys contribute nothing.
    pub fn dot(&self, counts: &BTreeMap<String, f64>, weights: &[f64]) -> f64 {
        counts
            .iter()
            .filter_map(|(k, v)| self.id_of_name(k).map(|id| weights[id] * v))
            .sum()
    }

    /// Resolves the sentence-specific feature ids once so that potentials
    /// and gradients can be recomputed cheaply.
    pub fn sentence_features(&self, sentence: &Sentence, emb: Option<&EmbeddingTable>) -> SentenceFeatures {
        let n = sentence.len();
        let m = self.units();
        let words: Vec<Option<u32>> = (0..=n)
            .map(|t| self.word_ids.get(&self.normalize(sentence.token(t))).copied())
            .collect();
        let table = |family: Family, from: usize| -> Vec<Option<usize>> {
            let mut out = vec![None; m * (n + 1)];
            if !self.set.enabled(family) {
                return out;
            }
            for u in 0..m {
                for t in from..=n {
                    if let Some(w) = words[t] {
                        out[u * (n + 1) + t] = self.id(&FeatureKey {
                            family,
                            unit: u as u32,
                            arg: w,
                        });
                    }
                }
            }
            out
        };
        let key_table = |family: Family, width: usize| -> Vec<Option<usize>> {
            let mut out = vec![None; m * width];
            for u in 0..m {
                for a in 0..width {
                    out[u * width + a] = self.id(&FeatureKey {
                        family,
                        unit: u as u32,
                        arg: a as u32,
                    });
                }
            }
            out
        };
        let vectors = match (self.emb_dim > 0, emb) {
            (true, Some(emb)) => Some(
                (0..=n)
                    .map(|t| {
                        if t == 0 {
                            vec![0.0; self.emb_dim]
                        } else {
                            emb.get(&self.normalize(sentence.token(t)))[..self.emb_dim].to_vec()
                        }
                    })
                    .collect(),
            ),
            _ => None,
        };
        SentenceFeatures {
            n,
            m,
            word: table(Family::Word, 1),
            head: table(Family::HeadWord, 0),
            modifier: table(Family::ModifierWord, 1),
            bow: table(Family::BagOfWords, 1),
            pattern: key_table(Family::Pattern, 6),
            trans: key_table(Family::Transition, m),
            emb: if vectors.is_some() { key_table(Family::Embedding, self.emb_dim) } else { Vec::new() },
            emb_dim: self.emb_dim,
            vectors,
        }
    }
}

/// Feature ids of one sentence, `[u * (n + 1) + t]` for word-keyed tables.
#[derive(Clone, Debug)]
pub struct SentenceFeatures {
    n: usize,
    m: usize,
    word: Vec<Option<usize>>,
    head: Vec<Option<usize>>,
    modifier: Vec<Option<usize>>,
    bow: Vec<Option<usize>>,
    pattern: Vec<Option<usize>>,
    trans: Vec<Option<usize>>,
    emb: Vec<Option<usize>>,
    emb_dim: usize,
    vectors: Option<Vec<Vec<f64>>>,
}

impl SentenceFeatures {
    pub fn words(&self) -> usize {
        self.n
    }

    /// Embedding vector of token `t` (zero for the root), when embeddings
    /// are in use.
    pub fn vector(&self, t: usize) -> Option<&[f64]> {
        self.vectors.as_ref().map(|v| v[t].as_slice())
    }

    pub fn potentials(&self, weights: &[f64]) -> Potentials {
        let (n, m) = (self.n, self.m);
        let w = |id: Option<usize>| id.map_or(0.0, |i| weights[i]);
        let mut pot = Potentials::zeros(n, m);
        for u in 0..m {
            for (p, slot) in pot.pattern_mut()[u * 6..u * 6 + 6].iter_mut().enumerate() {
                *slot = w(self.pattern[u * 6 + p]);
            }
        }
        for (slot, &id) in pot.trans_mut().iter_mut().zip(&self.trans) {
            *slot = w(id);
        }
        let mut words = vec![0.0; m * (n + 1)];
        for u in 0..m {
            for t in 1..=n {
                words[u * (n + 1) + t] = w(self.word[u * (n + 1) + t]);
            }
        }
        pot.set_words(words);

        // Bag-of-words prefix sums and embedding dot products per unit.
        let mut bow_prefix = vec![0.0; m * (n + 2)];
        let mut emb_dot = vec![0.0; m * (n + 1)];
        for u in 0..m {
            for t in 0..=n {
                let v = if t == 0 { 0.0 } else { w(self.bow[u * (n + 1) + t]) };
                bow_prefix[u * (n + 2) + t + 1] = bow_prefix[u * (n + 2) + t] + v;
            }
            if let Some(vectors) = &self.vectors {
                let ids = &self.emb[u * self.emb_dim..(u + 1) * self.emb_dim];
                for (t, vec) in vectors.iter().enumerate() {
                    emb_dot[u * (n + 1) + t] = ids.iter().zip(vec).map(|(&id, x)| w(id) * x).sum();
                }
            }
        }
        let arc = pot.arc_mut();
        for p in 0..=n {
            for a in 1..=n {
                for u in 0..m {
                    let (lo, hi) = crate::features::bow_span(p, a);
                    let mut v = w(self.head[u * (n + 1) + p]) + w(self.modifier[u * (n + 1) + a]);
                    v += bow_prefix[u * (n + 2) + hi + 1] - bow_prefix[u * (n + 2) + lo];
                    if self.vectors.is_some() {
                        v += (emb_dot[u * (n + 1) + p] + emb_dot[u * (n + 1) + a]) / 2.0;
                    }
                    arc[(p * (n + 1) + a) * m + u] = v;
                }
            }
        }
        pot
    }

    /// Adds `scale` times the expected feature counts in `marg` to `grad`.
    pub fn accumulate(&self, marg: &Marginals, scale: f64, grad: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        let mut add = |id: Option<usize>, v: f64| {
            if let Some(i) = id {
                grad[i] += scale * v;
            }
        };
        for u in 0..m {
            for p in Pattern::ALL {
                add(self.pattern[u * 6 + p.index()], marg.pattern(u, p));
            }
            for v in 0..m {
                add(self.trans[u * m + v], marg.trans(u, v));
            }
            for t in 1..=n {
                add(self.word[u * (n + 1) + t], marg.word(u, t));
            }
        }
        let mut head = vec![0.0; m * (n + 1)];
        let mut modifier = vec![0.0; m * (n + 1)];
        let mut bow_diff = vec![0.0; m * (n + 2)];
        for p in 0..=n {
            for a in 1..=n {
                for u in 0..m {
                    let mu = marg.arc(p, a, u);
                    if mu == 0.0 {
                        continue;
                    }
                    head[u * (n + 1) + p] += mu;
                    modifier[u * (n + 1) + a] += mu;
                    let (lo, hi) = bow_span(p, a);
                    bow_diff[u * (n + 2) + lo] += mu;
                    bow_diff[u * (n + 2) + hi + 1] -= mu;
                }
            }
        }
        for u in 0..m {
            let mut run = 0.0;
            for t in 0..=n {
                run += bow_diff[u * (n + 2) + t];
                let i = u * (n + 1) + t;
                add(self.head[i], head[i]);
                add(self.modifier[i], modifier[i]);
                if t > 0 {
                    add(self.bow[i], run);
                }
            }
            if let Some(vectors) = &self.vectors {
                let mut sums = vec![0.0; self.emb_dim];
                for (t, vec) in vectors.iter().enumerate() {
                    let i = u * (n + 1) + t;
                    let mu = (head[i] + modifier[i]) / 2.0;
                    sums.iter_mut().zip(vec).for_each(|(s, x)| *s += mu * x);
                }
                for (k, s) in sums.into_iter().enumerate() {
                    add(self.emb[u * self.emb_dim + k], s);
                }
            }
        }
    }
}
