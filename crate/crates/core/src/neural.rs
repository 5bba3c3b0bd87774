//! Fixed word embeddings and the per-unit bilinear arc scorer
//! `r = e_p^T U_u e_c`.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("embedding line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("embedding file has no vectors")]
    Empty,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Word vectors of a common dimension. Unknown words map to the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    zero: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
            zero: vec![0.0; dim],
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim, "embedding dimension mismatch");
        self.vectors.insert(word.into(), vector);
    }

    /// Reads `word v1 ... vd` lines. A leading `count dim` header line is
    /// skipped.
    pub fn parse(text: &str) -> Result<Self, NeuralError> {
        let mut table: Option<EmbeddingTable> = None;
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                continue;
            }
            let err = |message: String| NeuralError::Format { line: i + 1, message };
            if fields.len() < 2 {
                return Err(err("expected a word followed by values".into()));
            }
            let values = fields[1..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| err(format!("`{v}`: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let t = table.get_or_insert_with(|| EmbeddingTable::new(values.len()));
            if values.len() != t.dim {
                return Err(err(format!("dimension {} but table has {}", values.len(), t.dim)));
            }
            t.vectors.insert(fields[0].to_string(), values);
        }
        table.ok_or(NeuralError::Empty)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NeuralError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> &[f64] {
        self.vectors.get(word).map(Vec::as_slice).unwrap_or(&self.zero)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }
}

/// `(e_p + e_c) / 2`.
pub fn average_embedding(ep: &[f64], ec: &[f64]) -> Vec<f64> {
    ep.iter().zip(ec).map(|(a, b)| (a + b) / 2.0).collect()
}

/// One `d x d` matrix per semantic unit, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearBank {
    dim: usize,
    units: usize,
    data: Vec<f64>,
}

impl BilinearBank {
    pub fn zeros(units: usize, dim: usize) -> Self {
        BilinearBank {
            dim,
            units,
            data: vec![0.0; units * dim * dim],
        }
    }

    /// Entries drawn uniformly from `[-0.01, 0.01]`.
    pub fn random<R: Rng>(units: usize, dim: usize, rng: &mut R) -> Self {
        let data = (0..units * dim * dim).map(|_| rng.gen_range(-0.01..=0.01)).collect();
        BilinearBank { dim, units, data }
    }

    pub fn from_params(units: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), units * dim * dim);
        BilinearBank { dim, units, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn params(&self) -> &[f64] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matrix(&self, unit: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.data[unit * dd..(unit + 1) * dd]
    }

    pub fn score(&self, unit: usize, ep: &[f64], ec: &[f64]) -> f64 {
        let u = self.matrix(unit);
        let mut total = 0.0;
        for (i, &p) in ep.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let row = &u[i * self.dim..(i + 1) * self.dim];
            total += p * row.iter().zip(ec).map(|(x, c)| x * c).sum::<f64>();
        }
        total
    }

    /// `U_u e_c` for every unit, `[u * d + i]`.
    pub fn project(&self, ec: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.units * self.dim];
        for unit in 0..self.units {
            let u = self.matrix(unit);
            for i in 0..self.dim {
                out[unit * self.dim + i] = u[i * self.dim..(i + 1) * self.dim]
                    .iter()
                    .zip(ec)
                    .map(|(x, c)| x * c)
                    .sum();
            }
        }
        out
    }

    /// Adds `scale * e_p e_c^T` to the gradient block of `unit`.
    pub fn accumulate_gradient(&self, unit: usize, ep: &[f64], ec: &[f64], scale: f64, grad: &mut [f64]) {
        if scale == 0.0 {
            return;
        }
        let dd = self.dim * self.dim;
        let block = &mut grad[unit * dd..(unit + 1) * dd];
        for (i, &p) in ep.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (j, &c) in ec.iter().enumerate() {
                block[i * self.dim + j] += scale * p * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(u: &[f64], d: usize, ep: &[f64], ec: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += ep[i] * u[i * d + j] * ec[j];
            }
        }
        s
    }

    #[test]
    fn zero_and_identity_forms() {
        let bank = BilinearBank::zeros(2, 3);
        assert_eq!(bank.score(1, &[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]), 0.0);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let bank = BilinearBank::from_params(1, 3, eye);
        assert_eq!(bank.score(0, &[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]), 1.0);
    }

    #[test]
    fn random_scores_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = BilinearBank::random(4, 5, &mut rng);
        assert!(bank.params().iter().all(|x| x.abs() <= 0.01));
        for _ in 0..50 {
            let ep: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ec: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for unit in 0..4 {
                let want = naive(bank.matrix(unit), 5, &ep, &ec);
                assert!((bank.score(unit, &ep, &ec) - want).abs() <= 1e-12);
                let proj = bank.project(&ec);
                let via: f64 = ep.iter().zip(&proj[unit * 5..unit * 5 + 5]).map(|(a, b)| a * b).sum();
                assert!((via - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gradient_is_outer_product() {
        let bank = BilinearBank::zeros(2, 3);
        let mut grad = vec![0.0; 18];
        bank.accumulate_gradient(1, &[1.0, 2.0, 3.0], &[1.0, 0.0, -1.0], 0.0, &mut grad);
        assert!(grad.iter().all(|&g| g == 0.0));
        bank.accumulate_gradient(1, &[1.0, 2.0, 3.0], &[1.0, 0.0, -1.0], 0.5, &mut grad);
        assert!(grad[..9].iter().all(|&g| g == 0.0));
        let block = &grad[9..];
        // rank one: every 2x2 minor vanishes
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        let minor = block[i * 3 + k] * block[j * 3 + l] - block[i * 3 + l] * block[j * 3 + k];
                        assert!(minor.abs() < 1e-12);
                    }
                }
            }
        }
        assert_eq!(block[2 * 3], 1.5);
    }

    #[test]
    fn embedding_file_and_oov() {
        let table = EmbeddingTable::parse("3 2\nriver 0.5 -1\ntn 1 2\n\nstate 0 0.25\n").unwrap();
        assert_eq!(table.dim(), 2);
        assert_eq!(table.len(), 3);
        assert_eq!(table.get("tn"), &[1.0, 2.0]);
        assert_eq!(table.get("lake"), &[0.0, 0.0]);
        assert!(matches!(
            EmbeddingTable::parse("a 1 2\nb 1\n"),
            Err(NeuralError::Format { line: 2, .. })
        ));
        assert!(matches!(EmbeddingTable::parse(""), Err(NeuralError::Empty)));
    }

    #[test]
    fn averages() {
        let e = [0.5, -2.0, 3.0];
        assert_eq!(average_embedding(&e, &e), e.to_vec());
        let neg: Vec<f64> = e.iter().map(|x| -x).collect();
        assert_eq!(average_embedding(&e, &neg), vec![0.0; 3]);
        let other = [1.0, 1.0, 1.0];
        assert_eq!(average_embedding(&e, &other), vec![0.75, -0.5, 2.0]);
    }

    proptest! {
        #[test]
        fn score_is_bilinear(alpha in -3.0f64..3.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = BilinearBank::random(1, 4, &mut rng);
            let ep: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ec: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = ep.iter().map(|x| alpha * x).collect();
            let lhs = bank.score(0, &scaled, &ec);
            let rhs = alpha * bank.score(0, &ep, &ec);
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }
}
