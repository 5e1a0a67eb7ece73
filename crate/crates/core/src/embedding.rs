use std::collections::HashMap;

use ndarray::Array1;

use crate::tagging::tokenize;

/// Word vectors of a fixed dimension, keyed by lowercased word.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WordEmbeddings {
    dim: usize,
    vectors: HashMap<String, Array1<f64>>,
}

/// Mean vector of a phrase plus how much of it was out of vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseVector {
    pub vector: Array1<f64>,
    pub oov_fraction: f64,
}

impl PhraseVector {
    pub fn all_oov(&self) -> bool {
        self.oov_fraction >= 1.0
    }
}

impl WordEmbeddings {
    pub fn new(dim: usize) -> Self {
        WordEmbeddings {
            dim,
            vectors: HashMap::new(),
        }
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

    /// Panics if the vector has the wrong dimension.
    pub fn insert(&mut self, word: &str, vector: Vec<f64>) {
        assert_eq!(
            vector.len(),
            self.dim,
            "embedding for `{word}` has wrong dimension"
        );
        self.vectors
            .insert(word.to_lowercase(), Array1::from(vector));
    }

    pub fn get(&self, word: &str) -> Option<&Array1<f64>> {
        self.vectors.get(word)
    }

    /// Sorted words, for deterministic serialisation.
    pub fn words(&self) -> Vec<&str> {
        let mut w: Vec<&str> = self.vectors.keys().map(String::as_str).collect();
        w.sort_unstable();
        w
    }

    /// Mean of the in-vocabulary word vectors of `text`. Punctuation tokens are
    /// ignored; when no word is known the result is the zero vector with an
    /// OOV fraction of 1.
    pub fn average(&self, text: &str) -> PhraseVector {
        let mut sum = Array1::zeros(self.dim);
        let mut known = 0usize;
        let mut total = 0usize;
        for tok in tokenize(text).into_iter().filter(|t| !t.is_punct()) {
            total += 1;
            if let Some(v) = self.vectors.get(&tok.text.to_lowercase()) {
                sum += v;
                known += 1;
            }
        }
        if known == 0 {
            return PhraseVector {
                vector: sum,
                oov_fraction: 1.0,
            };
        }
        PhraseVector {
            vector: sum / known as f64,
            oov_fraction: (total - known) as f64 / total as f64,
        }
    }
}
