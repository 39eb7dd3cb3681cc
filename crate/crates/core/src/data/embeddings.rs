use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|V| × D` word vectors plus the pretrained hit/miss counts.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub dim: usize,
    pub hits: usize,
    pub misses: usize,
}

impl EmbeddingTable {
    /// Table with every non-PAD row uniform in `[-0.1, 0.1]`.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; vocab_size * dim];
        for (i, row) in data.chunks_mut(dim).enumerate() {
            if i != PAD {
                row.iter_mut().for_each(|x| *x = rng.gen_range(-0.1..=0.1));
            }
        }
        Self {
            matrix: Tensor::matrix(vocab_size, dim, data).expect("positive extents"),
            dim,
            hits: 0,
            misses: vocab_size.saturating_sub(1),
        }
    }
}

/// Reads a plain-text vector file (`token v1 … vD` per line). In-vocabulary
/// rows are copied; the rest stay random. Reserved tokens other than PAD count
/// as misses unless the file lists them.
pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocab, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    if dim == 0 {
        return Err(Error::arg("embedding dimension must be positive"));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = EmbeddingTable::random(vocab.len(), dim, seed);
    let mut seen = vec![false; vocab.len()];
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        let loc = || Some(format!("line {}", n + 1));
        if values.len() != dim {
            return Err(Error::parse(path, loc(), format!("expected {dim} values, found {}", values.len())));
        }
        let Some(id) = vocab.get(token) else { continue };
        if id == PAD || seen[id] {
            continue;
        }
        let row: Vec<f64> = values
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, loc(), format!("bad number: {e}")))?;
        table.matrix.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&row);
        seen[id] = true;
    }
    table.hits = seen.iter().filter(|s| **s).count();
    table.misses = vocab.len() - 1 - table.hits;
    Ok(table)
}
