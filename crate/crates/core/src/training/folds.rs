//! K-fold splits: seeded shuffle, then round-robin assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    /// In input order.
    pub train_ids: Vec<String>,
    /// In shuffled order.
    pub val_ids: Vec<String>,
}

pub fn make_folds(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k == 0 || k > case_ids.len() {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {} cases",
            case_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..case_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; case_ids.len()];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = pos % k;
    }
    Ok((0..k)
        .map(|f| FoldSplit {
            fold_index: f,
            train_ids: case_ids
                .iter()
                .zip(&fold_of)
                .filter(|(_, &g)| g != f)
                .map(|(id, _)| id.clone())
                .collect(),
            val_ids: order
                .iter()
                .filter(|&&i| fold_of[i] == f)
                .map(|&i| case_ids[i].clone())
                .collect(),
        })
        .collect())
}
