//! Seeded k-fold partitions of a training split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Shuffle `ids` with a seeded generator and cut it into `n_folds` contiguous
/// validation chunks. Chunk sizes differ by at most one.
pub fn make_folds<S: AsRef<str>>(ids: &[S], n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    if ids.len() < n_folds {
        return Err(Error::Data(format!(
            "{} records cannot fill {n_folds} folds",
            ids.len()
        )));
    }
    let mut order: Vec<String> = ids.iter().map(|s| s.as_ref().to_owned()).collect();
    let mut sorted = order.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != order.len() {
        return Err(Error::Data("duplicate image ids in fold input".into()));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (order.len() / n_folds, order.len() % n_folds);
    let mut folds = Vec::with_capacity(n_folds);
    let mut start = 0;
    for k in 0..n_folds {
        let len = base + usize::from(k < extra);
        let val_ids = order[start..start + len].to_vec();
        let train_ids = order[..start]
            .iter()
            .chain(&order[start + len..])
            .cloned()
            .collect();
        folds.push(FoldSplit {
            fold_index: k,
            train_ids,
            val_ids,
        });
        start += len;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:02}")).collect()
    }

    #[test]
    fn twenty_records_give_val_size_four() {
        let f = make_folds(&ids(20), 5, 7).unwrap();
        assert!(f.iter().all(|s| s.val_ids.len() == 4 && s.train_ids.len() == 16));
    }

    #[test]
    fn same_seed_same_folds() {
        assert_eq!(make_folds(&ids(20), 5, 3).unwrap(), make_folds(&ids(20), 5, 3).unwrap());
        assert_ne!(make_folds(&ids(20), 5, 3).unwrap(), make_folds(&ids(20), 5, 4).unwrap());
    }

    #[test]
    fn too_few_records() {
        assert!(make_folds(&ids(4), 5, 0).is_err());
        assert!(make_folds(&["a", "a", "b", "c", "d"], 5, 0).is_err());
    }

    proptest! {
        #[test]
        fn val_folds_partition_the_input(n in 5usize..40, k in 2usize..6, seed in any::<u64>()) {
            let input = ids(n);
            let folds = make_folds(&input, k, seed).unwrap();
            let mut all: Vec<String> = folds.iter().flat_map(|f| f.val_ids.clone()).collect();
            all.sort();
            prop_assert_eq!(&all, &input);
            for f in &folds {
                prop_assert_eq!(f.train_ids.len() + f.val_ids.len(), n);
                prop_assert!(f.train_ids.iter().all(|t| !f.val_ids.contains(t)));
            }
        }
    }
}
