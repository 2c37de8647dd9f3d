use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Outer test folds with an inner train/validation split per fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Seeded shuffle, then contiguous test chunks whose sizes differ by at most
/// one. The remaining IDs of each fold are shuffled again by the same stream
/// and split into validation (`round(val_fraction * n)`, leaving at least one
/// training ID) and training sets.
pub fn make_folds(ids: &[String], n_folds: usize, seed: u64, val_fraction: f64) -> Result<FoldPlan> {
    if n_folds == 0 || n_folds > ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot make {n_folds} folds from {} ids",
            ids.len()
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!("val_fraction must be in [0, 1), got {val_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = ids.to_vec();
    order.shuffle(&mut rng);

    let base = order.len() / n_folds;
    let extra = order.len() % n_folds;
    let mut folds = Vec::with_capacity(n_folds);
    let mut start = 0;
    for f in 0..n_folds {
        let size = base + usize::from(f < extra);
        let test = order[start..start + size].to_vec();
        let mut rest: Vec<String> = order[..start].iter().chain(&order[start + size..]).cloned().collect();
        rest.shuffle(&mut rng);
        let n_val = ((val_fraction * rest.len() as f64).round() as usize).min(rest.len().saturating_sub(1));
        let val = rest[..n_val].to_vec();
        let train = rest[n_val..].to_vec();
        folds.push(Fold { test, train, val });
        start += size;
    }
    Ok(FoldPlan { folds })
}

/// Seeded train/validation split of `ids` with the same sizing rule as the
/// inner split of [`make_folds`]. Returns `(train, val)`.
pub fn split_train_val(ids: &[String], seed: u64, val_fraction: f64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty id list".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!("val_fraction must be in [0, 1), got {val_fraction}")));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((val_fraction * order.len() as f64).round() as usize).min(order.len() - 1);
    let train = order.split_off(n_val);
    Ok((train, order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case{i:03}")).collect()
    }

    #[test]
    fn eighteen_ids_six_folds() {
        let plan = make_folds(&ids(18), 6, 7, 0.2).unwrap();
        assert_eq!(plan.folds.len(), 6);
        for f in &plan.folds {
            assert_eq!(f.test.len(), 3);
            assert_eq!(f.val.len(), 3);
            assert_eq!(f.train.len(), 12);
        }
        assert_eq!(plan, make_folds(&ids(18), 6, 7, 0.2).unwrap());
        assert_ne!(plan, make_folds(&ids(18), 6, 8, 0.2).unwrap());
    }

    #[test]
    fn singleton_folds_and_errors() {
        let plan = make_folds(&ids(6), 6, 1, 0.2).unwrap();
        assert!(plan.folds.iter().all(|f| f.test.len() == 1 && !f.train.is_empty()));
        assert!(make_folds(&ids(5), 6, 1, 0.2).is_err());
    }

    proptest! {
        #[test]
        fn test_sets_partition_ids(n in 1usize..40, k in 1usize..40, seed in any::<u64>(), frac in 0.0f64..0.6) {
            prop_assume!(k <= n);
            let all = ids(n);
            let plan = make_folds(&all, k, seed, frac).unwrap();
            let mut seen = BTreeSet::new();
            let sizes: Vec<usize> = plan.folds.iter().map(|f| f.test.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for f in &plan.folds {
                for id in &f.test {
                    prop_assert!(seen.insert(id.clone()));
                }
                let test: BTreeSet<_> = f.test.iter().collect();
                let train: BTreeSet<_> = f.train.iter().collect();
                let val: BTreeSet<_> = f.val.iter().collect();
                prop_assert!(train.is_disjoint(&val));
                prop_assert!(test.is_disjoint(&train) && test.is_disjoint(&val));
                prop_assert_eq!(test.len() + train.len() + val.len(), n);
            }
            prop_assert_eq!(seen.len(), n);
        }
    }

    #[test]
    fn plain_split() {
        let (train, val) = split_train_val(&ids(10), 1, 0.2).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let mut all: Vec<String> = train.iter().chain(&val).cloned().collect();
        all.sort();
        assert_eq!(all, ids(10));
        assert_eq!(split_train_val(&ids(1), 1, 0.5).unwrap().1.len(), 0);
    }
}
