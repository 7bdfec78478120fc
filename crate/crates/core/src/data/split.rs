use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, DataError};

/// Shuffles record indices with `seed` and cuts them into train, validation
/// and test corpora of `round(n·ratio)` records (test takes the remainder).
pub fn split_corpus(
    c: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus), DataError> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(DataError::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    let n = c.records.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * tr).round() as usize;
    let n_val = (((n as f64) * va).round() as usize).min(n - n_train);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        c.with_records(idx.iter().map(|&i| c.records[i].clone()).collect())
    };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_corpus, SynthConfig};

    fn corpus(n: usize) -> Corpus {
        synthesize_corpus(&SynthConfig { n_records: n, ..SynthConfig::default() }).unwrap()
    }

    fn ids(c: &Corpus) -> Vec<String> {
        c.records.iter().map(|r| r.trial_id.clone()).collect()
    }

    #[test]
    fn sizes_partition_and_determinism() {
        let c = corpus(100);
        let (a, b, t) = split_corpus(&c, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((a.len(), b.len(), t.len()), (80, 10, 10));
        let mut all: Vec<String> = [ids(&a), ids(&b), ids(&t)].concat();
        all.sort();
        assert_eq!(all, ids(&c));
        let (a2, b2, t2) = split_corpus(&c, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((ids(&a), ids(&b), ids(&t)), (ids(&a2), ids(&b2), ids(&t2)));
    }

    #[test]
    fn held_out_pool_splits_one_to_two() {
        let c = corpus(300);
        let (_, v, t) = split_corpus(&c, (0.86, 0.047, 0.093), 0).unwrap();
        assert_eq!((v.len(), t.len()), (14, 28));
    }

    #[test]
    fn bad_ratios_are_config_errors() {
        let c = corpus(10);
        assert!(matches!(split_corpus(&c, (0.5, 0.5, 0.1), 0), Err(DataError::Config(_))));
        assert!(matches!(split_corpus(&c, (1.0, 0.0, 0.0), 0), Err(DataError::Config(_))));
    }
}
