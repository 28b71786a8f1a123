use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row positions of each split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Everything in train.
    pub fn all_train(n: usize) -> Self {
        Splits {
            train: (0..n).collect(),
            ..Default::default()
        }
    }

    /// Disjoint and covering `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &r in self.train.iter().chain(&self.val).chain(&self.test) {
            if r >= n || seen[r] {
                return Err(Error::Validation(format!("split row {r} out of range or repeated")));
            }
            seen[r] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation("splits do not cover every row".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitOutcome {
    pub splits: Splits,
    /// One message per class that was too small to stratify.
    pub warnings: Vec<String>,
}

/// Stratified train/val/test split of rows by class.
///
/// Each class is shuffled and cut at rounded fractions; the test split takes
/// the remainder. Classes with fewer rows than there are non-empty splits
/// are pooled and split without stratification.
pub fn split(classes: &[usize], fractions: [f64; 3], seed: u64) -> Result<SplitOutcome> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let active = fractions.iter().filter(|&&f| f > 0.0).count();
    let k = classes.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits::default();
    let mut warnings = Vec::new();
    let mut pooled = Vec::new();
    for c in 0..k {
        let mut rows: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng);
        if rows.len() < active {
            warnings.push(format!(
                "class {c} has {} samples for {active} splits; assigned without stratification",
                rows.len()
            ));
            pooled.extend(rows);
            continue;
        }
        cut(&rows, fractions, &mut splits);
    }
    if !pooled.is_empty() {
        pooled.sort_unstable();
        pooled.shuffle(&mut rng);
        cut(&pooled, fractions, &mut splits);
    }
    for s in [&mut splits.train, &mut splits.val, &mut splits.test] {
        s.sort_unstable();
    }
    Ok(SplitOutcome { splits, warnings })
}

fn cut(rows: &[usize], fractions: [f64; 3], splits: &mut Splits) {
    let n = rows.len() as f64;
    let n_train = ((fractions[0] * n).round() as usize).min(rows.len());
    let n_val = ((fractions[1] * n).round() as usize).min(rows.len() - n_train);
    let n_val = if fractions[2] == 0.0 { rows.len() - n_train } else { n_val };
    splits.train.extend_from_slice(&rows[..n_train]);
    splits.val.extend_from_slice(&rows[n_train..n_train + n_val]);
    splits.test.extend_from_slice(&rows[n_train + n_val..]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classes(counts: &[usize]) -> Vec<usize> {
        counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect()
    }

    #[test]
    fn all_train() {
        let c = classes(&[5, 3, 9]);
        let s = split(&c, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(s.splits.train, (0..17).collect::<Vec<_>>());
        assert!(s.splits.val.is_empty() && s.splits.test.is_empty());
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let c = classes(&[30, 12, 50, 7]);
        assert_eq!(split(&c, [0.7, 0.15, 0.15], 4).unwrap(), split(&c, [0.7, 0.15, 0.15], 4).unwrap());
        assert_ne!(split(&c, [0.7, 0.15, 0.15], 4).unwrap(), split(&c, [0.7, 0.15, 0.15], 5).unwrap());
    }

    #[test]
    fn tiny_class_falls_back_with_warning() {
        let c = classes(&[40, 2, 40]);
        let s = split(&c, [0.7, 0.15, 0.15], 1).unwrap();
        assert_eq!(s.warnings.len(), 1);
        s.splits.validate(c.len()).unwrap();
    }

    #[test]
    fn bad_fractions_are_rejected() {
        assert!(split(&[0, 1], [0.5, 0.6, 0.0], 0).is_err());
        assert!(split(&[0, 1], [1.2, -0.2, 0.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn class_counts_within_one_of_ideal(
            counts in proptest::collection::vec(3usize..60, 2..8),
            seed in any::<u64>(),
        ) {
            let c = classes(&counts);
            let f = [0.7, 0.15, 0.15];
            let s = split(&c, f, seed).unwrap();
            s.splits.validate(c.len()).unwrap();
            for (k, &n) in counts.iter().enumerate() {
                for (part, frac) in [(&s.splits.train, f[0]), (&s.splits.val, f[1]), (&s.splits.test, f[2])] {
                    let got = part.iter().filter(|&&r| c[r] == k).count() as f64;
                    prop_assert!((got - frac * n as f64).abs() <= 1.0, "class {} got {} of {}", k, got, n);
                }
            }
        }
    }
}
