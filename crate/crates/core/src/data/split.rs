use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    Random,
    Scaffold,
    Size,
}

impl SplitScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitScheme::Random => "random",
            SplitScheme::Scaffold => "scaffold",
            SplitScheme::Size => "size",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub scheme: SplitScheme,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Split {
    /// `{"train": [...], "val": [...], "test": [...]}`
    pub fn export_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Export<'a> {
            train: &'a [usize],
            val: &'a [usize],
            test: &'a [usize],
        }
        Ok(serde_json::to_string(&Export {
            train: &self.train,
            val: &self.val,
            test: &self.test,
        })?)
    }
}

/// Subset sizes for `n` items. When the fractions sum to one the test subset
/// takes the remainder so that nothing is dropped to rounding.
fn cut_sizes(n: usize, fr: [f64; 3]) -> [usize; 3] {
    let count = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let train = count(fr[0]).min(n);
    let val = count(fr[1]).min(n - train);
    let test = if (fr.iter().sum::<f64>() - 1.0).abs() < 1e-9 {
        n - train - val
    } else {
        count(fr[2]).min(n - train - val)
    };
    [train, val, test]
}

fn contiguous(order: Vec<usize>, sizes: [usize; 3]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (train, rest) = order.split_at(sizes[0]);
    let (val, rest) = rest.split_at(sizes[1]);
    (train.to_vec(), val.to_vec(), rest[..sizes[2]].to_vec())
}

/// Partitions `ds` into train / val / test.
///
/// * `Random`: seeded shuffle, contiguous cuts.
/// * `Size`: ascending node count (ties by id), so the largest molecules land in test.
/// * `Scaffold`: scaffold groups sorted by size descending (ties by key) fill train
///   up to its quota, then val, then test; no scaffold spans two subsets.
pub fn split(ds: &Dataset, scheme: SplitScheme, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|&f| f <= 0.0 || !f.is_finite()) || fractions.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::validation(format!(
            "split fractions must be positive and sum to at most 1, got {fractions:?}"
        )));
    }
    let n = ds.len();
    let sizes = cut_sizes(n, fractions);
    let (train, val, test) = match scheme {
        SplitScheme::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            contiguous(order, sizes)
        }
        SplitScheme::Size => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let (ma, mb) = (&ds.molecules[a], &ds.molecules[b]);
                ma.node_count().cmp(&mb.node_count()).then_with(|| ma.id.cmp(&mb.id))
            });
            contiguous(order, sizes)
        }
        SplitScheme::Scaffold => scaffold_split(ds, fractions)?,
    };
    Ok(Split {
        train,
        val,
        test,
        scheme,
        fractions,
        seed,
    })
}

fn scaffold_split(ds: &Dataset, fr: [f64; 3]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, m) in ds.molecules.iter().enumerate() {
        let key = m.scaffold.as_deref().ok_or_else(|| {
            Error::validation(format!("molecule `{}` has no scaffold key", m.id))
        })?;
        groups.entry(key).or_default().push(i);
    }
    let mut groups: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(b.0)));

    let n = ds.len() as f64;
    let train_cut = fr[0] * n;
    let train_val_cut = (fr[0] + fr[1]) * n;
    let test_cap = (fr[0] + fr[1] + fr[2]) * n;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (_, members) in groups {
        let g = members.len() as f64;
        if (train.len() as f64) + g > train_cut + 1e-9 {
            if (train.len() + val.len()) as f64 + g > train_val_cut + 1e-9 {
                if (train.len() + val.len() + test.len()) as f64 + g <= test_cap + 1e-9 {
                    test.extend(members);
                }
            } else {
                val.extend(members);
            }
        } else {
            train.extend(members);
        }
    }
    Ok((train, val, test))
}

/// Uniform sample of `n` training indices without replacement, returned sorted.
pub fn fewshot(train: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > train.len() {
        return Err(Error::validation(format!(
            "few-shot size {n} exceeds the {} training molecules",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf3a5_0000);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, train.len(), n)
        .into_iter()
        .map(|i| train[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::data::{Molecule, TaskKind};

    fn dataset(sizes: &[usize], scaffolds: &[&str]) -> Dataset {
        let molecules = sizes
            .iter()
            .zip(scaffolds)
            .enumerate()
            .map(|(i, (&n, s))| Molecule {
                id: format!("m{i:02}"),
                node_feats: vec![vec![1.0]; n],
                edges: vec![],
                labels: vec![Some((i % 2) as f64)],
                scaffold: Some(s.to_string()),
            })
            .collect();
        Dataset::new(molecules, TaskKind::Classification).unwrap()
    }

    #[test]
    fn random_sizes() {
        let ds = dataset(&[1; 10], &["a"; 10]);
        let s = split(&ds, SplitScheme::Random, DEFAULT_FRACTIONS, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split(&ds, SplitScheme::Random, DEFAULT_FRACTIONS, 0).unwrap());
    }

    #[test]
    fn size_split_puts_largest_in_test() {
        let ds = dataset(&[5, 3, 9, 1, 10, 2, 4, 8, 6, 7], &["a"; 10]);
        let s = split(&ds, SplitScheme::Size, DEFAULT_FRACTIONS, 0).unwrap();
        let test_sizes: BTreeSet<usize> = s.test.iter().map(|&i| ds.molecules[i].node_count()).collect();
        // 8/1/1 cut: the single largest is test, the next is val
        assert_eq!(test_sizes, BTreeSet::from([10]));
        assert_eq!(ds.molecules[s.val[0]].node_count(), 9);
    }

    #[test]
    fn size_split_with_two_test_molecules() {
        let ds = dataset(&[5, 3, 9, 1, 10, 2, 4, 8, 6, 7], &["a"; 10]);
        let s = split(&ds, SplitScheme::Size, [0.7, 0.1, 0.2], 0).unwrap();
        let test_sizes: BTreeSet<usize> = s.test.iter().map(|&i| ds.molecules[i].node_count()).collect();
        assert_eq!(test_sizes, BTreeSet::from([9, 10]));
    }

    #[test]
    fn scaffold_groups_never_straddle_subsets() {
        let keys = ["x", "x", "x", "x", "x", "x", "y", "y", "y", "z"];
        let ds = dataset(&[3; 10], &keys);
        let s = split(&ds, SplitScheme::Scaffold, DEFAULT_FRACTIONS, 0).unwrap();
        let keyset = |idx: &[usize]| -> BTreeSet<String> {
            idx.iter().map(|&i| ds.molecules[i].scaffold.clone().unwrap()).collect()
        };
        let (a, b, c) = (keyset(&s.train), keyset(&s.val), keyset(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        // largest group first: x (6) -> train, y (3) overflows train -> val, z (1) fits train
        assert_eq!(a, BTreeSet::from(["x".to_string(), "z".to_string()]));
        assert_eq!(b, BTreeSet::from(["y".to_string()]));
    }

    #[test]
    fn scaffold_requires_keys() {
        let mut ds = dataset(&[1, 1], &["a", "b"]);
        ds.molecules[1].scaffold = None;
        assert!(matches!(
            split(&ds, SplitScheme::Scaffold, DEFAULT_FRACTIONS, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bad_fractions() {
        let ds = dataset(&[1; 4], &["a"; 4]);
        assert!(split(&ds, SplitScheme::Random, [0.8, 0.2, 0.1], 0).is_err());
        assert!(split(&ds, SplitScheme::Random, [0.8, 0.0, 0.1], 0).is_err());
    }

    #[test]
    fn fewshot_edges() {
        let train: Vec<usize> = (100..140).collect();
        let all = fewshot(&train, train.len(), 3).unwrap();
        assert_eq!(all, train);
        let one = fewshot(&train, 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert!(train.contains(&one[0]));
        assert!(matches!(fewshot(&train, 41, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn fewshot_is_seeded() {
        let train: Vec<usize> = (0..400).collect();
        assert_eq!(fewshot(&train, 100, 7).unwrap(), fewshot(&train, 100, 7).unwrap());
        assert_ne!(fewshot(&train, 100, 7).unwrap(), fewshot(&train, 100, 8).unwrap());
    }

    #[test]
    fn export_shape() {
        let ds = dataset(&[1; 10], &["a"; 10]);
        let s = split(&ds, SplitScheme::Size, DEFAULT_FRACTIONS, 0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.export_json().unwrap()).unwrap();
        assert_eq!(v["train"].as_array().unwrap().len(), 8);
        assert_eq!(v["test"].as_array().unwrap().len(), 1);
    }
}
