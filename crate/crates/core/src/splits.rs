//! Nested few-shot splits.
//!
//! Each class draws one seeded permutation of its examples; the split for `k`
//! takes the first `min(k, |class|)` elements of every permutation, so smaller
//! splits are prefixes (and therefore subsets) of larger ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_corpus, write_corpus, LabeledExample};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::rng_for;

pub const DEFAULT_KS: [usize; 6] = [1, 2, 4, 8, 16, 32];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplitSet {
    pub seed: u64,
    pub ks: Vec<usize>,
    pub splits: BTreeMap<usize, Vec<LabeledExample>>,
}

impl FewShotSplitSet {
    pub fn get(&self, k: usize) -> Option<&[LabeledExample]> {
        self.splits.get(&k).map(Vec::as_slice)
    }

    pub fn k_max(&self) -> usize {
        self.ks.last().copied().unwrap_or(0)
    }
}

pub fn validate_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("ks must be non-empty".into()));
    }
    if ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "ks must be positive and strictly increasing, got {ks:?}"
        )));
    }
    Ok(())
}

/// Group example indices by class in order of first appearance.
fn classes(train: &[LabeledExample]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (i, e) in train.iter().enumerate() {
        let key = e.class_key();
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            order.push((key, Vec::new()));
            order.len() - 1
        });
        order[slot].1.push(i);
    }
    order
}

pub fn make_fewshot_splits_with(
    train: &[LabeledExample],
    ks: &[usize],
    seed: u64,
    exec: Exec,
) -> Result<FewShotSplitSet> {
    validate_ks(ks)?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for e in train {
        e.require_labeled()?;
    }
    let groups = classes(train);
    let perms: Vec<Vec<usize>> = exec.map(&groups, |(key, members)| {
        let mut perm = members.clone();
        perm.shuffle(&mut rng_for(seed, key));
        perm
    });
    let splits = ks
        .iter()
        .map(|&k| {
            let chosen = perms
                .iter()
                .flat_map(|p| p.iter().take(k))
                .map(|&i| train[i].clone())
                .collect();
            (k, chosen)
        })
        .collect();
    Ok(FewShotSplitSet {
        seed,
        ks: ks.to_vec(),
        splits,
    })
}

pub fn make_fewshot_splits(
    train: &[LabeledExample],
    ks: &[usize],
    seed: u64,
) -> Result<FewShotSplitSet> {
    make_fewshot_splits_with(train, ks, seed, Exec::default())
}

/// One independent split set per seed.
pub fn resample_splits(
    train: &[LabeledExample],
    ks: &[usize],
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<FewShotSplitSet>> {
    exec.try_map(seeds, |&s| {
        make_fewshot_splits_with(train, ks, s, Exec::Sequential)
    })
}

/// `<root>/<seed>/k<k>.jsonl`
pub fn split_path(root: &Path, seed: u64, k: usize) -> PathBuf {
    root.join(seed.to_string()).join(format!("k{k}.jsonl"))
}

/// Write every split of a set under `root`; returns the written paths.
pub fn write_split_set(set: &FewShotSplitSet, root: &Path) -> Result<Vec<PathBuf>> {
    let dir = root.join(set.seed.to_string());
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    set.splits
        .iter()
        .map(|(&k, examples)| {
            let p = split_path(root, set.seed, k);
            write_corpus(examples, &p)?;
            Ok(p)
        })
        .collect()
}

pub fn read_split(root: &Path, seed: u64, k: usize) -> Result<Vec<LabeledExample>> {
    read_corpus(&split_path(root, seed, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Quality;
    use std::collections::{BTreeSet, HashMap};

    fn corpus(sizes: &[usize]) -> Vec<LabeledExample> {
        let mut out = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                out.push(LabeledExample::labeled(
                    format!("c{c}-{i}"),
                    format!("utt {c} {i}"),
                    vec![format!("Intent{c}")],
                    Quality::Gold,
                    "t",
                ));
            }
        }
        out
    }

    fn per_class(examples: &[LabeledExample]) -> HashMap<String, usize> {
        let mut m = HashMap::new();
        for e in examples {
            *m.entry(e.class_key()).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn class_sizes_clamp() {
        let set = make_fewshot_splits(&corpus(&[5, 2, 1]), &[4], 0).unwrap();
        let counts = per_class(&set.splits[&4]);
        assert_eq!(counts["Intent0"], 4);
        assert_eq!(counts["Intent1"], 2);
        assert_eq!(counts["Intent2"], 1);
        assert_eq!(set.splits[&4].len(), 7);
    }

    #[test]
    fn saturated_k_is_permutation_of_train() {
        let train = corpus(&[5, 2, 1]);
        let set = make_fewshot_splits(&train, &[1, 5], 3).unwrap();
        let got: BTreeSet<&str> = set.splits[&5].iter().map(|e| e.id.as_str()).collect();
        let all: BTreeSet<&str> = train.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(got, all);
        assert_eq!(set.splits[&5].len(), train.len());
    }

    #[test]
    fn nested_and_deterministic() {
        let train = corpus(&[40, 3, 17, 1]);
        let a = make_fewshot_splits(&train, &DEFAULT_KS, 11).unwrap();
        let b = make_fewshot_splits_with(&train, &DEFAULT_KS, 11, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        for w in DEFAULT_KS.windows(2) {
            let small: BTreeSet<&str> = a.splits[&w[0]].iter().map(|e| e.id.as_str()).collect();
            let big: BTreeSet<&str> = a.splits[&w[1]].iter().map(|e| e.id.as_str()).collect();
            assert!(small.is_subset(&big));
        }
    }

    #[test]
    fn multi_intent_combination_is_its_own_class() {
        let mut train = corpus(&[3]);
        train.push(LabeledExample::labeled(
            "m",
            "fares",
            vec!["Intent0".into(), "Airfare".into()],
            Quality::Gold,
            "t",
        ));
        let set = make_fewshot_splits(&train, &[1], 0).unwrap();
        assert_eq!(set.splits[&1].len(), 2);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            make_fewshot_splits(&[], &[1], 0),
            Err(Error::Empty(_))
        ));
        assert!(make_fewshot_splits(&corpus(&[2]), &[2, 1], 0).is_err());
        assert!(make_fewshot_splits(&corpus(&[2]), &[0, 1], 0).is_err());
        let mut train = corpus(&[2]);
        train.push(LabeledExample::unlabeled("u", "hey", "t"));
        assert!(matches!(
            make_fewshot_splits(&train, &[1], 0),
            Err(Error::Unlabeled { .. })
        ));
    }

    #[test]
    fn resample_one_set_per_seed() {
        let train = corpus(&[10; 10]);
        let sets = resample_splits(&train, &[1], &[1, 2, 3, 4, 5], Exec::default()).unwrap();
        assert_eq!(sets.len(), 5);
        let again = resample_splits(&train, &[1], &[1, 2, 3, 4, 5], Exec::Sequential).unwrap();
        assert_eq!(sets, again);
        assert_eq!(
            sets.iter().map(|s| s.seed).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5]
        );
    }

    #[test]
    fn split_files_layout() {
        let dir = tempfile::tempdir().unwrap();
        let set = make_fewshot_splits(&corpus(&[6, 6]), &DEFAULT_KS, 7).unwrap();
        let paths = write_split_set(&set, dir.path()).unwrap();
        assert_eq!(paths.len(), 6);
        assert!(dir.path().join("7").join("k32.jsonl").exists());
        assert_eq!(read_split(dir.path(), 7, 2).unwrap(), set.splits[&2]);
    }
}
