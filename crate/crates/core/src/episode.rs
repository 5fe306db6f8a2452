//! Episodic task definitions: N-way K-shot specs, meta-splits, and the episode sampler.
//!
//! An [`Episode`] holds `N·K` support and `N·T` query references drawn from `N`
//! distinct classes. Labels `0..N` are assigned in the order the classes were
//! drawn. Support entries are stored label-major (all of label 0, then label 1, ...)
//! and so are query entries.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub t_query: usize,
}

impl TaskSpec {
    pub fn new(n_way: usize, k_shot: usize, t_query: usize) -> Result<Self> {
        let spec = Self {
            n_way,
            k_shot,
            t_query,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::InvalidTaskSpec(format!("n_way must be >= 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 {
            return Err(Error::InvalidTaskSpec("k_shot must be >= 1".into()));
        }
        if self.t_query < 1 {
            return Err(Error::InvalidTaskSpec("t_query must be >= 1".into()));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.k_shot + self.t_query
    }

    pub fn support_len(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn query_len(&self) -> usize {
        self.n_way * self.t_query
    }
}

impl std::fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-way {}-shot ({} queries/class)", self.n_way, self.k_shot, self.t_query)
    }
}

/// Reference to one sample in a dataset's record table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId(pub u32);

/// Samples grouped by class identifier.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassIndex {
    classes: BTreeMap<String, Vec<SampleId>>,
}

impl ClassIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a sample; returns `false` if it was already present in that class.
    pub fn insert(&mut self, class: &str, sample: SampleId) -> bool {
        let list = self.classes.entry(class.to_string()).or_default();
        if list.contains(&sample) {
            return false;
        }
        list.push(sample);
        true
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn samples(&self, class: &str) -> Option<&[SampleId]> {
        self.classes.get(class).map(Vec::as_slice)
    }

    pub fn contains(&self, class: &str) -> bool {
        self.classes.contains_key(class)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_samples(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    /// Every sample of every class, in class order.
    pub fn all_samples(&self) -> Vec<SampleId> {
        self.classes.values().flatten().copied().collect()
    }

    /// The sub-index containing only `classes`.
    pub fn restrict<'a>(&self, classes: impl IntoIterator<Item = &'a String>) -> Self {
        let classes = classes
            .into_iter()
            .filter_map(|c| self.classes.get(c).map(|s| (c.clone(), s.clone())))
            .collect();
        Self { classes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Class identifiers assigned to meta-train, meta-validation, and meta-test.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitManifest {
    pub fn classes(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn classes_mut(&mut self, split: Split) -> &mut BTreeSet<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// A manifest checked against an index, with one sub-index per split.
#[derive(Debug, Clone)]
pub struct ValidatedSplit {
    pub manifest: SplitManifest,
    pub counts: SplitCounts,
    train: ClassIndex,
    val: ClassIndex,
    test: ClassIndex,
}

impl ValidatedSplit {
    pub fn index(&self, split: Split) -> &ClassIndex {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Checks that the three class sets are pairwise disjoint, non-empty, and present in `index`.
pub fn validate_split(manifest: &SplitManifest, index: &ClassIndex) -> Result<ValidatedSplit> {
    let mut overlap = BTreeSet::new();
    for (a, b) in [(Split::Train, Split::Val), (Split::Train, Split::Test), (Split::Val, Split::Test)] {
        overlap.extend(manifest.classes(a).intersection(manifest.classes(b)).cloned());
    }
    if !overlap.is_empty() {
        return Err(Error::Overlap {
            classes: overlap.into_iter().collect(),
        });
    }
    for split in Split::ALL {
        let classes = manifest.classes(split);
        if classes.is_empty() {
            return Err(Error::EmptySplit {
                split: split.name().into(),
            });
        }
        if let Some(missing) = classes.iter().find(|c| !index.contains(c)) {
            return Err(Error::MissingClass {
                class: missing.clone(),
            });
        }
    }
    Ok(ValidatedSplit {
        counts: SplitCounts {
            train: manifest.train.len(),
            val: manifest.val.len(),
            test: manifest.test.len(),
        },
        train: index.restrict(&manifest.train),
        val: index.restrict(&manifest.val),
        test: index.restrict(&manifest.test),
        manifest: manifest.clone(),
    })
}

/// One N-way K-shot task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub spec: TaskSpec,
    /// `(sample, label)`, label-major, `K` entries per label.
    pub support: Vec<(SampleId, usize)>,
    /// `(sample, label)`, label-major, `T` entries per label.
    pub query: Vec<(SampleId, usize)>,
    /// `class_map[label]` is the original class identifier.
    pub class_map: Vec<String>,
}

impl Episode {
    pub fn support_ids(&self) -> Vec<SampleId> {
        self.support.iter().map(|&(s, _)| s).collect()
    }

    pub fn query_ids(&self) -> Vec<SampleId> {
        self.query.iter().map(|&(s, _)| s).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, l)| l).collect()
    }

    /// Returns a description of the first violated episode invariant, if any.
    pub fn check_invariants(&self, index: &ClassIndex) -> Option<String> {
        let TaskSpec { n_way, k_shot, t_query } = self.spec;
        if self.support.len() != n_way * k_shot {
            return Some(format!("support has {} entries", self.support.len()));
        }
        if self.query.len() != n_way * t_query {
            return Some(format!("query has {} entries", self.query.len()));
        }
        if self.class_map.len() != n_way {
            return Some("class_map length differs from n_way".into());
        }
        let distinct: BTreeSet<&String> = self.class_map.iter().collect();
        if distinct.len() != n_way {
            return Some("class_map repeats a class".into());
        }
        for (set, per) in [(&self.support, k_shot), (&self.query, t_query)] {
            let mut counts = vec![0usize; n_way];
            for &(s, l) in set.iter() {
                if l >= n_way {
                    return Some(format!("label {l} out of range"));
                }
                counts[l] += 1;
                let owned = index
                    .samples(&self.class_map[l])
                    .is_some_and(|list| list.contains(&s));
                if !owned {
                    return Some(format!("sample {s:?} does not belong to {}", self.class_map[l]));
                }
            }
            if counts.iter().any(|&c| c != per) {
                return Some(format!("per-label counts {counts:?}, expected {per}"));
            }
        }
        let support: BTreeSet<SampleId> = self.support.iter().map(|&(s, _)| s).collect();
        if support.len() != self.support.len() {
            return Some("support repeats a sample".into());
        }
        let query: BTreeSet<SampleId> = self.query.iter().map(|&(s, _)| s).collect();
        if query.len() != self.query.len() {
            return Some("query repeats a sample".into());
        }
        if support.intersection(&query).next().is_some() {
            return Some("support and query intersect".into());
        }
        None
    }
}

/// Draws an episode: `N` classes uniformly without replacement, then `K + T`
/// samples per class uniformly without replacement (the first `K` form the support).
pub fn sample_episode<R: Rng + ?Sized>(index: &ClassIndex, spec: TaskSpec, rng: &mut R) -> Result<Episode> {
    spec.validate()?;
    let classes: Vec<&str> = index.class_names().collect();
    if classes.len() < spec.n_way {
        return Err(Error::InsufficientClasses {
            needed: spec.n_way,
            available: classes.len(),
        });
    }
    let needed = spec.per_class();
    for &c in &classes {
        let available = index.samples(c).map_or(0, <[_]>::len);
        if available < needed {
            return Err(Error::InsufficientSamples {
                class: c.to_string(),
                needed,
                available,
            });
        }
    }

    let mut support = Vec::with_capacity(spec.support_len());
    let mut query = Vec::with_capacity(spec.query_len());
    let mut class_map = Vec::with_capacity(spec.n_way);
    for (label, ci) in index::sample(rng, classes.len(), spec.n_way).into_iter().enumerate() {
        let class = classes[ci];
        let samples = index.samples(class).expect("listed class");
        let picks = index::sample(rng, samples.len(), needed).into_vec();
        support.extend(picks[..spec.k_shot].iter().map(|&i| (samples[i], label)));
        query.extend(picks[spec.k_shot..].iter().map(|&i| (samples[i], label)));
        class_map.push(class.to_string());
    }
    Ok(Episode {
        spec,
        support,
        query,
        class_map,
    })
}

/// Derives an independent 64-bit seed for a stream identified by `path`.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn index(classes: usize, per: usize) -> ClassIndex {
        let mut idx = ClassIndex::new();
        for c in 0..classes {
            for s in 0..per {
                idx.insert(&format!("c{c}"), SampleId((c * per + s) as u32));
            }
        }
        idx
    }

    fn manifest(train: &[&str], val: &[&str], test: &[&str]) -> SplitManifest {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        SplitManifest {
            train: set(train),
            val: set(val),
            test: set(test),
        }
    }

    #[test]
    fn overlap_names_the_class() {
        let idx = index(3, 2);
        let m = manifest(&["c0", "c1"], &["c2"], &["c1"]);
        match validate_split(&m, &idx) {
            Err(Error::Overlap { classes }) => assert_eq!(classes, vec!["c1".to_string()]),
            other => panic!("expected overlap, got {other:?}"),
        }
    }

    #[test]
    fn missing_class_is_reported() {
        let idx = index(2, 2);
        let m = manifest(&["c0"], &["c1"], &["c9"]);
        assert!(matches!(validate_split(&m, &idx), Err(Error::MissingClass { class }) if class == "c9"));
    }

    #[test]
    fn five_way_five_shot_sizes() {
        let idx = index(10, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&idx, TaskSpec::new(5, 5, 15).unwrap(), &mut rng).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 75);
        assert_eq!(ep.check_invariants(&idx), None);
    }

    #[test]
    fn exhaustive_two_way_one_shot_partition() {
        // 2 classes of 2 samples: each class contributes both samples, one per side.
        let idx = index(2, 2);
        let spec = TaskSpec::new(2, 1, 1).unwrap();
        for seed in 0..50 {
            let ep = sample_episode(&idx, spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(ep.check_invariants(&idx), None);
            let mut all: Vec<u32> = ep.support.iter().chain(&ep.query).map(|(s, _)| s.0).collect();
            all.sort();
            assert_eq!(all, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn shortfall_is_named() {
        let mut idx = index(5, 20);
        idx.insert("small", SampleId(999));
        let err = sample_episode(&idx, TaskSpec::new(5, 5, 15).unwrap(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        match err {
            Error::InsufficientSamples { class, needed, available } => {
                assert_eq!((class.as_str(), needed, available), ("small", 20, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = sample_episode(&index(3, 20), TaskSpec::new(5, 1, 1).unwrap(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, Error::InsufficientClasses { needed: 5, available: 3 }));
    }

    #[test]
    fn task_spec_rejects_degenerate_values() {
        assert!(TaskSpec::new(1, 1, 1).is_err());
        assert!(TaskSpec::new(2, 0, 1).is_err());
        assert!(TaskSpec::new(2, 1, 0).is_err());
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(7, &[0]), derive_seed(7, &[1]));
        assert_ne!(derive_seed(7, &[1, 0]), derive_seed(7, &[0, 1]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }
}
