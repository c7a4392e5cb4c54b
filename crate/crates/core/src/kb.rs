//! Canonical triplet store.
//!
//! A [`KnowledgeBase`] holds at most one object per `(subject, relation)` key,
//! with membership and join indexes kept consistent with the triplet list. It
//! is immutable once built, so shared read access needs no locking.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// One `(subject, relation, object)` fact.
///
/// Fields are stored trimmed; construction rejects empty fields and the
/// characters reserved by the TSV interchange format (tab, CR, LF).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    subject: String,
    relation: String,
    object: String,
}

fn check_field(name: &str, value: &str) -> Result<String> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Err(Error::InvalidTriplet(format!("empty {name}")));
    }
    if trimmed.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidTriplet(format!(
            "{name} {trimmed:?} contains a reserved tab/newline character"
        )));
    }
    Ok(trimmed.to_string())
}

impl Triplet {
    pub fn new(subject: &str, relation: &str, object: &str) -> Result<Self> {
        Ok(Triplet {
            subject: check_field("subject", subject)?,
            relation: check_field("relation", relation)?,
            object: check_field("object", object)?,
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn object(&self) -> &str {
        &self.object
    }

    /// `subject<TAB>relation<TAB>object`, without a line terminator.
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}", self.subject, self.relation, self.object)
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

/// Writes triplets as TSV, one per line.
pub fn write_triplets_tsv<'a, W: Write>(
    mut out: W,
    triplets: impl IntoIterator<Item = &'a Triplet>,
) -> std::io::Result<()> {
    for t in triplets {
        writeln!(out, "{}", t.to_tsv())?;
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
struct Indexes {
    key_index: HashMap<(String, String), usize>,
    object_index: HashMap<String, Vec<usize>>,
    relation_index: HashMap<String, Vec<usize>>,
    triplet_set: HashSet<Triplet>,
}

impl Indexes {
    fn build(triplets: &[Triplet]) -> Self {
        let mut idx = Indexes::default();
        for (pos, t) in triplets.iter().enumerate() {
            idx.key_index
                .insert((t.subject.clone(), t.relation.clone()), pos);
            idx.object_index
                .entry(t.object.clone())
                .or_default()
                .push(pos);
            idx.relation_index
                .entry(t.relation.clone())
                .or_default()
                .push(pos);
            idx.triplet_set.insert(t.clone());
        }
        idx
    }
}

/// Deduplicated triplet store.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    triplets: Vec<Triplet>,
    indexes: Indexes,
}

impl KnowledgeBase {
    /// Builds a KB keeping one object per `(subject, relation)` key.
    ///
    /// Keys keep the position of their first appearance. When a key has
    /// several distinct objects, one is drawn uniformly with the seeded RNG;
    /// keys are visited in first-appearance order and the RNG is consulted
    /// only for keys with more than one candidate.
    pub fn build(raw: Vec<Triplet>, seed: u64) -> Self {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut candidates: HashMap<(String, String), Vec<String>> = HashMap::new();
        for t in raw {
            let key = (t.subject, t.relation);
            match candidates.get_mut(&key) {
                Some(objs) => {
                    if !objs.contains(&t.object) {
                        objs.push(t.object);
                    }
                }
                None => {
                    order.push(key.clone());
                    candidates.insert(key, vec![t.object]);
                }
            }
        }

        let mut rng = rng_from_seed(seed);
        let mut triplets = Vec::with_capacity(order.len());
        for key in order {
            let mut objs = candidates.remove(&key).expect("key recorded in order");
            let pick = if objs.len() > 1 {
                rng.random_range(0..objs.len())
            } else {
                0
            };
            let object = objs.swap_remove(pick);
            triplets.push(Triplet {
                subject: key.0,
                relation: key.1,
                object,
            });
        }
        Self::from_unique(triplets)
    }

    fn from_unique(triplets: Vec<Triplet>) -> Self {
        let indexes = Indexes::build(&triplets);
        KnowledgeBase { triplets, indexes }
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn contains_key(&self, subject: &str, relation: &str) -> bool {
        self.indexes
            .key_index
            .contains_key(&(subject.to_string(), relation.to_string()))
    }

    pub fn object_of(&self, subject: &str, relation: &str) -> Option<&str> {
        self.indexes
            .key_index
            .get(&(subject.to_string(), relation.to_string()))
            .map(|&pos| self.triplets[pos].object())
    }

    pub fn contains_triplet(&self, t: &Triplet) -> bool {
        self.indexes.triplet_set.contains(t)
    }

    pub fn contains(&self, subject: &str, relation: &str, object: &str) -> bool {
        self.object_of(subject, relation) == Some(object)
    }

    /// Positions of triplets whose object is `object`, in KB order.
    pub fn positions_with_object(&self, object: &str) -> &[usize] {
        self.indexes
            .object_index
            .get(object)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Positions of triplets carrying `relation`, in KB order.
    pub fn positions_with_relation(&self, relation: &str) -> &[usize] {
        self.indexes
            .relation_index
            .get(relation)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// All `(A, B, C)` with `(A, r1, B)` and `(B, r2, C)` in the KB, ordered by
    /// the position of the `(A, r1, B)` triplet.
    pub fn join_on_bridge(&self, r1: &str, r2: &str) -> Vec<(String, String, String)> {
        self.positions_with_relation(r1)
            .iter()
            .filter_map(|&pos| {
                let first = &self.triplets[pos];
                self.object_of(first.object(), r2).map(|c| {
                    (
                        first.subject.clone(),
                        first.object.clone(),
                        c.to_string(),
                    )
                })
            })
            .collect()
    }

    /// Rebuilds every index from the triplet list and compares.
    pub fn indexes_consistent(&self) -> bool {
        Indexes::build(&self.triplets) == self.indexes
            && self.indexes.key_index.len() == self.triplets.len()
    }

    pub fn occurrence_counts(&self) -> OccurrenceIndex {
        OccurrenceIndex::from_triplets(&self.triplets)
    }
}

/// Entity and relation occurrence tallies. An entity counts once per
/// appearance as subject and once per appearance as object.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OccurrenceIndex {
    pub entity_counts: HashMap<String, u64>,
    pub relation_counts: HashMap<String, u64>,
}

impl OccurrenceIndex {
    pub fn from_triplets(triplets: &[Triplet]) -> Self {
        let mut idx = OccurrenceIndex::default();
        for t in triplets {
            *idx.entity_counts.entry(t.subject.clone()).or_default() += 1;
            *idx.entity_counts.entry(t.object.clone()).or_default() += 1;
            *idx.relation_counts.entry(t.relation.clone()).or_default() += 1;
        }
        idx
    }

    pub fn counts(&self, axis: Axis) -> &HashMap<String, u64> {
        match axis {
            Axis::Entity => &self.entity_counts,
            Axis::Relation => &self.relation_counts,
        }
    }

    /// `(name, count)` sorted by count descending, then name ascending.
    pub fn ranked(&self, axis: Axis) -> Vec<(&str, u64)> {
        let mut rows: Vec<(&str, u64)> = self
            .counts(axis)
            .iter()
            .map(|(k, &v)| (k.as_str(), v))
            .collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        rows
    }

    /// Stats export: `name<TAB>count`, count descending then name.
    pub fn write_tsv<W: Write>(&self, mut out: W, axis: Axis) -> std::io::Result<()> {
        for (name, count) in self.ranked(axis) {
            writeln!(out, "{name}\t{count}")?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Entity,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSpec {
    pub axis: Axis,
    /// `true` selects the least frequent items, `false` the most frequent.
    pub tail: bool,
    pub percentile: f64,
    pub sample_size: usize,
}

impl StratumSpec {
    pub fn popular(axis: Axis, sample_size: usize) -> Self {
        StratumSpec {
            axis,
            tail: false,
            percentile: 0.05,
            sample_size,
        }
    }

    pub fn long_tail(axis: Axis, sample_size: usize) -> Self {
        StratumSpec {
            axis,
            tail: true,
            percentile: 0.15,
            sample_size,
        }
    }

    /// Conventional dataset name, e.g. `PopEnt` or `TailRel`.
    pub fn name(&self) -> String {
        let side = if self.tail { "Tail" } else { "Pop" };
        let axis = match self.axis {
            Axis::Entity => "Ent",
            Axis::Relation => "Rel",
        };
        format!("{side}{axis}")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(Error::Config(format!(
                "stratum percentile {} outside (0, 1]",
                self.percentile
            )));
        }
        Ok(())
    }

    /// Number of items in the qualifying set: `ceil(percentile * n_items)`.
    /// The product is computed in floating point, so a slack of 1e-9 keeps
    /// exact multiples like `0.15 * 20` from rounding up.
    pub fn cut(&self, n_items: usize) -> usize {
        let x = self.percentile * n_items as f64;
        ((x - 1e-9).ceil().max(0.0) as usize).min(n_items)
    }
}

/// Named list of triplets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub name: String,
    pub triplets: Vec<Triplet>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, triplets: Vec<Triplet>) -> Self {
        Dataset {
            name: name.into(),
            triplets,
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Uniform sample of `min(k, len)` triplets without replacement, kept in
    /// dataset order.
    pub fn sample(&self, name: impl Into<String>, k: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let k = k.min(self.len());
        let mut picks = index::sample(&mut rng, self.len(), k).into_vec();
        picks.sort_unstable();
        Dataset::new(
            name,
            picks.into_iter().map(|i| self.triplets[i].clone()).collect(),
        )
    }
}

/// Result of [`stratify`].
#[derive(Debug, Clone)]
pub struct Stratum {
    pub dataset: Dataset,
    /// Number of KB triplets touching the qualifying set.
    pub available: usize,
    /// Qualifying names in rank order.
    pub qualifying: Vec<String>,
}

impl Stratum {
    pub fn under_supplied(&self, spec: &StratumSpec) -> bool {
        self.available < spec.sample_size
    }
}

/// Names making up the qualifying set of `spec`, in rank order.
pub fn qualifying_set(index: &OccurrenceIndex, spec: &StratumSpec) -> Vec<String> {
    let mut rows: Vec<(&String, u64)> = index
        .counts(spec.axis)
        .iter()
        .map(|(k, &v)| (k, v))
        .collect();
    rows.sort_by(|a, b| {
        let by_count = if spec.tail { a.1.cmp(&b.1) } else { b.1.cmp(&a.1) };
        by_count.then_with(|| a.0.cmp(b.0))
    });
    let cut = spec.cut(rows.len());
    rows.into_iter()
        .take(cut)
        .map(|(name, _)| name.clone())
        .collect()
}

/// Samples a popular or long-tail dataset from `kb`.
pub fn stratify(
    kb: &KnowledgeBase,
    index: &OccurrenceIndex,
    spec: &StratumSpec,
    seed: u64,
) -> Result<Stratum> {
    spec.validate()?;
    let qualifying = qualifying_set(index, spec);
    let members: HashSet<&str> = qualifying.iter().map(String::as_str).collect();
    let candidates: Vec<&Triplet> = kb
        .triplets()
        .iter()
        .filter(|t| match spec.axis {
            Axis::Entity => members.contains(t.subject()) || members.contains(t.object()),
            Axis::Relation => members.contains(t.relation()),
        })
        .collect();
    let available = candidates.len();
    let k = spec.sample_size.min(available);
    let mut rng = rng_from_seed(seed);
    let mut picks = index::sample(&mut rng, available, k).into_vec();
    picks.sort_unstable();
    let triplets = picks.into_iter().map(|i| candidates[i].clone()).collect();
    Ok(Stratum {
        dataset: Dataset::new(spec.name(), triplets),
        available,
        qualifying,
    })
}
