//! Reasoning probes: inverse pairs, two-hop compositions, and external
//! missing-fact lists.
//!
//! An inverse rule `r ⇔ r′` turns a stored `(A, r, B)` whose inverse
//! `(B, r′, A)` is absent from the KB into a forward query `(A, r) → B` and an
//! inverse query `(B, r′) → A`. A composition rule `r1 ∧ r2 ⇒ r3` turns stored
//! `(A, r1, B)` and `(B, r2, C)` with `A ≠ C` and `(A, r3, C)` absent into two
//! condition queries and a conclusion query `(A, r3) → C`.
//!
//! Items carry provenance ids of the form `kind#index` (or `kb#position` for a
//! source triplet): an inverse query points at its forward twin, a conclusion
//! at every condition of every bridge entity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_items, EvalItem, EvalMode, EvalReport};
use crate::ingest::LogEntry;
use crate::kb::KnowledgeBase;
use crate::memorizer::{format_prompt, question_for, Parameters, TemplateTable, Vocab};
use crate::seed::{derive_seed, rng_from_seed};

pub const DEFAULT_PER_RULE: usize = 150;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InverseRule {
    pub r: String,
    pub r_inv: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CompositionRule {
    pub r1: String,
    pub r2: String,
    pub r3: String,
}

fn check_relation(r: &str) -> Result<String> {
    let r = r.trim();
    if r.is_empty() || r.contains('\t') {
        return Err(Error::Config(format!("invalid rule relation {r:?}")));
    }
    Ok(r.to_string())
}

fn alias_of(alias: &BTreeMap<String, String>, r: &str) -> String {
    alias.get(r).cloned().unwrap_or_else(|| r.to_string())
}

impl InverseRule {
    pub fn new(r: &str, r_inv: &str) -> Result<Self> {
        Ok(InverseRule {
            r: check_relation(r)?,
            r_inv: check_relation(r_inv)?,
        })
    }

    pub fn id(&self) -> String {
        format!("{} -> {}", self.r, self.r_inv)
    }

    pub fn aliased(&self, alias: &BTreeMap<String, String>) -> Self {
        InverseRule {
            r: alias_of(alias, &self.r),
            r_inv: alias_of(alias, &self.r_inv),
        }
    }
}

impl CompositionRule {
    pub fn new(r1: &str, r2: &str, r3: &str) -> Result<Self> {
        Ok(CompositionRule {
            r1: check_relation(r1)?,
            r2: check_relation(r2)?,
            r3: check_relation(r3)?,
        })
    }

    pub fn id(&self) -> String {
        format!("{} + {} -> {}", self.r1, self.r2, self.r3)
    }

    pub fn aliased(&self, alias: &BTreeMap<String, String>) -> Self {
        CompositionRule {
            r1: alias_of(alias, &self.r1),
            r2: alias_of(alias, &self.r2),
            r3: alias_of(alias, &self.r3),
        }
    }
}

const BUILTIN_INVERSE: &[(&str, &str)] = &[
    ("sibling", "sibling"),
    ("shares border with", "shares border with"),
    ("father", "child"),
    ("mother", "child"),
    ("capital", "capital of"),
    ("part of", "has part"),
    ("country", "contains"),
];

const BUILTIN_COMPOSITION: &[(&str, &str, &str)] = &[
    ("place of birth", "country", "country of birth"),
    ("place of burial", "country", "country of burial"),
    ("place of publication", "country", "country of publication"),
    ("place of death", "country", "country of death"),
    ("performer", "languages spoken, written or signed", "language of work or name"),
    ("author", "languages spoken, written or signed", "language of work or name"),
    ("father", "father", "grandfather"),
    ("mother", "mother", "grandmother"),
];

pub fn builtin_inverse_rules() -> Vec<InverseRule> {
    BUILTIN_INVERSE
        .iter()
        .map(|(r, i)| InverseRule::new(r, i).expect("builtin rule"))
        .collect()
}

pub fn builtin_composition_rules() -> Vec<CompositionRule> {
    BUILTIN_COMPOSITION
        .iter()
        .map(|(a, b, c)| CompositionRule::new(a, b, c).expect("builtin rule"))
        .collect()
}

fn data_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader.lines().enumerate().filter_map(|(i, l)| match l {
        Err(e) => Some(Err(e.into())),
        Ok(l) if l.trim().is_empty() || l.starts_with('#') => None,
        Ok(l) => Some(Ok((i + 1, l))),
    })
}

fn rule_fields(line: &str, n: usize, lineno: usize) -> Result<Vec<&str>> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != n {
        return Err(Error::Config(format!(
            "rule line {lineno}: expected {n} tab-separated fields, found {}",
            f.len()
        )));
    }
    Ok(f)
}

/// `r<TAB>r_inv` per line; `#` comments and blank lines are ignored.
pub fn read_inverse_rules<R: BufRead>(reader: R) -> Result<Vec<InverseRule>> {
    data_lines(reader)
        .map(|l| {
            let (n, line) = l?;
            let f = rule_fields(&line, 2, n)?;
            InverseRule::new(f[0], f[1])
        })
        .collect()
}

/// `r1<TAB>r2<TAB>r3` per line.
pub fn read_composition_rules<R: BufRead>(reader: R) -> Result<Vec<CompositionRule>> {
    data_lines(reader)
        .map(|l| {
            let (n, line) = l?;
            let f = rule_fields(&line, 3, n)?;
            CompositionRule::new(f[0], f[1], f[2])
        })
        .collect()
}

pub fn write_inverse_rules<W: Write>(mut out: W, rules: &[InverseRule]) -> std::io::Result<()> {
    for r in rules {
        writeln!(out, "{}\t{}", r.r, r.r_inv)?;
    }
    out.flush()
}

pub fn write_composition_rules<W: Write>(mut out: W, rules: &[CompositionRule]) -> std::io::Result<()> {
    for r in rules {
        writeln!(out, "{}\t{}\t{}", r.r1, r.r2, r.r3)?;
    }
    out.flush()
}

/// `name<TAB>kb relation` per line.
pub fn read_alias_map<R: BufRead>(reader: R) -> Result<BTreeMap<String, String>> {
    data_lines(reader)
        .map(|l| {
            let (n, line) = l?;
            let f = rule_fields(&line, 2, n)?;
            Ok((check_relation(f[0])?, check_relation(f[1])?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    InverseForward,
    InverseQuery,
    CompConditions,
    CompConclusion,
    MissingFact,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 5] = [
        ProbeKind::InverseForward,
        ProbeKind::InverseQuery,
        ProbeKind::CompConditions,
        ProbeKind::CompConclusion,
        ProbeKind::MissingFact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::InverseForward => "inverse_forward",
            ProbeKind::InverseQuery => "inverse_query",
            ProbeKind::CompConditions => "comp_conditions",
            ProbeKind::CompConclusion => "comp_conclusion",
            ProbeKind::MissingFact => "missing_fact",
        }
    }

    /// Whether the queried triplets must be stored in the KB (true) or absent
    /// from it (false). Missing facts are checked by neither.
    pub fn expects_membership(self) -> Option<bool> {
        match self {
            ProbeKind::InverseForward | ProbeKind::CompConditions => Some(true),
            ProbeKind::InverseQuery | ProbeKind::CompConclusion => Some(false),
            ProbeKind::MissingFact => None,
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown probe kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeItem {
    pub rule_id: String,
    pub subject: String,
    pub relation: String,
    pub golds: Vec<String>,
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSet {
    pub kind: ProbeKind,
    pub items: Vec<ProbeItem>,
}

pub fn item_id(kind: ProbeKind, index: usize) -> String {
    format!("{}#{index}", kind.name())
}

pub fn kb_id(position: usize) -> String {
    format!("kb#{position}")
}

impl ProbeSet {
    pub fn new(kind: ProbeKind) -> Self {
        ProbeSet { kind, items: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, index: usize) -> String {
        item_id(self.kind, index)
    }

    /// `kind<TAB>rule_id<TAB>subject<TAB>relation<TAB>gold1|gold2…<TAB>prov1,prov2…`
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for it in &self.items {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                self.kind,
                it.rule_id,
                it.subject,
                it.relation,
                it.golds.join("|"),
                it.provenance.join(",")
            )?;
        }
        out.flush()
    }

    /// Reads probe lines, grouping them by kind in first-appearance order.
    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Vec<ProbeSet>> {
        let mut sets: Vec<ProbeSet> = Vec::new();
        for l in data_lines(reader) {
            let (n, line) = l?;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Config(format!(
                    "probe line {n}: expected 6 tab-separated fields, found {}",
                    f.len()
                )));
            }
            let kind: ProbeKind = f[0].parse()?;
            let golds = split_golds(f[4]);
            if golds.is_empty() {
                return Err(Error::Config(format!("probe line {n}: empty gold list")));
            }
            let item = ProbeItem {
                rule_id: f[1].to_string(),
                subject: f[2].to_string(),
                relation: f[3].to_string(),
                golds,
                provenance: f[5].split(',').filter(|p| !p.is_empty()).map(str::to_string).collect(),
            };
            match sets.iter_mut().find(|s| s.kind == kind) {
                Some(s) => s.items.push(item),
                None => sets.push(ProbeSet { kind, items: vec![item] }),
            }
        }
        Ok(sets)
    }
}

fn split_golds(field: &str) -> Vec<String> {
    field
        .split('|')
        .map(str::trim)
        .filter(|g| !g.is_empty())
        .map(str::to_string)
        .collect()
}

/// Pool size versus items kept, per rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSupply {
    pub rule_id: String,
    pub pool: usize,
    pub sampled: usize,
    /// Sampled items dropped because an earlier rule already produced the
    /// same query triplet.
    pub duplicates: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbePair {
    pub first: ProbeSet,
    pub second: ProbeSet,
    pub supply: Vec<RuleSupply>,
}

/// KB positions of `(A, r, B)` whose inverse `(B, r′, A)` is not stored, in KB
/// order.
pub fn inverse_pool(kb: &KnowledgeBase, rule: &InverseRule) -> Vec<usize> {
    kb.positions_with_relation(&rule.r)
        .iter()
        .copied()
        .filter(|&p| {
            let t = &kb.triplets()[p];
            !kb.contains(t.object(), &rule.r_inv, t.subject())
        })
        .collect()
}

/// One candidate conclusion `(A, r3, C)` with every bridge entity `B`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conclusion {
    pub a: String,
    pub c: String,
    pub bridges: Vec<String>,
}

/// Joins `(A, r1, B)` with `(B, r2, C)`, keeps `A ≠ C` with `(A, r3, C)`
/// unstored, and merges bridges of the same `(A, C)`. Ordered by the first
/// joining `(A, r1, B)` in the KB.
pub fn composition_pool(kb: &KnowledgeBase, rule: &CompositionRule) -> Vec<Conclusion> {
    let mut out: Vec<Conclusion> = Vec::new();
    let mut at: HashMap<(String, String), usize> = HashMap::new();
    for (a, b, c) in kb.join_on_bridge(&rule.r1, &rule.r2) {
        if a == c || kb.contains(&a, &rule.r3, &c) {
            continue;
        }
        match at.get(&(a.clone(), c.clone())) {
            Some(&i) => {
                if !out[i].bridges.contains(&b) {
                    out[i].bridges.push(b);
                }
            }
            None => {
                at.insert((a.clone(), c.clone()), out.len());
                out.push(Conclusion { a, c, bridges: vec![b] });
            }
        }
    }
    out
}

/// Uniform choice of `min(k, n)` pool indices, returned in pool order.
fn choose(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    let mut picks = index::sample(&mut rng, n, k.min(n)).into_vec();
    picks.sort_unstable();
    picks
}

fn check_per_rule(per_rule: usize) -> Result<()> {
    if per_rule == 0 {
        return Err(Error::Config("per_rule must be at least 1".into()));
    }
    Ok(())
}

/// Forward (`first`) and inverse (`second`) sets, paired index by index.
/// Exact inverse query triplets are kept once across all rules.
pub fn gen_inverse(kb: &KnowledgeBase, rules: &[InverseRule], per_rule: usize, seed: u64) -> Result<ProbePair> {
    check_per_rule(per_rule)?;
    let mut forward = ProbeSet::new(ProbeKind::InverseForward);
    let mut inverse = ProbeSet::new(ProbeKind::InverseQuery);
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    let mut supply = Vec::with_capacity(rules.len());
    for (ri, rule) in rules.iter().enumerate() {
        let pool = inverse_pool(kb, rule);
        let picks = choose(pool.len(), per_rule, derive_seed(seed, &format!("inverse/{ri}")));
        let mut duplicates = 0;
        for &pi in &picks {
            let pos = pool[pi];
            let t = &kb.triplets()[pos];
            let query = (t.object().to_string(), rule.r_inv.clone(), t.subject().to_string());
            if !seen.insert(query) {
                duplicates += 1;
                continue;
            }
            let fid = forward.id(forward.len());
            forward.items.push(ProbeItem {
                rule_id: rule.id(),
                subject: t.subject().into(),
                relation: t.relation().into(),
                golds: vec![t.object().into()],
                provenance: vec![kb_id(pos)],
            });
            inverse.items.push(ProbeItem {
                rule_id: rule.id(),
                subject: t.object().into(),
                relation: rule.r_inv.clone(),
                golds: vec![t.subject().into()],
                provenance: vec![fid],
            });
        }
        supply.push(RuleSupply {
            rule_id: rule.id(),
            pool: pool.len(),
            sampled: picks.len() - duplicates,
            duplicates,
        });
    }
    Ok(ProbePair {
        first: forward,
        second: inverse,
        supply,
    })
}

/// Condition (`first`) and conclusion (`second`) sets. Condition queries are
/// stored once and shared; conclusions are kept once across rules.
pub fn gen_composition(
    kb: &KnowledgeBase,
    rules: &[CompositionRule],
    per_rule: usize,
    seed: u64,
) -> Result<ProbePair> {
    check_per_rule(per_rule)?;
    let mut conditions = ProbeSet::new(ProbeKind::CompConditions);
    let mut conclusions = ProbeSet::new(ProbeKind::CompConclusion);
    let mut condition_ids: HashMap<(String, String, String), String> = HashMap::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    let mut supply = Vec::with_capacity(rules.len());

    let mut condition = |conditions: &mut ProbeSet, rule_id: &str, s: &str, r: &str, o: &str| -> String {
        let key = (s.to_string(), r.to_string(), o.to_string());
        if let Some(id) = condition_ids.get(&key) {
            return id.clone();
        }
        let id = conditions.id(conditions.len());
        let pos = kb
            .positions_with_relation(r)
            .iter()
            .copied()
            .find(|&p| kb.triplets()[p].subject() == s)
            .expect("joined triplets are stored");
        conditions.items.push(ProbeItem {
            rule_id: rule_id.to_string(),
            subject: s.into(),
            relation: r.into(),
            golds: vec![o.into()],
            provenance: vec![kb_id(pos)],
        });
        condition_ids.insert(key, id.clone());
        id
    };

    for (ri, rule) in rules.iter().enumerate() {
        let pool = composition_pool(kb, rule);
        let picks = choose(pool.len(), per_rule, derive_seed(seed, &format!("composition/{ri}")));
        let rule_id = rule.id();
        let mut duplicates = 0;
        for &pi in &picks {
            let cand = &pool[pi];
            if !seen.insert((cand.a.clone(), rule.r3.clone(), cand.c.clone())) {
                duplicates += 1;
                continue;
            }
            let mut provenance = Vec::with_capacity(2 * cand.bridges.len());
            for b in &cand.bridges {
                provenance.push(condition(&mut conditions, &rule_id, &cand.a, &rule.r1, b));
                provenance.push(condition(&mut conditions, &rule_id, b, &rule.r2, &cand.c));
            }
            conclusions.items.push(ProbeItem {
                rule_id: rule_id.clone(),
                subject: cand.a.clone(),
                relation: rule.r3.clone(),
                golds: vec![cand.c.clone()],
                provenance,
            });
        }
        supply.push(RuleSupply {
            rule_id,
            pool: pool.len(),
            sampled: picks.len() - duplicates,
            duplicates,
        });
    }
    Ok(ProbePair {
        first: conditions,
        second: conclusions,
        supply,
    })
}

/// Items whose membership in `kb` contradicts their kind, as
/// `(index, reason)`.
pub fn membership_violations(kb: &KnowledgeBase, set: &ProbeSet) -> Vec<(usize, String)> {
    let Some(stored) = set.kind.expects_membership() else {
        return Vec::new();
    };
    set.items
        .iter()
        .enumerate()
        .filter_map(|(i, it)| {
            let present = it.golds.iter().any(|g| kb.contains(&it.subject, &it.relation, g));
            (present != stored).then(|| {
                (
                    i,
                    format!(
                        "({}, {}, {}) is {} the KB",
                        it.subject,
                        it.relation,
                        it.golds.join("|"),
                        if present { "in" } else { "missing from" }
                    ),
                )
            })
        })
        .collect()
}

/// Reads `subject<TAB>relation<TAB>gold1|gold2|…` lines. Lines with the wrong
/// field count or no gold candidate are skipped and logged.
pub fn load_missing_facts<R: BufRead>(reader: R) -> Result<(ProbeSet, Vec<LogEntry>)> {
    let mut set = ProbeSet::new(ProbeKind::MissingFact);
    let mut log = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let reason = if f.len() != 3 {
            Some(format!("field count {}", f.len()))
        } else if f[0].trim().is_empty() || f[1].trim().is_empty() {
            Some("empty subject or relation".to_string())
        } else if split_golds(f[2]).is_empty() {
            Some("empty gold list".to_string())
        } else {
            None
        };
        if let Some(reason) = reason {
            log::warn!("missing-facts line {}: {reason}", i + 1);
            log.push(LogEntry { line: i + 1, reason });
            continue;
        }
        set.items.push(ProbeItem {
            rule_id: "missing".into(),
            subject: f[0].trim().into(),
            relation: f[1].trim().into(),
            golds: split_golds(f[2]),
            provenance: Vec::new(),
        });
    }
    Ok((set, log))
}

/// Query items for a probe set, grouped by rule id.
pub fn probe_items(set: &ProbeSet, mode: EvalMode, templates: Option<&TemplateTable>) -> Result<Vec<EvalItem>> {
    if mode == EvalMode::Question {
        let table = templates.ok_or_else(|| Error::Config("question mode needs a template table".into()))?;
        let missing = table.missing(set.items.iter().map(|i| i.relation.as_str()));
        if !missing.is_empty() {
            return Err(Error::MissingTemplate(missing));
        }
    }
    set.items
        .iter()
        .map(|it| {
            let prompt = match mode {
                EvalMode::Triplet => format_prompt(&it.subject, &it.relation),
                EvalMode::Question => question_for(&it.subject, &it.relation, templates.expect("checked above"))?,
            };
            Ok(EvalItem {
                prompt,
                golds: it.golds.clone(),
                group: Some(it.rule_id.clone()),
            })
        })
        .collect()
}

/// Best-of-golds EM/F1 overall and per rule.
pub fn eval_probeset(
    params: &Parameters,
    vocab: &Vocab,
    set: &ProbeSet,
    mode: EvalMode,
    templates: Option<&TemplateTable>,
) -> Result<EvalReport> {
    evaluate_items(params, vocab, set.kind.name(), &probe_items(set, mode, templates)?)
}
