//! Recall metrics and dataset evaluation.
//!
//! Answers are compared after [`normalize`]: lowercase, whitespace runs
//! collapsed, ASCII punctuation trimmed from both ends of every token. Articles
//! are kept since gold answers are entity names.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::Dataset;
use crate::memorizer::{format_input, format_question, generate_greedy_batch, Parameters, TemplateTable, Vocab};

/// Prompts decoded per forward pass during evaluation.
const DECODE_BATCH: usize = 128;

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn normalize(text: &str) -> String {
    tokens(text).join(" ")
}

/// 1 when the normalized strings agree, else 0.
pub fn exact_match(pred: &str, gold: &str) -> f64 {
    if normalize(pred) == normalize(gold) {
        1.0
    } else {
        0.0
    }
}

/// Harmonic mean of token precision and recall with multiset overlap.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = tokens(pred);
    let g = tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &g {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn best_of<S: AsRef<str>>(pred: &str, golds: &[S], score: fn(&str, &str) -> f64) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Empty("gold answer list"));
    }
    Ok(golds
        .iter()
        .map(|g| score(pred, g.as_ref()))
        .fold(0.0, f64::max))
}

pub fn best_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<f64> {
    best_of(pred, golds, token_f1)
}

pub fn best_em<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<f64> {
    best_of(pred, golds, exact_match)
}

/// How a triplet is turned into a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Triplet,
    Question,
}

/// One query with its acceptable answers. `group` keys per-rule or
/// per-stratum breakdowns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub prompt: String,
    pub golds: Vec<String>,
    pub group: Option<String>,
}

/// Builds queries for every triplet of `dataset`. Question mode needs a
/// template for each relation; all missing relations are reported together.
pub fn dataset_items(dataset: &Dataset, mode: EvalMode, templates: Option<&TemplateTable>) -> Result<Vec<EvalItem>> {
    if mode == EvalMode::Question {
        let table = templates.ok_or_else(|| Error::Config("question mode needs a template table".into()))?;
        let missing = table.missing(dataset.triplets.iter().map(|t| t.relation()));
        if !missing.is_empty() {
            return Err(Error::MissingTemplate(missing));
        }
    }
    dataset
        .triplets
        .iter()
        .map(|t| {
            let prompt = match mode {
                EvalMode::Triplet => format_input(t),
                EvalMode::Question => format_question(t, templates.expect("checked above"))?,
            };
            Ok(EvalItem {
                prompt,
                golds: vec![t.object().to_string()],
                group: None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prompt: String,
    pub prediction: String,
    pub golds: Vec<String>,
    pub em: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// Aggregate scores of one named subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub n: usize,
    pub em: f64,
    pub f1: f64,
}

impl Summary {
    fn of<'a>(name: &str, records: impl IntoIterator<Item = &'a SampleRecord>) -> Summary {
        let (mut n, mut em, mut f1) = (0usize, 0.0, 0.0);
        for r in records {
            n += 1;
            em += r.em;
            f1 += r.f1;
        }
        let d = n.max(1) as f64;
        Summary {
            name: name.to_string(),
            n,
            em: em / d,
            f1: f1 / d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    /// Per-group (rule) breakdown, in first-appearance order.
    #[serde(default)]
    pub groups: Vec<Summary>,
    /// Separately evaluated strata datasets.
    #[serde(default)]
    pub strata: Vec<Summary>,
    #[serde(skip)]
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn from_records(dataset: &str, records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let overall = Summary::of(dataset, &records);
        let mut order: Vec<&str> = Vec::new();
        for r in &records {
            if let Some(g) = r.group.as_deref() {
                if !order.contains(&g) {
                    order.push(g);
                }
            }
        }
        let groups = order
            .iter()
            .map(|g| Summary::of(g, records.iter().filter(|r| r.group.as_deref() == Some(g))))
            .collect();
        Ok(EvalReport {
            dataset: dataset.to_string(),
            n: overall.n,
            em: overall.em,
            f1: overall.f1,
            groups,
            strata: Vec::new(),
            records,
        })
    }

    pub fn summary(&self) -> Summary {
        Summary {
            name: self.dataset.clone(),
            n: self.n,
            em: self.em,
            f1: self.f1,
        }
    }

    pub fn stratum(&self, name: &str) -> Option<&Summary> {
        self.strata.iter().find(|s| s.name == name)
    }

    pub fn group(&self, name: &str) -> Option<&Summary> {
        self.groups.iter().find(|s| s.name == name)
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self)?;
        writeln!(out)?;
        Ok(())
    }

    /// `prompt<TAB>prediction<TAB>gold<TAB>em<TAB>f1`; multiple golds are
    /// joined with `|`.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.prompt,
                r.prediction,
                r.golds.join("|"),
                r.em,
                r.f1
            )?;
        }
        out.flush()
    }
}

/// Decodes at most this many tokens: the longest gold plus EOS.
fn decode_budget(vocab: &Vocab, items: &[EvalItem]) -> usize {
    items
        .iter()
        .flat_map(|i| &i.golds)
        .map(|g| vocab.encode(g).len())
        .max()
        .unwrap_or(0)
        + 1
}

/// Greedy-decodes every prompt and scores it against its golds.
pub fn evaluate_items(params: &Parameters, vocab: &Vocab, name: &str, items: &[EvalItem]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let max_new = decode_budget(vocab, items);
    let mut records = Vec::with_capacity(items.len());
    for chunk in items.chunks(DECODE_BATCH) {
        let prompts: Vec<&str> = chunk.iter().map(|i| i.prompt.as_str()).collect();
        let preds = generate_greedy_batch(params, vocab, &prompts, max_new)?;
        for (item, prediction) in chunk.iter().zip(preds) {
            records.push(SampleRecord {
                em: best_em(&prediction, &item.golds)?,
                f1: best_f1(&prediction, &item.golds)?,
                prompt: item.prompt.clone(),
                prediction,
                golds: item.golds.clone(),
                group: item.group.clone(),
            });
        }
    }
    EvalReport::from_records(name, records)
}

/// Scores `dataset` and, separately, each of `strata`.
pub fn evaluate_dataset(
    params: &Parameters,
    vocab: &Vocab,
    dataset: &Dataset,
    mode: EvalMode,
    templates: Option<&TemplateTable>,
    strata: &[Dataset],
) -> Result<EvalReport> {
    let mut report = evaluate_items(params, vocab, &dataset.name, &dataset_items(dataset, mode, templates)?)?;
    for s in strata {
        if s.is_empty() {
            report.strata.push(Summary {
                name: s.name.clone(),
                n: 0,
                em: 0.0,
                f1: 0.0,
            });
            continue;
        }
        let sub = evaluate_items(params, vocab, &s.name, &dataset_items(s, mode, templates)?)?;
        report.strata.push(sub.summary());
    }
    Ok(report)
}
