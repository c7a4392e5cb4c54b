//! Data and model plumbing shared by the commands and the experiment tests.

use std::path::Path;

use anyhow::{bail, Context, Result};
use kbmem::ingest::{gen_synthetic, ingest, IngestReport};
use kbmem::kb::{stratify, Stratum};
use kbmem::memorizer::{Parameters, TemplateTable, Vocab};
use kbmem::trainer::{qa_examples, vocab_for, Example};
use kbmem::{Dataset, KnowledgeBase, Triplet};

use crate::config::{open, ExperimentConfig, Source};

/// KB plus what it took to build it.
pub struct LoadedKb {
    pub kb: KnowledgeBase,
    /// Triplets before dedup.
    pub raw: usize,
    /// Parse and filter report, for TSV sources.
    pub report: Option<IngestReport>,
}

pub fn load_kb(cfg: &ExperimentConfig) -> Result<LoadedKb> {
    let seed = cfg.stage_seed("kb");
    match cfg.source()? {
        Source::Tsv(path) => {
            let (triplets, report) = read_dump(path, cfg)?;
            let raw = triplets.len();
            Ok(LoadedKb {
                kb: KnowledgeBase::build(triplets, seed),
                raw,
                report: Some(report),
            })
        }
        Source::Synthetic(spec) => {
            let triplets = gen_synthetic(spec)?;
            let raw = triplets.len();
            Ok(LoadedKb {
                kb: KnowledgeBase::build(triplets, seed),
                raw,
                report: None,
            })
        }
    }
}

pub fn read_dump(path: &Path, cfg: &ExperimentConfig) -> Result<(Vec<Triplet>, IngestReport)> {
    let rules = cfg.filters.rules()?;
    ingest(open(path)?, &rules).with_context(|| format!("reading {}", path.display()))
}

/// Reads a plain triplet TSV (no filtering, malformed lines are errors).
pub fn read_dataset(path: &Path, name: &str) -> Result<Dataset> {
    let parsed = kbmem::ingest::read_triplets_file(path)?;
    if let Some(e) = parsed.skipped.first() {
        bail!("{}: line {}: {}", path.display(), e.line, e.reason);
    }
    Ok(Dataset::new(name, parsed.triplets))
}

pub fn write_dataset(out: &mut dyn std::io::Write, data: &Dataset) -> Result<()> {
    kbmem::kb::write_triplets_tsv(out, &data.triplets)?;
    Ok(())
}

pub fn whole(kb: &KnowledgeBase) -> Dataset {
    Dataset::new("kb", kb.triplets().to_vec())
}

/// Held-in eval sample of `eval_size` triplets (capped at the KB size).
pub fn eval_set(kb: &KnowledgeBase, cfg: &ExperimentConfig) -> Dataset {
    whole(kb).sample("eval", cfg.eval_size, cfg.stage_seed("eval"))
}

pub fn strata(kb: &KnowledgeBase, cfg: &ExperimentConfig) -> Result<Vec<Stratum>> {
    let index = kb.occurrence_counts();
    cfg.strata
        .iter()
        .map(|spec| {
            let seed = cfg.stage_seed(&format!("strata/{}", spec.name()));
            Ok(stratify(kb, &index, spec, seed)?)
        })
        .collect()
}

pub fn templates(kb: &KnowledgeBase, cfg: &ExperimentConfig) -> Result<TemplateTable> {
    let mut rels: Vec<&str> = kb.triplets().iter().map(|t| t.relation()).collect();
    rels.sort_unstable();
    rels.dedup();
    cfg.template_table(rels)
}

/// Vocabulary of the KB's prompts, objects and question forms, shared by
/// memorization and question finetuning.
pub fn vocab(kb: &KnowledgeBase, cfg: &ExperimentConfig) -> Result<Vocab> {
    Ok(vocab_for(kb.triplets(), Some(&templates(kb, cfg)?))?)
}

pub fn init_params(vocab: &Vocab, cfg: &ExperimentConfig, label: &str) -> Result<Parameters> {
    Ok(Parameters::init(cfg.model.with_vocab(vocab.len()), cfg.stage_seed(label))?)
}

/// Question-answer split drawn from `qa_size` KB triplets.
pub struct QaData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

pub fn qa_data(kb: &KnowledgeBase, cfg: &ExperimentConfig) -> Result<QaData> {
    let table = templates(kb, cfg)?;
    let picked = whole(kb).sample("qa", cfg.qa_size, cfg.stage_seed("qa-data"));
    let examples = qa_examples(&picked.triplets, &table)?;
    Ok(split_qa(examples, cfg))
}

/// Seeded split into training and validation pairs; validation gets
/// `round(n * qa_val_fraction)` pairs, at least one.
pub fn split_qa(examples: Vec<Example>, cfg: &ExperimentConfig) -> QaData {
    use rand::seq::SliceRandom;
    let n = examples.len();
    let n_val = ((n as f64 * cfg.qa_val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut kbmem::seed::rng_from_seed(cfg.stage_seed("qa-split")));
    let (val_idx, train_idx) = order.split_at(n_val.min(n));
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    QaData {
        train: train_idx.iter().map(|&i| examples[i].clone()).collect(),
        val: val_idx.iter().map(|&i| examples[i].clone()).collect(),
    }
}

/// Reads `question<TAB>answer` lines.
pub fn read_qa_tsv(path: &Path) -> Result<Vec<Example>> {
    use std::io::BufRead;
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
            bail!("{}: line {}: expected question<TAB>answer", path.display(), i + 1);
        }
        out.push(Example {
            prompt: fields[0].trim().to_string(),
            target: fields[1].trim().to_string(),
        });
    }
    Ok(out)
}

pub fn write_qa_tsv(out: &mut dyn std::io::Write, examples: &[Example]) -> Result<()> {
    for e in examples {
        writeln!(out, "{}\t{}", e.prompt, e.target)?;
    }
    Ok(())
}
