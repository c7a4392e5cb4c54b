//! Experiment configuration: one JSON document per run, every field optional.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kbmem::ingest::{FilterRules, SynthSpec};
use kbmem::kb::{Axis, StratumSpec};
use kbmem::memorizer::{ModelConfig, TemplateTable};
use kbmem::probes::{
    builtin_composition_rules, builtin_inverse_rules, read_alias_map, read_composition_rules,
    read_inverse_rules, CompositionRule, InverseRule, DEFAULT_PER_RULE,
};
use kbmem::seed::derive_seed;
use kbmem::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Model shape; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let c = ModelConfig::new(0);
        ModelSpec {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            max_seq_len: c.max_seq_len,
        }
    }
}

impl ModelSpec {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            vocab_size,
        }
    }
}

/// Dump filters. The allow-list is a file with one subject per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSpec {
    pub drop_url_objects: bool,
    pub drop_coordinate_objects: bool,
    pub drop_image_objects: bool,
    pub subject_allowlist: Option<PathBuf>,
}

impl Default for FilterSpec {
    fn default() -> Self {
        let r = FilterRules::default();
        FilterSpec {
            drop_url_objects: r.drop_url_objects,
            drop_coordinate_objects: r.drop_coordinate_objects,
            drop_image_objects: r.drop_image_objects,
            subject_allowlist: None,
        }
    }
}

impl FilterSpec {
    pub fn rules(&self) -> Result<FilterRules> {
        let subject_allowlist = match &self.subject_allowlist {
            None => None,
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading allow-list {}", path.display()))?;
                Some(
                    text.lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty())
                        .map(str::to_string)
                        .collect(),
                )
            }
        };
        Ok(FilterRules {
            drop_url_objects: self.drop_url_objects,
            drop_coordinate_objects: self.drop_coordinate_objects,
            drop_image_objects: self.drop_image_objects,
            subject_allowlist,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Triplet TSV to build the KB from. Exclusive with `synth`.
    pub kb: Option<PathBuf>,
    /// Synthetic KB spec. Exclusive with `kb`.
    pub synth: Option<SynthSpec>,
    pub out: Option<PathBuf>,
    /// Global seed; every stage derives its own seed from it by label.
    pub seed: u64,
    pub filters: FilterSpec,
    pub strata: Vec<StratumSpec>,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub qa: TrainConfig,
    /// Size of the held-in eval sample, capped at the KB size.
    pub eval_size: usize,
    /// Triplets turned into question-answer pairs by `qa`.
    pub qa_size: usize,
    pub qa_val_fraction: f64,
    /// Question templates TSV; the shipped table when absent.
    pub templates: Option<PathBuf>,
    /// Use `the {relation} of $subject$ is` for every KB relation instead.
    pub generic_templates: bool,
    /// `rule relation<TAB>KB relation` pairs applied to rules and templates.
    pub relation_alias: Option<PathBuf>,
    pub inverse_rules: Option<PathBuf>,
    pub composition_rules: Option<PathBuf>,
    pub per_rule: usize,
    /// EM levels reported by `compare`.
    pub thresholds: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kb: None,
            synth: None,
            out: None,
            seed: 0,
            filters: FilterSpec::default(),
            strata: default_strata(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            qa: TrainConfig::for_qa(),
            eval_size: 10_000,
            qa_size: 2_000,
            qa_val_fraction: 0.2,
            templates: None,
            generic_templates: false,
            relation_alias: None,
            inverse_rules: None,
            composition_rules: None,
            per_rule: DEFAULT_PER_RULE,
            thresholds: vec![0.8, 0.9],
        }
    }
}

pub fn default_strata() -> Vec<StratumSpec> {
    vec![
        StratumSpec::popular(Axis::Entity, 1000),
        StratumSpec::popular(Axis::Relation, 1000),
        StratumSpec::long_tail(Axis::Entity, 1000),
        StratumSpec::long_tail(Axis::Relation, 1000),
    ]
}

/// Where the KB comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source<'a> {
    Tsv(&'a Path),
    Synthetic(&'a SynthSpec),
}

impl ExperimentConfig {
    /// Reads a config file. A run manifest is accepted too: its `config`
    /// snapshot is used.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).with_context(|| format!("opening config {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))
            .with_context(|| format!("parsing config {}", path.display()))?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().context("train")?;
        self.qa.validate().context("qa")?;
        for s in &self.strata {
            s.validate()?;
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        if self.eval_size == 0 {
            bail!("eval_size must be positive");
        }
        if !(self.qa_val_fraction > 0.0 && self.qa_val_fraction < 1.0) {
            bail!("qa_val_fraction must lie in (0, 1), got {}", self.qa_val_fraction);
        }
        if self.per_rule == 0 {
            bail!("per_rule must be at least 1");
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            bail!("thresholds must lie in [0, 1]");
        }
        for (what, path) in [
            ("kb", &self.kb),
            ("templates", &self.templates),
            ("relation_alias", &self.relation_alias),
            ("inverse_rules", &self.inverse_rules),
            ("composition_rules", &self.composition_rules),
            ("filters.subject_allowlist", &self.filters.subject_allowlist),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    bail!("{what}: no such file {}", p.display());
                }
            }
        }
        Ok(())
    }

    /// The KB source; exactly one of `kb` and `synth` must be set.
    pub fn source(&self) -> Result<Source<'_>> {
        match (&self.kb, &self.synth) {
            (Some(p), None) => Ok(Source::Tsv(p)),
            (None, Some(s)) => Ok(Source::Synthetic(s)),
            (Some(_), Some(_)) => bail!("config sets both `kb` and `synth`; choose one"),
            (None, None) => bail!("no knowledge base: pass --kb or set `kb` or `synth` in the config"),
        }
    }

    pub fn stage_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn alias_map(&self) -> Result<BTreeMap<String, String>> {
        match &self.relation_alias {
            None => Ok(BTreeMap::new()),
            Some(p) => Ok(read_alias_map(open(p)?)?),
        }
    }

    /// Question templates in effect, re-keyed through the alias map.
    pub fn template_table<'a>(&self, relations: impl IntoIterator<Item = &'a str>) -> Result<TemplateTable> {
        let table = match &self.templates {
            Some(p) => TemplateTable::read_tsv(open(p)?)?,
            None if self.generic_templates => TemplateTable::generic(relations),
            None => TemplateTable::builtin(),
        };
        Ok(table.aliased(&self.alias_map()?))
    }

    pub fn inverse_rules(&self) -> Result<Vec<InverseRule>> {
        let rules = match &self.inverse_rules {
            Some(p) => read_inverse_rules(open(p)?)?,
            None => builtin_inverse_rules(),
        };
        let alias = self.alias_map()?;
        Ok(rules.iter().map(|r| r.aliased(&alias)).collect())
    }

    pub fn composition_rules(&self) -> Result<Vec<CompositionRule>> {
        let rules = match &self.composition_rules {
            Some(p) => read_composition_rules(open(p)?)?,
            None => builtin_composition_rules(),
        };
        let alias = self.alias_map()?;
        Ok(rules.iter().map(|r| r.aliased(&alias)).collect())
    }

    /// The config's JSON text, as hashed into manifests.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub(crate) fn open(path: &Path) -> Result<BufReader<fs::File>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}
