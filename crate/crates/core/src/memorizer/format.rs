//! Prompt formats: the fixed triplet form used for memorization and the
//! natural-language question form used for QA finetuning and probing.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::kb::Triplet;

pub const SUBJECT_PLACEHOLDER: &str = "$subject$";

pub fn format_prompt(subject: &str, relation: &str) -> String {
    format!("Subject: {subject}. Relation: {relation}. Object:")
}

/// `Subject: {subject}. Relation: {relation}. Object:`; the expected
/// continuation is the object.
pub fn format_input(t: &Triplet) -> String {
    format_prompt(t.subject(), t.relation())
}

/// Recovers `(subject, relation)` from a triplet prompt.
pub fn parse_prompt(prompt: &str) -> Option<(&str, &str)> {
    let rest = prompt.strip_prefix("Subject: ")?;
    let rest = rest.strip_suffix(". Object:")?;
    let (subject, relation) = rest.rsplit_once(". Relation: ")?;
    Some((subject, relation))
}

/// Relation → question text with a `$subject$` placeholder.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemplateTable {
    templates: BTreeMap<String, String>,
}

const BUILTIN_TEMPLATES: &[(&str, &str)] = &[
    ("sibling", "the sibling of $subject$ is"),
    ("shares border with", "$subject$ shares border with"),
    ("child", "$subject$ has child"),
    ("capital of", "$subject$ is capital of"),
    ("has part", "$subject$ has part"),
    ("contains", "$subject$ contains"),
    ("father", "the father of $subject$ is"),
    ("mother", "the mother of $subject$ is"),
    ("capital", "the capital of $subject$ is"),
    ("part of", "$subject$ is part of"),
    ("country", "the country $subject$ belongs to is"),
    ("place of birth", "the place of birth of $subject$ is"),
    ("place of burial", "the place of burial of $subject$ is"),
    ("place of publication", "the place of publication of $subject$ is"),
    ("place of death", "the place of death of $subject$ is"),
    ("author", "the author of $subject$ is"),
    (
        "languages spoken, written or signed",
        "the languages spoken, written or signed by $subject$ is",
    ),
    ("country of birth", "the country of birth of $subject$ is"),
    ("country of burial", "the country of burial of $subject$ is"),
    ("country of publication", "the country of publication of $subject$ is"),
    ("country of death", "the country of death of $subject$ is"),
    ("language of work or name", "the language of $subject$ is"),
    ("grandfather", "the grandfather of $subject$ is"),
    ("grandmother", "the grandmother of $subject$ is"),
];

impl TemplateTable {
    /// Templates for the relations of the shipped inverse and composition rules.
    pub fn builtin() -> Self {
        let mut t = TemplateTable::default();
        for (rel, text) in BUILTIN_TEMPLATES {
            t.insert(rel, text).expect("builtin templates carry the placeholder");
        }
        t
    }

    /// `the {relation} of $subject$ is` for each relation.
    pub fn generic<'a>(relations: impl IntoIterator<Item = &'a str>) -> Self {
        let mut t = TemplateTable::default();
        for rel in relations {
            t.templates
                .insert(rel.to_string(), format!("the {rel} of {SUBJECT_PLACEHOLDER} is"));
        }
        t
    }

    pub fn insert(&mut self, relation: &str, template: &str) -> Result<()> {
        if !template.contains(SUBJECT_PLACEHOLDER) {
            return Err(Error::Config(format!(
                "template for {relation:?} lacks the {SUBJECT_PLACEHOLDER} placeholder"
            )));
        }
        self.templates
            .insert(relation.to_string(), template.to_string());
        Ok(())
    }

    pub fn get(&self, relation: &str) -> Option<&str> {
        self.templates.get(relation).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    /// Re-keys templates through `alias` (template relation → KB relation).
    /// Entries without an alias keep their key.
    pub fn aliased(&self, alias: &BTreeMap<String, String>) -> Self {
        let templates = self
            .templates
            .iter()
            .map(|(rel, text)| (alias.get(rel).unwrap_or(rel).clone(), text.clone()))
            .collect();
        TemplateTable { templates }
    }

    /// Relations among `relations` that have no template, deduplicated and
    /// sorted.
    pub fn missing<'a>(&self, relations: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut out: Vec<String> = relations
            .into_iter()
            .filter(|r| !self.templates.contains_key(*r))
            .map(str::to_string)
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Reads `relation<TAB>template` lines; blank lines and `#` comments are
    /// ignored.
    pub fn read_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut t = TemplateTable::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (rel, text) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!("template line {} has no tab separator", i + 1))
            })?;
            t.insert(rel.trim(), text.trim())?;
        }
        Ok(t)
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (rel, text) in &self.templates {
            writeln!(out, "{rel}\t{text}")?;
        }
        out.flush()
    }
}

pub fn question_for(subject: &str, relation: &str, table: &TemplateTable) -> Result<String> {
    table
        .get(relation)
        .map(|tpl| tpl.replace(SUBJECT_PLACEHOLDER, subject))
        .ok_or_else(|| Error::MissingTemplate(vec![relation.to_string()]))
}

/// Natural-language question whose answer is `t`'s object.
pub fn format_question(t: &Triplet, table: &TemplateTable) -> Result<String> {
    question_for(t.subject(), t.relation(), table)
}
