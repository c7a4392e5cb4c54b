//! Streaming TSV parsing, dump filtering, and synthetic Zipf KBs.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rand::Rng as _;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::Triplet;
use crate::seed::{rng_from_seed, Rng};

/// A line that did not yield a triplet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

/// Iterator over the triplets of a TSV source. Malformed lines are skipped and
/// recorded in [`TripletStream::skipped`]; I/O failures end the stream with an
/// error.
pub struct TripletStream<R> {
    reader: R,
    line_no: usize,
    buf: Vec<u8>,
    kept: usize,
    skipped: Vec<LogEntry>,
    failed: bool,
}

impl<R: BufRead> TripletStream<R> {
    pub fn new(reader: R) -> Self {
        TripletStream {
            reader,
            line_no: 0,
            buf: Vec::new(),
            kept: 0,
            skipped: Vec::new(),
            failed: false,
        }
    }

    pub fn kept(&self) -> usize {
        self.kept
    }

    pub fn skipped(&self) -> &[LogEntry] {
        &self.skipped
    }

    /// Line number of the most recently read line.
    pub fn line_no(&self) -> usize {
        self.line_no
    }
}

/// Parses one TSV line (without terminator).
pub fn parse_line(line: &str) -> std::result::Result<Triplet, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(format!("field count {}", fields.len()));
    }
    if let Some(pos) = fields.iter().position(|f| f.trim().is_empty()) {
        return Err(format!("empty field {}", pos + 1));
    }
    Triplet::new(fields[0], fields[1], fields[2]).map_err(|e| e.to_string())
}

impl<R: BufRead> Iterator for TripletStream<R> {
    type Item = std::io::Result<Triplet>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
            self.line_no += 1;
            let mut bytes = self.buf.as_slice();
            if let Some(rest) = bytes.strip_suffix(b"\n") {
                bytes = rest;
            }
            if let Some(rest) = bytes.strip_suffix(b"\r") {
                bytes = rest;
            }
            let parsed = match std::str::from_utf8(bytes) {
                Ok(line) => parse_line(line),
                Err(_) => Err("invalid utf-8".to_string()),
            };
            match parsed {
                Ok(t) => {
                    self.kept += 1;
                    return Some(Ok(t));
                }
                Err(reason) => {
                    log::debug!("skipping line {}: {reason}", self.line_no);
                    self.skipped.push(LogEntry {
                        line: self.line_no,
                        reason: format!("{reason} at line {}", self.line_no),
                    });
                }
            }
        }
    }
}

/// Outcome of reading a whole TSV source.
#[derive(Debug, Clone, Default)]
pub struct Parsed {
    pub triplets: Vec<Triplet>,
    pub skipped: Vec<LogEntry>,
}

/// Reads every well-formed triplet from `reader`.
pub fn parse_stream<R: BufRead>(reader: R) -> Result<Parsed> {
    let mut stream = TripletStream::new(reader);
    let mut triplets = Vec::new();
    for t in stream.by_ref() {
        triplets.push(t?);
    }
    Ok(Parsed {
        triplets,
        skipped: stream.skipped,
    })
}

/// Reads a triplet TSV file.
pub fn read_triplets_file(path: &std::path::Path) -> Result<Parsed> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_stream(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRules {
    pub drop_url_objects: bool,
    pub drop_coordinate_objects: bool,
    pub drop_image_objects: bool,
    /// When set, subjects outside this set are dropped. Must be non-empty.
    pub subject_allowlist: Option<HashSet<String>>,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            drop_url_objects: true,
            drop_coordinate_objects: true,
            drop_image_objects: true,
            subject_allowlist: None,
        }
    }
}

impl FilterRules {
    pub fn validate(&self) -> Result<()> {
        match &self.subject_allowlist {
            Some(set) if set.is_empty() => Err(Error::Config(
                "subject allow-list is present but empty".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    Url,
    Coordinate,
    Image,
    SubjectNotAllowed,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::Url => "url",
            DropReason::Coordinate => "coordinate",
            DropReason::Image => "image",
            DropReason::SubjectNotAllowed => "subject_not_allowed",
        })
    }
}

const IMAGE_SUFFIXES: [&str; 5] = [".jpg", ".jpeg", ".png", ".svg", ".gif"];

fn degree_pair() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^-?\d+(?:\.\d+)?\s*°\s*[A-Za-z]\s*,\s*-?\d+(?:\.\d+)?\s*°\s*[A-Za-z]$")
            .expect("static regex")
    })
}

fn decimal_pair() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(-?\d{1,2}\.\d+)\s*,\s*(-?\d{1,3}\.\d+)$").expect("static regex")
    })
}

pub fn is_url(s: &str) -> bool {
    s.starts_with("http://") || s.starts_with("https://")
}

pub fn is_coordinate(s: &str) -> bool {
    let s = s.trim();
    if degree_pair().is_match(s) {
        return true;
    }
    decimal_pair().captures(s).is_some_and(|c| {
        let lat: f64 = c[1].parse().unwrap_or(f64::INFINITY);
        let lon: f64 = c[2].parse().unwrap_or(f64::INFINITY);
        lat.abs() <= 90.0 && lon.abs() <= 180.0
    })
}

pub fn is_image(s: &str) -> bool {
    let lower = s.to_lowercase();
    IMAGE_SUFFIXES.iter().any(|suf| lower.ends_with(suf))
}

/// Decides whether `t` survives the dump filters.
pub fn apply_filters(t: &Triplet, rules: &FilterRules) -> std::result::Result<(), DropReason> {
    let obj = t.object();
    if rules.drop_url_objects && is_url(obj) {
        return Err(DropReason::Url);
    }
    if rules.drop_coordinate_objects && is_coordinate(obj) {
        return Err(DropReason::Coordinate);
    }
    if rules.drop_image_objects && is_image(obj) {
        return Err(DropReason::Image);
    }
    if let Some(allow) = &rules.subject_allowlist {
        if !allow.contains(t.subject()) {
            return Err(DropReason::SubjectNotAllowed);
        }
    }
    Ok(())
}

/// Parse-and-filter summary for one dump.
#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub lines: usize,
    pub kept: usize,
    pub malformed: usize,
    pub dropped: BTreeMap<String, usize>,
    /// `(line, reason)` for every line that did not survive.
    pub log: Vec<LogEntry>,
}

impl IngestReport {
    /// Filter report: `line<TAB>reason`.
    pub fn write_log<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.log {
            writeln!(out, "{}\t{}", e.line, e.reason)?;
        }
        out.flush()
    }
}

/// Streams `reader`, skipping malformed lines and applying `rules`.
pub fn ingest<R: BufRead>(reader: R, rules: &FilterRules) -> Result<(Vec<Triplet>, IngestReport)> {
    rules.validate()?;
    let mut stream = TripletStream::new(reader);
    let mut report = IngestReport::default();
    let mut kept = Vec::new();
    let mut dropped_lines = Vec::new();
    while let Some(t) = stream.next() {
        let t = t?;
        match apply_filters(&t, rules) {
            Ok(()) => kept.push(t),
            Err(reason) => {
                *report.dropped.entry(reason.to_string()).or_default() += 1;
                dropped_lines.push(LogEntry {
                    line: stream.line_no(),
                    reason: reason.to_string(),
                });
            }
        }
    }
    report.lines = stream.line_no();
    report.malformed = stream.skipped().len();
    report.kept = kept.len();
    let mut log: Vec<LogEntry> = stream.skipped.into_iter().chain(dropped_lines).collect();
    log.sort_by_key(|e| e.line);
    report.log = log;
    Ok((kept, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triplets: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// The standard desk fixture.
    fn default() -> Self {
        SynthSpec {
            n_entities: 1000,
            n_relations: 50,
            n_triplets: 10_000,
            zipf_exponent: 1.1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities < 2 || self.n_relations < 1 || self.n_triplets < 1 {
            return Err(Error::Config(format!(
                "synthetic spec needs n_entities >= 2, n_relations >= 1, n_triplets >= 1 (got {}, {}, {})",
                self.n_entities, self.n_relations, self.n_triplets
            )));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::Config(format!(
                "zipf exponent must be positive, got {}",
                self.zipf_exponent
            )));
        }
        Ok(())
    }

    pub fn entity_name(&self, i: usize) -> String {
        format!("e{:0width$}", i, width = digits(self.n_entities - 1).max(4))
    }

    pub fn relation_name(&self, i: usize) -> String {
        format!("r{:0width$}", i, width = digits(self.n_relations - 1).max(2))
    }
}

fn digits(mut n: usize) -> usize {
    let mut d = 1;
    while n >= 10 {
        n /= 10;
        d += 1;
    }
    d
}

/// Zipf sampler over ranks `0..n` with an integer CDF, so draws depend only on
/// the RNG's integer output. Weights use the portable `libm` power function.
#[derive(Debug, Clone)]
pub struct ZipfTable {
    cdf: Vec<u64>,
}

const CDF_BITS: u32 = 53;

impl ZipfTable {
    pub fn new(n: usize, exponent: f64) -> Self {
        let weights: Vec<f64> = (1..=n).map(|k| libm::pow(k as f64, -exponent)).collect();
        let total: f64 = weights.iter().sum();
        let scale = (1u64 << CDF_BITS) as f64;
        let mut acc = 0.0;
        let mut cdf: Vec<u64> = weights
            .iter()
            .map(|w| {
                acc += w;
                ((acc / total) * scale) as u64
            })
            .collect();
        *cdf.last_mut().expect("n >= 1") = 1u64 << CDF_BITS;
        ZipfTable { cdf }
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let u = rng.random::<u64>() >> (64 - CDF_BITS);
        self.cdf.partition_point(|&c| c <= u)
    }
}

/// Generates raw synthetic triplets; duplicate `(subject, relation)` keys are
/// left for [`crate::kb::KnowledgeBase::build`] to resolve.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<Triplet>> {
    spec.validate()?;
    let entities = ZipfTable::new(spec.n_entities, spec.zipf_exponent);
    let relations = ZipfTable::new(spec.n_relations, spec.zipf_exponent);
    let mut rng = rng_from_seed(spec.seed);
    let mut out = Vec::with_capacity(spec.n_triplets);
    for _ in 0..spec.n_triplets {
        let s = entities.sample(&mut rng);
        let r = relations.sample(&mut rng);
        let mut o = entities.sample(&mut rng);
        while o == s {
            o = entities.sample(&mut rng);
        }
        out.push(Triplet::new(
            &spec.entity_name(s),
            &spec.relation_name(r),
            &spec.entity_name(o),
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::write_triplets_tsv;
    use proptest::prelude::*;

    fn t(s: &str, r: &str, o: &str) -> Triplet {
        Triplet::new(s, r, o).unwrap()
    }

    #[test]
    fn parses_well_formed_line() {
        let p = parse_stream("a\tr\tb\n".as_bytes()).unwrap();
        assert_eq!(p.triplets, vec![t("a", "r", "b")]);
        assert!(p.skipped.is_empty());
    }

    #[test]
    fn short_line_is_logged() {
        let p = parse_stream("x\ty\tz\na\tr\n".as_bytes()).unwrap();
        assert_eq!(p.triplets.len(), 1);
        assert_eq!(p.skipped.len(), 1);
        assert_eq!(p.skipped[0].line, 2);
        assert_eq!(p.skipped[0].reason, "field count 2 at line 2");
    }

    #[test]
    fn thousand_line_fixture_with_three_defects() {
        let bad = [17usize, 500, 999];
        let mut text = String::new();
        for i in 1..=1000 {
            if i == 17 {
                text.push_str("only\ttwo\n");
            } else if i == 500 {
                text.push_str("a\t \tb\n");
            } else if i == 999 {
                text.push_str("a\tb\tc\td\n");
            } else {
                text.push_str(&format!("s{i}\tr\to{i}\r\n"));
            }
        }
        let p = parse_stream(text.as_bytes()).unwrap();
        assert_eq!(p.triplets.len(), 997);
        assert_eq!(p.skipped.iter().map(|e| e.line).collect::<Vec<_>>(), bad);
        assert_eq!(p.triplets[0], t("s1", "r", "o1"));
    }

    #[test]
    fn invalid_utf8_is_skipped() {
        let mut bytes = b"a\tr\tb\n".to_vec();
        bytes.extend_from_slice(&[0xff, b'\t', b'r', b'\t', b'x', b'\n']);
        let p = parse_stream(bytes.as_slice()).unwrap();
        assert_eq!(p.triplets.len(), 1);
        assert_eq!(p.skipped[0].reason, "invalid utf-8 at line 2");
    }

    #[test]
    fn filter_patterns() {
        let rules = FilterRules::default();
        let check = |o: &str| apply_filters(&t("s", "r", o), &rules);
        assert_eq!(check("https://example.org/x"), Err(DropReason::Url));
        assert_eq!(check("http://a.b"), Err(DropReason::Url));
        assert_eq!(check("48.15°N, 11.57°E"), Err(DropReason::Coordinate));
        assert_eq!(check("48.137, 11.575"), Err(DropReason::Coordinate));
        assert_eq!(check("-33.86,151.21"), Err(DropReason::Coordinate));
        assert_eq!(check("Munich skyline.JPG"), Err(DropReason::Image));
        assert_eq!(check("logo.svg"), Err(DropReason::Image));
        assert_eq!(check("1,000"), Ok(()));
        assert_eq!(check("Town hall"), Ok(()));
        assert_eq!(
            apply_filters(&t("Linlithgow Burgh Halls", "instance of", "Town hall"), &rules),
            Ok(())
        );
    }

    #[test]
    fn allowlist_filter() {
        let rules = FilterRules {
            subject_allowlist: Some(["keep".to_string()].into()),
            ..FilterRules::default()
        };
        assert_eq!(apply_filters(&t("keep", "r", "o"), &rules), Ok(()));
        assert_eq!(
            apply_filters(&t("other", "r", "o"), &rules),
            Err(DropReason::SubjectNotAllowed)
        );
        let empty = FilterRules {
            subject_allowlist: Some(HashSet::new()),
            ..FilterRules::default()
        };
        assert!(ingest("a\tb\tc\n".as_bytes(), &empty).is_err());
    }

    #[test]
    fn ingest_report_orders_log() {
        let text = "a\tr\thttps://x\nbad\ns\tr\to\nq\tr\tpic.png\n";
        let (kept, report) = ingest(text.as_bytes(), &FilterRules::default()).unwrap();
        assert_eq!(kept, vec![t("s", "r", "o")]);
        assert_eq!(report.lines, 4);
        assert_eq!(report.malformed, 1);
        let mut buf = Vec::new();
        report.write_log(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "1\turl\n2\tfield count 1 at line 2\n4\timage\n"
        );
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec {
            n_triplets: 500,
            ..SynthSpec::default()
        };
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        let other = SynthSpec { seed: 8, ..spec.clone() };
        assert_ne!(gen_synthetic(&spec).unwrap(), gen_synthetic(&other).unwrap());
    }

    #[test]
    fn synth_single_triplet() {
        let spec = SynthSpec {
            n_entities: 2,
            n_relations: 1,
            n_triplets: 1,
            zipf_exponent: 1.1,
            seed: 3,
        };
        let out = gen_synthetic(&spec).unwrap();
        assert_eq!(out.len(), 1);
        assert_ne!(out[0].subject(), out[0].object());
        assert_eq!(out[0].relation(), "r00");
    }

    #[test]
    fn synth_rank_frequency_slope() {
        let spec = SynthSpec {
            n_entities: 1000,
            n_relations: 50,
            n_triplets: 10_000,
            zipf_exponent: 1.1,
            seed: 7,
        };
        let out = gen_synthetic(&spec).unwrap();
        let idx = crate::kb::OccurrenceIndex::from_triplets(&out);
        let ranked = idx.ranked(crate::kb::Axis::Entity);
        // least-squares fit of ln(count) against ln(rank) over ranks 1..100
        let pts: Vec<(f64, f64)> = ranked
            .iter()
            .take(100)
            .enumerate()
            .map(|(i, (_, c))| (((i + 1) as f64).ln(), (*c as f64).ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((slope + 1.1).abs() <= 0.3, "slope {slope}");
    }

    #[test]
    fn zipf_table_covers_range() {
        let table = ZipfTable::new(3, 1.0);
        let mut rng = rng_from_seed(1);
        let mut seen = [0usize; 3];
        for _ in 0..3000 {
            seen[table.sample(&mut rng)] += 1;
        }
        assert!(seen[0] > seen[1] && seen[1] > seen[2] && seen[2] > 0);
    }

    fn field() -> impl Strategy<Value = String> {
        "[A-Za-z0-9][A-Za-z0-9 ,.:'-]{0,12}[A-Za-z0-9]"
    }

    proptest! {
        #[test]
        fn tsv_round_trip(rows in proptest::collection::vec((field(), field(), field()), 0..20)) {
            let triplets: Vec<Triplet> = rows
                .iter()
                .map(|(s, r, o)| Triplet::new(s, r, o).unwrap())
                .collect();
            let mut buf = Vec::new();
            write_triplets_tsv(&mut buf, &triplets).unwrap();
            let parsed = parse_stream(buf.as_slice()).unwrap();
            prop_assert_eq!(parsed.triplets, triplets);
            prop_assert!(parsed.skipped.is_empty());
        }

        #[test]
        fn plain_objects_survive(o in "[A-Za-z][A-Za-z ]{0,20}") {
            let t = Triplet::new("s", "r", &o).unwrap();
            prop_assert_eq!(apply_filters(&t, &FilterRules::default()), Ok(()));
        }
    }
}
