//! Conversation corpora: ingestion, validation, label unification and
//! cross-dataset mixing.
//!
//! Corpora are stored as JSONL, one conversation per line:
//!
//! ```text
//! {"conversation_id": "...", "dataset": "iemocap", "split": "train",
//!  "utterances": [{"index": 0, "speaker": "...", "text": "...", "label": "..."}]}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IEMOCAP: &str = "iemocap";
pub const MELD: &str = "meld";
pub const EMORYNLP: &str = "emorynlp";
pub const MIXED: &str = "mixed";

const DEFAULT_UNIFIED_MAP: &str = include_str!("../data/unified_label_map.csv");

/// Ordered set of emotion labels, lowercase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let labels: Vec<String> = labels.into_iter().map(|l| l.as_ref().trim().to_lowercase()).collect();
        if labels.len() < 2 {
            return Err(Error::InvalidLabelSpace(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if l.is_empty() {
                return Err(Error::InvalidLabelSpace("empty label".into()));
            }
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidLabelSpace(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self { labels })
    }

    /// Label space of one of the three benchmark datasets.
    pub fn builtin(dataset_id: &str) -> Option<Self> {
        let labels: &[&str] = match dataset_id {
            IEMOCAP => &["neutral", "happy", "sad", "excited", "angry", "frustrated"],
            MELD => &["anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise"],
            EMORYNLP => &["neutral", "joyful", "peaceful", "powerful", "scared", "mad", "sad"],
            _ => return None,
        };
        Some(Self::new(labels).expect("builtin label spaces are valid"))
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Same members, ignoring order.
    pub fn same_members(&self, other: &LabelSpace) -> bool {
        let a: HashSet<&str> = self.labels.iter().map(String::as_str).collect();
        let b: HashSet<&str> = other.labels.iter().map(String::as_str).collect();
        a == b
    }

    /// Comma+space joined, in space order.
    pub fn joined(&self) -> String {
        self.labels.join(", ")
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        LabelSpace::new(v)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(s: LabelSpace) -> Self {
        s.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub conversation_id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    /// Builds a conversation, checking structural invariants. Speakers are
    /// kept as given; [`load_corpus`] is what canonicalizes them.
    pub fn new(conversation_id: impl Into<String>, utterances: Vec<Utterance>) -> Result<Self> {
        let conversation = Self {
            conversation_id: conversation_id.into(),
            utterances,
        };
        conversation.check()?;
        Ok(conversation)
    }

    fn check(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::EmptyConversation(self.conversation_id.clone()));
        }
        for (pos, u) in self.utterances.iter().enumerate() {
            let fail = |message: String| Error::InvalidConversation {
                id: self.conversation_id.clone(),
                message,
            };
            if u.index != pos {
                return Err(fail(format!("utterance at position {pos} has index {}", u.index)));
            }
            if u.text.trim().is_empty() {
                return Err(fail(format!("utterance {pos} has empty text")));
            }
            if u.speaker.trim().is_empty() {
                return Err(fail(format!("utterance {pos} has empty speaker")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Distinct speakers in order of first appearance.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for u in &self.utterances {
            if !seen.contains(&u.speaker.as_str()) {
                seen.push(u.speaker.as_str());
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub dataset_id: String,
    pub split: Split,
    pub conversations: Vec<Conversation>,
    pub label_space: LabelSpace,
}

impl Corpus {
    pub fn new(
        dataset_id: impl Into<String>,
        split: Split,
        conversations: Vec<Conversation>,
        label_space: LabelSpace,
    ) -> Result<Self> {
        let corpus = Self {
            dataset_id: dataset_id.into(),
            split,
            conversations,
            label_space,
        };
        if corpus.conversations.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ids = HashSet::new();
        for c in &corpus.conversations {
            c.check()?;
            if !ids.insert(c.conversation_id.as_str()) {
                return Err(Error::DuplicateConversation(c.conversation_id.clone()));
            }
            for u in &c.utterances {
                if !corpus.label_space.contains(&u.label) {
                    return Err(Error::LabelOutsideSpace {
                        dataset: corpus.dataset_id.clone(),
                        label: u.label.clone(),
                    });
                }
            }
        }
        Ok(corpus)
    }

    pub fn utterance_count(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    /// `(conversation, utterance index)` pairs in corpus order.
    pub fn positions(&self) -> impl Iterator<Item = (&Conversation, usize)> {
        self.conversations
            .iter()
            .flat_map(|c| (0..c.len()).map(move |i| (c, i)))
    }

    /// Identifier used in manifests and reports, e.g. `iemocap:test`.
    pub fn corpus_id(&self) -> String {
        format!("{}:{}", self.dataset_id, self.split)
    }

    /// Writes the corpus in the JSONL interchange format.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for c in &self.conversations {
            let record = RawConversation {
                conversation_id: c.conversation_id.clone(),
                dataset: self.dataset_id.clone(),
                split: self.split.to_string(),
                utterances: c
                    .utterances
                    .iter()
                    .map(|u| RawUtterance {
                        index: u.index,
                        speaker: u.speaker.clone(),
                        text: u.text.clone(),
                        label: u.label.clone(),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawUtterance {
    index: usize,
    speaker: String,
    text: String,
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawConversation {
    conversation_id: String,
    dataset: String,
    split: String,
    utterances: Vec<RawUtterance>,
}

/// Loads a JSONL corpus. Benchmark datasets use their published label sets;
/// any other dataset id gets a label space inferred from its records.
pub fn load_corpus(path: impl AsRef<Path>, dataset_id: &str, split: Split) -> Result<Corpus> {
    load_corpus_with_space(path, dataset_id, split, None)
}

pub fn load_corpus_with_space(
    path: impl AsRef<Path>,
    dataset_id: &str,
    split: Split,
    label_space: Option<LabelSpace>,
) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), path, dataset_id, split, label_space)
}

pub(crate) fn read_corpus<R: Read>(
    reader: BufReader<R>,
    path: &Path,
    dataset_id: &str,
    split: Split,
    label_space: Option<LabelSpace>,
) -> Result<Corpus> {
    let dataset_id = dataset_id.to_lowercase();
    let malformed = |line: usize, message: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut conversations = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawConversation = serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        if raw.dataset.to_lowercase() != dataset_id {
            return Err(malformed(
                line_no,
                format!("dataset `{}` does not match `{dataset_id}`", raw.dataset),
            ));
        }
        let record_split: Split = raw
            .split
            .parse()
            .map_err(|_| malformed(line_no, format!("unknown split `{}`", raw.split)))?;
        if record_split != split {
            return Err(malformed(
                line_no,
                format!("split `{record_split}` does not match `{split}`"),
            ));
        }
        if raw.utterances.is_empty() {
            return Err(Error::EmptyConversation(raw.conversation_id));
        }

        let mut speakers: HashMap<String, String> = HashMap::new();
        let mut utterances = Vec::with_capacity(raw.utterances.len());
        for (pos, u) in raw.utterances.into_iter().enumerate() {
            if u.index != pos {
                return Err(malformed(
                    line_no,
                    format!("utterance at position {pos} has index {}", u.index),
                ));
            }
            let next = speakers.len();
            let speaker = speakers
                .entry(u.speaker.trim().to_string())
                .or_insert_with(|| format!("Speaker{next}"))
                .clone();
            utterances.push(Utterance {
                index: pos,
                speaker,
                text: u.text,
                label: u.label.trim().to_lowercase(),
            });
        }

        let conversation_id = namespaced_id(&dataset_id, &raw.conversation_id);
        let conversation = Conversation::new(conversation_id, utterances).map_err(|e| match e {
            Error::InvalidConversation { message, .. } => malformed(line_no, message),
            other => other,
        })?;
        conversations.push(conversation);
    }

    if conversations.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let label_space = match label_space.or_else(|| LabelSpace::builtin(&dataset_id)) {
        Some(space) => space,
        None => infer_label_space(&conversations)?,
    };
    Corpus::new(dataset_id, split, conversations, label_space)
}

fn namespaced_id(dataset_id: &str, raw_id: &str) -> String {
    let prefix = format!("{dataset_id}/");
    if dataset_id == MIXED || raw_id.starts_with(&prefix) {
        raw_id.to_string()
    } else {
        format!("{prefix}{raw_id}")
    }
}

/// Labels found in the data: the unified order when every label belongs to
/// the default unified space, sorted otherwise.
fn infer_label_space(conversations: &[Conversation]) -> Result<LabelSpace> {
    let found: HashSet<&str> = conversations
        .iter()
        .flat_map(|c| c.utterances.iter().map(|u| u.label.as_str()))
        .collect();
    let unified = UnifiedLabelMap::default_map();
    if found.iter().all(|l| unified.unified_space.contains(l)) {
        let labels: Vec<&String> = unified
            .unified_space
            .labels()
            .iter()
            .filter(|l| found.contains(l.as_str()))
            .collect();
        if labels.len() >= 2 {
            return LabelSpace::new(labels);
        }
    }
    let mut labels: Vec<&str> = found.into_iter().collect();
    labels.sort_unstable();
    LabelSpace::new(labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub conversation_id: String,
    pub index: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub conversations: usize,
    pub utterances: usize,
    /// Per-label counts in label-space order; labels outside the space are appended.
    pub label_histogram: Vec<(String, usize)>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Collects every invariant violation instead of failing on the first.
pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut violations = Vec::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut ids = HashSet::new();

    if corpus.conversations.is_empty() {
        violations.push(Violation {
            conversation_id: String::new(),
            index: None,
            message: "corpus has no conversations".into(),
        });
    }
    for c in &corpus.conversations {
        let id = &c.conversation_id;
        let mut flag = |index: Option<usize>, message: String| {
            violations.push(Violation {
                conversation_id: id.clone(),
                index,
                message,
            })
        };
        if !ids.insert(id.as_str()) {
            flag(None, "duplicate conversation id".into());
        }
        if c.utterances.is_empty() {
            flag(None, "empty conversation".into());
        }
        for (pos, u) in c.utterances.iter().enumerate() {
            *counts.entry(u.label.as_str()).or_default() += 1;
            if u.index != pos {
                flag(Some(pos), format!("index {} at position {pos}", u.index));
            }
            if u.text.trim().is_empty() {
                flag(Some(pos), "empty text".into());
            }
            if !corpus.label_space.contains(&u.label) {
                flag(Some(pos), format!("label `{}` outside label space", u.label));
            }
        }
    }

    let mut label_histogram: Vec<(String, usize)> = corpus
        .label_space
        .labels()
        .iter()
        .map(|l| (l.clone(), counts.remove(l.as_str()).unwrap_or(0)))
        .collect();
    label_histogram.extend(counts.into_iter().map(|(l, n)| (l.to_string(), n)));

    ValidationReport {
        conversations: corpus.conversations.len(),
        utterances: corpus.utterance_count(),
        label_histogram,
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapRow {
    pub dataset: String,
    pub source_label: String,
    pub unified_label: String,
}

/// Dataset-specific label to unified label relabeling.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedLabelMap {
    rows: Vec<MapRow>,
    pub unified_space: LabelSpace,
}

impl UnifiedLabelMap {
    /// The unified space is the distinct unified labels in row order.
    pub fn new(rows: Vec<MapRow>) -> Result<Self> {
        let rows: Vec<MapRow> = rows
            .into_iter()
            .map(|r| MapRow {
                dataset: r.dataset.trim().to_lowercase(),
                source_label: r.source_label.trim().to_lowercase(),
                unified_label: r.unified_label.trim().to_lowercase(),
            })
            .collect();
        let mut keys = HashSet::new();
        let mut unified: Vec<&str> = Vec::new();
        for r in &rows {
            if !keys.insert((r.dataset.as_str(), r.source_label.as_str())) {
                return Err(Error::Config(format!(
                    "label map has two rows for ({}, {})",
                    r.dataset, r.source_label
                )));
            }
            if !unified.contains(&r.unified_label.as_str()) {
                unified.push(&r.unified_label);
            }
        }
        let unified_space = LabelSpace::new(unified)?;
        Ok(Self { rows, unified_space })
    }

    /// The shipped mapping table.
    pub fn default_map() -> Self {
        Self::from_csv_str(DEFAULT_UNIFIED_MAP).expect("shipped label map parses")
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        Self::from_reader(text.as_bytes())
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["dataset", "source_label", "unified_label"];
        if headers.iter().map(str::trim).ne(expected) {
            return Err(Error::Config(format!(
                "label map header must be `{}`",
                expected.join(",")
            )));
        }
        let rows = rdr.deserialize().collect::<Result<Vec<MapRow>, _>>()?;
        Self::new(rows)
    }

    pub fn rows(&self) -> &[MapRow] {
        &self.rows
    }

    pub fn lookup(&self, dataset: &str, label: &str) -> Option<&str> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.source_label == label)
            .map(|r| r.unified_label.as_str())
    }

    /// Source labels a dataset has rows for, in row order.
    pub fn source_labels(&self, dataset: &str) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| r.dataset == dataset)
            .map(|r| r.source_label.as_str())
            .collect()
    }

    /// Labels of `space` the map cannot place for `dataset`.
    pub fn missing_for(&self, dataset: &str, space: &LabelSpace) -> Vec<String> {
        space
            .labels()
            .iter()
            .filter(|l| self.lookup(dataset, l).is_none())
            .cloned()
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut wtr = csv::Writer::from_path(path)?;
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }
}

/// Relabels every utterance into the map's unified space.
pub fn unify_labels(corpus: &Corpus, map: &UnifiedLabelMap) -> Result<Corpus> {
    let dataset = corpus.dataset_id.as_str();
    let conversations = corpus
        .conversations
        .iter()
        .map(|c| {
            let utterances = c
                .utterances
                .iter()
                .map(|u| {
                    let unified = map.lookup(dataset, &u.label).ok_or_else(|| Error::UnmappedLabel {
                        dataset: dataset.to_string(),
                        label: u.label.clone(),
                    })?;
                    Ok(Utterance {
                        label: unified.to_string(),
                        ..u.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Conversation {
                conversation_id: c.conversation_id.clone(),
                utterances,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(
        corpus.dataset_id.clone(),
        corpus.split,
        conversations,
        map.unified_space.clone(),
    )
}

/// Exact sampling fraction in (0, 1], e.g. `1/8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SampleRatio {
    num: u64,
    den: u64,
}

impl SampleRatio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            return Err(Error::InvalidRatio(format!("{num}/{den}")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn one() -> Self {
        Self { num: 1, den: 1 }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// ⌈ratio · n⌉, computed exactly.
    pub fn sample_count(&self, n: usize) -> usize {
        let n = n as u128;
        let (num, den) = (self.num as u128, self.den as u128);
        ((num * n).div_ceil(den)) as usize
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl FromStr for SampleRatio {
    type Err = Error;

    /// Accepts `a/b` fractions or plain decimals such as `0.125`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidRatio(s.to_string());
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse().map_err(|_| bad())?;
            let d = d.trim().parse().map_err(|_| bad())?;
            return Self::new(n, d).map_err(|_| bad());
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 18 || (int.is_empty() && frac.is_empty()) {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        if !digits.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let num: u64 = digits.parse().map_err(|_| bad())?;
        Self::new(num, 10u64.pow(frac.len() as u32)).map_err(|_| bad())
    }
}

impl TryFrom<String> for SampleRatio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SampleRatio> for String {
    fn from(r: SampleRatio) -> Self {
        r.to_string()
    }
}

impl fmt::Display for SampleRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl PartialOrd for SampleRatio {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SampleRatio {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

/// Samples ⌈ratio·N⌉ whole conversations from every source without
/// replacement, concatenates them in source order and shuffles the result.
/// A single generator seeded with `seed` drives every draw.
pub fn mix_corpora(corpora: &[Corpus], ratio: SampleRatio, seed: u64) -> Result<Corpus> {
    let first = corpora.first().ok_or(Error::EmptyCorpus)?;
    for c in &corpora[1..] {
        if !c.label_space.same_members(&first.label_space) {
            return Err(Error::LabelSpaceMismatch(format!(
                "`{}` has [{}], `{}` has [{}]",
                first.dataset_id,
                first.label_space.joined(),
                c.dataset_id,
                c.label_space.joined()
            )));
        }
        if c.split != first.split {
            return Err(Error::Config(format!(
                "cannot mix split `{}` with `{}`",
                c.split, first.split
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mixed = Vec::new();
    for corpus in corpora {
        let n = corpus.conversations.len();
        let mut picked = index::sample(&mut rng, n, ratio.sample_count(n)).into_vec();
        picked.sort_unstable();
        mixed.extend(picked.into_iter().map(|i| corpus.conversations[i].clone()));
    }
    mixed.shuffle(&mut rng);

    Corpus::new(MIXED, first.split, mixed, first.label_space.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str, dataset: &str) -> Result<Corpus> {
        read_corpus(
            BufReader::new(Cursor::new(text.to_string())),
            Path::new("mem.jsonl"),
            dataset,
            Split::Train,
            None,
        )
    }

    fn utt(index: usize, speaker: &str, text: &str, label: &str) -> Utterance {
        Utterance {
            index,
            speaker: speaker.into(),
            text: text.into(),
            label: label.into(),
        }
    }

    pub(crate) fn corpus_of(dataset: &str, n: usize, space: &LabelSpace) -> Corpus {
        let conversations = (0..n)
            .map(|i| {
                Conversation::new(
                    format!("{dataset}/c{i}"),
                    vec![utt(0, "A", "hello there", &space.labels()[i % space.len()])],
                )
                .unwrap()
            })
            .collect();
        Corpus::new(dataset, Split::Train, conversations, space.clone()).unwrap()
    }

    #[test]
    fn builtin_label_spaces() {
        assert_eq!(
            LabelSpace::builtin(IEMOCAP).unwrap().labels(),
            ["neutral", "happy", "sad", "excited", "angry", "frustrated"]
        );
        assert_eq!(
            LabelSpace::builtin(MELD).unwrap().labels(),
            ["anger", "disgust", "fear", "joy", "neutral", "sadness", "surprise"]
        );
        assert_eq!(LabelSpace::builtin(EMORYNLP).unwrap().len(), 7);
        assert!(LabelSpace::new(["a"]).is_err());
        assert!(LabelSpace::new(["a", "A"]).is_err());
    }

    #[test]
    fn loads_and_canonicalizes_speakers() {
        let text = r#"{"conversation_id":"s1","dataset":"iemocap","split":"train","utterances":[{"index":0,"speaker":"Ses01_F","text":"hi","label":"Neutral"},{"index":1,"speaker":"Ses01_M","text":"hey","label":"happy"},{"index":2,"speaker":"Ses01_F","text":"so","label":"sad"}]}"#;
        let corpus = parse(text, "iemocap").unwrap();
        let c = &corpus.conversations[0];
        assert_eq!(c.conversation_id, "iemocap/s1");
        let speakers: Vec<_> = c.utterances.iter().map(|u| u.speaker.as_str()).collect();
        assert_eq!(speakers, ["Speaker0", "Speaker1", "Speaker0"]);
        assert_eq!(c.utterances[0].label, "neutral");
    }

    #[test]
    fn empty_conversation_is_rejected() {
        let text = r#"{"conversation_id":"s1","dataset":"meld","split":"train","utterances":[]}"#;
        let err = parse(text, "meld").unwrap_err();
        assert!(err.to_string().contains("empty conversation"), "{err}");
    }

    #[test]
    fn malformed_record_reports_line() {
        let good = r#"{"conversation_id":"s1","dataset":"meld","split":"train","utterances":[{"index":0,"speaker":"a","text":"x","label":"joy"}]}"#;
        let text = format!("{good}\n\n{{not json\n");
        match parse(&text, "meld").unwrap_err() {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn label_outside_space_is_rejected() {
        let text = r#"{"conversation_id":"s1","dataset":"iemocap","split":"train","utterances":[{"index":0,"speaker":"a","text":"x","label":"bored"}]}"#;
        assert!(matches!(
            parse(text, "iemocap").unwrap_err(),
            Error::LabelOutsideSpace { .. }
        ));
    }

    #[test]
    fn custom_dataset_infers_space() {
        let text = r#"{"conversation_id":"s1","dataset":"mine","split":"train","utterances":[{"index":0,"speaker":"a","text":"x","label":"b"},{"index":1,"speaker":"b","text":"y","label":"a"}]}"#;
        let corpus = parse(text, "mine").unwrap();
        assert_eq!(corpus.label_space.labels(), ["a", "b"]);
    }

    #[test]
    fn validation_flags_mislabeled_utterance() {
        let space = LabelSpace::builtin(IEMOCAP).unwrap();
        let mut corpus = corpus_of(IEMOCAP, 3, &space);
        corpus.conversations[1].utterances[0].label = "bored".into();
        let report = validate_corpus(&corpus);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].conversation_id, "iemocap/c1");
        assert_eq!(report.violations[0].index, Some(0));
        assert_eq!(report.conversations, 3);
        assert_eq!(report.utterances, 3);
    }

    #[test]
    fn default_map_spot_checks() {
        let map = UnifiedLabelMap::default_map();
        assert_eq!(map.lookup(IEMOCAP, "happy"), Some("joyful"));
        assert_eq!(map.lookup(MELD, "surprise"), Some("powerful"));
        assert_eq!(map.lookup(MELD, "neutral"), Some("neutral"));
        assert_eq!(map.unified_space.len(), 9);
    }

    #[test]
    fn unmapped_label_names_dataset_and_label() {
        let space = LabelSpace::builtin(IEMOCAP).unwrap();
        let corpus = corpus_of(IEMOCAP, 6, &space);
        // `frustrated` has no row in the shipped table.
        match unify_labels(&corpus, &UnifiedLabelMap::default_map()).unwrap_err() {
            Error::UnmappedLabel { dataset, label } => {
                assert_eq!(dataset, IEMOCAP);
                assert_eq!(label, "frustrated");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_map_rows_rejected() {
        let csv = "dataset,source_label,unified_label\nmeld,joy,joyful\nmeld,joy,sad\n";
        assert!(UnifiedLabelMap::from_csv_str(csv).is_err());
        assert!(UnifiedLabelMap::from_csv_str("a,b,c\nx,y,z\n").is_err());
    }

    #[test]
    fn ratio_parsing_and_counts() {
        let r: SampleRatio = "0.125".parse().unwrap();
        assert_eq!(r, "1/8".parse().unwrap());
        assert_eq!(r.sample_count(7), 1);
        assert_eq!(r.sample_count(8), 1);
        assert_eq!(r.sample_count(9), 2);
        assert_eq!(SampleRatio::one().sample_count(5), 5);
        assert!("0".parse::<SampleRatio>().is_err());
        assert!("1.5".parse::<SampleRatio>().is_err());
        assert!("3/2".parse::<SampleRatio>().is_err());
        assert!("-1".parse::<SampleRatio>().is_err());
        assert_eq!(r.to_string(), "1/8");
    }

    #[test]
    fn mixing_cardinality_and_identity() {
        let space = UnifiedLabelMap::default_map().unified_space;
        let sources: Vec<Corpus> = ["a", "b", "c"].iter().map(|d| corpus_of(d, 8, &space)).collect();
        let mixed = mix_corpora(&sources, "1/4".parse().unwrap(), 7).unwrap();
        assert_eq!(mixed.conversations.len(), 6);
        assert_eq!(mixed.dataset_id, MIXED);
        for d in ["a/", "b/", "c/"] {
            let n = mixed
                .conversations
                .iter()
                .filter(|c| c.conversation_id.starts_with(d))
                .count();
            assert_eq!(n, 2);
        }

        let all = mix_corpora(&sources, SampleRatio::one(), 7).unwrap();
        let mut ids: Vec<_> = all.conversations.iter().map(|c| c.conversation_id.clone()).collect();
        ids.sort();
        let mut expected: Vec<_> = sources
            .iter()
            .flat_map(|c| c.conversations.iter().map(|c| c.conversation_id.clone()))
            .collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn mixing_rejects_different_spaces() {
        let a = corpus_of("a", 4, &LabelSpace::builtin(MELD).unwrap());
        let b = corpus_of("b", 4, &LabelSpace::builtin(IEMOCAP).unwrap());
        assert!(matches!(
            mix_corpora(&[a, b], SampleRatio::one(), 1).unwrap_err(),
            Error::LabelSpaceMismatch(_)
        ));
    }

    proptest::proptest! {
        #[test]
        fn speaker_canonicalization_by_first_appearance(
            names in proptest::collection::vec("[a-e]{1,3}", 1..20)
        ) {
            let utterances: Vec<String> = names
                .iter()
                .enumerate()
                .map(|(i, n)| format!(r#"{{"index":{i},"speaker":"{n}","text":"t","label":"joy"}}"#))
                .collect();
            let line = format!(
                r#"{{"conversation_id":"x","dataset":"meld","split":"train","utterances":[{}]}}"#,
                utterances.join(",")
            );
            let corpus = parse(&line, "meld").unwrap();
            let mut order: Vec<&String> = Vec::new();
            for (u, name) in corpus.conversations[0].utterances.iter().zip(&names) {
                if !order.contains(&name) {
                    order.push(name);
                }
                let k = order.iter().position(|n| *n == name).unwrap();
                proptest::prop_assert_eq!(&u.speaker, &format!("Speaker{k}"));
            }
        }

        #[test]
        fn mix_size_is_sum_of_ceilings(
            sizes in proptest::collection::vec(1usize..20, 1..4),
            num in 1u64..8,
            seed in 0u64..1000,
        ) {
            let space = UnifiedLabelMap::default_map().unified_space;
            let ratio = SampleRatio::new(num, 8).unwrap();
            let sources: Vec<Corpus> = sizes
                .iter()
                .enumerate()
                .map(|(i, n)| corpus_of(&format!("d{i}"), *n, &space))
                .collect();
            let mixed = mix_corpora(&sources, ratio, seed).unwrap();
            let expected: usize = sizes.iter().map(|n| ratio.sample_count(*n)).sum();
            proptest::prop_assert_eq!(mixed.conversations.len(), expected);
            let ids: HashSet<_> = mixed.conversations.iter().map(|c| &c.conversation_id).collect();
            proptest::prop_assert_eq!(ids.len(), expected);
        }

        #[test]
        fn unify_preserves_structure(n in 1usize..12) {
            let map = UnifiedLabelMap::default_map();
            let space = LabelSpace::new(map.source_labels(MELD)).unwrap();
            let corpus = corpus_of(MELD, n, &space);
            let unified = unify_labels(&corpus, &map).unwrap();
            proptest::prop_assert_eq!(unified.conversations.len(), corpus.conversations.len());
            proptest::prop_assert_eq!(unified.utterance_count(), corpus.utterance_count());
            for (a, b) in corpus.conversations.iter().zip(&unified.conversations) {
                proptest::prop_assert_eq!(&a.conversation_id, &b.conversation_id);
                for (u, v) in a.utterances.iter().zip(&b.utterances) {
                    proptest::prop_assert_eq!(&u.text, &v.text);
                    proptest::prop_assert_eq!(map.lookup(MELD, &u.label), Some(v.label.as_str()));
                }
            }
        }
    }

    #[test]
    fn unify_is_idempotent_with_identity_rows() {
        let base = UnifiedLabelMap::default_map();
        let mut rows = base.rows().to_vec();
        for u in base.unified_space.labels() {
            if base.lookup(MELD, u).is_none() {
                rows.push(MapRow {
                    dataset: MELD.into(),
                    source_label: u.clone(),
                    unified_label: u.clone(),
                });
            }
        }
        let map = UnifiedLabelMap::new(rows).unwrap();
        let space = LabelSpace::new(base.source_labels(MELD)).unwrap();
        let once = unify_labels(&corpus_of(MELD, 9, &space), &map).unwrap();
        let twice = unify_labels(&once, &map).unwrap();
        assert_eq!(once, twice);
    }
}
