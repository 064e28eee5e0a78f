//! Inference, label parsing, weighted-F1, seed aggregation, paired t-tests
//! and robustness summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backend::{Backend, GenerationRequest, ModelHandle};
use crate::characteristics::CharacteristicStore;
use crate::context::build_window;
use crate::corpus::{Corpus, LabelSpace, SampleRatio};
use crate::error::{Error, Result};
use crate::pipeline::{run_training, AblationMode, TrainingConfig};
use crate::prompting::{truncate_to_budget, Prompter};

pub const UNKNOWN: &str = "unknown";

/// A parsed model output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "Option<String>", into = "Option<String>")]
pub enum Prediction {
    Label(String),
    Unknown,
}

impl From<Option<String>> for Prediction {
    fn from(v: Option<String>) -> Self {
        v.map_or(Prediction::Unknown, Prediction::Label)
    }
}

impl From<Prediction> for Option<String> {
    fn from(p: Prediction) -> Self {
        match p {
            Prediction::Label(l) => Some(l),
            Prediction::Unknown => None,
        }
    }
}

impl Prediction {
    pub fn label(&self) -> Option<&str> {
        match self {
            Prediction::Label(l) => Some(l),
            Prediction::Unknown => None,
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label().unwrap_or(UNKNOWN))
    }
}

fn normalize(raw: &str) -> String {
    raw.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|w| w.trim_matches('-'))
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Exact match, then unique prefix, then the earliest label occurring as a
/// whole word (sequence) in the output.
pub fn parse_label(raw: &str, space: &LabelSpace) -> Prediction {
    let norm = normalize(raw);
    if norm.is_empty() {
        return Prediction::Unknown;
    }
    if let Some(l) = space.labels().iter().find(|l| **l == norm) {
        return Prediction::Label(l.clone());
    }
    let prefixed: Vec<&String> = space.labels().iter().filter(|l| l.starts_with(&norm)).collect();
    if let [only] = prefixed.as_slice() {
        return Prediction::Label((*only).clone());
    }
    let words: Vec<&str> = norm.split(' ').collect();
    let mut best: Option<(usize, &String)> = None;
    for label in space.labels() {
        let lw: Vec<&str> = label.split_whitespace().collect();
        if lw.is_empty() || lw.len() > words.len() {
            continue;
        }
        if let Some(pos) = words.windows(lw.len()).position(|w| w == lw.as_slice()) {
            if best.is_none_or(|(p, _)| pos < p) {
                best = Some((pos, label));
            }
        }
    }
    best.map_or(Prediction::Unknown, |(_, l)| Prediction::Label(l.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionItem {
    pub conversation_id: String,
    pub target_index: usize,
    pub gold: String,
    pub raw_output: String,
    pub parsed: Prediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub corpus_id: String,
    pub label_space: LabelSpace,
    pub model_id: String,
    pub lineage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub items: Vec<PredictionItem>,
}

impl PredictionSet {
    pub fn golds(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.gold.as_str()).collect()
    }

    pub fn predictions(&self) -> Vec<Prediction> {
        self.items.iter().map(|i| i.parsed.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictOptions {
    pub window_size: usize,
    pub input_budget: usize,
    pub max_new_tokens: usize,
    pub parallelism: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            window_size: 12,
            input_budget: 1024,
            max_new_tokens: 8,
            parallelism: 4,
        }
    }
}

/// Greedy recognition over every utterance of `corpus`. Per-item backend
/// failures become `unknown` with the error kept on the item.
pub fn predict_labels(
    corpus: &Corpus,
    handle: &ModelHandle,
    backend: &dyn Backend,
    prompter: &Prompter,
    options: &PredictOptions,
) -> Result<PredictionSet> {
    if corpus.utterance_count() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut prompts = Vec::with_capacity(corpus.utterance_count());
    for (conversation, j) in corpus.positions() {
        let window = build_window(conversation, j, options.window_size)?;
        let ex = prompter.recognition_example(&window, &corpus.label_space, None, None)?;
        let prompt = truncate_to_budget(&ex.input_text, options.input_budget, backend.tokenizer())?;
        prompts.push((
            conversation.conversation_id.clone(),
            j,
            conversation.utterances[j].label.clone(),
            prompt,
        ));
    }

    let slots: Mutex<Vec<Option<PredictionItem>>> = Mutex::new(vec![None; prompts.len()]);
    let next = AtomicUsize::new(0);
    let workers = options.parallelism.max(1).min(prompts.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((conversation_id, target_index, gold, prompt)) = prompts.get(i) else {
                    break;
                };
                let request = GenerationRequest::new(prompt.clone(), options.max_new_tokens);
                let (raw_output, parsed, error) = match backend.generate(handle, &request) {
                    Ok(r) => {
                        let parsed = parse_label(&r.text, &corpus.label_space);
                        (r.text, parsed, None)
                    }
                    Err(e) => (String::new(), Prediction::Unknown, Some(e.to_string())),
                };
                slots.lock().expect("slots poisoned")[i] = Some(PredictionItem {
                    conversation_id: conversation_id.clone(),
                    target_index: *target_index,
                    gold: gold.clone(),
                    raw_output,
                    parsed,
                    error,
                });
            });
        }
    });
    let items: Vec<PredictionItem> = slots
        .into_inner()
        .expect("slots poisoned")
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect();
    let failed = items.iter().filter(|i| i.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} generations failed and count as unknown", items.len());
    }
    Ok(PredictionSet {
        corpus_id: corpus.corpus_id(),
        label_space: corpus.label_space.clone(),
        model_id: handle.model_id.clone(),
        lineage: handle.lineage_summary(),
        seed: handle.stage_lineage.last().map(|s| s.params.seed),
        items,
    })
}

/// Rows are gold labels, columns predicted labels with a trailing `unknown`
/// column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(space: &LabelSpace) -> Self {
        let k = space.len();
        Self {
            labels: space.labels().to_vec(),
            counts: vec![vec![0; k + 1]; k],
        }
    }

    pub fn from_pairs(space: &LabelSpace, golds: &[&str], preds: &[Prediction]) -> Result<Self> {
        if golds.len() != preds.len() {
            return Err(Error::MismatchedReports(format!(
                "{} golds vs {} predictions",
                golds.len(),
                preds.len()
            )));
        }
        let mut m = Self::new(space);
        let unknown = space.len();
        for (g, p) in golds.iter().zip(preds) {
            let gi = space.index_of(g).ok_or_else(|| Error::LabelOutsideSpace {
                dataset: "predictions".into(),
                label: g.to_string(),
            })?;
            let pi = p.label().and_then(|l| space.index_of(l)).unwrap_or(unknown);
            m.counts[gi][pi] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn unknown_count(&self) -> usize {
        self.counts.iter().map(|r| r[self.labels.len()]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.labels != other.labels {
            return Err(Error::MismatchedReports(
                "confusion matrices over different labels".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn class_metrics(&self) -> Vec<(String, ClassMetrics)> {
        let k = self.labels.len();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c];
                let support: usize = self.counts[c].iter().sum();
                let predicted: usize = self.counts.iter().map(|r| r[c]).sum();
                let fp = predicted - tp;
                let fn_ = support - tp;
                let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
                (
                    self.labels[c].clone(),
                    ClassMetrics {
                        precision: ratio(tp, predicted),
                        recall: ratio(tp, support),
                        f1: ratio(2 * tp, 2 * tp + fp + fn_),
                        support,
                    },
                )
            })
            .collect()
    }

    /// Support-weighted mean of per-class F1.
    pub fn weighted_f1(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let sum: f64 = self.class_metrics().iter().map(|(_, m)| m.support as f64 * m.f1).sum();
        sum / total as f64
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.labels.len()).map(|c| self.counts[c][c]).sum::<usize>() as f64 / total as f64
    }

    pub fn macro_f1(&self) -> f64 {
        let present: Vec<f64> = self
            .class_metrics()
            .into_iter()
            .filter(|(_, m)| m.support > 0)
            .map(|(_, m)| m.f1)
            .collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn weighted_f1(set: &PredictionSet) -> f64 {
    ConfusionMatrix::from_pairs(&set.label_space, &set.golds(), &set.predictions())
        .map(|m| m.weighted_f1())
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub baseline: String,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_id: String,
    pub lineage: String,
    pub size: usize,
    pub weighted_f1: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub seed_scores: Vec<SeedScore>,
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub significance: Vec<Significance>,
    pub unknown_rate: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

pub fn evaluate(set: &PredictionSet) -> Result<EvalReport> {
    if set.items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let m = ConfusionMatrix::from_pairs(&set.label_space, &set.golds(), &set.predictions())?;
    let wf1 = m.weighted_f1();
    Ok(EvalReport {
        corpus_id: set.corpus_id.clone(),
        lineage: set.lineage.clone(),
        size: m.total(),
        weighted_f1: wf1,
        per_class: m.class_metrics().into_iter().collect(),
        seed_scores: vec![SeedScore {
            seed: set.seed,
            weighted_f1: wf1,
        }],
        mean: wf1,
        std: 0.0,
        significance: Vec::new(),
        unknown_rate: m.unknown_count() as f64 / m.total() as f64,
        accuracy: m.accuracy(),
        macro_f1: m.macro_f1(),
        confusion: m,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Mean and sample standard deviation across seeds, with per-class means
/// and a pooled confusion matrix.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::MismatchedReports("no reports".into()))?;
    if reports.len() == 1 {
        return Ok(first.clone());
    }
    for r in &reports[1..] {
        if r.corpus_id != first.corpus_id || r.size != first.size || r.confusion.labels != first.confusion.labels {
            return Err(Error::MismatchedReports(format!(
                "`{}` ({} items) vs `{}` ({} items)",
                first.corpus_id, first.size, r.corpus_id, r.size
            )));
        }
    }
    let seed_scores: Vec<SeedScore> = reports.iter().flat_map(|r| r.seed_scores.clone()).collect();
    let scores: Vec<f64> = seed_scores.iter().map(|s| s.weighted_f1).collect();
    let n = reports.len() as f64;
    let mut per_class = first.per_class.clone();
    for (label, m) in per_class.iter_mut() {
        let all: Vec<&ClassMetrics> = reports.iter().map(|r| &r.per_class[label]).collect();
        m.precision = all.iter().map(|c| c.precision).sum::<f64>() / n;
        m.recall = all.iter().map(|c| c.recall).sum::<f64>() / n;
        m.f1 = all.iter().map(|c| c.f1).sum::<f64>() / n;
    }
    let mut confusion = first.confusion.clone();
    for r in &reports[1..] {
        confusion.add(&r.confusion)?;
    }
    let m = mean(&scores);
    Ok(EvalReport {
        corpus_id: first.corpus_id.clone(),
        lineage: first.lineage.clone(),
        size: first.size,
        weighted_f1: m,
        per_class,
        mean: m,
        std: sample_std(&scores),
        seed_scores,
        significance: Vec::new(),
        unknown_rate: reports.iter().map(|r| r.unknown_rate).sum::<f64>() / n,
        accuracy: reports.iter().map(|r| r.accuracy).sum::<f64>() / n,
        macro_f1: reports.iter().map(|r| r.macro_f1).sum::<f64>() / n,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub t: f64,
    pub df: usize,
    pub mean_difference: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired t-test of `a` against `b`. With zero variance in the
/// differences, p is 1 when they are all zero and 0 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::MismatchedReports(format!("{} vs {} scores", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InsufficientPairs(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let sd = sample_std(&d);
    let df = n - 1;
    if sd == 0.0 {
        let (t, p) = if md == 0.0 {
            (0.0, 1.0)
        } else {
            (md.signum() * f64::INFINITY, 0.0)
        };
        return Ok(PairedTTest {
            t,
            df,
            mean_difference: md,
            p_value: p,
        });
    }
    let t = md / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(PairedTTest {
        t,
        df,
        mean_difference: md,
        p_value: p,
    })
}

/// Pairs runs by seed when every run carries a distinct seed, else by position.
fn pair_runs<'a>(
    a: &'a [PredictionSet],
    b: &'a [PredictionSet],
) -> Result<Vec<(&'a PredictionSet, &'a PredictionSet)>> {
    if a.len() != b.len() {
        return Err(Error::MismatchedReports(format!("{} vs {} runs", a.len(), b.len())));
    }
    let seeds = |s: &[PredictionSet]| -> Option<BTreeMap<u64, usize>> {
        let m: BTreeMap<u64, usize> = s
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.seed.map(|x| (x, i)))
            .collect();
        (m.len() == s.len()).then_some(m)
    };
    let pairs: Vec<_> = match (seeds(a), seeds(b)) {
        (Some(sa), Some(sb)) if sa.keys().eq(sb.keys()) => sa.iter().map(|(k, &i)| (&a[i], &b[sb[k]])).collect(),
        _ => a.iter().zip(b).collect(),
    };
    for (x, y) in &pairs {
        if x.corpus_id != y.corpus_id || x.items.len() != y.items.len() {
            return Err(Error::MismatchedReports(format!(
                "runs over `{}` and `{}` are not on the same test set",
                x.corpus_id, y.corpus_id
            )));
        }
    }
    Ok(pairs)
}

/// Two-sided p of a paired t-test over per-seed weighted-F1.
pub fn paired_significance(runs_a: &[PredictionSet], runs_b: &[PredictionSet]) -> Result<f64> {
    if runs_a.len().min(runs_b.len()) < 2 {
        return Err(Error::InsufficientPairs(runs_a.len().min(runs_b.len())));
    }
    let pairs = pair_runs(runs_a, runs_b)?;
    let a: Vec<f64> = pairs.iter().map(|(x, _)| weighted_f1(x)).collect();
    let b: Vec<f64> = pairs.iter().map(|(_, y)| weighted_f1(y)).collect();
    Ok(paired_t_test(&a, &b)?.p_value)
}

fn exact(x: f64) -> Result<Decimal> {
    if !x.is_finite() {
        return Err(Error::Config(format!("non-finite score {x}")));
    }
    Decimal::from_str(&x.to_string()).map_err(|e| Error::Config(format!("score {x}: {e}")))
}

/// Mean gap between single-corpus and mixed-training scores per dataset.
/// Scores are taken at their shortest decimal form, so hand-computed
/// fixtures reproduce exactly.
pub fn robustness_summary(
    single_scores: &BTreeMap<String, f64>,
    mixed_scores: &BTreeMap<(String, SampleRatio), f64>,
    ratios: &[SampleRatio],
) -> Result<BTreeMap<String, Decimal>> {
    if ratios.is_empty() {
        return Err(Error::Config("no ratios given".into()));
    }
    let mut out = BTreeMap::new();
    for (dataset, &single) in single_scores {
        let single = exact(single)?;
        let mut total = Decimal::ZERO;
        for r in ratios {
            let mixed = mixed_scores
                .get(&(dataset.clone(), *r))
                .ok_or_else(|| Error::MissingCell {
                    dataset: dataset.clone(),
                    ratio: r.to_string(),
                })?;
            total += single - exact(*mixed)?;
        }
        out.insert(dataset.clone(), (total / Decimal::from(ratios.len())).normalize());
    }
    Ok(out)
}

pub fn decimal_to_f64(d: Decimal) -> f64 {
    d.to_f64().unwrap_or(f64::NAN)
}

/// Picks the stage-2 epoch count with the best dev weighted-F1 using the
/// first configured seed. Ties go to fewer epochs.
#[allow(clippy::too_many_arguments)]
pub fn tune_epochs(
    train: &Corpus,
    dev: &Corpus,
    mode: AblationMode,
    backend: &dyn Backend,
    store: Option<&CharacteristicStore>,
    config: &TrainingConfig,
    prompter: &Prompter,
    candidates: &[usize],
) -> Result<(usize, Vec<(usize, f64)>)> {
    let mut scores = Vec::new();
    for &epochs in candidates {
        let cfg = TrainingConfig {
            epochs_stage2: epochs,
            seeds: config.seeds[..1].to_vec(),
            ..config.clone()
        };
        let manifest = run_training(train, mode, backend, store, &cfg, prompter)?;
        let Some((_, handle)) = manifest.handles().into_iter().next() else {
            continue;
        };
        let options = PredictOptions {
            window_size: cfg.window_size,
            input_budget: cfg.input_budget,
            ..PredictOptions::default()
        };
        let preds = predict_labels(dev, &handle, backend, prompter, &options)?;
        scores.push((epochs, weighted_f1(&preds)));
    }
    let best = scores
        .iter()
        .fold(None::<(usize, f64)>, |best, &(e, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((e, s)),
        })
        .ok_or_else(|| Error::Config("no epoch candidate trained successfully".into()))?;
    Ok((best.0, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::corpus::{Conversation, Split, Utterance};
    use proptest::prelude::*;

    fn iemocap() -> LabelSpace {
        LabelSpace::builtin("iemocap").unwrap()
    }

    fn lbl(s: &str) -> Prediction {
        Prediction::Label(s.into())
    }

    #[test]
    fn parsing_rules() {
        let s = iemocap();
        assert_eq!(parse_label("Sad.", &s), lbl("sad"));
        assert_eq!(parse_label("the emotion is frustrated", &s), lbl("frustrated"));
        assert_eq!(parse_label("melancholy", &s), Prediction::Unknown);
        assert_eq!(parse_label("  NEUTRAL ", &s), lbl("neutral"));
        assert_eq!(parse_label("frus", &s), lbl("frustrated"));
        assert_eq!(parse_label("happy then sad", &s), lbl("happy"));
        assert_eq!(parse_label("", &s), Prediction::Unknown);
        assert_eq!(parse_label("unhappy", &s), Prediction::Unknown);
    }

    #[test]
    fn worked_example() {
        let space = LabelSpace::new(["a", "b"]).unwrap();
        let m = ConfusionMatrix::from_pairs(&space, &["a", "a", "b"], &[lbl("a"), lbl("b"), lbl("b")]).unwrap();
        let pc = m.class_metrics();
        assert_eq!(pc[0].1.f1, 2.0 / 3.0);
        assert_eq!(pc[1].1.f1, 2.0 / 3.0);
        assert_eq!(m.weighted_f1(), 2.0 / 3.0);
    }

    #[test]
    fn extremes() {
        let space = LabelSpace::new(["a", "b", "c"]).unwrap();
        let golds = ["a", "b", "c", "a"];
        let right: Vec<_> = golds.iter().map(|g| lbl(g)).collect();
        assert_eq!(
            ConfusionMatrix::from_pairs(&space, &golds, &right)
                .unwrap()
                .weighted_f1(),
            1.0
        );
        let unknown = vec![Prediction::Unknown; 4];
        let m = ConfusionMatrix::from_pairs(&space, &golds, &unknown).unwrap();
        assert_eq!(m.weighted_f1(), 0.0);
        assert_eq!(m.unknown_count(), 4);
    }

    fn report(corpus: &str, score: f64) -> EvalReport {
        let space = LabelSpace::new(["a", "b"]).unwrap();
        let set = PredictionSet {
            corpus_id: corpus.into(),
            label_space: space,
            model_id: "m".into(),
            lineage: String::new(),
            seed: None,
            items: vec![PredictionItem {
                conversation_id: "c".into(),
                target_index: 0,
                gold: "a".into(),
                raw_output: "a".into(),
                parsed: lbl("a"),
                error: None,
            }],
        };
        let mut r = evaluate(&set).unwrap();
        r.weighted_f1 = score;
        r.mean = score;
        r.seed_scores[0].weighted_f1 = score;
        r
    }

    #[test]
    fn aggregation() {
        let reports: Vec<_> = [0.70, 0.72, 0.71, 0.73, 0.69].iter().map(|s| report("t", *s)).collect();
        let agg = aggregate_runs(&reports).unwrap();
        assert_eq!(agg.mean, 0.71);
        assert!((agg.std - 0.025f64.sqrt() / 10.0).abs() < 1e-12);
        assert_eq!(agg.confusion.total(), 5);

        let single = aggregate_runs(&reports[..1]).unwrap();
        assert_eq!(single, reports[0]);
        assert_eq!(single.std, 0.0);

        assert!(matches!(
            aggregate_runs(&[report("t", 0.5), report("u", 0.5)]),
            Err(Error::MismatchedReports(_))
        ));
    }

    #[test]
    fn t_test_edge_cases() {
        assert_eq!(paired_t_test(&[0.5, 0.6], &[0.5, 0.6]).unwrap().p_value, 1.0);
        assert_eq!(paired_t_test(&[0.6, 0.7], &[0.5, 0.6]).unwrap().p_value, 0.0);
        assert!(matches!(
            paired_t_test(&[0.5], &[0.4]),
            Err(Error::InsufficientPairs(1))
        ));
        let r = paired_t_test(&[0.8, 0.6, 0.7], &[0.6, 0.7, 0.5]).unwrap();
        assert!(r.p_value > 0.05 && r.p_value < 1.0);
    }

    #[test]
    fn robustness_examples() {
        let r = |n, d| SampleRatio::new(n, d).unwrap();
        let ratios = [r(1, 8), r(1, 4), r(1, 2), r(1, 1)];
        let single = BTreeMap::from([("meld".to_string(), 0.70)]);
        let mut mixed: BTreeMap<_, _> = ratios
            .iter()
            .zip([0.66, 0.68, 0.69, 0.69])
            .map(|(r, s)| (("meld".to_string(), *r), s))
            .collect();
        let gaps = robustness_summary(&single, &mixed, &ratios).unwrap();
        assert_eq!(gaps["meld"], Decimal::from_str("0.02").unwrap());
        assert_eq!(decimal_to_f64(gaps["meld"]), 0.02);

        let same: BTreeMap<_, _> = ratios.iter().map(|r| (("meld".to_string(), *r), 0.70)).collect();
        assert_eq!(
            robustness_summary(&single, &same, &ratios).unwrap()["meld"],
            Decimal::ZERO
        );

        mixed.remove(&("meld".to_string(), r(1, 2)));
        assert!(matches!(
            robustness_summary(&single, &mixed, &ratios),
            Err(Error::MissingCell { ratio, .. }) if ratio == "1/2"
        ));
    }

    fn test_corpus(n: usize) -> Corpus {
        let labels = ["neutral", "sad", "happy"];
        let utterances = (0..n)
            .map(|i| Utterance {
                index: i,
                speaker: format!("Speaker{}", i % 2),
                text: format!("line {i}"),
                label: labels[i % 3].into(),
            })
            .collect();
        Corpus::new(
            "iemocap",
            Split::Test,
            vec![Conversation::new("iemocap/t", utterances).unwrap()],
            iemocap(),
        )
        .unwrap()
    }

    #[test]
    fn prediction_is_deterministic_on_mock() {
        let b = MockBackend::new(2);
        let c = test_corpus(6);
        let p = Prompter::default();
        let a = predict_labels(&c, &b.base_handle(), &b, &p, &PredictOptions::default()).unwrap();
        let again = predict_labels(&c, &b.base_handle(), &b, &p, &PredictOptions::default()).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.items.len(), 6);
    }

    #[test]
    fn backend_errors_become_unknown() {
        let b = crate::backend::ReplayBackend::default();
        let set = predict_labels(
            &test_corpus(3),
            &b.base_handle(),
            &b,
            &Prompter::default(),
            &PredictOptions::default(),
        )
        .unwrap();
        assert!(set
            .items
            .iter()
            .all(|i| i.parsed == Prediction::Unknown && i.error.is_some()));
        assert_eq!(evaluate(&set).unwrap().unknown_rate, 1.0);
    }

    #[test]
    fn prediction_json_uses_null_for_unknown() {
        let json = serde_json::to_string(&vec![lbl("sad"), Prediction::Unknown]).unwrap();
        assert_eq!(json, r#"["sad",null]"#);
    }

    proptest! {
        #[test]
        fn weighted_f1_permutation_invariant(
            pairs in proptest::collection::vec((0usize..4, 0usize..5), 1..60),
            rot in 0usize..60,
        ) {
            let space = LabelSpace::new(["a", "b", "c", "d"]).unwrap();
            let names = space.labels().to_vec();
            let golds: Vec<&str> = pairs.iter().map(|(g, _)| names[*g].as_str()).collect();
            let preds: Vec<Prediction> = pairs
                .iter()
                .map(|(_, p)| names.get(*p).map_or(Prediction::Unknown, |l| lbl(l)))
                .collect();
            let base = ConfusionMatrix::from_pairs(&space, &golds, &preds).unwrap().weighted_f1();
            let k = rot % golds.len();
            let mut g2 = golds.clone();
            let mut p2 = preds.clone();
            g2.rotate_left(k);
            p2.rotate_left(k);
            let rotated = ConfusionMatrix::from_pairs(&space, &g2, &p2).unwrap().weighted_f1();
            prop_assert_eq!(base, rotated);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn parse_is_idempotent(raw in "[a-zA-Z .!]{0,30}") {
            let s = iemocap();
            let once = parse_label(&raw, &s);
            if let Prediction::Label(l) = &once {
                prop_assert_eq!(parse_label(l, &s), once.clone());
            }
        }
    }
}
