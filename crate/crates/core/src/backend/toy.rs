//! Small trainable model that makes the two-stage pipeline testable end to end.
//!
//! Inputs are bags of hashed words summed into a shared `dim`-sized
//! embedding; each training stage owns a softmax head over a closed
//! vocabulary (labels for stage 2, frequent characteristic words for
//! stage 1). The objective is the masked NLL of the first target token:
//! input positions carry no loss, and because the input is an unordered bag,
//! permuting input tokens leaves every loss term bit-identical.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    apply_stop, check_finetune, stage_descriptor, AdapterParams, Backend, BackendError, FinishReason,
    GenerationRequest, GenerationResult, InFlight, ModelHandle,
};
use crate::digest::{fnv1a, sha256_hex};
use crate::prompting::InstructionExample;

pub const UNK: &str = "<unk>";
const BASE_MODEL: &str = "toy-base";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub dim: usize,
    pub buckets: usize,
    pub init_scale: f64,
    /// Size cap of the stage-1 word vocabulary (excluding `<unk>`).
    pub stage1_vocab: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            buckets: 4096,
            init_scale: 0.1,
            stage1_vocab: 64,
        }
    }
}

/// Which positions contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMask {
    /// Target tokens only (the training objective).
    TargetOnly,
    /// Every position, including input tokens. Diagnostic only.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Head {
    /// `vocab[0]` is always `<unk>`.
    vocab: Vec<String>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Head {
    fn new(vocab: Vec<String>, dim: usize) -> Self {
        let n = vocab.len();
        Self {
            vocab,
            weights: vec![0.0; n * dim],
            bias: vec![0.0; n],
        }
    }

    fn index_of(&self, token: &str) -> usize {
        self.vocab.iter().position(|v| v == token).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    config: ToyConfig,
    embed: Vec<f64>,
    heads: BTreeMap<u8, Head>,
    /// Mean training loss after each epoch of the most recent stage.
    pub loss_trace: Vec<f64>,
}

/// Bag of hashed features with counts, sorted by bucket.
type Features = Vec<(usize, f64)>;

struct Encoded {
    features: Features,
    target: usize,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Splits `input‖target` at the example's char-offset mask boundary.
fn split_at_boundary(example: &InstructionExample) -> (String, String) {
    let full = example.full_text();
    let byte = full
        .char_indices()
        .nth(example.mask_boundary)
        .map(|(i, _)| i)
        .unwrap_or(full.len());
    (full[..byte].to_string(), full[byte..].to_string())
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

impl ToyModel {
    pub fn init(config: ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-config.init_scale, config.init_scale).expect("valid init range");
        let embed = (0..config.buckets * config.dim)
            .map(|_| dist.sample(&mut rng))
            .collect();
        Self {
            config,
            embed,
            heads: BTreeMap::new(),
            loss_trace: Vec::new(),
        }
    }

    pub fn vocab(&self, stage: u8) -> Option<&[String]> {
        self.heads.get(&stage).map(|h| h.vocab.as_slice())
    }

    fn features<S: AsRef<str>>(&self, tokens: &[S]) -> Features {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in tokens {
            let bucket = (fnv1a(t.as_ref().as_bytes()) % self.config.buckets as u64) as usize;
            *counts.entry(bucket).or_default() += 1.0;
        }
        counts.into_iter().collect()
    }

    fn hidden(&self, features: &Features) -> Vec<f64> {
        let dim = self.config.dim;
        let mut h = vec![0.0; dim];
        for &(f, w) in features {
            let row = &self.embed[f * dim..(f + 1) * dim];
            for (hk, ek) in h.iter_mut().zip(row) {
                *hk += w * ek;
            }
        }
        h
    }

    fn probabilities(&self, head: &Head, h: &[f64]) -> Vec<f64> {
        let dim = self.config.dim;
        let mut z: Vec<f64> = head
            .bias
            .iter()
            .enumerate()
            .map(|(v, b)| {
                let row = &head.weights[v * dim..(v + 1) * dim];
                b + row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        softmax_in_place(&mut z);
        z
    }

    fn target_token(example: &InstructionExample) -> Option<String> {
        let (_, target) = split_at_boundary(example);
        tokenize(&target).into_iter().next()
    }

    fn build_vocab(&self, stage: u8, dataset: &[InstructionExample]) -> Vec<String> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ex in dataset {
            if let Some(t) = Self::target_token(ex) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if stage == 1 {
            words.truncate(self.config.stage1_vocab);
        }
        let mut vocab: Vec<String> = words.into_iter().map(|(w, _)| w).collect();
        vocab.sort();
        vocab.insert(0, UNK.to_string());
        vocab
    }

    fn encode(&self, head: &Head, example: &InstructionExample) -> Encoded {
        let (input, _) = split_at_boundary(example);
        Encoded {
            features: self.features(&tokenize(&input)),
            target: Self::target_token(example).map(|t| head.index_of(&t)).unwrap_or(0),
        }
    }

    fn encoded_loss(&self, head: &Head, e: &Encoded) -> f64 {
        let p = self.probabilities(head, &self.hidden(&e.features));
        -p[e.target].max(f64::MIN_POSITIVE).ln()
    }

    /// Loss of one example under the given mask, using the head of its stage.
    pub fn example_loss(&self, example: &InstructionExample, mask: LossMask) -> Option<f64> {
        let head = self.heads.get(&example.stage)?;
        let mut loss = self.encoded_loss(head, &self.encode(head, example));
        if mask == LossMask::None {
            let (input, _) = split_at_boundary(example);
            let tokens = tokenize(&input);
            for k in 1..tokens.len() {
                let h = self.hidden(&self.features(&tokens[..k]));
                let p = self.probabilities(head, &h);
                loss -= p[head.index_of(&tokens[k])].max(f64::MIN_POSITIVE).ln();
            }
        }
        Some(loss)
    }

    /// Mean loss over a dataset; `None` when the model has no head for it.
    pub fn dataset_loss(&self, dataset: &[InstructionExample], mask: LossMask) -> Option<f64> {
        if dataset.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for ex in dataset {
            total += self.example_loss(ex, mask)?;
        }
        Some(total / dataset.len() as f64)
    }

    /// Minibatch SGD on the masked first-token NLL. Returns the mean
    /// dataset loss after each epoch.
    pub fn fit(&mut self, stage: u8, dataset: &[InstructionExample], params: &AdapterParams) -> Vec<f64> {
        let dim = self.config.dim;
        if !self.heads.contains_key(&stage) {
            let vocab = self.build_vocab(stage, dataset);
            self.heads.insert(stage, Head::new(vocab, dim));
        }
        let encoded: Vec<Encoded> = {
            let head = &self.heads[&stage];
            dataset.iter().map(|ex| self.encode(head, ex)).collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_mul(31).wrapping_add(stage as u64));
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let batch = params.batch_size.max(1);
        let lr = params.learning_rate;
        let mut trace = Vec::with_capacity(params.epochs);

        for _ in 0..params.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let head = &self.heads[&stage];
                let vocab_len = head.vocab.len();
                let mut grad_w = vec![0.0; vocab_len * dim];
                let mut grad_b = vec![0.0; vocab_len];
                let mut grad_e: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

                for &i in chunk {
                    let e = &encoded[i];
                    let h = self.hidden(&e.features);
                    let mut g = self.probabilities(head, &h);
                    g[e.target] -= 1.0;
                    let mut grad_h = vec![0.0; dim];
                    for (v, gv) in g.iter().enumerate() {
                        grad_b[v] += gv;
                        let row = &head.weights[v * dim..(v + 1) * dim];
                        let grow = &mut grad_w[v * dim..(v + 1) * dim];
                        for k in 0..dim {
                            grow[k] += gv * h[k];
                            grad_h[k] += gv * row[k];
                        }
                    }
                    for &(f, w) in &e.features {
                        let acc = grad_e.entry(f).or_insert_with(|| vec![0.0; dim]);
                        for k in 0..dim {
                            acc[k] += w * grad_h[k];
                        }
                    }
                }

                let scale = lr / chunk.len() as f64;
                let head = self.heads.get_mut(&stage).expect("head exists");
                for (w, g) in head.weights.iter_mut().zip(&grad_w) {
                    *w -= scale * g;
                }
                for (b, g) in head.bias.iter_mut().zip(&grad_b) {
                    *b -= scale * g;
                }
                for (f, g) in grad_e {
                    for (e, gk) in self.embed[f * dim..(f + 1) * dim].iter_mut().zip(&g) {
                        *e -= scale * gk;
                    }
                }
            }
            let head = &self.heads[&stage];
            let mean = encoded.iter().map(|e| self.encoded_loss(head, e)).sum::<f64>() / encoded.len() as f64;
            trace.push(mean);
        }
        self.loss_trace = trace.clone();
        trace
    }

    /// Most probable non-`<unk>` token of the stage head for `prompt`.
    pub fn predict(&self, stage: u8, prompt: &str) -> Option<String> {
        let head = self.heads.get(&stage)?;
        let p = self.probabilities(head, &self.hidden(&self.features(&tokenize(prompt))));
        let mut best: Option<(usize, f64)> = None;
        for (v, pv) in p.iter().enumerate().skip(1) {
            if best.is_none_or(|(_, bp)| *pv > bp) {
                best = Some((v, *pv));
            }
        }
        best.map(|(v, _)| head.vocab[v].clone())
    }
}

/// Trainable backend over [`ToyModel`]s. Models are kept in memory and,
/// when a directory is configured, persisted as JSON so handles survive
/// across processes.
#[derive(Debug)]
pub struct ToyBackend {
    config: ToyConfig,
    models: RwLock<HashMap<String, Arc<ToyModel>>>,
    dir: Option<PathBuf>,
    in_flight: InFlight,
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new(ToyConfig::default())
    }
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Self {
        Self {
            config,
            models: RwLock::new(HashMap::new()),
            dir: None,
            in_flight: InFlight::default(),
        }
    }

    pub fn with_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dir = Some(dir.into());
        self
    }

    fn model_path(dir: &Path, model_id: &str) -> PathBuf {
        dir.join(format!("{model_id}.json"))
    }

    /// Trained weights behind a handle.
    pub fn model(&self, handle: &ModelHandle) -> Result<Arc<ToyModel>, BackendError> {
        if let Some(m) = self.models.read().expect("model map poisoned").get(&handle.model_id) {
            return Ok(Arc::clone(m));
        }
        let not_found = || BackendError::ModelNotFound(handle.model_id.clone());
        let dir = self.dir.as_ref().ok_or_else(not_found)?;
        let text = fs::read_to_string(Self::model_path(dir, &handle.model_id)).map_err(|_| not_found())?;
        let model: ToyModel = serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let model = Arc::new(model);
        self.models
            .write()
            .expect("model map poisoned")
            .insert(handle.model_id.clone(), Arc::clone(&model));
        Ok(model)
    }
}

impl Backend for ToyBackend {
    fn id(&self) -> &str {
        "toy"
    }

    fn base_handle(&self) -> ModelHandle {
        ModelHandle::base("toy", BASE_MODEL)
    }

    fn generate(&self, handle: &ModelHandle, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let started = Instant::now();
        let stage = handle
            .last_stage()
            .ok_or_else(|| BackendError::ModelNotFound(format!("{} (untrained)", handle.model_id)))?;
        let model = self.model(handle)?;
        let token = model.predict(stage, &request.prompt).unwrap_or_default();
        let (text, _) = apply_stop(&token, request.stop.as_deref());
        Ok(GenerationResult {
            token_count: usize::from(!text.is_empty()),
            text,
            finish_reason: FinishReason::Stop,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn finetune(
        &self,
        handle: &ModelHandle,
        dataset: &[InstructionExample],
        params: &AdapterParams,
    ) -> Result<ModelHandle, BackendError> {
        let stage = check_finetune(self.id(), handle, dataset)?;
        let _guard = self.in_flight.acquire(&handle.model_id)?;
        let mut model = if handle.stage_lineage.is_empty() {
            ToyModel::init(self.config, params.seed)
        } else {
            (*self.model(handle)?).clone()
        };
        let trace = model.fit(stage, dataset, params);
        log::debug!("toy stage {stage}: loss {:?}", trace.last());

        let descriptor = stage_descriptor(stage, dataset, params);
        let params_json = serde_json::to_string(params).expect("serializable params");
        let model_id = format!(
            "toy-{}",
            &sha256_hex(format!(
                "{}|{}|{}",
                handle.model_id, descriptor.dataset_digest, params_json
            ))[..16]
        );
        if let Some(dir) = &self.dir {
            fs::create_dir_all(dir).map_err(|e| BackendError::Protocol(e.to_string()))?;
            let text = serde_json::to_string(&model).map_err(|e| BackendError::Protocol(e.to_string()))?;
            fs::write(Self::model_path(dir, &model_id), text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        }
        self.models
            .write()
            .expect("model map poisoned")
            .insert(model_id.clone(), Arc::new(model));
        Ok(handle.extended(model_id, descriptor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::ExampleMeta;

    fn ex(input: &str, target: &str) -> InstructionExample {
        InstructionExample::new(
            input.into(),
            target.into(),
            2,
            ExampleMeta {
                task: "recognition".into(),
                ..Default::default()
            },
        )
    }

    fn separable() -> Vec<InstructionExample> {
        let cues = [("sunny", "happy"), ("rain", "sad"), ("storm", "angry")];
        (0..60)
            .map(|i| {
                let (cue, label) = cues[i % 3];
                ex(&format!("the weather today w{} is {cue} :", i % 7), label)
            })
            .collect()
    }

    fn params(lr: f64, epochs: usize) -> AdapterParams {
        AdapterParams {
            learning_rate: lr,
            batch_size: 8,
            epochs,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn learns_separable_data() {
        let b = ToyBackend::default();
        let h = b.finetune(&b.base_handle(), &separable(), &params(0.5, 30)).unwrap();
        for (cue, label) in [("sunny", "happy"), ("rain", "sad"), ("storm", "angry")] {
            let r = b
                .generate(&h, &GenerationRequest::new(format!("the weather today is {cue} :"), 4))
                .unwrap();
            assert_eq!(r.text, label);
        }
    }

    #[test]
    fn loss_non_increasing_with_small_lr() {
        let mut m = ToyModel::init(ToyConfig::default(), 3);
        let trace = m.fit(2, &separable(), &params(0.05, 15));
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{trace:?}");
        }
        assert!(trace.last() < trace.first());
    }

    #[test]
    fn permuting_input_tokens_keeps_loss() {
        let data = separable();
        let mut m = ToyModel::init(ToyConfig::default(), 3);
        m.fit(2, &data, &params(0.5, 3));
        let shuffled: Vec<_> = data
            .iter()
            .map(|e| {
                let mut words: Vec<&str> = e.input_text.split(' ').collect();
                words.reverse();
                ex(&words.join(" "), &e.target_text)
            })
            .collect();
        let a = m.dataset_loss(&data, LossMask::TargetOnly).unwrap();
        let b = m.dataset_loss(&shuffled, LossMask::TargetOnly).unwrap();
        assert_eq!(a, b);
        let a = m.dataset_loss(&data, LossMask::None).unwrap();
        let b = m.dataset_loss(&shuffled, LossMask::None).unwrap();
        assert_ne!(a, b, "unmasked loss should see input order");
    }

    #[test]
    fn handles_are_values_and_persist() {
        let dir = tempfile::tempdir().unwrap();
        let b = ToyBackend::default().with_dir(dir.path());
        let base = b.base_handle();
        let h = b.finetune(&base, &separable(), &params(1.0, 2)).unwrap();
        assert!(base.stage_lineage.is_empty());
        assert_eq!(h.stage_lineage.len(), 1);

        let fresh = ToyBackend::default().with_dir(dir.path());
        let req = GenerationRequest::new("the weather is rain :", 2);
        assert_eq!(b.generate(&h, &req).unwrap(), {
            let mut r = fresh.generate(&h, &req).unwrap();
            r.latency_ms = b.generate(&h, &req).unwrap().latency_ms;
            r
        });
    }

    #[test]
    fn untrained_handle_is_not_found() {
        let b = ToyBackend::default();
        assert!(matches!(
            b.generate(&b.base_handle(), &GenerationRequest::new("x", 1)),
            Err(BackendError::ModelNotFound(_))
        ));
    }
}
