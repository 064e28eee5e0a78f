use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Parser;
use serde::{Deserialize, Serialize};

use ercforge_core::backend::{MockBackend, RemoteBackend, RemoteConfig, ReplayBackend, ToyBackend};
use ercforge_core::characteristics::{extract_corpus_characteristics, ExtractionOptions, ExtractionSummary};
use ercforge_core::corpus::{load_corpus, load_corpus_with_space, mix_corpora, unify_labels, validate_corpus};
use ercforge_core::evaluation::{
    aggregate_runs, evaluate, paired_significance, predict_labels, tune_epochs, PredictOptions, Significance,
};
use ercforge_core::pipeline::{
    build_mode_datasets, build_speaker_id_dataset, build_stage1_dataset, build_stage2_dataset, run_training,
};
use ercforge_core::synthetic::SyntheticSpec;
use ercforge_core::{
    AblationMode, Backend, CharacteristicStore, Corpus, EvalReport, KeyElement, LabelSpace, PredictionSet, Prompter,
    RunManifest, SampleRatio, Split, TemplateRegistry, TrainingConfig, UnifiedLabelMap,
};

use crate::config::{BackendKind, RunConfig};
use crate::failure::{Failure, IoContext};
use crate::run::{compare_outputs, CommandManifest, RunDir, COMMAND_MANIFEST};
use crate::{
    BackendArgs, BuildArgs, Cli, Command, EvalArgs, ExtractArgs, GlobalArgs, IngestArgs, MixArgs, PredictArgs,
    RerunArgs, SweepArgs, SweepParam, SynthArgs, TemplatesCommand, TrainArgs, TrainingArgs,
};

pub const ENV_CACHE_DIR: &str = "ERCFORGE_CACHE_DIR";
const DEFAULT_CACHE_DIR: &str = ".ercforge-cache";
const DEFAULT_PARALLELISM: usize = 4;

type Outcome = Result<PathBuf, Failure>;

struct Ctx {
    global: GlobalArgs,
    config: RunConfig,
    argv: Vec<String>,
}

/// Runs one parsed command; returns the run directory it wrote.
pub fn dispatch(cli: Cli, argv: Vec<String>) -> Outcome {
    let config = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        global: cli.global,
        config,
        argv,
    };
    match cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Extract(a) => extract(&ctx, a),
        Command::Build(a) => build(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Mix(a) => mix(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Report(a) => crate::plot::report(ctx.run_dir("report", "report")?, a),
        Command::Templates(TemplatesCommand::Export { dir }) => export_templates(&ctx, dir),
        Command::Synth(a) => synth(&ctx, a),
        Command::Rerun(a) => rerun(a),
    }
}

pub fn cache_dir() -> PathBuf {
    std::env::var_os(ENV_CACHE_DIR)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}

pub fn require_file(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::usage(format!("path does not exist: {}", path.display())))
    }
}

impl Ctx {
    fn out_dir(&self) -> PathBuf {
        self.global
            .out_dir
            .clone()
            .or_else(|| self.config.paths.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn run_dir(&self, label: &str, command: &str) -> Result<RunDir, Failure> {
        RunDir::create(
            &self.out_dir(),
            self.global.run_name.as_deref(),
            label,
            command,
            self.argv.clone(),
            self.config.clone(),
        )
    }

    fn registry(&self) -> Result<TemplateRegistry, Failure> {
        match self.global.templates.as_ref().or(self.config.paths.templates.as_ref()) {
            Some(dir) => {
                require_file(dir)?;
                Ok(TemplateRegistry::load_dir(dir)?)
            }
            None => Ok(TemplateRegistry::builtin()),
        }
    }

    fn prompter(&self, variant: u8) -> Result<Prompter, Failure> {
        let p = Prompter::new(self.registry()?).with_variant(variant);
        p.variant()?;
        Ok(p)
    }

    fn training(&self, a: &TrainingArgs) -> Result<TrainingConfig, Failure> {
        let mut c = self.config.training.clone();
        if let Some(v) = a.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = a.batch_size_stage1 {
            c.batch_size_stage1 = v;
        }
        if let Some(v) = a.batch_size_stage2 {
            c.batch_size_stage2 = v;
        }
        if let Some(v) = a.epochs_stage1 {
            c.epochs_stage1 = v;
        }
        if let Some(v) = a.epochs_stage2 {
            c.epochs_stage2 = v;
        }
        if let Some(v) = a.window {
            c.window_size = v;
        }
        if let Some(v) = a.input_budget {
            c.input_budget = v;
        }
        if let Some(v) = &a.seeds {
            c.seeds = v.clone();
        }
        if let Some(v) = a.relation {
            c.key_element = v;
        }
        if let Some(v) = a.template {
            c.template_variant = v;
        }
        c.validate()?;
        Ok(c)
    }

    fn store_path(&self, flag: Option<&PathBuf>) -> PathBuf {
        flag.cloned()
            .or_else(|| self.config.paths.store.clone())
            .unwrap_or_else(|| cache_dir().join("characteristics.jsonl"))
    }

    fn corpus_path(&self, flag: Option<&PathBuf>, fallback: Option<&PathBuf>, what: &str) -> Result<PathBuf, Failure> {
        let path = flag
            .or(fallback)
            .cloned()
            .ok_or_else(|| Failure::usage(format!("no {what} corpus given (flag or config paths)")))?;
        require_file(&path)?;
        Ok(path)
    }

    fn backend(&self, kind: BackendKind, a: &BackendArgs) -> Result<Box<dyn Backend>, Failure> {
        let spec = &self.config.backend;
        let parallelism = a.parallelism.or(spec.parallelism).unwrap_or(DEFAULT_PARALLELISM);
        Ok(match kind {
            BackendKind::Mock => Box::new(MockBackend::default()),
            BackendKind::Toy => Box::new(ToyBackend::default().with_dir(cache_dir().join("toy"))),
            BackendKind::Replay => {
                let path = a
                    .replay
                    .as_ref()
                    .or(spec.replay.as_ref())
                    .ok_or_else(|| Failure::usage("the replay backend needs --replay <store>"))?;
                require_file(path)?;
                Box::new(ReplayBackend::load(path)?)
            }
            BackendKind::Remote => {
                let model = a
                    .model
                    .clone()
                    .or_else(|| spec.model.clone())
                    .ok_or_else(|| Failure::usage("the remote backend needs --model <name>"))?;
                let mut config = RemoteConfig::from_env(model)
                    .ok_or_else(|| Failure::usage(format!("{} is not set", "ERCFORGE_BASE_URL")))?;
                config.parallelism = parallelism;
                Box::new(RemoteBackend::new(config)?)
            }
        })
    }

    fn backend_kind(&self, flag: Option<BackendKind>, default: BackendKind) -> BackendKind {
        flag.or(self.config.backend.kind).unwrap_or(default)
    }

    fn parallelism(&self, a: &BackendArgs) -> usize {
        a.parallelism
            .or(self.config.backend.parallelism)
            .unwrap_or(DEFAULT_PARALLELISM)
    }

    fn label_map(&self, flag: Option<&PathBuf>) -> Result<UnifiedLabelMap, Failure> {
        match flag.or(self.config.paths.label_map.as_ref()) {
            Some(p) => {
                require_file(p)?;
                Ok(UnifiedLabelMap::from_csv(p)?)
            }
            None => Ok(UnifiedLabelMap::default_map()),
        }
    }
}

/// Loads a corpus in interchange format; dataset and split come from its
/// first record.
pub fn open_corpus(path: &Path, space: Option<LabelSpace>) -> Result<Corpus, Failure> {
    require_file(path)?;
    let file = std::fs::File::open(path).at(path)?;
    let first = std::io::BufReader::new(file)
        .lines()
        .map_while(Result::ok)
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Failure::data(format!("{}: empty corpus", path.display())))?;
    #[derive(Deserialize)]
    struct Head {
        dataset: String,
        split: String,
    }
    let head: Head = serde_json::from_str(&first)
        .map_err(|e| Failure::data(format!("{}:1: malformed record: {e}", path.display())))?;
    let split = Split::from_str(&head.split).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    Ok(load_corpus_with_space(path, &head.dataset, split, space)?)
}

fn open_store(path: &Path, required: bool) -> Result<CharacteristicStore, Failure> {
    if required {
        require_file(path)?;
    }
    Ok(CharacteristicStore::open(path)?)
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestSummary {
    corpus_id: String,
    conversations: usize,
    utterances: usize,
    label_space: LabelSpace,
    unified: bool,
    validation: ercforge_core::corpus::ValidationReport,
}

fn ingest(ctx: &Ctx, a: IngestArgs) -> Outcome {
    require_file(&a.input)?;
    let mut corpus = load_corpus(&a.input, &a.dataset, a.split)?;
    if a.unify {
        corpus = unify_labels(&corpus, &ctx.label_map(a.label_map.as_ref())?)?;
    }
    let validation = validate_corpus(&corpus);
    let mut run = ctx.run_dir(&format!("ingest-{}", slug(&corpus.corpus_id())), "ingest")?;
    run.input(&a.input)?;
    let summary = IngestSummary {
        corpus_id: corpus.corpus_id(),
        conversations: corpus.conversations.len(),
        utterances: corpus.utterance_count(),
        label_space: corpus.label_space.clone(),
        unified: a.unify,
        validation,
    };
    run.write_json("validation.json", &summary)?;
    if !summary.validation.is_valid() {
        let first = &summary.validation.violations[0];
        let n = summary.validation.violations.len();
        run.finish()?;
        return Err(Failure::data(format!(
            "{n} violation(s); first: {} {:?}: {}",
            first.conversation_id, first.index, first.message
        )));
    }
    corpus.write_jsonl(run.join("corpus.jsonl"))?;
    run.output("corpus.jsonl")?;
    let path = run.finish()?;
    println!(
        "ingested {}: {} conversations, {} utterances -> {}",
        summary.corpus_id,
        summary.conversations,
        summary.utterances,
        path.join("corpus.jsonl").display()
    );
    Ok(path)
}

fn parse_elements(values: Option<&[String]>, default: KeyElement) -> Result<Vec<KeyElement>, Failure> {
    let Some(values) = values else {
        return Ok(vec![default]);
    };
    if values.iter().any(|v| v.eq_ignore_ascii_case("all")) {
        return Ok(KeyElement::ALL.to_vec());
    }
    values
        .iter()
        .map(|v| KeyElement::from_str(v).map_err(Failure::from))
        .collect()
}

#[derive(Debug, Serialize)]
struct ExtractReport {
    corpus_id: String,
    store: String,
    backend_id: String,
    variant_id: u8,
    window_size: usize,
    elements: BTreeMap<String, ExtractionSummary>,
}

fn extract(ctx: &Ctx, a: ExtractArgs) -> Outcome {
    let defaults = &ctx.config.training;
    let elements = parse_elements(a.relation.as_deref(), defaults.key_element)?;
    let variant = a.template.unwrap_or(defaults.template_variant);
    let corpus_path = ctx.corpus_path(a.corpus.as_ref(), ctx.config.paths.train.as_ref(), "input")?;
    let corpus = open_corpus(&corpus_path, None)?;
    let prompter = ctx.prompter(variant)?;
    let kind = ctx.backend_kind(a.backend, BackendKind::Mock);
    let backend = ctx.backend(kind, &a.backend_args)?;
    let store_path = ctx.store_path(a.store.as_ref());
    let store = open_store(&store_path, false)?;
    let options = ExtractionOptions {
        window_size: a.window.unwrap_or(defaults.window_size),
        parallelism: ctx.parallelism(&a.backend_args),
        max_new_tokens: a.max_new_tokens.unwrap_or(ExtractionOptions::default().max_new_tokens),
        input_budget: Some(defaults.input_budget),
    };
    let label = if elements.len() == 1 {
        elements[0].name().to_string()
    } else {
        "multi".into()
    };
    let mut run = ctx.run_dir(&format!("extract-{label}"), "extract")?;
    run.input(&corpus_path)?;

    let mut summaries = BTreeMap::new();
    let mut result = Ok(());
    for element in elements {
        match extract_corpus_characteristics(
            &corpus,
            element,
            &prompter,
            backend.as_ref(),
            &backend.base_handle(),
            &store,
            &options,
        ) {
            Ok(s) => {
                println!(
                    "{element}: {} positions, {} cached, {} generated, {} failed, {} over the word limit",
                    s.total, s.cached, s.generated, s.failed, s.flagged
                );
                summaries.insert(element.to_string(), s);
            }
            Err(e) => {
                result = Err(Failure::from(e));
                break;
            }
        }
    }
    // Whatever was generated is kept, even when a later element failed.
    if let Some(parent) = store_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    store.save(&store_path)?;
    run.write_json(
        "extraction.json",
        &ExtractReport {
            corpus_id: corpus.corpus_id(),
            store: store_path.display().to_string(),
            backend_id: backend.id().to_string(),
            variant_id: variant,
            window_size: options.window_size,
            elements: summaries,
        },
    )?;
    let path = run.finish()?;
    result?;
    let failed = store.failures().len();
    if failed > 0 {
        eprintln!(
            "{failed} position(s) failed; see {}",
            CharacteristicStore::errors_path(&store_path).display()
        );
    }
    println!("store: {} ({} records)", store_path.display(), store.len());
    Ok(path)
}

fn build(ctx: &Ctx, a: BuildArgs) -> Outcome {
    let config = ctx.training(&a.training)?;
    let mode = a.mode.unwrap_or(AblationMode::WS);
    let corpus_path = ctx.corpus_path(a.corpus.as_ref(), ctx.config.paths.train.as_ref(), "training")?;
    let corpus = open_corpus(&corpus_path, None)?;
    let prompter = ctx.prompter(config.template_variant)?;
    let tokenizer = ercforge_core::prompting::WhitespaceTokenizer;
    let store_path = ctx.store_path(a.store.as_ref());
    let needs_store = (a.stage == 1 && mode == AblationMode::WS) || (a.stage == 2 && mode.needs_store());
    let store = if needs_store {
        Some(open_store(&store_path, true)?)
    } else {
        None
    };
    let dataset = match (a.stage, mode) {
        (1, AblationMode::WS) => {
            build_stage1_dataset(&corpus, store.as_ref().expect("opened"), &config, &prompter, &tokenizer)?
        }
        (1, AblationMode::WR) => build_speaker_id_dataset(&corpus, &config, &prompter, &tokenizer)?,
        (1, m) => return Err(Failure::usage(format!("mode {m} has no stage 1"))),
        _ => build_stage2_dataset(&corpus, mode, store.as_ref(), &config, &prompter, &tokenizer)?,
    };
    let mut run = ctx.run_dir(&format!("stage{}-{mode}-{}", a.stage, config.key_element), "build")?;
    run.set_training(&config);
    run.input(&corpus_path)?;
    if needs_store {
        run.input(&store_path)?;
    }
    let rel = format!("stage{}.jsonl", a.stage);
    dataset.write_jsonl(run.join(&rel))?;
    run.output(&rel)?;
    run.write_json("dataset.json", &dataset.info())?;
    let path = run.finish()?;
    println!(
        "stage {} ({mode}): {} examples, {} excluded, {} repaired -> {}",
        a.stage,
        dataset.len(),
        dataset.excluded.len(),
        dataset.repaired,
        path.join(rel).display()
    );
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct TuningRecord {
    candidates: Vec<(usize, f64)>,
    chosen: usize,
}

/// Writes datasets, labels and the manifest of one training run into `dir`
/// (relative paths under `prefix`). Returns the manifest.
#[allow(clippy::too_many_arguments)]
fn train_into(
    run: &mut RunDir,
    prefix: &str,
    corpus: &Corpus,
    mode: AblationMode,
    backend: &dyn Backend,
    store: Option<&CharacteristicStore>,
    config: &TrainingConfig,
    prompter: &Prompter,
) -> Result<RunManifest, Failure> {
    let datasets = build_mode_datasets(corpus, mode, store, config, prompter, backend.tokenizer())?;
    std::fs::create_dir_all(run.join(&format!("{prefix}datasets"))).at(&run.path)?;
    for ds in &datasets {
        let rel = format!("{prefix}datasets/stage{}.jsonl", ds.stage);
        ds.write_jsonl(run.join(&rel))?;
        run.output(&rel)?;
    }
    let manifest = run_training(corpus, mode, backend, store, config, prompter)?;
    let rel = format!("{prefix}manifest.json");
    manifest.save(run.join(&rel))?;
    run.volatile_output(&rel)?;
    run.write_json(&format!("{prefix}labels.json"), &corpus.label_space)?;
    Ok(manifest)
}

fn incomplete(manifest: &RunManifest) -> Option<Failure> {
    let failed: Vec<String> = manifest
        .runs
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("seed {}: {e}", r.seed)))
        .collect();
    (!failed.is_empty()).then(|| {
        Failure::backend(format!(
            "{} of {} seeds failed; {}",
            failed.len(),
            manifest.runs.len(),
            failed.join("; ")
        ))
    })
}

fn train(ctx: &Ctx, a: TrainArgs) -> Outcome {
    let mut config = ctx.training(&a.training)?;
    let mode = a.mode.unwrap_or(AblationMode::WS);
    let corpus_path = ctx.corpus_path(a.corpus.as_ref(), ctx.config.paths.train.as_ref(), "training")?;
    let corpus = open_corpus(&corpus_path, None)?;
    let prompter = ctx.prompter(config.template_variant)?;
    let store_path = ctx.store_path(a.store.as_ref());
    let store = if mode.needs_store() {
        Some(open_store(&store_path, true)?)
    } else {
        None
    };
    let kind = ctx.backend_kind(a.backend, BackendKind::Toy);
    let backend = ctx.backend(kind, &a.backend_args)?;

    let mut run = ctx.run_dir(&format!("{mode}-{}", config.key_element), "train")?;
    run.set_training(&config);
    run.input(&corpus_path)?;
    if store.is_some() {
        run.input(&store_path)?;
    }
    if let Some(candidates) = &a.tune_epochs {
        let dev_path = ctx.corpus_path(a.dev.as_ref(), ctx.config.paths.dev.as_ref(), "dev")?;
        let dev = open_corpus(&dev_path, Some(corpus.label_space.clone()))?;
        run.input(&dev_path)?;
        let (chosen, scores) = tune_epochs(
            &corpus,
            &dev,
            mode,
            backend.as_ref(),
            store.as_ref(),
            &config,
            &prompter,
            candidates,
        )?;
        println!("tuned stage-2 epochs: {chosen} (dev weighted-F1 by candidate: {scores:?})");
        run.write_json(
            "tuning.json",
            &TuningRecord {
                candidates: scores,
                chosen,
            },
        )?;
        config.epochs_stage2 = chosen;
        run.set_training(&config);
    }
    let manifest = train_into(
        &mut run,
        "",
        &corpus,
        mode,
        backend.as_ref(),
        store.as_ref(),
        &config,
        &prompter,
    )?;
    let path = run.finish()?;
    println!(
        "trained {} of {} seeds ({mode}, {}) on {} -> {}",
        manifest.handles().len(),
        manifest.runs.len(),
        config.key_element,
        manifest.corpus_id,
        path.display()
    );
    match incomplete(&manifest) {
        Some(f) => Err(f),
        None => Ok(path),
    }
}

fn load_train_run(dir: &Path) -> Result<(RunManifest, LabelSpace), Failure> {
    let dir = if dir.is_file() {
        dir.parent().unwrap_or(Path::new("."))
    } else {
        dir
    };
    let manifest_path = dir.join("manifest.json");
    require_file(&manifest_path)?;
    let manifest = RunManifest::load(&manifest_path)?;
    let labels_path = dir.join("labels.json");
    require_file(&labels_path)?;
    let labels: LabelSpace = serde_json::from_str(&std::fs::read_to_string(&labels_path).at(&labels_path)?)?;
    Ok((manifest, labels))
}

/// Predicts with every completed seed; files go to `<prefix>predictions/`.
fn predict_into(
    run: &mut RunDir,
    prefix: &str,
    manifest: &RunManifest,
    corpus: &Corpus,
    backend: &dyn Backend,
    prompter: &Prompter,
    options: &PredictOptions,
) -> Result<Vec<PredictionSet>, Failure> {
    let mut sets = Vec::new();
    for (seed, handle) in manifest.handles() {
        let set = predict_labels(corpus, &handle, backend, prompter, options)?;
        if let Some(err) = set.items.iter().find_map(|i| i.error.as_ref()) {
            if set.items.iter().all(|i| i.error.is_some()) {
                return Err(Failure::backend(format!("seed {seed}: every prediction failed: {err}")));
            }
        }
        run.write_json(&format!("{prefix}predictions/seed-{seed}.json"), &set)?;
        sets.push(set);
    }
    Ok(sets)
}

fn predict_options(config: &TrainingConfig, parallelism: usize, max_new_tokens: Option<usize>) -> PredictOptions {
    PredictOptions {
        window_size: config.window_size,
        input_budget: config.input_budget,
        max_new_tokens: max_new_tokens.unwrap_or(PredictOptions::default().max_new_tokens),
        parallelism,
    }
}

fn predict(ctx: &Ctx, a: PredictArgs) -> Outcome {
    let (manifest, labels) = load_train_run(&a.run)?;
    let corpus_path = ctx.corpus_path(a.corpus.as_ref(), ctx.config.paths.test.as_ref(), "test")?;
    let corpus = open_corpus(&corpus_path, Some(labels))?;
    let kind = BackendKind::from_id(&manifest.backend_id)
        .ok_or_else(|| Failure::data(format!("unknown backend `{}` in manifest", manifest.backend_id)))?;
    let backend = ctx.backend(kind, &a.backend_args)?;
    let prompter = ctx.prompter(manifest.config.template_variant)?;
    let options = predict_options(&manifest.config, ctx.parallelism(&a.backend_args), a.max_new_tokens);
    let mut run = ctx.run_dir(
        &format!("predict-{}-{}", manifest.mode, manifest.config.key_element),
        "predict",
    )?;
    run.input(&corpus_path)?;
    run.input(&a.run.join("manifest.json"))?;
    let sets = predict_into(&mut run, "", &manifest, &corpus, backend.as_ref(), &prompter, &options)?;
    let path = run.finish()?;
    println!(
        "predicted {} items x {} seeds on {} -> {}",
        corpus.utterance_count(),
        sets.len(),
        corpus.corpus_id(),
        path.join("predictions").display()
    );
    Ok(path)
}

/// Prediction files under `paths`; directories contribute their
/// `predictions/*.json` (or `*.json`) in name order.
fn prediction_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut files = Vec::new();
    for p in paths {
        require_file(p)?;
        if p.is_file() {
            files.push(p.clone());
            continue;
        }
        let dir = if p.join("predictions").is_dir() {
            p.join("predictions")
        } else {
            p.clone()
        };
        let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
            .at(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|f| {
                f.extension().is_some_and(|x| x == "json") && f.file_name().is_some_and(|n| n != COMMAND_MANIFEST)
            })
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(Failure::usage(format!("no prediction files in {}", dir.display())));
        }
        files.extend(found);
    }
    Ok(files)
}

fn load_predictions(paths: &[PathBuf]) -> Result<Vec<(PathBuf, PredictionSet)>, Failure> {
    prediction_files(paths)?
        .into_iter()
        .map(|f| {
            let text = std::fs::read_to_string(&f).at(&f)?;
            let set: PredictionSet = serde_json::from_str(&text)
                .map_err(|e| Failure::data(format!("{}: not a prediction set: {e}", f.display())))?;
            Ok((f, set))
        })
        .collect()
}

/// Per-seed reports plus the aggregate under `<prefix>`; significance
/// against `baseline` when given.
fn evaluate_into(
    run: &mut RunDir,
    prefix: &str,
    sets: &[PredictionSet],
    baseline: Option<&[PredictionSet]>,
) -> Result<EvalReport, Failure> {
    let mut reports = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        let report = evaluate(set)?;
        let name = set.seed.map_or_else(|| format!("run-{i}"), |s| format!("seed-{s}"));
        run.write_json(&format!("{prefix}reports/{name}.json"), &report)?;
        reports.push(report);
    }
    let mut aggregate = aggregate_runs(&reports)?;
    if let Some(base) = baseline {
        let p_value = paired_significance(sets, base)?;
        aggregate.significance.push(Significance {
            baseline: base.first().map(|b| b.lineage.clone()).unwrap_or_default(),
            p_value,
        });
    }
    run.write_json(&format!("{prefix}report.json"), &aggregate)?;
    Ok(aggregate)
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Outcome {
    let sets = load_predictions(&a.predictions)?;
    let baseline = if a.baseline.is_empty() {
        None
    } else {
        Some(load_predictions(&a.baseline)?)
    };
    let mut run = ctx.run_dir("eval", "eval")?;
    for (f, _) in sets.iter().chain(baseline.iter().flatten()) {
        run.input(f)?;
    }
    let sets: Vec<PredictionSet> = sets.into_iter().map(|(_, s)| s).collect();
    let baseline: Option<Vec<PredictionSet>> = baseline.map(|b| b.into_iter().map(|(_, s)| s).collect());
    let report = evaluate_into(&mut run, "", &sets, baseline.as_deref())?;
    let path = run.finish()?;
    print!(
        "weighted-F1 {:.4} ± {:.4} over {} run(s) on {}",
        report.mean,
        report.std,
        report.seed_scores.len(),
        report.corpus_id
    );
    match report.significance.first() {
        Some(s) => println!(", p = {:.3e} vs {}", s.p_value, s.baseline),
        None => println!(),
    }
    println!("report: {}", path.join("report.json").display());
    Ok(path)
}

#[derive(Debug, Serialize)]
struct MixSource {
    corpus_id: String,
    conversations: usize,
    sampled: usize,
}

#[derive(Debug, Serialize)]
struct MixRecord {
    ratio: SampleRatio,
    seed: u64,
    sources: Vec<MixSource>,
    conversations: usize,
    utterances: usize,
}

fn load_mix_inputs(
    ctx: &Ctx,
    inputs: &[PathBuf],
    unify: bool,
    label_map: Option<&PathBuf>,
) -> Result<Vec<Corpus>, Failure> {
    let map = if unify { Some(ctx.label_map(label_map)?) } else { None };
    inputs
        .iter()
        .map(|p| {
            let c = open_corpus(p, None)?;
            match &map {
                Some(m) => Ok(unify_labels(&c, m)?),
                None => Ok(c),
            }
        })
        .collect()
}

fn mix(ctx: &Ctx, a: MixArgs) -> Outcome {
    let ratio = a.ratio.unwrap_or_else(SampleRatio::one);
    let seed = a.seed.unwrap_or(0);
    let corpora = load_mix_inputs(ctx, &a.inputs, a.unify, a.label_map.as_ref())?;
    let mixed = mix_corpora(&corpora, ratio, seed)?;
    let mut run = ctx.run_dir(&format!("mix-{}", slug(&ratio.to_string())), "mix")?;
    for p in &a.inputs {
        run.input(p)?;
    }
    mixed.write_jsonl(run.join("mixed.jsonl"))?;
    run.output("mixed.jsonl")?;
    run.write_json(
        "mix.json",
        &MixRecord {
            ratio,
            seed,
            sources: corpora
                .iter()
                .map(|c| MixSource {
                    corpus_id: c.corpus_id(),
                    conversations: c.conversations.len(),
                    sampled: ratio.sample_count(c.conversations.len()),
                })
                .collect(),
            conversations: mixed.conversations.len(),
            utterances: mixed.utterance_count(),
        },
    )?;
    let path = run.finish()?;
    println!(
        "mixed {} corpora at ratio {ratio}: {} conversations -> {}",
        corpora.len(),
        mixed.conversations.len(),
        path.join("mixed.jsonl").display()
    );
    Ok(path)
}

/// One (value, test corpus) cell of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub corpus_id: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
    pub report: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub param: String,
    pub mode: AblationMode,
    pub cells: Vec<SweepCell>,
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Outcome {
    let base = ctx.training(&a.training)?;
    let mode = a.mode.unwrap_or(AblationMode::WS);
    let train_paths: Vec<PathBuf> = if a.train.is_empty() {
        vec![ctx.corpus_path(None, ctx.config.paths.train.as_ref(), "training")?]
    } else {
        a.train.clone()
    };
    let test_paths: Vec<PathBuf> = if a.test.is_empty() {
        vec![ctx.corpus_path(None, ctx.config.paths.test.as_ref(), "test")?]
    } else {
        a.test.clone()
    };
    if a.param != SweepParam::Ratio && train_paths.len() > 1 {
        return Err(Failure::usage("several --train corpora need --param ratio"));
    }
    let sources = load_mix_inputs(ctx, &train_paths, false, None)?;
    let store_path = ctx.store_path(a.store.as_ref());
    let store = if mode.needs_store() {
        Some(open_store(&store_path, a.extract_with.is_none())?)
    } else {
        None
    };
    let kind = ctx.backend_kind(a.backend, BackendKind::Toy);
    let backend = ctx.backend(kind, &a.backend_args)?;
    let extractor = match a.extract_with {
        Some(k) if store.is_some() => Some(ctx.backend(k, &a.backend_args)?),
        _ => None,
    };
    let param_name = format!("{:?}", a.param).to_lowercase();
    let mut run = ctx.run_dir(&format!("sweep-{param_name}-{mode}-{}", base.key_element), "sweep")?;
    run.set_training(&base);
    for p in train_paths.iter().chain(&test_paths) {
        run.input(p)?;
    }
    let mix_seed = a.mix_seed.unwrap_or(0);

    let mut cells = Vec::new();
    for value in &a.values {
        let mut config = base.clone();
        let mut train = sources[0].clone();
        let bad = |e: String| Failure::usage(format!("--values {value}: {e}"));
        match a.param {
            SweepParam::Window => config.window_size = value.parse().map_err(|e| bad(format!("{e}")))?,
            SweepParam::Relation => {
                config.key_element = value.parse().map_err(|e: ercforge_core::Error| bad(e.to_string()))?
            }
            SweepParam::Template => config.template_variant = value.parse().map_err(|e| bad(format!("{e}")))?,
            SweepParam::Ratio => {
                let r: SampleRatio = value.parse().map_err(|e: ercforge_core::Error| bad(e.to_string()))?;
                train = mix_corpora(&sources, r, mix_seed)?;
            }
        }
        config.validate()?;
        let prompter = ctx.prompter(config.template_variant)?;
        if let (Some(ex), Some(store)) = (&extractor, &store) {
            let options = ExtractionOptions {
                window_size: config.window_size,
                parallelism: ctx.parallelism(&a.backend_args),
                input_budget: Some(config.input_budget),
                ..ExtractionOptions::default()
            };
            let s = extract_corpus_characteristics(
                &train,
                config.key_element,
                &prompter,
                ex.as_ref(),
                &ex.base_handle(),
                store,
                &options,
            )?;
            log::info!(
                "{value}: extracted {} characteristics ({} cached)",
                s.generated,
                s.cached
            );
            store.save(&store_path)?;
        }
        let prefix = format!("{param_name}-{}/", slug(value));
        let manifest = train_into(
            &mut run,
            &prefix,
            &train,
            mode,
            backend.as_ref(),
            store.as_ref(),
            &config,
            &prompter,
        )?;
        if let Some(f) = incomplete(&manifest) {
            return Err(f);
        }
        let options = predict_options(&config, ctx.parallelism(&a.backend_args), None);
        for test_path in &test_paths {
            let test = open_corpus(test_path, Some(train.label_space.clone()))?;
            let sub = format!("{prefix}{}/", slug(&test.corpus_id()));
            let sets = predict_into(&mut run, &sub, &manifest, &test, backend.as_ref(), &prompter, &options)?;
            let report = evaluate_into(&mut run, &sub, &sets, None)?;
            println!(
                "{param_name}={value} {}: weighted-F1 {:.4} ± {:.4}",
                report.corpus_id, report.mean, report.std
            );
            cells.push(SweepCell {
                value: value.clone(),
                corpus_id: report.corpus_id.clone(),
                mean: report.mean,
                std: report.std,
                seeds: report.seed_scores.len(),
                report: format!("{sub}report.json"),
            });
        }
    }
    let summary = SweepSummary {
        param: param_name,
        mode,
        cells,
    };
    run.write_json("sweep.json", &summary)?;
    let csv = crate::plot::sweep_csv(&summary);
    std::fs::write(run.join("sweep.csv"), csv).at(&run.path)?;
    run.output("sweep.csv")?;
    let path = run.finish()?;
    println!("sweep: {}", path.join("sweep.json").display());
    Ok(path)
}

fn export_templates(ctx: &Ctx, dir: Option<PathBuf>) -> Outcome {
    let registry = ctx.registry()?;
    let mut run = match dir {
        Some(d) => RunDir::create(
            d.parent().unwrap_or(Path::new(".")),
            Some(
                &d.file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_else(|| "templates".into()),
            ),
            "",
            "templates export",
            ctx.argv.clone(),
            ctx.config.clone(),
        )?,
        None => ctx.run_dir("templates", "templates export")?,
    };
    registry.write_dir(&run.path)?;
    let mut files: Vec<String> = std::fs::read_dir(&run.path)
        .at(&run.path)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().to_string()))
        .collect();
    files.sort();
    for f in &files {
        run.output(f)?;
    }
    let path = run.finish()?;
    println!("exported {} template files -> {}", files.len(), path.display());
    Ok(path)
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Outcome {
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        conversations: a.conversations.unwrap_or(defaults.conversations),
        persistence: a.persistence.unwrap_or(defaults.persistence),
        ..defaults
    };
    if !(0.0..=1.0).contains(&spec.persistence) {
        return Err(Failure::usage("--persistence must lie in [0, 1]"));
    }
    let seed = a.seed.unwrap_or(0);
    let training = &ctx.config.training;
    let prompter = ctx.prompter(training.template_variant)?;
    let mut run = ctx.run_dir("synth", "synth")?;
    let mut store = None;
    for (i, split) in [Split::Train, Split::Dev, Split::Test].into_iter().enumerate() {
        let corpus = spec.generate(split, seed + i as u64)?;
        let rel = format!("{split}.jsonl");
        corpus.write_jsonl(run.join(&rel))?;
        run.output(&rel)?;
        if split == Split::Train {
            store = Some(spec.characteristic_store(
                &corpus,
                &prompter,
                training.key_element,
                a.window.unwrap_or(training.window_size),
                seed,
            )?);
        }
    }
    store
        .expect("train split generated")
        .save(run.join("characteristics.jsonl"))?;
    run.output("characteristics.jsonl")?;
    let path = run.finish()?;
    println!("synthetic train/dev/test and characteristics -> {}", path.display());
    Ok(path)
}

fn rerun(a: RerunArgs) -> Outcome {
    let manifest_path = if a.manifest.is_dir() {
        a.manifest.join(COMMAND_MANIFEST)
    } else {
        a.manifest.clone()
    };
    require_file(&manifest_path)?;
    let original = CommandManifest::load(&manifest_path)?;
    let mut argv = vec!["ercforge".to_string()];
    argv.extend(original.argv.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| Failure::usage(format!("stored argv no longer parses: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(Failure::usage("cannot rerun a rerun"));
    }
    let path = dispatch(cli, original.argv.clone())?;
    println!("reran `{}` -> {}", original.command, path.display());
    if a.verify {
        let fresh = CommandManifest::load(&path.join(COMMAND_MANIFEST))?;
        let differing = compare_outputs(&original, &fresh);
        if !differing.is_empty() {
            return Err(Failure::data(format!(
                "outputs differ from the manifest: {}",
                differing.join(", ")
            )));
        }
        println!(
            "verified {} output(s) byte-identical",
            original.outputs.iter().filter(|o| !o.volatile).count()
        );
    }
    Ok(path)
}
