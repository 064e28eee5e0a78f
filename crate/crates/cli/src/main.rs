//! `ercforge`: corpus preparation, characteristic extraction, two-stage
//! training, prediction, evaluation and reporting from the command line.

mod commands;
mod config;
mod failure;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ercforge_core::{AblationMode, KeyElement, Split};

use crate::config::BackendKind;

#[derive(Debug, Parser)]
#[command(
    name = "ercforge",
    version,
    about = "Speaker-characteristic ERC experiments",
    max_term_width = 100
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory receiving run directories [default: runs]
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Run directory name instead of <timestamp>-<label>
    #[arg(long, global = true, value_name = "NAME")]
    pub run_name: Option<String>,
    /// Template directory written by `templates export` [default: built-in templates]
    #[arg(long, global = true, value_name = "DIR")]
    pub templates: Option<PathBuf>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a raw JSONL corpus and write it in normalized form
    Ingest(IngestArgs),
    /// Generate speaker characteristics into a characteristic store
    Extract(ExtractArgs),
    /// Write one stage's instruction dataset
    Build(BuildArgs),
    /// Train one model per seed for an ablation mode
    Train(TrainArgs),
    /// Predict labels for a test corpus with every model of a training run
    Predict(PredictArgs),
    /// Score prediction sets, optionally against a baseline
    Eval(EvalArgs),
    /// Sample and mix corpora at a ratio
    Mix(MixArgs),
    /// Train, predict and evaluate over a range of one parameter
    Sweep(SweepArgs),
    /// Tabulate reports and sweeps as CSV and plots
    Report(ReportArgs),
    /// Prompt template utilities
    #[command(subcommand)]
    Templates(TemplatesCommand),
    /// Write a synthetic corpus and matching characteristic store
    Synth(SynthArgs),
    /// Replay a command from its run manifest
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainingArgs {
    /// Learning rate [default: 2e-4]
    #[arg(long = "lr", value_name = "RATE")]
    pub learning_rate: Option<f64>,
    /// Stage-1 batch size [default: 8]
    #[arg(long, value_name = "N")]
    pub batch_size_stage1: Option<usize>,
    /// Stage-2 batch size [default: 16]
    #[arg(long, value_name = "N")]
    pub batch_size_stage2: Option<usize>,
    /// Stage-1 epochs [default: 3]
    #[arg(long, value_name = "N")]
    pub epochs_stage1: Option<usize>,
    /// Stage-2 epochs [default: 3]
    #[arg(long, value_name = "N")]
    pub epochs_stage2: Option<usize>,
    /// Historical utterances before the target [default: 12]
    #[arg(long, value_name = "N")]
    pub window: Option<usize>,
    /// Prompt budget in backend tokens [default: 1024]
    #[arg(long, value_name = "TOKENS")]
    pub input_budget: Option<usize>,
    /// Comma-separated training seeds [default: 0,1,2,3,4]
    #[arg(long, value_delimiter = ',', value_name = "SEEDS")]
    pub seeds: Option<Vec<u64>>,
    /// Key element for characteristics [default: oReact]
    #[arg(long, value_name = "ELEMENT")]
    pub relation: Option<KeyElement>,
    /// Extraction template variant, 1-4 [default: 4]
    #[arg(long, value_name = "ID")]
    pub template: Option<u8>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    /// Model name for the remote backend
    #[arg(long, value_name = "NAME")]
    pub model: Option<String>,
    /// Concurrent backend requests [default: 4]
    #[arg(long, value_name = "N")]
    pub parallelism: Option<usize>,
    /// Recorded characteristic store served by the replay backend
    #[arg(long, value_name = "FILE")]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw conversation JSONL
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Dataset id (iemocap, meld, emorynlp or a custom id)
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Map labels into the unified label space
    #[arg(long)]
    pub unify: bool,
    /// Label map CSV (dataset,source_label,unified_label) [default: built-in map]
    #[arg(long, value_name = "FILE")]
    pub label_map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Corpus JSONL [default: paths.train from the config]
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Comma-separated key elements, or `all` [default: oReact]
    #[arg(long, value_delimiter = ',', value_name = "ELEMENTS")]
    pub relation: Option<Vec<String>>,
    /// Extraction template variant, 1-4 [default: 4]
    #[arg(long, value_name = "ID")]
    pub template: Option<u8>,
    /// Historical utterances before the target [default: 12]
    #[arg(long, value_name = "N")]
    pub window: Option<usize>,
    /// Generation backend [default: mock]
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[command(flatten)]
    pub backend_args: BackendArgs,
    /// Maximum generated tokens per characteristic [default: 24]
    #[arg(long, value_name = "N")]
    pub max_new_tokens: Option<usize>,
    /// Characteristic store to fill [default: $ERCFORGE_CACHE_DIR/characteristics.jsonl]
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Stage to build, 1 or 2
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Ablation mode: woS, wM, wR or wS [default: wS]
    #[arg(long)]
    pub mode: Option<AblationMode>,
    /// Corpus JSONL [default: paths.train from the config]
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Characteristic store [default: $ERCFORGE_CACHE_DIR/characteristics.jsonl]
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Ablation mode: woS, wM, wR or wS [default: wS]
    #[arg(long)]
    pub mode: Option<AblationMode>,
    /// Training corpus JSONL [default: paths.train from the config]
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Characteristic store [default: $ERCFORGE_CACHE_DIR/characteristics.jsonl]
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,
    /// Training backend [default: toy]
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[command(flatten)]
    pub backend_args: BackendArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Pick stage-2 epochs from these candidates by dev weighted-F1
    #[arg(long, value_delimiter = ',', value_name = "EPOCHS")]
    pub tune_epochs: Option<Vec<usize>>,
    /// Dev corpus for --tune-epochs [default: paths.dev from the config]
    #[arg(long, value_name = "FILE")]
    pub dev: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Training run directory
    #[arg(long, value_name = "DIR")]
    pub run: PathBuf,
    /// Test corpus JSONL [default: paths.test from the config]
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub backend_args: BackendArgs,
    /// Maximum generated tokens per label [default: 8]
    #[arg(long, value_name = "N")]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction files or directories (a predict run directory works)
    #[arg(required = true, value_name = "PATH")]
    pub predictions: Vec<PathBuf>,
    /// Baseline prediction files or directories for a paired t-test
    #[arg(long, num_args = 1.., value_name = "PATH")]
    pub baseline: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    /// Corpora to mix; all must share label set and split
    #[arg(long, required = true, num_args = 1.., value_name = "FILE")]
    pub inputs: Vec<PathBuf>,
    /// Fraction of each corpus to keep: 0.125, 0.25, 0.5, 1.0 or a/b [default: 1]
    #[arg(long)]
    pub ratio: Option<ercforge_core::SampleRatio>,
    /// Sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Map labels into the unified label space first
    #[arg(long)]
    pub unify: bool,
    /// Label map CSV [default: built-in map]
    #[arg(long, value_name = "FILE")]
    pub label_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Window,
    Relation,
    Template,
    Ratio,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Parameter to vary
    #[arg(long)]
    pub param: SweepParam,
    /// Comma-separated values, e.g. 1,5,12 or oReact,xIntent
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Ablation mode: woS, wM, wR or wS [default: wS]
    #[arg(long)]
    pub mode: Option<AblationMode>,
    /// Training corpora; several are mixed, which `--param ratio` requires [default: paths.train]
    #[arg(long, num_args = 1.., value_name = "FILE")]
    pub train: Vec<PathBuf>,
    /// Test corpora, each scored separately [default: paths.test]
    #[arg(long, num_args = 1.., value_name = "FILE")]
    pub test: Vec<PathBuf>,
    /// Characteristic store [default: $ERCFORGE_CACHE_DIR/characteristics.jsonl]
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,
    /// Fill missing characteristics with this backend before training
    #[arg(long, value_name = "BACKEND")]
    pub extract_with: Option<BackendKind>,
    /// Seed for mixing training corpora [default: 0]
    #[arg(long)]
    pub mix_seed: Option<u64>,
    /// Training backend [default: toy]
    #[arg(long)]
    pub backend: Option<BackendKind>,
    #[command(flatten)]
    pub backend_args: BackendArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Eval reports, sweep summaries, or run directories containing them
    #[arg(required = true, value_name = "PATH")]
    pub inputs: Vec<PathBuf>,
    /// Also draw SVG plots for window and ratio sweeps
    #[arg(long)]
    pub plots: bool,
    /// Single-corpus reports for the robustness gap of ratio sweeps
    #[arg(long, num_args = 1.., value_name = "REPORT")]
    pub single: Vec<PathBuf>,
    /// Published scores to list beside ours, CSV with header name,corpus_id,weighted_f1
    #[arg(long, value_name = "FILE")]
    pub external: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TemplatesCommand {
    /// Write the built-in templates to an editable directory
    Export {
        /// Target directory [default: a new run directory]
        #[arg(long, value_name = "DIR")]
        dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Conversations per split [default: 100]
    #[arg(long)]
    pub conversations: Option<usize>,
    /// Probability that an utterance keeps the previous label [default: 0.5]
    #[arg(long)]
    pub persistence: Option<f64>,
    /// Seed of the train split; dev and test use the next two [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Historical utterances used for store prompts [default: 12]
    #[arg(long, value_name = "N")]
    pub window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// A command.json from an earlier run
    #[arg(value_name = "MANIFEST")]
    pub manifest: PathBuf,
    /// Fail unless every non-volatile output reproduces byte-for-byte
    #[arg(long)]
    pub verify: bool,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            if e.use_stderr() {
                let rendered = e.render().to_string();
                eprintln!("error[usage]: {}", first_line(&rendered));
                for line in rendered.lines().skip(1) {
                    eprintln!("{line}");
                }
            } else {
                print!("{}", e.render());
            }
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match commands::dispatch(cli, argv[1..].to_vec()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.kind.exit_code())
        }
    }
}

fn first_line(s: &str) -> String {
    s.lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or_default()
        .trim_start_matches("error: ")
        .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use ercforge_core::TrainingConfig;

    fn help(sub: &str) -> String {
        let mut cmd = Cli::command();
        cmd.build();
        cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string()
    }

    #[test]
    fn cli_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_shows_training_defaults() {
        let d = TrainingConfig::default();
        let seeds: Vec<String> = d.seeds.iter().map(u64::to_string).collect();
        let expected = [
            format!("[default: {:e}]", d.learning_rate),
            format!("[default: {}]", d.batch_size_stage1),
            format!("[default: {}]", d.batch_size_stage2),
            format!("[default: {}]", d.epochs_stage2),
            format!("[default: {}]", d.window_size),
            format!("[default: {}]", seeds.join(",")),
            format!("[default: {}]", d.key_element),
            format!("[default: {}]", d.template_variant),
        ];
        for sub in ["train", "build", "sweep"] {
            let text = help(sub);
            for e in &expected {
                assert!(text.contains(e.as_str()), "`{sub} --help` lacks {e}");
            }
        }
        assert!(help("extract").contains(&format!("[default: {}]", d.window_size)));
    }

    #[test]
    fn parses_spec_style_invocations() {
        let cli = Cli::try_parse_from([
            "ercforge", "mix", "--inputs", "a.jsonl", "b.jsonl", "--ratio", "0.125", "--seed", "3",
        ])
        .unwrap();
        match cli.command {
            Command::Mix(m) => {
                assert_eq!(m.ratio.unwrap().to_string(), "1/8");
                assert_eq!(m.inputs.len(), 2);
            }
            other => panic!("{other:?}"),
        }
        let cli = Cli::try_parse_from(["ercforge", "sweep", "--param", "window", "--values", "1,5,12"]).unwrap();
        match cli.command {
            Command::Sweep(s) => assert_eq!(s.values, ["1", "5", "12"]),
            other => panic!("{other:?}"),
        }
        let cli = Cli::try_parse_from(["ercforge", "build", "--stage", "1", "--mode", "wS"]).unwrap();
        assert!(matches!(
            cli.command,
            Command::Build(BuildArgs {
                stage: 1,
                mode: Some(AblationMode::WS),
                ..
            })
        ));
        assert!(Cli::try_parse_from(["ercforge", "build", "--stage", "3"]).is_err());
    }
}
