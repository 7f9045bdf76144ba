use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use qarep_core::harness::pipeline::{StageMetrics, REPORT};
use qarep_core::harness::{run_grad_checks, run_stages, LabelSource, Pipeline, RunConfig, Stage, StudentInit};
use qarep_core::qgen::GeneratorKind;
use qarep_core::student::LossKind;

#[derive(Parser, Debug)]
#[command(name = "qarep", version, about = "Question-answering infused token representations at desk scale")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed; overrides the config file's seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory holding one subdirectory per stage.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the corpus, vocabulary and generated questions.
    SynthData {
        #[arg(long, value_enum)]
        generator: Option<Generator>,
    },
    /// Train the cross-encoder teacher on the labeled set.
    TrainTeacher,
    /// Relabel generated questions with sparse teacher distributions.
    Relabel,
    /// Distill the bi-encoder student.
    Distill {
        #[arg(long, value_enum)]
        labels: Option<Labels>,
        #[arg(long, value_enum)]
        loss: Option<Loss>,
        #[arg(long, value_enum)]
        init: Option<Init>,
    },
    /// Exact match and F1 of student and teacher on the dev set.
    EvalQa,
    /// BERTScore layer selection, zero-shot AUROC and few-shot classifiers.
    EvalParaphrase,
    /// Few-shot NER with question-prompt and random output initialization.
    EvalNer,
    /// Calibrated zero-shot sentiment.
    EvalSentiment {
        /// JSON list of {"negative": [...], "positive": [...]} prompt pairs.
        #[arg(long, value_name = "FILE")]
        prompts: Option<PathBuf>,
    },
    /// Finite-difference checks of every training loss.
    GradCheck {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Every stage in order; writes report.json.
    RunAll,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Generator {
    Rule,
    Cloze,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Labels {
    Teacher,
    Gold,
    Generated,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Loss {
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Init {
    Teacher,
    Random,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(seed)) => RunConfig::with_seed(seed),
        (None, None) => {
            return Err(qarep_core::Error::config("a seed is required: pass --seed or a --config with `seed`").into())
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_metrics(stage: Stage, m: &StageMetrics) {
    for (k, v) in &m.values {
        println!("{}.{k} = {v}", stage.name());
    }
    for (k, v) in &m.notes {
        println!("{}.{k} = {v}", stage.name());
    }
}

fn run_stage(cfg: RunConfig, out: &Path, stage: Stage) -> Result<()> {
    let mut p = Pipeline::open(cfg, out)?;
    run_stages(&mut p, &[stage])?;
    let m = p.stage_metrics(stage)?;
    if stage == Stage::EvalSentiment {
        if let Some(mean) = m.get("mean_accuracy") {
            println!("mean accuracy: {mean:.4}");
        }
        for row in m.tables.get("accuracy_by_prompt").into_iter().flatten() {
            if let Some(v) = row.value {
                println!("prompt {}: {v:.4}", row.index + 1);
            }
        }
        if let Some(r) = m.notes.get("example_rationale") {
            println!("example rationale: {r}");
        }
    } else {
        print_metrics(stage, &m);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::GradCheck { seeds } = &cli.command {
        if seeds.is_empty() {
            bail!(qarep_core::Error::invalid("at least one seed is required"));
        }
        let results = run_grad_checks(seeds)?;
        let mut failed = 0;
        for r in &results {
            println!(
                "{:<13} seed {:<3} max rel error {:.3e}  worst {:<28} {}",
                r.loss,
                r.seed,
                r.max_relative_error,
                r.worst_parameter,
                if r.passed { "PASS" } else { "FAIL" }
            );
            failed += usize::from(!r.passed);
        }
        if failed > 0 {
            bail!("{failed} gradient check(s) exceeded the bound");
        }
        return Ok(());
    }

    let mut cfg = load_config(&cli)?;
    let stage = match cli.command {
        Command::SynthData { generator } => {
            if let Some(g) = generator {
                cfg.generator.kind = match g {
                    Generator::Rule => GeneratorKind::Rule,
                    Generator::Cloze => GeneratorKind::Cloze,
                };
            }
            Stage::Synth
        }
        Command::TrainTeacher => Stage::Teacher,
        Command::Relabel => Stage::Relabel,
        Command::Distill { labels, loss, init } => {
            if let Some(l) = labels {
                cfg.distill.labels = match l {
                    Labels::Teacher => LabelSource::Teacher,
                    Labels::Gold => LabelSource::Gold,
                    Labels::Generated => LabelSource::Generated,
                };
            }
            if let Some(l) = loss {
                cfg.distill.loss = match l {
                    Loss::Soft => LossKind::Soft,
                    Loss::Hard => LossKind::Hard,
                };
            }
            if let Some(i) = init {
                cfg.distill.init = match i {
                    Init::Teacher => StudentInit::Teacher,
                    Init::Random => StudentInit::Random,
                };
            }
            Stage::Distill
        }
        Command::EvalQa => Stage::EvalQa,
        Command::EvalParaphrase => Stage::EvalParaphrase,
        Command::EvalNer => Stage::EvalNer,
        Command::EvalSentiment { prompts } => {
            if let Some(p) = prompts {
                if !p.is_file() {
                    return Err(qarep_core::Error::config(format!("prompt file {} does not exist", p.display())).into());
                }
                cfg.sentiment.prompts = Some(p);
            }
            Stage::EvalSentiment
        }
        Command::RunAll => {
            let report = qarep_core::harness::run_pipeline(&cfg, &cli.out)?;
            for (stage, metrics) in &report.metrics {
                for (k, v) in metrics {
                    println!("{stage}.{k} = {v}");
                }
            }
            println!("report: {}", cli.out.join(REPORT).display());
            println!("run id: {}  stages executed: {}", report.run_id, report.timing.executed);
            return Ok(());
        }
        Command::GradCheck { .. } => unreachable!("handled above"),
    };
    run_stage(cfg, &cli.out, stage).with_context(|| format!("{} failed", stage.name()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<qarep_core::Error>())
                .is_some_and(qarep_core::Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
