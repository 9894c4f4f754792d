use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use polylens::artifacts::read_json;
use polylens::{ingest_conllu, run_stage, MissingArtifact, PipelineConfig, STAGES};
use polylens_core::interventions::AblationReport;
use polylens_core::lm::HookScope;
use polylens_core::sae::SaeVariant;

#[derive(Parser)]
#[command(name = "polylens", version, about = "Multilingual concept features in a toy LM, end to end")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for activation extraction. Output does not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Partition {
    Monolingual,
    Multilingual,
    Massive,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    All,
    Last,
}

#[derive(Subcommand)]
enum Command {
    GenCorpus,
    /// Parse a CoNLL-U file into annotated-sentence JSONL.
    IngestConllu {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        language: String,
    },
    TrainLm,
    EvalPairs,
    ExtractActs {
        /// Block whose output is cached; defaults to the configured hook layer.
        #[arg(long)]
        layer: Option<usize>,
    },
    TrainSae {
        #[arg(long)]
        variant: Option<SaeVariant>,
    },
    EvalSae,
    ProfileMaxActs,
    TrainProbes,
    Attribute {
        /// exact, atp or ig
        #[arg(long)]
        estimator: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        ig_steps: Option<usize>,
        /// Drop the 1/K factor from the integrated-gradients sum.
        #[arg(long)]
        ig_no_normalize: bool,
    },
    Overlap,
    RankMultilingual,
    Ablate {
        /// Print mean accuracy after ablating this partition.
        #[arg(long)]
        partition: Option<Partition>,
    },
    Steer {
        #[arg(long)]
        feature: Option<u32>,
        #[arg(long)]
        mult: Option<f32>,
        #[arg(long)]
        scope: Option<Scope>,
    },
    Report,
    /// Every stage in order.
    All,
}

fn apply(command: &Command, config: &mut PipelineConfig) {
    match command {
        Command::TrainSae { variant: Some(v) } => config.sae.variant = *v,
        Command::ExtractActs { layer: Some(l) } => config.lm.hook_layer = *l,
        Command::Attribute {
            estimator,
            k,
            ig_steps,
            ig_no_normalize,
        } => {
            let a = &mut config.attribution;
            if let Some(e) = estimator {
                a.estimator = e.clone();
            }
            if let Some(k) = k {
                a.k = *k;
            }
            if let Some(s) = ig_steps {
                a.ig_steps = *s;
            }
            if *ig_no_normalize {
                a.ig_normalize = false;
            }
        }
        Command::Steer { feature, mult, scope } => {
            let s = &mut config.steer;
            if feature.is_some() {
                s.feature = *feature;
            }
            if let Some(m) = mult {
                s.multipliers = vec![*m];
            }
            if let Some(scope) = scope {
                s.scope = match scope {
                    Scope::All => HookScope::All,
                    Scope::Last => HookScope::Last,
                };
            }
        }
        _ => {}
    }
}

fn stage_name(command: &Command) -> &'static str {
    match command {
        Command::GenCorpus => "gen-corpus",
        Command::IngestConllu { .. } => "ingest-conllu",
        Command::TrainLm => "train-lm",
        Command::EvalPairs => "eval-pairs",
        Command::ExtractActs { .. } => "extract-acts",
        Command::TrainSae { .. } => "train-sae",
        Command::EvalSae => "eval-sae",
        Command::ProfileMaxActs => "profile-max-acts",
        Command::TrainProbes => "train-probes",
        Command::Attribute { .. } => "attribute",
        Command::Overlap => "overlap",
        Command::RankMultilingual => "rank-multilingual",
        Command::Ablate { .. } => "ablate",
        Command::Steer { .. } => "steer",
        Command::Report => "report",
        Command::All => "all",
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = PipelineConfig::load(cli.global.config.as_deref())?;
    if let Some(d) = cli.global.out_dir {
        config.out_dir = d;
    }
    if let Some(t) = cli.global.threads {
        config.threads = t;
    }
    apply(&cli.command, &mut config);
    config.validate()?;
    let stages: Vec<&str> = match &cli.command {
        Command::All => STAGES.to_vec(),
        Command::IngestConllu { input, language } => {
            let e = ingest_conllu(&config, input, language)?;
            eprintln!("ingest-conllu: wrote {}", e.outputs[0].path.display());
            return Ok(());
        }
        c => vec![stage_name(c)],
    };
    for s in stages {
        let e = run_stage(s, &config)?;
        eprintln!("{s}: {:.1}s", e.wall_time_s);
    }
    if let Command::Ablate { partition: Some(p) } = cli.command {
        let report: AblationReport = read_json(&config.path("ablation"))?;
        let n = report.rows.len().max(1) as f64;
        let (name, acc) = match p {
            Partition::Monolingual => ("monolingual", report.rows.iter().map(|r| r.monolingual).sum::<f64>()),
            Partition::Multilingual => ("multilingual", report.rows.iter().map(|r| r.multilingual).sum::<f64>()),
            Partition::Massive => ("massive", report.rows.iter().map(|r| r.massive).sum::<f64>()),
        };
        let before = report.rows.iter().map(|r| r.before).sum::<f64>() / n;
        println!("mean probe accuracy: before {before:.4}, after {name} ablation {:.4}", acc / n);
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.downcast_ref::<MissingArtifact>().is_some()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
