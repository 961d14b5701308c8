use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use driftharness::backend::{BackendSpec, ReferenceAdapter};
use driftharness::cli;
use driftharness::config::{Overrides, RunConfig};
use driftharness::conformance::run_conformance;
use driftharness::corpus::{write_corpus, Granularity};
use driftharness::metrics::WinRule;
use driftharness::model::AdapterConfig;
use driftharness::strategies::StrategyKind;
use driftharness::synth::{self, SynthConfig};
use driftharness::wire;

#[derive(Parser)]
#[command(
    name = "driftharness",
    version,
    about = "Temporal continual-learning evaluation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',')]
    strategy: Option<Vec<StrategyKind>>,
    /// 1m, 2m, 3m, 6m or 12m.
    #[arg(long)]
    granularity: Option<Granularity>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `reference` or `external:CMD`.
    #[arg(long)]
    backend: Option<BackendSpec>,
}

impl Common {
    fn resolve(self) -> driftharness::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(Overrides {
            corpus: self.corpus,
            strategies: self.strategy,
            granularity: self.granularity,
            seeds: self.seed,
            out: self.out,
            backend: self.backend,
        });
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WinRuleArg {
    Shared,
    Pairwise,
}

#[derive(Subcommand)]
enum Command {
    /// Deduplicate and window a corpus.
    Prepare(Common),
    /// Run forward chains for every (strategy, seed) pair.
    Run(Common),
    /// Summarize ledgers into CSV reports.
    Report {
        /// Run directory holding `ledgers/`.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Ledger directory, defaults to `<out>/ledgers`.
        #[arg(long)]
        ledgers: Option<PathBuf>,
        /// Baseline method for efficiency and deltas.
        #[arg(long)]
        baseline: Option<StrategyKind>,
        #[arg(long, value_enum, default_value = "shared")]
        win_rule: WinRuleArg,
    },
    /// Paired Wilcoxon test and Cliff's delta between two ledgers.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write a synthetic drifting corpus.
    Synth {
        #[arg(long, default_value = "synthetic.jsonl")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 120)]
        per_window: usize,
        /// Also write a matching run configuration here.
        #[arg(long)]
        config_out: Option<PathBuf>,
    },
    /// Serve the reference model over the adapter wire protocol.
    ReferenceAdapter {
        #[arg(long)]
        serve: bool,
    },
    /// Check an external adapter command against the wire protocol.
    Conformance {
        /// Adapter command line; `--serve` is appended.
        command: String,
    },
}

fn run(cli: Cli) -> driftharness::Result<bool> {
    match cli.command {
        Command::Prepare(common) => {
            let cfg = common.resolve()?;
            let prepared = cli::cmd_prepare(&cfg)?;
            let empty = prepared.windows.iter().filter(|w| w.is_empty()).count();
            println!(
                "removed {} duplicate(s) of {}; {} windows ({} empty) written to {}",
                prepared.removed,
                prepared.input_count,
                prepared.windows.len(),
                empty,
                cfg.out.display()
            );
            Ok(true)
        }
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let outcomes = cli::cmd_run(&cfg)?;
            let mut ok = true;
            for o in &outcomes {
                match &o.result {
                    Ok(n) => println!(
                        "ok    {} seed {}: {n} forward scores -> {}",
                        o.strategy,
                        o.seed,
                        o.dir.display()
                    ),
                    Err(e) => {
                        ok = false;
                        println!("FAIL  {} seed {}: {e}", o.strategy, o.seed);
                    }
                }
            }
            Ok(ok)
        }
        Command::Report {
            out,
            ledgers,
            baseline,
            win_rule,
        } => {
            let root = ledgers.unwrap_or_else(|| out.join("ledgers"));
            let rule = match win_rule {
                WinRuleArg::Shared => WinRule::SharedArgmax,
                WinRuleArg::Pairwise => WinRule::Pairwise,
            };
            let r = cli::cmd_report(&root, &out, baseline.map(|b| b.as_str()), rule)?;
            println!(
                "{} method(s), {} common window(s); summary at {}",
                r.methods,
                r.common_windows,
                out.join("summary.csv").display()
            );
            Ok(true)
        }
        Command::Compare { a, b, out } => {
            let row = cli::cmd_compare(&a, &b, &out)?;
            print!("{}", row.csv());
            Ok(true)
        }
        Command::Synth {
            out,
            seed,
            per_window,
            config_out,
        } => {
            let sc = SynthConfig {
                seed,
                per_window,
                ..Default::default()
            };
            let instances = synth::generate(&sc)?;
            write_corpus(&out, &instances)?;
            if let Some(path) = config_out {
                let corpus = std::path::absolute(&out)
                    .map_err(|e| driftharness::Error::io(format!("resolving {}", out.display()), e))?;
                let cfg = RunConfig {
                    corpus: Some(corpus),
                    date_range: Some(sc.range()),
                    granularity: sc.granularity,
                    strategies: StrategyKind::ALL.to_vec(),
                    train: synth::train_preset(seed),
                    ..Default::default()
                };
                std::fs::write(&path, cfg.to_toml()?)
                    .map_err(|e| driftharness::Error::io(format!("writing {}", path.display()), e))?;
            }
            println!("wrote {} instances to {}", instances.len(), out.display());
            Ok(true)
        }
        Command::ReferenceAdapter { serve } => {
            if !serve {
                eprintln!("pass --serve to start the request loop");
                return Ok(false);
            }
            let mut adapter = ReferenceAdapter::new(AdapterConfig::default());
            wire::serve(&mut adapter, BufReader::new(io::stdin().lock()), io::stdout().lock())
                .map_err(|e| driftharness::Error::io("serving adapter protocol", e))?;
            Ok(true)
        }
        Command::Conformance { command } => {
            let mut ok = true;
            for c in run_conformance(&command) {
                ok &= c.passed;
                println!("{} {:<26} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
