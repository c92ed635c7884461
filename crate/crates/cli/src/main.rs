//! `soar`: search, vote, report and build fine-tuning data for ARC tasks.
//!
//! Exit codes: 0 success, 2 some tasks failed, 3 configuration error,
//! 1 anything else (I/O, corrupt archive).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use soar_core::arc::{load_tasks, Task};
use soar_core::ensemble::{VoteConfig, VoteMode};
use soar_core::orchestrator::{
    build_dataset, build_report, load_task_set, read_archive, run_iteration, solve, task_slices, truth_map,
    ttt_select_archive, vote_archive, Backends, DatasetSpec, DedupScope, Mode, ModelEntry, ModelRegistry,
    OrchestratorError, RunConfig, TaskSlice,
};
use soar_core::selfimprove::{relabel, sampling_records, write_dataset, DatasetKind, SelectionPolicy};

const EXIT_PARTIAL: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "soar", version, about = "Self-improving program search for ARC tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sampling,
    Refinement,
}

#[derive(clap::Args)]
struct VoteArgs {
    /// Weight of mean train accuracy against group size.
    #[arg(long, default_value_t = 1000.0)]
    c: f64,
    #[arg(long, default_value_t = 2)]
    n_output: usize,
    /// Rank by summed train accuracy instead of count plus weighted mean.
    #[arg(long)]
    sum_of_accuracies: bool,
}

impl VoteArgs {
    fn config(&self) -> VoteConfig {
        VoteConfig {
            c: self.c,
            n_output: self.n_output,
            mode: if self.sum_of_accuracies {
                VoteMode::SumOfAccuracies
            } else {
                VoteMode::CountPlusAccuracy
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample&Refine one task and print the top-ranked outputs.
    Solve {
        task_file: PathBuf,
        /// Run config for backends, budgets and seed; mock backends otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sample_budget: Option<usize>,
        #[arg(long)]
        refine_budget: Option<usize>,
    },
    /// Run (or resume) one iteration: search, archive, datasets, report.
    Iterate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's iteration index.
        #[arg(long)]
        iteration: Option<u32>,
        /// Override the config's model tag.
        #[arg(long)]
        model_tag: Option<String>,
    },
    /// Build one dataset file from an archive.
    BuildDataset {
        #[arg(long)]
        archive: PathBuf,
        /// Task files or directories the archive was searched on.
        #[arg(long, required = true)]
        tasks: Vec<PathBuf>,
        #[arg(long)]
        strategy: String,
        #[arg(long, value_enum, default_value = "sampling")]
        kind: Kind,
        #[arg(long, default_value_t = 50)]
        k: usize,
        /// Only this iteration's attempts; all iterations otherwise.
        #[arg(long)]
        iteration: Option<u32>,
        /// Never read ground truth.
        #[arg(long)]
        test_time: bool,
        #[arg(long)]
        no_shuffle: bool,
        #[arg(long, default_value_t = 0.9)]
        dedup_threshold: f64,
        #[arg(long)]
        no_dedup: bool,
        #[arg(long)]
        per_task_dedup: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run config naming the executor and embedding backends.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        vote: VoteArgs,
    },
    /// Rank output patterns per task by weighted majority vote.
    Vote {
        #[arg(long)]
        archive: PathBuf,
        /// Adds solved and oracle flags.
        #[arg(long)]
        tasks: Vec<PathBuf>,
        #[arg(long)]
        iteration: Option<u32>,
        /// Write JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        vote: VoteArgs,
    },
    /// Per-task and aggregate scores as JSON and CSV.
    Report {
        #[arg(long)]
        archive: PathBuf,
        /// Adds accuracy columns.
        #[arg(long)]
        tasks: Vec<PathBuf>,
        #[arg(long)]
        iteration: Option<u32>,
        /// Writes report.json and report.csv here; JSON to stdout otherwise.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        vote: VoteArgs,
    },
    /// Weighted category sampling of N candidates per task, no ground truth.
    TttSelect {
        #[arg(long)]
        archive: PathBuf,
        #[arg(short = 'N', long = "count")]
        n: usize,
        #[arg(long)]
        iteration: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// With `--out`: relabel the selection and write a sampling dataset.
        #[arg(long)]
        tasks: Vec<PathBuf>,
        #[arg(long, requires = "tasks")]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        vote: VoteArgs,
    },
    /// Add a fine-tuned model to a model registry file.
    RegisterModel {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        tag: String,
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        model: Option<String>,
        /// Tag it was fine-tuned from. A new registry takes `--tag` as base.
        #[arg(long)]
        from: Option<String>,
    },
}

fn config_or_default(path: Option<&Path>) -> Result<RunConfig, OrchestratorError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig {
            tasks: vec![PathBuf::from(".")],
            ..RunConfig::default()
        }),
    }
}

fn slices_for(archive: &Path, iteration: Option<u32>) -> Result<BTreeMap<String, TaskSlice>, OrchestratorError> {
    Ok(task_slices(&read_archive(archive)?, iteration))
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), OrchestratorError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| OrchestratorError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        }),
        None => {
            stdout(text);
            Ok(())
        }
    }
}

/// Prints to stdout; a closed pipe (`soar vote | head`) is not an error.
fn stdout(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serializes") + "\n"
}

fn run(cli: Cli) -> Result<u8, OrchestratorError> {
    match cli.command {
        Command::Solve {
            task_file,
            config,
            seed,
            sample_budget,
            refine_budget,
        } => {
            let mut cfg = config_or_default(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = sample_budget {
                cfg.budget.sample_budget = b;
            }
            if let Some(b) = refine_budget {
                cfg.budget.refine_budget = b;
            }
            cfg.validate()?;
            let tasks: Vec<Task> = load_tasks(&task_file)?;
            let backends = Backends::from_config(&cfg)?;
            let mut partial = false;
            for task in &tasks {
                let out = solve(task, &cfg, &backends)?;
                if let Some(e) = &out.result.interrupted {
                    log::warn!("task {}: search interrupted: {e}", task.task_id());
                    partial = true;
                }
                let top: Vec<_> = out.ranked.iter().take(cfg.vote.n_output).collect();
                let doc = serde_json::json!({
                    "task_id": task.task_id(),
                    "attempts": out.result.attempts.len(),
                    "perfect": out.result.perfect_count(),
                    "top": top,
                    "solved": out.solved,
                });
                stdout(&json(&doc));
            }
            Ok(if partial { EXIT_PARTIAL } else { 0 })
        }
        Command::Iterate {
            config,
            iteration,
            model_tag,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(i) = iteration {
                cfg.iteration = i;
            }
            if let Some(t) = model_tag {
                cfg.model_tag = t;
            }
            let out = run_iteration(&cfg)?;
            let m = &out.manifest;
            if out.already_complete {
                eprintln!("iteration {} already complete", m.iteration);
            }
            eprintln!(
                "iteration {}: {} tasks, {} failed; datasets: {}",
                m.iteration,
                m.tasks.len(),
                m.failed_tasks,
                m.datasets
                    .iter()
                    .map(|d| format!("{} ({} records)", d.file, d.records))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            println!("{}", cfg.iteration_dir().join("manifest.json").display());
            Ok(if m.failed_tasks > 0 { EXIT_PARTIAL } else { 0 })
        }
        Command::BuildDataset {
            archive,
            tasks,
            strategy,
            kind,
            k,
            iteration,
            test_time,
            no_shuffle,
            dedup_threshold,
            no_dedup,
            per_task_dedup,
            seed,
            config,
            out,
            vote,
        } => {
            let cfg = config_or_default(config.as_deref())?;
            let tasks = load_task_set(&tasks)?;
            let slices = slices_for(&archive, iteration)?;
            let policy = SelectionPolicy {
                strategy,
                k_per_task: k,
                seed,
            };
            if k == 0 {
                return Err(OrchestratorError::Config("--k must be positive".into()));
            }
            let vote = vote.config();
            let spec = DatasetSpec {
                kind: match kind {
                    Kind::Sampling => DatasetKind::Sampling,
                    Kind::Refinement => DatasetKind::Refinement,
                },
                policy: &policy,
                mode: if test_time { Mode::TestTime } else { Mode::Train },
                vote: &vote,
                augment_shuffle: !no_shuffle,
                dedup_threshold: (!no_dedup).then_some(dedup_threshold),
                dedup_scope: if per_task_dedup {
                    DedupScope::PerTask
                } else {
                    DedupScope::Pooled
                },
                seed,
                timeout_ms: cfg.timeout_ms,
            };
            let backends = Backends::from_config(&cfg)?;
            let records = build_dataset(&slices, &tasks, &spec, &*backends.executor, &*backends.embed)?;
            let digest = write_dataset(&out, &records)?;
            println!("{} records, sha256 {digest}", records.len());
            Ok(0)
        }
        Command::Vote {
            archive,
            tasks,
            iteration,
            out,
            vote,
        } => {
            let slices = slices_for(&archive, iteration)?;
            let truth = if tasks.is_empty() {
                None
            } else {
                Some(truth_map(&load_task_set(&tasks)?))
            };
            let votes = vote_archive(&slices, truth.as_ref(), &vote.config())?;
            write_or_print(out.as_deref(), &json(&votes))?;
            Ok(0)
        }
        Command::Report {
            archive,
            tasks,
            iteration,
            out_dir,
            config,
            vote,
        } => {
            let cfg = config_or_default(config.as_deref())?;
            let records = read_archive(&archive)?;
            let truth = if tasks.is_empty() {
                None
            } else {
                Some(truth_map(&load_task_set(&tasks)?))
            };
            let backends = Backends::from_config(&cfg)?;
            let report = build_report(&records, iteration, truth.as_ref(), &vote.config(), &*backends.embed)?;
            match out_dir {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(|e| OrchestratorError::Io {
                        path: dir.display().to_string(),
                        message: e.to_string(),
                    })?;
                    write_or_print(Some(&dir.join("report.json")), &report.to_json())?;
                    write_or_print(Some(&dir.join("report.csv")), &report.to_csv())?;
                }
                None => write_or_print(None, &report.to_json())?,
            }
            Ok(0)
        }
        Command::TttSelect {
            archive,
            n,
            iteration,
            seed,
            tasks,
            out,
            config,
            vote,
        } => {
            let slices = slices_for(&archive, iteration)?;
            let picked = ttt_select_archive(&slices, n, &vote.config(), seed)?;
            let Some(out) = out else {
                stdout(&json(&picked));
                return Ok(0);
            };
            let cfg = config_or_default(config.as_deref())?;
            let tasks = load_task_set(&tasks)?;
            let mut examples = Vec::new();
            for task in &tasks {
                let (Some(ids), Some(slice)) = (picked.get(task.task_id()), slices.get(task.task_id())) else {
                    continue;
                };
                let by_id: BTreeMap<_, _> = slice.candidates().map(|(p, e)| (p.id, (p, e))).collect();
                for id in ids {
                    let (p, e) = by_id[id];
                    if let Ok(ex) = relabel(p, task, e) {
                        examples.push(ex);
                    }
                }
            }
            let backends = Backends::from_config(&cfg)?;
            let records = sampling_records(&examples, true, seed, &*backends.executor, cfg.timeout_ms)?;
            let digest = write_dataset(&out, &records)?;
            println!("{} records, sha256 {digest}", records.len());
            Ok(0)
        }
        Command::RegisterModel {
            registry,
            tag,
            endpoint,
            model,
            from,
        } => {
            let entry = ModelEntry {
                endpoint,
                model,
                finetuned_from: from,
            };
            let reg = if registry.exists() {
                let mut reg = ModelRegistry::load(&registry)?;
                reg.register(&tag, entry)?;
                reg
            } else {
                if entry.finetuned_from.is_some() {
                    return Err(OrchestratorError::Config(format!(
                        "{} does not exist; register the base model first",
                        registry.display()
                    )));
                }
                ModelRegistry::with_base(&tag, entry)
            };
            reg.save(&registry)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_CONFIG } else { 1 })
        }
    }
}
