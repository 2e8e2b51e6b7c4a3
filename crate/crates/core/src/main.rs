use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use flexit::corpus::{INDEX_FILE, Utterance, export_corpus, generate_corpus, import_corpus};
use flexit::encoder::DomainId;
use flexit::metrics::{ReportRow, emit_report};
use flexit::model::Transducer;
use flexit::registry::{ExperimentConfig, parse_names, registry};
use flexit::runtime::write_trace;
use flexit::train::{EpochSummary, SweepResult, TrainHyper, decode_config, evaluate_domain, run_sweep, train};

#[derive(Parser)]
#[command(name = "flexit", version, about = "Streaming transducer experiments on synthetic two-domain speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training split and a held-out evaluation split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        utts_per_domain: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Evaluation utterances per domain (default: a tenth, at least 20).
        #[arg(long)]
        eval_per_domain: Option<usize>,
    },
    /// Train one registry experiment and write a checkpoint.
    Train {
        #[arg(long)]
        exp: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        /// key=value overrides applied to the experiment.
        #[arg(long)]
        overrides: Option<PathBuf>,
    },
    /// Decode the evaluation split of one domain with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: DomainId,
        #[arg(long)]
        endpointer: bool,
        /// Write the emission trace (one JSON line per token) here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train and evaluate several experiments, then write the report.
    Sweep {
        #[arg(long)]
        exps: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Rebuild CSV and SVG from the per-experiment results of a sweep.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_svg: PathBuf,
    },
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// `DIR/<split>` when present, otherwise `DIR` itself.
fn split_dir(data: &Path, split: &str) -> PathBuf {
    let sub = data.join(split);
    if sub.join(INDEX_FILE).exists() { sub } else { data.to_path_buf() }
}

fn load_split(data: &Path, split: &str) -> AnyResult<Vec<Utterance>> {
    Ok(import_corpus(&split_dir(data, split))?)
}

fn print_epoch(exp: &str, s: &EpochSummary) {
    eprintln!(
        "exp={exp} epoch={} mean_loss={:.4} wall_s={:.2} skipped={}",
        s.epoch, s.mean_loss, s.wall_seconds, s.skipped
    );
}

fn run(command: Command) -> AnyResult<()> {
    match command {
        Command::GenData {
            out,
            utts_per_domain,
            seed,
            eval_per_domain,
        } => {
            let eval_n = eval_per_domain.unwrap_or((utts_per_domain / 10).max(20));
            export_corpus(&generate_corpus(utts_per_domain, seed), &out.join("train"))?;
            export_corpus(&generate_corpus(eval_n, seed ^ 0xe7a1), &out.join("eval"))?;
            println!("train={} eval={} per domain", utts_per_domain, eval_n);
        }
        Command::Train {
            exp,
            data,
            out,
            seed,
            epochs,
            overrides,
        } => {
            let mut config = registry(&exp)?;
            if let Some(path) = overrides {
                config.apply_overrides(&std::fs::read_to_string(path)?)?;
            }
            let mut hyper = TrainHyper::default();
            if let Some(e) = epochs {
                hyper.epochs = e;
            }
            let corpus = load_split(&data, "train")?;
            let (model, store, log) = train(&config, &corpus, &hyper, seed, |s| print_epoch(&config.name, s))?;
            let run = serde_json::json!({ "experiment": config, "hyper": hyper });
            model.save(&out, &store, Some(&run))?;
            println!(
                "exp={} steps={} probe_loss_initial={:.4} probe_loss_final={:.4}",
                config.name, log.steps, log.initial_probe_loss, log.final_probe_loss
            );
        }
        Command::Eval {
            ckpt,
            data,
            domain,
            endpointer,
            trace,
        } => {
            #[derive(Deserialize)]
            struct Run {
                experiment: ExperimentConfig,
                hyper: TrainHyper,
            }
            let (model, store, run) = Transducer::load(&ckpt)?;
            let run: Run = serde_json::from_value(run.ok_or("checkpoint has no experiment record")?)?;
            let utts = load_split(&data, "eval")?;
            let selected: Vec<&Utterance> = utts.iter().filter(|u| u.domain == domain).collect();
            if selected.is_empty() {
                return Err(format!("no {domain} utterances in {}", data.display()).into());
            }
            let cfg = decode_config(&run.experiment, &run.hyper, domain, model.frame_ms());
            let result = evaluate_domain(&model, &store, &cfg, &selected, endpointer)?;
            if let Some(path) = trace {
                let mut w = BufWriter::new(File::create(path)?);
                for u in &selected {
                    let events = flexit::runtime::greedy_streaming_decode(&model, &store, &u.features, &cfg, u.domain)?;
                    write_trace(&mut w, &u.id, &events)?;
                }
            }
            println!(
                "{}",
                serde_json::json!({
                    "experiment": run.experiment.name,
                    "domain": domain,
                    "endpointer": endpointer,
                    "utterances": result.utterances,
                    "wer": result.wer.wer(),
                    "del": result.wer.del(),
                    "substitutions": result.wer.substitutions,
                    "insertions": result.wer.insertions,
                    "deletions": result.wer.deletions,
                    "avg_fd_ms": result.avg_fd_ms,
                    "l_avg_ms": result.l_avg_ms,
                })
            );
        }
        Command::Sweep {
            exps,
            data,
            out_dir,
            seed,
            epochs,
        } => {
            let names = parse_names(&exps)?;
            let mut hyper = TrainHyper::default();
            if let Some(e) = epochs {
                hyper.epochs = e;
            }
            let train_set = load_split(&data, "train")?;
            let eval_set = load_split(&data, "eval")?;
            let results = run_sweep(&names, &train_set, &eval_set, &hyper, seed, &out_dir, print_epoch)?;
            for r in &results {
                let row = r.report_row();
                println!(
                    "exp={} dict_wer={:.2} vcmd_wer={:.2} vcmd_del={:.2} avg_fd_ms={:.1} l_avg_ms={:.1} rtf={:.4}",
                    row.experiment, row.dict_wer, row.vcmd_wer, row.vcmd_del, row.avg_fd_ms, row.l_avg_ms, row.rtf
                );
            }
        }
        Command::Report { input, out_csv, out_svg } => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            let mut rows: Vec<ReportRow> = Vec::with_capacity(paths.len());
            for p in paths {
                let r: SweepResult = serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .map_err(|e| format!("{}: {e}", p.display()))?;
                rows.push(r.report_row());
            }
            rows.sort_by(|a, b| a.experiment.cmp(&b.experiment));
            emit_report(&rows, &out_csv, &out_svg)?;
            println!("rows={}", rows.len());
        }
    }
    Ok(())
}
