use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hcctc::harness::config::{parse_list, KeyValues};
use hcctc::harness::eval::run_dir_of;
use hcctc::harness::synth::{read_features, read_manifest, SPLITS};
use hcctc::harness::train::{checkpoint_epoch, METRICS_FILE};
use hcctc::harness::{
    average_checkpoints, dump_attention, evaluate, generate_synthetic_corpus, load_split, train_from_dir, write_corpus,
    EpochSummary, Metrics, Recognizer, SyntheticTask, TrainingConfig,
};
use hcctc::subword::Hierarchy;
use hcctc::{Error, Result};

/// File in a run directory recording where its training data lives.
const DATA_POINTER: &str = "data.txt";

#[derive(Parser)]
#[command(name = "hcctc", version, about = "Hierarchical conditional CTC toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one subword vocabulary per size on a text corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated, nondecreasing sizes, e.g. 40,120,400.
        #[arg(long)]
        sizes: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus from a task spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report per-level losses and WER of a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Best-path decode a feature file or every entry of a manifest.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Average checkpoints, keeping the n with the best dev loss.
    Avg {
        #[arg(long, num_args = 1.., required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write attention maps and per-level posteriors of one utterance as text matrices.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        utt: String,
        #[arg(long)]
        out: PathBuf,
        /// Data directory; defaults to the one the run was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn build_vocab(corpus: &Path, sizes: &str, out: &Path) -> Result<()> {
    let sizes = parse_list(sizes).map_err(|e| Error::Config(format!("--sizes: {e}")))?;
    let text = fs::read_to_string(corpus).map_err(io(corpus))?;
    let lines: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect();
    let hier = Hierarchy::build(&lines, &sizes)?;
    fs::create_dir_all(out).map_err(io(out))?;
    let means = hier.mean_lengths(&lines);
    for (k, v) in hier.vocabs.iter().enumerate() {
        let path = out.join(format!("level{}.txt", k + 1));
        v.save(&path)?;
        println!(
            "level {}\t{} tokens\tmean length {:.3}\t{}",
            k + 1,
            v.len(),
            means[k],
            path.display()
        );
    }
    let violations = hier.length_violations(&lines);
    if !violations.is_empty() {
        println!("{} lines segment longer at a coarser level", violations.len());
    }
    Ok(())
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let task = SyntheticTask::from_kv(&KeyValues::read(spec)?)?;
    let corpus = generate_synthetic_corpus(&task)?;
    write_corpus(&corpus, out)?;
    for split in SPLITS {
        println!("{split}\t{} utterances", corpus.split(split)?.len());
    }
    Ok(())
}

fn train_cmd(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = TrainingConfig::read(config)?;
    fs::create_dir_all(out).map_err(io(out))?;
    let data_abs = data.canonicalize().map_err(io(data))?;
    let pointer = out.join(DATA_POINTER);
    fs::write(&pointer, format!("{}\n", data_abs.display())).map_err(io(&pointer))?;
    let mut report = |s: &EpochSummary| {
        let levels: Vec<String> = s
            .dev
            .report
            .per_level_losses
            .iter()
            .map(|l| format!("{l:.4}"))
            .collect();
        eprintln!(
            "epoch {:3}  train {:.4}  dev {:.4} [{}]  dev WER {:.2}%  {:.1}s",
            s.epoch,
            s.train.total_loss,
            s.dev.report.total_loss,
            levels.join(" "),
            100.0 * s.dev.wer,
            s.seconds
        );
    };
    let outcome = train_from_dir(&cfg, data, out, &mut report)?;
    if let Some(avg) = outcome.averaged {
        println!("averaged checkpoint: {}", avg.display());
    }
    println!("metrics: {}", out.join(METRICS_FILE).display());
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, split: &str) -> Result<()> {
    let rec = Recognizer::load(ckpt)?;
    let utts = load_split(data, split)?;
    let ev = evaluate(&rec, &utts)?;
    for (k, l) in ev.report.per_level_losses.iter().enumerate() {
        println!(
            "level {}\tloss {l:.6}\tinfeasible {}",
            k + 1,
            ev.report.infeasible_count[k]
        );
    }
    println!("total\tloss {:.6}", ev.report.total_loss);
    println!("WER\t{:.4}%", 100.0 * ev.wer);
    Ok(())
}

fn decode_cmd(ckpt: &Path, input: &Path) -> Result<()> {
    let rec = Recognizer::load(ckpt)?;
    if input.extension().is_some_and(|e| e == "tsv") {
        for entry in read_manifest(input)? {
            println!("{}\t{}", entry.id, rec.decode(&read_features(&entry.path)?)?);
        }
    } else {
        println!("{}", rec.decode(&read_features(input)?)?);
    }
    Ok(())
}

fn avg_cmd(ckpts: &[PathBuf], n: Option<usize>, out: &Path) -> Result<()> {
    let n = n.unwrap_or(ckpts.len());
    let losses = if n < ckpts.len() {
        let run = run_dir_of(&ckpts[0])?;
        let dev = Metrics::read(&run.join(METRICS_FILE))?.dev_losses();
        let losses = ckpts
            .iter()
            .map(|p| {
                checkpoint_epoch(p)
                    .and_then(|e| dev.get(&e).copied())
                    .ok_or_else(|| Error::Lookup(format!("no dev loss recorded for {}", p.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(losses)
    } else {
        None
    };
    let avg = average_checkpoints(ckpts, n, losses.as_deref())?;
    avg.save(out)?;
    println!("averaged {n} of {} checkpoints into {}", ckpts.len(), out.display());
    Ok(())
}

fn dump_cmd(ckpt: &Path, utt: &str, out: &Path, data: Option<PathBuf>) -> Result<()> {
    let rec = Recognizer::load(ckpt)?;
    let data = match data {
        Some(d) => d,
        None => {
            let pointer = run_dir_of(ckpt)?.join(DATA_POINTER);
            PathBuf::from(fs::read_to_string(&pointer).map_err(io(&pointer))?.trim())
        }
    };
    let mut utts = Vec::new();
    for split in SPLITS {
        utts.extend(load_split(&data, split)?);
    }
    for p in dump_attention(&rec, &utts, utt, out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab { corpus, sizes, out } => build_vocab(&corpus, &sizes, &out),
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { config, data, out } => train_cmd(&config, &data, &out),
        Command::Eval { ckpt, data, split } => eval_cmd(&ckpt, &data, &split),
        Command::Decode { ckpt, input } => decode_cmd(&ckpt, &input),
        Command::Avg { ckpts, n, out } => avg_cmd(&ckpts, n, &out),
        Command::DumpAttn { ckpt, utt, out, data } => dump_cmd(&ckpt, &utt, &out, data),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
