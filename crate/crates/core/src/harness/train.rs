//! Training loop, metrics stream and checkpoint averaging.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::harness::config::TrainingConfig;
use crate::harness::eval::{evaluate, examples, targets_for, vocab_path, Evaluation, Recognizer, CONFIG_FILE};
use crate::harness::synth::{load_split, Utterance};
use crate::numerics::{adam_step, AdamConfig, AdamState, NoamSchedule, ParamStore, Tensor};
use crate::objectives::{batch_objective, Example, ObjectiveReport};
use crate::subword::Hierarchy;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const TIMING_FILE: &str = "timing.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const AVERAGED_FILE: &str = "averaged.hckp";
const METRICS_COLUMNS: &str = "epoch\tsplit\tlevel\tloss\twer";

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("epoch{epoch:03}.hckp"))
}

/// Epoch number encoded in a checkpoint file name such as `epoch007.hckp`.
pub fn checkpoint_epoch(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix("epoch")?.parse().ok()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    /// Level number starting at 1, or `total`.
    pub level: String,
    pub loss: f64,
    pub wer: Option<f64>,
}

impl MetricRow {
    fn to_line(&self) -> String {
        let wer = self.wer.map_or("-".to_string(), |w| format!("{w:?}"));
        format!(
            "{}\t{}\t{}\t{:?}\t{}",
            self.epoch, self.split, self.level, self.loss, wer
        )
    }
}

/// Append-only metrics stream. The header names the objective and the conditioning variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub objective: String,
    pub conditioning: bool,
    pub rows: Vec<MetricRow>,
}

impl Metrics {
    pub fn header(&self) -> String {
        format!(
            "# objective={} conditioning={}\n{METRICS_COLUMNS}\n",
            self.objective,
            if self.conditioning { "on" } else { "off" }
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = self.header();
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.to_line());
        }
        s
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let head = lines.next().ok_or("empty metrics file")?;
        let mut objective = None;
        let mut conditioning = None;
        for field in head.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("objective", v)) => objective = Some(v.to_string()),
                Some(("conditioning", v)) => conditioning = Some(v == "on"),
                _ => {}
            }
        }
        if lines.next() != Some(METRICS_COLUMNS) {
            return Err("missing column header".into());
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                if f.len() != 5 {
                    return Err(format!("bad row {l:?}"));
                }
                Ok(MetricRow {
                    epoch: f[0].parse().map_err(|e| format!("{e}"))?,
                    split: f[1].to_string(),
                    level: f[2].to_string(),
                    loss: f[3].parse().map_err(|e| format!("{e}"))?,
                    wer: if f[4] == "-" {
                        None
                    } else {
                        Some(f[4].parse().map_err(|e| format!("{e}"))?)
                    },
                })
            })
            .collect::<std::result::Result<_, String>>()?;
        Ok(Metrics {
            objective: objective.ok_or("header lacks objective")?,
            conditioning: conditioning.ok_or("header lacks conditioning")?,
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|r| Error::format("metrics file", path, r))
    }

    /// Dev total loss per epoch.
    pub fn dev_losses(&self) -> BTreeMap<usize, f64> {
        self.rows
            .iter()
            .filter(|r| r.split == "dev" && r.level == "total")
            .map(|r| (r.epoch, r.loss))
            .collect()
    }

    pub fn dev_wer(&self) -> BTreeMap<usize, f64> {
        self.rows
            .iter()
            .filter(|r| r.split == "dev" && r.level == "total")
            .filter_map(|r| r.wer.map(|w| (r.epoch, w)))
            .collect()
    }

    /// Dev loss of one level (starting at 1) per epoch.
    pub fn dev_level_losses(&self, level: usize) -> BTreeMap<usize, f64> {
        let name = level.to_string();
        self.rows
            .iter()
            .filter(|r| r.split == "dev" && r.level == name)
            .map(|r| (r.epoch, r.loss))
            .collect()
    }

    fn rows_for(epoch: usize, split: &str, report: &ObjectiveReport, wer: Option<f64>) -> Vec<MetricRow> {
        let mut rows: Vec<MetricRow> = report
            .per_level_losses
            .iter()
            .enumerate()
            .map(|(k, &loss)| MetricRow {
                epoch,
                split: split.into(),
                level: (k + 1).to_string(),
                loss,
                wer: None,
            })
            .collect();
        rows.push(MetricRow {
            epoch,
            split: split.into(),
            level: "total".into(),
            loss: report.total_loss,
            wer,
        });
        rows
    }
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train: ObjectiveReport,
    pub dev: Evaluation,
    pub seconds: f64,
    pub skipped_batches: usize,
}

#[derive(Clone, Debug)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub path: PathBuf,
    pub dev_loss: f64,
    pub dev_wer: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub metrics: Metrics,
    /// Per-epoch checkpoints; the initialization checkpoint is `checkpoint_path(run_dir, 0)`.
    pub checkpoints: Vec<CheckpointRecord>,
    pub averaged: Option<PathBuf>,
    /// Model after the last epoch.
    pub last: Recognizer,
}

/// Length-sorted buckets of at most `batch_size` utterance indices.
pub fn length_buckets(utterances: &[Utterance], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.sort_by_key(|&i| (utterances[i].features.rows(), i));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn write_new(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma`.
fn perturb(features: &Tensor, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = features.clone();
    for v in out.data_mut() {
        *v += sigma * Distribution::<f64>::sample(&StandardNormal, rng);
    }
    out
}

/// Trains on `train`, evaluating `dev` after every epoch.
///
/// Writes into `out_dir`: the resolved config, one vocabulary per level,
/// `checkpoints/epochNNN.hckp` (epoch 0 is the initialization), the metrics
/// stream, a separate wall-clock file, and the best-dev average if requested.
pub fn train(
    config: &TrainingConfig,
    train: &[Utterance],
    dev: &[Utterance],
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Config("training split is empty".into()))?;
    let input_dim = first.features.cols();
    let texts: Vec<String> = train.iter().map(|u| u.transcript.clone()).collect();
    let hierarchy = Hierarchy::build(&texts, &config.level_sizes())?;
    let enc_cfg = config.encoder_config(input_dim, hierarchy.sizes())?;
    let mut model = Encoder::new(enc_cfg, config.seed)?;

    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    fs::create_dir_all(out_dir.join(crate::harness::eval::VOCAB_DIR)).map_err(|e| Error::io(out_dir, e))?;
    write_new(&out_dir.join(CONFIG_FILE), &config.to_text())?;
    for (k, v) in hierarchy.vocabs.iter().enumerate() {
        v.save(vocab_path(out_dir, k))?;
    }
    model.params().save(checkpoint_path(out_dir, 0))?;

    let mut metrics = Metrics {
        objective: config.objective.name().to_string(),
        conditioning: config.conditioning,
        rows: Vec::new(),
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    let timing_path = out_dir.join(TIMING_FILE);
    write_new(&metrics_path, &metrics.header())?;
    write_new(&timing_path, "epoch\tseconds\n")?;

    let train_targets = targets_for(&hierarchy, train);
    let batch_pool = examples(train, &train_targets);
    let buckets = length_buckets(train, config.batch_size);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
    let schedule = NoamSchedule {
        peak: config.peak_lr,
        warmup: config.warmup_steps,
    };
    let adam = AdamConfig::default();
    let mut state = AdamState::new(model.params().tensors());
    let mut checkpoints = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..buckets.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut utterance_losses = Vec::with_capacity(train.len());
        let mut skipped = 0;
        for (step, &b) in order.iter().enumerate() {
            let noisy: Vec<Tensor> = if config.feature_noise > 0.0 {
                buckets[b]
                    .iter()
                    .map(|&i| perturb(&train[i].features, config.feature_noise, &mut noise_rng))
                    .collect()
            } else {
                Vec::new()
            };
            let batch: Vec<Example> = buckets[b]
                .iter()
                .enumerate()
                .map(|(j, &i)| Example {
                    features: noisy.get(j).unwrap_or(batch_pool[i].features),
                    targets: batch_pool[i].targets,
                })
                .collect();
            let rng = (config.dropout > 0.0).then_some(&mut dropout_rng);
            let out = batch_objective(&model, config.objective, &batch, true, rng)?;
            let Some(grads) = out.grads else {
                skipped += 1;
                utterance_losses.extend(out.utterance_losses);
                continue;
            };
            let grads_finite = grads.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
            if !out.report.total_loss.is_finite() || !grads_finite {
                let ids: Vec<&str> = buckets[b].iter().map(|&i| train[i].id.as_str()).collect();
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} step {}: batch {ids:?}, per-level losses {:?}, gradients finite: {grads_finite}",
                    step + 1,
                    out.report.per_level_losses
                )));
            }
            utterance_losses.extend(out.utterance_losses);
            let lr = schedule.lr(state.step + 1);
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut params = model.params_mut().tensors_mut();
            adam_step(&mut params, &grad_refs, &mut state, lr, adam)?;
        }
        let train_report = ObjectiveReport::from_losses(&utterance_losses);

        let path = checkpoint_path(out_dir, epoch);
        model.params().save(&path)?;
        // Evaluate exactly what was saved, so checkpoint and metrics agree.
        let saved = Recognizer::new(config.clone(), hierarchy.clone(), ParamStore::load(&path)?)?;
        let dev_eval = evaluate(&saved, dev)?;
        let seconds = started.elapsed().as_secs_f64();

        let mut rows = Metrics::rows_for(epoch, "train", &train_report, None);
        rows.extend(Metrics::rows_for(epoch, "dev", &dev_eval.report, Some(dev_eval.wer)));
        let text: String = rows.iter().map(|r| r.to_line() + "\n").collect();
        append(&metrics_path, &text)?;
        append(&timing_path, &format!("{epoch}\t{seconds:.3}\n"))?;
        metrics.rows.extend(rows);
        checkpoints.push(CheckpointRecord {
            epoch,
            path,
            dev_loss: dev_eval.report.total_loss,
            dev_wer: dev_eval.wer,
        });
        progress(&EpochSummary {
            epoch,
            train: train_report,
            dev: dev_eval,
            seconds,
            skipped_batches: skipped,
        });
    }

    let averaged = if config.average > 0 && !checkpoints.is_empty() {
        let n = config.average.min(checkpoints.len());
        let paths: Vec<PathBuf> = checkpoints.iter().map(|c| c.path.clone()).collect();
        let losses: Vec<f64> = checkpoints.iter().map(|c| c.dev_loss).collect();
        let avg = average_checkpoints(&paths, n, Some(&losses))?;
        let p = out_dir.join(AVERAGED_FILE);
        avg.save(&p)?;
        Some(p)
    } else {
        None
    };

    let last_params = match checkpoints.last() {
        Some(c) => ParamStore::load(&c.path)?,
        None => ParamStore::load(checkpoint_path(out_dir, 0))?,
    };
    Ok(TrainOutcome {
        run_dir: out_dir.to_path_buf(),
        metrics,
        checkpoints,
        averaged,
        last: Recognizer::new(config.clone(), hierarchy, last_params)?,
    })
}

/// [`train`] on the `train` and `dev` manifests of a generated data directory.
pub fn train_from_dir(
    config: &TrainingConfig,
    data_dir: &Path,
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    let train_split = load_split(data_dir, "train")?;
    let dev_split = load_split(data_dir, "dev")?;
    train(config, &train_split, &dev_split, out_dir, progress)
}

/// Indices of the `n` lowest losses; ties go to the earlier entry.
pub fn best_by_loss(losses: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

/// Averages `n` of the checkpoints at `paths`. With fewer than all selected,
/// `dev_losses` (aligned with `paths`) picks the `n` best.
pub fn average_checkpoints(paths: &[PathBuf], n: usize, dev_losses: Option<&[f64]>) -> Result<ParamStore> {
    if n == 0 || n > paths.len() {
        return Err(Error::Config(format!(
            "cannot average {n} of {} checkpoints",
            paths.len()
        )));
    }
    let chosen: Vec<usize> = if n == paths.len() {
        (0..n).collect()
    } else {
        let losses = dev_losses
            .ok_or_else(|| Error::Config("selecting a subset of checkpoints needs their dev losses".into()))?;
        if losses.len() != paths.len() {
            return Err(Error::Config("one dev loss per checkpoint is required".into()));
        }
        best_by_loss(losses, n)
    };
    let stores = chosen
        .iter()
        .map(|&i| ParamStore::load(&paths[i]))
        .collect::<Result<Vec<_>>>()?;
    ParamStore::average(&stores)
}
