//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, HeadLayout};
use crate::error::{Error, Result};
use crate::objectives::Objective;

/// Parsed key/value pairs. `#` starts a comment; blank lines are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(KeyValues { map })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.map.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::Config(format!("bad value {v:?} for {key}: {e}"))),
        }
    }

    pub fn list_or(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => parse_list(v).map_err(|e| Error::Config(format!("bad value {v:?} for {key}: {e}"))),
        }
    }
}

pub fn parse_list(text: &str) -> std::result::Result<Vec<usize>, String> {
    text.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect()
}

fn parse_flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected on/off, got {v:?}")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub objective: Objective,
    /// One size per level, finest first. Plain CTC and SC-CTC train on the last one.
    pub vocab_sizes: Vec<usize>,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub frame_stack: usize,
    /// Frames spliced onto each side of every input frame.
    pub context: usize,
    pub dropout: f64,
    /// Standard deviation of Gaussian noise added to training features; 0 disables.
    pub feature_noise: f64,
    pub conditioning: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Number of best-dev checkpoints averaged after training; 0 disables.
    pub average: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            objective: Objective::HcCtc,
            vocab_sizes: vec![40, 120, 400],
            layers: 6,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            frame_stack: 1,
            context: 0,
            dropout: 0.0,
            feature_noise: 0.0,
            conditioning: true,
            epochs: 50,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 1000,
            average: 5,
            seed: 1,
        }
    }
}

impl TrainingConfig {
    pub const KEYS: &'static [&'static str] = &[
        "objective",
        "vocab_sizes",
        "layers",
        "d_model",
        "heads",
        "d_ff",
        "frame_stack",
        "context",
        "dropout",
        "feature_noise",
        "conditioning",
        "epochs",
        "batch_size",
        "peak_lr",
        "warmup_steps",
        "average",
        "seed",
    ];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(Self::KEYS)?;
        let d = TrainingConfig::default();
        let conditioning = match kv.raw("conditioning") {
            None => d.conditioning,
            Some(v) => parse_flag(v).map_err(|e| Error::Config(format!("conditioning: {e}")))?,
        };
        let cfg = TrainingConfig {
            objective: kv.raw("objective").map_or(Ok(d.objective), str::parse)?,
            vocab_sizes: kv.list_or("vocab_sizes", &d.vocab_sizes)?,
            layers: kv.get_or("layers", d.layers)?,
            d_model: kv.get_or("d_model", d.d_model)?,
            heads: kv.get_or("heads", d.heads)?,
            d_ff: kv.get_or("d_ff", d.d_ff)?,
            frame_stack: kv.get_or("frame_stack", d.frame_stack)?,
            context: kv.get_or("context", d.context)?,
            dropout: kv.get_or("dropout", d.dropout)?,
            feature_noise: kv.get_or("feature_noise", d.feature_noise)?,
            conditioning,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            peak_lr: kv.get_or("peak_lr", d.peak_lr)?,
            warmup_steps: kv.get_or("warmup_steps", d.warmup_steps)?,
            average: kv.get_or("average", d.average)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    /// Serializes every key, so a run directory records the fully resolved settings.
    pub fn to_text(&self) -> String {
        let sizes: Vec<String> = self.vocab_sizes.iter().map(ToString::to_string).collect();
        format!(
            "objective = {}\nvocab_sizes = {}\nlayers = {}\nd_model = {}\nheads = {}\nd_ff = {}\n\
             frame_stack = {}\ncontext = {}\ndropout = {:?}\nfeature_noise = {:?}\nconditioning = {}\nepochs = {}\nbatch_size = {}\n\
             peak_lr = {:?}\nwarmup_steps = {}\naverage = {}\nseed = {}\n",
            self.objective,
            sizes.join(","),
            self.layers,
            self.d_model,
            self.heads,
            self.d_ff,
            self.frame_stack,
            self.context,
            self.dropout,
            self.feature_noise,
            if self.conditioning { "on" } else { "off" },
            self.epochs,
            self.batch_size,
            self.peak_lr,
            self.warmup_steps,
            self.average,
            self.seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_sizes.is_empty() {
            return Err(Error::Config("vocab_sizes is empty".into()));
        }
        if self.objective == Objective::HcCtc && self.vocab_sizes.len() < 2 {
            return Err(Error::Config("hc-ctc needs at least two vocabulary sizes".into()));
        }
        if self.objective == Objective::ScCtc && self.vocab_sizes.len() < 2 {
            return Err(Error::Config(
                "sc-ctc needs at least two levels; list the size once per level".into(),
            ));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Config(format!(
                "feature_noise {} must be a finite nonnegative number",
                self.feature_noise
            )));
        }
        if self.batch_size == 0 || self.warmup_steps == 0 || !(self.peak_lr > 0.0) {
            return Err(Error::Config(
                "batch_size, warmup_steps and peak_lr must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Vocabulary sizes per level as the objective trains them.
    pub fn level_sizes(&self) -> Vec<usize> {
        let last = *self.vocab_sizes.last().expect("validated");
        match self.objective {
            Objective::Ctc => vec![last],
            Objective::ScCtc => vec![last; self.vocab_sizes.len()],
            Objective::HcCtc | Objective::ParaCtc => self.vocab_sizes.clone(),
        }
    }

    /// Encoder settings for vocabularies of the given (trained) sizes.
    pub fn encoder_config(&self, input_dim: usize, level_vocab_sizes: Vec<usize>) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            input_dim,
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            level_vocab_sizes,
            conditioning: self.conditioning,
            frame_stack: self.frame_stack,
            context: self.context,
            layout: match self.objective {
                Objective::ParaCtc => HeadLayout::Parallel,
                _ => HeadLayout::Tapped,
            },
            dropout: self.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
