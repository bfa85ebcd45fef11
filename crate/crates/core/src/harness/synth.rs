//! Synthetic transduction corpora: pseudo-words spelled out as noisy
//! per-symbol prototype frames.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::harness::config::KeyValues;
use crate::numerics::Tensor;

const FEATURE_MAGIC: &[u8; 4] = b"HFEA";
pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
const LETTERS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    /// Number of base letters; the word separator gets its own prototype on top.
    pub alphabet: usize,
    /// How many of the letters may start a word (the first ones of the alphabet).
    pub onset_letters: usize,
    pub inventory: usize,
    pub word_len: (usize, usize),
    pub words_per_utt: (usize, usize),
    pub frames_per_symbol: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub seed: u64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            alphabet: 26,
            onset_letters: 26,
            inventory: 500,
            word_len: (3, 6),
            words_per_utt: (2, 5),
            frames_per_symbol: 4,
            feature_dim: 16,
            noise: 0.1,
            seed: 1,
            train: 500,
            dev: 100,
            test: 100,
        }
    }
}

impl SyntheticTask {
    pub const KEYS: &'static [&'static str] = &[
        "alphabet",
        "onset_letters",
        "inventory",
        "word_min_len",
        "word_max_len",
        "utt_min_words",
        "utt_max_words",
        "frames_per_symbol",
        "feature_dim",
        "noise",
        "seed",
        "train",
        "dev",
        "test",
    ];

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(Self::KEYS)?;
        let d = SyntheticTask::default();
        let task = SyntheticTask {
            alphabet: kv.get_or("alphabet", d.alphabet)?,
            onset_letters: kv.get_or("onset_letters", d.onset_letters)?,
            inventory: kv.get_or("inventory", d.inventory)?,
            word_len: (
                kv.get_or("word_min_len", d.word_len.0)?,
                kv.get_or("word_max_len", d.word_len.1)?,
            ),
            words_per_utt: (
                kv.get_or("utt_min_words", d.words_per_utt.0)?,
                kv.get_or("utt_max_words", d.words_per_utt.1)?,
            ),
            frames_per_symbol: kv.get_or("frames_per_symbol", d.frames_per_symbol)?,
            feature_dim: kv.get_or("feature_dim", d.feature_dim)?,
            noise: kv.get_or("noise", d.noise)?,
            seed: kv.get_or("seed", d.seed)?,
            train: kv.get_or("train", d.train)?,
            dev: kv.get_or("dev", d.dev)?,
            test: kv.get_or("test", d.test)?,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.alphabet == 0 || self.alphabet > LETTERS.len() {
            return bad(format!(
                "alphabet must be in 1..={}, got {}",
                LETTERS.len(),
                self.alphabet
            ));
        }
        if self.onset_letters == 0 || self.onset_letters > self.alphabet {
            return bad(format!(
                "onset_letters must be in 1..={}, got {}",
                self.alphabet, self.onset_letters
            ));
        }
        if self.inventory == 0 {
            return bad("word inventory is empty".into());
        }
        if self.word_len.0 == 0 || self.word_len.0 > self.word_len.1 {
            return bad(format!("bad word length range {:?}", self.word_len));
        }
        if self.words_per_utt.0 == 0 || self.words_per_utt.0 > self.words_per_utt.1 {
            return bad(format!("bad words-per-utterance range {:?}", self.words_per_utt));
        }
        if self.frames_per_symbol == 0 || self.feature_dim == 0 {
            return bad("frames_per_symbol and feature_dim must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        let distinct: f64 = (self.word_len.0..=self.word_len.1)
            .map(|l| self.onset_letters as f64 * (self.alphabet as f64).powi(l as i32 - 1))
            .sum();
        if (self.inventory as f64) > distinct {
            return bad(format!(
                "only {distinct} distinct words of the requested lengths, inventory {}",
                self.inventory
            ));
        }
        Ok(())
    }

    pub fn letters(&self) -> Vec<char> {
        LETTERS.chars().take(self.alphabet).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub words: Vec<String>,
    /// Symbol prototypes keyed by character, the separator as ' '.
    pub prototypes: BTreeMap<char, Vec<f64>>,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl SyntheticCorpus {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            _ => Err(Error::Lookup(format!("unknown split {name:?}"))),
        }
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates the corpus. Features are rounded to `f32` so the in-memory copy
/// equals what a round trip through feature files gives back.
pub fn generate_synthetic_corpus(task: &SyntheticTask) -> Result<SyntheticCorpus> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let letters = task.letters();

    let mut prototypes = BTreeMap::new();
    for &c in letters.iter().chain(std::iter::once(&' ')) {
        let v: Vec<f64> = (0..task.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        prototypes.insert(c, v);
    }

    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(task.inventory);
    while words.len() < task.inventory {
        let len = rng.gen_range(task.word_len.0..=task.word_len.1);
        let mut w = String::with_capacity(len);
        w.push(letters[rng.gen_range(0..task.onset_letters)]);
        w.extend((1..len).map(|_| *letters.choose(&mut rng).unwrap()));
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }

    let make_split = |name: &str, count: usize, rng: &mut ChaCha8Rng| -> Vec<Utterance> {
        (0..count)
            .map(|i| {
                let n = rng.gen_range(task.words_per_utt.0..=task.words_per_utt.1);
                let transcript = (0..n)
                    .map(|_| words.choose(rng).unwrap().as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                let symbols: Vec<char> = transcript.chars().collect();
                let frames = symbols.len() * task.frames_per_symbol;
                let mut data = Vec::with_capacity(frames * task.feature_dim);
                for c in &symbols {
                    let proto = &prototypes[c];
                    for _ in 0..task.frames_per_symbol {
                        for &p in proto {
                            let noise: f64 = if task.noise > 0.0 {
                                task.noise * Distribution::<f64>::sample(&StandardNormal, rng)
                            } else {
                                0.0
                            };
                            data.push(f32_round(p + noise));
                        }
                    }
                }
                Utterance {
                    id: format!("{name}-{i:05}"),
                    transcript,
                    features: Tensor::new(vec![frames, task.feature_dim], data).expect("non-empty utterance"),
                }
            })
            .collect()
    };
    let train = make_split("train", task.train, &mut rng);
    let dev = make_split("dev", task.dev, &mut rng);
    let test = make_split("test", task.test, &mut rng);
    Ok(SyntheticCorpus {
        words,
        prototypes,
        train,
        dev,
        test,
    })
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let (t, d) = features.dims2();
    let mut buf = Vec::with_capacity(12 + 4 * t * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: &str| Error::format("feature file", path, reason);
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(fail("missing HFEA header"));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * t * d {
        return Err(fail(&format!(
            "expected {} data bytes for {t}x{d}, found {}",
            4 * t * d,
            bytes.len() - 12
        )));
    }
    if t == 0 || d == 0 {
        return Err(fail("empty feature matrix"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(vec![t, d], data)
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.tsv"))
}

/// Writes `<split>.tsv` manifests plus one feature file per utterance under `feats/`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<()> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    for split in SPLITS {
        let mut manifest = String::new();
        for utt in corpus.split(split)? {
            let rel = format!("feats/{}.hfea", utt.id);
            write_features(&dir.join(&rel), &utt.features)?;
            manifest.push_str(&format!("{}\t{}\t{}\n", utt.id, utt.transcript, rel));
        }
        let path = manifest_path(dir, split);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    }
    let words = dir.join("words.txt");
    fs::write(&words, corpus.words.join("\n") + "\n").map_err(|e| Error::io(&words, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub transcript: String,
    pub path: PathBuf,
}

/// Parses a manifest; relative feature paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(Error::format(
                    "manifest",
                    path,
                    format!("line {}: expected 3 tab-separated fields", n + 1),
                ));
            }
            let p = Path::new(parts[2]);
            Ok(ManifestEntry {
                id: parts[0].to_string(),
                transcript: parts[1].to_string(),
                path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            })
        })
        .collect()
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Utterance>> {
    read_manifest(&manifest_path(dir, split))?
        .into_iter()
        .map(|e| {
            Ok(Utterance {
                features: read_features(&e.path)?,
                id: e.id,
                transcript: e.transcript,
            })
        })
        .collect()
}
