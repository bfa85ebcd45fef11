//! Decoding, word error rate, split evaluation and attention dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ctc::best_path_decode;
use crate::encoder::{Encoder, ForwardOptions};
use crate::error::{Error, Result};
use crate::harness::config::TrainingConfig;
use crate::harness::synth::Utterance;
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::objectives::{Example, ObjectiveReport};
use crate::subword::{Hierarchy, SubwordVocab};

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Edit distance over whitespace-separated words divided by `max(1, |ref|)`.
pub fn edit_distance_wer(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    edit_distance(&r, &h) as f64 / r.len().max(1) as f64
}

/// A trained model with everything needed to turn features into text.
#[derive(Clone, Debug)]
pub struct Recognizer {
    pub config: TrainingConfig,
    pub hierarchy: Hierarchy,
    pub model: Encoder,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const VOCAB_DIR: &str = "vocab";

pub fn vocab_path(run_dir: &Path, level: usize) -> PathBuf {
    run_dir.join(VOCAB_DIR).join(format!("level{}.txt", level + 1))
}

/// The run directory holding `config.txt` for a checkpoint: its own directory or the one above.
pub fn run_dir_of(checkpoint: &Path) -> Result<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .take(2)
        .find(|d| d.join(CONFIG_FILE).is_file())
        .map(Path::to_path_buf)
        .ok_or_else(|| Error::Lookup(format!("no {CONFIG_FILE} next to or above {}", checkpoint.display())))
}

impl Recognizer {
    pub fn new(config: TrainingConfig, hierarchy: Hierarchy, params: ParamStore) -> Result<Self> {
        let weight = params
            .by_name("input.weight")
            .ok_or_else(|| Error::Checkpoint("missing parameter input.weight".into()))?;
        let input_dim = weight.shape()[0] / (config.frame_stack.max(1) * (2 * config.context + 1));
        let sizes = hierarchy.sizes();
        for (level, &size) in sizes.iter().enumerate() {
            let head = params
                .by_name(&format!("heads.{}.weight", level + 1))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks a head for level {}", level + 1)))?;
            if head.shape()[1] != size {
                return Err(Error::Config(format!(
                    "level {} vocabulary has {size} tokens, checkpoint head has {}",
                    level + 1,
                    head.shape()[1]
                )));
            }
        }
        let model = Encoder::from_params(config.encoder_config(input_dim, sizes)?, params)?;
        Ok(Recognizer {
            config,
            hierarchy,
            model,
        })
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let run = run_dir_of(checkpoint)?;
        let config = TrainingConfig::read(&run.join(CONFIG_FILE))?;
        let vocabs = (0..config.level_sizes().len())
            .map(|k| SubwordVocab::load(vocab_path(&run, k)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(config, Hierarchy { vocabs }, ParamStore::load(checkpoint)?)
    }

    pub fn final_vocab(&self) -> &SubwordVocab {
        self.hierarchy.vocabs.last().expect("at least one level")
    }

    pub fn posteriors(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.model.encode(&mut g, features, &mut ForwardOptions::eval())?;
        Ok(g.value(*out.level_posteriors.last().expect("final head")).clone())
    }

    /// Best-path decoding of the final head, detokenized.
    pub fn decode(&self, features: &Tensor) -> Result<String> {
        decode_posteriors(&self.posteriors(features)?, self.final_vocab())
    }
}

pub fn decode_posteriors(posteriors: &Tensor, vocab: &SubwordVocab) -> Result<String> {
    vocab.detokenize(&best_path_decode(posteriors))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: ObjectiveReport,
    /// Corpus WER: total word edits over total reference words.
    pub wer: f64,
    /// `(utterance id, hypothesis)` in input order.
    pub hypotheses: Vec<(String, String)>,
}

/// Losses under the recognizer's objective plus best-path WER of the final head.
pub fn evaluate(rec: &Recognizer, utterances: &[Utterance]) -> Result<Evaluation> {
    let mut losses = Vec::with_capacity(utterances.len());
    let mut hypotheses = Vec::with_capacity(utterances.len());
    let (mut edits, mut words) = (0usize, 0usize);
    for utt in utterances {
        let targets = rec.hierarchy.segment(&utt.transcript);
        let mut g = Graph::new();
        let out = rec.model.encode(&mut g, &utt.features, &mut ForwardOptions::eval())?;
        let levels = rec.config.objective.level_losses(&mut g, &out, &targets)?;
        losses.push(levels.iter().map(|l| l.value).collect::<Vec<_>>());
        let post = g.value(*out.level_posteriors.last().expect("final head"));
        let hyp = decode_posteriors(post, rec.final_vocab())?;
        let r: Vec<&str> = utt.transcript.split_whitespace().collect();
        let h: Vec<&str> = hyp.split_whitespace().collect();
        edits += edit_distance(&r, &h);
        words += r.len();
        hypotheses.push((utt.id.clone(), hyp));
    }
    Ok(Evaluation {
        report: ObjectiveReport::from_losses(&losses),
        wer: edits as f64 / words.max(1) as f64,
        hypotheses,
    })
}

/// Segments every transcript into per-level targets.
pub fn targets_for(hierarchy: &Hierarchy, utterances: &[Utterance]) -> Vec<crate::subword::HierTargets> {
    utterances.iter().map(|u| hierarchy.segment(&u.transcript)).collect()
}

pub fn examples<'a>(utterances: &'a [Utterance], targets: &'a [crate::subword::HierTargets]) -> Vec<Example<'a>> {
    utterances
        .iter()
        .zip(targets)
        .map(|(u, t)| Example {
            features: &u.features,
            targets: t,
        })
        .collect()
}

fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let (rows, cols) = m.dims2();
    let mut text = String::with_capacity(rows * cols * 12);
    for r in 0..rows {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.8e}")).collect();
        let _ = writeln!(text, "{}", row.join(" "));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `layerLL_headH.txt` attention maps and `posteriors_levelK_layerLL.txt`
/// matrices for one utterance; returns the written paths in order.
pub fn dump_attention(rec: &Recognizer, utterances: &[Utterance], id: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let utt = utterances
        .iter()
        .find(|u| u.id == id)
        .ok_or_else(|| Error::Lookup(format!("utterance {id:?} not in corpus")))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut g = Graph::new();
    let out = rec.model.encode(&mut g, &utt.features, &mut ForwardOptions::eval())?;
    let mut written = Vec::new();
    for (l, heads) in out.attention.iter().enumerate() {
        for (h, &a) in heads.iter().enumerate() {
            let p = out_dir.join(format!("layer{:02}_head{}.txt", l + 1, h + 1));
            write_matrix(&p, g.value(a))?;
            written.push(p);
        }
    }
    for (k, (&post, &layer)) in out.level_posteriors.iter().zip(&out.level_layers).enumerate() {
        let p = out_dir.join(format!("posteriors_level{}_layer{:02}.txt", k + 1, layer));
        write_matrix(&p, g.value(post))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_examples() {
        assert_eq!(edit_distance_wer("a b c", "a b c"), 0.0);
        assert_eq!(edit_distance_wer("a b", "a x"), 0.5);
        assert_eq!(edit_distance_wer("a", ""), 1.0);
        assert_eq!(edit_distance_wer("", "x y"), 2.0);
        assert_eq!(edit_distance_wer("a b c d", "b c d e"), 0.5);
    }

    #[test]
    fn wer_bounds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let r: Vec<usize> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..3)).collect();
            let h: Vec<usize> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..3)).collect();
            let d = edit_distance(&r, &h);
            assert_eq!(d == 0, r == h);
            assert!(d <= r.len().max(h.len()));
            assert_eq!(d, edit_distance(&h, &r));
        }
    }

    #[test]
    fn one_hot_teacher_posteriors_decode_exactly() {
        let corpus: Vec<String> = ["ab ba", "abba b", "a b a"].iter().map(|s| s.to_string()).collect();
        let vocab = SubwordVocab::train(&corpus, 7).unwrap();
        for line in &corpus {
            let ids = vocab.segment(line);
            // blank between every label so repeats survive the collapse
            let frames = 2 * ids.len() + 1;
            let mut m = Tensor::zeros(&[frames, vocab.len()]);
            for t in 0..frames {
                let id = if t % 2 == 1 { ids[t / 2] } else { 0 };
                m.data_mut()[t * vocab.len() + id] = 1.0;
            }
            let hyp = decode_posteriors(&m, &vocab).unwrap();
            assert_eq!(edit_distance_wer(line, &hyp), 0.0);
        }
    }
}
