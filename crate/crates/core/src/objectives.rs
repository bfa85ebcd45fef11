//! The four training objectives built from encoder level outputs.
//!
//! Multi-loss objectives weight every feasible level equally. Over a batch,
//! each level's loss is the mean over utterances whose target at that level
//! fits in the available frames, and the total is the mean over levels with at
//! least one feasible utterance. Infeasible pairs are counted, not trained on.

use std::fmt;
use std::str::FromStr;

use crate::ctc::{ctc_loss, is_feasible};
use crate::encoder::{Encoder, EncoderOutput, ForwardOptions, HeadLayout};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::subword::HierTargets;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Ctc,
    ScCtc,
    HcCtc,
    ParaCtc,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::Ctc, Objective::ScCtc, Objective::HcCtc, Objective::ParaCtc];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ctc => "ctc",
            Objective::ScCtc => "sc-ctc",
            Objective::HcCtc => "hc-ctc",
            Objective::ParaCtc => "para-ctc",
        }
    }

    pub fn layout(self) -> HeadLayout {
        match self {
            Objective::ParaCtc => HeadLayout::Parallel,
            _ => HeadLayout::Tapped,
        }
    }

    /// Level indices (0-based) whose losses enter the objective.
    pub fn active_levels(self, levels: usize) -> Vec<usize> {
        match self {
            Objective::Ctc => vec![levels - 1],
            _ => (0..levels).collect(),
        }
    }

    fn check(self, enc: &EncoderOutput, targets_levels: usize) -> Result<()> {
        let k = enc.level_log_probs.len();
        let final_layer = *enc.level_layers.last().unwrap_or(&0);
        match self {
            Objective::Ctc => Ok(()),
            Objective::ScCtc | Objective::HcCtc => {
                if k < 2 || enc.level_layers[..k - 1].iter().any(|&l| l == final_layer) {
                    return Err(Error::Config(format!(
                        "{} needs intermediate loss taps, encoder reads levels at layers {:?}",
                        self.name(),
                        enc.level_layers
                    )));
                }
                if self == Objective::HcCtc && targets_levels != k {
                    return Err(Error::Config(format!(
                        "{targets_levels} target levels for a {k}-level encoder"
                    )));
                }
                Ok(())
            }
            Objective::ParaCtc => {
                if enc.level_layers.iter().any(|&l| l != final_layer) {
                    return Err(Error::Config("para-ctc reads every level from the final layer".into()));
                }
                if targets_levels != k {
                    return Err(Error::Config(format!(
                        "{targets_levels} target levels for a {k}-level encoder"
                    )));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL.into_iter().find(|o| o.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown objective {s:?}; expected ctc, sc-ctc, hc-ctc or para-ctc"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveReport {
    /// Mean of the feasible entries of `per_level_losses`; `+inf` if none.
    pub total_loss: f64,
    /// One entry per active level, finest first; `+inf` where no utterance was feasible.
    pub per_level_losses: Vec<f64>,
    pub infeasible_count: Vec<usize>,
}

impl ObjectiveReport {
    /// Aggregates per-utterance level losses (`+inf` marks infeasible).
    pub fn from_losses(per_utterance: &[Vec<f64>]) -> Self {
        let levels = per_utterance.first().map_or(0, Vec::len);
        let mut per_level_losses = Vec::with_capacity(levels);
        let mut infeasible_count = Vec::with_capacity(levels);
        for k in 0..levels {
            let feasible: Vec<f64> = per_utterance.iter().map(|u| u[k]).filter(|v| v.is_finite()).collect();
            infeasible_count.push(per_utterance.len() - feasible.len());
            per_level_losses.push(if feasible.is_empty() {
                f64::INFINITY
            } else {
                feasible.iter().sum::<f64>() / feasible.len() as f64
            });
        }
        let active: Vec<f64> = per_level_losses.iter().copied().filter(|v| v.is_finite()).collect();
        let total_loss = if active.is_empty() {
            f64::INFINITY
        } else {
            active.iter().sum::<f64>() / active.len() as f64
        };
        ObjectiveReport {
            total_loss,
            per_level_losses,
            infeasible_count,
        }
    }
}

/// One level's CTC term for one utterance.
#[derive(Clone, Debug)]
pub struct LevelLoss {
    pub level: usize,
    /// `+inf` when the target cannot be aligned.
    pub value: f64,
    /// Graph node of the loss; `None` when infeasible.
    pub node: Option<Var>,
}

/// A single-utterance objective: its report and the scalar node to differentiate.
#[derive(Clone, Debug)]
pub struct ObjectiveTerms {
    pub report: ObjectiveReport,
    pub levels: Vec<LevelLoss>,
    /// Mean of the feasible level losses; `None` if every level was infeasible.
    pub root: Option<Var>,
}

fn level_term(g: &mut Graph, enc: &EncoderOutput, level: usize, target: &[usize]) -> Result<LevelLoss> {
    let logp = enc.level_log_probs[level];
    let out = ctc_loss(g.value(logp), target)?;
    let node = if out.feasible {
        Some(g.scalar_loss(logp, out.loss, out.grad)?)
    } else {
        None
    };
    Ok(LevelLoss {
        level,
        value: out.loss,
        node,
    })
}

fn finish(g: &mut Graph, levels: Vec<LevelLoss>) -> Result<ObjectiveTerms> {
    let values: Vec<f64> = levels.iter().map(|l| l.value).collect();
    let report = ObjectiveReport::from_losses(&[values]);
    let nodes: Vec<Var> = levels.iter().filter_map(|l| l.node).collect();
    let root = if nodes.is_empty() {
        None
    } else {
        let w = 1.0 / nodes.len() as f64;
        let terms: Vec<(Var, f64)> = nodes.iter().map(|&v| (v, w)).collect();
        Some(g.weighted_sum(&terms)?)
    };
    Ok(ObjectiveTerms { report, levels, root })
}

impl Objective {
    /// Level losses of this objective for one encoded utterance.
    pub fn level_losses(self, g: &mut Graph, enc: &EncoderOutput, targets: &HierTargets) -> Result<Vec<LevelLoss>> {
        let k = enc.level_log_probs.len();
        self.check(enc, targets.levels.len())?;
        let last = targets
            .levels
            .last()
            .ok_or_else(|| Error::Config("targets carry no levels".into()))?;
        match self {
            Objective::Ctc => Ok(vec![level_term(g, enc, k - 1, last)?]),
            Objective::ScCtc => (0..k).map(|level| level_term(g, enc, level, last)).collect(),
            Objective::HcCtc | Objective::ParaCtc => (0..k)
                .map(|level| level_term(g, enc, level, &targets.levels[level]))
                .collect(),
        }
    }
}

/// Plain CTC on the final head against the coarsest target.
pub fn ctc_objective(g: &mut Graph, enc: &EncoderOutput, target: &[usize]) -> Result<ObjectiveTerms> {
    let levels = Objective::Ctc.level_losses(
        g,
        enc,
        &HierTargets {
            levels: vec![target.to_vec()],
        },
    )?;
    finish(g, levels)
}

/// Intermediate CTC with one shared target at every tap.
pub fn sc_ctc_objective(g: &mut Graph, enc: &EncoderOutput, target: &[usize]) -> Result<ObjectiveTerms> {
    let levels = Objective::ScCtc.level_losses(
        g,
        enc,
        &HierTargets {
            levels: vec![target.to_vec()],
        },
    )?;
    finish(g, levels)
}

/// Level `k` tap trained against the level-`k` segmentation.
pub fn hc_ctc_objective(g: &mut Graph, enc: &EncoderOutput, targets: &HierTargets) -> Result<ObjectiveTerms> {
    let levels = Objective::HcCtc.level_losses(g, enc, targets)?;
    finish(g, levels)
}

/// Every level read from the final layer through its adapter.
pub fn para_ctc_objective(g: &mut Graph, enc: &EncoderOutput, targets: &HierTargets) -> Result<ObjectiveTerms> {
    let levels = Objective::ParaCtc.level_losses(g, enc, targets)?;
    finish(g, levels)
}

/// One training example: features plus per-level targets.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub features: &'a Tensor,
    pub targets: &'a HierTargets,
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub report: ObjectiveReport,
    /// Per-utterance level losses, in batch order.
    pub utterance_losses: Vec<Vec<f64>>,
    /// Parameter gradients in store order, present when requested and any level was feasible.
    pub grads: Option<Vec<Tensor>>,
}

/// Evaluates `objective` over a batch and, on request, the gradient of the
/// batch total with respect to every model parameter.
///
/// Utterances are processed one graph at a time and gradients are summed in
/// batch order, so results do not depend on scheduling.
pub fn batch_objective(
    model: &Encoder,
    objective: Objective,
    batch: &[Example<'_>],
    with_grads: bool,
    mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<BatchOutcome> {
    let cfg = model.config();
    let active = objective.active_levels(cfg.levels());
    // Level weights are fixed up front from target lengths alone.
    let mut feasible_per_level = vec![0usize; active.len()];
    for ex in batch {
        let frames = cfg.output_frames(ex.features.rows());
        for (i, &level) in active.iter().enumerate() {
            let target = match objective {
                Objective::Ctc | Objective::ScCtc => ex.targets.levels.last(),
                _ => ex.targets.levels.get(level),
            }
            .ok_or_else(|| Error::Config(format!("targets lack level {}", level + 1)))?;
            if is_feasible(target, frames) {
                feasible_per_level[i] += 1;
            }
        }
    }
    let live_levels = feasible_per_level.iter().filter(|&&n| n > 0).count();
    let weights: Vec<f64> = feasible_per_level
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else {
                1.0 / (live_levels as f64 * n as f64)
            }
        })
        .collect();

    let mut grads = (with_grads && live_levels > 0).then(|| model.zero_grads());
    let mut utterance_losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let mut g = Graph::new();
        let mut opts = ForwardOptions {
            dropout_rng: dropout_rng.as_deref_mut(),
        };
        let enc = model.encode(&mut g, ex.features, &mut opts)?;
        let levels = objective.level_losses(&mut g, &enc, ex.targets)?;
        utterance_losses.push(levels.iter().map(|l| l.value).collect());
        if let Some(acc) = grads.as_mut() {
            let terms: Vec<(Var, f64)> = levels
                .iter()
                .zip(&weights)
                .filter_map(|(l, &w)| l.node.map(|n| (n, w)))
                .collect();
            if terms.is_empty() {
                continue;
            }
            let root = g.weighted_sum(&terms)?;
            let mut back = g.backward(root)?;
            model.accumulate_grads(&g, &mut back, acc);
        }
    }
    Ok(BatchOutcome {
        report: ObjectiveReport::from_losses(&utterance_losses),
        utterance_losses,
        grads,
    })
}
