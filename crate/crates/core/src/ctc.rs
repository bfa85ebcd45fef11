//! Connectionist temporal classification: the collapse map, the exact loss
//! with its gradient computed from the forward/backward lattice, best-path
//! decoding, and a brute-force path enumerator used as an oracle.
//!
//! Label id 0 is the blank throughout.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BLANK: usize = 0;

/// Largest `(V+1)^T` that [`brute_force_ctc`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;
pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &z in path {
        if Some(z) != prev && z != BLANK {
            out.push(z);
        }
        prev = Some(z);
    }
    out
}

/// Fewest frames that can emit `target`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(target: &[usize], frames: usize) -> bool {
    min_frames(target) <= frames
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn validate(log_probs: &Tensor, target: &[usize]) -> Result<()> {
    if log_probs.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "CTC expects T×V log-probabilities, got {:?}",
            log_probs.shape()
        )));
    }
    let width = log_probs.cols();
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= width) {
        return Err(Error::Contract(format!(
            "target label {bad} is blank or outside the {width}-way output"
        )));
    }
    Ok(())
}

/// Forward and backward tables over the blank-interleaved target.
///
/// `alpha[t][s]` and `beta[t][s]` both include the emission at frame `t`.
#[derive(Clone, Debug)]
pub struct CtcLattice {
    expanded: Vec<usize>,
    frames: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_likelihood: f64,
}

impl CtcLattice {
    pub fn new(log_probs: &Tensor, target: &[usize]) -> Result<Self> {
        validate(log_probs, target)?;
        let frames = log_probs.rows();
        let mut expanded = Vec::with_capacity(2 * target.len() + 1);
        expanded.push(BLANK);
        for &y in target {
            expanded.push(y);
            expanded.push(BLANK);
        }
        let s_len = expanded.len();
        let skip_allowed = |s: usize| s >= 2 && expanded[s] != BLANK && expanded[s] != expanded[s - 2];
        let emit = |t: usize, s: usize| log_probs.get(t, expanded[s]);

        let neg = f64::NEG_INFINITY;
        let mut alpha = vec![neg; frames * s_len];
        alpha[0] = emit(0, 0);
        if s_len > 1 {
            alpha[1] = emit(0, 1);
        }
        for t in 1..frames {
            let (prev, cur) = alpha.split_at_mut(t * s_len);
            let prev = &prev[(t - 1) * s_len..];
            for s in 0..s_len {
                let mut acc = prev[s];
                if s >= 1 {
                    acc = lse2(acc, prev[s - 1]);
                }
                if skip_allowed(s) {
                    acc = lse2(acc, prev[s - 2]);
                }
                cur[s] = if acc == neg { neg } else { acc + emit(t, s) };
            }
        }

        let mut beta = vec![neg; frames * s_len];
        let last = frames - 1;
        beta[last * s_len + s_len - 1] = emit(last, s_len - 1);
        if s_len > 1 {
            beta[last * s_len + s_len - 2] = emit(last, s_len - 2);
        }
        for t in (0..last).rev() {
            let (cur, next) = beta.split_at_mut((t + 1) * s_len);
            let cur = &mut cur[t * s_len..];
            for s in 0..s_len {
                let mut acc = next[s];
                if s + 1 < s_len {
                    acc = lse2(acc, next[s + 1]);
                }
                if s + 2 < s_len && skip_allowed(s + 2) {
                    acc = lse2(acc, next[s + 2]);
                }
                cur[s] = if acc == neg { neg } else { acc + emit(t, s) };
            }
        }

        let end = last * s_len;
        let log_likelihood = if s_len > 1 {
            lse2(alpha[end + s_len - 1], alpha[end + s_len - 2])
        } else {
            alpha[end]
        };
        Ok(CtcLattice {
            expanded,
            frames,
            alpha,
            beta,
            log_likelihood,
        })
    }

    pub fn expanded(&self) -> &[usize] {
        &self.expanded
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn alpha(&self, t: usize, s: usize) -> f64 {
        self.alpha[t * self.expanded.len() + s]
    }

    pub fn beta(&self, t: usize, s: usize) -> f64 {
        self.beta[t * self.expanded.len() + s]
    }

    /// `log P(target | input)`; `-inf` when no path exists.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// `log Σ_s α_t(s)·β_t(s) / p_t(l'_s)`, which equals the log-likelihood at every frame.
    pub fn frame_total(&self, log_probs: &Tensor, t: usize) -> f64 {
        let terms: Vec<f64> = (0..self.expanded.len())
            .map(|s| {
                let e = log_probs.get(t, self.expanded[s]);
                if e == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    self.alpha(t, s) + self.beta(t, s) - e
                }
            })
            .collect();
        logsumexp(&terms)
    }

    /// Derivative of the negative log-likelihood with respect to every entry
    /// of `log_probs`: minus the posterior occupancy of each label per frame.
    pub fn nll_gradient(&self, log_probs: &Tensor) -> Tensor {
        let mut grad = Tensor::zeros(log_probs.shape());
        if self.log_likelihood == f64::NEG_INFINITY {
            return grad;
        }
        let width = log_probs.cols();
        for t in 0..self.frames {
            for (s, &label) in self.expanded.iter().enumerate() {
                let e = log_probs.get(t, label);
                let a = self.alpha(t, s);
                let b = self.beta(t, s);
                if e == f64::NEG_INFINITY || a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                    continue;
                }
                grad.data_mut()[t * width + label] -= (a + b - e - self.log_likelihood).exp();
            }
        }
        grad
    }
}

/// Loss value and gradient from [`ctc_loss`].
#[derive(Clone, Debug)]
pub struct CtcLoss {
    /// `-log P(target | input)`; `+inf` for infeasible targets.
    pub loss: f64,
    /// `∂loss/∂log_probs`; all zeros for infeasible targets.
    pub grad: Tensor,
    pub feasible: bool,
}

/// Negative log-likelihood of `target` under per-frame log-posteriors
/// `log_probs` (T×V, blank at column 0).
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<CtcLoss> {
    validate(log_probs, target)?;
    if !is_feasible(target, log_probs.rows()) {
        return Ok(CtcLoss {
            loss: f64::INFINITY,
            grad: Tensor::zeros(log_probs.shape()),
            feasible: false,
        });
    }
    let lattice = CtcLattice::new(log_probs, target)?;
    let loss = -lattice.log_likelihood();
    Ok(CtcLoss {
        loss,
        grad: lattice.nll_gradient(log_probs),
        feasible: loss.is_finite(),
    })
}

/// `P(target | input)` by summing over every latent path explicitly.
pub fn brute_force_ctc(probs: &Tensor, target: &[usize]) -> Result<f64> {
    validate(probs, target)?;
    let (frames, width) = probs.dims2();
    let paths = (0..frames).try_fold(1usize, |acc, _| acc.checked_mul(width));
    match paths {
        Some(n) if frames <= BRUTE_FORCE_MAX_FRAMES && n <= BRUTE_FORCE_LIMIT => {}
        _ => {
            return Err(Error::Size(format!(
                "{width}^{frames} paths exceeds the enumeration guard (T ≤ {BRUTE_FORCE_MAX_FRAMES}, ≤ {BRUTE_FORCE_LIMIT} paths)"
            )))
        }
    }
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    loop {
        if collapse(&path) == target {
            total += path.iter().enumerate().map(|(t, &z)| probs.get(t, z)).product::<f64>();
        }
        // odometer increment
        let mut t = frames;
        loop {
            if t == 0 {
                return Ok(total);
            }
            t -= 1;
            path[t] += 1;
            if path[t] < width {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Per-frame argmax (lowest id wins ties) followed by [`collapse`].
pub fn best_path_decode(posteriors: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..posteriors.rows())
        .map(|t| {
            let row = posteriors.row(t);
            let mut best = 0;
            for (v, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = v;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}
