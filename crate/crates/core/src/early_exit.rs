//! Early-exit pieces: joint loss over exits, confidence rules, the recursive
//! soft branching of exit predictions and its stick-breaking weights.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HaltingRule {
    #[default]
    MaxProb,
    /// `1 - H(p) / ln C`, so both rules live in `[0, 1]`.
    Entropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    #[default]
    HeuristicThreshold,
    DifferentiableBranching,
}

fn one() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EeConfig {
    #[serde(default = "one")]
    pub alpha: f64,
    /// One weight per early exit; an empty list means weight 1 for each.
    #[serde(default)]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub rule: HaltingRule,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub gate_mode: GateMode,
}

impl Default for EeConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            betas: Vec::new(),
            rule: HaltingRule::MaxProb,
            threshold: default_threshold(),
            gate_mode: GateMode::HeuristicThreshold,
        }
    }
}

impl EeConfig {
    pub fn betas_for(&self, n_exits: usize) -> Result<Vec<f64>> {
        if self.betas.is_empty() {
            return Ok(vec![1.0; n_exits]);
        }
        if self.betas.len() != n_exits {
            return Err(invalid(format!(
                "{} exit weights for {n_exits} exits",
                self.betas.len()
            )));
        }
        Ok(self.betas.clone())
    }

    pub fn validate(&self, n_exits: usize) -> Result<()> {
        let betas = self.betas_for(n_exits)?;
        if self.alpha < 0.0 || betas.iter().any(|&b| !(b >= 0.0)) || !self.alpha.is_finite() {
            return Err(invalid("exit loss weights must be nonnegative"));
        }
        if self.alpha + betas.iter().sum::<f64>() <= 0.0 {
            return Err(invalid("exit loss weights must not all be zero"));
        }
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(invalid(format!("threshold {} out of range", self.threshold)));
        }
        Ok(())
    }
}

/// `alpha · CE(final) + Σ_i beta_i · CE(exit_i)` for logits of shape
/// `samples x classes`.
pub fn joint_loss(
    tape: &mut Tape,
    exits: &[Var],
    final_logits: Var,
    targets: &[usize],
    cfg: &EeConfig,
) -> Result<Var> {
    let betas = cfg.betas_for(exits.len())?;
    let ce = tape.cross_entropy(final_logits, targets)?;
    let mut total = tape.scale(ce, cfg.alpha)?;
    for (&y, &beta) in exits.iter().zip(&betas) {
        let ce = tape.cross_entropy(y, targets)?;
        let term = tape.scale(ce, beta)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Confidence of a probability row under `rule`.
pub fn confidence(probs: &[f64], rule: HaltingRule) -> f64 {
    match rule {
        HaltingRule::MaxProb => probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        HaltingRule::Entropy => {
            let c = probs.len();
            if c < 2 {
                return 1.0;
            }
            let h: f64 = probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            1.0 - h / (c as f64).ln()
        }
    }
}

/// Stick-breaking weights `Γ_j = γ_j Π_{i<j} (1 - γ_i)` and the leftover mass
/// `Π_i (1 - γ_i)`.
pub fn gamma_vector(gates: &[f64]) -> Result<(Vec<f64>, f64)> {
    if let Some(g) = gates.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(invalid(format!("gate {g} outside [0, 1]")));
    }
    let mut rest = 1.0;
    let gamma = gates
        .iter()
        .map(|&g| {
            let w = rest * g;
            rest *= 1.0 - g;
            w
        })
        .collect();
    Ok((gamma, rest))
}

/// Exit chosen by binary gates: the first gate at or above one half, else the
/// final exit. Indices are 1-based.
pub fn gated_exit(gates: &[f64]) -> usize {
    gates
        .iter()
        .position(|&g| g >= 0.5)
        .map_or(gates.len() + 1, |i| i + 1)
}

/// `ỹ_i = γ_i y_i + (1 - γ_i) ỹ_{i+1}` evaluated from the last output down,
/// with `ỹ_b = y_b`. `outputs` holds `y_1 .. y_b`; `gates` holds `γ_1 .. γ_{b-1}`
/// as nodes broadcastable against the outputs.
pub fn branch_mix(tape: &mut Tape, outputs: &[Var], gates: &[Var]) -> Result<Var> {
    let (&last, rest) = outputs
        .split_last()
        .ok_or_else(|| invalid("branching needs at least one output"))?;
    if gates.len() != rest.len() {
        return Err(Error::ShapeMismatch {
            op: "branch_mix",
            detail: format!("{} gates for {} outputs", gates.len(), outputs.len()),
        });
    }
    let mut acc = last;
    for (&y, &g) in rest.iter().zip(gates).rev() {
        let shape = tape.value(g).shape().to_vec();
        let ones = tape.constant(Tensor::ones(&shape));
        let keep = tape.sub(ones, g)?;
        let a = tape.mul(y, g)?;
        let b = tape.mul(acc, keep)?;
        acc = tape.add(a, b)?;
    }
    Ok(acc)
}

/// Mean negative log-probability of the targets for a `samples x classes`
/// probability node.
pub fn nll_of_probs(tape: &mut Tape, probs: Var, targets: &[usize]) -> Result<Var> {
    let (n, c) = (tape.value(probs).rows(), tape.value(probs).cols());
    if targets.len() != n || targets.iter().any(|&t| t >= c) {
        return Err(invalid("targets do not match the probability rows"));
    }
    let positions: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * c + t).collect();
    let picked = tape.pick(probs, &positions)?;
    let logp = tape.log(picked)?;
    let s = tape.sum(logp)?;
    tape.scale(s, -1.0 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitTrace {
    pub sample: usize,
    /// 1-based; the final head is the last exit.
    pub exit: usize,
    pub confidence: f64,
    pub gates: Vec<f64>,
    pub macs: u64,
}

impl ExitTrace {
    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, self)?;
        w.write_all(b"\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stick_breaking_examples() {
        assert_eq!(gamma_vector(&[1.0, 0.3]).unwrap(), (vec![1.0, 0.0], 0.0));
        assert_eq!(gamma_vector(&[0.0, 1.0]).unwrap(), (vec![0.0, 1.0], 0.0));
        assert_eq!(gamma_vector(&[0.5, 0.5]).unwrap(), (vec![0.5, 0.25], 0.25));
        assert!(gamma_vector(&[1.5]).is_err());
        assert!(gamma_vector(&[f64::NAN]).is_err());
    }

    #[test]
    fn uniform_logits_loss() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[1, 4]));
        let v = tape.constant(Tensor::zeros(&[1, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 4]));
        let l = joint_loss(&mut tape, &[u, v], w, &[2], &EeConfig::default()).unwrap();
        assert!((tape.value(l).item().unwrap() - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!(joint_loss(&mut tape, &[u], w, &[4], &EeConfig::default()).is_err());
    }

    #[test]
    fn branching_expansion() {
        let mut tape = Tape::new();
        let ys: Vec<Var> = [1.0, 2.0, 4.0]
            .iter()
            .map(|&v| tape.constant(Tensor::row(&[v])))
            .collect();
        let half = tape.constant(Tensor::full(&[1, 1], 0.5));
        let out = branch_mix(&mut tape, &ys, &[half, half]).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5 + 0.5 + 1.0]);
        let one = tape.constant(Tensor::full(&[1, 1], 1.0));
        let zero = tape.constant(Tensor::full(&[1, 1], 0.0));
        let first = branch_mix(&mut tape, &ys, &[one, one]).unwrap();
        assert_eq!(tape.value(first).data(), &[1.0]);
        let last = branch_mix(&mut tape, &ys, &[zero, zero]).unwrap();
        assert_eq!(tape.value(last).data(), &[4.0]);
    }

    #[test]
    fn confidence_rules() {
        assert_eq!(confidence(&[0.2, 0.8], HaltingRule::MaxProb), 0.8);
        assert!(confidence(&[0.25; 4], HaltingRule::Entropy).abs() < 1e-15);
        assert_eq!(confidence(&[0.0, 1.0, 0.0], HaltingRule::Entropy), 1.0);
        assert_eq!(gated_exit(&[0.2, 0.9]), 2);
        assert_eq!(gated_exit(&[0.2, 0.4]), 3);
    }
}
