//! Router functions for mixture-of-experts layers.
//!
//! Affinities are dot products between tokens and trainable expert embeddings.
//! Three assignment strategies are provided: each token picks its top-k experts
//! (token choice), each expert picks its top-k tokens (expert choice), or
//! experts are drawn uniformly at random. Gate weights are a softmax over the
//! selected support only, so the combination over selected experts is convex.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::gumbel::{gumbel_noise, top_k, top_k_indicator};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingStrategy {
    TokenChoice,
    ExpertChoice,
    Random,
}

/// How token-choice selections are made.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    /// Deterministic top-k of the affinities.
    #[default]
    Greedy,
    /// Top-k of Gumbel-perturbed affinities, trained straight-through.
    Stochastic,
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub n_experts: usize,
    pub k: usize,
    pub strategy: RoutingStrategy,
    #[serde(default)]
    pub balance_weight: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub mode: RoutingMode,
}

impl RouterConfig {
    pub fn new(n_experts: usize, k: usize, strategy: RoutingStrategy) -> Self {
        Self {
            n_experts,
            k,
            strategy,
            balance_weight: 0.0,
            temperature: 1.0,
            mode: RoutingMode::Greedy,
        }
    }

    /// Checks the static constraints; `n_tokens` is needed for expert choice.
    pub fn validate(&self, n_tokens: Option<usize>) -> Result<()> {
        if self.n_experts == 0 || self.k == 0 {
            return Err(invalid("router needs at least one expert and k >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("router temperature must be positive"));
        }
        if !(self.balance_weight >= 0.0) {
            return Err(invalid("balancing weight must be nonnegative"));
        }
        match self.strategy {
            RoutingStrategy::TokenChoice | RoutingStrategy::Random if self.k > self.n_experts => {
                Err(invalid(format!(
                    "k = {} exceeds {} experts",
                    self.k, self.n_experts
                )))
            }
            RoutingStrategy::ExpertChoice => match n_tokens {
                Some(n) if self.k > n => Err(invalid(format!(
                    "expert choice k = {} exceeds {n} tokens",
                    self.k
                ))),
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// Token-to-expert assignment with gate weights and router probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingAssignment {
    pub n_tokens: usize,
    pub n_experts: usize,
    /// Per token, `(expert, gate weight)` ascending by expert.
    pub per_token: Vec<Vec<(usize, f64)>>,
    /// Per expert, routed tokens ascending.
    pub per_expert: Vec<Vec<usize>>,
    /// Router probabilities, `n_tokens x n_experts`, rows summing to one.
    pub probs: Tensor,
}

impl RoutingAssignment {
    fn from_gates(gates: &Tensor, probs: Tensor) -> Self {
        let (n_tokens, n_experts) = (gates.rows(), gates.cols());
        let mut per_token = vec![Vec::new(); n_tokens];
        let mut per_expert = vec![Vec::new(); n_experts];
        for t in 0..n_tokens {
            for e in 0..n_experts {
                let w = gates.at(t, e);
                if w != 0.0 {
                    per_token[t].push((e, w));
                    per_expert[e].push(t);
                }
            }
        }
        Self {
            n_tokens,
            n_experts,
            per_token,
            per_expert,
            probs,
        }
    }

    /// Dense `n_tokens x n_experts` gate matrix.
    pub fn gate_matrix(&self) -> Tensor {
        let mut g = Tensor::zeros(&[self.n_tokens, self.n_experts]);
        for (t, sel) in self.per_token.iter().enumerate() {
            for &(e, w) in sel {
                g.set(t, e, w);
            }
        }
        g
    }

    /// Tokens routed to each expert.
    pub fn loads(&self) -> Vec<usize> {
        self.per_expert.iter().map(Vec::len).collect()
    }

    /// `f_i`: tokens routed to expert `i` divided by the token count. Sums to `k`
    /// under token choice.
    pub fn dispatch_fractions(&self) -> Vec<f64> {
        self.loads()
            .iter()
            .map(|&c| c as f64 / self.n_tokens as f64)
            .collect()
    }

    /// Column means of the router probabilities.
    pub fn mean_probs(&self) -> Vec<f64> {
        (0..self.n_experts)
            .map(|e| {
                (0..self.n_tokens).map(|t| self.probs.at(t, e)).sum::<f64>() / self.n_tokens as f64
            })
            .collect()
    }

    /// Stacks assignments over disjoint token sets.
    pub fn concat(parts: &[RoutingAssignment]) -> Result<RoutingAssignment> {
        let first = parts.first().ok_or_else(|| invalid("nothing to concatenate"))?;
        let n_experts = first.n_experts;
        let mut out = RoutingAssignment {
            n_tokens: 0,
            n_experts,
            per_token: Vec::new(),
            per_expert: vec![Vec::new(); n_experts],
            probs: Tensor::zeros(&[1, n_experts]),
        };
        let mut probs = Vec::new();
        for p in parts {
            if p.n_experts != n_experts {
                return Err(invalid("expert counts differ"));
            }
            for (e, toks) in p.per_expert.iter().enumerate() {
                out.per_expert[e].extend(toks.iter().map(|t| t + out.n_tokens));
            }
            out.per_token.extend(p.per_token.iter().cloned());
            probs.extend_from_slice(p.probs.data());
            out.n_tokens += p.n_tokens;
        }
        out.probs = Tensor::new(vec![out.n_tokens, n_experts], probs)?;
        Ok(out)
    }

    /// One JSON object per token: `{"token", "experts", "weights"}`. Token ids
    /// are offset by `first_token`.
    pub fn write_jsonl(&self, w: &mut impl Write, first_token: usize) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            token: usize,
            experts: Vec<usize>,
            weights: &'a [f64],
        }
        for (t, sel) in self.per_token.iter().enumerate() {
            let weights: Vec<f64> = sel.iter().map(|&(_, w)| w).collect();
            let rec = Record {
                token: first_token + t,
                experts: sel.iter().map(|&(e, _)| e).collect(),
                weights: &weights,
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Routing decisions plus their tape nodes.
#[derive(Clone, Debug)]
pub struct Routing {
    pub assignment: RoutingAssignment,
    /// Dense gate matrix node, `n_tokens x n_experts`.
    pub gates: Var,
    /// Router probability node, `n_tokens x n_experts`.
    pub probs: Var,
}

/// `tokens · embeddingsᵀ`
pub fn affinity_scores(tokens: &Tensor, embeddings: &Tensor) -> Result<Tensor> {
    if tokens.rank() != 2 || embeddings.rank() != 2 || tokens.cols() != embeddings.cols() {
        return Err(Error::ShapeMismatch {
            op: "affinity_scores",
            detail: format!("tokens {:?}, embeddings {:?}", tokens.shape(), embeddings.shape()),
        });
    }
    tokens.matmul(&embeddings.transpose()?)
}

/// Tape version of [`affinity_scores`].
pub fn affinity_on_tape(tape: &mut Tape, tokens: Var, embeddings: Var) -> Result<Var> {
    let (t, e) = (tape.value(tokens), tape.value(embeddings));
    if t.rank() != 2 || e.rank() != 2 || t.cols() != e.cols() {
        return Err(Error::ShapeMismatch {
            op: "affinity_scores",
            detail: format!("tokens {:?}, embeddings {:?}", t.shape(), e.shape()),
        });
    }
    let et = tape.transpose(embeddings)?;
    tape.matmul(tokens, et)
}

/// Routes the rows of an affinity node according to `cfg`.
pub fn route(tape: &mut Tape, aff: Var, cfg: &RouterConfig, rng: &mut impl Rng) -> Result<Routing> {
    let (n_tok, n_exp) = {
        let a = tape.value(aff);
        (a.rows(), a.cols())
    };
    if n_exp != cfg.n_experts {
        return Err(Error::ShapeMismatch {
            op: "route",
            detail: format!("{n_exp} affinity columns for {} experts", cfg.n_experts),
        });
    }
    cfg.validate(Some(n_tok))?;
    let tau = cfg.temperature;
    let (gates, probs) = match cfg.strategy {
        RoutingStrategy::TokenChoice => {
            let probs = tape.softmax(aff, 1, tau)?;
            let gates = match cfg.mode {
                RoutingMode::Greedy => {
                    let sel = top_k_indicator(tape.value(aff), cfg.k, None);
                    let mask = sel.data().iter().map(|&v| v != 0.0).collect();
                    tape.masked_softmax(aff, 1, tau, mask)?
                }
                RoutingMode::Stochastic => {
                    let noise = tape.constant(Tensor::new(
                        vec![n_tok, n_exp],
                        gumbel_noise(n_tok * n_exp, rng),
                    )?);
                    let z = tape.add(aff, noise)?;
                    let clean = tape.value(aff).clone();
                    let k = cfg.k;
                    let (gates, forward) = tape.straight_through(z, tau, None, |zv, _| {
                        let sel = top_k_indicator(zv, k, None);
                        let mask: Vec<bool> = sel.data().iter().map(|&v| v != 0.0).collect();
                        crate::autodiff::softmax_forward(&clean, 1, tau, Some(&mask))
                    })?;
                    // the surrogate value drifts off zero under replayed perturbations
                    return Ok(Routing {
                        assignment: RoutingAssignment::from_gates(&forward, tape.value(probs).clone()),
                        gates,
                        probs,
                    });
                }
            };
            (gates, probs)
        }
        RoutingStrategy::ExpertChoice => {
            let probs = tape.softmax(aff, 1, tau)?;
            let a = tape.value(aff);
            let mut mask = vec![false; n_tok * n_exp];
            for e in 0..n_exp {
                let column: Vec<f64> = (0..n_tok).map(|t| a.at(t, e)).collect();
                for t in top_k(&column, cfg.k, None) {
                    mask[t * n_exp + e] = true;
                }
            }
            (tape.masked_softmax(aff, 0, tau, mask)?, probs)
        }
        RoutingStrategy::Random => {
            let mut g = Tensor::zeros(&[n_tok, n_exp]);
            for t in 0..n_tok {
                for e in sample(rng, n_exp, cfg.k) {
                    g.set(t, e, 1.0 / cfg.k as f64);
                }
            }
            let probs = tape.constant(Tensor::full(&[n_tok, n_exp], 1.0 / n_exp as f64));
            (tape.constant(g), probs)
        }
    };
    let assignment = RoutingAssignment::from_gates(tape.value(gates), tape.value(probs).clone());
    Ok(Routing {
        assignment,
        gates,
        probs,
    })
}

pub fn route_token_choice(
    aff: &Tensor,
    k: usize,
    mode: RoutingMode,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<RoutingAssignment> {
    let cfg = RouterConfig {
        mode,
        temperature,
        ..RouterConfig::new(aff.cols(), k, RoutingStrategy::TokenChoice)
    };
    route_value(aff, &cfg, rng)
}

pub fn route_expert_choice(aff: &Tensor, k: usize, temperature: f64) -> Result<RoutingAssignment> {
    let cfg = RouterConfig {
        temperature,
        ..RouterConfig::new(aff.cols(), k, RoutingStrategy::ExpertChoice)
    };
    route_value(aff, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
}

pub fn route_random(
    n_tokens: usize,
    n_experts: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<RoutingAssignment> {
    let cfg = RouterConfig::new(n_experts, k, RoutingStrategy::Random);
    route_value(&Tensor::zeros(&[n_tokens, n_experts]), &cfg, rng)
}

fn route_value(aff: &Tensor, cfg: &RouterConfig, rng: &mut impl Rng) -> Result<RoutingAssignment> {
    let mut tape = Tape::new();
    let a = tape.constant(aff.clone());
    Ok(route(&mut tape, a, cfg, rng)?.assignment)
}

/// `n_experts · Σ_i f_i · P̄_i` over router probabilities `probs`
/// (`tokens x experts`) with dispatch fractions held constant.
pub fn balancing_loss(tape: &mut Tape, probs: Var, dispatch: &[f64]) -> Result<Var> {
    let n = tape.value(probs).cols();
    if dispatch.len() != n {
        return Err(Error::ShapeMismatch {
            op: "balancing_loss",
            detail: format!("{} fractions for {n} experts", dispatch.len()),
        });
    }
    let mean = tape.mean_axis(probs, 0)?;
    let f = tape.constant(Tensor::row(dispatch));
    let prod = tape.mul(mean, f)?;
    let s = tape.sum(prod)?;
    tape.scale(s, n as f64)
}

/// Balancing loss of several routings pooled over all their tokens.
pub fn balancing_loss_pooled(tape: &mut Tape, routings: &[&Routing]) -> Result<Var> {
    let assignments: Vec<RoutingAssignment> =
        routings.iter().map(|r| r.assignment.clone()).collect();
    let merged = RoutingAssignment::concat(&assignments)?;
    let probs: Vec<Var> = routings.iter().map(|r| r.probs).collect();
    let probs = tape.concat(&probs, 0)?;
    balancing_loss(tape, probs, &merged.dispatch_fractions())
}

/// Value of the balancing loss for a finished assignment.
pub fn balancing_loss_value(assign: &RoutingAssignment) -> f64 {
    let n = assign.n_experts as f64;
    n * assign
        .dispatch_fractions()
        .iter()
        .zip(assign.mean_probs())
        .map(|(f, p)| f * p)
        .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadStats {
    pub fractions: Vec<f64>,
    pub mean_probs: Vec<f64>,
    /// Population standard deviation of the fractions over their mean.
    pub cv: f64,
    pub starved: Vec<bool>,
}

pub fn load_stats(assign: &RoutingAssignment, starvation_threshold: f64) -> LoadStats {
    let fractions = assign.dispatch_fractions();
    let n = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
    let cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    LoadStats {
        starved: fractions.iter().map(|&f| f < starvation_threshold).collect(),
        mean_probs: assign.mean_probs(),
        fractions,
        cv,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    #[test]
    fn affinity_examples() {
        let emb = Tensor::identity(3);
        let tok = rows(&[vec![0.0, 0.0, 1.0]]);
        assert_eq!(affinity_scores(&tok, &emb).unwrap().data(), &[0.0, 0.0, 1.0]);
        let zeros = Tensor::zeros(&[4, 3]);
        assert!(affinity_scores(&zeros, &emb).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(affinity_scores(&Tensor::zeros(&[2, 2]), &emb).is_err());
    }

    #[test]
    fn token_choice_example() {
        let aff = rows(&[vec![0.9, 0.1, 0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = route_token_choice(&aff, 2, RoutingMode::Greedy, 1.0, &mut rng).unwrap();
        let sel = &a.per_token[0];
        assert_eq!(sel.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 2]);
        // softmax(0.9, 0.5) = (1 / (1 + e^-0.4), ...)
        let w0 = 1.0 / (1.0 + (-0.4f64).exp());
        assert!((sel[0].1 - w0).abs() < 1e-15);
        assert!((sel[0].1 - 0.599).abs() < 1e-3 && (sel[1].1 - 0.401).abs() < 1e-3);
    }

    #[test]
    fn token_choice_full_k_is_full_softmax() {
        let aff = rows(&[vec![0.3, -0.2, 1.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = route_token_choice(&aff, 4, RoutingMode::Greedy, 1.0, &mut rng).unwrap();
        let w: Vec<f64> = a.per_token[0].iter().map(|s| s.1).collect();
        for (x, y) in w.iter().zip(a.probs.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn token_choice_ties() {
        let aff = rows(&[vec![1.0, 1.0, 1.0]]);
        let a = route_token_choice(&aff, 2, RoutingMode::Greedy, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.per_expert, vec![vec![0], vec![0], vec![]]);
    }

    #[test]
    fn expert_choice_examples() {
        let aff = rows(&[vec![2.0, 0.0], vec![1.0, 3.0], vec![0.0, 1.0]]);
        let a = route_expert_choice(&aff, 1, 1.0).unwrap();
        assert_eq!(a.per_expert, vec![vec![0], vec![1]]);
        assert!(a.per_token[2].is_empty());
        let all = route_expert_choice(&aff, 3, 1.0).unwrap();
        assert_eq!(all.per_expert, vec![vec![0, 1, 2], vec![0, 1, 2]]);
        let dom = rows(&[vec![5.0, 5.0], vec![0.0, 0.0]]);
        let d = route_expert_choice(&dom, 1, 1.0).unwrap();
        assert_eq!(d.per_expert, vec![vec![0], vec![0]]);
        assert!(route_expert_choice(&aff, 4, 1.0).is_err());
    }

    #[test]
    fn random_routing() {
        let a = route_random(5, 4, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for sel in &a.per_token {
            assert_eq!(sel.len(), 4);
            assert!(sel.iter().all(|&(_, w)| w == 0.25));
        }
        let x = route_random(50, 4, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let y = route_random(50, 4, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn balancing_loss_extremes() {
        let uniform = RoutingAssignment {
            n_tokens: 4,
            n_experts: 4,
            per_token: (0..4).map(|t| vec![(t, 1.0)]).collect(),
            per_expert: (0..4).map(|e| vec![e]).collect(),
            probs: Tensor::full(&[4, 4], 0.25),
        };
        assert!((balancing_loss_value(&uniform) - 1.0).abs() < 1e-15);
        let mut probs = Tensor::zeros(&[3, 4]);
        (0..3).for_each(|t| probs.set(t, 0, 1.0));
        let collapsed = RoutingAssignment {
            n_tokens: 3,
            n_experts: 4,
            per_token: vec![vec![(0, 1.0)]; 3],
            per_expert: vec![vec![0, 1, 2], vec![], vec![], vec![]],
            probs,
        };
        assert_eq!(balancing_loss_value(&collapsed), 4.0);
    }

    #[test]
    fn balancing_loss_can_dip_below_one_when_dispatch_and_probs_disagree() {
        // Two tokens lean weakly to expert 0, one token strongly to expert 1.
        let probs = rows(&[vec![0.51, 0.49], vec![0.51, 0.49], vec![0.0, 1.0]]);
        let a = route_token_choice(&probs.map(f64::ln_1p), 1, RoutingMode::Greedy, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.loads(), vec![2, 1]);
        let manual = RoutingAssignment { probs, ..a };
        assert!(balancing_loss_value(&manual) < 1.0);
    }

    #[test]
    fn load_stats_examples() {
        let mut per_expert = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![]];
        let probs = Tensor::full(&[6, 4], 0.25);
        let a = RoutingAssignment {
            n_tokens: 6,
            n_experts: 4,
            per_token: vec![vec![]; 6],
            per_expert: per_expert.clone(),
            probs: probs.clone(),
        };
        let s = load_stats(&a, 0.05);
        assert_eq!(s.starved, vec![false, false, false, true]);
        per_expert[3] = vec![0, 1];
        per_expert[0] = vec![2, 3];
        let u = RoutingAssignment {
            n_tokens: 8,
            per_expert: vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]],
            probs: Tensor::full(&[8, 4], 0.25),
            per_token: vec![vec![]; 8],
            ..a
        };
        let s = load_stats(&u, 0.05);
        assert_eq!(s.cv, 0.0);
        assert!(s.starved.iter().all(|&b| !b));
    }

    #[test]
    fn jsonl_records() {
        let aff = rows(&[vec![0.9, 0.1], vec![0.0, 1.0]]);
        let a = route_token_choice(&aff, 1, RoutingMode::Greedy, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf, 10).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"token":10,"experts":[0],"weights":[1.0]}"#);
        assert_eq!(lines[1], r#"{"token":11,"experts":[1],"weights":[1.0]}"#);
    }
}
