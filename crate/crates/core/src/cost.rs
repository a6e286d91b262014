//! Analytic MAC accounting and accuracy-versus-compute sweeps.
//!
//! One MAC is one multiply-accumulate of a matrix product. Softmax,
//! normalization and pointwise nonlinearities are charged one element-op per
//! output entry and reported separately. The analytic counts reproduce what
//! the tape records during inference, layer by layer.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::{Add, AddAssign};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::moe::MoeVariant;
use crate::routing::RoutingStrategy;
use crate::tensor::Tensor;
use crate::token_select::keep_count;
use crate::transformer::{ExitPolicy, InferOptions, Model, ModelSpec};
use crate::early_exit::HaltingRule;

/// Work charged to one layer: multiply-accumulates from matrix products and
/// element-ops from element-wise work such as softmax or normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerCost {
    pub macs: u64,
    pub elem_ops: u64,
}

impl Add for LayerCost {
    type Output = LayerCost;
    fn add(self, o: LayerCost) -> LayerCost {
        LayerCost {
            macs: self.macs + o.macs,
            elem_ops: self.elem_ops + o.elem_ops,
        }
    }
}

impl AddAssign for LayerCost {
    fn add_assign(&mut self, o: LayerCost) {
        *self = *self + o;
    }
}

/// What one block did during an inference pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTrace {
    /// False once the network has exited earlier.
    pub reached: bool,
    pub tokens_in: usize,
    /// Tokens that went through the block after selection.
    pub tokens_kept: usize,
    pub select_evaluated: bool,
    pub skip_evaluated: bool,
    /// False when the skip gate bypassed the block.
    pub evaluated: bool,
    /// Tokens per expert for sparse MoE blocks.
    pub expert_loads: Vec<usize>,
    pub exit_evaluated: bool,
    pub gate_evaluated: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub n_tokens: usize,
    pub blocks: Vec<BlockTrace>,
    pub final_head: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub layers: BTreeMap<String, LayerCost>,
    pub total: LayerCost,
}

impl FlopReport {
    fn charge(&mut self, layer: impl Into<String>, macs: usize, elem_ops: usize) {
        let c = LayerCost {
            macs: macs as u64,
            elem_ops: elem_ops as u64,
        };
        if c != LayerCost::default() {
            *self.layers.entry(layer.into()).or_default() += c;
            self.total += c;
        }
    }

    pub fn from_layers(layers: BTreeMap<String, LayerCost>) -> Self {
        let total = layers.values().fold(LayerCost::default(), |a, b| a + *b);
        Self { layers, total }
    }

    /// Every layer of `self` costs no more than the same layer of `other`.
    pub fn bounded_by(&self, other: &FlopReport) -> bool {
        self.layers.iter().all(|(k, c)| {
            other
                .layers
                .get(k)
                .is_some_and(|o| c.macs <= o.macs && c.elem_ops <= o.elem_ops)
        })
    }
}

/// Decision trace of the dense path: every block, every token, every expert
/// on every token and every exit head.
pub fn full_trace(spec: &ModelSpec, n_tokens: usize) -> DecisionTrace {
    DecisionTrace {
        n_tokens,
        blocks: spec
            .blocks
            .iter()
            .map(|b| BlockTrace {
                reached: true,
                tokens_in: n_tokens,
                tokens_kept: n_tokens,
                select_evaluated: b.keep_ratio.is_some(),
                skip_evaluated: b.skip,
                evaluated: true,
                expert_loads: match &b.moe {
                    Some(m) if m.variant == MoeVariant::Sparse => vec![n_tokens; m.n_experts],
                    _ => Vec::new(),
                },
                exit_evaluated: b.exit_head,
                gate_evaluated: b.exit_head,
            })
            .collect(),
        final_head: true,
    }
}

/// Dense-path cost assuming no conditional savings.
pub fn static_cost(spec: &ModelSpec, n_tokens: usize) -> Result<FlopReport> {
    spec.validate()?;
    cost_of(spec, &full_trace(spec, n_tokens))
}

/// Cost of exactly the work recorded in `trace`.
pub fn dynamic_cost(spec: &ModelSpec, trace: &DecisionTrace) -> Result<FlopReport> {
    spec.validate()?;
    check_trace(spec, trace)?;
    cost_of(spec, trace)
}

fn inconsistent(msg: String) -> Error {
    Error::InconsistentTrace(msg)
}

fn check_trace(spec: &ModelSpec, trace: &DecisionTrace) -> Result<()> {
    if trace.blocks.len() != spec.depth() {
        return Err(inconsistent(format!(
            "{} block records for {} blocks",
            trace.blocks.len(),
            spec.depth()
        )));
    }
    if trace.n_tokens == 0 {
        return Err(inconsistent("no input tokens".into()));
    }
    if spec.max_tokens.is_some_and(|m| trace.n_tokens > m) {
        return Err(inconsistent("more tokens than positional slots".into()));
    }
    let mut tokens = trace.n_tokens;
    let mut halted = false;
    for (i, (b, s)) in trace.blocks.iter().zip(&spec.blocks).enumerate() {
        let bad = |what: &str| Err(inconsistent(format!("block {i}: {what}")));
        if !b.reached {
            halted = true;
            if b != &BlockTrace::default() {
                return bad("unreached block records work");
            }
            continue;
        }
        if halted {
            return bad("reached after the network exited");
        }
        if b.tokens_in != tokens {
            return bad("token count does not follow the previous block");
        }
        if b.tokens_kept == 0 || b.tokens_kept > b.tokens_in {
            return bad("kept token count out of range");
        }
        if b.select_evaluated {
            match s.keep_ratio {
                Some(r) if keep_count(r, b.tokens_in) == b.tokens_kept => {}
                Some(_) => return bad("kept count differs from the keep ratio"),
                None => return bad("selection without a score head"),
            }
        }
        if b.skip_evaluated != s.skip || (!s.skip && !b.evaluated) {
            return bad("skip record does not match the block");
        }
        let sparse = s.moe.as_ref().filter(|m| m.variant == MoeVariant::Sparse);
        match (sparse, b.evaluated) {
            (Some(m), true) => {
                if b.expert_loads.len() != m.n_experts {
                    return bad("expert load count differs from the expert count");
                }
                let n = b.tokens_kept;
                if b.expert_loads.iter().any(|&l| l > n) {
                    return bad("expert load exceeds the token count");
                }
                let total: usize = b.expert_loads.iter().sum();
                let expected = match m.strategy {
                    RoutingStrategy::ExpertChoice => m.k * m.n_experts,
                    _ => m.k * n,
                };
                if total != expected {
                    return bad("expert loads do not match the router");
                }
            }
            _ if !b.expert_loads.is_empty() => return bad("expert loads without sparse routing"),
            _ => {}
        }
        if (b.exit_evaluated || b.gate_evaluated) && !s.exit_head {
            return bad("exit evaluated without an exit head");
        }
        tokens = b.tokens_kept;
    }
    if halted == trace.final_head {
        return Err(inconsistent(
            "the final head must run exactly when no exit was taken".into(),
        ));
    }
    Ok(())
}

fn cost_of(spec: &ModelSpec, trace: &DecisionTrace) -> Result<FlopReport> {
    let (d, f, c, h) = (spec.d_model, spec.d_ff, spec.n_classes, spec.heads);
    let mut r = FlopReport::default();
    r.charge("stem", trace.n_tokens * spec.d_input * d, 0);
    for (i, (b, s)) in trace.blocks.iter().zip(&spec.blocks).enumerate() {
        if !b.reached {
            continue;
        }
        if b.select_evaluated {
            r.charge(format!("block{i}.select"), b.tokens_in * d, 0);
        }
        if b.skip_evaluated {
            r.charge(format!("block{i}.skip"), d, 0);
        }
        if b.evaluated {
            let n = b.tokens_kept;
            r.charge(format!("block{i}.attn"), 4 * n * d * d + 2 * n * n * d, n * d + h * n * n);
            r.charge(format!("block{i}.ffn"), 0, n * d);
            match &s.moe {
                None => r.charge(format!("block{i}.ffn"), 2 * n * d * f, n * f),
                Some(m) => {
                    let e = m.n_experts;
                    let p = format!("block{i}.moe");
                    match m.variant {
                        MoeVariant::Sparse => {
                            let (aff, gates) = match m.strategy {
                                RoutingStrategy::Random => (0, 0),
                                _ => (n * d * e, 2 * n * e),
                            };
                            r.charge(format!("{p}.router"), aff, gates);
                            for (x, &load) in b.expert_loads.iter().enumerate() {
                                r.charge(format!("{p}.expert{x}"), 2 * load * d * f, load * f);
                            }
                        }
                        MoeVariant::SoftDispatch => {
                            r.charge(format!("{p}.router"), n * d * e + e * n * d, e * n);
                            for x in 0..e {
                                r.charge(format!("{p}.expert{x}"), 2 * d * f, f);
                            }
                            r.charge(format!("{p}.combine"), n * e * d, n * e);
                        }
                        MoeVariant::SoftWeights => {
                            r.charge(format!("{p}.router"), d * e, e);
                            r.charge(format!("{p}.merge"), e * (2 * d * f + f + d), 0);
                            r.charge(format!("{p}.expert"), 2 * n * d * f, n * f);
                        }
                    }
                }
            }
        }
        if b.gate_evaluated {
            r.charge(format!("block{i}.gate"), d, 1);
        }
        if b.exit_evaluated {
            r.charge(format!("block{i}.exit"), d * c, c);
        }
    }
    if trace.final_head {
        r.charge("head", d * c, c);
    }
    Ok(r)
}

/// Knob varied by [`tradeoff_sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Knob {
    /// Max-probability exit threshold.
    EeThreshold,
    /// Experts per token of every MoE router.
    K,
    /// Keep ratio of every token selection point.
    KeepRatio,
}

impl Knob {
    pub fn id(self) -> &'static str {
        match self {
            Knob::EeThreshold => "ee-threshold",
            Knob::K => "k",
            Knob::KeepRatio => "keep-ratio",
        }
    }
}

impl std::str::FromStr for Knob {
    type Err = Error;
    fn from_str(s: &str) -> Result<Knob> {
        match s {
            "ee-threshold" => Ok(Knob::EeThreshold),
            "k" => Ok(Knob::K),
            "keep-ratio" => Ok(Knob::KeepRatio),
            _ => Err(invalid(format!("unknown knob `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub knob: String,
    pub value: f64,
    pub mean_macs: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub const CURVE_HEADER: &str = "knob,value,mean_macs,accuracy,n_samples,seed";

pub fn write_curve_csv(rows: &[CurveRow], w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.knob, r.value, r.mean_macs, r.accuracy, r.n_samples, r.seed
        )?;
    }
    Ok(())
}

/// Evaluates `model` on `samples` at each knob value. Samples run in
/// parallel; sample `j` draws from a generator seeded with `seed + j`, so rows
/// do not depend on scheduling.
pub fn tradeoff_sweep(
    model: &Model,
    samples: &[(Tensor, usize)],
    knob: Knob,
    values: &[f64],
    base_policy: ExitPolicy,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    if samples.is_empty() {
        return Err(invalid("sweep needs at least one sample"));
    }
    values
        .iter()
        .map(|&v| {
            let mut m = model.clone();
            let mut policy = base_policy;
            match knob {
                Knob::EeThreshold => {
                    policy = ExitPolicy::Threshold {
                        rule: HaltingRule::MaxProb,
                        threshold: v,
                    }
                }
                Knob::K => {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(invalid(format!("k must be a positive integer, got {v}")));
                    }
                    m.set_moe_k(v as usize)?
                }
                Knob::KeepRatio => m.set_keep_ratio(v)?,
            }
            let opts = InferOptions { policy, keep: None };
            let results = samples
                .par_iter()
                .enumerate()
                .map(|(j, (x, y))| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(j as u64));
                    let r = m.infer(x, &opts, &mut rng)?;
                    Ok((r.macs, r.prediction == *y))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = results.len();
            let macs: u64 = results.iter().map(|r| r.0).sum();
            let correct = results.iter().filter(|r| r.1).count();
            Ok(CurveRow {
                knob: knob.id().to_string(),
                value: v,
                mean_macs: macs as f64 / n as f64,
                accuracy: correct as f64 / n as f64,
                n_samples: n,
                seed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{BlockSpec, MoeSpec};

    #[test]
    fn linear_convention() {
        // stem only: one token, d_input 4, d_model 3
        let spec = ModelSpec::plain(4, 3, 1, 2, 2, 1);
        let r = static_cost(&spec, 1).unwrap();
        assert_eq!(r.layers["stem"].macs, 12);
    }

    #[test]
    fn token_scaling() {
        let spec = ModelSpec::plain(4, 8, 2, 16, 2, 1);
        let one = static_cost(&spec, 3).unwrap();
        let two = static_cost(&spec, 6).unwrap();
        assert_eq!(two.layers["block0.ffn"].macs, 2 * one.layers["block0.ffn"].macs);
        // the quadratic score term: 2 n^2 d
        let quad = |r: &FlopReport, n: u64| r.layers["block0.attn"].macs - 4 * n * 64;
        assert_eq!(quad(&two, 6), 4 * quad(&one, 3));
    }

    #[test]
    fn moe_proportionality() {
        let mut spec = ModelSpec::plain(4, 8, 2, 16, 2, 1);
        spec.blocks[0].moe = Some(MoeSpec {
            n_experts: 4,
            k: 1,
            strategy: RoutingStrategy::TokenChoice,
            variant: MoeVariant::Sparse,
            temperature: 1.0,
            mode: Default::default(),
            balance_weight: 0.0,
        });
        let dense = static_cost(&spec, 8).unwrap();
        let mut t = full_trace(&spec, 8);
        t.blocks[0].expert_loads = vec![2, 2, 2, 2];
        let dyn_ = dynamic_cost(&spec, &t).unwrap();
        let experts = |r: &FlopReport| {
            r.layers
                .iter()
                .filter(|(k, _)| k.contains("expert"))
                .map(|(_, c)| c.macs)
                .sum::<u64>()
        };
        assert_eq!(4 * experts(&dyn_), experts(&dense));
        assert!(dyn_.bounded_by(&dense));
        t.blocks[0].expert_loads = vec![3, 2, 2, 2];
        assert!(dynamic_cost(&spec, &t).is_err());
    }

    #[test]
    fn no_savings_is_static() {
        let mut spec = ModelSpec::plain(4, 8, 2, 16, 3, 3);
        spec.blocks[0] = BlockSpec {
            exit_head: true,
            ..Default::default()
        };
        let t = full_trace(&spec, 5);
        assert_eq!(dynamic_cost(&spec, &t).unwrap(), static_cost(&spec, 5).unwrap());
    }

    #[test]
    fn csv_format() {
        let rows = [CurveRow {
            knob: "k".into(),
            value: 2.0,
            mean_macs: 1500.5,
            accuracy: 0.75,
            n_samples: 4,
            seed: 7,
        }];
        let mut buf = Vec::new();
        write_curve_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "knob,value,mean_macs,accuracy,n_samples,seed\nk,2,1500.5,0.75,4,7\n"
        );
    }
}
