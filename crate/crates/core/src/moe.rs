//! Mixture-of-experts layers and the depth-skip wrapper.
//!
//! All experts in a layer are two-layer perceptrons of the same shape. The
//! sparse variant evaluates each expert only on the tokens routed to it. The
//! soft-dispatch variant evaluates each expert once on a convex mix of tokens.
//! The soft-weights variant merges expert parameters and evaluates one network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{pool_rows, Mlp};
use crate::params::{Bound, ParamId, ParameterSet};
use crate::routing::{affinity_on_tape, route, RouterConfig, Routing, RoutingStrategy};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoeVariant {
    #[default]
    Sparse,
    SoftDispatch,
    SoftWeights,
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub name: String,
    pub experts: Vec<Mlp>,
    /// `n_experts x d_in`
    pub embeddings: ParamId,
    pub router: RouterConfig,
    pub variant: MoeVariant,
}

/// Result of a MoE forward pass.
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub out: Var,
    /// Present for the sparse variant.
    pub routing: Option<Routing>,
    /// Expert mixing weights of the soft-weights variant, `1 x n_experts`.
    pub gamma: Option<Var>,
}

impl MoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        router: RouterConfig,
        variant: MoeVariant,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        router.validate(None)?;
        let experts = (0..router.n_experts)
            .map(|e| Mlp::new(params, &format!("{name}.expert{e}"), d_in, d_hidden, d_out, rng))
            .collect::<Result<Vec<_>>>()?;
        let embeddings = params.add_normal(
            format!("{name}.embeddings"),
            &[router.n_experts, d_in],
            1.0 / (d_in as f64).sqrt(),
            rng,
        )?;
        Ok(Self {
            name: name.to_string(),
            experts,
            embeddings,
            router,
            variant,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_in(&self) -> usize {
        self.experts[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.experts[0].d_out()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize> {
        let v = tape.value(x);
        if v.rank() != 2 || v.cols() != self.d_in() {
            return Err(Error::ShapeMismatch {
                op: "moe",
                detail: format!("expected n x {}, got {:?}", self.d_in(), v.shape()),
            });
        }
        Ok(v.rows())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        rng: &mut impl Rng,
    ) -> Result<MoeOutput> {
        match self.variant {
            MoeVariant::Sparse => {
                let (out, routing) = self.forward_sparse(tape, bound, x, rng)?;
                Ok(MoeOutput {
                    out,
                    routing: Some(routing),
                    gamma: None,
                })
            }
            MoeVariant::SoftDispatch => Ok(MoeOutput {
                out: self.forward_soft_dispatch(tape, bound, x)?,
                routing: None,
                gamma: None,
            }),
            MoeVariant::SoftWeights => {
                let (out, gamma) = self.forward_soft_weights(tape, bound, x)?;
                Ok(MoeOutput {
                    out,
                    routing: None,
                    gamma: Some(gamma),
                })
            }
        }
    }

    /// Routes the tokens, then combines the routed experts' outputs with the
    /// gate weights.
    pub fn forward_sparse(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        rng: &mut impl Rng,
    ) -> Result<(Var, Routing)> {
        self.check_input(tape, x)?;
        let outer = tape.scope().to_string();
        tape.set_scope(format!("{}.router", self.name));
        let aff = match self.router.strategy {
            RoutingStrategy::Random => {
                let n_tok = tape.value(x).rows();
                tape.constant(Tensor::zeros(&[n_tok, self.n_experts()]))
            }
            _ => affinity_on_tape(tape, x, bound.var(self.embeddings))?,
        };
        let routing = route(tape, aff, &self.router, rng)?;
        let out = self.combine_routed(tape, bound, x, &routing)?;
        tape.set_scope(outer);
        Ok((out, routing))
    }

    /// Evaluates each expert on its routed tokens and sums the gated results.
    pub fn combine_routed(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        routing: &Routing,
    ) -> Result<Var> {
        let n_tok = self.check_input(tape, x)?;
        let n_exp = self.n_experts();
        let outer = tape.scope().to_string();
        let mut acc: Option<Var> = None;
        for (e, tokens) in routing.assignment.per_expert.iter().enumerate() {
            if tokens.is_empty() {
                continue;
            }
            tape.set_scope(format!("{}.expert{e}", self.name));
            let rows = tape.gather_rows(x, tokens)?;
            let y = self.experts[e].forward(tape, bound, rows)?;
            let positions: Vec<usize> = tokens.iter().map(|&t| t * n_exp + e).collect();
            let w = tape.pick(routing.gates, &positions)?;
            let weighted = tape.mul(y, w)?;
            let placed = tape.scatter_rows(weighted, tokens, n_tok)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, placed)?,
                None => placed,
            });
        }
        tape.set_scope(outer);
        Ok(match acc {
            Some(a) => a,
            None => tape.constant(Tensor::zeros(&[n_tok, self.d_out()])),
        })
    }

    /// Soft token dispatch: each expert sees one convex mix of the tokens and
    /// every token receives a convex mix of the expert outputs.
    pub fn forward_soft_dispatch(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let tau = self.router.temperature;
        let outer = tape.scope().to_string();
        tape.set_scope(format!("{}.router", self.name));
        let aff = affinity_on_tape(tape, x, bound.var(self.embeddings))?;
        let aff_t = tape.transpose(aff)?;
        let dispatch = tape.softmax(aff_t, 1, tau)?;
        let mixed = tape.matmul(dispatch, x)?;
        let mut ys = Vec::with_capacity(self.n_experts());
        for (e, expert) in self.experts.iter().enumerate() {
            tape.set_scope(format!("{}.expert{e}", self.name));
            let row = tape.gather_rows(mixed, &[e])?;
            ys.push(expert.forward(tape, bound, row)?);
        }
        tape.set_scope(format!("{}.combine", self.name));
        let y = tape.concat(&ys, 0)?;
        let combine = tape.softmax(aff, 1, tau)?;
        let out = tape.matmul(combine, y)?;
        tape.set_scope(outer);
        Ok(out)
    }

    /// Mixing weights `softmax(mean(x) · embeddingsᵀ)`, as a `1 x n_experts` row.
    pub fn soft_weights_gamma(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let cond = pool_rows(tape, x, None)?;
        let aff = affinity_on_tape(tape, cond, bound.var(self.embeddings))?;
        tape.softmax(aff, 1, self.router.temperature)
    }

    pub fn forward_soft_weights(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
    ) -> Result<(Var, Var)> {
        let outer = tape.scope().to_string();
        tape.set_scope(format!("{}.router", self.name));
        let gamma = self.soft_weights_gamma(tape, bound, x)?;
        tape.set_scope(outer);
        let out = self.forward_with_gamma(tape, bound, x, gamma)?;
        Ok((out, gamma))
    }

    /// Merges the expert parameters as `Σ_e gamma_e · w_e` and runs the merged
    /// network on `x`.
    pub fn forward_with_gamma(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        gamma: Var,
    ) -> Result<Var> {
        self.check_input(tape, x)?;
        let n = self.n_experts();
        if tape.value(gamma).shape() != [1, n] {
            return Err(Error::ShapeMismatch {
                op: "moe-soft-weights",
                detail: format!("gamma {:?} for {n} experts", tape.value(gamma).shape()),
            });
        }
        let outer = tape.scope().to_string();
        tape.set_scope(format!("{}.merge", self.name));
        let ids: Vec<[ParamId; 4]> = self.experts.iter().map(Mlp::param_ids).collect();
        let mut merged = [gamma; 4];
        for (slot, m) in merged.iter_mut().enumerate() {
            let shape = tape.value(bound.var(ids[0][slot])).shape().to_vec();
            let numel: usize = shape.iter().product();
            let rows = ids
                .iter()
                .map(|p| tape.reshape(bound.var(p[slot]), &[1, numel]))
                .collect::<Result<Vec<_>>>()?;
            let stacked = tape.concat(&rows, 0)?;
            let mixed = tape.matmul(gamma, stacked)?;
            *m = tape.reshape(mixed, &shape)?;
        }
        tape.set_scope(format!("{}.expert", self.name));
        let out = Mlp::forward_with(tape, merged, x)?;
        tape.set_scope(outer);
        Ok(out)
    }
}

/// Gate value for [`depth_skip`].
#[derive(Clone, Copy, Debug)]
pub enum SkipGate {
    /// Run the block (`true`) or pass the input through unevaluated.
    Hard(bool),
    /// `1 x 1` node holding the gate value.
    Soft(Var),
}

/// `gamma · block(x) + (1 - gamma) · x`. A hard zero gate never calls `block`.
pub fn depth_skip(
    tape: &mut Tape,
    x: Var,
    gate: SkipGate,
    block: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let check = |tape: &Tape, y: Var| {
        if tape.value(y).shape() != tape.value(x).shape() {
            Err(Error::ShapeMismatch {
                op: "depth_skip",
                detail: format!(
                    "block maps {:?} to {:?}",
                    tape.value(x).shape(),
                    tape.value(y).shape()
                ),
            })
        } else {
            Ok(y)
        }
    };
    match gate {
        SkipGate::Hard(false) => Ok(x),
        SkipGate::Hard(true) => {
            let y = block(tape, x)?;
            check(tape, y)
        }
        SkipGate::Soft(g) => {
            let gv = tape.value(g);
            if gv.numel() != 1 {
                return Err(invalid("skip gate must be a single value"));
            }
            let y = block(tape, x)?;
            let y = check(tape, y)?;
            let one = tape.constant(Tensor::ones(tape.value(g).shape()));
            let rest = tape.sub(one, g)?;
            let on = tape.mul(y, g)?;
            let off = tape.mul(x, rest)?;
            tape.add(on, off)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(n: usize, k: usize, variant: MoeVariant, seed: u64) -> (ParameterSet, MoeLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let cfg = RouterConfig::new(n, k, RoutingStrategy::TokenChoice);
        let l = MoeLayer::new(&mut params, "moe", 3, 5, 3, cfg, variant, &mut rng).unwrap();
        (params, l)
    }

    fn tokens(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(vec![n, 3], data).unwrap()
    }

    #[test]
    fn top1_equals_selected_expert() {
        let (params, l) = layer(4, 1, MoeVariant::Sparse, 1);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let x = tape.constant(tokens(6, 2));
        let (out, routing) = l.forward_sparse(&mut tape, &b, x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = tape.value(out).clone();
        for (t, sel) in routing.assignment.per_token.iter().enumerate() {
            let e = sel[0].0;
            let row = tape.gather_rows(x, &[t]).unwrap();
            let y = l.experts[e].forward(&mut tape, &b, row).unwrap();
            assert_eq!(tape.value(y).data(), out.row_slice(t));
        }
    }

    #[test]
    fn identical_experts_act_as_one() {
        let (mut params, l) = layer(3, 2, MoeVariant::Sparse, 4);
        let first = l.experts[0].param_ids();
        for e in 1..3 {
            for (src, dst) in first.iter().zip(l.experts[e].param_ids()) {
                let v = params.get(*src).clone();
                *params.get_mut(dst) = v;
            }
        }
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let x = tape.constant(tokens(5, 8));
        let (out, _) = l.forward_sparse(&mut tape, &b, x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let single = l.experts[0].forward(&mut tape, &b, x).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(single)) < 1e-12);
    }

    #[test]
    fn soft_dispatch_single_token_single_expert() {
        let (params, l) = layer(1, 1, MoeVariant::SoftDispatch, 3);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let x = tape.constant(tokens(1, 5));
        let out = l.forward_soft_dispatch(&mut tape, &b, x).unwrap();
        let direct = l.experts[0].forward(&mut tape, &b, x).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(direct)) < 1e-15);
    }

    #[test]
    fn soft_dispatch_evaluates_each_expert_once() {
        let (params, l) = layer(3, 1, MoeVariant::SoftDispatch, 3);
        for n_tok in [1, 4, 9] {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, false);
            let x = tape.constant(tokens(n_tok, 5));
            l.forward_soft_dispatch(&mut tape, &b, x).unwrap();
            for e in 0..3 {
                // one row through 3 -> 5 -> 3
                assert_eq!(tape.costs()[&format!("moe.expert{e}")].macs, 30);
            }
        }
    }

    #[test]
    fn soft_weights_one_hot_gamma() {
        let (params, l) = layer(3, 1, MoeVariant::SoftWeights, 6);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let x = tape.constant(tokens(4, 1));
        let gamma = tape.constant(Tensor::row(&[0.0, 0.0, 1.0]));
        let out = l.forward_with_gamma(&mut tape, &b, x, gamma).unwrap();
        let direct = l.experts[2].forward(&mut tape, &b, x).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(direct)) < 1e-12);
    }

    #[test]
    fn depth_skip_gates() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&[1.0, 2.0]));
        let double = |t: &mut Tape, v: Var| t.scale(v, 2.0);
        let on = depth_skip(&mut tape, x, SkipGate::Hard(true), double).unwrap();
        assert_eq!(tape.value(on).data(), &[2.0, 4.0]);
        let before = tape.len();
        let off = depth_skip(&mut tape, x, SkipGate::Hard(false), |_, _| unreachable!()).unwrap();
        assert_eq!((off, tape.len()), (x, before));
        let half = tape.constant(Tensor::full(&[1, 1], 0.5));
        let mid = depth_skip(&mut tape, x, SkipGate::Soft(half), double).unwrap();
        assert_eq!(tape.value(mid).data(), &[1.5, 3.0]);
        let bad = depth_skip(&mut tape, x, SkipGate::Hard(true), |t, v| t.sum(v));
        assert!(bad.is_err());
    }
}
