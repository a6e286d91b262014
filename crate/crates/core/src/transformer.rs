//! A small pre-normalization transformer classifier whose blocks can carry
//! conditional mechanisms: a MoE feed-forward, a depth-skip gate, a token
//! selection point and an exit head.
//!
//! Two execution paths share one set of parameters. The training path keeps
//! every token in place and marks dropped tokens dead, so later layers mask
//! them out. The inference path removes dropped tokens,
//! skips gated-off blocks and halts at an exit, so the tape only records work
//! that was actually done.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::cost::{BlockTrace, DecisionTrace, LayerCost};
use crate::early_exit::{confidence, HaltingRule};
use crate::error::{invalid, Error, Result};
use crate::gumbel::{ste_bernoulli, top_k};
use crate::moe::{depth_skip, MoeLayer, MoeVariant, SkipGate};
use crate::nn::{pool_rows, LayerNorm, Linear, Mlp};
use crate::params::{Bound, ParamId, ParameterSet};
use crate::routing::{RouterConfig, Routing, RoutingAssignment, RoutingMode, RoutingStrategy};
use crate::tensor::Tensor;
use crate::token_select::{keep_count, ste_keep_gate, AliveTrace, ScoreHead};

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeSpec {
    pub n_experts: usize,
    pub k: usize,
    pub strategy: RoutingStrategy,
    #[serde(default)]
    pub variant: MoeVariant,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub mode: RoutingMode,
    #[serde(default)]
    pub balance_weight: f64,
}

impl MoeSpec {
    pub fn router(&self) -> RouterConfig {
        RouterConfig {
            n_experts: self.n_experts,
            k: self.k,
            strategy: self.strategy,
            balance_weight: self.balance_weight,
            temperature: self.temperature,
            mode: self.mode,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    #[serde(default)]
    pub moe: Option<MoeSpec>,
    #[serde(default)]
    pub skip: bool,
    /// Fraction of alive tokens kept by a score head before the block.
    #[serde(default)]
    pub keep_ratio: Option<f64>,
    #[serde(default)]
    pub exit_head: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_input: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_classes: usize,
    /// Enables learned positional embeddings for up to this many tokens.
    #[serde(default)]
    pub max_tokens: Option<usize>,
    pub blocks: Vec<BlockSpec>,
}

impl ModelSpec {
    /// `depth` plain blocks.
    pub fn plain(d_input: usize, d_model: usize, heads: usize, d_ff: usize, n_classes: usize, depth: usize) -> Self {
        Self {
            d_input,
            d_model,
            heads,
            d_ff,
            n_classes,
            max_tokens: None,
            blocks: vec![BlockSpec::default(); depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Number of early exits (the final head not included).
    pub fn n_exits(&self) -> usize {
        self.blocks.iter().filter(|b| b.exit_head).count()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(invalid("model needs at least one block"));
        }
        if [self.d_input, self.d_model, self.heads, self.d_ff].contains(&0) {
            return Err(invalid("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "model dimension {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.n_classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        if self.max_tokens == Some(0) {
            return Err(invalid("max_tokens must be positive"));
        }
        if self.blocks.last().is_some_and(|b| b.exit_head) {
            return Err(invalid("the last block cannot carry an exit head; the final head is the last exit"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(r) = b.keep_ratio {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(invalid(format!("block {i}: keep ratio {r} outside (0, 1]")));
                }
            }
            if let Some(m) = &b.moe {
                m.router()
                    .validate(None)
                    .map_err(|e| invalid(format!("block {i}: {e}")))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Attention {
    /// Per-head `[query, key, value]` projections.
    heads: Vec<[Linear; 3]>,
    out: Linear,
}

#[derive(Clone, Debug)]
enum Ffn {
    Dense(Mlp),
    Moe(MoeLayer),
}

#[derive(Clone, Debug)]
struct ExitHead {
    classifier: Linear,
    gate: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: Ffn,
    skip: Option<Linear>,
    select: Option<ScoreHead>,
    exit: Option<ExitHead>,
}

pub const EXIT_GATE_BIAS: f64 = -2.0;

/// Assembled model: its `ModelSpec` layout with the parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    stem: Linear,
    positional: Option<ParamId>,
    blocks: Vec<Block>,
    head: Linear,
}

/// Options for the masked training path.
#[derive(Clone, Copy, Debug)]
pub struct TrainOptions<'a> {
    /// Temperature of straight-through token selection and binary gates.
    pub temperature: f64,
    /// Gumbel noise in token selection and binary gates.
    pub noise: bool,
    /// Exit and skip gates as straight-through binary samples instead of
    /// logistic values.
    pub binary_gates: bool,
    /// Route greedily even when a router is configured as stochastic.
    pub greedy_routing: bool,
    /// Fixed kept token indices per block (`None` keeps every alive token).
    /// Overrides the score heads.
    pub keep: Option<&'a [Option<Vec<usize>>]>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            noise: false,
            binary_gates: false,
            greedy_routing: false,
            keep: None,
        }
    }
}

/// Nodes produced by the training path for one sample.
#[derive(Clone, Debug)]
pub struct TrainForward {
    /// Final head logits, `1 x classes`.
    pub logits: Var,
    /// Logits of each early exit in order.
    pub exit_logits: Vec<Var>,
    /// Gate value of each early exit, `1 x 1`.
    pub exit_gates: Vec<Var>,
    /// Skip gate values of skippable blocks, `1 x 1`.
    pub skip_gates: Vec<Var>,
    /// `(block, routing)` for sparse MoE blocks.
    pub routings: Vec<(usize, Routing)>,
    /// `(block, gamma)` for soft-weight MoE blocks.
    pub gammas: Vec<(usize, Var)>,
    pub alive: AliveTrace,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExitPolicy {
    /// Run the whole network.
    #[default]
    Final,
    /// Exit at the first head whose confidence reaches `threshold`.
    Threshold { rule: HaltingRule, threshold: f64 },
    /// Exit at the first head whose gate reaches one half.
    Gated,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct InferOptions<'a> {
    pub policy: ExitPolicy,
    /// Fixed kept token indices per block, as in [`TrainOptions::keep`].
    pub keep: Option<&'a [Option<Vec<usize>>]>,
}

/// Result of the inference path for one sample.
#[derive(Clone, Debug)]
pub struct Inference {
    /// Logits at the exit taken.
    pub logits: Tensor,
    pub probs: Vec<f64>,
    pub prediction: usize,
    /// 1-based exit index; `n_exits + 1` is the final head.
    pub exit: usize,
    /// Max-probability or normalized-entropy confidence at the exit taken.
    pub confidence: f64,
    /// Exit gate values that were evaluated.
    pub gates: Vec<f64>,
    pub routings: Vec<(usize, RoutingAssignment)>,
    pub alive: AliveTrace,
    pub trace: DecisionTrace,
    /// Work recorded on the tape per layer.
    pub costs: BTreeMap<String, LayerCost>,
    pub macs: u64,
}

fn attn_scope(i: usize) -> String {
    format!("block{i}.attn")
}

impl Model {
    /// Builds the block stack described by `spec` with parameters drawn from
    /// `rng`.
    pub fn assemble(spec: ModelSpec, rng: &mut impl Rng) -> Result<Model> {
        spec.validate()?;
        let mut params = ParameterSet::new();
        let (d, dh) = (spec.d_model, spec.head_dim());
        let stem = Linear::new(&mut params, "stem", spec.d_input, d, true, rng)?;
        let positional = match spec.max_tokens {
            Some(m) => Some(params.add_normal("positional", &[m, d], 0.1, rng)?),
            None => None,
        };
        let mut blocks = Vec::with_capacity(spec.depth());
        for (i, b) in spec.blocks.iter().enumerate() {
            let p = format!("block{i}");
            let select = match b.keep_ratio {
                Some(_) => Some(ScoreHead::new(&mut params, &format!("{p}.select"), d, rng)?),
                None => None,
            };
            let skip = if b.skip {
                Some(Linear::new(&mut params, &format!("{p}.skip"), d, 1, true, rng)?)
            } else {
                None
            };
            let ln1 = LayerNorm::new(&mut params, &format!("{p}.ln1"), d)?;
            let heads = (0..spec.heads)
                .map(|h| {
                    let mk = |params: &mut ParameterSet, rng: &mut _, w: &str| {
                        Linear::new(params, &format!("{p}.attn.head{h}.{w}"), d, dh, false, rng)
                    };
                    Ok([mk(&mut params, rng, "q")?, mk(&mut params, rng, "k")?, mk(&mut params, rng, "v")?])
                })
                .collect::<Result<Vec<_>>>()?;
            let out = Linear::new(&mut params, &format!("{p}.attn.out"), d, d, true, rng)?;
            let ln2 = LayerNorm::new(&mut params, &format!("{p}.ln2"), d)?;
            let ffn = match &b.moe {
                None => Ffn::Dense(Mlp::new(&mut params, &format!("{p}.ffn"), d, spec.d_ff, d, rng)?),
                Some(m) => Ffn::Moe(MoeLayer::new(
                    &mut params,
                    &format!("{p}.moe"),
                    d,
                    spec.d_ff,
                    d,
                    m.router(),
                    m.variant,
                    rng,
                )?),
            };
            let exit = if b.exit_head {
                let classifier = Linear::new(&mut params, &format!("{p}.exit"), d, spec.n_classes, true, rng)?;
                let gate = Linear::new(&mut params, &format!("{p}.gate"), d, 1, true, rng)?;
                params.set(&format!("{p}.gate.bias"), Tensor::full(&[1, 1], EXIT_GATE_BIAS))?;
                Some(ExitHead { classifier, gate })
            } else {
                None
            };
            blocks.push(Block {
                ln1,
                attn: Attention { heads, out },
                ln2,
                ffn,
                skip,
                select,
                exit,
            });
        }
        let head = Linear::new(&mut params, "head", d, spec.n_classes, true, rng)?;
        Ok(Model {
            spec,
            params,
            stem,
            positional,
            blocks,
            head,
        })
    }

    /// [`Model::assemble`] with a generator seeded from `seed`.
    pub fn from_seed(spec: ModelSpec, seed: u64) -> Result<Model> {
        Self::assemble(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Replaces the parameter values by name; shapes must match.
    pub fn load_params<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<()> {
        for (name, t) in values {
            self.params.set(name, t)?;
        }
        Ok(())
    }

    /// Changes `k` of every MoE router.
    pub fn set_moe_k(&mut self, k: usize) -> Result<()> {
        for (b, spec) in self.blocks.iter_mut().zip(&mut self.spec.blocks) {
            if let (Ffn::Moe(layer), Some(m)) = (&mut b.ffn, &mut spec.moe) {
                let mut router = layer.router;
                router.k = k;
                router.validate(None)?;
                layer.router = router;
                m.k = k;
            }
        }
        Ok(())
    }

    /// Changes the keep ratio of every token selection point.
    pub fn set_keep_ratio(&mut self, ratio: f64) -> Result<()> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(invalid(format!("keep ratio {ratio} outside (0, 1]")));
        }
        for b in &mut self.spec.blocks {
            if b.keep_ratio.is_some() {
                b.keep_ratio = Some(ratio);
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.rank() != 2 || x.cols() != self.spec.d_input {
            return Err(Error::ShapeMismatch {
                op: "model",
                detail: format!("expected n x {}, got {:?}", self.spec.d_input, x.shape()),
            });
        }
        let n = x.rows();
        if let Some(m) = self.spec.max_tokens {
            if n > m {
                return Err(invalid(format!("{n} tokens exceed the {m} positional slots")));
            }
        }
        Ok(n)
    }

    fn embed(&self, tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<Var> {
        let n = self.check_input(x)?;
        tape.set_scope("stem");
        let xin = tape.constant(x.clone());
        let h = self.stem.forward(tape, bound, xin)?;
        match self.positional {
            Some(p) => {
                let rows: Vec<usize> = (0..n).collect();
                let pos = tape.gather_rows(bound.var(p), &rows)?;
                tape.add(h, pos)
            }
            None => Ok(h),
        }
    }

    /// Multi-head self-attention over `x`, with keys restricted to `alive`
    /// tokens when given. Includes the output projection, not the residual.
    pub fn attention(&self, tape: &mut Tape, bound: &Bound, block: usize, x: Var, alive: Option<&[bool]>) -> Result<Var> {
        let attn = &self.blocks[block].attn;
        let n = tape.value(x).rows();
        let mask: Option<Vec<bool>> = match alive {
            Some(a) if a.iter().any(|&v| !v) => {
                if a.iter().all(|&v| !v) {
                    return Err(invalid("attention over zero alive tokens"));
                }
                Some((0..n * n).map(|i| a[i % n]).collect())
            }
            _ => None,
        };
        let scale = (self.spec.head_dim() as f64).sqrt();
        let mut outs = Vec::with_capacity(attn.heads.len());
        for [wq, wk, wv] in &attn.heads {
            let q = wq.forward(tape, bound, x)?;
            let k = wk.forward(tape, bound, x)?;
            let v = wv.forward(tape, bound, x)?;
            let kt = tape.transpose(k)?;
            let s = tape.matmul(q, kt)?;
            let p = match &mask {
                Some(m) => tape.masked_softmax(s, 1, scale, m.clone())?,
                None => tape.softmax(s, 1, scale)?,
            };
            outs.push(tape.matmul(p, v)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        attn.out.forward(tape, bound, cat)
    }

    /// Attention and feed-forward sublayers with their residuals.
    #[allow(clippy::too_many_arguments)]
    fn block_body(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        i: usize,
        h: Var,
        alive: Option<&[bool]>,
        greedy: bool,
        rng: &mut impl Rng,
    ) -> Result<(Var, Option<Routing>, Option<Var>)> {
        let blk = &self.blocks[i];
        tape.set_scope(attn_scope(i));
        let a = blk.ln1.forward(tape, bound, h)?;
        let a = self.attention(tape, bound, i, a, alive)?;
        let h = tape.add(h, a)?;
        tape.set_scope(format!("block{i}.ffn"));
        let f = blk.ln2.forward(tape, bound, h)?;
        let (y, routing, gamma) = match &blk.ffn {
            Ffn::Dense(mlp) => (mlp.forward(tape, bound, f)?, None, None),
            Ffn::Moe(layer) => {
                let greedy_layer;
                let layer = if greedy && layer.router.mode != RoutingMode::Greedy {
                    greedy_layer = MoeLayer {
                        router: RouterConfig {
                            mode: RoutingMode::Greedy,
                            ..layer.router
                        },
                        ..layer.clone()
                    };
                    &greedy_layer
                } else {
                    layer
                };
                let n = tape.value(f).rows();
                let rows: Option<Vec<usize>> = alive
                    .filter(|a| a.iter().any(|&v| !v))
                    .map(|a| (0..n).filter(|&t| a[t]).collect());
                let input = match &rows {
                    Some(r) => tape.gather_rows(f, r)?,
                    None => f,
                };
                let out = layer.forward(tape, bound, input, rng)?;
                tape.set_scope(format!("block{i}.ffn"));
                let y = match &rows {
                    Some(r) => tape.scatter_rows(out.out, r, n)?,
                    None => out.out,
                };
                (y, out.routing, out.gamma)
            }
        };
        Ok((tape.add(h, y)?, routing, gamma))
    }

    fn binary_or_soft_gate(&self, tape: &mut Tape, logit: Var, opts: &TrainOptions, rng: &mut impl Rng) -> Result<Var> {
        if opts.binary_gates {
            ste_bernoulli(tape, logit, opts.temperature, rng, opts.noise)
        } else {
            tape.sigmoid(logit)
        }
    }

    /// Training path: all tokens stay in place and dropped ones are marked
    /// dead. Every block and every exit head is evaluated.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Tensor,
        opts: &TrainOptions,
        rng: &mut impl Rng,
    ) -> Result<TrainForward> {
        let mut h = self.embed(tape, bound, x)?;
        let n = tape.value(h).rows();
        let mut alive = vec![true; n];
        let mut out = TrainForward {
            logits: h,
            exit_logits: Vec::new(),
            exit_gates: Vec::new(),
            skip_gates: Vec::new(),
            routings: Vec::new(),
            gammas: Vec::new(),
            alive: AliveTrace::default(),
        };
        for (i, blk) in self.blocks.iter().enumerate() {
            let fixed = opts.keep.and_then(|k| k.get(i).cloned().flatten());
            if let Some(kept) = fixed {
                let mut next = vec![false; n];
                for &t in &kept {
                    if t >= n || !alive[t] {
                        return Err(invalid(format!("block {i}: token {t} is not alive")));
                    }
                    next[t] = true;
                }
                if kept.is_empty() {
                    return Err(invalid(format!("block {i}: no token kept")));
                }
                alive = next;
            } else if let (Some(head), Some(ratio)) = (&blk.select, self.spec.blocks[i].keep_ratio) {
                tape.set_scope(format!("block{i}.select"));
                let scores = head.score(tape, bound, h)?;
                let n_alive = alive.iter().filter(|&&a| a).count();
                let (gate, kept) = ste_keep_gate(
                    tape,
                    scores,
                    &alive,
                    keep_count(ratio, n_alive),
                    opts.temperature,
                    opts.noise,
                    rng,
                )?;
                h = tape.mul(h, gate)?;
                alive = (0..n).map(|t| kept.contains(&t)).collect();
            }
            out.alive.layers.push((0..n).filter(|&t| alive[t]).collect());

            let mut extras = (None, None);
            let body = |tape: &mut Tape, h: Var, extras: &mut (Option<Routing>, Option<Var>), rng: &mut _| {
                let (y, r, g) = self.block_body(tape, bound, i, h, Some(&alive), opts.greedy_routing, rng)?;
                *extras = (r, g);
                Ok(y)
            };
            h = match &blk.skip {
                Some(skip) => {
                    tape.set_scope(format!("block{i}.skip"));
                    let pooled = pool_rows(tape, h, Some(&alive))?;
                    let logit = skip.forward(tape, bound, pooled)?;
                    let gate = self.binary_or_soft_gate(tape, logit, opts, rng)?;
                    out.skip_gates.push(gate);
                    depth_skip(tape, h, SkipGate::Soft(gate), |t, v| body(t, v, &mut extras, rng))?
                }
                None => body(tape, h, &mut extras, rng)?,
            };
            if let Some(r) = extras.0 {
                out.routings.push((i, r));
            }
            if let Some(g) = extras.1 {
                out.gammas.push((i, g));
            }
            if let Some(exit) = &blk.exit {
                tape.set_scope(format!("block{i}.exit"));
                let pooled = pool_rows(tape, h, Some(&alive))?;
                out.exit_logits.push(exit.classifier.forward(tape, bound, pooled)?);
                tape.set_scope(format!("block{i}.gate"));
                let logit = exit.gate.forward(tape, bound, pooled)?;
                let g = self.binary_or_soft_gate(tape, logit, opts, rng)?;
                out.exit_gates.push(g);
            }
        }
        tape.set_scope("head");
        let pooled = pool_rows(tape, h, Some(&alive))?;
        out.logits = self.head.forward(tape, bound, pooled)?;
        Ok(out)
    }

    /// All exit logits followed by the final logits, from one training-path
    /// pass without token drops or noise.
    pub fn forward_all_exits(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let opts = TrainOptions {
            greedy_routing: true,
            ..TrainOptions::default()
        };
        let f = self.forward_train(&mut tape, &bound, x, &opts, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(f.exit_logits
            .iter()
            .chain([&f.logits])
            .map(|&v| tape.value(v).clone())
            .collect())
    }

    /// Final logits of the training path under fixed keep decisions.
    pub fn masked_forward(&self, x: &Tensor, keep: &[Option<Vec<usize>>]) -> Result<(Tensor, AliveTrace)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let opts = TrainOptions {
            greedy_routing: true,
            keep: Some(keep),
            ..TrainOptions::default()
        };
        let f = self.forward_train(&mut tape, &bound, x, &opts, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok((tape.value(f.logits).clone(), f.alive))
    }

    /// Final logits of the inference path under fixed keep decisions.
    pub fn gather_forward(&self, x: &Tensor, keep: &[Option<Vec<usize>>]) -> Result<Inference> {
        let opts = InferOptions {
            policy: ExitPolicy::Final,
            keep: Some(keep),
        };
        self.infer(x, &opts, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Inference path: dropped tokens are removed, skip gates are hard,
    /// routing is greedy and the network halts according to `opts.policy`.
    pub fn infer(&self, x: &Tensor, opts: &InferOptions, rng: &mut impl Rng) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let mut h = self.embed(&mut tape, &bound, x)?;
        let n = x.rows();
        let mut current: Vec<usize> = (0..n).collect();
        let mut trace = DecisionTrace {
            n_tokens: n,
            blocks: vec![BlockTrace::default(); self.blocks.len()],
            final_head: false,
        };
        let mut alive = AliveTrace::default();
        let mut routings = Vec::new();
        let mut gates = Vec::new();
        let mut exit_no = 0;
        let mut halted: Option<(Tensor, Vec<f64>, f64)> = None;
        let rule = match opts.policy {
            ExitPolicy::Threshold { rule, .. } => rule,
            _ => HaltingRule::MaxProb,
        };
        for (i, blk) in self.blocks.iter().enumerate() {
            let bt = &mut trace.blocks[i];
            bt.reached = true;
            bt.tokens_in = current.len();
            let fixed = opts.keep.and_then(|k| k.get(i).cloned().flatten());
            let local: Option<Vec<usize>> = if let Some(kept) = fixed {
                let mut local = Vec::with_capacity(kept.len());
                for t in &kept {
                    let pos = current
                        .iter()
                        .position(|c| c == t)
                        .ok_or_else(|| invalid(format!("block {i}: token {t} is not alive")))?;
                    local.push(pos);
                }
                if local.is_empty() {
                    return Err(invalid(format!("block {i}: no token kept")));
                }
                local.sort_unstable();
                Some(local)
            } else if let (Some(head), Some(ratio)) = (&blk.select, self.spec.blocks[i].keep_ratio) {
                tape.set_scope(format!("block{i}.select"));
                let scores = head.score(&mut tape, &bound, h)?;
                bt.select_evaluated = true;
                let mut local = top_k(tape.value(scores).data(), keep_count(ratio, current.len()), None);
                local.sort_unstable();
                Some(local)
            } else {
                None
            };
            if let Some(local) = local {
                if local.len() < current.len() {
                    h = tape.gather_rows(h, &local)?;
                    current = local.iter().map(|&p| current[p]).collect();
                }
            }
            bt.tokens_kept = current.len();
            alive.layers.push(current.clone());

            let run = match &blk.skip {
                Some(skip) => {
                    tape.set_scope(format!("block{i}.skip"));
                    bt.skip_evaluated = true;
                    let pooled = pool_rows(&mut tape, h, None)?;
                    let logit = skip.forward(&mut tape, &bound, pooled)?;
                    tape.value(logit).data()[0] >= 0.0
                }
                None => true,
            };
            let mut routing = None;
            h = depth_skip(&mut tape, h, SkipGate::Hard(run), |tape, h| {
                let (y, r, _) = self.block_body(tape, &bound, i, h, None, true, rng)?;
                routing = r;
                Ok(y)
            })?;
            bt.evaluated = run;
            if let Some(r) = routing {
                bt.expert_loads = r.assignment.loads();
                routings.push((i, r.assignment));
            }

            if let Some(exit) = &blk.exit {
                exit_no += 1;
                let pooled = pool_rows(&mut tape, h, None)?;
                let take = match opts.policy {
                    ExitPolicy::Final => false,
                    ExitPolicy::Threshold { .. } => true,
                    ExitPolicy::Gated => {
                        tape.set_scope(format!("block{i}.gate"));
                        bt.gate_evaluated = true;
                        let logit = exit.gate.forward(&mut tape, &bound, pooled)?;
                        let g = tape.sigmoid(logit)?;
                        let g = tape.value(g).data()[0];
                        gates.push(g);
                        g >= 0.5
                    }
                };
                if take {
                    tape.set_scope(format!("block{i}.exit"));
                    bt.exit_evaluated = true;
                    let logits = exit.classifier.forward(&mut tape, &bound, pooled)?;
                    let p = tape.softmax(logits, 1, 1.0)?;
                    let probs = tape.value(p).data().to_vec();
                    let conf = confidence(&probs, rule);
                    let accept = match opts.policy {
                        ExitPolicy::Threshold { threshold, .. } => conf >= threshold,
                        _ => true,
                    };
                    if accept {
                        halted = Some((tape.value(logits).clone(), probs, conf));
                        break;
                    }
                }
            }
        }
        let (logits, probs, conf) = match halted {
            Some(h) => h,
            None => {
                exit_no = self.spec.n_exits() + 1;
                trace.final_head = true;
                tape.set_scope("head");
                let pooled = pool_rows(&mut tape, h, None)?;
                let logits = self.head.forward(&mut tape, &bound, pooled)?;
                let p = tape.softmax(logits, 1, 1.0)?;
                let probs = tape.value(p).data().to_vec();
                let conf = confidence(&probs, rule);
                (tape.value(logits).clone(), probs, conf)
            }
        };
        let prediction = top_k(&probs, 1, None)[0];
        let costs = tape.take_costs();
        let macs = costs.values().map(|c| c.macs).sum();
        Ok(Inference {
            logits,
            probs,
            prediction,
            exit: exit_no,
            confidence: conf,
            gates,
            routings,
            alive,
            trace,
            costs,
            macs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn validation() {
        let ok = ModelSpec::plain(3, 8, 2, 16, 2, 2);
        assert!(ok.validate().is_ok());
        assert!(ModelSpec::plain(3, 8, 2, 16, 2, 0).validate().is_err());
        assert!(ModelSpec::plain(3, 8, 3, 16, 2, 1).validate().is_err());
        let mut last_exit = ok.clone();
        last_exit.blocks[1].exit_head = true;
        assert!(last_exit.validate().is_err());
        let mut ratio = ok;
        ratio.blocks[0].keep_ratio = Some(0.0);
        assert!(ratio.validate().is_err());
    }

    #[test]
    fn spec_round_trip() {
        let mut spec = ModelSpec::plain(3, 8, 2, 16, 2, 2);
        spec.blocks[0] = BlockSpec {
            moe: Some(MoeSpec {
                n_experts: 4,
                k: 1,
                strategy: RoutingStrategy::TokenChoice,
                variant: MoeVariant::Sparse,
                temperature: 1.0,
                mode: RoutingMode::Stochastic,
                balance_weight: 0.01,
            }),
            skip: true,
            keep_ratio: Some(0.5),
            exit_head: true,
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ModelSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let m = Model::from_seed(ModelSpec::plain(3, 4, 1, 8, 2, 1), 1).unwrap();
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape, false);
        let x = tape.constant(tokens(1, 4, 2));
        let a = m.attention(&mut tape, &b, 0, x, None).unwrap();
        let v = m.blocks[0].attn.heads[0][2].forward(&mut tape, &b, x).unwrap();
        let o = m.blocks[0].attn.out.forward(&mut tape, &b, v).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(o)) < 1e-15);
    }

    #[test]
    fn threshold_policy_extremes() {
        let mut spec = ModelSpec::plain(3, 8, 2, 16, 3, 3);
        spec.blocks[0].exit_head = true;
        spec.blocks[1].exit_head = true;
        let m = Model::from_seed(spec, 3).unwrap();
        let x = tokens(5, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = |t| InferOptions {
            policy: ExitPolicy::Threshold {
                rule: HaltingRule::MaxProb,
                threshold: t,
            },
            keep: None,
        };
        let first = m.infer(&x, &policy(0.0), &mut rng).unwrap();
        let last = m.infer(&x, &policy(1.1), &mut rng).unwrap();
        assert_eq!((first.exit, last.exit), (1, 3));
        assert!(first.macs < last.macs);
        assert!(!first.trace.blocks[1].reached);
        let all = m.forward_all_exits(&x).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all[0].max_abs_diff(&first.logits) < 1e-12);
        assert!(all[2].max_abs_diff(&last.logits) < 1e-12);
    }
}
