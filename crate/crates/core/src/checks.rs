//! Randomized self-checks shared by the test suites and the command line.
//! Gradient checks cover every tape op and trainable mechanism; sampler checks
//! cover draw frequencies and the straight-through contract.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{Op, OpKind, Tape, Var};
use crate::early_exit::{branch_mix, joint_loss, nll_of_probs, EeConfig};
use crate::error::Result;
use crate::gradcheck::{gradient_check, GradCheckReport};
use crate::gumbel::{
    gumbel_noise, pooled_conditioning_scores, sample_hard, soft_on_tape, ste_on_tape,
    top_k_indicator, ConditioningHead, GateScores, SampleMode, SamplerConfig,
};
use crate::moe::{depth_skip, MoeLayer, MoeVariant, SkipGate};
use crate::nn::Mlp;
use crate::params::{Bound, ParameterSet};
use crate::routing::{balancing_loss, route, RouterConfig, RoutingMode, RoutingStrategy};
use crate::tensor::Tensor;
use crate::transformer::{BlockSpec, Model, ModelSpec, MoeSpec, TrainOptions};

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

/// Every op kind, in catalog order.
pub const ALL_OPS: [OpKind; 24] = [
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Concat,
    OpKind::Gather,
    OpKind::RowMask,
    OpKind::Softmax,
    OpKind::LogSoftmax,
    OpKind::Relu,
    OpKind::Gelu,
    OpKind::CrossEntropy,
    OpKind::Broadcast,
    OpKind::Transpose,
    OpKind::Reshape,
    OpKind::Sigmoid,
    OpKind::Log,
    OpKind::LayerNorm,
    OpKind::ScatterRows,
    OpKind::Pick,
    OpKind::StraightThrough,
];

pub fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// `sum(c ⊙ y)`
fn weighted_sum(tape: &mut Tape, y: Var, c: &Tensor) -> Result<Var> {
    let c = tape.constant(c.clone());
    let p = tape.mul(y, c)?;
    tape.sum(p)
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

fn with_weights(rng: &mut impl Rng, out_shape: &[usize], f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static) -> CaseFn {
    let c = normal(rng, out_shape);
    Box::new(move |tape, v| {
        let y = f(tape, v)?;
        weighted_sum(tape, y, &c)
    })
}

fn dim(rng: &mut impl Rng) -> usize {
    rng.random_range(1..=4)
}

/// Lane mask over `shape` along `axis` with at least one live entry per lane.
fn lane_mask(rng: &mut impl Rng, shape: &[usize], axis: usize) -> Vec<bool> {
    let (r, c) = (shape[0], shape[1]);
    let mut m: Vec<bool> = (0..r * c).map(|_| rng.random_bool(0.7)).collect();
    if axis == 1 {
        for i in 0..r {
            let j = rng.random_range(0..c);
            m[i * c + j] = true;
        }
    } else {
        for j in 0..c {
            let i = rng.random_range(0..r);
            m[i * c + j] = true;
        }
    }
    m
}

/// Gradient check of one op on a random case.
pub fn op_case(kind: OpKind, rng: &mut impl Rng) -> Result<GradCheckReport> {
    let (m, n, k) = (dim(rng), dim(rng), dim(rng));
    let (inputs, f): (Vec<Tensor>, CaseFn) = match kind {
        OpKind::MatMul => (
            vec![normal(rng, &[m, k]), normal(rng, &[k, n])],
            with_weights(rng, &[m, n], |t, v| t.matmul(v[0], v[1])),
        ),
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let b_shape = match rng.random_range(0..3) {
                0 => [m, n],
                1 => [1, n],
                _ => [m, 1],
            };
            let op = match kind {
                OpKind::Add => Op::Add,
                OpKind::Sub => Op::Sub,
                _ => Op::Mul,
            };
            (
                vec![normal(rng, &[m, n]), normal(rng, &b_shape)],
                with_weights(rng, &[m, n], move |t, v| t.apply(op.clone(), v)),
            )
        }
        OpKind::Scale => {
            let s: f64 = rng.sample(StandardNormal);
            (vec![normal(rng, &[m, n])], with_weights(rng, &[m, n], move |t, v| t.scale(v[0], s)))
        }
        OpKind::Sum | OpKind::Mean => {
            let axis = match rng.random_range(0..3) {
                0 => None,
                a => Some(a - 1),
            };
            let out = match axis {
                None => vec![],
                Some(0) => vec![1, n],
                Some(_) => vec![m, 1],
            };
            let op = if kind == OpKind::Sum { Op::Sum { axis } } else { Op::Mean { axis } };
            let c = if out.is_empty() { Tensor::scalar(rng.sample(StandardNormal)) } else { normal(rng, &out) };
            let f: CaseFn = Box::new(move |t, v| {
                let y = t.apply(op.clone(), v)?;
                let c = t.constant(c.clone());
                let p = t.mul(y, c)?;
                t.sum(p)
            });
            (vec![normal(rng, &[m, n])], f)
        }
        OpKind::Concat => {
            let axis = rng.random_range(0..2);
            let parts = rng.random_range(1..=3);
            let shapes: Vec<[usize; 2]> = (0..parts)
                .map(|_| if axis == 0 { [dim(rng), n] } else { [m, dim(rng)] })
                .collect();
            let out = if axis == 0 {
                [shapes.iter().map(|s| s[0]).sum(), n]
            } else {
                [m, shapes.iter().map(|s| s[1]).sum()]
            };
            (
                shapes.iter().map(|s| normal(rng, s)).collect(),
                with_weights(rng, &out, move |t, v| t.concat(v, axis)),
            )
        }
        OpKind::Gather => {
            let rows: Vec<usize> = (0..dim(rng) + 1).map(|_| rng.random_range(0..m)).collect();
            let out = [rows.len(), n];
            (vec![normal(rng, &[m, n])], with_weights(rng, &out, move |t, v| t.gather_rows(v[0], &rows)))
        }
        OpKind::RowMask => {
            let keep: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
            (vec![normal(rng, &[m, n])], with_weights(rng, &[m, n], move |t, v| t.row_mask(v[0], &keep)))
        }
        OpKind::Softmax => {
            let axis = rng.random_range(0..2);
            let temperature = [0.5, 1.0, 2.0][rng.random_range(0..3)];
            let mask = rng.random_bool(0.5).then(|| lane_mask(rng, &[m, n], axis));
            (
                vec![normal(rng, &[m, n])],
                with_weights(rng, &[m, n], move |t, v| {
                    t.apply(Op::Softmax { axis, temperature, mask: mask.clone() }, v)
                }),
            )
        }
        OpKind::LogSoftmax => {
            let axis = rng.random_range(0..2);
            (vec![normal(rng, &[m, n])], with_weights(rng, &[m, n], move |t, v| t.log_softmax(v[0], axis)))
        }
        OpKind::Relu => {
            // keep clear of the kink
            let x = uniform(rng, &[m, n], 0.1, 1.0).map(|v| if v > 0.55 { v } else { -v });
            (vec![x], with_weights(rng, &[m, n], |t, v| t.relu(v[0])))
        }
        OpKind::Gelu => (vec![normal(rng, &[m, n])], with_weights(rng, &[m, n], |t, v| t.gelu(v[0]))),
        OpKind::Sigmoid => (vec![normal(rng, &[m, n])], with_weights(rng, &[m, n], |t, v| t.sigmoid(v[0]))),
        OpKind::Log => (vec![uniform(rng, &[m, n], 0.5, 2.0)], with_weights(rng, &[m, n], |t, v| t.log(v[0]))),
        OpKind::CrossEntropy => {
            let classes = rng.random_range(2..=5);
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
            (
                vec![normal(rng, &[m, classes])],
                with_weights(rng, &[], move |t, v| t.cross_entropy(v[0], &targets)),
            )
        }
        OpKind::Broadcast => {
            let src = if rng.random_bool(0.5) { [1, n] } else { [m, 1] };
            (vec![normal(rng, &src)], with_weights(rng, &[m, n], move |t, v| t.broadcast(v[0], &[m, n])))
        }
        OpKind::Transpose => (vec![normal(rng, &[m, n])], with_weights(rng, &[n, m], |t, v| t.transpose(v[0]))),
        OpKind::Reshape => {
            let to = if rng.random_bool(0.5) { [n, m] } else { [1, m * n] };
            (vec![normal(rng, &[m, n])], with_weights(rng, &to, move |t, v| t.reshape(v[0], &to)))
        }
        OpKind::LayerNorm => {
            let w = n + 1;
            (vec![normal(rng, &[m, w])], with_weights(rng, &[m, w], |t, v| t.layer_norm(v[0], 1e-5)))
        }
        OpKind::ScatterRows => {
            let total = m + 2;
            let rows: Vec<usize> = (0..m).map(|_| rng.random_range(0..total)).collect();
            (
                vec![normal(rng, &[m, n])],
                with_weights(rng, &[total, n], move |t, v| t.scatter_rows(v[0], &rows, total)),
            )
        }
        OpKind::Pick => {
            let positions: Vec<usize> = (0..dim(rng)).map(|_| rng.random_range(0..m * n)).collect();
            let out = [positions.len(), 1];
            (vec![normal(rng, &[m, n])], with_weights(rng, &out, move |t, v| t.pick(v[0], &positions)))
        }
        OpKind::StraightThrough => {
            let n = n + 1;
            let top = rng.random_range(1..=n);
            let temperature = [0.5, 1.0, 2.0][rng.random_range(0..3)];
            (
                vec![normal(rng, &[m, n])],
                with_weights(rng, &[m, n], move |t, v| {
                    Ok(t.straight_through(v[0], temperature, None, |z, _| Ok(top_k_indicator(z, top, None)))?.0)
                }),
            )
        }
    };
    gradient_check(f, &inputs, GRAD_STEP, GRAD_TOL)
}

/// Trainable mechanisms covered by end-to-end gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    SoftGumbel,
    SteGumbel,
    PooledConditioning,
    MoeSparse,
    MoeSparseSte,
    MoeExpertChoice,
    MoeSoftDispatch,
    MoeSoftWeights,
    BalancingLoss,
    DepthSkip,
    JointLoss,
    Branching,
    BranchingSte,
    TokenScoreMasked,
    ModelPlain,
    ModelMoe,
    ModelSkip,
    ModelExits,
}

impl Mechanism {
    pub const ALL: [Mechanism; 18] = [
        Mechanism::SoftGumbel,
        Mechanism::SteGumbel,
        Mechanism::PooledConditioning,
        Mechanism::MoeSparse,
        Mechanism::MoeSparseSte,
        Mechanism::MoeExpertChoice,
        Mechanism::MoeSoftDispatch,
        Mechanism::MoeSoftWeights,
        Mechanism::BalancingLoss,
        Mechanism::DepthSkip,
        Mechanism::JointLoss,
        Mechanism::Branching,
        Mechanism::BranchingSte,
        Mechanism::TokenScoreMasked,
        Mechanism::ModelPlain,
        Mechanism::ModelMoe,
        Mechanism::ModelSkip,
        Mechanism::ModelExits,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Mechanism::SoftGumbel => "soft-gumbel",
            Mechanism::SteGumbel => "ste-gumbel",
            Mechanism::PooledConditioning => "pooled-conditioning",
            Mechanism::MoeSparse => "moe-sparse",
            Mechanism::MoeSparseSte => "moe-sparse-ste",
            Mechanism::MoeExpertChoice => "moe-expert-choice",
            Mechanism::MoeSoftDispatch => "moe-soft-dispatch",
            Mechanism::MoeSoftWeights => "moe-soft-weights",
            Mechanism::BalancingLoss => "balancing-loss",
            Mechanism::DepthSkip => "depth-skip",
            Mechanism::JointLoss => "joint-loss",
            Mechanism::Branching => "branching",
            Mechanism::BranchingSte => "branching-ste",
            Mechanism::TokenScoreMasked => "token-score-masked",
            Mechanism::ModelPlain => "model-plain",
            Mechanism::ModelMoe => "model-moe",
            Mechanism::ModelSkip => "model-skip",
            Mechanism::ModelExits => "model-exits",
        }
    }
}

fn moe_case(rng: &mut impl Rng, cfg: RouterConfig, variant: MoeVariant, n_tok: usize, with_balance: bool) -> Result<GradCheckReport> {
    let mut params = ParameterSet::new();
    let layer = MoeLayer::new(&mut params, "moe", 3, 4, 3, cfg, variant, rng)?;
    let mut inputs = vec![normal(rng, &[n_tok, 3])];
    inputs.extend(params.values());
    let c = normal(rng, &[n_tok, 3]);
    let seed = rng.random::<u64>();
    let f = move |tape: &mut Tape, v: &[Var]| {
        let bound = Bound::from(&v[1..]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = layer.forward(tape, &bound, v[0], &mut rng)?;
        let mut loss = weighted_sum(tape, out.out, &c)?;
        if let (true, Some(r)) = (with_balance, &out.routing) {
            let bal = balancing_loss(tape, r.probs, &r.assignment.dispatch_fractions())?;
            loss = tape.add(loss, bal)?;
        }
        Ok(loss)
    };
    gradient_check(f, &inputs, GRAD_STEP, GRAD_TOL)
}

fn tiny_spec(n_classes: usize) -> ModelSpec {
    let mut spec = ModelSpec::plain(3, 4, 2, 6, n_classes, 2);
    spec.max_tokens = Some(4);
    spec
}

fn model_case(rng: &mut impl Rng, spec: ModelSpec, opts: TrainOptions<'static>, exits: bool) -> Result<GradCheckReport> {
    let model = Model::assemble(spec, rng)?;
    let n_tok = rng.random_range(2..=4);
    let x = normal(rng, &[n_tok, 3]);
    let target = rng.random_range(0..model.spec.n_classes);
    let seed = rng.random::<u64>();
    let inputs = model.params.values();
    let f = move |tape: &mut Tape, v: &[Var]| {
        let bound = Bound::from(v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = model.forward_train(tape, &bound, &x, &opts, &mut rng)?;
        let mut loss = if exits {
            let joint = joint_loss(tape, &out.exit_logits, out.logits, &[target], &EeConfig::default())?;
            let mut probs = Vec::with_capacity(out.exit_logits.len() + 1);
            for &y in out.exit_logits.iter().chain([&out.logits]) {
                probs.push(tape.softmax(y, 1, 1.0)?);
            }
            let mixed = branch_mix(tape, &probs, &out.exit_gates)?;
            let branch = nll_of_probs(tape, mixed, &[target])?;
            tape.add(joint, branch)?
        } else {
            tape.cross_entropy(out.logits, &[target])?
        };
        for (_, r) in &out.routings {
            let bal = balancing_loss(tape, r.probs, &r.assignment.dispatch_fractions())?;
            loss = tape.add(loss, bal)?;
        }
        Ok(loss)
    };
    gradient_check(f, &inputs, GRAD_STEP, GRAD_TOL)
}

/// Gradient check of one mechanism on a random case.
pub fn mechanism_case(mech: Mechanism, rng: &mut impl Rng) -> Result<GradCheckReport> {
    let tau = [0.1, 1.0, 10.0][rng.random_range(0..3)];
    match mech {
        Mechanism::SoftGumbel | Mechanism::SteGumbel => {
            let n = rng.random_range(2..=8);
            let k = rng.random_range(1..=n);
            let noise = gumbel_noise(n, rng);
            let p = normal(rng, &[1, n]);
            let f = with_weights(rng, &[1, n], move |t, v| {
                if mech == Mechanism::SoftGumbel {
                    soft_on_tape(t, v[0], &noise, tau)
                } else {
                    Ok(ste_on_tape(t, v[0], &noise, tau, k, None)?.0)
                }
            });
            gradient_check(f, &[p], GRAD_STEP, GRAD_TOL)
        }
        Mechanism::PooledConditioning => {
            let mut params = ParameterSet::new();
            let mlp = Mlp::new(&mut params, "head", 3, 4, 3, rng)?;
            let head = ConditioningHead::Mlp(mlp);
            let m = rng.random_range(1..=5);
            let groups = rng.random_range(1..=3);
            let mut inputs = vec![normal(rng, &[groups, 2, 3]), normal(rng, &[m, 3])];
            inputs.extend(params.values());
            let f = with_weights(rng, &[1, m], move |t, v| {
                let bound = Bound::from(&v[2..]);
                pooled_conditioning_scores(t, &bound, v[0], v[1], &head)
            });
            gradient_check(f, &inputs, GRAD_STEP, GRAD_TOL)
        }
        Mechanism::MoeSparse | Mechanism::MoeSparseSte | Mechanism::MoeExpertChoice => {
            let n_exp = rng.random_range(1..=4);
            let n_tok = rng.random_range(1..=5);
            let (strategy, k, mode) = match mech {
                Mechanism::MoeExpertChoice => (RoutingStrategy::ExpertChoice, rng.random_range(1..=n_tok), RoutingMode::Greedy),
                Mechanism::MoeSparseSte => (RoutingStrategy::TokenChoice, rng.random_range(1..=n_exp), RoutingMode::Stochastic),
                _ => (RoutingStrategy::TokenChoice, rng.random_range(1..=n_exp), RoutingMode::Greedy),
            };
            let cfg = RouterConfig {
                mode,
                temperature: [0.5, 1.0, 2.0][rng.random_range(0..3)],
                ..RouterConfig::new(n_exp, k, strategy)
            };
            moe_case(rng, cfg, MoeVariant::Sparse, n_tok, true)
        }
        Mechanism::MoeSoftDispatch | Mechanism::MoeSoftWeights => {
            let n_exp = rng.random_range(1..=4);
            let n_tok = rng.random_range(1..=5);
            let variant = if mech == Mechanism::MoeSoftDispatch { MoeVariant::SoftDispatch } else { MoeVariant::SoftWeights };
            let cfg = RouterConfig::new(n_exp, 1, RoutingStrategy::TokenChoice);
            moe_case(rng, cfg, variant, n_tok, false)
        }
        Mechanism::BalancingLoss => {
            let n_exp = rng.random_range(2..=5);
            let n_tok = rng.random_range(1..=6);
            let k = rng.random_range(1..=n_exp);
            let logits = normal(rng, &[n_tok, n_exp]);
            let f = move |t: &mut Tape, v: &[Var]| {
                let cfg = RouterConfig::new(n_exp, k, RoutingStrategy::TokenChoice);
                let r = route(t, v[0], &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
                balancing_loss(t, r.probs, &r.assignment.dispatch_fractions())
            };
            gradient_check(f, &[logits], GRAD_STEP, GRAD_TOL)
        }
        Mechanism::DepthSkip => {
            let mut params = ParameterSet::new();
            let mlp = Mlp::new(&mut params, "block", 3, 4, 3, rng)?;
            let n_tok = rng.random_range(1..=4);
            let mut inputs = vec![normal(rng, &[n_tok, 3]), normal(rng, &[1, 1])];
            inputs.extend(params.values());
            let f = with_weights(rng, &[n_tok, 3], move |t, v| {
                let bound = Bound::from(&v[2..]);
                let g = t.sigmoid(v[1])?;
                depth_skip(t, v[0], SkipGate::Soft(g), |t, x| mlp.forward(t, &bound, x))
            });
            gradient_check(f, &inputs, GRAD_STEP, GRAD_TOL)
        }
        Mechanism::JointLoss => {
            let b = rng.random_range(1..=4);
            let (rows, classes) = (rng.random_range(1..=3), rng.random_range(2..=5));
            let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
            let cfg = EeConfig {
                alpha: rng.random::<f64>() + 0.1,
                betas: (0..b - 1).map(|_| rng.random::<f64>()).collect(),
                ..EeConfig::default()
            };
            let inputs: Vec<Tensor> = (0..b).map(|_| normal(rng, &[rows, classes])).collect();
            let f = move |t: &mut Tape, v: &[Var]| {
                let (last, exits) = v.split_last().expect("at least one output");
                joint_loss(t, exits, *last, &targets, &cfg)
            };
            gradient_check(f, &inputs, GRAD_STEP, GRAD_TOL)
        }
        Mechanism::Branching | Mechanism::BranchingSte => {
            let b = rng.random_range(1..=4);
            let classes = rng.random_range(2..=4);
            let target = rng.random_range(0..classes);
            let mut inputs: Vec<Tensor> = (0..b).map(|_| normal(rng, &[1, classes])).collect();
            inputs.extend((0..b - 1).map(|_| normal(rng, &[1, 1])));
            let seed = rng.random::<u64>();
            let f = move |t: &mut Tape, v: &[Var]| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let probs = v[..b]
                    .iter()
                    .map(|&y| t.softmax(y, 1, 1.0))
                    .collect::<Result<Vec<_>>>()?;
                let gates = v[b..]
                    .iter()
                    .map(|&g| {
                        if mech == Mechanism::Branching {
                            t.sigmoid(g)
                        } else {
                            crate::gumbel::ste_bernoulli(t, g, tau.max(0.5), &mut rng, true)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mixed = branch_mix(t, &probs, &gates)?;
                nll_of_probs(t, mixed, &[target])
            };
            gradient_check(f, &inputs, GRAD_STEP, GRAD_TOL)
        }
        Mechanism::TokenScoreMasked => {
            let mut spec = tiny_spec(2);
            spec.blocks[0].keep_ratio = Some(0.5);
            spec.blocks[1].keep_ratio = Some(0.7);
            let opts = TrainOptions {
                temperature: [0.5, 1.0, 2.0][rng.random_range(0..3)],
                noise: true,
                ..TrainOptions::default()
            };
            model_case(rng, spec, opts, false)
        }
        Mechanism::ModelPlain => model_case(rng, tiny_spec(3), TrainOptions::default(), false),
        Mechanism::ModelMoe => {
            let mut spec = tiny_spec(2);
            spec.blocks[0].moe = Some(MoeSpec {
                n_experts: 3,
                k: 2,
                strategy: RoutingStrategy::TokenChoice,
                variant: MoeVariant::Sparse,
                temperature: 1.0,
                mode: RoutingMode::Stochastic,
                balance_weight: 0.1,
            });
            model_case(rng, spec, TrainOptions::default(), false)
        }
        Mechanism::ModelSkip => {
            let mut spec = tiny_spec(2);
            spec.blocks[1].skip = true;
            let opts = TrainOptions {
                binary_gates: rng.random_bool(0.5),
                noise: true,
                ..TrainOptions::default()
            };
            model_case(rng, spec, opts, false)
        }
        Mechanism::ModelExits => {
            let mut spec = tiny_spec(3);
            spec.blocks[0] = BlockSpec {
                exit_head: true,
                ..BlockSpec::default()
            };
            let opts = TrainOptions {
                binary_gates: rng.random_bool(0.5),
                noise: true,
                ..TrainOptions::default()
            };
            model_case(rng, spec, opts, true)
        }
    }
}

/// Result of a hard-sampling frequency test on one score vector.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrequencyCase {
    pub logits: Vec<f64>,
    pub expected: Vec<f64>,
    pub observed: Vec<f64>,
    pub max_deviation: f64,
}

/// Draws `draws` hard samples from `logits` and compares the selection
/// frequencies with `softmax(logits)`.
pub fn frequency_case(logits: &[f64], draws: usize, rng: &mut impl Rng) -> Result<FrequencyCase> {
    let scores = GateScores::new(logits.to_vec())?;
    let cfg = SamplerConfig::new(SampleMode::Hard, 1.0, 1);
    let mut counts = vec![0usize; logits.len()];
    for _ in 0..draws {
        counts[sample_hard(&scores, &cfg, rng)?.selected[0]] += 1;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let expected: Vec<f64> = e.iter().map(|v| v / z).collect();
    let observed: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let max_deviation = expected
        .iter()
        .zip(&observed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(FrequencyCase {
        logits: logits.to_vec(),
        expected,
        observed,
        max_deviation,
    })
}

/// Frequency tests on `vectors` random score vectors with 2 to `max_dims`
/// entries.
pub fn sampler_suite(max_dims: usize, draws: usize, vectors: usize, seed: u64) -> Result<Vec<FrequencyCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..vectors)
        .map(|i| {
            let dims = if i + 1 == vectors { max_dims } else { rng.random_range(2..=max_dims.max(2)) };
            let logits: Vec<f64> = (0..dims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            frequency_case(&logits, draws, &mut rng)
        })
        .collect()
}

/// Outcome of one straight-through contract case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SteContract {
    /// Forward indicator equals the hard sample bit for bit.
    pub forward_exact: bool,
    /// Gradient equals the soft path's gradient bit for bit.
    pub backward_exact: bool,
}

pub fn ste_contract_case(rng: &mut impl Rng) -> Result<SteContract> {
    let n = rng.random_range(2..=10);
    let k = rng.random_range(1..=n);
    let tau = [0.1, 0.5, 1.0, 5.0][rng.random_range(0..4)];
    let p: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let c = normal(rng, &[1, n]);
    let seed = rng.random::<u64>();
    let scores = GateScores::new(p.clone())?;
    let hard = sample_hard(&scores, &SamplerConfig::new(SampleMode::Hard, tau, k), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let noise = gumbel_noise(n, &mut ChaCha8Rng::seed_from_u64(seed));

    let grad = |ste: bool| -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::row(&p), true);
        let y = if ste {
            ste_on_tape(&mut tape, pv, &noise, tau, k, None)?.0
        } else {
            soft_on_tape(&mut tape, pv, &noise, tau)?
        };
        let value = tape.value(y).clone();
        let loss = weighted_sum(&mut tape, y, &c)?;
        tape.backward(loss)?;
        Ok((value, tape.grad(pv).cloned().expect("gradient")))
    };
    let (forward, g_ste) = grad(true)?;
    let (_, g_soft) = grad(false)?;
    let indicator = hard.indicator(n);
    Ok(SteContract {
        forward_exact: forward.data() == indicator.as_slice(),
        backward_exact: g_ste.data() == g_soft.data(),
    })
}

/// Random small model description mixing every conditional mechanism.
pub fn random_spec(rng: &mut impl Rng, depth: usize, allow_skip: bool) -> ModelSpec {
    let heads = rng.random_range(1..=2);
    let d_model = heads * rng.random_range(1..=3);
    let mut spec = ModelSpec::plain(
        rng.random_range(2..=4),
        d_model,
        heads,
        rng.random_range(2..=6),
        rng.random_range(2..=4),
        depth,
    );
    spec.max_tokens = rng.random_bool(0.5).then_some(8);
    for i in 0..depth {
        let n_experts = rng.random_range(1..=4);
        let (strategy, k) = match rng.random_range(0..3) {
            0 => (RoutingStrategy::TokenChoice, rng.random_range(1..=n_experts)),
            // expert choice needs k within the alive count, which can drop to one
            1 => (RoutingStrategy::ExpertChoice, 1),
            _ => (RoutingStrategy::Random, rng.random_range(1..=n_experts)),
        };
        let variant = [MoeVariant::Sparse, MoeVariant::SoftDispatch, MoeVariant::SoftWeights][rng.random_range(0..3)];
        spec.blocks[i] = BlockSpec {
            moe: rng.random_bool(0.6).then_some(MoeSpec {
                n_experts,
                k,
                strategy,
                variant,
                temperature: 1.0,
                mode: RoutingMode::Greedy,
                balance_weight: 0.0,
            }),
            skip: allow_skip && rng.random_bool(0.4),
            keep_ratio: rng.random_bool(0.5).then(|| [0.25, 0.5, 0.75, 1.0][rng.random_range(0..4)]),
            exit_head: i + 1 < depth && rng.random_bool(0.6),
        };
    }
    spec
}

/// Nested random keep decisions over `n` tokens, one entry per block of
/// `spec`. Blocks with a score head always get a fixed decision.
pub fn random_keep(rng: &mut impl Rng, spec: &ModelSpec, n: usize) -> Vec<Option<Vec<usize>>> {
    let mut alive: Vec<usize> = (0..n).collect();
    spec.blocks
        .iter()
        .map(|b| {
            if b.keep_ratio.is_none() && !rng.random_bool(0.7) {
                return None;
            }
            let keep = rng.random_range(1..=alive.len());
            let mut kept: Vec<usize> = rand::seq::index::sample(rng, alive.len(), keep)
                .into_iter()
                .map(|i| alive[i])
                .collect();
            kept.sort_unstable();
            alive = kept.clone();
            Some(kept)
        })
        .collect()
}

/// Tape-measured, analytic dynamic and analytic dense cost of one random
/// inference pass.
#[derive(Clone, Debug)]
pub struct CostCase {
    pub spec: ModelSpec,
    pub measured: crate::cost::FlopReport,
    pub dynamic: crate::cost::FlopReport,
    pub dense: crate::cost::FlopReport,
}

pub fn cost_case(rng: &mut impl Rng) -> Result<CostCase> {
    use crate::cost::{dynamic_cost, static_cost, FlopReport};
    use crate::early_exit::HaltingRule;
    use crate::transformer::{ExitPolicy, InferOptions};

    let depth = rng.random_range(1..=3);
    let spec = random_spec(rng, depth, true);
    let model = Model::assemble(spec.clone(), rng)?;
    let n = rng.random_range(1..=8);
    let x = normal(rng, &[n, spec.d_input]);
    let policy = match rng.random_range(0..4) {
        0 => ExitPolicy::Final,
        1 => ExitPolicy::Threshold {
            rule: HaltingRule::MaxProb,
            threshold: rng.random::<f64>(),
        },
        2 => ExitPolicy::Threshold {
            rule: HaltingRule::Entropy,
            threshold: rng.random::<f64>(),
        },
        _ => ExitPolicy::Gated,
    };
    let keep = rng.random_bool(0.3).then(|| random_keep(rng, &spec, n));
    let inf = model.infer(
        &x,
        &InferOptions {
            policy,
            keep: keep.as_deref(),
        },
        rng,
    )?;
    Ok(CostCase {
        measured: FlopReport::from_layers(inf.costs),
        dynamic: dynamic_cost(&spec, &inf.trace)?,
        dense: static_cost(&spec, n)?,
        spec,
    })
}

/// Largest absolute difference between masked-mode and gather-mode final
/// logits of a depth-2 model under one random keep pattern.
pub fn masked_gather_case(rng: &mut impl Rng) -> Result<f64> {
    let spec = random_spec(rng, 2, false);
    let model = Model::assemble(spec.clone(), rng)?;
    let n = rng.random_range(1..=8);
    let x = normal(rng, &[n, spec.d_input]);
    let keep = random_keep(rng, &spec, n);
    let (masked, trace) = model.masked_forward(&x, &keep)?;
    let gathered = model.gather_forward(&x, &keep)?;
    if trace != gathered.alive {
        return Ok(f64::INFINITY);
    }
    Ok(masked.max_abs_diff(&gathered.logits))
}

/// Largest deviation between a top-1 sparse MoE layer and the expert each
/// token was routed to, evaluated on that token alone.
pub fn top1_moe_case(rng: &mut impl Rng) -> Result<f64> {
    let n_exp = rng.random_range(1..=4);
    let n_tok = rng.random_range(1..=6);
    let mut params = ParameterSet::new();
    let cfg = RouterConfig::new(n_exp, 1, RoutingStrategy::TokenChoice);
    let layer = MoeLayer::new(&mut params, "moe", 3, 5, 3, cfg, MoeVariant::Sparse, rng)?;
    let x = normal(rng, &[n_tok, 3]);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (out, routing) = layer.forward_sparse(&mut tape, &bound, xv, rng)?;
    let out = tape.value(out).clone();
    let mut worst = 0f64;
    for t in 0..n_tok {
        let e = routing.assignment.per_token[t][0].0;
        let row = tape.constant(Tensor::row(x.row_slice(t)));
        let direct = layer.experts[e].forward(&mut tape, &bound, row)?;
        worst = worst.max(Tensor::row(out.row_slice(t)).max_abs_diff(tape.value(direct)));
    }
    Ok(worst)
}

/// Largest deviation between a soft-weight MoE layer mixed with a one-hot
/// gate and the selected expert.
pub fn one_hot_soft_weights_case(rng: &mut impl Rng) -> Result<f64> {
    let n_exp = rng.random_range(1..=4);
    let n_tok = rng.random_range(1..=6);
    let mut params = ParameterSet::new();
    let cfg = RouterConfig::new(n_exp, 1, RoutingStrategy::TokenChoice);
    let layer = MoeLayer::new(&mut params, "moe", 3, 4, 2, cfg, MoeVariant::SoftWeights, rng)?;
    let mut one_hot = vec![0.0; n_exp];
    let e = rng.random_range(0..n_exp);
    one_hot[e] = 1.0;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(normal(rng, &[n_tok, 3]));
    let g = tape.constant(Tensor::row(&one_hot));
    let merged = layer.forward_with_gamma(&mut tape, &bound, x, g)?;
    let direct = layer.experts[e].forward(&mut tape, &bound, x)?;
    Ok(tape.value(merged).max_abs_diff(tape.value(direct)))
}
