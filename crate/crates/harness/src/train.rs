//! Training loop and evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use condcomp::early_exit::{branch_mix, joint_loss, nll_of_probs, ExitTrace, GateMode};
use condcomp::gumbel::top_k;
use condcomp::params::optimizer_step;
use condcomp::routing::{balancing_loss_pooled, Routing, RoutingAssignment};
use condcomp::token_select::{recall, AliveTrace};
use condcomp::transformer::{ExitPolicy, InferOptions, TrainOptions};
use condcomp::{Model, Tape, Var};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::data::{generate, stream_rng, Latent, Samples, Split};
use crate::error::{HarnessError, Result};
use crate::metrics::{load_cv, mean, nmi, MetricsRecord};

const INIT_STREAM: u64 = 10;
const TRAIN_STREAM: u64 = 11;
pub const EVAL_STREAM: u64 = 12;

/// The three splits of the configured task.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: (Samples, Vec<Latent>),
    pub val: (Samples, Vec<Latent>),
    pub test: (Samples, Vec<Latent>),
}

impl Data {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.dataset;
        Ok(Self {
            train: generate(&d.task, d.train, cfg.seed, Split::Train)?,
            val: generate(&d.task, d.val, cfg.seed, Split::Val)?,
            test: generate(&d.task, d.test, cfg.seed, Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &(Samples, Vec<Latent>) {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn initial_model(cfg: &ExperimentConfig) -> Result<Model> {
    Ok(Model::assemble(cfg.model.clone(), &mut stream_rng(cfg.seed, INIT_STREAM))?)
}

#[derive(Clone, Debug, Default)]
struct StepStats {
    task: f64,
    balancing: Option<f64>,
    correct: usize,
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// One optimizer step on a batch: every sample adds its own subgraph to a
/// shared tape, the balancing loss pools routing over the batch.
fn train_step(
    model: &mut Model,
    cfg: &ExperimentConfig,
    batch: &[usize],
    samples: &Samples,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true);
    let opts = TrainOptions {
        temperature: tau,
        noise: cfg.sampler.noise,
        binary_gates: cfg.sampler.binary_gates,
        greedy_routing: false,
        keep: None,
    };
    let branching = model.spec.n_exits() > 0 && cfg.early_exit.gate_mode == GateMode::DifferentiableBranching;
    let mut losses = Vec::with_capacity(batch.len());
    let mut routed: BTreeMap<usize, Vec<Routing>> = BTreeMap::new();
    let mut correct = 0;
    for &i in batch {
        let (x, y) = (&samples.inputs[i], samples.labels[i]);
        let f = model.forward_train(&mut tape, &bound, x, &opts, rng)?;
        let mut loss = if f.exit_logits.is_empty() {
            tape.cross_entropy(f.logits, &[y])?
        } else {
            joint_loss(&mut tape, &f.exit_logits, f.logits, &[y], &cfg.early_exit)?
        };
        if branching {
            let mut probs = Vec::with_capacity(f.exit_logits.len() + 1);
            for &l in f.exit_logits.iter().chain([&f.logits]) {
                probs.push(tape.softmax(l, 1, 1.0)?);
            }
            let mixed = branch_mix(&mut tape, &probs, &f.exit_gates)?;
            let nll = nll_of_probs(&mut tape, mixed, &[y])?;
            loss = tape.add(loss, nll)?;
        }
        if top_k(tape.value(f.logits).data(), 1, None)[0] == y {
            correct += 1;
        }
        losses.push(loss);
        for (b, r) in f.routings {
            routed.entry(b).or_default().push(r);
        }
    }
    let task = sum_vars(&mut tape, &losses)?;
    let task = tape.scale(task, 1.0 / batch.len() as f64)?;
    let task_value = tape.value(task).data()[0];
    let mut total = task;
    let mut bal_value = None;
    for (b, rs) in &routed {
        let refs: Vec<&Routing> = rs.iter().collect();
        let bal = balancing_loss_pooled(&mut tape, &refs)?;
        *bal_value.get_or_insert(0.0) += tape.value(bal).data()[0] / routed.len() as f64;
        let weight = model.spec.blocks[*b].moe.as_ref().map_or(0.0, |m| m.balance_weight);
        if weight > 0.0 {
            let w = tape.scale(bal, weight)?;
            total = tape.add(total, w)?;
        }
    }
    let total_value = tape.value(total).data()[0];
    if !total_value.is_finite() {
        return Err(HarnessError::Diverged(format!(
            "loss {total_value} after {} optimizer steps",
            model.params.steps()
        )));
    }
    tape.backward(total)?;
    model.params.accumulate_grads(&tape, &bound);
    optimizer_step(&mut model.params, cfg.optimizer.lr, cfg.optimizer.kind)?;
    model.params.zero_grad();
    Ok(StepStats {
        task: task_value,
        balancing: bal_value,
        correct,
    })
}

/// Outcome of evaluating a model on one split.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub record: MetricsRecord,
    pub exits: Vec<ExitTrace>,
    pub alive: Vec<AliveTrace>,
    /// `(sample, block, assignment)` for sparse MoE blocks.
    pub routings: Vec<(usize, usize, RoutingAssignment)>,
}

impl Evaluation {
    /// Writes `exits.jsonl`, `alive.jsonl` and one `routing_block{b}.jsonl`
    /// per routed block into `dir`.
    pub fn write_logs(&self, dir: &std::path::Path) -> Result<()> {
        let open = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
            let path = dir.join(name);
            Ok(std::io::BufWriter::new(std::fs::File::create(&path).map_err(HarnessError::io(&path))?))
        };
        let io = |path: &str| HarnessError::io(dir.join(path));
        let mut w = open("exits.jsonl")?;
        for e in &self.exits {
            e.write_jsonl(&mut w).map_err(io("exits.jsonl"))?;
        }
        w.flush().map_err(io("exits.jsonl"))?;
        let mut w = open("alive.jsonl")?;
        for (s, a) in self.alive.iter().enumerate() {
            a.write_jsonl(&mut w, s).map_err(io("alive.jsonl"))?;
        }
        w.flush().map_err(io("alive.jsonl"))?;
        let mut files: BTreeMap<usize, (std::io::BufWriter<std::fs::File>, usize)> = BTreeMap::new();
        for (_, b, assign) in &self.routings {
            let name = format!("routing_block{b}.jsonl");
            if !files.contains_key(b) {
                files.insert(*b, (open(&name)?, 0));
            }
            let (w, next) = files.get_mut(b).expect("opened above");
            assign.write_jsonl(w, *next).map_err(io(&name))?;
            *next += assign.n_tokens;
        }
        for (b, (mut w, _)) in files {
            w.flush().map_err(io(&format!("routing_block{b}.jsonl")))?;
        }
        Ok(())
    }
}

/// Inference-path evaluation with `policy`: accuracy, mean MACs, exit index,
/// expert load spread, routing/cluster agreement and informative-token recall.
pub fn evaluate(model: &Model, samples: &Samples, latent: &[Latent], policy: ExitPolicy, seed: u64) -> Result<Evaluation> {
    let mut rng = stream_rng(seed, EVAL_STREAM);
    let opts = InferOptions { policy, keep: None };
    let mut ev = Evaluation::default();
    let (mut correct, mut macs) = (0usize, 0u64);
    let mut exits = Vec::new();
    let mut loads: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let (mut experts, mut clusters) = (Vec::new(), Vec::new());
    let first_moe = model.spec.blocks.iter().position(|b| b.moe.is_some());
    let mut recalls = Vec::new();
    for (j, (x, &y)) in samples.inputs.iter().zip(&samples.labels).enumerate() {
        let inf = model.infer(x, &opts, &mut rng)?;
        correct += usize::from(inf.prediction == y);
        macs += inf.macs;
        if model.spec.n_exits() > 0 {
            exits.push(inf.exit as f64);
        }
        for (b, a) in &inf.routings {
            let l = loads.entry(*b).or_insert_with(|| vec![0; a.n_experts]);
            l.iter_mut().zip(a.loads()).for_each(|(t, v)| *t += v);
            if let (Some(f), Latent::Cluster(c)) = (first_moe, &latent[j]) {
                if *b == f {
                    for sel in &a.per_token {
                        let best = sel
                            .iter()
                            .max_by(|p, q| p.1.total_cmp(&q.1).then(q.0.cmp(&p.0)))
                            .expect("every token has an expert");
                        experts.push(best.0);
                        clusters.push(*c);
                    }
                }
            }
            ev.routings.push((j, *b, a.clone()));
        }
        if let Latent::Informative(pos) = &latent[j] {
            let all: Vec<usize> = (0..x.rows()).collect();
            let kept = inf.alive.layers.last().unwrap_or(&all);
            recalls.push(recall(kept, pos));
        }
        ev.exits.push(ExitTrace {
            sample: j,
            exit: inf.exit,
            confidence: inf.confidence,
            gates: inf.gates.clone(),
            macs: inf.macs,
        });
        ev.alive.push(inf.alive);
    }
    let n = samples.len().max(1) as f64;
    let cvs: Vec<f64> = loads.values().map(|l| load_cv(l)).collect();
    ev.record = MetricsRecord {
        accuracy: correct as f64 / n,
        mean_macs: Some(macs as f64 / n),
        load_cv: mean(&cvs),
        nmi: (!experts.is_empty()).then(|| nmi(&experts, &clusters)),
        mean_exit: mean(&exits),
        recall: mean(&recalls),
        ..MetricsRecord::default()
    };
    Ok(ev)
}

/// Non-finite values inside the network during training mean divergence.
fn diverged(epoch: usize) -> impl FnOnce(HarnessError) -> HarnessError {
    move |e| match e {
        HarnessError::Model(m @ condcomp::Error::NonFinite { .. }) => {
            HarnessError::Diverged(format!("{m} in epoch {epoch}"))
        }
        other => other,
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
}

fn emit(record: MetricsRecord, records: &mut Vec<MetricsRecord>, sink: &mut Option<&mut dyn Write>) -> Result<()> {
    if !record.is_finite() {
        return Err(HarnessError::Diverged(format!(
            "non-finite metrics at epoch {} ({})",
            record.epoch, record.split
        )));
    }
    if let Some(w) = sink {
        record
            .write_jsonl(w)
            .map_err(|e| HarnessError::Failed(format!("writing metrics: {e}")))?;
    }
    records.push(record);
    Ok(())
}

/// Trains from the seeded initial model. Epoch 0 is an evaluation of the
/// untrained model; each later epoch yields a train and a val record.
pub fn train(cfg: &ExperimentConfig, data: &Data, mut sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    let mut model = initial_model(cfg)?;
    let mut rng = stream_rng(cfg.seed, TRAIN_STREAM);
    let policy = cfg.policy();
    let mut records = Vec::new();
    let (train, _) = &data.train;
    let (val, val_latent) = &data.val;

    let ev = evaluate(&model, val, val_latent, policy, cfg.seed)?;
    emit(MetricsRecord { epoch: 0, split: "val".into(), ..ev.record }, &mut records, &mut sink)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let tau = cfg.sampler.tau(epoch - 1, cfg.epochs);
        order.shuffle(&mut rng);
        let (mut task, mut bal, mut correct, mut batches) = (0.0, None::<f64>, 0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let s = train_step(&mut model, cfg, batch, train, tau, &mut rng).map_err(diverged(epoch))?;
            task += s.task;
            if let Some(b) = s.balancing {
                *bal.get_or_insert(0.0) += b;
            }
            correct += s.correct;
            batches += 1;
        }
        let nb = batches as f64;
        emit(
            MetricsRecord {
                epoch,
                split: "train".into(),
                task_loss: Some(task / nb),
                balancing_loss: bal.map(|b| b / nb),
                accuracy: correct as f64 / train.len() as f64,
                ..MetricsRecord::default()
            },
            &mut records,
            &mut sink,
        )?;
        let ev = evaluate(&model, val, val_latent, policy, cfg.seed).map_err(diverged(epoch))?;
        emit(MetricsRecord { epoch, split: "val".into(), ..ev.record }, &mut records, &mut sink)?;
    }
    Ok(TrainOutcome { model, records })
}
