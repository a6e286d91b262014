//! Differentiable subset selection with the Gumbel-Softmax trick.
//!
//! Scores `p` are perturbed with Gumbel noise `g`. Hard sampling takes the
//! top-k of `p + g`; the soft relaxation is `softmax((p + g) / tau)`; the
//! straight-through form uses the hard indicator forward and the soft
//! relaxation's gradient backward. For `k > 1` every hard selection passes
//! gradients through the same single softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_forward, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::Mlp;
use crate::params::Bound;
use crate::tensor::Tensor;

/// Uniform draws are clamped to `[U_CLAMP, 1 - U_CLAMP]` before the double log.
pub const U_CLAMP: f64 = 1e-12;

/// One finite score per candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateScores(Vec<f64>);

impl GateScores {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("gate scores need at least one candidate"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("gate scores must be finite"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_row(&self) -> Tensor {
        Tensor::row(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    Hard,
    Soft,
    StraightThrough,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub k: usize,
    pub mode: SampleMode,
    pub noise: bool,
}

impl SamplerConfig {
    pub fn new(mode: SampleMode, temperature: f64, k: usize) -> Self {
        Self {
            temperature,
            k,
            mode,
            noise: true,
        }
    }

    pub fn without_noise(mut self) -> Self {
        self.noise = false;
        self
    }

    pub fn validate(&self, candidates: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.k == 0 || self.k > candidates {
            return Err(invalid(format!(
                "k = {} outside 1..={candidates}",
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    /// Selected candidates, ascending.
    pub selected: Vec<usize>,
    /// Relaxed weights, for soft and straight-through sampling.
    pub soft: Option<Vec<f64>>,
    /// The Gumbel noise that was added (zeros when noise is off).
    pub noise: Vec<f64>,
}

impl SampleResult {
    /// 0/1 indicator with exactly `k` ones.
    pub fn indicator(&self, candidates: usize) -> Vec<f64> {
        let mut v = vec![0.0; candidates];
        for &i in &self.selected {
            v[i] = 1.0;
        }
        v
    }
}

pub fn uniform_to_gumbel(u: f64) -> f64 {
    let u = u.clamp(U_CLAMP, 1.0 - U_CLAMP);
    -(-u.ln()).ln()
}

/// Standard Gumbel samples `-log(-log(u))`.
pub fn gumbel_noise(count: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..count).map(|_| uniform_to_gumbel(rng.random::<f64>())).collect()
}

fn noise_for(count: usize, enabled: bool, rng: &mut impl Rng) -> Vec<f64> {
    if enabled {
        gumbel_noise(count, rng)
    } else {
        vec![0.0; count]
    }
}

/// Indices of the `k` largest values in descending order; ties go to the
/// lower index. Entries with a false `eligible` flag are never chosen.
pub fn top_k(values: &[f64], k: usize, eligible: Option<&[bool]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len())
        .filter(|&i| eligible.is_none_or(|e| e[i]))
        .collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-row top-k indicator along the trailing axis.
pub fn top_k_indicator(z: &Tensor, k: usize, mask: Option<&[bool]>) -> Tensor {
    let w = z.cols();
    let mut out = Tensor::zeros(z.shape());
    for (r, row) in z.data().chunks(w).enumerate() {
        let eligible = mask.map(|m| &m[r * w..(r + 1) * w]);
        for i in top_k(row, k, eligible) {
            out.data_mut()[r * w + i] = 1.0;
        }
    }
    out
}

fn selected_from(forward: &Tensor) -> Vec<usize> {
    forward
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Top-k of `p + g`; no gradient.
pub fn sample_hard(
    scores: &GateScores,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampleResult> {
    cfg.validate(scores.len())?;
    let noise = noise_for(scores.len(), cfg.noise, rng);
    let perturbed: Vec<f64> = scores.values().iter().zip(&noise).map(|(p, g)| p + g).collect();
    let mut selected = top_k(&perturbed, cfg.k, None);
    selected.sort_unstable();
    Ok(SampleResult {
        selected,
        soft: None,
        noise,
    })
}

/// `softmax((p + g) / tau)`, with the top-k of the perturbed scores reported
/// as the selection.
pub fn sample_soft(
    scores: &GateScores,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let p = tape.constant(scores.as_row());
    let (_, res) = sample_on_tape(&mut tape, p, &SamplerConfig { mode: SampleMode::Soft, ..*cfg }, rng)?;
    Ok(res)
}

/// Hard forward selection plus the soft weights whose gradient is used backward.
pub fn sample_ste(
    scores: &GateScores,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let p = tape.constant(scores.as_row());
    let (_, res) = sample_on_tape(
        &mut tape,
        p,
        &SamplerConfig {
            mode: SampleMode::StraightThrough,
            ..*cfg
        },
        rng,
    )?;
    Ok(res)
}

/// Samples from a `1 x n` score row on the tape according to `cfg.mode`.
/// The returned node is the hard indicator (constant), the soft weights, or
/// the straight-through indicator.
pub fn sample_on_tape(
    tape: &mut Tape,
    scores: Var,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<(Var, SampleResult)> {
    let n = tape.value(scores).numel();
    cfg.validate(n)?;
    let noise = noise_for(n, cfg.noise, rng);
    match cfg.mode {
        SampleMode::Hard => {
            let z: Vec<f64> = tape.value(scores).data().iter().zip(&noise).map(|(p, g)| p + g).collect();
            let mut selected = top_k(&z, cfg.k, None);
            selected.sort_unstable();
            let res = SampleResult {
                selected,
                soft: None,
                noise,
            };
            let ind = tape.constant(Tensor::new(
                tape.value(scores).shape().to_vec(),
                res.indicator(n),
            )?);
            Ok((ind, res))
        }
        SampleMode::Soft => {
            let s = soft_on_tape(tape, scores, &noise, cfg.temperature)?;
            let soft = tape.value(s).data().to_vec();
            let z: Vec<f64> = tape.value(scores).data().iter().zip(&noise).map(|(p, g)| p + g).collect();
            let mut selected = top_k(&z, cfg.k, None);
            selected.sort_unstable();
            Ok((
                s,
                SampleResult {
                    selected,
                    soft: Some(soft),
                    noise,
                },
            ))
        }
        SampleMode::StraightThrough => {
            let (v, forward, soft) = ste_on_tape(tape, scores, &noise, cfg.temperature, cfg.k, None)?;
            Ok((
                v,
                SampleResult {
                    selected: selected_from(&forward),
                    soft: Some(soft.into_data()),
                    noise,
                },
            ))
        }
    }
}

fn perturb(tape: &mut Tape, scores: Var, noise: &[f64]) -> Result<Var> {
    let shape = tape.value(scores).shape().to_vec();
    let g = tape.constant(Tensor::new(shape, noise.to_vec())?);
    tape.add(scores, g)
}

/// `softmax((scores + noise) / tau)` along the trailing axis.
pub fn soft_on_tape(tape: &mut Tape, scores: Var, noise: &[f64], tau: f64) -> Result<Var> {
    let z = perturb(tape, scores, noise)?;
    let axis = tape.value(z).rank().saturating_sub(1);
    tape.softmax(z, axis, tau)
}

/// Straight-through top-k over the trailing axis of `scores + noise`,
/// restricted to entries whose `mask` flag is set. Returns the node, its exact
/// forward indicator, and the soft weights it was chosen against.
pub fn ste_on_tape(
    tape: &mut Tape,
    scores: Var,
    noise: &[f64],
    tau: f64,
    k: usize,
    mask: Option<Vec<bool>>,
) -> Result<(Var, Tensor, Tensor)> {
    let z = perturb(tape, scores, noise)?;
    let axis = tape.value(z).rank().saturating_sub(1);
    let soft = softmax_forward(tape.value(z), axis, tau, mask.as_deref())?;
    let eligible = mask.clone();
    let (v, forward) = tape.straight_through(z, tau, mask, |zv, _| {
        Ok(top_k_indicator(zv, k, eligible.as_deref()))
    })?;
    Ok((v, forward, soft))
}

/// Straight-through Bernoulli gate from a single logit: a 2-way Gumbel-Softmax
/// over `[logit, 0]`, returning the first component as a `1 x 1` node.
pub fn ste_bernoulli(tape: &mut Tape, logit: Var, tau: f64, rng: &mut impl Rng, noise: bool) -> Result<Var> {
    let zero = tape.constant(Tensor::zeros(&[1, 1]));
    let pair = tape.concat(&[logit, zero], 1)?;
    let g = noise_for(2, noise, rng);
    let (v, _, _) = ste_on_tape(tape, pair, &g, tau, 1, None)?;
    tape.pick(v, &[0])
}

/// Scores a set of candidates from a pooled feature map: the spatial positions
/// of `x` (`h x w x d` or `n x d`) are summed, passed through the head, and
/// dotted with each candidate embedding (rows of `embeddings`).
pub fn pooled_conditioning_scores(
    tape: &mut Tape,
    bound: &Bound,
    x: Var,
    embeddings: Var,
    head: &ConditioningHead,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let d = *shape
        .last()
        .ok_or_else(|| invalid("conditioning input needs a channel axis"))?;
    let positions = tape.value(x).numel() / d;
    let flat = tape.reshape(x, &[positions, d])?;
    let pooled = tape.sum_axis(flat, 0)?;
    let v = match head {
        ConditioningHead::Identity => pooled,
        ConditioningHead::Mlp(mlp) => {
            if mlp.d_in() != d {
                return Err(Error::ShapeMismatch {
                    op: "pooled_conditioning_scores",
                    detail: format!("head expects {} channels, input has {d}", mlp.d_in()),
                });
            }
            mlp.forward(tape, bound, pooled)?
        }
    };
    let (v_dim, e_dim) = (tape.value(v).cols(), tape.value(embeddings).cols());
    if v_dim != e_dim || tape.value(embeddings).rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "pooled_conditioning_scores",
            detail: format!("head output {v_dim} vs embedding dimension {e_dim}"),
        });
    }
    let et = tape.transpose(embeddings)?;
    tape.matmul(v, et)
}

#[derive(Clone, Debug)]
pub enum ConditioningHead {
    Identity,
    Mlp(Mlp),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gumbel_fixed_point_and_clamp() {
        assert_eq!(uniform_to_gumbel(1.0 / std::f64::consts::E), 0.0);
        assert!(uniform_to_gumbel(0.0).is_finite());
        assert!(uniform_to_gumbel(1.0).is_finite());
    }

    #[test]
    fn noise_replays_under_seed() {
        assert_eq!(gumbel_noise(16, &mut rng(3)), gumbel_noise(16, &mut rng(3)));
        assert_ne!(gumbel_noise(16, &mut rng(3)), gumbel_noise(16, &mut rng(4)));
    }

    #[test]
    fn hard_selection_arithmetic() {
        // p + g = [0.6, 1.1]
        let perturbed = [0.5 + 0.1, 0.2 + 0.9];
        assert_eq!(top_k(&perturbed, 1, None), vec![1]);
        let scores = GateScores::new(vec![3.0, 1.0, 2.0]).unwrap();
        let cfg = SamplerConfig::new(SampleMode::Hard, 1.0, 2).without_noise();
        let res = sample_hard(&scores, &cfg, &mut rng(0)).unwrap();
        assert_eq!(res.selected, vec![0, 2]);
        assert_eq!(res.indicator(3), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 2.0], 2, None), vec![1, 2]);
        assert_eq!(top_k(&[0.0; 4], 3, Some(&[true, false, true, true])), vec![0, 2, 3]);
    }

    #[test]
    fn soft_examples() {
        let no_noise = |tau| SamplerConfig::new(SampleMode::Soft, tau, 1).without_noise();
        let s = sample_soft(&GateScores::new(vec![0.0, 0.0]).unwrap(), &no_noise(1.0), &mut rng(0))
            .unwrap()
            .soft
            .unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = sample_soft(&GateScores::new(vec![1.0, 0.0]).unwrap(), &no_noise(0.01), &mut rng(0))
            .unwrap()
            .soft
            .unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
        let s = sample_soft(
            &GateScores::new(vec![2f64.ln(), 0.0]).unwrap(),
            &no_noise(1.0),
            &mut rng(0),
        )
        .unwrap()
        .soft
        .unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let scores = GateScores::new(vec![0.0, 1.0]).unwrap();
        let bad_tau = SamplerConfig::new(SampleMode::Soft, 0.0, 1);
        assert!(sample_soft(&scores, &bad_tau, &mut rng(0)).is_err());
        let bad_k = SamplerConfig::new(SampleMode::Hard, 1.0, 3);
        assert!(sample_hard(&scores, &bad_k, &mut rng(0)).is_err());
        assert!(GateScores::new(vec![]).is_err());
        assert!(GateScores::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn ste_forward_matches_hard_under_shared_seed() {
        let scores = GateScores::new(vec![0.3, -1.0, 2.0, 0.1, 0.0]).unwrap();
        for seed in 0..20 {
            for k in 1..=3 {
                let hard = sample_hard(&scores, &SamplerConfig::new(SampleMode::Hard, 0.5, k), &mut rng(seed)).unwrap();
                let ste = sample_ste(
                    &scores,
                    &SamplerConfig::new(SampleMode::StraightThrough, 0.5, k),
                    &mut rng(seed),
                )
                .unwrap();
                assert_eq!(hard.selected, ste.selected);
                assert_eq!(hard.noise, ste.noise);
            }
        }
    }

    #[test]
    fn bernoulli_gate_is_binary_forward() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::full(&[1, 1], 0.4), true);
        let g = ste_bernoulli(&mut tape, l, 1.0, &mut rng(1), true).unwrap();
        let v = tape.value(g).item().unwrap();
        assert!(v == 0.0 || v == 1.0);
        tape.backward(g).unwrap();
        // d sigmoid-like soft weight / d logit is nonzero
        assert!(tape.grad(l).unwrap().data()[0].abs() > 0.0);
    }
}
