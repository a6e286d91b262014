//! Synthetic tasks. Each generator returns the model inputs with their labels
//! and, separately, the latent facts used only for evaluation.

use condcomp::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum TaskParams {
    /// Two classes of Gaussian token sets around `±margin · u`, with one
    /// margin per difficulty tier (easy, medium, hard).
    DifficultyTiers {
        tokens: usize,
        dim: usize,
        margins: [f64; 3],
        noise: f64,
    },
    /// Tokens scattered around one of `clusters` centers; the binary label
    /// is the side of a cluster-specific hyperplane.
    ClusterExperts {
        clusters: usize,
        tokens: usize,
        dim: usize,
        separation: f64,
        spread: f64,
    },
    /// `informative` tokens at random positions carry a salience offset and
    /// the label signal; the rest are standard normal distractors.
    NeedleTokens {
        tokens: usize,
        informative: usize,
        dim: usize,
        salience: f64,
        signal: f64,
        noise_var: f64,
    },
}

impl TaskParams {
    pub fn id(&self) -> &'static str {
        match self {
            TaskParams::DifficultyTiers { .. } => "difficulty-tiers",
            TaskParams::ClusterExperts { .. } => "cluster-experts",
            TaskParams::NeedleTokens { .. } => "needle-tokens",
        }
    }

    pub fn tokens(&self) -> usize {
        match *self {
            TaskParams::DifficultyTiers { tokens, .. }
            | TaskParams::ClusterExperts { tokens, .. }
            | TaskParams::NeedleTokens { tokens, .. } => tokens,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            TaskParams::DifficultyTiers { dim, .. }
            | TaskParams::ClusterExperts { dim, .. }
            | TaskParams::NeedleTokens { dim, .. } => dim,
        }
    }

    pub fn classes(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Invalid(format!("dataset {}: {m}", self.id())));
        if self.tokens() == 0 {
            return bad("tokens must be at least 1");
        }
        match *self {
            TaskParams::DifficultyTiers { dim, margins, noise, .. } => {
                if dim == 0 || margins.iter().any(|m| !m.is_finite()) || !(noise >= 0.0) {
                    return bad("needs dim >= 1, finite margins and noise >= 0");
                }
            }
            TaskParams::ClusterExperts { clusters, dim, separation, spread, .. } => {
                if clusters == 0 || dim < 2 || !(separation >= 0.0) || !(spread > 0.0) {
                    return bad("needs clusters >= 1, dim >= 2, separation >= 0 and spread > 0");
                }
            }
            TaskParams::NeedleTokens { tokens, informative, dim, noise_var, .. } => {
                if informative == 0 || informative > tokens || dim < 2 || !(noise_var >= 0.0) {
                    return bad("needs 1 <= informative <= tokens, dim >= 2 and noise_var >= 0");
                }
            }
        }
        Ok(())
    }
}

/// Latent fact about one sample, never shown to the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Latent {
    Tier(usize),
    Cluster(usize),
    Informative(Vec<usize>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    /// One `tokens x dim` tensor per sample.
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pairs(&self) -> Vec<(Tensor, usize)> {
        self.inputs.iter().cloned().zip(self.labels.iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn id(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Generator on stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v = gaussian(rng, dim);
    let n = dot(&v, &v).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two orthonormal directions.
fn orthonormal_pair(rng: &mut impl Rng, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let a = unit(rng, dim);
    loop {
        let b = gaussian(rng, dim);
        let p = dot(&a, &b);
        let r: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - p * y).collect();
        let n = dot(&r, &r).sqrt();
        if n > 1e-6 {
            return (a, r.iter().map(|x| x / n).collect());
        }
    }
}

/// Generates `n` samples of `split`. The task structure, such as class directions
/// or cluster centers, depends only on `seed`, so all splits share it.
pub fn generate(task: &TaskParams, n: usize, seed: u64, split: Split) -> Result<(Samples, Vec<Latent>)> {
    task.validate()?;
    let mut structure = stream_rng(seed, 0);
    let mut rng = stream_rng(seed, split.stream());
    let mut rows: Vec<(Tensor, usize, Latent)> = Vec::with_capacity(n);
    match *task {
        TaskParams::DifficultyTiers { tokens, dim, margins, noise } => {
            let u = unit(&mut structure, dim);
            for i in 0..n {
                let label = i % 2;
                let tier = (i / 2) % 3;
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let data = (0..tokens)
                    .flat_map(|_| {
                        let z = gaussian(&mut rng, dim);
                        u.iter().zip(z).map(|(u, z)| sign * margins[tier] * u + noise * z).collect::<Vec<_>>()
                    })
                    .collect();
                rows.push((Tensor::new(vec![tokens, dim], data)?, label, Latent::Tier(tier)));
            }
        }
        TaskParams::ClusterExperts { clusters, tokens, dim, separation, spread } => {
            let centers: Vec<Vec<f64>> = (0..clusters)
                .map(|_| unit(&mut structure, dim).iter().map(|v| v * separation).collect())
                .collect();
            let planes: Vec<Vec<f64>> = (0..clusters).map(|_| unit(&mut structure, dim)).collect();
            for i in 0..n {
                let c = i % clusters;
                let label = (i / clusters) % 2;
                let mut zs: Vec<Vec<f64>> = (0..tokens)
                    .map(|_| gaussian(&mut rng, dim).iter().map(|v| v * spread).collect())
                    .collect();
                let w = &planes[c];
                let side: f64 = zs.iter().map(|z| dot(w, z)).sum();
                if (side > 0.0) != (label == 1) {
                    // reflect across the hyperplane; the noise law is symmetric
                    for z in &mut zs {
                        let p = dot(w, z);
                        z.iter_mut().zip(w).for_each(|(v, w)| *v -= 2.0 * p * w);
                    }
                }
                let data = zs
                    .iter()
                    .flat_map(|z| centers[c].iter().zip(z).map(|(m, z)| m + z).collect::<Vec<_>>())
                    .collect();
                rows.push((Tensor::new(vec![tokens, dim], data)?, label, Latent::Cluster(c)));
            }
        }
        TaskParams::NeedleTokens { tokens, informative, dim, salience, signal, noise_var } => {
            let (s, u) = orthonormal_pair(&mut structure, dim);
            let sd = noise_var.sqrt();
            for i in 0..n {
                let label = i % 2;
                let sign = if label == 1 { 1.0 } else { -1.0 };
                let mut positions: Vec<usize> =
                    rand::seq::index::sample(&mut rng, tokens, informative).into_vec();
                positions.sort_unstable();
                let mut data = Vec::with_capacity(tokens * dim);
                for t in 0..tokens {
                    let z = gaussian(&mut rng, dim);
                    if positions.contains(&t) {
                        data.extend((0..dim).map(|k| salience * s[k] + sign * signal * u[k] + sd * z[k]));
                    } else {
                        data.extend(z);
                    }
                }
                rows.push((Tensor::new(vec![tokens, dim], data)?, label, Latent::Informative(positions)));
            }
        }
    }
    rows.shuffle(&mut rng);
    let mut samples = Samples::default();
    let mut latent = Vec::with_capacity(n);
    for (x, y, l) in rows {
        samples.inputs.push(x);
        samples.labels.push(y);
        latent.push(l);
    }
    Ok((samples, latent))
}
