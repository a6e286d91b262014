//! Token dropping and merging as selection matrices `X' = M X`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::gumbel::{gumbel_noise, ste_on_tape, top_k};
use crate::nn::Linear;
use crate::params::{Bound, ParameterSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    Drop,
    Merge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMode {
    #[default]
    Greedy,
    Stochastic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMask {
    pub kind: MaskKind,
    /// `n_out x n_in`
    pub matrix: Tensor,
    /// Drop masks: kept token indices, ascending. Merge masks: the output slot
    /// of every input token.
    pub assignment: Vec<usize>,
    /// Merge slots that received no token.
    pub empty_slots: Vec<usize>,
}

impl SelectionMask {
    pub fn n_out(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_in(&self) -> usize {
        self.matrix.cols()
    }

    /// Merge mask with rows divided by their token counts, so each output is an
    /// average instead of a sum. Empty rows stay zero.
    pub fn row_normalized(&self) -> SelectionMask {
        let mut m = self.matrix.clone();
        let w = m.cols();
        for row in m.data_mut().chunks_mut(w) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        SelectionMask {
            matrix: m,
            ..self.clone()
        }
    }
}

/// Number of tokens kept out of `n_alive` at `ratio`, at least one.
pub fn keep_count(ratio: f64, n_alive: usize) -> usize {
    ((ratio * n_alive as f64).round() as usize).clamp(1, n_alive.max(1))
}

/// Linear map from each token to a scalar keep score.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    pub linear: Linear,
}

impl ScoreHead {
    pub fn new(params: &mut ParameterSet, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(params, name, d, 1, true, rng)?,
        })
    }

    /// `n x 1` scores.
    pub fn score(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.linear.d_in {
            return Err(Error::ShapeMismatch {
                op: "score_tokens",
                detail: format!(
                    "head expects {} features, tokens have {}",
                    self.linear.d_in,
                    tape.value(x).cols()
                ),
            });
        }
        self.linear.forward(tape, bound, x)
    }
}

fn check_keep(n_keep: usize, n: usize) -> Result<()> {
    if n_keep == 0 || n_keep > n {
        return Err(invalid(format!("cannot keep {n_keep} of {n} tokens")));
    }
    Ok(())
}

/// Keeps the `n_keep` best-scoring tokens (after Gumbel perturbation in
/// stochastic mode), in their original order.
pub fn build_drop_mask(
    scores: &[f64],
    n_keep: usize,
    mode: SelectMode,
    rng: &mut impl Rng,
) -> Result<SelectionMask> {
    let n = scores.len();
    check_keep(n_keep, n)?;
    let mut kept = match mode {
        SelectMode::Greedy => top_k(scores, n_keep, None),
        SelectMode::Stochastic => {
            let z: Vec<f64> = scores.iter().zip(gumbel_noise(n, rng)).map(|(s, g)| s + g).collect();
            top_k(&z, n_keep, None)
        }
    };
    kept.sort_unstable();
    Ok(drop_mask_from_kept(&kept, n))
}

/// Drop mask keeping the given ascending token indices.
pub fn drop_mask_from_kept(kept: &[usize], n: usize) -> SelectionMask {
    let mut m = Tensor::zeros(&[kept.len(), n]);
    for (r, &t) in kept.iter().enumerate() {
        m.set(r, t, 1.0);
    }
    SelectionMask {
        kind: MaskKind::Drop,
        matrix: m,
        assignment: kept.to_vec(),
        empty_slots: Vec::new(),
    }
}

/// Assigns each token to its highest-affinity slot (`affinity` is
/// `n_tokens x n_out`).
pub fn build_merge_mask(affinity: &Tensor, n_out: usize) -> Result<SelectionMask> {
    if affinity.rank() != 2 || affinity.cols() != n_out {
        return Err(Error::ShapeMismatch {
            op: "build_merge_mask",
            detail: format!("affinity {:?} for {n_out} slots", affinity.shape()),
        });
    }
    check_keep(n_out, affinity.rows())?;
    let assign: Vec<usize> = (0..affinity.rows())
        .map(|t| top_k(affinity.row_slice(t), 1, None)[0])
        .collect();
    merge_mask_from_assignment(&assign, n_out)
}

pub fn merge_mask_from_assignment(assign: &[usize], n_out: usize) -> Result<SelectionMask> {
    let n = assign.len();
    let mut m = Tensor::zeros(&[n_out, n]);
    for (t, &s) in assign.iter().enumerate() {
        if s >= n_out {
            return Err(invalid(format!("slot {s} out of {n_out}")));
        }
        m.set(s, t, 1.0);
    }
    let empty_slots = (0..n_out).filter(|&s| !assign.contains(&s)).collect();
    Ok(SelectionMask {
        kind: MaskKind::Merge,
        matrix: m,
        assignment: assign.to_vec(),
        empty_slots,
    })
}

pub fn apply_mask(mask: &SelectionMask, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 || x.rows() != mask.n_in() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            detail: format!("mask over {} tokens, input {:?}", mask.n_in(), x.shape()),
        });
    }
    mask.matrix.matmul(x)
}

pub fn apply_mask_on_tape(tape: &mut Tape, mask: &SelectionMask, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    if xv.rank() != 2 || xv.rows() != mask.n_in() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            detail: format!("mask over {} tokens, input {:?}", mask.n_in(), xv.shape()),
        });
    }
    let m = tape.constant(mask.matrix.clone());
    tape.matmul(m, x)
}

/// Straight-through keep gate over `n x 1` scores: the forward value is the
/// 0/1 indicator of the `n_keep` best (perturbed) alive tokens and the
/// backward pass follows the softmax over alive tokens. Returns the `n x 1`
/// gate and the kept indices.
pub fn ste_keep_gate(
    tape: &mut Tape,
    scores: Var,
    alive: &[bool],
    n_keep: usize,
    temperature: f64,
    noise: bool,
    rng: &mut impl Rng,
) -> Result<(Var, Vec<usize>)> {
    let n = tape.value(scores).rows();
    if alive.len() != n {
        return Err(invalid("alive flags do not match the token count"));
    }
    check_keep(n_keep, alive.iter().filter(|&&a| a).count())?;
    let row = tape.reshape(scores, &[1, n])?;
    let g = if noise { gumbel_noise(n, rng) } else { vec![0.0; n] };
    let (gate, forward, _) = ste_on_tape(tape, row, &g, temperature, n_keep, Some(alive.to_vec()))?;
    let kept = (0..n).filter(|&t| forward.data()[t] != 0.0).collect();
    Ok((tape.reshape(gate, &[n, 1])?, kept))
}

/// Kept original token indices after each block, per sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AliveTrace {
    pub layers: Vec<Vec<usize>>,
}

impl AliveTrace {
    /// Lines of `{"sample", "layer", "kept"}`.
    pub fn write_jsonl(&self, w: &mut impl Write, sample: usize) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            sample: usize,
            layer: usize,
            kept: &'a [usize],
        }
        for (layer, kept) in self.layers.iter().enumerate() {
            serde_json::to_writer(&mut *w, &Record { sample, layer, kept })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Each layer's set is contained in the previous one.
    pub fn is_monotone(&self) -> bool {
        self.layers
            .windows(2)
            .all(|w| w[1].iter().all(|t| w[0].contains(t)))
    }
}

/// Fraction of `informative` tokens present in `kept`; 1 when there are none.
pub fn recall(kept: &[usize], informative: &[usize]) -> f64 {
    if informative.is_empty() {
        return 1.0;
    }
    let hits = informative.iter().filter(|t| kept.contains(t)).count();
    hits as f64 / informative.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn drop_examples() {
        let m = build_drop_mask(&[0.1, 0.9, 0.5], 2, SelectMode::Greedy, &mut rng()).unwrap();
        assert_eq!(m.assignment, vec![1, 2]);
        assert_eq!(m.matrix.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let full = build_drop_mask(&[0.3, 0.2, 0.1], 3, SelectMode::Greedy, &mut rng()).unwrap();
        assert_eq!(full.matrix, Tensor::identity(3));
        let ties = build_drop_mask(&[0.0; 4], 2, SelectMode::Greedy, &mut rng()).unwrap();
        assert_eq!(ties.assignment, vec![0, 1]);
        assert!(build_drop_mask(&[0.0; 3], 0, SelectMode::Greedy, &mut rng()).is_err());
        assert!(build_drop_mask(&[0.0; 3], 4, SelectMode::Greedy, &mut rng()).is_err());
    }

    #[test]
    fn merge_examples() {
        let m = merge_mask_from_assignment(&[0, 0, 1, 1], 2).unwrap();
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(apply_mask(&m, &x).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(apply_mask(&m.row_normalized(), &x).unwrap().data(), &[1.5, 3.5]);
        let one = merge_mask_from_assignment(&[0, 0, 0, 0], 1).unwrap();
        assert_eq!(apply_mask(&one, &x).unwrap().data(), &[10.0]);
        let id = build_merge_mask(&Tensor::identity(4), 4).unwrap();
        assert_eq!(apply_mask(&id, &x).unwrap(), x);
        let gap = merge_mask_from_assignment(&[0, 2], 3).unwrap();
        assert_eq!(gap.empty_slots, vec![1]);
    }

    #[test]
    fn keep_counts() {
        assert_eq!(keep_count(0.25, 16), 4);
        assert_eq!(keep_count(0.01, 16), 1);
        assert_eq!(keep_count(1.0, 7), 7);
    }

    #[test]
    fn ste_gate_is_exact_indicator() {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::column(&[0.3, 2.0, -1.0, 1.0]), true);
        let alive = [true, true, true, false];
        let (gate, kept) = ste_keep_gate(&mut tape, s, &alive, 2, 1.0, false, &mut rng()).unwrap();
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(tape.value(gate).data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn alive_trace_jsonl() {
        let t = AliveTrace {
            layers: vec![vec![0, 2, 3], vec![2]],
        };
        assert!(t.is_monotone());
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf, 5).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"sample\":5,\"layer\":0,\"kept\":[0,2,3]}\n{\"sample\":5,\"layer\":1,\"kept\":[2]}\n"
        );
        assert_eq!(recall(&[1, 4], &[4, 9]), 0.5);
    }
}
