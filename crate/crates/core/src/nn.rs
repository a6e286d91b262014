//! Small trainable building blocks. Each holds [`ParamId`]s into a shared
//! [`ParameterSet`] and runs against a [`Bound`] copy of it on a tape.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParameterSet};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1 / d_in)`, zero bias.
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = params.add_normal(
            format!("{name}.weight"),
            &[d_in, d_out],
            1.0 / (d_in as f64).sqrt(),
            rng,
        )?;
        let bias = if bias {
            Some(params.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let b = self.bias.map(|b| bound.var(b));
        Self::forward_with(tape, bound.var(self.weight), b, x)
    }

    /// `x W + b` with explicit parameter handles.
    pub fn forward_with(tape: &mut Tape, weight: Var, bias: Option<Var>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, weight)?;
        match bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Two-layer perceptron `d_in -> d_hidden -> d_out` with a gelu in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        params: &mut ParameterSet,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(params, &format!("{name}.fc1"), d_in, d_hidden, true, rng)?,
            fc2: Linear::new(params, &format!("{name}.fc2"), d_hidden, d_out, true, rng)?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.fc1.d_in
    }

    pub fn d_hidden(&self) -> usize {
        self.fc1.d_out
    }

    pub fn d_out(&self) -> usize {
        self.fc2.d_out
    }

    /// `[w1, b1, w2, b2]`
    pub fn param_ids(&self) -> [ParamId; 4] {
        [
            self.fc1.weight,
            self.fc1.bias.expect("mlp layers carry biases"),
            self.fc2.weight,
            self.fc2.bias.expect("mlp layers carry biases"),
        ]
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let p = self.param_ids().map(|id| bound.var(id));
        Self::forward_with(tape, p, x)
    }

    /// Forward pass with parameters supplied as `[w1, b1, w2, b2]`.
    pub fn forward_with(tape: &mut Tape, p: [Var; 4], x: Var) -> Result<Var> {
        let h = Linear::forward_with(tape, p[0], Some(p[1]), x)?;
        let h = tape.gelu(h)?;
        Linear::forward_with(tape, p[2], Some(p[3]), h)
    }
}

/// Layer normalization over the trailing axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParameterSet, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: params.add(format!("{name}.gain"), Tensor::ones(&[1, dim]))?,
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let y = tape.mul(y, bound.var(self.gain))?;
        tape.add(y, bound.var(self.bias))
    }
}

/// Mean over the rows of `x` flagged alive (all rows when `alive` is `None`),
/// as a `1 x d` row. Dead rows are zeroed before summing so the result matches
/// pooling over the gathered alive rows.
pub fn pool_rows(tape: &mut Tape, x: Var, alive: Option<&[bool]>) -> Result<Var> {
    let rows = tape.value(x).rows();
    let (masked, count) = match alive {
        Some(flags) if flags.iter().any(|&a| !a) => {
            let count = flags.iter().filter(|&&a| a).count();
            if count == 0 {
                return Err(Error::InvalidArgument("cannot pool zero alive rows".into()));
            }
            (tape.row_mask(x, flags)?, count)
        }
        _ => (x, rows),
    };
    let s = tape.sum_axis(masked, 0)?;
    tape.scale(s, 1.0 / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_shapes_and_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParameterSet::new();
        let lin = Linear::new(&mut params, "l", 4, 3, true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, false);
        let x = tape.constant(Tensor::ones(&[1, 4]));
        let y = lin.forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3]);
        assert_eq!(tape.total_cost().macs, 12);
    }

    #[test]
    fn pooling_matches_gathered_mean() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_rows(&[vec![1.0, 2.0], vec![10.0, 20.0], vec![3.0, 5.0]]).unwrap(),
        );
        let p = pool_rows(&mut tape, x, Some(&[true, false, true])).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 3.5]);
        let g = tape.gather_rows(x, &[0, 2]).unwrap();
        let q = pool_rows(&mut tape, g, None).unwrap();
        assert_eq!(tape.value(p), tape.value(q));
        assert!(pool_rows(&mut tape, x, Some(&[false; 3])).is_err());
    }
}
