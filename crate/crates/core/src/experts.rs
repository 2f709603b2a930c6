//! The pool of local contextualization experts.
//!
//! Expert δ=0 is the identity; expert δ>0 is a same-length convolution with
//! kernel length 2δ−1 over a head slice. A pool holds every radius from 0 to
//! the configured upper bound with no gaps, and is shared across heads and
//! the Q/K/V streams.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One contextualization function g(·, δ).
#[derive(Clone, Debug)]
pub struct ContextExpert {
    pub radius: usize,
    /// [2δ−1 × d_k × d_k]; empty for δ=0.
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ExpertPool {
    pub experts: Vec<ContextExpert>,
    pub d_k: usize,
    pub use_bias: bool,
    /// ReLU after the convolution; off by default (the convolution stays a
    /// plain linear map so δ=0 and δ>0 experts agree in kind).
    pub use_activation: bool,
}

impl ExpertPool {
    pub fn new<R: Rng>(
        delta_max: usize,
        d_k: usize,
        use_bias: bool,
        use_activation: bool,
        rng: &mut R,
    ) -> Self {
        let mut experts = Vec::with_capacity(delta_max + 1);
        experts.push(ContextExpert {
            radius: 0,
            kernel: None,
            bias: None,
        });
        for delta in 1..=delta_max {
            let k = 2 * delta - 1;
            let bound = (6.0 / ((k * d_k + d_k) as f64)).sqrt();
            experts.push(ContextExpert {
                radius: delta,
                kernel: Some(Tensor::rand_uniform(&[k, d_k, d_k], bound, rng)),
                bias: use_bias.then(|| Tensor::zeros(&[d_k])),
            });
        }
        ExpertPool {
            experts,
            d_k,
            use_bias,
            use_activation,
        }
    }

    pub fn delta_max(&self) -> usize {
        self.experts.len() - 1
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Tape-bound view of a pool: one (kernel, bias) Var pair per δ>0 expert.
#[derive(Clone)]
pub struct PoolVars {
    pub kernels: Vec<(Var, Option<Var>)>,
    pub d_k: usize,
    pub use_activation: bool,
}

impl PoolVars {
    pub fn bind(pool: &ExpertPool, tape: &Tape) -> Self {
        let kernels = pool
            .experts
            .iter()
            .skip(1)
            .map(|e| {
                (
                    tape.leaf(e.kernel.clone().expect("δ>0 expert has a kernel")),
                    e.bias.clone().map(|b| tape.leaf(b)),
                )
            })
            .collect();
        PoolVars {
            kernels,
            d_k: pool.d_k,
            use_activation: pool.use_activation,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.kernels.len() + 1
    }
}

/// Applies expert δ to a full head slice [L×d_k].
pub fn apply_expert(tape: &Tape, pool: &PoolVars, delta: usize, x: Var) -> Result<Var> {
    if delta >= pool.n_experts() {
        return Err(Error::InvalidArgument(format!(
            "expert radius {delta} out of range 0..={}",
            pool.n_experts() - 1
        )));
    }
    if delta == 0 {
        return Ok(x);
    }
    let (w, b) = pool.kernels[delta - 1];
    let y = tape.conv1d_same(x, w, b)?;
    Ok(if pool.use_activation { tape.relu(y) } else { y })
}

/// Closed-form parameter count of a pool: Σ_{δ=1..Δ} (2δ−1)·d_k² = Δ²·d_k²,
/// plus d_k per convolution expert when biased.
pub fn pool_param_count(delta_max: usize, d_k: usize, include_bias: bool) -> usize {
    let weights = delta_max * delta_max * d_k * d_k;
    let biases = if include_bias { delta_max * d_k } else { 0 };
    weights + biases
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_has_consecutive_radii_and_odd_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = ExpertPool::new(5, 8, true, false, &mut rng);
        assert_eq!(pool.n_experts(), 6);
        for (i, e) in pool.experts.iter().enumerate() {
            assert_eq!(e.radius, i);
            if i == 0 {
                assert!(e.kernel.is_none());
            } else {
                let k = e.kernel.as_ref().unwrap().shape()[0];
                assert_eq!(k, 2 * i - 1);
            }
        }
        // Δ=5 kernel lengths: {—,1,3,5,7,9}
        let ks: Vec<usize> = pool
            .experts
            .iter()
            .skip(1)
            .map(|e| e.kernel.as_ref().unwrap().shape()[0])
            .collect();
        assert_eq!(ks, vec![1, 3, 5, 7, 9]);
    }

    #[test]
    fn identity_expert_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool = ExpertPool::new(3, 4, true, false, &mut rng);
        let tape = Tape::new();
        let pv = PoolVars::bind(&pool, &tape);
        let x = tape.leaf(Tensor::rand_uniform(&[5, 4], 1.0, &mut rng));
        let y = apply_expert(&tape, &pv, 0, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn radius_out_of_range_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = ExpertPool::new(2, 4, false, false, &mut rng);
        let tape = Tape::new();
        let pv = PoolVars::bind(&pool, &tape);
        let x = tape.leaf(Tensor::zeros(&[3, 4]));
        assert!(apply_expert(&tape, &pv, 3, x).is_err());
    }

    #[test]
    fn conv_expert_matches_direct_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (l, d_k, delta) = (4, 2, 2usize);
        let pool = ExpertPool::new(3, d_k, true, false, &mut rng);
        let tape = Tape::new();
        let pv = PoolVars::bind(&pool, &tape);
        let xt = Tensor::rand_uniform(&[l, d_k], 1.0, &mut rng);
        let x = tape.leaf(xt.clone());
        let y = tape.value(apply_expert(&tape, &pv, delta, x).unwrap());

        let k = 2 * delta - 1;
        let half = (k - 1) / 2;
        let w = pool.experts[delta].kernel.as_ref().unwrap();
        let b = pool.experts[delta].bias.as_ref().unwrap();
        for j in 0..l {
            for o in 0..d_k {
                let mut s = b.data()[o];
                for t in 0..k {
                    let src = j as isize + t as isize - half as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    for i in 0..d_k {
                        s += xt.at2(src as usize, i) * w.data()[(t * d_k + i) * d_k + o];
                    }
                }
                assert!((y.at2(j, o) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn param_count_closed_form() {
        assert_eq!(pool_param_count(0, 64, false), 0);
        assert_eq!(pool_param_count(5, 64, false), 102_400);
        assert_eq!(pool_param_count(6, 64, false), 147_456);
        assert_eq!(pool_param_count(6, 64, false) - pool_param_count(5, 64, false), 45_056);
        // matches the actual tensors for all Δ in 0..=8
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for delta_max in 0..=8usize {
            for bias in [false, true] {
                let pool = ExpertPool::new(delta_max, 3, bias, false, &mut rng);
                let actual: usize = pool
                    .experts
                    .iter()
                    .map(|e| {
                        e.kernel.as_ref().map_or(0, |k| k.len())
                            + e.bias.as_ref().map_or(0, |b| b.len())
                    })
                    .sum();
                assert_eq!(actual, pool_param_count(delta_max, 3, bias));
            }
        }
    }
}
