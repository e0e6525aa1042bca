use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::Real;

/// Affine map `x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((in_dim, out_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((in_dim, out_dim), |_| F::lit(rng.random_range(-a..a))),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>, grad: &mut Linear<F>) -> Array2<F> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct LnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LnCache<F>) {
        let d = F::lit(x.ncols() as f64);
        let eps = F::lit(LN_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / d;
            *s = F::one() / (var + eps).sqrt();
            let k = *s;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache<F>, dy: &Array2<F>, grad: &mut LayerNorm<F>) -> Array2<F> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = F::lit(dy.ncols() as f64);
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &s) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum::<F>() / d;
            for (g, &x) in row.iter_mut().zip(xh.iter()) {
                *g = s * (*g - mean_g - x * mean_gx);
            }
        }
        dx
    }
}

fn gelu_parts<F: Real>(u: F) -> (F, F) {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044_715);
    let half = F::lit(0.5);
    let one = F::one();
    let t = (c * (u + a * u * u * u)).tanh();
    let y = half * u * (one + t);
    let dy = half * (one + t) + half * u * (one - t * t) * c * (one + F::lit(3.0) * a * u * u);
    (y, dy)
}

pub fn gelu<F: Real>(u: F) -> F {
    gelu_parts(u).0
}

/// Position-wise `W₂ · gelu(W₁ x + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<F> {
    pub up: Linear<F>,
    pub down: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct FfnCache<F> {
    x: Array2<F>,
    act: Array2<F>,
    dact: Array2<F>,
}

impl<F: Real> FeedForward<F> {
    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, FfnCache<F>) {
        let pre = self.up.apply(x);
        let mut act = pre.clone();
        let mut dact = pre;
        for (a, d) in act.iter_mut().zip(dact.iter_mut()) {
            let (y, dy) = gelu_parts(*a);
            *a = y;
            *d = dy;
        }
        let y = self.down.apply(&act);
        (
            y,
            FfnCache {
                x: x.to_owned(),
                act,
                dact,
            },
        )
    }

    pub fn backward(&self, cache: &FfnCache<F>, dy: &Array2<F>, grad: &mut FeedForward<F>) -> Array2<F> {
        let dact = self.down.backward(&cache.act, dy, &mut grad.down);
        let dpre = dact * &cache.dact;
        self.up.backward(&cache.x, &dpre, &mut grad.up)
    }
}
