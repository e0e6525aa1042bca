use ndarray::{s, Array2, Axis};

use super::layers::Linear;
use super::ModelError;
use crate::Real;

/// ALiBi slopes `2^(-8h/H)` for heads `h = 1..=H`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads)
        .map(|h| (-8.0 * h as f64 / heads as f64).exp2())
        .collect()
}

/// Per-head `T × T` bias: `-m_h (i - j)` on and below the diagonal, `-inf`
/// above it.
pub fn alibi_bias<F: Real>(t: usize, heads: usize) -> Vec<Array2<F>> {
    alibi_slopes(heads)
        .into_iter()
        .map(|m| {
            Array2::from_shape_fn((t, t), |(i, j)| {
                if j > i {
                    F::neg_infinity()
                } else {
                    F::lit(-m * (i - j) as f64)
                }
            })
        })
        .collect()
}

fn is_masked<F: Real>(b: F) -> bool {
    b.is_infinite() && b < F::zero()
}

/// Row softmax of `scores + bias`; masked entries get weight exactly zero
/// and never enter `exp`.
fn masked_softmax<F: Real>(mut scores: Array2<F>, bias: Option<&Array2<F>>) -> Result<Array2<F>, ModelError> {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let brow = bias.map(|b| b.row(i));
        let mut max = F::neg_infinity();
        let mut any = false;
        for (j, v) in row.iter_mut().enumerate() {
            match brow {
                Some(b) if is_masked(b[j]) => continue,
                Some(b) => *v = *v + b[j],
                None => {}
            }
            any = true;
            if *v > max {
                max = *v;
            }
        }
        if !any {
            return Err(ModelError::FullyMasked { row: i });
        }
        let mut sum = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if brow.is_some_and(|b| is_masked(b[j])) {
                *v = F::zero();
            } else {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(scores)
}

fn check_finite<F: Real>(name: &'static str, x: &Array2<F>) -> Result<(), ModelError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite(name))
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<F> {
    pub output: Array2<F>,
    /// One `T_q × T_k` weight matrix per head.
    pub probs: Vec<Array2<F>>,
}

/// Multi-head `softmax(Q Kᵀ / √d_k + bias) V` on already-projected inputs.
pub fn scaled_dot_attention<F: Real>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    bias: Option<&[Array2<F>]>,
    heads: usize,
) -> Result<AttentionOutput<F>, ModelError> {
    let d = q.ncols();
    if heads == 0 || d % heads != 0 || k.ncols() != d || v.ncols() != d || k.nrows() != v.nrows() {
        return Err(ModelError::Shape(format!(
            "attention over Q {:?}, K {:?}, V {:?} with {heads} heads",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if let Some(b) = bias {
        if b.len() != heads || b.iter().any(|m| m.dim() != (q.nrows(), k.nrows())) {
            return Err(ModelError::Shape("attention bias does not match heads × T_q × T_k".into()));
        }
    }
    check_finite("Q", q)?;
    check_finite("K", k)?;
    check_finite("V", v)?;
    let dk = d / heads;
    let scale = F::one() / F::lit(dk as f64).sqrt();
    let mut output = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let p = masked_softmax(scores, bias.map(|b| &b[h]))?;
        output.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    Ok(AttentionOutput { output, probs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<F> {
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct MhaCache<F> {
    xq: Array2<F>,
    xkv: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    ctx: Array2<F>,
    pub probs: Vec<Array2<F>>,
}

impl<F: Real> MultiHeadAttention<F> {
    pub fn forward(
        &self,
        xq: &Array2<F>,
        xkv: &Array2<F>,
        bias: Option<&[Array2<F>]>,
        heads: usize,
    ) -> Result<(Array2<F>, MhaCache<F>), ModelError> {
        let q = self.q.apply(xq);
        let k = self.k.apply(xkv);
        let v = self.v.apply(xkv);
        let AttentionOutput { output: ctx, probs } = scaled_dot_attention(&q, &k, &v, bias, heads)?;
        let out = self.o.apply(&ctx);
        Ok((
            out,
            MhaCache {
                xq: xq.to_owned(),
                xkv: xkv.to_owned(),
                q,
                k,
                v,
                ctx,
                probs,
            },
        ))
    }

    /// Returns gradients at the query input and the key/value input.
    pub fn backward(
        &self,
        cache: &MhaCache<F>,
        dout: &Array2<F>,
        grad: &mut MultiHeadAttention<F>,
    ) -> (Array2<F>, Array2<F>) {
        let heads = cache.probs.len();
        let d = cache.q.ncols();
        let dk = d / heads;
        let scale = F::one() / F::lit(dk as f64).sqrt();
        let dctx = self.o.backward(&cache.ctx, dout, &mut grad.o);
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dkm = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dk..(h + 1) * dk];
            let d_o = dctx.slice(cols);
            let dp = d_o.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_o));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &row_dot) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dkm.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let dxq = self.q.backward(&cache.xq, &dq, &mut grad.q);
        let mut dxkv = self.k.backward(&cache.xkv, &dkm, &mut grad.k);
        dxkv += &self.v.backward(&cache.xkv, &dv, &mut grad.v);
        (dxq, dxkv)
    }
}
