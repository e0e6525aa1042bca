//! Fusion classifier: projections into a shared space, cross-attention
//! fusion (linguistic queries over acoustic keys/values), a causal ALiBi
//! transformer, attention pooling and a logistic head. Backward passes are
//! written out by hand and return gradients for every trainable tensor plus
//! the encoder outputs.

mod attention;
mod layers;

use ndarray::{Array0, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vad::TurnLabel;
use crate::Real;

pub use attention::{
    alibi_bias, alibi_slopes, scaled_dot_attention, AttentionOutput, MhaCache, MultiHeadAttention,
};
pub use layers::{gelu, FeedForward, FfnCache, LayerNorm, Linear, LnCache, LN_EPS};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("attention row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub fusion_layers: usize,
    pub transformer_layers: usize,
    pub ffn_hidden: usize,
    pub dropout_rate: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            model_dim: 256,
            heads: 4,
            fusion_layers: 2,
            transformer_layers: 2,
            ffn_hidden: 1024,
            dropout_rate: 0.1,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub linguistic_dim: usize,
    pub acoustic_dim: usize,
    #[serde(flatten)]
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            linguistic_dim: 512,
            acoustic_dim: 256,
            attention: AttentionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let a = &self.attention;
        let dims = [
            self.linguistic_dim,
            self.acoustic_dim,
            a.model_dim,
            a.heads,
            a.ffn_hidden,
        ];
        if dims.contains(&0) {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if a.model_dim % a.heads != 0 {
            return Err(ModelError::Config(format!(
                "model_dim {} not divisible by {} heads",
                a.model_dim, a.heads
            )));
        }
        if !(0.0..1.0).contains(&a.dropout_rate) {
            return Err(ModelError::Config(format!("dropout_rate {} outside [0, 1)", a.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer<F> {
    pub ln_q: LayerNorm<F>,
    pub ln_kv: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln_ffn: LayerNorm<F>,
    pub ffn: FeedForward<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer<F> {
    pub ln_attn: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln_ffn: LayerNorm<F>,
    pub ffn: FeedForward<F>,
}

/// All trainable tensors. The same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub proj_linguistic: Linear<F>,
    pub proj_acoustic: Linear<F>,
    pub fusion: Vec<FusionLayer<F>>,
    pub transformer: Vec<TransformerLayer<F>>,
    pub final_norm: LayerNorm<F>,
    pub pool_w: Array1<F>,
    pub pool_b: Array0<F>,
    pub cls_w: Array1<F>,
    pub cls_b: Array0<F>,
}

type Named<'a, F> = Vec<(String, ArrayViewD<'a, F>)>;
type NamedMut<'a, F> = Vec<(String, ArrayViewMutD<'a, F>)>;

fn push_linear<'a, F: Real>(out: &mut Named<'a, F>, p: &str, l: &'a Linear<F>) {
    out.push((format!("{p}.weight"), l.weight.view().into_dyn()));
    out.push((format!("{p}.bias"), l.bias.view().into_dyn()));
}

fn push_linear_mut<'a, F: Real>(out: &mut NamedMut<'a, F>, p: &str, l: &'a mut Linear<F>) {
    out.push((format!("{p}.weight"), l.weight.view_mut().into_dyn()));
    out.push((format!("{p}.bias"), l.bias.view_mut().into_dyn()));
}

fn push_ln<'a, F: Real>(out: &mut Named<'a, F>, p: &str, l: &'a LayerNorm<F>) {
    out.push((format!("{p}.gamma"), l.gamma.view().into_dyn()));
    out.push((format!("{p}.beta"), l.beta.view().into_dyn()));
}

fn push_ln_mut<'a, F: Real>(out: &mut NamedMut<'a, F>, p: &str, l: &'a mut LayerNorm<F>) {
    out.push((format!("{p}.gamma"), l.gamma.view_mut().into_dyn()));
    out.push((format!("{p}.beta"), l.beta.view_mut().into_dyn()));
}

fn push_mha<'a, F: Real>(out: &mut Named<'a, F>, p: &str, m: &'a MultiHeadAttention<F>) {
    push_linear(out, &format!("{p}.q"), &m.q);
    push_linear(out, &format!("{p}.k"), &m.k);
    push_linear(out, &format!("{p}.v"), &m.v);
    push_linear(out, &format!("{p}.o"), &m.o);
}

fn push_mha_mut<'a, F: Real>(out: &mut NamedMut<'a, F>, p: &str, m: &'a mut MultiHeadAttention<F>) {
    push_linear_mut(out, &format!("{p}.q"), &mut m.q);
    push_linear_mut(out, &format!("{p}.k"), &mut m.k);
    push_linear_mut(out, &format!("{p}.v"), &mut m.v);
    push_linear_mut(out, &format!("{p}.o"), &mut m.o);
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<F: Real> ModelParams<F> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let a = &config.attention;
        let d = a.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mha = |rng: &mut ChaCha8Rng| MultiHeadAttention {
            q: Linear::xavier(d, d, rng),
            k: Linear::xavier(d, d, rng),
            v: Linear::xavier(d, d, rng),
            o: Linear::xavier(d, d, rng),
        };
        let ffn = |rng: &mut ChaCha8Rng| FeedForward {
            up: Linear::xavier(d, a.ffn_hidden, rng),
            down: Linear::xavier(a.ffn_hidden, d, rng),
        };
        let proj_linguistic = Linear::xavier(config.linguistic_dim, d, rng);
        let proj_acoustic = Linear::xavier(config.acoustic_dim, d, rng);
        let fusion = (0..a.fusion_layers)
            .map(|_| FusionLayer {
                ln_q: LayerNorm::new(d),
                ln_kv: LayerNorm::new(d),
                attn: mha(rng),
                ln_ffn: LayerNorm::new(d),
                ffn: ffn(rng),
            })
            .collect();
        let transformer = (0..a.transformer_layers)
            .map(|_| TransformerLayer {
                ln_attn: LayerNorm::new(d),
                attn: mha(rng),
                ln_ffn: LayerNorm::new(d),
                ffn: ffn(rng),
            })
            .collect();
        let bound = 1.0 / (d as f64).sqrt();
        let cls_w = Array1::from_shape_fn(d, |_| F::lit(rng.random_range(-bound..bound)));
        Ok(Self {
            proj_linguistic,
            proj_acoustic,
            fusion,
            transformer,
            final_norm: LayerNorm::new(d),
            pool_w: Array1::zeros(d),
            pool_b: Array0::zeros(()),
            cls_w,
            cls_b: Array0::zeros(()),
        })
    }

    pub fn tensors(&self) -> Named<'_, F> {
        let mut out = Vec::new();
        push_linear(&mut out, "proj_linguistic", &self.proj_linguistic);
        push_linear(&mut out, "proj_acoustic", &self.proj_acoustic);
        for (i, l) in self.fusion.iter().enumerate() {
            push_ln(&mut out, &format!("fusion.{i}.ln_q"), &l.ln_q);
            push_ln(&mut out, &format!("fusion.{i}.ln_kv"), &l.ln_kv);
            push_mha(&mut out, &format!("fusion.{i}.attn"), &l.attn);
            push_ln(&mut out, &format!("fusion.{i}.ln_ffn"), &l.ln_ffn);
            push_linear(&mut out, &format!("fusion.{i}.ffn.up"), &l.ffn.up);
            push_linear(&mut out, &format!("fusion.{i}.ffn.down"), &l.ffn.down);
        }
        for (i, l) in self.transformer.iter().enumerate() {
            push_ln(&mut out, &format!("transformer.{i}.ln_attn"), &l.ln_attn);
            push_mha(&mut out, &format!("transformer.{i}.attn"), &l.attn);
            push_ln(&mut out, &format!("transformer.{i}.ln_ffn"), &l.ln_ffn);
            push_linear(&mut out, &format!("transformer.{i}.ffn.up"), &l.ffn.up);
            push_linear(&mut out, &format!("transformer.{i}.ffn.down"), &l.ffn.down);
        }
        push_ln(&mut out, "final_norm", &self.final_norm);
        out.push(("pool.w".into(), self.pool_w.view().into_dyn()));
        out.push(("pool.b".into(), self.pool_b.view().into_dyn()));
        out.push(("cls.w".into(), self.cls_w.view().into_dyn()));
        out.push(("cls.b".into(), self.cls_b.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> NamedMut<'_, F> {
        let mut out = Vec::new();
        push_linear_mut(&mut out, "proj_linguistic", &mut self.proj_linguistic);
        push_linear_mut(&mut out, "proj_acoustic", &mut self.proj_acoustic);
        for (i, l) in self.fusion.iter_mut().enumerate() {
            push_ln_mut(&mut out, &format!("fusion.{i}.ln_q"), &mut l.ln_q);
            push_ln_mut(&mut out, &format!("fusion.{i}.ln_kv"), &mut l.ln_kv);
            push_mha_mut(&mut out, &format!("fusion.{i}.attn"), &mut l.attn);
            push_ln_mut(&mut out, &format!("fusion.{i}.ln_ffn"), &mut l.ln_ffn);
            push_linear_mut(&mut out, &format!("fusion.{i}.ffn.up"), &mut l.ffn.up);
            push_linear_mut(&mut out, &format!("fusion.{i}.ffn.down"), &mut l.ffn.down);
        }
        for (i, l) in self.transformer.iter_mut().enumerate() {
            push_ln_mut(&mut out, &format!("transformer.{i}.ln_attn"), &mut l.ln_attn);
            push_mha_mut(&mut out, &format!("transformer.{i}.attn"), &mut l.attn);
            push_ln_mut(&mut out, &format!("transformer.{i}.ln_ffn"), &mut l.ln_ffn);
            push_linear_mut(&mut out, &format!("transformer.{i}.ffn.up"), &mut l.ffn.up);
            push_linear_mut(&mut out, &format!("transformer.{i}.ffn.down"), &mut l.ffn.down);
        }
        push_ln_mut(&mut out, "final_norm", &mut self.final_norm);
        out.push(("pool.w".into(), self.pool_w.view_mut().into_dyn()));
        out.push(("pool.b".into(), self.pool_b.view_mut().into_dyn()));
        out.push(("cls.w".into(), self.cls_w.view_mut().into_dyn()));
        out.push(("cls.b".into(), self.cls_b.view_mut().into_dyn()));
        out
    }

    pub fn manifest(&self) -> Vec<TensorInfo> {
        self.tensors()
            .into_iter()
            .map(|(name, t)| TensorInfo {
                name,
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, k: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G> {
            proj_linguistic: Linear::zeros(self.proj_linguistic.in_dim(), self.proj_linguistic.out_dim()),
            proj_acoustic: Linear::zeros(self.proj_acoustic.in_dim(), self.proj_acoustic.out_dim()),
            fusion: self
                .fusion
                .iter()
                .map(|l| FusionLayer {
                    ln_q: LayerNorm::zeros(l.ln_q.gamma.len()),
                    ln_kv: LayerNorm::zeros(l.ln_kv.gamma.len()),
                    attn: zero_mha(&l.attn),
                    ln_ffn: LayerNorm::zeros(l.ln_ffn.gamma.len()),
                    ffn: zero_ffn(&l.ffn),
                })
                .collect(),
            transformer: self
                .transformer
                .iter()
                .map(|l| TransformerLayer {
                    ln_attn: LayerNorm::zeros(l.ln_attn.gamma.len()),
                    attn: zero_mha(&l.attn),
                    ln_ffn: LayerNorm::zeros(l.ln_ffn.gamma.len()),
                    ffn: zero_ffn(&l.ffn),
                })
                .collect(),
            final_norm: LayerNorm::zeros(self.final_norm.gamma.len()),
            pool_w: Array1::zeros(self.pool_w.len()),
            pool_b: Array0::zeros(()),
            cls_w: Array1::zeros(self.cls_w.len()),
            cls_b: Array0::zeros(()),
        };
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.zip_mut_with(&src, |d, &s| *d = G::lit(s.to_f64_lossless()));
        }
        out
    }
}

fn zero_mha<F: Real, G: Real>(m: &MultiHeadAttention<F>) -> MultiHeadAttention<G> {
    let z = |l: &Linear<F>| Linear::zeros(l.in_dim(), l.out_dim());
    MultiHeadAttention {
        q: z(&m.q),
        k: z(&m.k),
        v: z(&m.v),
        o: z(&m.o),
    }
}

fn zero_ffn<F: Real, G: Real>(f: &FeedForward<F>) -> FeedForward<G> {
    FeedForward {
        up: Linear::zeros(f.up.in_dim(), f.up.out_dim()),
        down: Linear::zeros(f.down.in_dim(), f.down.out_dim()),
    }
}

/// Inverted-dropout mask source. One instance per sample and step keeps runs
/// reproducible.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn for_sample(rate: f64, seed: u64, epoch: usize, step: usize, index: usize) -> Self {
        let mut h = splitmix(seed);
        for v in [epoch, step, index] {
            h = splitmix(h ^ v as u64);
        }
        Self::new(rate, h)
    }

    fn mask<F: Real>(&mut self, shape: (usize, usize)) -> Option<Array2<F>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = F::lit(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        let rng = &mut self.rng;
        Some(Array2::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        }))
    }
}

fn apply_mask<F: Real>(x: Array2<F>, mask: &Option<Array2<F>>) -> Array2<F> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

#[derive(Debug, Clone)]
pub struct FusionCache<F> {
    ln_q: LnCache<F>,
    ln_kv: LnCache<F>,
    pub attn: MhaCache<F>,
    drop_attn: Option<Array2<F>>,
    ln_ffn: LnCache<F>,
    ffn: FfnCache<F>,
    drop_ffn: Option<Array2<F>>,
}

#[derive(Debug, Clone)]
pub struct TransformerCache<F> {
    ln_attn: LnCache<F>,
    pub attn: MhaCache<F>,
    drop_attn: Option<Array2<F>>,
    ln_ffn: LnCache<F>,
    ffn: FfnCache<F>,
    drop_ffn: Option<Array2<F>>,
}

/// Everything a forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub linguistic: Array2<F>,
    pub acoustic: Array2<F>,
    pub fusion: Vec<FusionCache<F>>,
    /// Output of the fusion stack, input to the transformer.
    pub fused: Array2<F>,
    pub transformer: Vec<TransformerCache<F>>,
    /// Output of the causal transformer before the final norm.
    pub transformer_out: Array2<F>,
    final_norm: LnCache<F>,
    /// Per-step states `h_t` entering the pooling.
    pub hidden: Array2<F>,
    pub alpha: Array1<F>,
    pub pooled: Array1<F>,
    pub logit: F,
    pub prob: F,
}

impl<F: Real> ForwardTrace<F> {
    /// Every attention distribution in the trace: per layer and head, then the
    /// pooling weights as a single row.
    pub fn attention_maps(&self) -> Vec<Array2<F>> {
        let mut out: Vec<Array2<F>> = Vec::new();
        for c in &self.fusion {
            out.extend(c.attn.probs.iter().cloned());
        }
        for c in &self.transformer {
            out.extend(c.attn.probs.iter().cloned());
        }
        out.push(self.alpha.clone().insert_axis(Axis(0)));
        out
    }

    pub fn decision(&self, threshold: F) -> TurnLabel {
        decide(self.prob, threshold)
    }
}

pub struct Gradients<F> {
    pub params: ModelParams<F>,
    pub linguistic: Array2<F>,
    pub acoustic: Array2<F>,
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn decide<F: Real>(p: F, threshold: F) -> TurnLabel {
    if p >= threshold {
        TurnLabel::Shift
    } else {
        TurnLabel::Hold
    }
}

/// `softmax_t(h_t · w + b)` and the weighted sum of rows.
pub fn attention_pool<F: Real>(h: &Array2<F>, w: &Array1<F>, b: F) -> (Array1<F>, Array1<F>) {
    let mut s = h.dot(w);
    s.mapv_inplace(|v| v + b);
    let max = s.fold(F::neg_infinity(), |m, &v| m.max(v));
    s.mapv_inplace(|v| (v - max).exp());
    let z = s.sum();
    s.mapv_inplace(|v| v / z);
    let pooled = s.dot(h);
    (pooled, s)
}

/// Probability and decision (`shift` iff `p >= threshold`).
pub fn classify<F: Real>(pooled: &Array1<F>, w: &Array1<F>, b: F, threshold: F) -> (F, TurnLabel) {
    let p = sigmoid(pooled.dot(w) + b);
    (p, decide(p, threshold))
}

/// Binary cross-entropy from a logit, with its derivative w.r.t. the logit.
/// `pos_weight` scales the positive-class term.
pub fn bce_with_logits<F: Real>(logit: F, target: F, pos_weight: F) -> (F, F) {
    let one = F::one();
    let loss = pos_weight * target * softplus(-logit) + (one - target) * softplus(logit);
    let p = sigmoid(logit);
    let grad = pos_weight * target * (p - one) + (one - target) * p;
    (loss, grad)
}

pub fn bce_loss<F: Real>(logit: F, target: F) -> (F, F) {
    bce_with_logits(logit, target, F::one())
}

fn check_input<F: Real>(name: &'static str, x: &Array2<F>, dim: usize) -> Result<(), ModelError> {
    if x.nrows() == 0 || x.ncols() != dim {
        return Err(ModelError::Shape(format!(
            "{name} input is {:?}, expected T × {dim} with T ≥ 1",
            x.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite(name));
    }
    Ok(())
}

/// One fusion layer: `y = x + Attn(LN(x), LN(h_a), LN(h_a))`,
/// `z = y + FFN(LN(y))`.
pub fn cross_attention_layer<F: Real>(
    layer: &FusionLayer<F>,
    x: &Array2<F>,
    acoustic: &Array2<F>,
    heads: usize,
    dropout: Option<&mut Dropout>,
) -> Result<(Array2<F>, FusionCache<F>), ModelError> {
    if x.ncols() != acoustic.ncols() || layer.ln_q.gamma.len() != x.ncols() {
        return Err(ModelError::Shape(format!(
            "fusion inputs {:?} and {:?} do not share the model dimension",
            x.dim(),
            acoustic.dim()
        )));
    }
    let mut dropout = dropout;
    let (qn, ln_q) = layer.ln_q.forward(x);
    let (kvn, ln_kv) = layer.ln_kv.forward(acoustic);
    let (a, attn) = layer.attn.forward(&qn, &kvn, None, heads)?;
    let drop_attn = dropout.as_mut().and_then(|d| d.mask(a.dim()));
    let y = x + &apply_mask(a, &drop_attn);
    let (fin, ln_ffn) = layer.ln_ffn.forward(&y);
    let (f, ffn) = layer.ffn.forward(&fin);
    let drop_ffn = dropout.as_mut().and_then(|d| d.mask(f.dim()));
    let z = y + &apply_mask(f, &drop_ffn);
    Ok((
        z,
        FusionCache {
            ln_q,
            ln_kv,
            attn,
            drop_attn,
            ln_ffn,
            ffn,
            drop_ffn,
        },
    ))
}

fn transformer_layer<F: Real>(
    layer: &TransformerLayer<F>,
    x: &Array2<F>,
    bias: &[Array2<F>],
    heads: usize,
    dropout: &mut Option<&mut Dropout>,
) -> Result<(Array2<F>, TransformerCache<F>), ModelError> {
    let (n, ln_attn) = layer.ln_attn.forward(x);
    let (a, attn) = layer.attn.forward(&n, &n, Some(bias), heads)?;
    let drop_attn = dropout.as_mut().and_then(|d| d.mask(a.dim()));
    let y = x + &apply_mask(a, &drop_attn);
    let (fin, ln_ffn) = layer.ln_ffn.forward(&y);
    let (f, ffn) = layer.ffn.forward(&fin);
    let drop_ffn = dropout.as_mut().and_then(|d| d.mask(f.dim()));
    let z = y + &apply_mask(f, &drop_ffn);
    Ok((
        z,
        TransformerCache {
            ln_attn,
            attn,
            drop_attn,
            ln_ffn,
            ffn,
            drop_ffn,
        },
    ))
}

/// Pre-norm causal self-attention stack with ALiBi.
pub fn causal_transformer<F: Real>(
    layers: &[TransformerLayer<F>],
    h: &Array2<F>,
    heads: usize,
    dropout: Option<&mut Dropout>,
) -> Result<(Array2<F>, Vec<TransformerCache<F>>), ModelError> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("transformer input"));
    }
    let mut dropout = dropout;
    let bias = alibi_bias::<F>(h.nrows(), heads);
    let mut x = h.to_owned();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (z, c) = transformer_layer(layer, &x, &bias, heads, &mut dropout)?;
        x = z;
        caches.push(c);
    }
    Ok((x, caches))
}

/// Full forward pass from encoder outputs. Pass a [`Dropout`] only in
/// training.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    config: &ModelConfig,
    linguistic: &Array2<F>,
    acoustic: &Array2<F>,
    dropout: Option<&mut Dropout>,
) -> Result<ForwardTrace<F>, ModelError> {
    check_input("linguistic", linguistic, params.proj_linguistic.in_dim())?;
    check_input("acoustic", acoustic, params.proj_acoustic.in_dim())?;
    let heads = config.attention.heads;
    let mut dropout = dropout;
    let ha = params.proj_acoustic.apply(acoustic);
    let mut x = params.proj_linguistic.apply(linguistic);
    let mut fusion = Vec::with_capacity(params.fusion.len());
    for layer in &params.fusion {
        let (z, c) = cross_attention_layer(layer, &x, &ha, heads, dropout.as_deref_mut())?;
        x = z;
        fusion.push(c);
    }
    let fused = x;
    let (transformer_out, transformer) =
        causal_transformer(&params.transformer, &fused, heads, dropout.as_deref_mut())?;
    let (hidden, final_norm) = params.final_norm.forward(&transformer_out);
    let (pooled, alpha) = attention_pool(&hidden, &params.pool_w, params.pool_b[()]);
    let logit = pooled.dot(&params.cls_w) + params.cls_b[()];
    let prob = sigmoid(logit);
    Ok(ForwardTrace {
        linguistic: linguistic.to_owned(),
        acoustic: acoustic.to_owned(),
        fusion,
        fused,
        transformer,
        transformer_out,
        final_norm,
        hidden,
        alpha,
        pooled,
        logit,
        prob,
    })
}

/// Backpropagates `dlogit` (the derivative of the objective w.r.t. the
/// logit) through the whole network.
pub fn backward<F: Real>(params: &ModelParams<F>, trace: &ForwardTrace<F>, dlogit: F) -> Gradients<F> {
    let mut g = params.zeros_like();

    g.cls_w = trace.pooled.mapv(|v| v * dlogit);
    g.cls_b[()] = dlogit;
    let dpooled = params.cls_w.mapv(|v| v * dlogit);

    // pooling: h_pool = Σ α_t h_t, α = softmax(h w + b)
    let alpha = &trace.alpha;
    let mut dh = Array2::zeros(trace.hidden.dim());
    for (mut row, &a) in dh.rows_mut().into_iter().zip(alpha.iter()) {
        row.assign(&dpooled.mapv(|v| v * a));
    }
    let dalpha = trace.hidden.dot(&dpooled);
    let mean = alpha.dot(&dalpha);
    let ds = alpha * &dalpha.mapv(|v| v - mean);
    g.pool_w = trace.hidden.t().dot(&ds);
    g.pool_b[()] = ds.sum();
    for (mut row, &s) in dh.rows_mut().into_iter().zip(ds.iter()) {
        row.scaled_add(s, &params.pool_w);
    }

    let mut dx = params.final_norm.backward(&trace.final_norm, &dh, &mut g.final_norm);

    for ((layer, cache), grad) in params
        .transformer
        .iter()
        .zip(&trace.transformer)
        .zip(g.transformer.iter_mut())
        .rev()
    {
        let df = apply_mask(dx.clone(), &cache.drop_ffn);
        let dfin = layer.ffn.backward(&cache.ffn, &df, &mut grad.ffn);
        let dy = dx + &layer.ln_ffn.backward(&cache.ln_ffn, &dfin, &mut grad.ln_ffn);
        let da = apply_mask(dy.clone(), &cache.drop_attn);
        let (dq, dkv) = layer.attn.backward(&cache.attn, &da, &mut grad.attn);
        let dn = dq + &dkv;
        dx = dy + &layer.ln_attn.backward(&cache.ln_attn, &dn, &mut grad.ln_attn);
    }

    let mut dha = Array2::zeros((trace.acoustic.nrows(), params.proj_acoustic.out_dim()));
    for ((layer, cache), grad) in params
        .fusion
        .iter()
        .zip(&trace.fusion)
        .zip(g.fusion.iter_mut())
        .rev()
    {
        let df = apply_mask(dx.clone(), &cache.drop_ffn);
        let dfin = layer.ffn.backward(&cache.ffn, &df, &mut grad.ffn);
        let dy = dx + &layer.ln_ffn.backward(&cache.ln_ffn, &dfin, &mut grad.ln_ffn);
        let da = apply_mask(dy.clone(), &cache.drop_attn);
        let (dq, dkv) = layer.attn.backward(&cache.attn, &da, &mut grad.attn);
        dha += &layer.ln_kv.backward(&cache.ln_kv, &dkv, &mut grad.ln_kv);
        dx = dy + &layer.ln_q.backward(&cache.ln_q, &dq, &mut grad.ln_q);
    }

    let linguistic = params
        .proj_linguistic
        .backward(&trace.linguistic, &dx, &mut g.proj_linguistic);
    let acoustic = params
        .proj_acoustic
        .backward(&trace.acoustic, &dha, &mut g.proj_acoustic);
    Gradients {
        params: g,
        linguistic,
        acoustic,
    }
}

#[cfg(test)]
mod tests;
