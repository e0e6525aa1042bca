use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn toy_config(d: usize, heads: usize, fusion: usize, transformer: usize) -> ModelConfig {
    ModelConfig {
        linguistic_dim: 6,
        acoustic_dim: 5,
        attention: AttentionConfig {
            model_dim: d,
            heads,
            fusion_layers: fusion,
            transformer_layers: transformer,
            ffn_hidden: 2 * d,
            dropout_rate: 0.0,
        },
    }
}

fn randomize(p: &mut ModelParams<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, mut t) in p.tensors_mut() {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        t.mapv_inplace(|_| base + rng.random_range(-scale..scale));
    }
}

fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn pooling_examples() {
    let h = Array2::from_shape_fn((4, 3), |(_, j)| j as f64 + 0.5);
    let (pooled, alpha) = attention_pool(&h, &array![0.3, -0.2, 1.0], 0.7);
    assert!(alpha.iter().all(|&a| (a - 0.25).abs() < 1e-15));
    assert_eq!(pooled, h.row(0));

    let one = array![[1.0, -2.0]];
    let (pooled, alpha) = attention_pool(&one, &array![5.0, 5.0], 1.0);
    assert_eq!(alpha, array![1.0]);
    assert_eq!(pooled, one.row(0));

    // logits (0, ln 3)
    let h = array![[0.0], [3f64.ln()]];
    let (_, alpha) = attention_pool(&h, &array![1.0], 0.0);
    assert!((alpha[0] - 0.25).abs() < 1e-15);
    assert!((alpha[1] - 0.75).abs() < 1e-15);
}

#[test]
fn classify_examples() {
    let z: Array1<f64> = array![0.0, 0.0];
    let w = array![1.0, 1.0];
    assert_eq!(classify(&z, &w, 0.0, 0.5), (0.5, TurnLabel::Shift));
    let (p, d) = classify(&z, &w, 10.0, 0.5);
    assert!((p - 0.999_954_602_131_297_6).abs() < 1e-15);
    assert_eq!(d, TurnLabel::Shift);
    let (p, d) = classify(&z, &w, -(3f64.ln()), 0.5);
    assert!((p - 0.25).abs() < 1e-15);
    assert_eq!(d, TurnLabel::Hold);
}

#[test]
fn bce_examples() {
    let (l, g) = bce_loss(0.0f64, 1.0);
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(g, -0.5);
    let (l, g) = bce_loss(0.0f64, 0.0);
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(g, 0.5);
    let (l, _) = bce_loss(2.0f64, 1.0);
    assert!((l - (1.0 + (-2f64).exp()).ln()).abs() < 1e-15);
    assert!((l - 0.126_928_011_042_972_6).abs() < 1e-12);
    // extreme logits stay finite
    for x in [-800.0f64, 800.0] {
        for y in [0.0, 1.0] {
            let (l, g) = bce_loss(x, y);
            assert!(l.is_finite() && l >= 0.0 && g.is_finite());
        }
    }
    // positive weighting scales only the positive term
    let (l1, g1) = bce_with_logits(0.3f64, 1.0, 2.0);
    let (l0, g0) = bce_loss(0.3f64, 1.0);
    assert!((l1 - 2.0 * l0).abs() < 1e-15 && (g1 - 2.0 * g0).abs() < 1e-15);
}

#[test]
fn zeroed_outputs_make_the_fusion_layer_an_identity() {
    let cfg = toy_config(8, 2, 1, 0);
    let mut p = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let layer = &mut p.fusion[0];
    layer.attn.o = Linear::zeros(8, 8);
    layer.ffn.down = Linear::zeros(16, 8);
    let x = rand_matrix(5, 8, 1);
    let a = rand_matrix(9, 8, 2);
    let (z, _) = cross_attention_layer(layer, &x, &a, 2, None).unwrap();
    assert_eq!(z, x);
}

#[test]
fn fusion_output_follows_the_query_length() {
    let cfg = ModelConfig {
        linguistic_dim: 512,
        acoustic_dim: 256,
        attention: AttentionConfig {
            dropout_rate: 0.0,
            ..Default::default()
        },
    };
    let p = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let x = rand_matrix(5, 256, 1).mapv(|v| v as f32);
    let a = rand_matrix(9, 256, 2).mapv(|v| v as f32);
    let (z, _) = cross_attention_layer(&p.fusion[0], &x, &a, 4, None).unwrap();
    assert_eq!(z.dim(), (5, 256));
    let bad = rand_matrix(9, 128, 2).mapv(|v| v as f32);
    assert!(matches!(
        cross_attention_layer(&p.fusion[0], &x, &bad, 4, None),
        Err(ModelError::Shape(_))
    ));
}

// Straight-line loops for one fusion layer.
fn oracle_layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

fn oracle_affine(x: &[f64], l: &Linear<f64>) -> Vec<f64> {
    (0..l.out_dim())
        .map(|o| l.bias[o] + (0..l.in_dim()).map(|i| x[i] * l.weight[[i, o]]).sum::<f64>())
        .collect()
}

fn oracle_gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

#[test]
fn fusion_layer_against_step_by_step_oracle() {
    let (t1, t2, d, heads) = (3, 5, 4, 2);
    let mut cfg = toy_config(d, heads, 1, 0);
    cfg.attention.ffn_hidden = 6;
    let mut p = ModelParams::<f64>::init(&cfg, 9).unwrap();
    randomize(&mut p, 10, 0.7);
    let layer = &p.fusion[0];
    let x = rand_matrix(t1, d, 11);
    let a = rand_matrix(t2, d, 12);
    let (z, _) = cross_attention_layer(layer, &x, &a, heads, None).unwrap();

    let row = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
    let g = |v: &Array1<f64>| v.to_vec();
    let kvn: Vec<Vec<f64>> = (0..t2)
        .map(|j| oracle_layer_norm(&row(&a, j), &g(&layer.ln_kv.gamma), &g(&layer.ln_kv.beta)))
        .collect();
    let ks: Vec<Vec<f64>> = kvn.iter().map(|r| oracle_affine(r, &layer.attn.k)).collect();
    let vs: Vec<Vec<f64>> = kvn.iter().map(|r| oracle_affine(r, &layer.attn.v)).collect();
    let dk = d / heads;
    for i in 0..t1 {
        let qn = oracle_layer_norm(&row(&x, i), &g(&layer.ln_q.gamma), &g(&layer.ln_q.beta));
        let q = oracle_affine(&qn, &layer.attn.q);
        let mut ctx = vec![0.0; d];
        for h in 0..heads {
            let scores: Vec<f64> = (0..t2)
                .map(|j| (h * dk..(h + 1) * dk).map(|c| q[c] * ks[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..t2 {
                let w = (scores[j] - m).exp() / z;
                for c in h * dk..(h + 1) * dk {
                    ctx[c] += w * vs[j][c];
                }
            }
        }
        let attn = oracle_affine(&ctx, &layer.attn.o);
        let y: Vec<f64> = (0..d).map(|c| x[[i, c]] + attn[c]).collect();
        let fin = oracle_layer_norm(&y, &g(&layer.ln_ffn.gamma), &g(&layer.ln_ffn.beta));
        let hidden: Vec<f64> = oracle_affine(&fin, &layer.ffn.up).into_iter().map(oracle_gelu).collect();
        let f = oracle_affine(&hidden, &layer.ffn.down);
        for c in 0..d {
            assert!((z[[i, c]] - (y[c] + f[c])).abs() < 1e-12, "row {i} col {c}");
        }
    }
}

#[test]
fn transformer_is_causal_and_extrapolates() {
    let cfg = toy_config(16, 4, 0, 2);
    let mut p = ModelParams::<f64>::init(&cfg, 5).unwrap();
    randomize(&mut p, 6, 0.4);
    let h = rand_matrix(12, 16, 7);
    let (base, _) = causal_transformer(&p.transformer, &h, 4, None).unwrap();
    for t in 0..11 {
        let mut h2 = h.clone();
        for v in h2.row_mut(t + 1) {
            *v += 0.75;
        }
        let (out, _) = causal_transformer(&p.transformer, &h2, 4, None).unwrap();
        for s in 0..=t {
            assert_eq!(out.row(s), base.row(s));
        }
        assert_ne!(out.row(t + 1), base.row(t + 1));
    }
    let single = rand_matrix(1, 16, 8);
    assert_eq!(causal_transformer(&p.transformer, &single, 4, None).unwrap().0.dim(), (1, 16));
    let long = rand_matrix(250, 16, 9);
    assert_eq!(causal_transformer(&p.transformer, &long, 4, None).unwrap().0.dim(), (250, 16));
}

#[test]
fn dead_network_leaves_only_the_classifier_bias() {
    let cfg = toy_config(8, 2, 2, 1);
    let mut p = ModelParams::<f64>::init(&cfg, 1).unwrap();
    p.cls_b[()] = 0.8;
    let xl = Array2::zeros((4, 6));
    let xa = Array2::zeros((7, 5));
    let t = forward(&p, &cfg, &xl, &xa, None).unwrap();
    assert_eq!(t.logit, 0.8);
    assert_eq!(t.prob, sigmoid(0.8));
}

#[test]
fn forward_is_deterministic_and_well_formed() {
    let cfg = toy_config(8, 2, 2, 2);
    let mut p = ModelParams::<f64>::init(&cfg, 1).unwrap();
    randomize(&mut p, 2, 0.5);
    let xl = rand_matrix(6, 6, 3);
    let xa = rand_matrix(20, 5, 4);
    let a = forward(&p, &cfg, &xl, &xa, None).unwrap();
    let b = forward(&p, &cfg, &xl, &xa, None).unwrap();
    assert_eq!(a.logit.to_bits(), b.logit.to_bits());
    assert!(a.prob > 0.0 && a.prob < 1.0);
    for m in a.attention_maps() {
        for r in m.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&v| v >= 0.0));
        }
    }
    let bad = rand_matrix(6, 7, 3);
    assert!(forward(&p, &cfg, &bad, &xa, None).is_err());
}

#[test]
fn manifest_is_stable() {
    let cfg = toy_config(8, 2, 2, 1);
    let a = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let b = ModelParams::<f32>::init(&cfg, 2).unwrap();
    assert_eq!(a.manifest(), b.manifest());
    assert_eq!(a.parameter_count(), b.parameter_count());
    let names: Vec<String> = a.manifest().into_iter().map(|t| t.name).collect();
    let mut dedup = names.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), names.len());
    assert!(names.contains(&"fusion.1.attn.k.weight".to_string()));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = toy_config(8, 3, 1, 1);
    assert!(matches!(ModelParams::<f32>::init(&cfg, 0), Err(ModelError::Config(_))));
    cfg.attention.heads = 2;
    cfg.attention.dropout_rate = 1.0;
    assert!(ModelParams::<f32>::init(&cfg, 0).is_err());
}

fn objective(p: &ModelParams<f64>, cfg: &ModelConfig, xl: &Array2<f64>, xa: &Array2<f64>, y: f64, drop: Option<u64>) -> f64 {
    let mut d = drop.map(|s| Dropout::new(0.3, s));
    let t = forward(p, cfg, xl, xa, d.as_mut()).unwrap();
    bce_loss(t.logit, y).0
}

#[test]
fn gradients_match_finite_differences() {
    for (drop, y) in [(None, 1.0), (Some(77), 0.0)] {
        let cfg = toy_config(8, 2, 2, 1);
        let mut p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        randomize(&mut p, 21, 0.5);
        let xl = rand_matrix(3, 6, 22);
        let xa = rand_matrix(5, 5, 23);
        let mut d = drop.map(|s| Dropout::new(0.3, s));
        let t = forward(&p, &cfg, &xl, &xa, d.as_mut()).unwrap();
        let (_, dlogit) = bce_loss(t.logit, y);
        let g = backward(&p, &t, dlogit);
        let h = 1e-5;
        let analytic: Vec<(String, Vec<f64>)> = g
            .params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.iter().cloned().collect()))
            .collect();
        for (gi, (name, grads)) in analytic.iter().enumerate() {
            for (k, &a) in grads.iter().enumerate() {
                let mut plus = p.clone();
                *plus.tensors_mut()[gi].1.iter_mut().nth(k).unwrap() += h;
                let mut minus = p.clone();
                *minus.tensors_mut()[gi].1.iter_mut().nth(k).unwrap() -= h;
                let num = (objective(&plus, &cfg, &xl, &xa, y, drop) - objective(&minus, &cfg, &xl, &xa, y, drop))
                    / (2.0 * h);
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{k}]: analytic {a}, numeric {num}");
            }
        }
        // gradient at the encoder outputs
        for (which, x) in [(0, &xl), (1, &xa)] {
            let ga = if which == 0 { &g.linguistic } else { &g.acoustic };
            for ((i, j), &a) in ga.indexed_iter() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let (fp, fm) = if which == 0 {
                    (objective(&p, &cfg, &xp, &xa, y, drop), objective(&p, &cfg, &xm, &xa, y, drop))
                } else {
                    (objective(&p, &cfg, &xl, &xp, y, drop), objective(&p, &cfg, &xl, &xm, y, drop))
                };
                let num = (fp - fm) / (2.0 * h);
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4);
            }
        }
    }
}

#[test]
fn cast_round_trips_through_f64() {
    let cfg = toy_config(8, 2, 1, 1);
    let p = ModelParams::<f32>::init(&cfg, 4).unwrap();
    assert_eq!(p.cast::<f64>().cast::<f32>(), p);
}

#[test]
fn raising_the_threshold_never_turns_hold_into_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let p: f64 = rng.random();
        let t1: f64 = rng.random();
        let t2 = t1 + rng.random::<f64>() * (1.0 - t1);
        if decide(p, t1) == TurnLabel::Hold {
            assert_eq!(decide(p, t2), TurnLabel::Hold);
        }
    }
}
