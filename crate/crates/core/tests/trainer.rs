use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use holdshift_core::dataset::TurnSample;
use holdshift_core::frontend::{
    ChannelStream, Encoder, EncoderSpec, FeatureSequence, Frontend, FrontendConfig, FrontendError,
    ToyAcousticEncoder, ToyLinguisticEncoder,
};
use holdshift_core::labels::{label_corpus, LabelConfig};
use holdshift_core::model::{backward, bce_loss, forward, AttentionConfig, ModelConfig, ModelParams};
use holdshift_core::synth::SyntheticTaskSpec;
use holdshift_core::train::{
    batch_gradient, cosine_lr, train, BatchItem, CheckpointKind, LogRecord, MemorySink, Split, TrainConfig,
    TrainError,
};
use ndarray::Array2;

fn corpus(n: usize, seed: u64) -> Vec<TurnSample> {
    let spec = SyntheticTaskSpec {
        n_recordings: n,
        seed,
        ..Default::default()
    };
    let recs: Vec<_> = spec.generate().unwrap().into_iter().map(|r| r.recording).collect();
    label_corpus(&recs, &LabelConfig::default()).0
}

fn frontend_config() -> FrontendConfig {
    FrontendConfig {
        linguistic_dim: 8,
        acoustic_dim: 6,
        ..Default::default()
    }
}

fn model_config() -> ModelConfig {
    ModelConfig {
        linguistic_dim: 8,
        acoustic_dim: 6,
        attention: AttentionConfig {
            model_dim: 8,
            heads: 2,
            fusion_layers: 1,
            transformer_layers: 1,
            ffn_hidden: 16,
            dropout_rate: 0.1,
        },
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs: 2,
        val_fraction: 0.34,
        seed: 3,
        lr_init: 1e-3,
        ..Default::default()
    }
}

fn encode(fe: &Frontend, s: &TurnSample) -> (Array2<f64>, Array2<f64>) {
    let ctx = fe.encode_sample(s).unwrap();
    (ctx.linguistic.to_real(), ctx.acoustic.to_real())
}

#[test]
fn batch_loss_is_the_mean_of_per_sample_losses() {
    let samples = corpus(3, 1);
    let fe = Frontend::new(frontend_config());
    let mc = model_config();
    let params = ModelParams::<f64>::init(&mc, 2).unwrap();
    let n = samples.len().min(12);
    let load = |i: usize| {
        let (linguistic, acoustic) = encode(&fe, &samples[i]);
        Ok(BatchItem {
            linguistic,
            acoustic,
            target: samples[i].label.as_target(),
        })
    };
    let r = batch_gradient(&params, &mc, n, 1.0, load, |_| None).unwrap();
    let mut losses = Vec::new();
    for s in &samples[..n] {
        let (xl, xa) = encode(&fe, s);
        let tr = forward(&params, &mc, &xl, &xa, None).unwrap();
        losses.push(bce_loss(tr.logit, s.label.as_target()).0);
    }
    let mean = losses.iter().sum::<f64>() / n as f64;
    assert!((r.loss - mean).abs() < 1e-10, "{} vs {mean}", r.loss);
    for (a, b) in r.per_sample.iter().zip(&losses) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn batch_of_copies_has_the_single_sample_gradient() {
    let samples = corpus(2, 4);
    let fe = Frontend::new(frontend_config());
    let mc = model_config();
    let params = ModelParams::<f64>::init(&mc, 5).unwrap();
    let s = &samples[0];
    let (xl, xa) = encode(&fe, s);
    let load = |_| {
        Ok(BatchItem {
            linguistic: xl.clone(),
            acoustic: xa.clone(),
            target: s.label.as_target(),
        })
    };
    let batch = batch_gradient(&params, &mc, 64, 1.0, load, |_| None).unwrap();
    let tr = forward(&params, &mc, &xl, &xa, None).unwrap();
    let single = backward(&params, &tr, bce_loss(tr.logit, s.label.as_target()).1).params;
    for ((name, a), (_, b)) in batch.grads.tensors().into_iter().zip(single.tensors()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn split_keeps_recordings_whole() {
    let samples = corpus(9, 6);
    let split = Split::by_recording(&samples, 0.3, 1).unwrap();
    assert!(!split.val_ids.is_empty());
    assert!(split.train_ids.iter().all(|id| !split.val_ids.contains(id)));
    let mut all: Vec<_> = split.train_ids.iter().chain(&split.val_ids).cloned().collect();
    all.sort();
    let mut ids: Vec<_> = samples.iter().map(|s| s.source_id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(all, ids);

    let one: Vec<_> = samples.iter().filter(|s| s.source_id == ids[0]).cloned().collect();
    assert!(Split::by_recording(&one, 0.3, 1).is_err());
}

#[test]
fn training_is_deterministic_and_follows_the_schedule() {
    let samples = corpus(6, 5);
    let fe = Frontend::new(frontend_config());
    let (mc, cfg) = (model_config(), train_config());
    let mut a = MemorySink::default();
    let mut b = MemorySink::default();
    let oa = train(&samples, &fe, &mc, &cfg, &mut a).unwrap();
    let ob = train(&samples, &fe, &mc, &cfg, &mut b).unwrap();
    assert_eq!(oa.final_checkpoint.to_bytes(), ob.final_checkpoint.to_bytes());
    assert_eq!(oa.best_checkpoint.to_bytes(), ob.best_checkpoint.to_bytes());
    assert_eq!(a.records, b.records);

    let steps: Vec<_> = a
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { step, lr, train_loss, .. } => Some((*step, *lr, *train_loss)),
            _ => None,
        })
        .collect();
    assert_eq!(steps.len(), oa.total_steps);
    assert_eq!(steps[0].1, cfg.lr_init);
    for (k, &(step, lr, loss)) in steps.iter().enumerate() {
        assert_eq!(step, k);
        assert_eq!(lr, cosine_lr(step, oa.total_steps, cfg.lr_init, cfg.lr_min));
        assert!(loss.is_finite());
    }
    let epochs = a.records.iter().filter(|r| matches!(r, LogRecord::Epoch { .. })).count();
    assert_eq!(epochs, cfg.epochs);
    assert!(a.checkpoints.iter().any(|(k, _)| *k == CheckpointKind::Final));
    assert!(a.checkpoints.iter().all(|(k, _)| *k != CheckpointKind::LastGood));
    assert_eq!(oa.final_checkpoint.frontend, frontend_config());
}

#[test]
fn different_seeds_give_different_models() {
    let samples = corpus(6, 5);
    let fe = Frontend::new(frontend_config());
    let mc = model_config();
    let mut cfg = train_config();
    cfg.epochs = 1;
    let a = train(&samples, &fe, &mc, &cfg, &mut MemorySink::default()).unwrap();
    cfg.seed += 1;
    let b = train(&samples, &fe, &mc, &cfg, &mut MemorySink::default()).unwrap();
    assert_ne!(a.final_checkpoint.to_bytes(), b.final_checkpoint.to_bytes());
}

/// Linguistic encoder whose output explodes after a number of calls.
struct Exploding {
    inner: ToyLinguisticEncoder,
    calls: AtomicUsize,
    after: usize,
}

impl Encoder for Exploding {
    fn spec(&self) -> &EncoderSpec {
        self.inner.spec()
    }

    fn encode(&self, input: &ChannelStream<'_>) -> Result<FeatureSequence, FrontendError> {
        let seq = self.inner.encode(input)?;
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.after {
            return Ok(seq);
        }
        FeatureSequence::new(seq.frames().mapv(|_| f32::MAX), seq.frame_rate_hz(), seq.encoder_name())
    }
}

#[test]
fn overflow_aborts_with_a_last_good_checkpoint() {
    let samples = corpus(6, 5);
    let fc = frontend_config();
    let fe = Frontend::with_encoders(
        Arc::new(Exploding {
            inner: ToyLinguisticEncoder::new(fc.linguistic_dim, fc.linguistic_seed),
            calls: AtomicUsize::new(0),
            after: 20,
        }),
        Arc::new(ToyAcousticEncoder::new(fc.acoustic_dim, fc.acoustic_seed)),
        fc,
    );
    let mut sink = MemorySink::default();
    let err = train(&samples, &fe, &model_config(), &train_config(), &mut sink).unwrap_err();
    assert!(
        matches!(
            err,
            TrainError::Model(_) | TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGradient(_)
        ),
        "{err}"
    );
    let (kind, ck) = sink.checkpoints.last().expect("a checkpoint before aborting");
    assert_eq!(*kind, CheckpointKind::LastGood);
    assert!(ck.params.is_finite());
    // Two full batches ran before the encoder blew up.
    let steps = sink.records.iter().filter(|r| matches!(r, LogRecord::Step { .. })).count();
    assert_eq!(steps, 2);
    assert_eq!(ck.meta["step"], 2);
}

#[test]
fn bad_config_is_rejected_before_training() {
    let samples = corpus(3, 5);
    let fe = Frontend::new(frontend_config());
    let mut cfg = train_config();
    cfg.batch_size = 0;
    let mut sink = MemorySink::default();
    assert!(train(&samples, &fe, &model_config(), &cfg, &mut sink).is_err());
    assert!(sink.records.is_empty() && sink.checkpoints.is_empty());
}
