//! Library-level round trips through the public API.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowtts::features::{log_mel, read_features, read_wav, write_features, write_wav, MelConfig, Waveform};
use flowtts::infer::generate;
use flowtts::model::{ModelConfig, VectorFieldModel};
use flowtts::sampler::{build_schedule, nfe_count, Solver, SwayCoefficient};
use flowtts::tensor::Tensor;
use flowtts::training::checkpoint::{load_checkpoint, save_checkpoint};
use flowtts::training::corpus::{Corpus, CorpusSpec};
use flowtts::training::{Trainer, TrainingConfig};

fn small_model() -> ModelConfig {
    ModelConfig {
        dit_layers: 1,
        dit_dim: 16,
        heads: 2,
        convnext_layers: 1,
        convnext_dim: 8,
        ..Default::default()
    }
}

#[test]
fn corpus_train_checkpoint_generate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        count: 40,
        ..Default::default()
    };
    let corpus = Corpus::generate(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    corpus.save(&dir.path().join("corpus"), false).unwrap();
    let corpus = Corpus::load(&dir.path().join("corpus")).unwrap();
    assert_eq!(corpus.utterances.len(), 40);

    let model = VectorFieldModel::<f32>::new(small_model(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let config = TrainingConfig {
        batch_size: 4,
        warmup_updates: 5,
        total_updates: 40,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, config).unwrap();
    let mut losses = Vec::new();
    trainer.fit(&corpus, 40, |_, r| losses.push(r.loss)).unwrap();
    assert_eq!(trainer.updates(), 40);
    assert!(losses.iter().all(|l| l.is_finite() && *l > 0.0));
    let early: f64 = losses[..10].iter().sum();
    let late: f64 = losses[30..].iter().sum();
    assert!(late < early, "loss did not fall: {early} -> {late}");

    let path = dir.path().join("t.ckpt");
    save_checkpoint(&trainer, &path).unwrap();
    let restored: Trainer<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(restored.ema, trainer.ema);
    assert_ne!(restored.ema, *restored.model.params());

    let ema = restored.ema_model();
    let u = &corpus.utterances[0];
    let schedule = build_schedule(12, SwayCoefficient::new(-1.0).unwrap(), Solver::Midpoint, 2.0).unwrap();
    let g = generate(&ema, &corpus.vocab, &u.features, &u.text, "abc", None, &schedule, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap();
    assert_eq!(g.evaluations, nfe_count(&schedule));
    assert_eq!(g.generated.shape()[1], spec.feat_dim);
    assert!(g.generated.is_finite());
}

#[test]
fn wav_to_feature_dump() {
    let dir = tempfile::tempdir().unwrap();
    let rate = 24000;
    let samples: Vec<f64> = (0..rate as usize / 4)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / rate as f64).sin())
        .collect();
    let wav = dir.path().join("tone.wav");
    write_wav(&wav, &Waveform::new(samples, rate).unwrap()).unwrap();
    let w = read_wav(&wav).unwrap();
    assert_eq!(w.sample_rate(), rate);
    let mel = log_mel(&w, &MelConfig::default()).unwrap();
    assert_eq!(mel.n_mels(), 100);
    let f32s: Tensor<f32> = mel.frames.cast();
    let dump = dir.path().join("tone.f32");
    write_features(&dump, &f32s).unwrap();
    let back = read_features(&dump).unwrap();
    assert!(back.bits_eq(&f32s));
    // the loudest band of every interior frame holds 440 Hz
    let peak = |row: &[f32]| (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    let mid = peak(back.row(mel.n_frames() / 2));
    for r in 2..mel.n_frames() - 2 {
        assert_eq!(peak(back.row(r)), mid);
    }
}
