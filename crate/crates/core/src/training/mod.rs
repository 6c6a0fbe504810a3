//! Infilling training: span masks, staged condition dropout, AdamW with a
//! warmup/decay schedule and global-norm clipping, and EMA weights.

pub mod checkpoint;
pub mod corpus;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfm::{masked_sse, sample_noise, sample_training_step, CfmError};
use crate::model::{drop_conditions, Binder, CondDrop, ModelError, ParamStore, VectorFieldModel};
use crate::tensor::{Graph, Real, Tensor, TensorError};
use crate::text::ExtendedSequence;
use corpus::Corpus;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cfm(#[from] CfmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at update {step} (lr {lr:e}, grad norm {grad_norm})")]
    NonFinite { step: u64, loss: f64, lr: f64, grad_norm: f64 },
    #[error("batch has no masked frames")]
    EmptyBatch,
    #[error("parameter sets are not congruent")]
    Incongruent,
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub peak_lr: f64,
    pub warmup_updates: u64,
    pub total_updates: u64,
    /// Sequences per update.
    pub batch_size: usize,
    pub mask_ratio_range: [f64; 2],
    pub cfg_drop_audio: f64,
    pub cfg_drop_both: f64,
    pub grad_clip_norm: f64,
    pub ema_decay: f64,
    /// Ramp the EMA decay as `min(decay, (1 + k) / (10 + k))` over the first updates.
    pub ema_warmup: bool,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            peak_lr: 1e-3,
            warmup_updates: 200,
            total_updates: 3000,
            batch_size: 16,
            mask_ratio_range: [0.7, 1.0],
            cfg_drop_audio: 0.3,
            cfg_drop_both: 0.2,
            grad_clip_norm: 1.0,
            ema_decay: 0.999,
            ema_warmup: true,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, p) in [("cfg_drop_audio", self.cfg_drop_audio), ("cfg_drop_both", self.cfg_drop_both)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        let [lo, hi] = self.mask_ratio_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("mask_ratio_range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.warmup_updates > self.total_updates {
            return bad("warmup_updates exceeds total_updates".into());
        }
        if !(self.peak_lr >= 0.0) || !(self.grad_clip_norm > 0.0) || !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("peak_lr, grad_clip_norm or ema_decay out of range".into());
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("optimizer hyperparameters out of range".into());
        }
        Ok(())
    }

    /// Piecewise-linear schedule: 0 at update 0, `peak_lr` at the end of
    /// warmup, 0 at `total_updates` and beyond.
    pub fn lr_at(&self, k: u64) -> f64 {
        let (w, n) = (self.warmup_updates, self.total_updates);
        if k >= n {
            0.0
        } else if k < w {
            self.peak_lr * k as f64 / w as f64
        } else {
            self.peak_lr * (n - k) as f64 / (n - w) as f64
        }
    }
}

/// One contiguous span `[start, end)` of frames to reconstruct.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InfillMask {
    pub len: usize,
    pub start: usize,
    pub end: usize,
}

impl InfillMask {
    pub fn new(len: usize, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= len);
        InfillMask { len, start, end }
    }

    pub fn count(&self) -> usize {
        self.end - self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }

    /// 1 inside the span, 0 elsewhere.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([self.len], |i| if self.contains(i) { T::one() } else { T::zero() })
    }

    /// `(1 - m) * x1`: the visible context.
    pub fn hide<T: Real>(&self, x1: &Tensor<T>) -> Tensor<T> {
        let f = x1.shape()[1];
        Tensor::from_fn(x1.shape().to_vec(), |i| {
            if self.contains(i / f) {
                T::zero()
            } else {
                x1.data()[i]
            }
        })
    }
}

/// Span of `round(r * len)` frames, `r ~ U[lo, hi]`, at a uniform offset.
pub fn make_infilling_mask<R: Rng + ?Sized>(len: usize, ratio_range: [f64; 2], rng: &mut R) -> InfillMask {
    let [lo, hi] = ratio_range;
    let r = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    mask_with_ratio(len, r, rng)
}

pub fn mask_with_ratio<R: Rng + ?Sized>(len: usize, r: f64, rng: &mut R) -> InfillMask {
    let span = ((r * len as f64).round() as usize).min(len);
    let start = rng.gen_range(0..=len - span);
    InfillMask::new(len, start, start + span)
}

/// Stage one drops the audio condition with `p_audio`; survivors then drop
/// audio and text together with `p_both`.
pub fn sample_cond_drop<R: Rng + ?Sized>(p_audio: f64, p_both: f64, rng: &mut R) -> CondDrop {
    if rng.gen::<f64>() < p_audio {
        CondDrop::DropAudio
    } else if rng.gen::<f64>() < p_both {
        CondDrop::DropAudioAndText
    } else {
        CondDrop::Keep
    }
}

/// Global L2 norm over a gradient set.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the norm
/// before clipping. Gradients within the bound are left untouched.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let c = T::of(max_norm / (norm + 1e-12));
        for g in grads.iter_mut() {
            *g = g.scale(c);
        }
    }
    norm
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: &TrainingConfig) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        AdamW {
            beta1: config.betas[0],
            beta2: config.betas[1],
            eps: config.eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TrainError::Incongruent);
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = T::of(lr * self.weight_decay);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(TrainError::Incongruent);
            }
            let m = self.m[i].zip_with(g, "adamw", |m, g| b1t * m + (T::one() - b1t) * g)?;
            let v = self.v[i].zip_with(g, "adamw", |v, g| b2t * v + (T::one() - b2t) * g * g)?;
            let data: Vec<T> = p
                .data()
                .iter()
                .zip(m.data().iter().zip(v.data()))
                .map(|(&w, (&m, &v))| w - decay * w - step_size * m / (v.sqrt() / bc2_sqrt + eps))
                .collect();
            *p = Tensor::new(p.shape().to_vec(), data)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`, per tensor.
pub fn ema_update<T: Real>(shadow: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<()> {
    if !shadow.congruent(params) {
        return Err(TrainError::Incongruent);
    }
    let (a, b) = (T::of(decay), T::of(1.0 - decay));
    for (s, p) in shadow.values_mut().iter_mut().zip(params.values()) {
        *s = s.zip_with(p, "ema", |s, p| a * s + b * p)?;
    }
    Ok(())
}

/// One training example: clean features `[len, F]`, the padded text and the
/// span to reconstruct.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub x1: Tensor<T>,
    pub z: ExtendedSequence,
    pub mask: InfillMask,
}

#[derive(Clone, Debug)]
pub struct TrainingBatch<T> {
    pub examples: Vec<Example<T>>,
}

impl<T: Real> TrainingBatch<T> {
    pub fn masked_elements(&self) -> usize {
        self.examples
            .iter()
            .map(|e| e.mask.count() * e.x1.shape()[1])
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub update: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub drops: [usize; 3],
}

/// Masked loss and parameter gradients for a batch; the loss is the masked
/// squared error summed over the batch divided by the total masked count.
/// Returns `(loss, grads, drop counts)`.
pub fn batch_gradients<T: Real>(
    model: &VectorFieldModel<T>,
    batch: &TrainingBatch<T>,
    config: &TrainingConfig,
    rng: &mut dyn RngCore,
) -> Result<(f64, Vec<Tensor<T>>, [usize; 3])> {
    let total = batch.masked_elements();
    if total == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let norm = 1.0 / total as f64;
    let mut grads: Vec<Tensor<T>> = model
        .params()
        .values()
        .iter()
        .map(|p| Tensor::zeros(p.shape().to_vec()))
        .collect();
    let mut loss = 0.0;
    let mut drops = [0usize; 3];
    for ex in &batch.examples {
        let t = sample_training_step(rng).value();
        let x0: Tensor<T> = sample_noise(ex.x1.shape(), rng);
        let noisy = x0.scale(T::of(1.0 - t)).axpy(T::of(t), &ex.x1)?;
        let target = ex.x1.sub(&x0)?;
        let mode = sample_cond_drop(config.cfg_drop_audio, config.cfg_drop_both, rng);
        drops[mode as usize] += 1;
        let (cond, z) = drop_conditions(&ex.mask.hide(&ex.x1), &ex.z, mode);
        let g = Graph::new();
        let b = Binder::new(&g, model.params(), true);
        let n = g.constant(noisy);
        let c = g.constant(cond);
        let v = model.forward(&b, n, c, &z, t, Some(rng))?;
        let (sse, _) = masked_sse(&g, v, &target, Some(&ex.mask.to_tensor()))?;
        let scaled = g.mul_scalar(sse, norm)?;
        loss += g.value(scaled).item()?.as_f64();
        let bound = b.finish();
        let mut gs = g.backward(scaled)?;
        for (acc, gi) in grads.iter_mut().zip(bound.gradients(model.params(), &mut gs)) {
            *acc = acc.add(&gi)?;
        }
    }
    Ok((loss, grads, drops))
}

/// `batch_size` utterances drawn with replacement, each with a fresh span mask.
pub fn sample_batch<T: Real, R: Rng + ?Sized>(
    corpus: &Corpus,
    batch_size: usize,
    ratio_range: [f64; 2],
    rng: &mut R,
) -> Result<TrainingBatch<T>> {
    if corpus.utterances.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let examples = (0..batch_size)
        .map(|_| {
            let u = &corpus.utterances[rng.gen_range(0..corpus.utterances.len())];
            let len = u.frames();
            let z = corpus
                .extended(&u.text, len)
                .map_err(|e| TrainError::Config(format!("utterance {}: {e}", u.id)))?;
            Ok(Example {
                x1: u.features.cast(),
                z,
                mask: make_infilling_mask(len, ratio_range, rng),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TrainingBatch { examples })
}

/// Model, EMA shadow, optimizer state and the rng that drives sampling,
/// owned together so that a checkpoint captures everything.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub config: TrainingConfig,
    pub model: VectorFieldModel<T>,
    pub ema: ParamStore<T>,
    pub opt: AdamW<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: VectorFieldModel<T>, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(model.params(), &config);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
        Ok(Trainer {
            ema: model.params().clone(),
            opt,
            rng,
            model,
            config,
        })
    }

    /// Updates applied so far.
    pub fn updates(&self) -> u64 {
        self.opt.step
    }

    pub fn ema_model(&self) -> VectorFieldModel<T> {
        self.model.with_params(self.ema.clone()).expect("ema is congruent")
    }

    fn ema_decay(&self, k: u64) -> f64 {
        if self.config.ema_warmup {
            self.config.ema_decay.min((1.0 + k as f64) / (10.0 + k as f64))
        } else {
            self.config.ema_decay
        }
    }

    pub fn next_batch(&mut self, corpus: &Corpus) -> Result<TrainingBatch<T>> {
        sample_batch(corpus, self.config.batch_size, self.config.mask_ratio_range, &mut self.rng)
    }

    /// Trains until `updates()` reaches `until`, calling `on_step` after
    /// every update.
    pub fn fit(&mut self, corpus: &Corpus, until: u64, mut on_step: impl FnMut(&Self, &StepReport)) -> Result<()> {
        while self.updates() < until {
            let batch = self.next_batch(corpus)?;
            let report = self.train_step(&batch)?;
            on_step(self, &report);
        }
        Ok(())
    }

    /// Forward, backward, clip, AdamW at `lr(k)` for update `k`, then EMA.
    pub fn train_step(&mut self, batch: &TrainingBatch<T>) -> Result<StepReport> {
        let k = self.opt.step;
        let lr = self.config.lr_at(k);
        let (loss, mut grads, drops) = batch_gradients(&self.model, batch, &self.config, &mut self.rng)?;
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                step: k,
                loss,
                lr,
                grad_norm,
            });
        }
        let clipped_norm = global_norm(&grads);
        self.opt.update(self.model.params_mut(), &grads, lr)?;
        let decay = self.ema_decay(k);
        ema_update(&mut self.ema, self.model.params(), decay)?;
        Ok(StepReport {
            update: k,
            loss,
            lr,
            grad_norm,
            clipped_norm,
            drops,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::pad_to_length;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            feat_dim: 4,
            capacity: 32,
            dit_layers: 1,
            dit_dim: 8,
            heads: 2,
            ffn_mult: 2,
            convnext_layers: 1,
            convnext_dim: 4,
            convnext_ffn_mult: 2,
            convnext_kernel: 3,
            conv_pos_kernel: 5,
            vocab_size: 5,
            rope_base: 10000.0,
            dropout: 0.0,
        }
    }

    fn batch(r: &mut ChaCha8Rng, n: usize) -> TrainingBatch<f64> {
        let examples = (0..n)
            .map(|_| {
                let len = r.gen_range(4..10);
                Example {
                    x1: sample_noise(&[len, 4], r),
                    z: pad_to_length(&[1, 2, 3], len).unwrap(),
                    mask: make_infilling_mask(len, [0.7, 1.0], r),
                }
            })
            .collect();
        TrainingBatch { examples }
    }

    #[test]
    fn mask_examples() {
        let mut r = rng(1);
        let m = mask_with_ratio(10, 0.7, &mut r);
        assert_eq!(m.count(), 7);
        let t: Tensor<f64> = m.to_tensor();
        assert_eq!(t.sum(), 7.0);
        assert_eq!(mask_with_ratio(10, 1.0, &mut r), InfillMask::new(10, 0, 10));
        let x = Tensor::<f64>::ones([10, 2]);
        assert_eq!(m.hide(&x).sum(), 6.0);
    }

    #[test]
    fn mask_fraction_mean() {
        let mut r = rng(2);
        let n = 100_000;
        let total: usize = (0..n).map(|_| make_infilling_mask(100, [0.7, 1.0], &mut r).count()).sum();
        let mean = total as f64 / (100.0 * n as f64);
        assert!((mean - 0.85).abs() < 0.005, "{mean}");
    }

    #[test]
    fn staged_drop_frequencies() {
        let mut r = rng(3);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_cond_drop(0.3, 0.2, &mut r) as usize] += 1;
        }
        let audio = counts[CondDrop::DropAudio as usize] as f64 / n as f64;
        let both = counts[CondDrop::DropAudioAndText as usize] as f64 / n as f64;
        assert!((audio - 0.3).abs() < 0.01);
        assert!((both - 0.14).abs() < 0.01);
    }

    #[test]
    fn lr_schedule_points() {
        let c = TrainingConfig::default();
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(200), 1e-3);
        assert_eq!(c.lr_at(100), 5e-4);
        assert_eq!(c.lr_at(3000), 0.0);
        assert!((c.lr_at(1600) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_and_passthrough() {
        let mut r = rng(4);
        for _ in 0..200 {
            let scale = r.gen_range(0.01..10.0);
            let mut g: Vec<Tensor<f64>> = (0..3).map(|_| sample_noise::<f64, _>(&[5], &mut r).scale(scale)).collect();
            let before = g.clone();
            let pre = clip_grad_norm(&mut g, 1.0);
            assert!(global_norm(&g) <= 1.0 + 1e-6);
            if pre <= 1.0 {
                assert!(g.iter().zip(&before).all(|(a, b)| a.bits_eq(b)));
            }
        }
    }

    #[test]
    fn ema_cases() {
        let mut r = rng(5);
        let m = VectorFieldModel::<f64>::new(tiny(), &mut r).unwrap();
        let mut target = m.params().clone();
        for v in target.values_mut() {
            *v = v.map(|x| x + 1.0);
        }
        let mut s = m.params().clone();
        ema_update(&mut s, &target, 1.0).unwrap();
        assert_eq!(&s, m.params());
        ema_update(&mut s, &target, 0.0).unwrap();
        assert_eq!(s, target);
        // geometric convergence toward constant params
        let mut s = m.params().clone();
        let d = 0.9;
        for k in 1..=20 {
            ema_update(&mut s, &target, d).unwrap();
            for (a, b) in s.values().iter().zip(target.values()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!(((y - x) - d.powi(k)).abs() < 1e-12);
                }
            }
        }
        let other = VectorFieldModel::<f64>::new(ModelConfig { dit_layers: 2, ..tiny() }, &mut r).unwrap();
        assert!(ema_update(&mut s, other.params(), 0.5).is_err());
    }

    #[test]
    fn zero_lr_keeps_params_and_moves_ema() {
        let mut r = rng(6);
        let model = VectorFieldModel::<f64>::new(tiny(), &mut r).unwrap();
        let config = TrainingConfig {
            peak_lr: 0.0,
            ema_warmup: false,
            ema_decay: 0.5,
            ..Default::default()
        };
        let mut tr = Trainer::new(model, config).unwrap();
        tr.ema = tr.ema.clone();
        for v in tr.ema.values_mut() {
            *v = v.map(|x| x + 1.0);
        }
        let before = tr.model.params().clone();
        let ema_before = tr.ema.clone();
        let b = batch(&mut r, 3);
        let rep = tr.train_step(&b).unwrap();
        assert!(rep.loss.is_finite() && rep.loss > 0.0);
        assert_eq!(tr.model.params(), &before);
        for ((e, e0), p) in tr.ema.values().iter().zip(ema_before.values()).zip(before.values()) {
            let gap0 = e0.max_abs_diff(p).unwrap();
            let gap1 = e.max_abs_diff(p).unwrap();
            assert!(gap1 < gap0);
        }
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let mut r = rng(7);
        let model = VectorFieldModel::<f64>::new(tiny(), &mut r).unwrap();
        let config = TrainingConfig {
            peak_lr: 3e-3,
            warmup_updates: 5,
            total_updates: 200,
            cfg_drop_audio: 0.0,
            cfg_drop_both: 0.0,
            ..Default::default()
        };
        let mut tr = Trainer::new(model, config).unwrap();
        let b = batch(&mut r, 4);
        let first: f64 = (0..5).map(|_| tr.train_step(&b).unwrap().loss).sum::<f64>() / 5.0;
        for _ in 0..140 {
            tr.train_step(&b).unwrap();
        }
        let last: f64 = (0..5).map(|_| tr.train_step(&b).unwrap().loss).sum::<f64>() / 5.0;
        assert!(last < 0.7 * first, "{first} -> {last}");
        assert!(tr.ema.values() != tr.model.params().values());
    }

    #[test]
    fn adamw_first_step_is_sign_step() {
        let mut store = ParamStore::<f64>::default();
        store.add("w", Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let config = TrainingConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, &config);
        let g = vec![Tensor::new([2], vec![0.3, -2.0]).unwrap()];
        opt.update(&mut store, &g, 0.1).unwrap();
        let w = store.values()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
