//! Toy end-to-end runs: train on the synthetic corpus, then score held-out
//! infilling and leak-and-override against the rule oracle.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Check;
use crate::cfm::sample_noise;
use crate::infer::{infill, infill_leaked};
use crate::model::{ModelConfig, VectorFieldModel};
use crate::sampler::{build_schedule, FlowSchedule, Solver, SwayCoefficient};
use crate::tensor::Tensor;
use crate::training::checkpoint::{decode, encode};
use crate::training::corpus::{Corpus, CorpusSpec};
use crate::training::{mask_with_ratio, InfillMask, StepReport, Trainer, TrainingConfig};

const S: &str = "e2e";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out strings scored per setting.
    pub cases: usize,
    /// Noise draws per case; symbol votes are pooled over them.
    pub runs: usize,
    pub nfe: usize,
    pub solver: Solver,
    pub sway: f64,
    pub cfg_alpha: f64,
    pub mask_ratio: f64,
    pub t_prime: f64,
    /// Fraction of a case's symbols that must decode correctly for a
    /// leak-and-override case to count as following the target.
    pub leak_slot_accuracy: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cases: 40,
            runs: 3,
            nfe: 32,
            solver: Solver::Euler,
            sway: -1.0,
            cfg_alpha: 2.0,
            mask_ratio: 0.7,
            t_prime: 0.1,
            leak_slot_accuracy: 0.9,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct E2eConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for E2eConfig {
    fn default() -> Self {
        E2eConfig {
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            model_seed: 1,
            // the longer end of the allowed budget; ~10 min on one core
            training: TrainingConfig {
                total_updates: 8000,
                ..TrainingConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// Mean loss of the first 20 updates.
    pub initial_loss: f64,
    /// Mean loss of the last 100 updates.
    pub final_loss: f64,
    pub max_clipped_norm: f64,
    pub seconds: f64,
}

/// Generates the corpus and trains the configured model from scratch.
pub fn train(
    config: &E2eConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<(Corpus, Trainer<f32>, TrainSummary), String> {
    let started = Instant::now();
    let corpus = Corpus::generate(&config.corpus, &mut ChaCha8Rng::seed_from_u64(config.corpus.seed))
        .map_err(|e| e.to_string())?;
    let model = VectorFieldModel::<f32>::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(config.model_seed))
        .map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, config.training.clone()).map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    let mut max_clipped: f64 = 0.0;
    trainer
        .fit(&corpus, config.training.total_updates, |_, r| {
            losses.push(r.loss);
            max_clipped = max_clipped.max(r.clipped_norm);
            on_step(r);
        })
        .map_err(|e| e.to_string())?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let summary = TrainSummary {
        initial_loss: mean(&losses[..losses.len().min(20)]),
        final_loss: mean(&losses[losses.len().saturating_sub(100)..]),
        max_clipped_norm: max_clipped,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((corpus, trainer, summary))
}

/// Random strings over the corpus alphabet that never occur in the corpus.
pub fn held_out_texts(corpus: &Corpus, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let seen: HashSet<&str> = corpus.utterances.iter().map(|u| u.text.as_str()).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let text = corpus.rule.random_text(rng);
        if !seen.contains(text.as_str()) && !out.contains(&text) {
            out.push(text);
        }
    }
    out
}

/// Majority template over the pooled frames of every character slot.
fn pooled_decode(corpus: &Corpus, outputs: &[Tensor<f32>], text: &str) -> Vec<char> {
    let symbols: Vec<char> = corpus.rule.spec.symbols.chars().collect();
    let nearest: Vec<Vec<usize>> = outputs.iter().map(|o| corpus.rule.nearest_templates(o)).collect();
    corpus
        .rule
        .alignment(text)
        .expect("text over the corpus alphabet")
        .into_iter()
        .map(|(s, e)| {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for run in &nearest {
                for &k in &run[s..e] {
                    *votes.entry(k).or_default() += 1;
                }
            }
            let best = votes
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(k, _)| *k)
                .expect("slot has frames");
            symbols[best]
        })
        .collect()
}

/// One held-out infilling case: the text, its noisy features, the span to
/// reconstruct and one noise draw per run.
pub struct InfillCase {
    pub text: String,
    pub x1: Tensor<f32>,
    pub mask: InfillMask,
    pub noise: Vec<Tensor<f32>>,
}

pub fn infill_cases(corpus: &Corpus, eval: &EvalConfig) -> Vec<InfillCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval.seed);
    let f = corpus.rule.spec.feat_dim;
    held_out_texts(corpus, eval.cases, &mut rng)
        .into_iter()
        .map(|text| {
            let x1: Tensor<f32> = corpus.rule.render_noisy(&text, &mut rng).expect("valid text").cast();
            let len = x1.shape()[0];
            let mask = mask_with_ratio(len, eval.mask_ratio, &mut rng);
            let noise = (0..eval.runs).map(|_| sample_noise(&[len, f], &mut rng)).collect();
            InfillCase { text, x1, mask, noise }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfillScore {
    /// Masked-region squared error per element against the clean rendering.
    pub mse: f64,
    pub recovered: usize,
    /// Symbols whose slot lies entirely inside the mask.
    pub symbols: usize,
    pub evaluations: usize,
}

impl InfillScore {
    pub fn recovery(&self) -> f64 {
        self.recovered as f64 / self.symbols.max(1) as f64
    }
}

pub fn schedule(eval: &EvalConfig, sway: f64) -> Result<FlowSchedule, String> {
    let s = SwayCoefficient::new(sway).map_err(|e| e.to_string())?;
    build_schedule(eval.nfe, s, eval.solver, eval.cfg_alpha).map_err(|e| e.to_string())
}

pub fn score_infill(
    model: &VectorFieldModel<f32>,
    corpus: &Corpus,
    cases: &[InfillCase],
    schedule: &FlowSchedule,
) -> Result<InfillScore, String> {
    let f = corpus.rule.spec.feat_dim;
    let (mut sse, mut count, mut recovered, mut symbols, mut evaluations) = (0.0, 0usize, 0, 0, 0);
    for case in cases {
        let clean = corpus.rule.render(&case.text).map_err(|e| e.to_string())?;
        let len = case.x1.shape()[0];
        let z = corpus.extended(&case.text, len).map_err(|e| e.to_string())?;
        let cond = case.mask.hide(&case.x1);
        let mut outputs = Vec::new();
        for x0 in &case.noise {
            let out = infill(model, &cond, &z, x0, schedule).map_err(|e| e.to_string())?;
            evaluations += out.evaluations.total();
            for i in case.mask.start..case.mask.end {
                for c in 0..f {
                    let d = out.output.data()[i * f + c] as f64 - clean.data()[i * f + c];
                    sse += d * d;
                }
                count += f;
            }
            outputs.push(out.output);
        }
        let decoded = pooled_decode(corpus, &outputs, &case.text);
        let spans = corpus.rule.alignment(&case.text).map_err(|e| e.to_string())?;
        for ((got, want), (s, e)) in decoded.into_iter().zip(case.text.chars()).zip(spans) {
            if s >= case.mask.start && e <= case.mask.end {
                symbols += 1;
                recovered += usize::from(got == want);
            }
        }
    }
    Ok(InfillScore {
        mse: sse / count.max(1) as f64,
        recovered,
        symbols,
        evaluations,
    })
}

/// An audio prompt, a target text of the same frame length, and the noise
/// for prompt plus generation.
pub struct LeakCase {
    /// Transcript of the prompt; its features are also what leaks.
    pub prompt: String,
    pub target: String,
    pub x_prompt: Tensor<f32>,
    pub noise: Tensor<f32>,
}

impl LeakCase {
    pub fn prompt_frames(&self) -> usize {
        self.x_prompt.shape()[0]
    }

    /// Visible prompt followed by the zeroed span to generate.
    pub fn cond(&self) -> Tensor<f32> {
        let mut data = self.x_prompt.data().to_vec();
        data.resize(2 * data.len(), 0.0);
        Tensor::new([2 * self.prompt_frames(), self.x_prompt.shape()[1]], data).expect("shape")
    }

    /// The prompt features duplicated over both halves.
    pub fn leak(&self) -> Tensor<f32> {
        let mut data = self.x_prompt.data().to_vec();
        data.extend_from_within(..);
        Tensor::new([2 * self.prompt_frames(), self.x_prompt.shape()[1]], data).expect("shape")
    }
}

/// Held-out prompts of at most half the corpus character limit, so prompt
/// plus generation stays within training lengths. The target is a
/// reordering of the prompt: same frame count, different symbols in most
/// slots.
pub fn leak_cases(corpus: &Corpus, eval: &EvalConfig) -> Vec<LeakCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval.seed ^ 0x6c65_616b);
    let limit = (corpus.rule.spec.max_chars / 2).max(corpus.rule.spec.min_chars);
    let mut out = Vec::with_capacity(eval.cases);
    while out.len() < eval.cases {
        let prompt = held_out_texts(corpus, 1, &mut rng).remove(0);
        let mut chars: Vec<char> = prompt.chars().collect();
        if chars.len() > limit {
            continue;
        }
        let mut target = prompt.clone();
        for _ in 0..16 {
            chars.shuffle(&mut rng);
            target = chars.iter().collect();
            if target != prompt {
                break;
            }
        }
        if target == prompt {
            continue;
        }
        let x_prompt: Tensor<f32> = corpus.rule.render_noisy(&prompt, &mut rng).expect("valid text").cast();
        let noise = sample_noise(&[2 * x_prompt.shape()[0], x_prompt.shape()[1]], &mut rng);
        out.push(LeakCase {
            prompt,
            target,
            x_prompt,
            noise,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakScore {
    pub follows_target: usize,
    pub follows_leak: usize,
    pub cases: usize,
    /// Mean fraction of target symbols decoded, over cases.
    pub slot_accuracy: f64,
}

impl LeakScore {
    pub fn success_rate(&self) -> f64 {
        self.follows_target as f64 / self.cases.max(1) as f64
    }
}

/// Generates the target after the visible prompt, starting from a state
/// that leaks the prompt's features into the generated span.
pub fn score_leak(
    model: &VectorFieldModel<f32>,
    corpus: &Corpus,
    cases: &[LeakCase],
    schedule: &FlowSchedule,
    t_prime: f64,
    slot_accuracy: f64,
) -> Result<LeakScore, String> {
    let (mut follows_target, mut follows_leak, mut acc) = (0, 0, 0.0);
    for case in cases {
        let offset = case.prompt_frames();
        let text = format!("{}{}", case.prompt, case.target);
        let z = corpus.extended(&text, 2 * offset).map_err(|e| e.to_string())?;
        let out = infill_leaked(model, &case.cond(), &z, &case.noise, &case.leak(), t_prime, schedule)
            .map_err(|e| e.to_string())?;
        let agree = |reference: &str| -> Result<f64, String> {
            let decoded = corpus
                .rule
                .decode_slots(&out.output, reference, offset)
                .map_err(|e| e.to_string())?;
            let hits = decoded.iter().zip(reference.chars()).filter(|(a, b)| **a == *b).count();
            Ok(hits as f64 / decoded.len() as f64)
        };
        let (t, l) = (agree(&case.target)?, agree(&case.prompt)?);
        acc += t;
        follows_target += usize::from(t >= slot_accuracy);
        follows_leak += usize::from(l >= slot_accuracy);
    }
    Ok(LeakScore {
        follows_target,
        follows_leak,
        cases: cases.len(),
        slot_accuracy: acc / cases.len().max(1) as f64,
    })
}

pub struct E2eReport {
    pub checks: Vec<Check>,
    pub summary: Option<TrainSummary>,
    pub trainer: Option<Trainer<f32>>,
    pub corpus: Option<Corpus>,
}

/// Noise floor of the corpus: the per-element variance of its additive noise.
pub fn noise_floor(spec: &CorpusSpec) -> f64 {
    spec.noise_sigma * spec.noise_sigma
}

/// Scores a trained model: infilling quality, the sway ablation and leak-and-override.
pub fn evaluate(model: &VectorFieldModel<f32>, corpus: &Corpus, eval: &EvalConfig) -> Result<Vec<Check>, String> {
    let mut out = Vec::new();
    let cases = infill_cases(corpus, eval);
    let featured = score_infill(model, corpus, &cases, &schedule(eval, eval.sway)?)?;
    let uniform = score_infill(model, corpus, &cases, &schedule(eval, 0.0)?)?;
    let floor = noise_floor(&corpus.rule.spec);
    out.push(Check::below(S, "infill_masked_mse", featured.mse, 3.0 * floor));
    out.push(Check::at_least(S, "infill_symbol_recovery", featured.recovery(), 0.9));
    out.push(Check::new(
        S,
        "infill_recovery_sway_minus1_vs_0",
        featured.recovery() - uniform.recovery(),
        format!(">=0 (s=0 recovery {:.4})", uniform.recovery()),
        featured.recovery() >= uniform.recovery(),
    ));

    let leaks = leak_cases(corpus, eval);
    let leak_featured = score_leak(
        model,
        corpus,
        &leaks,
        &schedule(eval, eval.sway)?,
        eval.t_prime,
        eval.leak_slot_accuracy,
    )?;
    let leak_uniform = score_leak(
        model,
        corpus,
        &leaks,
        &schedule(eval, 0.0)?,
        eval.t_prime,
        eval.leak_slot_accuracy,
    )?;
    out.push(Check::at_least(S, "leak_override_follows_target", leak_featured.success_rate(), 0.8));
    out.push(Check::new(
        S,
        "leak_override_sway_minus1_vs_0",
        leak_featured.success_rate() - leak_uniform.success_rate(),
        format!(">0 (s=0 rate {:.4})", leak_uniform.success_rate()),
        leak_featured.success_rate() > leak_uniform.success_rate(),
    ));
    Ok(out)
}

/// Trains from scratch, then evaluates.
pub fn run(config: &E2eConfig, on_step: impl FnMut(&StepReport)) -> E2eReport {
    let (corpus, trainer, summary) = match train(config, on_step) {
        Ok(x) => x,
        Err(e) => {
            return E2eReport {
                checks: vec![Check::new(S, format!("training: {e}"), f64::NAN, "completes", false)],
                summary: None,
                trainer: None,
                corpus: None,
            }
        }
    };
    let mut checks = vec![
        Check::below(S, "train_seconds", summary.seconds, 1200.0),
        Check::below(S, "final_over_initial_loss", summary.final_loss / summary.initial_loss, 0.1),
        Check::at_most(S, "max_post_clip_norm", summary.max_clipped_norm, config.training.grad_clip_norm + 1e-6),
    ];
    match evaluate(&trainer.ema_model(), &corpus, &config.eval) {
        Ok(c) => checks.extend(c),
        Err(e) => checks.push(Check::new(S, format!("evaluation: {e}"), f64::NAN, "completes", false)),
    }
    E2eReport {
        checks,
        summary: Some(summary),
        trainer: Some(trainer),
        corpus: Some(corpus),
    }
}

/// A small corpus, model and training config for the persistence checks.
fn small_setup(seed: u64) -> (CorpusSpec, ModelConfig, TrainingConfig) {
    let spec = CorpusSpec {
        count: 24,
        seed,
        ..Default::default()
    };
    let model = ModelConfig {
        dit_layers: 1,
        dit_dim: 16,
        heads: 2,
        convnext_layers: 1,
        convnext_dim: 8,
        ..Default::default()
    };
    let training = TrainingConfig {
        batch_size: 4,
        warmup_updates: 2,
        total_updates: 50,
        seed,
        ..Default::default()
    };
    (spec, model, training)
}

/// Byte-identical corpora, checkpoint round trip with an identical next
/// loss, and reproducible inference.
pub fn persistence_checks(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let (spec, model_config, training) = small_setup(seed);

    let corpus_bytes = |dir: &std::path::Path| -> std::io::Result<Vec<(String, Vec<u8>)>> {
        let corpus = Corpus::generate(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        corpus.save(dir, false).map_err(|e| std::io::Error::other(e.to_string()))?;
        let mut files = Vec::new();
        for entry in walk(dir)? {
            let rel = entry.strip_prefix(dir).expect("under dir").to_string_lossy().into_owned();
            files.push((rel, std::fs::read(&entry)?));
        }
        files.sort();
        Ok(files)
    };
    let same = (|| -> std::io::Result<bool> {
        let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
        Ok(corpus_bytes(a.path())? == corpus_bytes(b.path())?)
    })();
    out.push(Check::holds("identities", "corpus_byte_identical", same.unwrap_or(false)));

    let round_trip = (|| -> Result<(f64, f64, bool), String> {
        let corpus = Corpus::generate(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)).map_err(|e| e.to_string())?;
        let model = VectorFieldModel::<f32>::new(model_config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))
            .map_err(|e| e.to_string())?;
        let mut a = Trainer::new(model, training.clone()).map_err(|e| e.to_string())?;
        a.fit(&corpus, 3, |_, _| {}).map_err(|e| e.to_string())?;
        let bytes = encode(&a).map_err(|e| e.to_string())?;
        let mut b: Trainer<f32> = decode(&bytes).map_err(|e| e.to_string())?;
        let reencoded = encode(&b).map_err(|e| e.to_string())? == bytes;
        let (mut la, mut lb) = (0.0, 0.0);
        a.fit(&corpus, 5, |_, r| la = r.loss).map_err(|e| e.to_string())?;
        b.fit(&corpus, 5, |_, r| lb = r.loss).map_err(|e| e.to_string())?;
        Ok((la, lb, reencoded))
    })();
    match round_trip {
        Ok((la, lb, reencoded)) => {
            out.push(Check::new(
                "identities",
                "checkpoint_next_loss_identical",
                (la - lb).abs(),
                "==0 bitwise",
                la.to_bits() == lb.to_bits(),
            ));
            out.push(Check::holds("identities", "checkpoint_reencode_identical", reencoded));
        }
        Err(e) => out.push(Check::new("identities", format!("checkpoint: {e}"), f64::NAN, "==0", false)),
    }

    let reproducible = (|| -> Result<bool, String> {
        let corpus = Corpus::generate(&spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)).map_err(|e| e.to_string())?;
        let model = VectorFieldModel::<f32>::new(model_config.clone(), &mut ChaCha8Rng::seed_from_u64(seed ^ 1))
            .map_err(|e| e.to_string())?;
        let eval = EvalConfig {
            cases: 2,
            runs: 1,
            nfe: 8,
            ..Default::default()
        };
        let sched = schedule(&eval, -1.0)?;
        let run = || -> Result<Vec<Tensor<f32>>, String> {
            infill_cases(&corpus, &eval)
                .iter()
                .map(|c| {
                    let z = corpus.extended(&c.text, c.x1.shape()[0]).map_err(|e| e.to_string())?;
                    infill(&model, &c.mask.hide(&c.x1), &z, &c.noise[0], &sched)
                        .map(|o| o.output)
                        .map_err(|e| e.to_string())
                })
                .collect()
        };
        let (a, b) = (run()?, run()?);
        Ok(a.iter().zip(&b).all(|(x, y)| x.bits_eq(y)))
    })();
    out.push(Check::holds("identities", "inference_reproducible", reproducible.unwrap_or(false)));
    out
}

fn walk(dir: &std::path::Path) -> std::io::Result<Vec<std::path::PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            files.extend(walk(&path)?);
        } else {
            files.push(path);
        }
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn held_out_texts_avoid_corpus() {
        let spec = CorpusSpec {
            count: 50,
            ..Default::default()
        };
        let corpus = Corpus::generate(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let texts = held_out_texts(&corpus, 30, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(texts.len(), 30);
        for t in &texts {
            assert!(corpus.utterances.iter().all(|u| &u.text != t));
        }
    }

    #[test]
    fn leak_cases_share_length_and_differ() {
        let corpus = Corpus::generate(&CorpusSpec { count: 10, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cases = leak_cases(&corpus, &EvalConfig { cases: 12, ..Default::default() });
        assert_eq!(cases.len(), 12);
        for c in &cases {
            assert_ne!(c.target, c.prompt);
            assert!(c.prompt.chars().count() <= 5);
            let n = c.prompt_frames();
            assert_eq!(corpus.rule.frames(&c.target).unwrap(), n);
            assert_eq!(c.noise.shape(), &[2 * n, 8]);
            let (cond, leak) = (c.cond(), c.leak());
            assert_eq!(&cond.data()[..n * 8], c.x_prompt.data());
            assert!(cond.data()[n * 8..].iter().all(|&v| v == 0.0));
            assert_eq!(&leak.data()[n * 8..], c.x_prompt.data());
        }
    }

    #[test]
    fn clean_rendering_decodes_exactly() {
        let corpus = Corpus::generate(&CorpusSpec { count: 10, ..Default::default() }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let eval = EvalConfig { cases: 3, runs: 2, ..Default::default() };
        let cases = infill_cases(&corpus, &eval);
        for c in &cases {
            let clean: Tensor<f32> = corpus.rule.render(&c.text).unwrap().cast();
            let decoded = pooled_decode(&corpus, &[clean.clone(), clean], &c.text);
            assert_eq!(decoded.into_iter().collect::<String>(), c.text);
        }
    }

    #[test]
    fn persistence_checks_pass() {
        for c in persistence_checks(3) {
            assert!(c.passed, "{c}");
        }
    }
}
