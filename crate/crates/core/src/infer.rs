//! Infilling inference: wraps a trained model as a guided vector field and
//! integrates it from noise.

use rand::Rng;
use thiserror::Error;

use crate::cfm::sample_noise;
use crate::model::{drop_conditions, CondDrop, ModelError, VectorFieldModel};
use crate::sampler::{integrate, leak_and_override, Branch, FlowSchedule, Integration, SamplerError, VectorField};
use crate::tensor::{Real, Tensor, TensorError};
use crate::text::{estimate_duration, pad_to_length, tokenize, ExtendedSequence, TextError, Vocabulary};

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("duration {duration} is shorter than the {prompt} prompt frames")]
    DurationTooShort { duration: usize, prompt: usize },
    #[error("prompt features have {got} channels, model expects {expected}")]
    PromptChannels { got: usize, expected: usize },
}

pub type Result<T, E = InferError> = std::result::Result<T, E>;

/// The model conditioned on visible speech and text; the unconditional
/// branch drops both.
pub struct InfillField<'a, T: Real> {
    model: &'a VectorFieldModel<T>,
    cond: Tensor<T>,
    z: ExtendedSequence,
    null_cond: Tensor<T>,
    null_z: ExtendedSequence,
}

impl<'a, T: Real> InfillField<'a, T> {
    pub fn new(model: &'a VectorFieldModel<T>, cond: Tensor<T>, z: ExtendedSequence) -> Self {
        let (null_cond, null_z) = drop_conditions(&cond, &z, CondDrop::DropAudioAndText);
        InfillField {
            model,
            cond,
            z,
            null_cond,
            null_z,
        }
    }
}

impl<T: Real> VectorField<T> for InfillField<'_, T> {
    fn evaluate(&mut self, state: &Tensor<T>, t: f64, branch: Branch) -> Result<Tensor<T>, SamplerError> {
        let (cond, z) = match branch {
            Branch::Conditional => (&self.cond, &self.z),
            Branch::Unconditional => (&self.null_cond, &self.null_z),
        };
        self.model
            .predict(state, cond, z, t)
            .map_err(|e| SamplerError::Field(Box::new(e)))
    }
}

/// Integrates from `x0` with the visible context `cond = (1 - m) x1`.
pub fn infill<T: Real>(
    model: &VectorFieldModel<T>,
    cond: &Tensor<T>,
    z: &ExtendedSequence,
    x0: &Tensor<T>,
    schedule: &FlowSchedule,
) -> Result<Integration<T>> {
    let mut field = InfillField::new(model, cond.clone(), z.clone());
    Ok(integrate(&mut field, x0, schedule)?)
}

/// Leak-and-override variant of [`infill`].
pub fn infill_leaked<T: Real>(
    model: &VectorFieldModel<T>,
    cond: &Tensor<T>,
    z: &ExtendedSequence,
    x0: &Tensor<T>,
    x_leak: &Tensor<T>,
    t_prime: f64,
    schedule: &FlowSchedule,
) -> Result<Integration<T>> {
    let mut field = InfillField::new(model, cond.clone(), z.clone());
    Ok(leak_and_override(&mut field, x0, x_leak, t_prime, schedule)?)
}

#[derive(Clone, Debug)]
pub struct Generation<T> {
    /// Frames after the prompt.
    pub generated: Tensor<T>,
    pub total_frames: usize,
    pub prompt_frames: usize,
    pub evaluations: usize,
}

/// Continues `prompt` (features and their transcript) with `gen_text`. The
/// total length comes from the character-ratio estimate unless `duration`
/// is given; prompt frames are dropped from the output.
#[allow(clippy::too_many_arguments)]
pub fn generate<T: Real, R: Rng + ?Sized>(
    model: &VectorFieldModel<T>,
    vocab: &Vocabulary,
    prompt: &Tensor<T>,
    prompt_text: &str,
    gen_text: &str,
    duration: Option<usize>,
    schedule: &FlowSchedule,
    rng: &mut R,
) -> Result<Generation<T>> {
    let f = model.config().feat_dim;
    let prompt_frames = prompt.shape()[0];
    if prompt.shape()[1] != f {
        return Err(InferError::PromptChannels {
            got: prompt.shape()[1],
            expected: f,
        });
    }
    let total = match duration {
        Some(d) => d,
        None => estimate_duration(prompt_frames, prompt_text.chars().count(), gen_text.chars().count())?,
    };
    if total < prompt_frames {
        return Err(InferError::DurationTooShort {
            duration: total,
            prompt: prompt_frames,
        });
    }
    let ids = tokenize(&format!("{prompt_text}{gen_text}"), vocab)?;
    let z = pad_to_length(&ids, total)?;
    let mut cond = prompt.data().to_vec();
    cond.resize(total * f, T::zero());
    let cond = Tensor::new([total, f], cond)?;
    let x0 = sample_noise(&[total, f], rng);
    let out = infill(model, &cond, &z, &x0, schedule)?;
    let generated = Tensor::new(
        [total - prompt_frames, f],
        out.output.data()[prompt_frames * f..].to_vec(),
    )?;
    Ok(Generation {
        generated,
        total_frames: total,
        prompt_frames,
        evaluations: out.evaluations.total(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sampler::{build_schedule, nfe_count, Solver, SwayCoefficient};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (VectorFieldModel<f32>, Vocabulary) {
        let config = ModelConfig {
            dit_dim: 16,
            convnext_dim: 8,
            vocab_size: 4,
            ..Default::default()
        };
        let model = VectorFieldModel::new(config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (model, Vocabulary::new("abc".chars()).unwrap())
    }

    #[test]
    fn generation_drops_prompt_and_counts_evaluations() {
        let (model, vocab) = setup();
        let prompt = Tensor::<f32>::ones([6, 8]);
        for alpha in [0.0, 2.0] {
            let s = build_schedule(8, SwayCoefficient::new(-1.0).unwrap(), Solver::Euler, alpha).unwrap();
            let g = generate(&model, &vocab, &prompt, "ab", "cab", None, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert_eq!(g.total_frames, 6 + 9);
            assert_eq!(g.generated.shape(), &[9, 8]);
            assert_eq!(g.evaluations, nfe_count(&s));
        }
    }

    #[test]
    fn fixed_seed_reproduces() {
        let (model, vocab) = setup();
        let prompt = Tensor::<f32>::ones([4, 8]);
        let s = build_schedule(4, SwayCoefficient::uniform(), Solver::Midpoint, 2.0).unwrap();
        let run = |seed| {
            generate(&model, &vocab, &prompt, "a", "bc", Some(10), &s, &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap()
                .generated
        };
        assert!(run(3).bits_eq(&run(3)));
        let err = generate(&model, &vocab, &prompt, "a", "bcd", None, &s, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(InferError::Text(TextError::UnknownChar { ch: 'd', .. }))));
        let err = generate(&model, &vocab, &prompt, "a", "bc", Some(3), &s, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(InferError::DurationTooShort { .. })));
    }
}
