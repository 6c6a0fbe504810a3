//! Optimal-transport conditional flow matching: the straight-line probability
//! path between Gaussian noise and data, and the masked regression loss on its
//! constant velocity `x1 - x0`.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CfmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("flow step {0} outside [0, 1]")]
    InvalidStep(f64),
    #[error("mask selects no elements; the masked mean is undefined")]
    EmptyMask,
    #[error("mask must be binary, found {0}")]
    NonBinaryMask(f64),
}

/// Time coordinate of the flow, `0` = noise and `1` = data.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct FlowStep(f64);

impl FlowStep {
    pub fn new(t: f64) -> Result<Self, CfmError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(CfmError::InvalidStep(t));
        }
        Ok(FlowStep(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `(1 - t) * x0 + t * x1`
pub fn ot_interpolate<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, t: FlowStep) -> Result<Tensor<T>, CfmError> {
    let t = t.value();
    let (a, b) = (T::of(1.0 - t), T::of(t));
    Ok(x0.zip_with(x1, "ot_interpolate", |p, q| a * p + b * q)?)
}

/// One training tuple on the OT path.
#[derive(Clone, Debug)]
pub struct ProbePathSample<T> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: FlowStep,
    pub psi_t: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Real> ProbePathSample<T> {
    pub fn new(x0: Tensor<T>, x1: Tensor<T>, t: FlowStep) -> Result<Self, CfmError> {
        let psi_t = ot_interpolate(&x0, &x1, t)?;
        let target = x1.sub(&x0)?;
        Ok(ProbePathSample {
            x0,
            x1,
            t,
            psi_t,
            target,
        })
    }
}

/// Expands a temporal mask `[len]` over the trailing axes of `shape`, or
/// passes through a full-shape mask. Returns the mask and the number of
/// selected elements.
pub fn broadcast_mask<T: Real>(mask: &Tensor<T>, shape: &[usize]) -> Result<(Tensor<T>, usize), CfmError> {
    for &m in mask.data() {
        if m != T::zero() && m != T::one() {
            return Err(CfmError::NonBinaryMask(m.as_f64()));
        }
    }
    let full = if mask.shape() == shape {
        mask.clone()
    } else if mask.rank() == 1 && !shape.is_empty() && mask.shape()[0] == shape[0] {
        let inner: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(mask.numel() * inner);
        for &m in mask.data() {
            data.extend(std::iter::repeat(m).take(inner));
        }
        Tensor::new(shape.to_vec(), data)?
    } else {
        return Err(TensorError::ShapeMismatch {
            op: "cfm_loss mask",
            lhs: shape.to_vec(),
            rhs: mask.shape().to_vec(),
        }
        .into());
    };
    let count = full.data().iter().filter(|&&m| m == T::one()).count();
    Ok((full, count))
}

/// Sum of squared errors between `v_pred` and `target` over the masked
/// elements, together with the element count it averages over.
pub fn masked_sse<T: Real>(
    g: &Graph<T>,
    v_pred: Var,
    target: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<(Var, usize), CfmError> {
    let shape = g.shape(v_pred);
    if shape != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cfm_loss",
            lhs: shape,
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    let tv = g.constant(target.clone());
    let diff = g.sub(v_pred, tv)?;
    let sq = g.mul(diff, diff)?;
    match mask {
        None => Ok((g.sum(sq)?, target.numel())),
        Some(m) => {
            let (full, count) = broadcast_mask(m, &shape)?;
            let mv = g.constant(full);
            let masked = g.mul(sq, mv)?;
            Ok((g.sum(masked)?, count))
        }
    }
}

/// Mean squared error against the OT-CFM target, restricted to `mask == 1`
/// positions when a mask is given.
pub fn cfm_loss<T: Real>(
    g: &Graph<T>,
    v_pred: Var,
    target: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Var, CfmError> {
    let (sse, count) = masked_sse(g, v_pred, target, mask)?;
    if count == 0 {
        return Err(CfmError::EmptyMask);
    }
    Ok(g.mul_scalar(sse, 1.0 / count as f64)?)
}

/// `t ~ U[0, 1]`, drawn per training example.
pub fn sample_training_step<R: Rng + ?Sized>(rng: &mut R) -> FlowStep {
    FlowStep(rng.gen::<f64>())
}

/// I.i.d. standard normal tensor.
pub fn sample_noise<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([data.len()], data).unwrap()
    }

    fn loss_value(v: &[f64], target: &[f64], mask: Option<&[f64]>) -> Result<f64, CfmError> {
        let g = Graph::new();
        let vp = g.constant(t1(v));
        let m = mask.map(t1);
        let l = cfm_loss(&g, vp, &t1(target), m.as_ref())?;
        Ok(g.value(l).item()?)
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let x0 = t1(&[0.1, -3.0]);
        let x1 = t1(&[7.0, 1e-9]);
        assert_eq!(ot_interpolate(&x0, &x1, FlowStep::new(0.0).unwrap()).unwrap(), x0);
        assert_eq!(ot_interpolate(&x0, &x1, FlowStep::new(1.0).unwrap()).unwrap(), x1);
    }

    #[test]
    fn interpolation_quarter_way() {
        let out = ot_interpolate(&t1(&[0.0, 0.0]), &t1(&[2.0, 4.0]), FlowStep::new(0.25).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.5, 1.0]);
    }

    #[test]
    fn interpolation_rejects_mismatch_and_bad_step() {
        assert!(matches!(
            ot_interpolate(&t1(&[0.0]), &t1(&[1.0, 2.0]), FlowStep::new(0.5).unwrap()),
            Err(CfmError::Tensor(TensorError::ShapeMismatch { .. }))
        ));
        assert_eq!(FlowStep::new(1.5), Err(CfmError::InvalidStep(1.5)));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_value(&[1.0, 3.0], &[1.0, 3.0], None).unwrap(), 0.0);
        assert_eq!(loss_value(&[2.0, 4.0], &[1.0, 3.0], None).unwrap(), 1.0);
        assert_eq!(loss_value(&[0.0, 0.0], &[1.0, 3.0], Some(&[0.0, 1.0])).unwrap(), 9.0);
        assert_eq!(
            loss_value(&[0.0, 0.0], &[1.0, 3.0], Some(&[0.0, 0.0])),
            Err(CfmError::EmptyMask)
        );
    }

    #[test]
    fn temporal_mask_broadcasts_over_channels() {
        let g = Graph::new();
        let v = g.constant(Tensor::<f64>::zeros([3, 2]));
        let target = Tensor::from_f64([3, 2], &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let l = cfm_loss(&g, v, &target, Some(&t1(&[0.0, 1.0, 1.0]))).unwrap();
        assert_eq!(g.value(l).item().unwrap(), (4.0 + 4.0 + 9.0 + 9.0) / 4.0);
    }

    #[test]
    fn gradient_vanishes_at_the_minimum() {
        let target = t1(&[0.5, -1.0, 2.0]);
        let report = crate::tensor::grad_check(
            |g, v| cfm_loss(g, v, &target, Some(&t1(&[1.0, 0.0, 1.0]))).map_err(|e| match e {
                CfmError::Tensor(t) => t,
                other => TensorError::NonFinite(other.to_string()),
            }),
            &target,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        let g = Graph::new();
        let v = g.param(target.clone());
        let l = cfm_loss(&g, v, &target, None).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(v).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            assert_eq!(sample_training_step(&mut a), sample_training_step(&mut b));
        }
        let na: Tensor<f64> = sample_noise(&[4, 3], &mut a);
        let nb: Tensor<f64> = sample_noise(&[4, 3], &mut b);
        assert_eq!(na, nb);
        let empty: Tensor<f64> = sample_noise(&[0], &mut a);
        assert_eq!(empty.numel(), 0);
    }

    proptest! {
        #[test]
        fn interpolation_composes(
            x0 in prop::collection::vec(-5.0f64..5.0, 4),
            x1 in prop::collection::vec(-5.0f64..5.0, 4),
            t in 0.0f64..1.0,
            s in 0.0f64..1.0,
        ) {
            // Interpolating from psi_t toward x1 by s lands on psi at t + s(1 - t).
            let (a, b) = (t1(&x0), t1(&x1));
            let psi_t = ot_interpolate(&a, &b, FlowStep::new(t).unwrap()).unwrap();
            let composed = ot_interpolate(&psi_t, &b, FlowStep::new(s).unwrap()).unwrap();
            let direct = ot_interpolate(&a, &b, FlowStep::new(t + s * (1.0 - t)).unwrap()).unwrap();
            prop_assert!(composed.max_abs_diff(&direct).unwrap() < 1e-12);
        }

        #[test]
        fn interpolant_matches_definition(
            x0 in prop::collection::vec(-5.0f64..5.0, 3),
            x1 in prop::collection::vec(-5.0f64..5.0, 3),
            t in 0.0f64..=1.0,
        ) {
            let s = ProbePathSample::new(t1(&x0), t1(&x1), FlowStep::new(t).unwrap()).unwrap();
            for i in 0..3 {
                prop_assert!((s.psi_t.data()[i] - ((1.0 - t) * x0[i] + t * x1[i])).abs() < 1e-12);
                prop_assert_eq!(s.target.data()[i], x1[i] - x0[i]);
            }
        }
    }
}
