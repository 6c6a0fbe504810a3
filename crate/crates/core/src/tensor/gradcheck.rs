use rand::Rng;

use super::graph::OpAttrs;
use super::{Graph, OpKind, Result, Tensor, TensorError, Var};

/// Denominator floor for the relative error, so exact-zero gradients are
/// compared in absolute terms instead of blowing up.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar function against central finite
/// differences at `point`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(point), step, tolerance)
}

/// Multi-input variant: every tensor in `points` is a differentiated input.
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = g.value(f(&g, &vars)?);
        let v = out.item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite(format!("function value {v}")));
        }
        Ok(v)
    };

    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!("function value {value}")));
        }
        let mut grads = g.backward(loss)?;
        vars.iter()
            .map(|&v| grads.take(v).expect("param leaf has a gradient"))
            .collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: 0,
        tolerance,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for ei in 0..point.numel() {
            let mut plus = point.data().to_vec();
            let mut minus = plus.clone();
            plus[ei] += step;
            minus[ei] -= step;
            work[pi] = Tensor::new(point.shape().to_vec(), plus)?;
            let fp = eval(&work)?;
            work[pi] = Tensor::new(point.shape().to_vec(), minus)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi].data()[ei];
            if !a.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "analytic gradient of input {pi} element {ei}"
                )));
            }
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
            report.max_abs_error = report.max_abs_error.max(abs);
            report.checked += 1;
        }
        work[pi] = point.clone();
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

/// Runs [`grad_check_many`] on every catalogue primitive with random shapes
/// (each axis at most `max_dim`, at least 1) and random inputs. The loss is a
/// random weighting of the primitive's output so sum-invariant primitives such
/// as softmax still get a non-trivial gradient.
pub fn check_catalogue<R: Rng>(
    rng: &mut R,
    max_dim: usize,
    step: f64,
    tolerance: f64,
) -> Result<Vec<(OpKind, GradCheckReport)>> {
    let max_dim = max_dim.max(2);
    let mut out = Vec::with_capacity(OpKind::ALL.len());
    for kind in OpKind::ALL {
        let case = random_case(kind, rng, max_dim);
        let out_probe = {
            let g = Graph::<f64>::new();
            let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
            g.shape(g.apply(kind, &vars, &case.attrs)?)
        };
        let weights = uniform_tensor(rng, &out_probe, -1.0, 1.0);
        let report = grad_check_many(
            |g, xs| {
                let y = g.apply(kind, xs, &case.attrs)?;
                let w = g.constant(weights.clone());
                let p = g.mul(y, w)?;
                g.sum(p)
            },
            &case.inputs,
            step,
            tolerance,
        )?;
        out.push((kind, report));
    }
    Ok(out)
}

struct Case {
    inputs: Vec<Tensor<f64>>,
    attrs: OpAttrs,
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in [0.5, 2) and random sign.
fn away_from_zero<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.5..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn random_case<R: Rng>(kind: OpKind, rng: &mut R, max_dim: usize) -> Case {
    let mut d = || rng.gen_range(1..=max_dim);
    let (a, b, c) = (d(), d(), d());
    let mut attrs = OpAttrs {
        eps: 1e-6,
        base: 10000.0,
        ..OpAttrs::default()
    };
    let u = |rng: &mut R, shape: &[usize]| uniform_tensor(rng, shape, -2.0, 2.0);
    let inputs = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => vec![u(rng, &[a, b]), u(rng, &[a, b])],
        OpKind::Div => vec![u(rng, &[a, b]), away_from_zero(rng, &[a, b])],
        OpKind::AddScalar | OpKind::MulScalar => {
            attrs.scalar = rng.gen_range(-3.0..3.0);
            vec![u(rng, &[a, b])]
        }
        OpKind::ScaleBy => vec![u(rng, &[a, b]), away_from_zero(rng, &[1])],
        OpKind::Sqrt => vec![uniform_tensor(rng, &[a, b], 0.5, 2.0)],
        OpKind::Exp | OpKind::Gelu | OpKind::Silu | OpKind::Softmax => vec![u(rng, &[a, b])],
        OpKind::Sum | OpKind::Mean | OpKind::Transpose => vec![u(rng, &[a, b])],
        OpKind::SumAxis | OpKind::MeanAxis => {
            attrs.axis = rng.gen_range(0..3);
            vec![u(rng, &[a, b, c])]
        }
        OpKind::MatMul => vec![u(rng, &[a, b]), u(rng, &[b, c])],
        OpKind::BatchMatMul => {
            let n = rng.gen_range(1..=max_dim);
            vec![u(rng, &[n, a, b]), u(rng, &[n, b, c])]
        }
        OpKind::Permute => {
            let mut axes = vec![0, 1, 2];
            for i in (1..3).rev() {
                let j = rng.gen_range(0..=i);
                axes.swap(i, j);
            }
            attrs.axes = axes;
            vec![u(rng, &[a, b, c])]
        }
        OpKind::Reshape => {
            attrs.shape = vec![b, a];
            vec![u(rng, &[a, b])]
        }
        OpKind::Concat => {
            attrs.axis = 1;
            vec![u(rng, &[a, b]), u(rng, &[a, c])]
        }
        OpKind::Slice => {
            attrs.axis = rng.gen_range(0..2);
            let len = if attrs.axis == 0 { a } else { b };
            attrs.start = rng.gen_range(0..len);
            attrs.end = rng.gen_range(attrs.start + 1..=len);
            vec![u(rng, &[a, b])]
        }
        OpKind::Expand => {
            attrs.axis = 1;
            attrs.count = c;
            vec![u(rng, &[a, 1, b])]
        }
        OpKind::LayerNorm => {
            let dim = b.max(2);
            vec![
                u(rng, &[a, dim]),
                uniform_tensor(rng, &[dim], 0.5, 1.5),
                u(rng, &[dim]),
            ]
        }
        OpKind::Embedding => {
            attrs.ids = (0..c).map(|_| rng.gen_range(0..a)).collect();
            vec![u(rng, &[a, b])]
        }
        OpKind::DepthwiseConv1d => {
            let k = 2 * rng.gen_range(0..3) + 1;
            vec![u(rng, &[a, b]), u(rng, &[b, k]), u(rng, &[b])]
        }
        OpKind::Conv1d => {
            let k = 2 * rng.gen_range(0..3) + 1;
            vec![u(rng, &[a, b]), u(rng, &[c, b, k]), u(rng, &[c])]
        }
        OpKind::Rope => {
            attrs.heads = rng.gen_range(1..=2);
            attrs.offset = rng.gen_range(0..5);
            let head_dim = 2 * rng.gen_range(1..=max_dim / 2);
            vec![u(rng, &[a, attrs.heads * head_dim])]
        }
    };
    Case { inputs, attrs }
}

#[cfg(test)]
mod tests {
    use super::*;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_primitive_passes_at_1e_4() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed_round in 0..3 {
            for (kind, report) in check_catalogue(&mut rng, 8, 1e-5, 1e-4).unwrap() {
                assert!(report.passed, "round {seed_round} {kind}: {report:?}");
            }
        }
    }

    #[test]
    fn linear_function_is_exact_to_rounding() {
        let point = Tensor::from_f64([4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let w = Tensor::from_f64([4], &[1.5, -0.5, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |g, x| {
                let wv = g.constant(w.clone());
                let p = g.mul(x, wv)?;
                g.sum(p)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn non_finite_values_are_reported() {
        let point = Tensor::from_f64([2], &[-1.0, 4.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let s = g.sqrt(x)?;
                g.sum(s)
            },
            &point,
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
    }
}
