//! Verification suites. Every check reports a measured value against a bound
//! and renders as one line of `key=value` fields.

pub mod e2e;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cfm::{cfm_loss, sample_noise};
use crate::model::{attention_logits, Binder, ModelConfig, ModelError, ParamId, ParamStore, VectorFieldModel};
use crate::sampler::{
    build_schedule, cfg_combine, integrate, nfe_count, sample_sway_steps, sway_cdf, sway_sample, sway_upper_bound,
    Branch, SamplerError, Solver, SwayCoefficient,
};
use crate::stats::{ks_statistic, median, regression_slope};
use crate::tensor::{check_catalogue, grad_check_many, GradCheckReport, Graph, Tensor, TensorError, Var};
use crate::text::pad_to_length;
use crate::training::{
    clip_grad_norm, global_norm, make_infilling_mask, sample_cond_drop, Example, Trainer, TrainingBatch,
    TrainingConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub measured: f64,
    pub bound: String,
    pub passed: bool,
}

impl Check {
    pub fn new(suite: &'static str, name: impl Into<String>, measured: f64, bound: impl Into<String>, passed: bool) -> Self {
        Check {
            suite,
            name: name.into(),
            measured,
            bound: bound.into(),
            passed,
        }
    }

    pub fn at_most(suite: &'static str, name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(suite, name, measured, format!("<={bound:e}"), measured <= bound)
    }

    pub fn below(suite: &'static str, name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(suite, name, measured, format!("<{bound:e}"), measured < bound)
    }

    pub fn at_least(suite: &'static str, name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self::new(suite, name, measured, format!(">={bound}"), measured >= bound)
    }

    pub fn within(suite: &'static str, name: impl Into<String>, measured: f64, target: f64, tol: f64) -> Self {
        Self::new(
            suite,
            name,
            measured,
            format!("{target}+-{tol}"),
            (measured - target).abs() <= tol,
        )
    }

    pub fn holds(suite: &'static str, name: impl Into<String>, ok: bool) -> Self {
        Self::new(suite, name, if ok { 1.0 } else { 0.0 }, "==1", ok)
    }

    pub fn verdict(&self) -> &'static str {
        if self.passed {
            "pass"
        } else {
            "FAIL"
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "check={}.{} measured={:.6e} bound={} verdict={}",
            self.suite,
            self.name,
            self.measured,
            self.bound,
            self.verdict()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Sway,
    Solvers,
    Gradcheck,
    Identities,
    E2e,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Sway, Suite::Solvers, Suite::Gradcheck, Suite::Identities, Suite::E2e];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Sway => "sway",
            Suite::Solvers => "solvers",
            Suite::Gradcheck => "gradcheck",
            Suite::Identities => "identities",
            Suite::E2e => "e2e",
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(|x| x.name()).collect();
                format!("unknown suite `{s}`; valid suites: {}", names.join(", "))
            })
    }
}

fn timed(suite: &'static str, name: &str, started: Instant, limit_s: f64) -> Check {
    Check::below(suite, format!("{name}_seconds"), started.elapsed().as_secs_f64(), limit_s)
}

/// Sampling law of the sway map, its endpoints, monotonicity and range.
pub fn sway_suite(seed: u64) -> Vec<Check> {
    const S: &str = "sway";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let started = Instant::now();
    let n = 1_000_000;
    let mut medians = Vec::new();
    for s in [-1.0, -0.5, 0.0, 1.0] {
        let coef = SwayCoefficient::new(s).expect("valid");
        let mut xs = sample_sway_steps(n, coef, &mut rng);
        let d = ks_statistic(&mut xs, |t| sway_cdf(t, coef));
        out.push(Check::below(S, format!("ks_vs_cdf_s={s}"), d, 0.002));
        // xs is sorted by the KS pass
        let m = median(&mut xs);
        medians.push((s, m, sway_sample(0.5, coef).expect("valid")));
        if s == 0.0 {
            // 1% critical value of the one-sample KS test
            let crit = 1.63 / (n as f64).sqrt();
            let d_u = ks_statistic(&mut xs, |t| t.clamp(0.0, 1.0));
            out.push(Check::below(S, "ks_uniform_s=0", d_u, crit));
        }
    }
    for (s, m, analytic) in medians {
        let ok = if s < 0.0 {
            m < 0.5
        } else if s > 0.0 {
            m > 0.5
        } else {
            (m - 0.5).abs() < 0.002
        };
        out.push(Check::new(
            S,
            format!("median_direction_s={s}"),
            m,
            format!("{} (analytic {analytic:.5})", if s < 0.0 { "<0.5" } else if s > 0.0 { ">0.5" } else { "~0.5" }),
            ok && (m - analytic).abs() < 0.002,
        ));
    }
    out.push(timed(S, "sampling_law", started, 10.0));

    let started = Instant::now();
    let upper = sway_upper_bound();
    let mut worst_drop: f64 = 0.0;
    let mut endpoints = true;
    for _ in 0..20 {
        let coef = SwayCoefficient::new(rng.gen_range(-1.0..=upper)).expect("in range");
        endpoints &= sway_sample(0.0, coef).expect("valid") == 0.0 && sway_sample(1.0, coef).expect("valid") == 1.0;
        for _ in 0..10_000 {
            let (a, b): (f64, f64) = (rng.gen(), rng.gen());
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let drop = sway_sample(lo, coef).expect("valid") - sway_sample(hi, coef).expect("valid");
            worst_drop = worst_drop.max(drop);
        }
    }
    out.push(Check::holds(S, "endpoints_fixed", endpoints));
    out.push(Check::at_most(S, "monotone_worst_decrease", worst_drop, 0.0));
    let rejected = [-1.0 - 1e-9, upper + 1e-9, f64::NAN, 5.0]
        .iter()
        .all(|&s| SwayCoefficient::new(s).is_err());
    out.push(Check::holds(S, "out_of_range_rejected", rejected));
    out.push(timed(S, "endpoint_monotone", started, 1.0));
    out
}

fn growth(x: &Tensor<f64>, _t: f64, _b: Branch) -> Result<Tensor<f64>, SamplerError> {
    Ok(x.clone())
}

/// Convergence orders on `dx/dt = x` and the reference Euler value.
pub fn solver_suite() -> Vec<Check> {
    const S: &str = "solvers";
    let started = Instant::now();
    let mut out = Vec::new();
    let x0 = Tensor::scalar(1.0);
    let exact = std::f64::consts::E;
    for (solver, order) in [(Solver::Euler, 1.0), (Solver::Midpoint, 2.0), (Solver::Heun3, 3.0)] {
        let (mut hs, mut errs) = (Vec::new(), Vec::new());
        for segments in [4usize, 8, 16, 32, 64] {
            let sched = build_schedule(segments * solver.evals_per_step(), SwayCoefficient::uniform(), solver, 0.0)
                .expect("valid schedule");
            let x1 = integrate(&mut growth, &x0, &sched).expect("finite").output.item().expect("scalar");
            hs.push((1.0 / segments as f64).ln());
            errs.push((x1 - exact).abs().ln());
        }
        let slope = regression_slope(&hs, &errs);
        out.push(Check::within(S, format!("order_{}", solver.name()), slope, order, 0.2));
    }
    let sched = build_schedule(4, SwayCoefficient::uniform(), Solver::Euler, 0.0).expect("valid");
    let v = integrate(&mut growth, &x0, &sched).expect("finite").output.item().expect("scalar");
    out.push(Check::new(S, "euler_4_segments", v, "==2.44140625", v == 2.44140625));
    out.push(timed(S, "orders", started, 1.0));
    out
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(e) => e,
        other => TensorError::NonFinite(other.to_string()),
    }
}

/// Small 64-bit config used by the finite-difference checks (dropout off).
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        feat_dim: 4,
        capacity: 16,
        dit_layers: 2,
        dit_dim: 8,
        heads: 2,
        ffn_mult: 2,
        convnext_layers: 1,
        convnext_dim: 6,
        convnext_ffn_mult: 2,
        convnext_kernel: 3,
        conv_pos_kernel: 5,
        vocab_size: 5,
        rope_base: 10000.0,
        dropout: 0.0,
    }
}

fn ids_with_prefix<T: crate::tensor::Real>(store: &ParamStore<T>, prefix: &str) -> Vec<ParamId> {
    store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect()
}

/// Binds `ids` to the checked variables and every other parameter to a constant.
fn bind_subset<'a>(g: &'a Graph<f64>, store: &'a ParamStore<f64>, ids: &[ParamId], vars: &[Var]) -> Binder<'a, f64> {
    let all: Vec<Var> = store
        .ids()
        .map(|id| match ids.iter().position(|&x| x == id) {
            Some(k) => vars[k],
            None => g.constant(store.get(id).clone()),
        })
        .collect();
    Binder::with_vars(g, store, &all)
}

/// Finite-difference check of one architectural block with respect to its
/// input (when `input_shape` is given) and its own parameters.
fn check_block<F>(
    model: &VectorFieldModel<f64>,
    prefix: &str,
    input_shape: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
    forward: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Binder<f64>, Option<Var>) -> Result<Var, ModelError>,
{
    let ids = ids_with_prefix(model.params(), prefix);
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    let mut points: Vec<Tensor<f64>> = ids.iter().map(|&id| model.params().get(id).clone()).collect();
    if let Some(shape) = input_shape {
        points.push(sample_noise(shape, rng));
    }
    // a fixed random projection makes the scalar loss sensitive to every output
    let probe = {
        let g = Graph::new();
        let b = bind_subset(&g, model.params(), &[], &[]);
        let x = input_shape.map(|s| g.constant(Tensor::zeros(s.to_vec())));
        let out = forward(&b, x).map_err(model_err)?;
        let shape = g.shape(out);
        sample_noise::<f64, _>(&shape, rng)
    };
    let n = ids.len();
    grad_check_many(
        |g, vars| {
            let b = bind_subset(g, model.params(), &ids, &vars[..n]);
            let x = input_shape.map(|_| vars[n]);
            let out = forward(&b, x).map_err(model_err)?;
            let w = g.constant(probe.clone());
            let prod = g.mul(out, w)?;
            g.sum(prod)
        },
        &points,
        1e-5,
        1e-4,
    )
}

/// Full-model masked flow-matching loss checked against every parameter.
pub fn check_full_model(model: &VectorFieldModel<f64>, rng: &mut ChaCha8Rng) -> Result<GradCheckReport, TensorError> {
    let c = model.config();
    let (len, f) = (6, c.feat_dim);
    let x0 = sample_noise::<f64, _>(&[len, f], rng);
    let x1 = sample_noise::<f64, _>(&[len, f], rng);
    let cond = sample_noise::<f64, _>(&[len, f], rng);
    let ids: Vec<usize> = (0..3).map(|_| rng.gen_range(1..c.vocab_size)).collect();
    let z = pad_to_length(&ids, len).expect("fits");
    let mask = Tensor::new([len], vec![0.0, 1.0, 1.0, 1.0, 1.0, 0.0]).expect("shape");
    let t: f64 = rng.gen_range(0.05..0.95);
    let noisy = x0.scale(1.0 - t).axpy(t, &x1)?;
    let target = x1.sub(&x0)?;
    grad_check_many(
        |g, vars| {
            let b = Binder::with_vars(g, model.params(), vars);
            let n = g.constant(noisy.clone());
            let cv = g.constant(cond.clone());
            let v = model.forward(&b, n, cv, &z, t, None).map_err(model_err)?;
            cfm_loss(g, v, &target, Some(&mask)).map_err(|e| TensorError::NonFinite(e.to_string()))
        },
        model.params().values(),
        1e-5,
        1e-4,
    )
}

fn report_check(name: impl Into<String>, r: Result<GradCheckReport, TensorError>) -> Check {
    match r {
        Ok(r) => Check::new("gradcheck", name, r.max_rel_error, format!("<{:e}", r.tolerance), r.passed),
        Err(e) => Check::new("gradcheck", format!("{}: {e}", name.into()), f64::NAN, "<1e-4", false),
    }
}

fn randomized(model: &mut VectorFieldModel<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for v in model.params_mut().values_mut() {
        *v = Tensor::from_fn(v.shape().to_vec(), |_| rng.gen_range(-scale..scale));
    }
}

/// Every primitive, every architectural block, and the full model loss at
/// initialization and after five optimizer updates, all in 64-bit.
pub fn gradcheck_suite(seed: u64) -> Vec<Check> {
    const S: &str = "gradcheck";
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    match check_catalogue(&mut rng, 4, 1e-5, 1e-4) {
        Ok(reports) => {
            for (kind, r) in reports {
                out.push(report_check(format!("op_{}", kind.name()), Ok(r)));
            }
        }
        Err(e) => out.push(report_check("catalogue", Err(e))),
    }

    let config = gradcheck_config();
    let mut model = VectorFieldModel::<f64>::new(config.clone(), &mut rng).expect("valid config");
    // random weights so that zero-initialized gates do not hide any path
    randomized(&mut model, &mut rng, 0.5);
    let len = 6;
    let (cd, dd) = (config.convnext_dim, config.dit_dim);
    let blocks = model.text_blocks()[0].clone();
    out.push(report_check(
        "block_convnext_v2",
        check_block(&model, "text.blocks.0.", Some(&[len, cd]), &mut rng, |b, x| {
            Ok(blocks.forward(b, x.expect("input"))?)
        }),
    ));
    let dit = model.dit_blocks()[0].clone();
    let m2 = model.clone();
    out.push(report_check(
        "block_adaln_zero_dit",
        check_block(&model, "blocks.0.", Some(&[len, dd]), &mut rng, |b, x| {
            let g = b.graph();
            let temb = m2.embed_flow_step(b, 0.3)?;
            let c = g.silu(temb)?;
            Ok(dit.forward(b, x.expect("input"), c, config.rope_base, 0.0, None)?)
        }),
    ));
    let pos = model.conv_position().clone();
    out.push(report_check(
        "block_conv_position",
        check_block(&model, "input.conv_pos.", Some(&[len, dd]), &mut rng, |b, x| {
            Ok(pos.forward(b, x.expect("input"))?)
        }),
    ));
    let time = model.step_embedding().clone();
    out.push(report_check(
        "block_flow_step_mlp",
        check_block(&model, "time.", None, &mut rng, |b, _| Ok(time.forward(b, 0.71)?)),
    ));

    let mut fresh = VectorFieldModel::<f64>::new(config.clone(), &mut rng).expect("valid config");
    out.push(report_check("full_model_init", check_full_model(&fresh, &mut rng)));
    let tc = TrainingConfig {
        peak_lr: 2e-2,
        warmup_updates: 0,
        total_updates: 100,
        ..Default::default()
    };
    fresh = {
        let mut tr = Trainer::new(fresh, tc).expect("valid config");
        for _ in 0..5 {
            let examples = (0..2)
                .map(|_| {
                    let n = rng.gen_range(4..8);
                    Example {
                        x1: sample_noise(&[n, config.feat_dim], &mut rng),
                        z: pad_to_length(&[1, 2], n).expect("fits"),
                        mask: make_infilling_mask(n, [0.7, 1.0], &mut rng),
                    }
                })
                .collect();
            tr.train_step(&TrainingBatch { examples }).expect("finite");
        }
        tr.model
    };
    out.push(report_check("full_model_after_5_updates", check_full_model(&fresh, &mut rng)));
    out.push(timed(S, "all", started, 120.0));
    out
}

/// adaLN-zero identity, rotary shift invariance, guidance algebra, training
/// protocol statistics and persistence determinism.
pub fn identities_suite(seed: u64) -> Vec<Check> {
    const S: &str = "identities";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let model = VectorFieldModel::<f64>::new(ModelConfig::default(), &mut rng).expect("default config");
    let x = sample_noise::<f64, _>(&[24, model.config().dit_dim], &mut rng);
    let mut identical = true;
    let mut worst: f64 = 0.0;
    for t in [0.0, 0.25, 0.9, 1.0] {
        let g = Graph::new();
        let b = Binder::new(&g, model.params(), false);
        let xv = g.constant(x.clone());
        let y = g.value(model.dit_stack(&b, xv, t, None).expect("forward"));
        identical &= y.bits_eq(&x);
        worst = worst.max(y.max_abs_diff(&x).expect("same shape"));
    }
    out.push(Check::new(S, "adaln_zero_stack_bitwise", worst, "==0 bitwise", identical));

    let g = Graph::<f64>::new();
    let q = g.constant(sample_noise(&[16, 64], &mut rng));
    let k = g.constant(sample_noise(&[16, 64], &mut rng));
    let a = g.value(attention_logits(&g, q, k, 4, 10000.0, 0).expect("logits"));
    let b7 = g.value(attention_logits(&g, q, k, 4, 10000.0, 7).expect("logits"));
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.push(Check::at_most(
        S,
        "rope_shift_0_vs_7_rel",
        a.max_abs_diff(&b7).expect("same shape") / scale,
        1e-5,
    ));
    let r = g.value(g.rope(q, 4, 10000.0, 0).expect("rope"));
    out.push(Check::holds(S, "rope_position_0_identity", r.row(0) == g.value(q).row(0)));

    // guidance algebra
    let v = sample_noise::<f64, _>(&[5, 3], &mut rng);
    let u = sample_noise::<f64, _>(&[5, 3], &mut rng);
    let same = [0.0, 0.5, 2.0, 3.7]
        .iter()
        .all(|&a| cfg_combine(&v, &v, a).expect("shape").bits_eq(&v));
    out.push(Check::holds(S, "cfg_combine_v_v_is_v", same));
    out.push(Check::holds(
        S,
        "cfg_alpha_0_is_conditional",
        cfg_combine(&v, &u, 0.0).expect("shape").bits_eq(&v),
    ));
    let mut ratio_ok = true;
    let mut counts_ok = true;
    for solver in [Solver::Euler, Solver::Midpoint, Solver::Heun3] {
        for nfe in [6, 12, 30] {
            let mut totals = [0usize; 2];
            for (i, alpha) in [0.0, 2.0].into_iter().enumerate() {
                let sched = build_schedule(nfe, SwayCoefficient::new(-1.0).expect("valid"), solver, alpha)
                    .expect("valid schedule");
                let mut calls = 0usize;
                let mut field = |x: &Tensor<f64>, _t: f64, _b: Branch| {
                    calls += 1;
                    Ok(x.scale(0.5))
                };
                let res = integrate(&mut field, &u, &sched).expect("finite");
                counts_ok &= calls == nfe_count(&sched) && res.evaluations.total() == calls;
                totals[i] = calls;
            }
            ratio_ok &= totals[1] == 2 * totals[0];
        }
    }
    out.push(Check::holds(S, "nfe_count_matches_instrumented_calls", counts_ok));
    out.push(Check::holds(S, "cfg_doubles_evaluations", ratio_ok));

    // training protocol statistics
    let n = 100_000;
    let masked: usize = (0..n).map(|_| make_infilling_mask(100, [0.7, 1.0], &mut rng).count()).sum();
    out.push(Check::within(S, "mask_fraction_mean", masked as f64 / (100.0 * n as f64), 0.85, 0.005));
    let mut drops = [0usize; 3];
    for _ in 0..n {
        drops[sample_cond_drop(0.3, 0.2, &mut rng) as usize] += 1;
    }
    out.push(Check::within(S, "drop_audio_rate", drops[1] as f64 / n as f64, 0.30, 0.01));
    out.push(Check::within(S, "drop_audio_and_text_rate", drops[2] as f64 / n as f64, 0.14, 0.01));
    let mut worst_post: f64 = 0.0;
    let mut passthrough = true;
    for _ in 0..2000 {
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let mut grads: Vec<Tensor<f64>> = (0..4)
            .map(|_| sample_noise::<f64, _>(&[rng.gen_range(1..20)], &mut rng).scale(scale))
            .collect();
        let before = grads.clone();
        let pre = clip_grad_norm(&mut grads, 1.0);
        worst_post = worst_post.max(global_norm(&grads));
        if pre <= 1.0 {
            passthrough &= grads.iter().zip(&before).all(|(a, b)| a.bits_eq(b));
        }
    }
    out.push(Check::at_most(S, "post_clip_norm", worst_post, 1.0 + 1e-6));
    out.push(Check::holds(S, "clip_passthrough_below_bound", passthrough));

    out.extend(e2e::persistence_checks(seed));
    out
}

pub fn run_suite(suite: Suite, seed: u64) -> Vec<Check> {
    match suite {
        Suite::Sway => sway_suite(seed),
        Suite::Solvers => solver_suite(),
        Suite::Gradcheck => gradcheck_suite(seed),
        Suite::Identities => identities_suite(seed),
        Suite::E2e => e2e::run(&e2e::E2eConfig::default(), |_| {}).checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        let err = "nope".parse::<Suite>().unwrap_err();
        assert!(err.contains("sway") && err.contains("e2e"));
    }

    #[test]
    fn check_line_format() {
        let c = Check::below("sway", "ks", 0.001, 0.002);
        let line = c.to_string();
        assert!(line.starts_with("check=sway.ks measured=1.000000e-3 bound=<2e-3 verdict=pass"), "{line}");
        assert!(!Check::below("s", "x", 3.0, 2.0).passed);
    }

    #[test]
    fn solver_suite_passes() {
        for c in solver_suite() {
            assert!(c.passed, "{c}");
        }
    }
}
