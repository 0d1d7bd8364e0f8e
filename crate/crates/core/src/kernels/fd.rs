//! Central finite-difference gradient checks.
//!
//! The numeric oracle perturbs one element at a time with step `h = 1e-6`
//! in f64 and compares against the analytic adjoint. Relative error uses a
//! small scale floor (1e-3) in the denominator: below that scale the
//! difference quotient itself is dominated by roundoff (~1e-10 absolute for
//! unit-scale losses), not by the gradient under test.

use super::aussm::{aussm_backward, aussm_forward_opts};
use super::s6::{s6_backward, s6_forward_opts};
use super::{AussmParams, S6Params, SeqTensor, TensorVisit};
use crate::scan::ChunkPlan;
use crate::Result;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// "tensor[index]" of the worst element.
    pub worst: String,
    pub checked: usize,
}

/// Relative error between analytic and numeric values.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare two name-aligned gradient sets.
pub fn compare_named(
    analytic: &[(String, Vec<f64>)],
    numeric: &[(String, Vec<f64>)],
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for ((an, av), (nn, nv)) in analytic.iter().zip(numeric.iter()) {
        assert_eq!(an, nn, "gradient tensor order mismatch");
        assert_eq!(av.len(), nv.len(), "gradient tensor size mismatch for {an}");
        for (e, (a, n)) in av.iter().zip(nv.iter()).enumerate() {
            let err = rel_err(*a, *n);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{an}[{e}]");
            }
        }
    }
    report
}

/// Central-difference gradients of `loss` with respect to every tensor of a
/// parameter container.
pub fn numeric_grads<P, F>(p: &P, mut loss: F, h: f64) -> Vec<(String, Vec<f64>)>
where
    P: TensorVisit + Clone,
    F: FnMut(&P) -> f64,
{
    let mut shapes: Vec<(String, usize)> = Vec::new();
    p.visit(&mut |name, t| shapes.push((name.to_string(), t.len())));
    let perturbed = |ti: usize, e: usize, step: f64| -> P {
        let mut pp = p.clone();
        let mut k = 0usize;
        pp.visit_mut(&mut |_, t| {
            if k == ti {
                t[e] += step;
            }
            k += 1;
        });
        pp
    };
    let mut out = Vec::with_capacity(shapes.len());
    for (ti, (name, len)) in shapes.iter().enumerate() {
        let mut grad = vec![0.0; *len];
        for (e, slot) in grad.iter_mut().enumerate() {
            let fp = loss(&perturbed(ti, e, h));
            let fm = loss(&perturbed(ti, e, -h));
            *slot = (fp - fm) / (2.0 * h);
        }
        out.push((name.clone(), grad));
    }
    out
}

/// Central-difference gradient of `loss` with respect to a flat input buffer.
pub fn numeric_grad_input<F>(u: &[f64], mut loss: F, h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; u.len()];
    let mut work = u.to_vec();
    for e in 0..u.len() {
        let orig = work[e];
        work[e] = orig + h;
        let fp = loss(&work);
        work[e] = orig - h;
        let fm = loss(&work);
        work[e] = orig;
        grad[e] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Full AUSSM gradcheck: every parameter tensor plus the input adjoint,
/// against a fixed random linear probe of the output.
pub fn gradcheck_aussm(p: &AussmParams, u: &SeqTensor, probe_seed: u64) -> Result<GradCheckReport> {
    gradcheck_aussm_with_plan(p, u, probe_seed, ChunkPlan::default())
}

pub fn gradcheck_aussm_with_plan(
    p: &AussmParams,
    u: &SeqTensor,
    probe_seed: u64,
    plan: ChunkPlan,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe: Vec<f64> = (0..u.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dy = SeqTensor::from_vec(probe, u.batch, u.d, u.len)?;

    let (_, cache) = aussm_forward_opts(p, u, None, None, plan)?;
    let (grads, du) = aussm_backward(&cache, &dy)?;
    let mut analytic = grads.named_tensors();
    analytic.push(("du".into(), du.data.clone()));

    let loss = |pp: &AussmParams| -> f64 {
        let (y, _) = aussm_forward_opts(pp, u, None, None, plan).expect("fd forward");
        y.data.iter().zip(dy.data.iter()).map(|(a, b)| a * b).sum()
    };
    let mut numeric = numeric_grads(p, loss, FD_STEP);
    let du_num = numeric_grad_input(
        &u.data,
        |ud| {
            let uu = SeqTensor::from_vec(ud.to_vec(), u.batch, u.d, u.len).unwrap();
            let (y, _) = aussm_forward_opts(p, &uu, None, None, plan).expect("fd forward");
            y.data.iter().zip(dy.data.iter()).map(|(a, b)| a * b).sum()
        },
        FD_STEP,
    );
    numeric.push(("du".into(), du_num));

    Ok(compare_named(&analytic, &numeric))
}

/// Full S6 gradcheck, same protocol as the AUSSM one.
pub fn gradcheck_s6(p: &S6Params, u: &SeqTensor, probe_seed: u64) -> Result<GradCheckReport> {
    gradcheck_s6_with_plan(p, u, probe_seed, ChunkPlan::default())
}

pub fn gradcheck_s6_with_plan(
    p: &S6Params,
    u: &SeqTensor,
    probe_seed: u64,
    plan: ChunkPlan,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe: Vec<f64> = (0..u.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dy = SeqTensor::from_vec(probe, u.batch, u.d, u.len)?;

    let (_, cache) = s6_forward_opts(p, u, plan)?;
    let (grads, du) = s6_backward(&cache, &dy)?;
    let mut analytic = grads.named_tensors();
    analytic.push(("du".into(), du.data.clone()));

    let loss = |pp: &S6Params| -> f64 {
        let (y, _) = s6_forward_opts(pp, u, plan).expect("fd forward");
        y.data.iter().zip(dy.data.iter()).map(|(a, b)| a * b).sum()
    };
    let mut numeric = numeric_grads(p, loss, FD_STEP);
    let du_num = numeric_grad_input(
        &u.data,
        |ud| {
            let uu = SeqTensor::from_vec(ud.to_vec(), u.batch, u.d, u.len).unwrap();
            let (y, _) = s6_forward_opts(p, &uu, plan).expect("fd forward");
            y.data.iter().zip(dy.data.iter()).map(|(a, b)| a * b).sum()
        },
        FD_STEP,
    );
    numeric.push(("du".into(), du_num));

    Ok(compare_named(&analytic, &numeric))
}
