//! SSM kernels: the adaptive unitary kernel (AUSSM) and the selective S6
//! kernel. Each ships a sequential recurrent reference, a separable
//! chunked-scan forward, and an analytic backward that recomputes the
//! forward chunk by chunk from cached carries.

pub mod aussm;
pub mod fd;
pub mod s6;

use crate::{Error, Result};
use rand::Rng;
use std::f64::consts::PI;

/// Dense real tensor of shape (batch, d, len), lane-major: the time axis of
/// each (sample, channel) lane is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqTensor {
    pub data: Vec<f64>,
    pub batch: usize,
    pub d: usize,
    pub len: usize,
}

impl SeqTensor {
    pub fn zeros(batch: usize, d: usize, len: usize) -> Self {
        SeqTensor {
            data: vec![0.0; batch * d * len],
            batch,
            d,
            len,
        }
    }

    pub fn from_vec(data: Vec<f64>, batch: usize, d: usize, len: usize) -> Result<Self> {
        if data.len() != batch * d * len {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape ({batch}, {d}, {len})",
                data.len()
            )));
        }
        Ok(SeqTensor {
            data,
            batch,
            d,
            len,
        })
    }

    #[inline]
    pub fn lane(&self, b: usize, i: usize) -> &[f64] {
        let off = (b * self.d + i) * self.len;
        &self.data[off..off + self.len]
    }

    #[inline]
    pub fn lane_mut(&mut self, b: usize, i: usize) -> &mut [f64] {
        let off = (b * self.d + i) * self.len;
        &mut self.data[off..off + self.len]
    }

    #[inline]
    pub fn get(&self, b: usize, i: usize, l: usize) -> f64 {
        self.data[(b * self.d + i) * self.len + l]
    }

    #[inline]
    pub fn set(&mut self, b: usize, i: usize, l: usize, v: f64) {
        self.data[(b * self.d + i) * self.len + l] = v;
    }

    pub fn same_shape(&self, other: &SeqTensor) -> bool {
        self.batch == other.batch && self.d == other.d && self.len == other.len
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named access to every tensor of a parameter (or gradient) container, in a
/// fixed traversal order. The optimizer, checkpoint archive, and
/// finite-difference checks all walk parameters through this trait.
pub trait TensorVisit {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn named_tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.to_vec())));
        out
    }

    fn num_elements(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

/// Polar-form unitary SSM parameters for one AUSSM layer over `d` channels
/// and `n` states per channel.
///
/// The input-adaptive transition angle for channel `i`, state `j` at step `l`
/// is `Δ[i,l] · (Σ_r chi[i,j,r]·u[r,l] + chi_bias[i,j])` with the step size
/// `Δ[i,l] = Σ_r chi_delta[i,r]·u[r,l] + chi_delta_bias[i]`. The drive and
/// readout vectors are shared across channels: `B_j = r_b[j]·exp(i·theta_b[j])`,
/// `C_j = r_c[j]·exp(i·theta_c[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct AussmParams {
    pub d: usize,
    pub n: usize,
    pub r_b: Vec<f64>,
    pub theta_b: Vec<f64>,
    pub r_c: Vec<f64>,
    pub theta_c: Vec<f64>,
    /// (d, n, d): input vector -> per-(channel, state) angle increment.
    pub chi: Vec<f64>,
    /// (d, n) angle bias, radians.
    pub chi_bias: Vec<f64>,
    /// (d, d): input vector -> per-channel step size.
    pub chi_delta: Vec<f64>,
    pub chi_delta_bias: Vec<f64>,
    /// (d) output skip gain.
    pub d_skip: Vec<f64>,
}

impl AussmParams {
    pub fn zeros(d: usize, n: usize) -> Self {
        AussmParams {
            d,
            n,
            r_b: vec![0.0; n],
            theta_b: vec![0.0; n],
            r_c: vec![0.0; n],
            theta_c: vec![0.0; n],
            chi: vec![0.0; d * n * d],
            chi_bias: vec![0.0; d * n],
            chi_delta: vec![0.0; d * d],
            chi_delta_bias: vec![0.0; d],
            d_skip: vec![0.0; d],
        }
    }

    /// Angles cover the circle, magnitudes start in [0.5, 1.0], adaptivity
    /// matrices start small, and the step size starts near 1.
    pub fn init<R: Rng>(d: usize, n: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, n);
        let sd = 1.0 / (d as f64).sqrt();
        for j in 0..n {
            p.r_b[j] = rng.gen_range(0.5..1.0);
            p.r_c[j] = rng.gen_range(0.5..1.0);
            p.theta_b[j] = rng.gen_range(-PI..PI);
            p.theta_c[j] = rng.gen_range(-PI..PI);
        }
        for v in &mut p.chi {
            *v = gauss(rng) * sd;
        }
        for v in &mut p.chi_bias {
            *v = rng.gen_range(-PI..PI);
        }
        for v in &mut p.chi_delta {
            *v = gauss(rng) * sd;
        }
        for v in &mut p.chi_delta_bias {
            *v = 1.0;
        }
        for v in &mut p.d_skip {
            *v = 1.0;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.r_b.len() == self.n
            && self.theta_b.len() == self.n
            && self.r_c.len() == self.n
            && self.theta_c.len() == self.n
            && self.chi.len() == self.d * self.n * self.d
            && self.chi_bias.len() == self.d * self.n
            && self.chi_delta.len() == self.d * self.d
            && self.chi_delta_bias.len() == self.d
            && self.d_skip.len() == self.d;
        if !shapes_ok {
            return Err(Error::Contract("AussmParams shape mismatch".into()));
        }
        let mut finite = true;
        self.visit(&mut |_, t| finite &= t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("AussmParams contains non-finite values".into()));
        }
        if self.r_b.iter().chain(self.r_c.iter()).any(|v| *v < 0.0) {
            return Err(Error::Contract("r_b and r_c must be nonnegative".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn chi_at(&self, i: usize, j: usize, r: usize) -> f64 {
        self.chi[(i * self.n + j) * self.d + r]
    }
}

impl TensorVisit for AussmParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("r_b", &self.r_b);
        f("theta_b", &self.theta_b);
        f("r_c", &self.r_c);
        f("theta_c", &self.theta_c);
        f("chi", &self.chi);
        f("chi_bias", &self.chi_bias);
        f("chi_delta", &self.chi_delta);
        f("chi_delta_bias", &self.chi_delta_bias);
        f("d_skip", &self.d_skip);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("r_b", &mut self.r_b);
        f("theta_b", &mut self.theta_b);
        f("r_c", &mut self.r_c);
        f("theta_c", &mut self.theta_c);
        f("chi", &mut self.chi);
        f("chi_bias", &mut self.chi_bias);
        f("chi_delta", &mut self.chi_delta);
        f("chi_delta_bias", &mut self.chi_delta_bias);
        f("d_skip", &mut self.d_skip);
    }
}

/// Selective-SSM (S6) parameters: fixed negative diagonal `a` per
/// (channel, state), input projections for B and C, a softplus step-size
/// path, and an output skip.
#[derive(Debug, Clone, PartialEq)]
pub struct S6Params {
    pub d: usize,
    pub n: usize,
    /// (d, n), strictly negative.
    pub a: Vec<f64>,
    /// (n, d).
    pub w_b: Vec<f64>,
    /// (n, d).
    pub w_c: Vec<f64>,
    /// (d, d).
    pub w_delta: Vec<f64>,
    pub b_delta: Vec<f64>,
    pub d_skip: Vec<f64>,
}

impl S6Params {
    pub fn zeros(d: usize, n: usize) -> Self {
        S6Params {
            d,
            n,
            a: vec![-1.0; d * n],
            w_b: vec![0.0; n * d],
            w_c: vec![0.0; n * d],
            w_delta: vec![0.0; d * d],
            b_delta: vec![0.0; d],
            d_skip: vec![0.0; d],
        }
    }

    /// S4D-real style transition init `a[i,j] = -(j+1)`, small projections,
    /// and a step size starting in roughly [1e-3, 1e-1] via the softplus bias.
    pub fn init<R: Rng>(d: usize, n: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, n);
        let sd = 1.0 / (d as f64).sqrt();
        for i in 0..d {
            for j in 0..n {
                p.a[i * n + j] = -((j + 1) as f64);
            }
        }
        for v in p.w_b.iter_mut().chain(p.w_c.iter_mut()) {
            *v = gauss(rng) * sd;
        }
        for v in &mut p.w_delta {
            *v = gauss(rng) * sd * 0.1;
        }
        for v in &mut p.b_delta {
            // softplus(b) = dt, dt log-uniform in [1e-3, 1e-1]
            let dt = 10f64.powf(rng.gen_range(-3.0..-1.0));
            *v = (dt.exp() - 1.0).ln();
        }
        for v in &mut p.d_skip {
            *v = 1.0;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let shapes_ok = self.a.len() == self.d * self.n
            && self.w_b.len() == self.n * self.d
            && self.w_c.len() == self.n * self.d
            && self.w_delta.len() == self.d * self.d
            && self.b_delta.len() == self.d
            && self.d_skip.len() == self.d;
        if !shapes_ok {
            return Err(Error::Contract("S6Params shape mismatch".into()));
        }
        let mut finite = true;
        self.visit(&mut |_, t| finite &= t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("S6Params contains non-finite values".into()));
        }
        if self.a.iter().any(|v| *v >= 0.0) {
            return Err(Error::Contract("S6 transition entries must be strictly negative".into()));
        }
        Ok(())
    }
}

impl TensorVisit for S6Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("a", &self.a);
        f("w_b", &self.w_b);
        f("w_c", &self.w_c);
        f("w_delta", &self.w_delta);
        f("b_delta", &self.b_delta);
        f("d_skip", &self.d_skip);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("a", &mut self.a);
        f("w_b", &mut self.w_b);
        f("w_c", &mut self.w_c);
        f("w_delta", &mut self.w_delta);
        f("b_delta", &mut self.b_delta);
        f("d_skip", &mut self.d_skip);
    }
}

pub(crate) fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// silu(x) = x · sigmoid(x).
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AussmParams::init(3, 4, &mut rng);
        p.validate().unwrap();
        let s = S6Params::init(3, 4, &mut rng);
        s.validate().unwrap();
    }

    #[test]
    fn validate_rejects_negative_radii() {
        let mut p = AussmParams::zeros(2, 2);
        p.r_b[0] = -0.1;
        assert!(p.validate().is_err());
    }

    #[test]
    fn validate_rejects_nonnegative_s6_spectrum() {
        let mut p = S6Params::zeros(2, 2);
        p.a[0] = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
