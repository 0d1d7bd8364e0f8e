//! Blocks and models: the SSM kernels wrapped in the Mamba block layout
//! (pre-norm, x/z projections, causal depthwise conv + silu, SSM, silu gate,
//! output projection, residual), stacked by a pattern string over
//! {'a' = AUSSM, 'm' = S6/Mamba}.
//!
//! All per-sample tensors are lane-major (channels, len), matching the
//! kernel layout. Models process one sample at a time; batching lives in the
//! training loop.

use crate::kernels::aussm::{
    aussm_backward, aussm_forward_opts, AussmCache, AussmGrads,
};
use crate::kernels::s6::{s6_backward, s6_forward_opts, S6Cache, S6Grads};
use crate::kernels::{silu, silu_prime, AussmParams, S6Params, SeqTensor, TensorVisit};
use crate::scan::ChunkPlan;
use crate::{Error, Result};
use rand::Rng;

pub const RMSNORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Aussm,
    Mamba,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub d_model: usize,
    /// d_inner = expand · d_model.
    pub expand: usize,
    pub n_state: usize,
    /// Depthwise causal conv width; 0 disables the conv (silu stays).
    pub conv_width: usize,
}

impl BlockConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// One block per character, evaluated left to right: 'a' or 'm'.
    pub pattern: String,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub tie_embedding: bool,
}

impl ModelConfig {
    pub fn new(pattern: &str, vocab_size: usize, d_model: usize, n_state: usize) -> Self {
        ModelConfig {
            pattern: pattern.to_string(),
            vocab_size,
            d_model,
            n_state,
            expand: 2,
            conv_width: 4,
            tie_embedding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pattern.is_empty() {
            return Err(Error::Config("pattern must be non-empty".into()));
        }
        if self.pattern.chars().any(|c| c != 'a' && c != 'm') {
            return Err(Error::Config(format!(
                "pattern may only contain 'a' and 'm', got {:?}",
                self.pattern
            )));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.n_state == 0 || self.expand == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn block_config(&self, kind: BlockKind) -> BlockConfig {
        BlockConfig {
            kind,
            d_model: self.d_model,
            expand: self.expand,
            n_state: self.n_state,
            conv_width: self.conv_width,
        }
    }
}

#[derive(Debug, Clone)]
pub enum KernelParams {
    Aussm(AussmParams),
    Mamba(S6Params),
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub cfg: BlockConfig,
    pub norm_g: Vec<f64>,
    /// (d_inner, d_model) row-major, plus bias.
    pub w_x: Vec<f64>,
    pub b_x: Vec<f64>,
    pub w_z: Vec<f64>,
    pub b_z: Vec<f64>,
    /// (d_inner, conv_width) row-major, plus bias; empty when conv disabled.
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub kernel: KernelParams,
    /// (d_model, d_inner) row-major, plus bias.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl BlockParams {
    pub fn zeros(cfg: BlockConfig) -> Self {
        let (dm, di, w) = (cfg.d_model, cfg.d_inner(), cfg.conv_width);
        let kernel = match cfg.kind {
            BlockKind::Aussm => KernelParams::Aussm(AussmParams::zeros(di, cfg.n_state)),
            BlockKind::Mamba => KernelParams::Mamba(S6Params::zeros(di, cfg.n_state)),
        };
        BlockParams {
            cfg,
            norm_g: vec![1.0; dm],
            w_x: vec![0.0; di * dm],
            b_x: vec![0.0; di],
            w_z: vec![0.0; di * dm],
            b_z: vec![0.0; di],
            conv_w: vec![0.0; di * w],
            conv_b: vec![0.0; di],
            kernel,
            w_out: vec![0.0; dm * di],
            b_out: vec![0.0; dm],
        }
    }

    pub fn init<R: Rng>(cfg: BlockConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let (dm, di, w) = (cfg.d_model, cfg.d_inner(), cfg.conv_width);
        let sd_in = 1.0 / (dm as f64).sqrt();
        for v in p.w_x.iter_mut().chain(p.w_z.iter_mut()) {
            *v = crate::kernels::gauss(rng) * sd_in;
        }
        if w > 0 {
            let sd_c = 1.0 / (w as f64).sqrt();
            for v in &mut p.conv_w {
                *v = crate::kernels::gauss(rng) * sd_c;
            }
        }
        let sd_out = 1.0 / (di as f64).sqrt();
        for v in &mut p.w_out {
            *v = crate::kernels::gauss(rng) * sd_out;
        }
        p.kernel = match cfg.kind {
            BlockKind::Aussm => KernelParams::Aussm(AussmParams::init(di, cfg.n_state, rng)),
            BlockKind::Mamba => KernelParams::Mamba(S6Params::init(di, cfg.n_state, rng)),
        };
        p
    }
}

impl TensorVisit for BlockParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("norm_g", &self.norm_g);
        f("w_x", &self.w_x);
        f("b_x", &self.b_x);
        f("w_z", &self.w_z);
        f("b_z", &self.b_z);
        f("conv_w", &self.conv_w);
        f("conv_b", &self.conv_b);
        match &self.kernel {
            KernelParams::Aussm(k) => k.visit(&mut |name, t| f(&format!("aussm.{name}"), t)),
            KernelParams::Mamba(k) => k.visit(&mut |name, t| f(&format!("s6.{name}"), t)),
        }
        f("w_out", &self.w_out);
        f("b_out", &self.b_out);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("norm_g", &mut self.norm_g);
        f("w_x", &mut self.w_x);
        f("b_x", &mut self.b_x);
        f("w_z", &mut self.w_z);
        f("b_z", &mut self.b_z);
        f("conv_w", &mut self.conv_w);
        f("conv_b", &mut self.conv_b);
        match &mut self.kernel {
            KernelParams::Aussm(k) => k.visit_mut(&mut |name, t| f(&format!("aussm.{name}"), t)),
            KernelParams::Mamba(k) => k.visit_mut(&mut |name, t| f(&format!("s6.{name}"), t)),
        }
        f("w_out", &mut self.w_out);
        f("b_out", &mut self.b_out);
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    /// (vocab, d_model) row-major.
    pub embed: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_norm_g: Vec<f64>,
    /// (vocab, d_model) row-major; unused when embeddings are tied.
    pub head: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = cfg
            .pattern
            .chars()
            .map(|c| {
                let kind = if c == 'a' { BlockKind::Aussm } else { BlockKind::Mamba };
                BlockParams::zeros(cfg.block_config(kind))
            })
            .collect();
        let head_len = if cfg.tie_embedding { 0 } else { cfg.vocab_size * cfg.d_model };
        Ok(ModelParams {
            embed: vec![0.0; cfg.vocab_size * cfg.d_model],
            blocks,
            final_norm_g: vec![1.0; cfg.d_model],
            head: vec![0.0; head_len],
            head_b: vec![0.0; cfg.vocab_size],
            cfg,
        })
    }

    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        for v in &mut p.embed {
            *v = crate::kernels::gauss(rng) * 0.02;
        }
        for v in &mut p.head {
            *v = crate::kernels::gauss(rng) * 0.02;
        }
        let blocks = p
            .cfg
            .pattern
            .chars()
            .map(|c| {
                let kind = if c == 'a' { BlockKind::Aussm } else { BlockKind::Mamba };
                BlockParams::init(p.cfg.block_config(kind), rng)
            })
            .collect();
        p.blocks = blocks;
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.num_elements()
    }

    /// Project parameters back onto their invariant sets after an optimizer
    /// step: S6 transition entries stay strictly negative, polar magnitudes
    /// stay nonnegative.
    pub fn project_invariants(&mut self) {
        for b in &mut self.blocks {
            match &mut b.kernel {
                KernelParams::Mamba(k) => {
                    for v in &mut k.a {
                        *v = v.min(-1e-6);
                    }
                }
                KernelParams::Aussm(k) => {
                    for v in k.r_b.iter_mut().chain(k.r_c.iter_mut()) {
                        *v = v.max(0.0);
                    }
                }
            }
        }
    }
}

impl TensorVisit for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("embed", &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |name, t| f(&format!("block{i}.{name}"), t));
        }
        f("final_norm_g", &self.final_norm_g);
        f("head", &self.head);
        f("head_b", &self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("embed", &mut self.embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |name, t| f(&format!("block{i}.{name}"), t));
        }
        f("final_norm_g", &mut self.final_norm_g);
        f("head", &mut self.head);
        f("head_b", &mut self.head_b);
    }
}

// ── Primitive layers ────────────────────────────────────────────────────

/// RMS normalization of one vector: `g ⊙ x / sqrt(mean(x²) + eps)`.
pub fn rmsnorm(x: &[f64], g: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), g.len());
    let d = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
    let inv = 1.0 / (ms + RMSNORM_EPS).sqrt();
    x.iter().zip(g.iter()).map(|(v, gv)| gv * v * inv).collect()
}

/// Per-position RMS norm of a lane-major (d, len) tensor; also returns the
/// per-position inverse rms for the backward pass.
fn rmsnorm_lanes(x: &[f64], g: &[f64], d: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; d * len];
    let mut inv = vec![0.0; len];
    for l in 0..len {
        let mut ms = 0.0;
        for c in 0..d {
            let v = x[c * len + l];
            ms += v * v;
        }
        inv[l] = 1.0 / (ms / d as f64 + RMSNORM_EPS).sqrt();
    }
    for c in 0..d {
        for l in 0..len {
            out[c * len + l] = g[c] * x[c * len + l] * inv[l];
        }
    }
    (out, inv)
}

fn rmsnorm_lanes_backward(
    x: &[f64],
    g: &[f64],
    inv: &[f64],
    dout: &[f64],
    d: usize,
    len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; d * len];
    let mut dg = vec![0.0; d];
    for l in 0..len {
        let mut proj = 0.0;
        for c in 0..d {
            proj += dout[c * len + l] * g[c] * x[c * len + l];
        }
        let r = inv[l];
        let scale = proj * r * r * r / d as f64;
        for c in 0..d {
            dx[c * len + l] = g[c] * r * dout[c * len + l] - x[c * len + l] * scale;
        }
    }
    for c in 0..d {
        for l in 0..len {
            dg[c] += dout[c * len + l] * x[c * len + l] * inv[l];
        }
    }
    (dx, dg)
}

/// out[o, l] = b[o] + Σ_c w[o,c]·x[c, l], lane-major in and out.
fn linear_lanes(
    w: &[f64],
    b: &[f64],
    x: &[f64],
    d_in: usize,
    d_out: usize,
    len: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; d_out * len];
    for o in 0..d_out {
        let row = &mut out[o * len..(o + 1) * len];
        row.fill(b[o]);
        for c in 0..d_in {
            let wv = w[o * d_in + c];
            if wv != 0.0 {
                let xr = &x[c * len..(c + 1) * len];
                for (ov, xv) in row.iter_mut().zip(xr) {
                    *ov += wv * xv;
                }
            }
        }
    }
    out
}

/// Backward of [`linear_lanes`]: returns dx and accumulates dw/db.
fn linear_lanes_backward(
    w: &[f64],
    x: &[f64],
    dout: &[f64],
    d_in: usize,
    d_out: usize,
    len: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; d_in * len];
    for o in 0..d_out {
        let dr = &dout[o * len..(o + 1) * len];
        db[o] += dr.iter().sum::<f64>();
        for c in 0..d_in {
            let xr = &x[c * len..(c + 1) * len];
            let mut dot = 0.0;
            for (dv, xv) in dr.iter().zip(xr) {
                dot += dv * xv;
            }
            dw[o * d_in + c] += dot;
            let wv = w[o * d_in + c];
            if wv != 0.0 {
                let dxr = &mut dx[c * len..(c + 1) * len];
                for (dxv, dv) in dxr.iter_mut().zip(dr) {
                    *dxv += wv * dv;
                }
            }
        }
    }
    dx
}

/// Depthwise causal conv: out[c,l] = b[c] + Σ_w k[c,w]·x[c, l-(W-1)+w],
/// zero-padded on the left.
fn causal_conv(x: &[f64], w: &[f64], b: &[f64], d: usize, width: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * len];
    for c in 0..d {
        let xr = &x[c * len..(c + 1) * len];
        let orow = &mut out[c * len..(c + 1) * len];
        let kr = &w[c * width..(c + 1) * width];
        for l in 0..len {
            let mut acc = b[c];
            for (wi, kv) in kr.iter().enumerate() {
                let t = l as isize - (width as isize - 1) + wi as isize;
                if t >= 0 {
                    acc += kv * xr[t as usize];
                }
            }
            orow[l] = acc;
        }
    }
    out
}

fn causal_conv_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    d: usize,
    width: usize,
    len: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; d * len];
    for c in 0..d {
        let xr = &x[c * len..(c + 1) * len];
        let dr = &dout[c * len..(c + 1) * len];
        let kr = &w[c * width..(c + 1) * width];
        db[c] += dr.iter().sum::<f64>();
        for l in 0..len {
            for wi in 0..width {
                let t = l as isize - (width as isize - 1) + wi as isize;
                if t >= 0 {
                    dw[c * width + wi] += dr[l] * xr[t as usize];
                    dx[c * len + t as usize] += dr[l] * kr[wi];
                }
            }
        }
    }
    dx
}

// ── Block ───────────────────────────────────────────────────────────────

enum KernelCacheEnum {
    Aussm(AussmCache),
    Mamba(S6Cache),
}

pub struct BlockCache {
    len: usize,
    x_in: Vec<f64>,
    inv_rms: Vec<f64>,
    norm_out: Vec<f64>,
    xproj: Vec<f64>,
    zproj: Vec<f64>,
    conv_out: Vec<f64>,
    y_ssm: SeqTensor,
    kernel_cache: KernelCacheEnum,
}

#[derive(Debug, Clone)]
pub enum KernelGrads {
    Aussm(AussmGrads),
    Mamba(S6Grads),
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub norm_g: Vec<f64>,
    pub w_x: Vec<f64>,
    pub b_x: Vec<f64>,
    pub w_z: Vec<f64>,
    pub b_z: Vec<f64>,
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub kernel: KernelGrads,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

impl BlockGrads {
    pub fn zeros(cfg: &BlockConfig) -> Self {
        let (dm, di, w) = (cfg.d_model, cfg.d_inner(), cfg.conv_width);
        let kernel = match cfg.kind {
            BlockKind::Aussm => KernelGrads::Aussm(AussmGrads::zeros(di, cfg.n_state)),
            BlockKind::Mamba => KernelGrads::Mamba(S6Grads::zeros(di, cfg.n_state)),
        };
        BlockGrads {
            norm_g: vec![0.0; dm],
            w_x: vec![0.0; di * dm],
            b_x: vec![0.0; di],
            w_z: vec![0.0; di * dm],
            b_z: vec![0.0; di],
            conv_w: vec![0.0; di * w],
            conv_b: vec![0.0; di],
            kernel,
            w_out: vec![0.0; dm * di],
            b_out: vec![0.0; dm],
        }
    }

    fn accumulate(&mut self, other: &BlockGrads) {
        for (a, b) in [
            (&mut self.norm_g, &other.norm_g),
            (&mut self.w_x, &other.w_x),
            (&mut self.b_x, &other.b_x),
            (&mut self.w_z, &other.w_z),
            (&mut self.b_z, &other.b_z),
            (&mut self.conv_w, &other.conv_w),
            (&mut self.conv_b, &other.conv_b),
            (&mut self.w_out, &other.w_out),
            (&mut self.b_out, &other.b_out),
        ] {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        match (&mut self.kernel, &other.kernel) {
            (KernelGrads::Aussm(a), KernelGrads::Aussm(b)) => a.accumulate(b),
            (KernelGrads::Mamba(a), KernelGrads::Mamba(b)) => a.accumulate(b),
            _ => panic!("kernel grad kind mismatch"),
        }
    }
}

impl TensorVisit for BlockGrads {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("norm_g", &self.norm_g);
        f("w_x", &self.w_x);
        f("b_x", &self.b_x);
        f("w_z", &self.w_z);
        f("b_z", &self.b_z);
        f("conv_w", &self.conv_w);
        f("conv_b", &self.conv_b);
        match &self.kernel {
            KernelGrads::Aussm(k) => k.visit(&mut |name, t| f(&format!("aussm.{name}"), t)),
            KernelGrads::Mamba(k) => k.visit(&mut |name, t| f(&format!("s6.{name}"), t)),
        }
        f("w_out", &self.w_out);
        f("b_out", &self.b_out);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("norm_g", &mut self.norm_g);
        f("w_x", &mut self.w_x);
        f("b_x", &mut self.b_x);
        f("w_z", &mut self.w_z);
        f("b_z", &mut self.b_z);
        f("conv_w", &mut self.conv_w);
        f("conv_b", &mut self.conv_b);
        match &mut self.kernel {
            KernelGrads::Aussm(k) => k.visit_mut(&mut |name, t| f(&format!("aussm.{name}"), t)),
            KernelGrads::Mamba(k) => k.visit_mut(&mut |name, t| f(&format!("s6.{name}"), t)),
        }
        f("w_out", &mut self.w_out);
        f("b_out", &mut self.b_out);
    }
}

/// One block forward on a lane-major (d_model, len) stream:
/// `out = x + OutProj( SSM(SiluConv(InProj_x(norm x))) ⊙ silu(InProj_z(norm x)) )`.
pub fn block_forward(p: &BlockParams, x: &[f64], len: usize) -> Result<(Vec<f64>, BlockCache)> {
    let (dm, di) = (p.cfg.d_model, p.cfg.d_inner());
    if x.len() != dm * len {
        return Err(Error::Contract("block input shape mismatch".into()));
    }
    let (norm_out, inv_rms) = rmsnorm_lanes(x, &p.norm_g, dm, len);
    let xproj = linear_lanes(&p.w_x, &p.b_x, &norm_out, dm, di, len);
    let zproj = linear_lanes(&p.w_z, &p.b_z, &norm_out, dm, di, len);
    let conv_out = if p.cfg.conv_width > 0 {
        causal_conv(&xproj, &p.conv_w, &p.conv_b, di, p.cfg.conv_width, len)
    } else {
        xproj.clone()
    };
    let mut ssm_in = SeqTensor::zeros(1, di, len);
    for (o, v) in ssm_in.data.iter_mut().zip(conv_out.iter()) {
        *o = silu(*v);
    }
    let (y_ssm, kernel_cache) = match &p.kernel {
        KernelParams::Aussm(k) => {
            let (y, c) = aussm_forward_opts(k, &ssm_in, None, None, ChunkPlan::default())?;
            (y, KernelCacheEnum::Aussm(c))
        }
        KernelParams::Mamba(k) => {
            let (y, c) = s6_forward_opts(k, &ssm_in, ChunkPlan::default())?;
            (y, KernelCacheEnum::Mamba(c))
        }
    };
    // Gate and output projection.
    let mut gated = vec![0.0; di * len];
    for i in 0..di * len {
        gated[i] = y_ssm.data[i] * silu(zproj[i]);
    }
    let proj = linear_lanes(&p.w_out, &p.b_out, &gated, di, dm, len);
    let mut out = x.to_vec();
    for (o, pv) in out.iter_mut().zip(proj.iter()) {
        *o += pv;
    }
    let cache = BlockCache {
        len,
        x_in: x.to_vec(),
        inv_rms,
        norm_out,
        xproj,
        zproj,
        conv_out,
        y_ssm,
        kernel_cache,
    };
    Ok((out, cache))
}

/// Block adjoint; returns dx and accumulates parameter grads.
pub fn block_backward(
    p: &BlockParams,
    cache: &BlockCache,
    dout: &[f64],
    grads: &mut BlockGrads,
) -> Result<Vec<f64>> {
    let (dm, di, len) = (p.cfg.d_model, p.cfg.d_inner(), cache.len);
    // out = x + W_out·gated + b_out
    let mut gated = vec![0.0; di * len];
    for i in 0..di * len {
        gated[i] = cache.y_ssm.data[i] * silu(cache.zproj[i]);
    }
    let dgated = linear_lanes_backward(
        &p.w_out, &gated, dout, di, dm, len, &mut grads.w_out, &mut grads.b_out,
    );
    // gated = y_ssm ⊙ silu(z)
    let mut dy_ssm = SeqTensor::zeros(1, di, len);
    let mut dzproj = vec![0.0; di * len];
    for i in 0..di * len {
        let gate = silu(cache.zproj[i]);
        dy_ssm.data[i] = dgated[i] * gate;
        dzproj[i] = dgated[i] * cache.y_ssm.data[i] * silu_prime(cache.zproj[i]);
    }
    // SSM kernel adjoint.
    let du = match (&cache.kernel_cache, &mut grads.kernel) {
        (KernelCacheEnum::Aussm(c), KernelGrads::Aussm(g)) => {
            let (kg, du) = aussm_backward(c, &dy_ssm)?;
            g.accumulate(&kg);
            du
        }
        (KernelCacheEnum::Mamba(c), KernelGrads::Mamba(g)) => {
            let (kg, du) = s6_backward(c, &dy_ssm)?;
            g.accumulate(&kg);
            du
        }
        _ => return Err(Error::Contract("kernel cache/grads kind mismatch".into())),
    };
    // ssm_in = silu(conv_out)
    let mut dconv = vec![0.0; di * len];
    for i in 0..di * len {
        dconv[i] = du.data[i] * silu_prime(cache.conv_out[i]);
    }
    let dxproj = if p.cfg.conv_width > 0 {
        causal_conv_backward(
            &cache.xproj,
            &p.conv_w,
            &dconv,
            di,
            p.cfg.conv_width,
            len,
            &mut grads.conv_w,
            &mut grads.conv_b,
        )
    } else {
        dconv
    };
    // Projections from the normalized stream.
    let mut dnorm = linear_lanes_backward(
        &p.w_x, &cache.norm_out, &dxproj, dm, di, len, &mut grads.w_x, &mut grads.b_x,
    );
    let dnorm_z = linear_lanes_backward(
        &p.w_z, &cache.norm_out, &dzproj, dm, di, len, &mut grads.w_z, &mut grads.b_z,
    );
    for (a, b) in dnorm.iter_mut().zip(dnorm_z.iter()) {
        *a += b;
    }
    let (dx_norm, dg) = rmsnorm_lanes_backward(
        &cache.x_in, &p.norm_g, &cache.inv_rms, &dnorm, dm, len,
    );
    for (a, b) in grads.norm_g.iter_mut().zip(dg.iter()) {
        *a += b;
    }
    // Residual.
    let mut dx = dout.to_vec();
    for (a, b) in dx.iter_mut().zip(dx_norm.iter()) {
        *a += b;
    }
    Ok(dx)
}

// ── Model ───────────────────────────────────────────────────────────────

pub struct ModelCache {
    pub tokens: Vec<usize>,
    block_caches: Vec<BlockCache>,
    final_in: Vec<f64>,
    final_inv: Vec<f64>,
    final_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub embed: Vec<f64>,
    pub blocks: Vec<BlockGrads>,
    pub final_norm_g: Vec<f64>,
    pub head: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros(p: &ModelParams) -> Self {
        ModelGrads {
            embed: vec![0.0; p.embed.len()],
            blocks: p.blocks.iter().map(|b| BlockGrads::zeros(&b.cfg)).collect(),
            final_norm_g: vec![0.0; p.final_norm_g.len()],
            head: vec![0.0; p.head.len()],
            head_b: vec![0.0; p.head_b.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ModelGrads) {
        for (a, b) in [
            (&mut self.embed, &other.embed),
            (&mut self.final_norm_g, &other.final_norm_g),
            (&mut self.head, &other.head),
            (&mut self.head_b, &other.head_b),
        ] {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
        for (a, b) in self.blocks.iter_mut().zip(other.blocks.iter()) {
            a.accumulate(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.visit_mut(&mut |_, t| {
            for v in t {
                *v *= s;
            }
        });
    }
}

impl TensorVisit for ModelGrads {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("embed", &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |name, t| f(&format!("block{i}.{name}"), t));
        }
        f("final_norm_g", &self.final_norm_g);
        f("head", &self.head);
        f("head_b", &self.head_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("embed", &mut self.embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |name, t| f(&format!("block{i}.{name}"), t));
        }
        f("final_norm_g", &mut self.final_norm_g);
        f("head", &mut self.head);
        f("head_b", &mut self.head_b);
    }
}

/// Token ids -> logits, position-major (len, vocab). Embedding, blocks in
/// pattern order, final RMS norm, linear head (shared with the embedding
/// when tied).
pub fn model_forward(p: &ModelParams, tokens: &[usize]) -> Result<(Vec<f64>, ModelCache)> {
    let (dm, vocab) = (p.cfg.d_model, p.cfg.vocab_size);
    let len = tokens.len();
    for &t in tokens {
        if t >= vocab {
            return Err(Error::Input(format!("token id {t} out of range (vocab {vocab})")));
        }
    }
    let mut x = vec![0.0; dm * len];
    for (l, &t) in tokens.iter().enumerate() {
        for c in 0..dm {
            x[c * len + l] = p.embed[t * dm + c];
        }
    }
    let mut block_caches = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (out, cache) = block_forward(b, &x, len)?;
        block_caches.push(cache);
        x = out;
    }
    let (final_out, final_inv) = rmsnorm_lanes(&x, &p.final_norm_g, dm, len);
    let head = if p.cfg.tie_embedding { &p.embed } else { &p.head };
    let mut logits = vec![0.0; len * vocab];
    for l in 0..len {
        for v in 0..vocab {
            let mut acc = p.head_b[v];
            for c in 0..dm {
                acc += head[v * dm + c] * final_out[c * len + l];
            }
            logits[l * vocab + v] = acc;
        }
    }
    let cache = ModelCache {
        tokens: tokens.to_vec(),
        block_caches,
        final_in: x,
        final_inv,
        final_out,
    };
    Ok((logits, cache))
}

/// Model adjoint from position-major dlogits; accumulates into `grads`.
pub fn model_backward(
    p: &ModelParams,
    cache: &ModelCache,
    dlogits: &[f64],
    grads: &mut ModelGrads,
) -> Result<()> {
    let (dm, vocab) = (p.cfg.d_model, p.cfg.vocab_size);
    let len = cache.tokens.len();
    if dlogits.len() != len * vocab {
        return Err(Error::Contract("dlogits shape mismatch".into()));
    }
    let head = if p.cfg.tie_embedding { &p.embed } else { &p.head };
    let mut dfinal = vec![0.0; dm * len];
    for l in 0..len {
        for v in 0..vocab {
            let dv = dlogits[l * vocab + v];
            if dv != 0.0 {
                grads.head_b[v] += dv;
                for c in 0..dm {
                    dfinal[c * len + l] += dv * head[v * dm + c];
                }
            }
        }
    }
    // Head weight grads (into embed when tied).
    let dhead = if p.cfg.tie_embedding { &mut grads.embed } else { &mut grads.head };
    for l in 0..len {
        for v in 0..vocab {
            let dv = dlogits[l * vocab + v];
            if dv != 0.0 {
                for c in 0..dm {
                    dhead[v * dm + c] += dv * cache.final_out[c * len + l];
                }
            }
        }
    }
    let (mut dx, dg) = rmsnorm_lanes_backward(
        &cache.final_in,
        &p.final_norm_g,
        &cache.final_inv,
        &dfinal,
        dm,
        len,
    );
    for (a, b) in grads.final_norm_g.iter_mut().zip(dg.iter()) {
        *a += b;
    }
    for i in (0..p.blocks.len()).rev() {
        dx = block_backward(&p.blocks[i], &cache.block_caches[i], &dx, &mut grads.blocks[i])?;
    }
    for (l, &t) in cache.tokens.iter().enumerate() {
        for c in 0..dm {
            grads.embed[t * dm + c] += dx[c * len + l];
        }
    }
    Ok(())
}

/// Greedy per-position argmax over the vocabulary.
pub fn argmax_tokens(logits: &[f64], vocab: usize) -> Vec<usize> {
    logits
        .chunks(vocab)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

// ── Constructive showcase: a hand-set mod-2 counter in a block ─────────

/// Hand-set single-'a'-block model that reads out the parity of a bit
/// string at its last position.
///
/// Construction: tokens 0/1 embed to (1, ±1), so channel 0 of the x-path is
/// the constant 1 and a difference conv kernel turns it into a one-shot
/// impulse at t = 0 that drives the rotating state to 1. Channel 1 carries
/// the token through a delay-by-one conv kernel; the angle map sends the
/// delayed token values to rotations of 0 (bit 0) or π (bit 1), so by
/// position t the state phase encodes the parity of bits 0..t-1. The silu
/// gate supplies the missing current bit: its sign is positive for bit 0
/// and negative for bit 1. The head maps the sign of the result to class
/// 0 (even) or 1 (odd).
pub fn handset_parity_model() -> ModelParams {
    let mut cfg = ModelConfig::new("a", 4, 2, 1);
    cfg.expand = 1; // d_inner = 2
    cfg.conv_width = 4;
    let mut p = ModelParams::zeros(cfg).unwrap();

    // Embedding: bit 0 -> (1, 1), bit 1 -> (1, -1); ACT/PAD -> 0.
    p.embed[0] = 1.0;
    p.embed[1] = 1.0;
    p.embed[2] = 1.0;
    p.embed[3] = -1.0;

    let b = &mut p.blocks[0];
    // x-projection: ch0 = coord0 (constant 1 on bits), ch1 = 2·coord1.
    b.w_x[0] = 1.0; // ch0 <- coord0
    b.w_x[3] = 2.0; // ch1 <- coord1
    // Conv: ch0 difference kernel (impulse at t=0), ch1 delay-by-one.
    b.conv_w[0..4].copy_from_slice(&[0.0, 0.0, -1.0, 1.0]);
    b.conv_w[4..8].copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
    // Gate: ch0 gate sees the current token, sign-flipping on bit 1:
    // z = 1.5·coord1 + 0.5 -> silu(2) > 0 for bit 0, silu(-1) < 0 for bit 1.
    b.w_z[1] = 1.5;
    b.b_z[0] = 0.5;

    let v0 = silu(2.0); // delayed-channel value for bit 0
    let v1 = silu(-2.0); // for bit 1
    let imp = silu(1.0); // impulse magnitude after the activation
    let kernel = match &mut b.kernel {
        KernelParams::Aussm(k) => k,
        KernelParams::Mamba(_) => unreachable!(),
    };
    // Δ ≡ 1; channel-0 state reads the delayed token channel with an affine
    // angle map sending v0 -> 0 and v1 -> π.
    kernel.chi_delta_bias.fill(1.0);
    let chi_a = std::f64::consts::PI / (v1 - v0);
    kernel.chi[1] = chi_a; // chi[i=0, j=0, r=1]
    kernel.chi_bias[0] = -chi_a * v0;
    // Unit drive from the impulse: r_b·imp = 1.
    kernel.r_b[0] = 1.0 / imp;
    kernel.r_c[0] = 1.0;

    // Output projection reads the gated channel 0 into model coordinate 0
    // with enough gain to dominate the residual stream.
    b.w_out[0] = 10.0;
    // Head: sign of coordinate 0 decides class 0 (even) vs class 1 (odd).
    p.head[0] = 1.0; // class 0 <- +coord0
    p.head[2] = -1.0; // class 1 <- -coord0
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::aussm::aussm_recurrent_reference;
    use crate::oracle::parity_label;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmsnorm_reference_values() {
        let out = rmsnorm(&[2.0, 2.0], &[1.0, 1.0]);
        assert!((out[0] - 1.0).abs() < 1e-8 && (out[1] - 1.0).abs() < 1e-8);
        let out = rmsnorm(&[0.0, 0.0], &[3.0, -1.0]);
        assert_eq!(out, vec![0.0, 0.0]);
        let out = rmsnorm(&[3.0, 4.0], &[1.0, 1.0]);
        assert!((out[0] - 0.8485281374).abs() < 1e-9);
        assert!((out[1] - 1.1313708499).abs() < 1e-9);
    }

    #[test]
    fn rmsnorm_is_scale_equivariant_for_positive_factors() {
        let x = [0.3, -1.2, 0.7, 2.0];
        let g = [1.0, 0.5, -0.3, 2.0];
        let base = rmsnorm(&x, &g);
        let scaled_in: Vec<f64> = x.iter().map(|v| v * 4.0).collect();
        let scaled = rmsnorm(&scaled_in, &g);
        for (a, b) in base.iter().zip(scaled.iter()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    fn tiny_model(pattern: &str, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::new(pattern, 5, 4, 2);
        ModelParams::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn zeroed_output_projection_makes_the_block_an_identity() {
        let mut model = tiny_model("am", 3);
        for b in &mut model.blocks {
            b.w_out.fill(0.0);
            b.b_out.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let len = 7;
        let x: Vec<f64> = (0..4 * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, _) = block_forward(&model.blocks[0], &x, len).unwrap();
        assert_eq!(out, x);
        let (out, _) = block_forward(&model.blocks[1], &x, len).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_length_sequence_passes_through() {
        let model = tiny_model("ma", 5);
        let (logits, _) = model_forward(&model, &[]).unwrap();
        assert!(logits.is_empty());
        let (out, _) = block_forward(&model.blocks[0], &[], 0).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn block_matches_straight_line_composition() {
        // Independent recomputation: plain loops plus the recurrent kernel
        // reference, no shared layer code.
        let model = tiny_model("a", 11);
        let b = &model.blocks[0];
        let (dm, di, len) = (4usize, 8usize, 6usize);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..dm * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, _) = block_forward(b, &x, len).unwrap();

        // Position-major projections.
        let mut xps = vec![0.0; len * di];
        let mut zps = vec![0.0; len * di];
        for l in 0..len {
            let col: Vec<f64> = (0..dm).map(|c| x[c * len + l]).collect();
            let normed = rmsnorm(&col, &b.norm_g);
            for o in 0..di {
                let mut xp = b.b_x[o];
                let mut zp = b.b_z[o];
                for c in 0..dm {
                    xp += b.w_x[o * dm + c] * normed[c];
                    zp += b.w_z[o * dm + c] * normed[c];
                }
                xps[l * di + o] = xp;
                zps[l * di + o] = zp;
            }
        }
        // Causal conv + silu, then the recurrent kernel reference.
        let width = b.cfg.conv_width;
        let mut u = SeqTensor::zeros(1, di, len);
        for o in 0..di {
            for l in 0..len {
                let mut acc = b.conv_b[o];
                for w in 0..width {
                    let t = l as isize - (width as isize - 1) + w as isize;
                    if t >= 0 {
                        acc += b.conv_w[o * width + w] * xps[t as usize * di + o];
                    }
                }
                u.data[o * len + l] = silu(acc);
            }
        }
        let k = match &b.kernel {
            KernelParams::Aussm(k) => k,
            _ => unreachable!(),
        };
        let y = aussm_recurrent_reference(k, &u, None, None).unwrap();
        let mut expect = x.clone();
        for l in 0..len {
            for c in 0..dm {
                let mut acc = b.b_out[c];
                for o in 0..di {
                    acc += b.w_out[c * di + o] * y.data[o * len + l] * silu(zps[l * di + o]);
                }
                expect[c * len + l] += acc;
            }
        }
        for (got, want) in out.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn idempotent_stack_keeps_logits_context_free() {
        let mut model = tiny_model("m", 21);
        model.blocks[0].w_out.fill(0.0);
        model.blocks[0].b_out.fill(0.0);
        let (l1, _) = model_forward(&model, &[1, 2, 1, 4]).unwrap();
        let (l2, _) = model_forward(&model, &[3, 2, 0, 1]).unwrap();
        let vocab = 5;
        // Same token -> same logits, independent of position and context.
        assert_eq!(l1[vocab..2 * vocab], l2[vocab..2 * vocab]); // token 2
        assert_eq!(l1[0..vocab], l2[3 * vocab..4 * vocab]); // token 1
    }

    #[test]
    fn pattern_order_matters() {
        let ma = tiny_model("ma", 31);
        let mut am = ma.clone();
        am.cfg.pattern = "am".into();
        am.blocks.reverse();
        let tokens = [0usize, 1, 2, 3, 4, 1];
        let (l1, _) = model_forward(&ma, &tokens).unwrap();
        let (l2, _) = model_forward(&am, &tokens).unwrap();
        let diff = l1
            .iter()
            .zip(l2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-6, "block order had no effect");
    }

    #[test]
    fn causality_later_tokens_do_not_leak_backwards() {
        let model = tiny_model("ma", 41);
        let a = [0usize, 1, 2, 3, 0, 1, 2];
        let mut b = a;
        b[5] = 4;
        let (la, _) = model_forward(&model, &a).unwrap();
        let (lb, _) = model_forward(&model, &b).unwrap();
        let vocab = 5;
        assert_eq!(la[..5 * vocab], lb[..5 * vocab], "prefix logits changed");
        assert_ne!(la[5 * vocab..], lb[5 * vocab..]);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let model = tiny_model("m", 51);
        assert!(matches!(model_forward(&model, &[0, 7]), Err(Error::Input(_))));
    }

    #[test]
    fn handset_counter_reads_out_parity() {
        let model = handset_parity_model();
        let (logits, _) = model_forward(&model, &[1, 1, 0, 1]).unwrap();
        let preds = argmax_tokens(&logits, 4);
        assert_eq!(preds[3], 1, "parity of [1,1,0,1] must decode as class 1");

        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..200 {
            let len = rng.gen_range(1..=100);
            let bits: Vec<usize> = (0..len).map(|_| rng.gen_range(0..2usize)).collect();
            let expect = parity_label(&bits).unwrap();
            let (logits, _) = model_forward(&model, &bits).unwrap();
            let preds = argmax_tokens(&logits, 4);
            assert_eq!(preds[len - 1], expect, "bits={bits:?}");
        }
    }

    #[test]
    fn model_gradcheck_against_finite_differences() {
        use crate::kernels::fd;
        let model = tiny_model("ma", 71);
        let tokens = [0usize, 2, 4, 1, 3, 2, 0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let probe: Vec<f64> = (0..tokens.len() * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let (_, cache) = model_forward(&model, &tokens).unwrap();
        let mut grads = ModelGrads::zeros(&model);
        model_backward(&model, &cache, &probe, &mut grads).unwrap();
        let analytic = grads.named_tensors();

        let numeric = fd::numeric_grads(
            &model,
            |m| {
                let (logits, _) = model_forward(m, &tokens).unwrap();
                logits.iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
            },
            fd::FD_STEP,
        );
        let report = fd::compare_named(&analytic, &numeric);
        assert!(
            report.max_rel_err < 1e-5,
            "model gradcheck failed: {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn tied_embedding_shares_the_head_matrix() {
        let mut cfg = ModelConfig::new("m", 5, 4, 2);
        cfg.tie_embedding = true;
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let model = ModelParams::init(cfg, &mut rng).unwrap();
        assert!(model.head.is_empty());
        let tokens = [0usize, 1, 2];
        let (logits, cache) = model_forward(&model, &tokens).unwrap();
        assert_eq!(logits.len(), 3 * 5);
        // Gradcheck the tied path too.
        use crate::kernels::fd;
        let probe: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut grads = ModelGrads::zeros(&model);
        model_backward(&model, &cache, &probe, &mut grads).unwrap();
        let analytic = grads.named_tensors();
        let numeric = fd::numeric_grads(
            &model,
            |m| {
                let (lg, _) = model_forward(m, &tokens).unwrap();
                lg.iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
            },
            fd::FD_STEP,
        );
        let report = fd::compare_named(&analytic, &numeric);
        assert!(report.max_rel_err < 1e-5, "{} at {}", report.max_rel_err, report.worst);
    }
}
