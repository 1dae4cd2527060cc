//! Recurrent write-rule hosts.
//!
//! Three per-head cache write rules over a d_k × d_v state S (d_state × 1 for
//! the diagonal rule):
//!
//! ```text
//! gated delta:    S' = α (I − β k kᵀ) S + β k vᵀ          α ∈ (0,1], β ∈ [0,1]
//! ungated delta:  same with α ≡ 1
//! diagonal ssm:   s' = decay ∘ s + dt · B · x             decay ∈ (0,1]^d
//! ```
//!
//! The read is o = S'ᵀ q (read-after-write). A small language model stacks
//! per-head mixers with residual MLPs: embedding → n_layers of {recurrent
//! mixer + elementwise MLP} → unembedding. Layer ℓ at position t reads only
//! layer ℓ−1 at position t, so a state perturbation in one cell propagates
//! through that cell by multiplication with matrices the model computes
//! anyway — the property the perturbation oracle in `predictor` relies on.
//!
//! Keys and queries are L2-normalized by the projection, which keeps the
//! delta-rule correction a contraction.

mod train;

pub use train::{train_toy_host, train_toy_host_with, HostTrainConfig, HostTrainMetrics};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mat::{dot, norm, softmax, Mat};
use crate::{subseed, Cell, Error, Result};

pub use crate::Token;

/// Which recurrence the host runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteRule {
    GatedDelta,
    DeltaNetUngated,
    DiagonalSsm,
}

/// Host architecture configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostConfig {
    pub write_rule: WriteRule,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// Elementwise MLP after each mixer; disabling it yields the
    /// linear-readout host used by the predictor's exactness checks.
    pub use_mlp: bool,
    pub seed: u64,
}

impl HostConfig {
    /// Reference toy dimensions: d_k = d_v = 16, d_model = 64, vocab 64,
    /// 2 layers × 2 heads.
    pub fn toy(write_rule: WriteRule, seed: u64) -> Self {
        HostConfig {
            write_rule,
            n_layers: 2,
            n_heads: 2,
            d_k: 16,
            d_v: 16,
            d_model: 64,
            vocab_size: 64,
            use_mlp: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Column count of the per-head state: d_v, or 1 for the diagonal rule
    /// (the state is a d_state vector; d_k doubles as d_state).
    pub fn state_cols(&self) -> usize {
        match self.write_rule {
            WriteRule::DiagonalSsm => 1,
            _ => self.d_v,
        }
    }
}

/// One token's write tuple at one cell, plus position metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteEvent {
    pub seq_id: u64,
    pub position: u32,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl WriteEvent {
    /// The native write matrix β k vᵀ this event added to the cache.
    pub fn native_write(&self) -> Mat {
        let mut m = Mat::outer(&self.k, &self.v);
        m.scale(self.beta);
        m
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.k.iter().chain(&self.v).chain(&self.q).all(|x| x.is_finite())
            && self.alpha.is_finite()
            && self.beta.is_finite();
        if !finite {
            return Err(Error::Numeric("write event contains non-finite values".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Numeric(format!("alpha {} outside (0,1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Numeric(format!("beta {} outside [0,1]", self.beta)));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Step operations
// ---------------------------------------------------------------------------

/// One gated-delta-rule step: S' = α(I − β k kᵀ)S + β k vᵀ, read o = S'ᵀ q.
///
/// The ungated DeltaNet step is this with α = 1 in the event.
pub fn gdn_step(s: &Mat, e: &WriteEvent) -> Result<(Mat, Vec<f64>)> {
    if e.k.len() != s.rows || e.v.len() != s.cols || e.q.len() != s.rows {
        return Err(Error::Shape(format!(
            "event dims (k {}, v {}, q {}) do not match state {}x{}",
            e.k.len(),
            e.v.len(),
            e.q.len(),
            s.rows,
            s.cols
        )));
    }
    if !s.is_finite() {
        return Err(Error::Numeric("non-finite state".into()));
    }
    e.validate()?;
    let mut s2 = s.clone();
    gdn_step_inplace(&mut s2, &e.k, &e.v, e.alpha, e.beta);
    let o = s2.matvec_t(&e.q);
    Ok((s2, o))
}

#[inline]
pub(crate) fn gdn_step_inplace(s: &mut Mat, k: &[f64], v: &[f64], alpha: f64, beta: f64) {
    // m = Sᵀ k, then S ← α(S − β k mᵀ) + β k vᵀ.
    let m = s.matvec_t(k);
    s.add_outer(k, &m, -beta);
    s.scale(alpha);
    s.add_outer(k, v, beta);
}

/// One diagonal-SSM step: s' = decay ∘ s + dt · B · x.
pub fn diag_ssm_step(s: &[f64], b: &[f64], x: f64, dt: f64, decay: &[f64]) -> Result<Vec<f64>> {
    if b.len() != s.len() || decay.len() != s.len() {
        return Err(Error::Shape("diag_ssm_step length mismatch".into()));
    }
    let finite = s.iter().chain(b).chain(decay).all(|v| v.is_finite()) && x.is_finite() && dt.is_finite();
    if !finite {
        return Err(Error::Numeric("non-finite diagonal-ssm input".into()));
    }
    if decay.iter().any(|d| !(*d > 0.0 && *d <= 1.0)) {
        return Err(Error::Numeric("decay entries must lie in (0,1]".into()));
    }
    Ok(s.iter().zip(b).zip(decay).map(|((si, bi), di)| di * si + dt * bi * x).collect())
}

// ---------------------------------------------------------------------------
// Model parameters
// ---------------------------------------------------------------------------

/// Per-head projections and gate parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadParams {
    pub w_k: Mat,
    pub w_q: Mat,
    pub w_v: Mat,
    /// Head-output projection (d_v_eff × d_model); contribution is w_oᵀ o.
    pub w_o: Mat,
    /// Forget-gate log-scale: one entry for the gated delta rule, d_state
    /// entries for the diagonal rule, unused when ungated.
    pub a_log: Vec<f64>,
    pub w_dt: Vec<f64>,
    pub b_dt: f64,
    pub w_beta: Vec<f64>,
    pub b_beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    pub mlp: Option<MlpParams>,
}

/// A small recurrent language model over one of the write rules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HostModel {
    pub config: HostConfig,
    pub embed: Mat,
    pub layers: Vec<LayerParams>,
    pub unembed: Mat,
}

impl HostModel {
    /// Seeded random initialization; untrained logits start near zero so the
    /// initial loss sits at ln(vocab).
    pub fn init(config: HostConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, 0x11057, 0));
        let d = config.d_model;
        let dv = config.state_cols();
        let gauss = |std: f64, rng: &mut ChaCha8Rng| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen::<f64>();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let mat = |r: usize, c: usize, std: f64, rng: &mut ChaCha8Rng| {
            let mut m = Mat::zeros(r, c);
            for v in &mut m.data {
                *v = gauss(std, rng);
            }
            m
        };
        let embed = mat(config.vocab_size, d, 0.5, &mut rng);
        let proj_std = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut heads = Vec::with_capacity(config.n_heads);
            for h in 0..config.n_heads {
                let w_k = mat(config.d_k, d, proj_std, &mut rng);
                let w_q = mat(config.d_k, d, proj_std, &mut rng);
                let w_v = mat(dv, d, proj_std, &mut rng);
                let w_o = mat(dv, d, 0.3 * proj_std, &mut rng);
                // Log-spaced decay spectrum across heads: head 0 starts slow
                // (long memory), the last head fast (write-dominated state).
                let frac = if config.n_heads > 1 { h as f64 / (config.n_heads - 1) as f64 } else { 0.0 };
                let a_center = 0.7 * (6.0f64 / 0.7).powf(frac);
                let a_log_len = match config.write_rule {
                    WriteRule::DiagonalSsm => config.d_k,
                    _ => 1,
                };
                let a_log: Vec<f64> = (0..a_log_len)
                    .map(|_| (a_center * rng.gen_range(0.8..1.25)).ln())
                    .collect();
                let dt0: f64 = 0.02 * (0.3f64 / 0.02).powf(frac) * rng.gen_range(0.8..1.25);
                // b_dt = softplus⁻¹(dt0)
                let b_dt = (dt0.exp() - 1.0).ln();
                let w_dt: Vec<f64> = (0..d).map(|_| gauss(0.5 * proj_std, &mut rng)).collect();
                let w_beta: Vec<f64> = (0..d).map(|_| gauss(0.5 * proj_std, &mut rng)).collect();
                heads.push(HeadParams { w_k, w_q, w_v, w_o, a_log, w_dt, b_dt, w_beta, b_beta: 0.0 });
            }
            let mlp = if config.use_mlp {
                let hdim = d;
                Some(MlpParams {
                    w1: mat(hdim, d, proj_std, &mut rng),
                    b1: vec![0.0; hdim],
                    w2: mat(d, hdim, 0.25 / (hdim as f64).sqrt(), &mut rng),
                    b2: vec![0.0; d],
                })
            } else {
                None
            };
            layers.push(LayerParams { heads, mlp });
        }
        let unembed = mat(config.vocab_size, d, 0.02, &mut rng);
        Ok(HostModel { config, embed, layers, unembed })
    }

    /// Fresh zero cache for every cell.
    pub fn init_state(&self) -> HostState {
        let cols = self.config.state_cols();
        HostState {
            cells: (0..self.config.n_layers)
                .map(|_| (0..self.config.n_heads).map(|_| Mat::zeros(self.config.d_k, cols)).collect())
                .collect(),
            pos: 0,
        }
    }

    /// Direction in head-output space whose alignment raises `tok`'s logit
    /// through the residual path: W_O[head] · W_U[tok].
    pub fn unembed_direction(&self, cell: Cell, tok: Token) -> Vec<f64> {
        let head = &self.layers[cell.0].heads[cell.1];
        head.w_o.matvec(self.unembed.row(tok as usize))
    }

    /// Advance one token; returns the next-token logits.
    pub fn step(&self, st: &mut HostState, token: Token) -> Result<Vec<f64>> {
        let mut hook = |_: &mut EditCtx<'_>| {};
        let mut obs = |_: usize, _: usize, _: &WriteEvent, _: &Mat, _: &[f64]| {};
        self.step_inner(st, token, &mut hook, &mut obs)
    }

    fn step_inner(
        &self,
        st: &mut HostState,
        token: Token,
        hook: &mut dyn FnMut(&mut EditCtx<'_>),
        observer: &mut dyn FnMut(usize, usize, &WriteEvent, &Mat, &[f64]),
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if token as usize >= cfg.vocab_size {
            return Err(Error::Config(format!("token {token} out of vocabulary range {}", cfg.vocab_size)));
        }
        let pos = st.pos;
        let mut x: Vec<f64> = self.embed.row(token as usize).to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut resid = vec![0.0; cfg.d_model];
            for (h, head) in layer.heads.iter().enumerate() {
                let k = unit_or_zero(&head.w_k.matvec(&x));
                let q = unit_or_zero(&head.w_q.matvec(&x));
                let v = head.w_v.matvec(&x);
                let s = &mut st.cells[l][h];
                let event = match cfg.write_rule {
                    WriteRule::GatedDelta | WriteRule::DeltaNetUngated => {
                        let beta = sigmoid(dot(&head.w_beta, &x) + head.b_beta);
                        let alpha = if cfg.write_rule == WriteRule::DeltaNetUngated {
                            1.0
                        } else {
                            let g = -head.a_log[0].exp() * softplus(dot(&head.w_dt, &x) + head.b_dt);
                            g.exp()
                        };
                        gdn_step_inplace(s, &k, &v, alpha, beta);
                        WriteEvent { seq_id: 0, position: pos as u32, k, v, q, alpha, beta }
                    }
                    WriteRule::DiagonalSsm => {
                        let dt = softplus(dot(&head.w_dt, &x) + head.b_dt);
                        let scale = dt * v[0];
                        let mut mean_log = 0.0;
                        for (i, a) in head.a_log.iter().enumerate() {
                            let g = -a.exp() * dt;
                            s.data[i] = g.exp() * s.data[i] + scale * k[i];
                            mean_log += g;
                        }
                        mean_log /= cfg.d_k as f64;
                        // The event folds dt into the value so β k vᵀ is the
                        // exact write; alpha summarizes the decay vector.
                        WriteEvent {
                            seq_id: 0,
                            position: pos as u32,
                            k,
                            v: vec![scale],
                            q,
                            alpha: mean_log.exp(),
                            beta: 1.0,
                        }
                    }
                };
                let mut ctx = EditCtx { layer: l, head: h, position: pos, event: &event, state: s };
                hook(&mut ctx);
                let o = s.matvec_t(&event.q);
                observer(l, h, &event, s, &o);
                let add = head.w_o.matvec_t(&o);
                for (r, a) in resid.iter_mut().zip(&add) {
                    *r += a;
                }
            }
            for (xi, ri) in x.iter_mut().zip(&resid) {
                *xi += ri;
            }
            if let Some(mlp) = &layer.mlp {
                let mut hpre = mlp.w1.matvec(&x);
                for (hp, b) in hpre.iter_mut().zip(&mlp.b1) {
                    *hp = (*hp + b).tanh();
                }
                let add = mlp.w2.matvec(&hpre);
                for ((xi, a), b) in x.iter_mut().zip(&add).zip(&mlp.b2) {
                    *xi += a + b;
                }
            }
        }
        let logits = self.unembed.matvec(&x);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits at position {pos}")));
        }
        st.pos += 1;
        Ok(logits)
    }

    /// Full forward pass recording every cell.
    pub fn forward(&self, tokens: &[Token]) -> Result<ForwardTrace> {
        let mut hook = |_: &mut EditCtx<'_>| {};
        self.forward_with(tokens, TraceMode::Full, &mut hook)
    }

    /// Forward pass with a cache-edit hook and a choice of what to record.
    pub fn forward_with(
        &self,
        tokens: &[Token],
        mode: TraceMode,
        hook: &mut dyn FnMut(&mut EditCtx<'_>),
    ) -> Result<ForwardTrace> {
        let mut trace = ForwardTrace {
            tokens: tokens.to_vec(),
            cells: (0..self.config.n_layers)
                .map(|_| (0..self.config.n_heads).map(|_| CellTrace::default()).collect())
                .collect(),
            logits: Vec::with_capacity(tokens.len()),
        };
        let mut st = self.init_state();
        for &t in tokens {
            let logits = {
                let cells = &mut trace.cells;
                let mut obs = |l: usize, h: usize, e: &WriteEvent, s: &Mat, o: &[f64]| {
                    let keep = match mode {
                        TraceMode::Full => true,
                        TraceMode::Cell(c) => c == (l, h),
                        TraceMode::Logits => false,
                    };
                    if keep {
                        let ct = &mut cells[l][h];
                        ct.states.push(s.clone());
                        ct.events.push(e.clone());
                        ct.outputs.push(o.to_vec());
                    }
                };
                self.step_inner(&mut st, t, hook, &mut obs)?
            };
            trace.logits.push(logits);
        }
        Ok(trace)
    }

    /// Greedy argmax decoding for `n` steps; the hook may mutate per-head
    /// states before any step. Without a hook the output is a pure function
    /// of (model, prompt).
    pub fn generate_greedy(
        &self,
        prompt: &[Token],
        n: usize,
        mut hook: Option<&mut dyn FnMut(&mut EditCtx<'_>)>,
    ) -> Result<Vec<Token>> {
        if n == 0 {
            return Err(Error::Config("generate_greedy requires n >= 1".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Config("generate_greedy requires a nonempty prompt".into()));
        }
        let mut noop = |_: &mut EditCtx<'_>| {};
        let mut st = self.init_state();
        let mut logits = vec![0.0; self.config.vocab_size];
        for &t in prompt {
            let hk: &mut dyn FnMut(&mut EditCtx<'_>) = match hook.as_deref_mut() {
                Some(h) => h,
                None => &mut noop,
            };
            let mut obs = |_: usize, _: usize, _: &WriteEvent, _: &Mat, _: &[f64]| {};
            logits = self.step_inner(&mut st, t, hk, &mut obs)?;
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let tok = argmax(&logits) as Token;
            out.push(tok);
            if out.len() == n {
                break;
            }
            let hk: &mut dyn FnMut(&mut EditCtx<'_>) = match hook.as_deref_mut() {
                Some(h) => h,
                None => &mut noop,
            };
            let mut obs = |_: usize, _: usize, _: &WriteEvent, _: &Mat, _: &[f64]| {};
            logits = self.step_inner(&mut st, tok, hk, &mut obs)?;
        }
        Ok(out)
    }
}

/// Lowest-index argmax (deterministic under exact ties).
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn unit_or_zero(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n < 1e-12 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-head recurrent cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct HostState {
    pub cells: Vec<Vec<Mat>>,
    pub pos: usize,
}

/// What a forward pass records per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Full,
    Cell(Cell),
    Logits,
}

#[derive(Debug, Clone, Default)]
pub struct CellTrace {
    /// Post-write state snapshots, one per position.
    pub states: Vec<Mat>,
    pub events: Vec<WriteEvent>,
    pub outputs: Vec<Vec<f64>>,
}

/// Full record of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<Token>,
    pub cells: Vec<Vec<CellTrace>>,
    /// Next-token logits per position.
    pub logits: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn cell(&self, cell: Cell) -> &CellTrace {
        &self.cells[cell.0][cell.1]
    }

    pub fn probs(&self, pos: usize) -> Vec<f64> {
        softmax(&self.logits[pos])
    }

    /// Next-token distribution at the final position.
    pub fn final_probs(&self) -> Vec<f64> {
        self.probs(self.logits.len() - 1)
    }
}

/// Mutable view handed to cache-edit hooks right after a write, before the
/// read at the same position.
pub struct EditCtx<'a> {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub event: &'a WriteEvent,
    pub state: &'a mut Mat,
}
