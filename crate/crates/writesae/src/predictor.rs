//! Logit-change prediction for rank-1 cache perturbations.
//!
//! Injecting δS = ε · kf ofᵀ into a cell at position t₀ propagates through
//! the delta-rule recurrence as
//!
//! ```text
//! δS_{s+1} = α_{s+1} (I − β_{s+1} k_{s+1} k_{s+1}ᵀ) δS_s
//! ```
//!
//! exactly, because the additive write cancels when differencing perturbed
//! and native trajectories. Reading with q_t and projecting through the
//! head-output path gives the three-factor prediction
//!
//! ```text
//! Δℓ_tok ≈ G · ⟨kf, q_t⟩ · ⟨of, u_tok⟩,        u_tok = W_O[head] · W_U[tok]
//! ```
//!
//! where G absorbs the gate product and the downstream rescaling; the gate
//! product G^α = ∏ α_s is the analytic reference. The convention throughout:
//! the query couples to the propagated left (key-side) factor and the
//! unembedding to the right (output-side) factor.

use serde::{Deserialize, Serialize};

use crate::hosts::{EditCtx, ForwardTrace, HostModel, TraceMode, WriteEvent};
use crate::mat::{dot, Mat};
use crate::{subseed, Cell, Error, Result, Token};

/// A rank-1 cache perturbation δS = ε · key_factor · out_factorᵀ injected at
/// one position of one cell (after that position's write).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub cell: Cell,
    pub position: usize,
    pub eps: f64,
    /// Left factor (d_k); couples to later keys and the read query.
    pub key_factor: Vec<f64>,
    /// Right factor (d_v); couples to the unembedding path.
    pub out_factor: Vec<f64>,
}

impl PerturbationSpec {
    pub fn delta(&self) -> Mat {
        let mut m = Mat::outer(&self.key_factor, &self.out_factor);
        m.scale(self.eps);
        m
    }
}

/// One fitted scalar G with its fit quality and the analytic gate product.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GFit {
    pub g: f64,
    pub r2: f64,
    pub n_points: usize,
    pub gate_product: f64,
    pub degenerate: bool,
}

/// Exact propagation of δS through the events at positions t₀+1..t
/// (full matrix product, not the rank-1 approximation).
pub fn propagate_perturbation(delta0: &Mat, events: &[WriteEvent]) -> Mat {
    let mut d = delta0.clone();
    for e in events {
        // δ ← α (I − β k kᵀ) δ  =  α (δ − β k (kᵀ δ))
        let m = d.matvec_t(&e.k);
        d.add_outer(&e.k, &m, -e.beta);
        d.scale(e.alpha);
    }
    d
}

/// ∏ α_s over the events strictly after the injection up to the read.
pub fn gate_product(events: &[WriteEvent]) -> f64 {
    events.iter().map(|e| e.alpha).product()
}

/// Three-factor prediction G · ⟨key_factor, q⟩ · ⟨out_factor, u_tok⟩.
pub fn predict_logit_delta(g: f64, key_factor: &[f64], q: &[f64], out_factor: &[f64], u_tok: &[f64]) -> f64 {
    g * dot(key_factor, q) * dot(out_factor, u_tok)
}

/// Measured logit change of `tok` at the final position under the injected
/// perturbation: two independent forward passes.
pub fn measure_logit_delta(
    model: &HostModel,
    tokens: &[Token],
    spec: &PerturbationSpec,
    tok: Token,
) -> Result<f64> {
    if spec.position >= tokens.len() {
        return Err(Error::Config("perturbation position beyond sequence".into()));
    }
    let base = model.forward(tokens)?;
    let patched = forward_with_injection(model, tokens, spec)?;
    let last = tokens.len() - 1;
    Ok(patched.logits[last][tok as usize] - base.logits[last][tok as usize])
}

/// Forward pass with δS added to the cell's post-write state at one position.
pub fn forward_with_injection(
    model: &HostModel,
    tokens: &[Token],
    spec: &PerturbationSpec,
) -> Result<ForwardTrace> {
    let delta = spec.delta();
    let mut hook = |ctx: &mut EditCtx<'_>| {
        if (ctx.layer, ctx.head) == spec.cell && ctx.position == spec.position {
            ctx.state.add_scaled(&delta, 1.0);
        }
    };
    model.forward_with(tokens, TraceMode::Full, &mut hook)
}

/// Least-squares fit of the scalar G through the origin:
/// G = Σxy / Σx², with R² = 1 − SS_res/SS_tot.
pub fn fit_g(points: &[(f64, f64)], gate_prod: f64) -> Result<GFit> {
    if points.len() < 2 {
        return Err(Error::Config("fit_g requires at least 2 points".into()));
    }
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    if sxx <= 1e-300 {
        return Ok(GFit { g: 0.0, r2: 0.0, n_points: points.len(), gate_product: gate_prod, degenerate: true });
    }
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let g = sxy / sxx;
    Ok(GFit { g, r2: r_squared(points, g), n_points: points.len(), gate_product: gate_prod, degenerate: false })
}

/// R² of predictions y ≈ g·x against measured y.
pub fn r_squared(points: &[(f64, f64)], g: f64) -> f64 {
    let n = points.len() as f64;
    let ybar: f64 = points.iter().map(|(_, y)| y).sum::<f64>() / n;
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - ybar) * (y - ybar)).sum();
    let ss_res: f64 = points.iter().map(|(x, y)| (y - g * x) * (y - g * x)).sum();
    if ss_tot <= 0.0 {
        if ss_res <= 1e-300 {
            return 1.0;
        }
        return f64::NEG_INFINITY;
    }
    1.0 - ss_res / ss_tot
}

/// Eval-token set at a position: the top 5 tokens of the baseline
/// distribution plus 5 seeded random others.
pub fn eval_tokens(base_logits: &[f64], seed: u64) -> Vec<Token> {
    let mut idx: Vec<usize> = (0..base_logits.len()).collect();
    idx.sort_by(|&a, &b| base_logits[b].partial_cmp(&base_logits[a]).unwrap().then(a.cmp(&b)));
    let mut out: Vec<Token> = idx[..5.min(idx.len())].iter().map(|&i| i as Token).collect();
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(subseed(seed, 0xe7a1, 0));
    let mut guard = 0;
    while out.len() < 10.min(base_logits.len()) && guard < 1000 {
        let t = rng.gen_range(0..base_logits.len()) as Token;
        if !out.contains(&t) {
            out.push(t);
        }
        guard += 1;
    }
    out
}

/// One full fitted-G audit for a (feature, sequence, horizon) triple:
/// measure Δℓ for the eval tokens at each ε, fit a single G across them.
///
/// Uses the composed direction u_tok = W_O[head] · W_U[tok]; the x
/// coordinate of each point is ε·⟨kf, q_T⟩·⟨of, u_tok⟩.
pub fn fit_feature_sequence(
    model: &HostModel,
    tokens: &[Token],
    cell: Cell,
    position: usize,
    key_factor: &[f64],
    out_factor: &[f64],
    eps_grid: &[f64],
    seed: u64,
) -> Result<GFit> {
    let base = model.forward(tokens)?;
    let last = tokens.len() - 1;
    let evals = eval_tokens(&base.logits[last], seed);
    let q_read = &base.cell(cell).events[last].q;
    let kf_q = dot(key_factor, q_read);
    let events = &base.cell(cell).events[position + 1..=last];
    let gate_prod = gate_product(events);
    let mut points = Vec::with_capacity(evals.len() * eps_grid.len());
    for &eps in eps_grid {
        let spec = PerturbationSpec {
            cell,
            position,
            eps,
            key_factor: key_factor.to_vec(),
            out_factor: out_factor.to_vec(),
        };
        let patched = forward_with_injection(model, tokens, &spec)?;
        for &tok in &evals {
            let u_tok = model.unembed_direction(cell, tok);
            let x = eps * kf_q * dot(out_factor, &u_tok);
            let y = patched.logits[last][tok as usize] - base.logits[last][tok as usize];
            points.push((x, y));
        }
    }
    fit_g(&points, gate_prod)
}

/// R² of the fixed analytic-G^α prediction pooled over many points; the
/// negative control on hosts whose decay is not a scalar gate.
pub fn analytic_gate_r2(points: &[(f64, f64)]) -> f64 {
    r_squared(points, 1.0)
}
