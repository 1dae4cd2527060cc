//! Cache steering interventions.
//!
//! The logit-change formula doubles as a controller: for a target token T it
//! picks the head-output direction v*_T = normalize(W_O[head] · W_U[T]) that
//! raises T's logit when written into the cache. This module implements
//! erasure at a feature's own firings, installs at non-firing positions,
//! single-position sign tests against the analytic prediction, multi-position
//! generation edits with dose sweeps, and coefficient amplification during
//! decoding with a dose-matched random-feature control.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::CaptureDataset;
use crate::hosts::{EditCtx, HostModel, TraceMode};
use crate::mat::{dot, normalized, Mat};
use crate::predictor::gate_product;
use crate::sae::Dictionary;
use crate::stats;
use crate::{subseed, Cell, Error, Result, Token};

/// Unit direction in head-output space that promotes one target token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteerDirection {
    pub target: Token,
    pub direction: Vec<f64>,
}

/// v*_T = normalize(W_O[head] · W_U[T]); degenerate when the target's
/// unembedding is orthogonal to the head's image.
pub fn steering_direction(model: &HostModel, cell: Cell, target: Token) -> Result<SteerDirection> {
    if target as usize >= model.config.vocab_size {
        return Err(Error::Config(format!("target {target} outside the vocabulary")));
    }
    let u = model.unembed_direction(cell, target);
    let direction = normalized(&u)
        .map_err(|_| Error::Degenerate(format!("target {target} is orthogonal to the head image")))?;
    Ok(SteerDirection { target, direction })
}

// ---------------------------------------------------------------------------
// Preferred token and erasure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreferredToken {
    pub token: Token,
    pub evidence_nats: f64,
    /// Summed evidence below 0.1 nats.
    pub indeterminate: bool,
    pub n_firings: usize,
}

/// Positions on the validation split where the feature's sparse coefficient
/// is nonzero: (seq_id, position, coefficient).
pub fn feature_firings(
    dataset: &CaptureDataset,
    dict: &Dictionary,
    feature: usize,
) -> Result<Vec<(u64, u32, f64)>> {
    if feature >= dict.n_f {
        return Err(Error::Config(format!("feature {feature} out of range")));
    }
    let pres: Vec<Vec<f64>> = dataset
        .val_idx
        .iter()
        .map(|&i| dict.encode(&dataset.raw_state(i)))
        .collect::<Result<_>>()?;
    let selected = dict.select(&pres)?;
    let mut out = Vec::new();
    for (&rec, sel) in dataset.val_idx.iter().zip(&selected) {
        if let Some(&(_, c)) = sel.iter().find(|(i, _)| *i == feature) {
            let w = &dataset.writes[rec];
            out.push((w.seq_id, w.position, c));
        }
    }
    Ok(out)
}

/// Per firing, sum log p_native − log p_delete per token id at the final
/// position; the argmax over the summed evidence is the preferred token.
pub fn preferred_token(
    model: &HostModel,
    corpus: &[Vec<Token>],
    firings: &[(u64, u32, f64)],
    cell: Cell,
) -> Result<PreferredToken> {
    if firings.is_empty() {
        return Err(Error::Config("preferred_token requires at least one firing".into()));
    }
    let vocab = model.config.vocab_size;
    let mut evidence = vec![0.0f64; vocab];
    for &(seq, pos, _) in firings {
        let tokens = &corpus[seq as usize];
        let p_nat = model.forward_with(tokens, TraceMode::Logits, &mut |_: &mut EditCtx<'_>| {})?.final_probs();
        let p_del = crate::causal::patched_final_probs(
            model,
            tokens,
            cell,
            pos as usize,
            &Mat::zeros(model.config.d_k, model.config.state_cols()),
        )?;
        for t in 0..vocab {
            evidence[t] += p_nat[t].max(1e-300).ln() - p_del[t].max(1e-300).ln();
        }
    }
    let best = crate::hosts::argmax(&evidence);
    Ok(PreferredToken {
        token: best as Token,
        evidence_nats: evidence[best],
        indeterminate: evidence[best] < 0.1,
        n_firings: firings.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EraseReport {
    pub n: usize,
    pub preferred: Token,
    /// Δlog p of the preferred token under write deletion, per firing.
    pub dlogp: Vec<f64>,
    pub median_dlogp: f64,
    pub mean_dlogp: f64,
    pub wilcoxon_p: f64,
    pub boot_ci: stats::Ci,
    pub native_rank_median: f64,
    pub patched_rank_median: f64,
}

/// Delete the write at each firing and measure the preferred token's log-
/// probability change at the final position.
pub fn erase_at_firings(
    model: &HostModel,
    corpus: &[Vec<Token>],
    firings: &[(u64, u32, f64)],
    preferred: Token,
    cell: Cell,
    seed: u64,
) -> Result<EraseReport> {
    if firings.len() < 10 {
        return Err(Error::Config("erasure requires at least 10 firings".into()));
    }
    let mut dlogp = Vec::with_capacity(firings.len());
    let mut ranks_nat = Vec::new();
    let mut ranks_del = Vec::new();
    for &(seq, pos, _) in firings {
        let tokens = &corpus[seq as usize];
        let p_nat = model.forward_with(tokens, TraceMode::Logits, &mut |_: &mut EditCtx<'_>| {})?.final_probs();
        let p_del = crate::causal::patched_final_probs(
            model,
            tokens,
            cell,
            pos as usize,
            &Mat::zeros(model.config.d_k, model.config.state_cols()),
        )?;
        let t = preferred as usize;
        dlogp.push(p_del[t].max(1e-300).ln() - p_nat[t].max(1e-300).ln());
        ranks_nat.push(rank_of(&p_nat, t) as f64);
        ranks_del.push(rank_of(&p_del, t) as f64);
    }
    let zeros = vec![0.0; dlogp.len()];
    let clusters: Vec<Vec<f64>> = dlogp.iter().map(|d| vec![*d]).collect();
    Ok(EraseReport {
        n: dlogp.len(),
        preferred,
        median_dlogp: stats::median(&dlogp),
        mean_dlogp: dlogp.iter().sum::<f64>() / dlogp.len() as f64,
        wilcoxon_p: stats::wilcoxon_signed_rank(&dlogp, &zeros, false)?.p,
        boot_ci: stats::cluster_bootstrap(
            &clusters,
            &|v| stats::median(v),
            5000,
            subseed(seed, 0xe7a5, 0),
            0.95,
        )?,
        native_rank_median: stats::median(&ranks_nat),
        patched_rank_median: stats::median(&ranks_del),
        dlogp,
    })
}

/// 1-based rank of token `t` in a distribution (lower index wins ties).
fn rank_of(p: &[f64], t: usize) -> usize {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    idx.iter().position(|&i| i == t).unwrap() + 1
}

// ---------------------------------------------------------------------------
// Installs at non-firing positions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DosePoint {
    pub magnitude: f64,
    pub n: usize,
    pub median_dlogp: f64,
    pub wilcoxon_p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoseReport {
    pub a_star: f64,
    pub points: Vec<DosePoint>,
}

/// Add m·a*·A_i at sampled non-firing positions (first 4 positions of each
/// sequence excluded) and report the preferred token's Δlog p per magnitude.
pub fn install_at_nonfiring(
    model: &HostModel,
    corpus: &[Vec<Token>],
    dataset: &CaptureDataset,
    dict: &Dictionary,
    feature: usize,
    preferred: Token,
    magnitudes: &[f64],
    n_positions: usize,
    seed: u64,
) -> Result<DoseReport> {
    let firings = feature_firings(dataset, dict, feature)?;
    if firings.is_empty() {
        return Err(Error::Config("feature never fires; no natural coefficient scale".into()));
    }
    let coefs: Vec<f64> = firings.iter().map(|f| f.2).collect();
    let a_star = stats::median(&coefs);
    // Non-firing validation positions.
    let firing_set: std::collections::BTreeSet<(u64, u32)> =
        firings.iter().map(|f| (f.0, f.1)).collect();
    let mut candidates: Vec<(u64, u32)> = Vec::new();
    for &i in &dataset.val_idx {
        let w = &dataset.writes[i];
        if w.position >= 4 && !firing_set.contains(&(w.seq_id, w.position)) {
            candidates.push((w.seq_id, w.position));
        }
    }
    if candidates.is_empty() {
        return Err(Error::Config("no non-firing positions available".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0xd05e, 0));
    candidates.shuffle(&mut rng);
    candidates.truncate(n_positions);
    let atom = dict.atom_matrix(feature);
    let mut points = Vec::new();
    for &m in magnitudes {
        let mut dlogp = Vec::with_capacity(candidates.len());
        for &(seq, pos) in &candidates {
            let tokens = &corpus[seq as usize];
            let p_nat =
                model.forward_with(tokens, TraceMode::Logits, &mut |_: &mut EditCtx<'_>| {})?.final_probs();
            let mut add = atom.clone();
            add.scale(m * a_star);
            let mut hook = |ctx: &mut EditCtx<'_>| {
                if (ctx.layer, ctx.head) == dataset.cell && ctx.position == pos as usize {
                    ctx.state.add_scaled(&add, 1.0);
                }
            };
            let p_ins = model.forward_with(tokens, TraceMode::Logits, &mut hook)?.final_probs();
            let t = preferred as usize;
            dlogp.push(p_ins[t].max(1e-300).ln() - p_nat[t].max(1e-300).ln());
        }
        let zeros = vec![0.0; dlogp.len()];
        let wil = stats::wilcoxon_signed_rank(&dlogp, &zeros, false)?;
        points.push(DosePoint {
            magnitude: m,
            n: dlogp.len(),
            median_dlogp: stats::median(&dlogp),
            wilcoxon_p: wil.p,
        });
    }
    Ok(DoseReport { a_star, points })
}

// ---------------------------------------------------------------------------
// Single-position sign test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignTrial {
    pub target: Token,
    pub seq_id: u64,
    pub position: u32,
    pub predicted: f64,
    pub measured: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignReport {
    pub trials: Vec<SignTrial>,
    pub n_scored: usize,
    pub agreement: f64,
    pub agreement_ci: stats::Ci,
    pub pearson_r: f64,
    pub median_ratio: f64,
}

/// Write k̂ v*ᵀ at matched Frobenius norm at one cache position per trial;
/// compare the measured final-position logit change of the target against
/// the analytic three-factor prediction with gate product G^α.
pub fn sign_test(
    model: &HostModel,
    corpus: &[Vec<Token>],
    cell: Cell,
    targets: &[Token],
    n_trials: usize,
    seed: u64,
) -> Result<SignReport> {
    if n_trials < 100 {
        return Err(Error::Config("sign test requires at least 100 trials".into()));
    }
    if targets.is_empty() || corpus.is_empty() {
        return Err(Error::Config("sign test requires targets and contexts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x516e, 0));
    let mut trials = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let target = targets[trial % targets.len()];
        let Ok(dir) = steering_direction(model, cell, target) else { continue };
        let tokens = &corpus[trial % corpus.len()];
        if tokens.len() < 6 {
            continue;
        }
        let t0 = rng.gen_range(tokens.len() / 2..tokens.len() - 1);
        let base = model.forward_with(tokens, TraceMode::Cell(cell), &mut |_: &mut EditCtx<'_>| {})?;
        let last = tokens.len() - 1;
        let ev = &base.cell(cell).events[t0];
        let k_hat = normalized(&ev.k).unwrap_or_else(|_| ev.k.clone());
        let c = ev.native_write().frob_norm();
        let mut add = Mat::outer(&k_hat, &dir.direction);
        add.scale(c);
        // Analytic prediction.
        let g_alpha = gate_product(&base.cell(cell).events[t0 + 1..=last]);
        let q = &base.cell(cell).events[last].q;
        let u_tok = model.unembed_direction(cell, target);
        let predicted = c * g_alpha * dot(&k_hat, q) * dot(&dir.direction, &u_tok);
        // Measured.
        let mut hook = |ctx: &mut EditCtx<'_>| {
            if (ctx.layer, ctx.head) == cell && ctx.position == t0 {
                ctx.state.add_scaled(&add, 1.0);
            }
        };
        let patched = model.forward_with(tokens, TraceMode::Logits, &mut hook)?;
        let measured =
            patched.logits[last][target as usize] - base.logits[last][target as usize];
        trials.push(SignTrial { target, seq_id: (trial % corpus.len()) as u64, position: t0 as u32, predicted, measured });
    }
    // Trials with predicted exactly zero are excluded from the agreement
    // denominator (undefined sign).
    let scored: Vec<&SignTrial> = trials.iter().filter(|t| t.predicted != 0.0).collect();
    let n_scored = scored.len();
    let agree = scored.iter().filter(|t| t.predicted.signum() == t.measured.signum()).count();
    let preds: Vec<f64> = scored.iter().map(|t| t.predicted).collect();
    let meas: Vec<f64> = scored.iter().map(|t| t.measured).collect();
    let ratios: Vec<f64> = scored.iter().map(|t| t.measured / t.predicted).collect();
    Ok(SignReport {
        n_scored,
        agreement: agree as f64 / n_scored.max(1) as f64,
        agreement_ci: stats::wilson_ci(agree, n_scored.max(1), 0.95)?,
        pearson_r: stats::pearson_r(&preds, &meas).unwrap_or(f64::NAN),
        median_ratio: stats::median(&ratios),
        trials,
    })
}

// ---------------------------------------------------------------------------
// Generation edit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenEditOutcome {
    pub target: Token,
    pub magnitude: f64,
    pub included: bool,
    pub included_unedited: bool,
    pub rank_unedited: usize,
    pub rank_edited: usize,
    pub dlogp_first: f64,
}

/// Write m·‖native write‖_F-scaled k̂ v*ᵀ into the cell's state before each
/// of the next `n_positions` decoding steps (k̂ = the position's own key
/// direction), then decode greedily for `horizon` tokens.
pub fn generation_edit(
    model: &HostModel,
    prompt: &[Token],
    target: Token,
    m: f64,
    n_positions: usize,
    horizon: usize,
    cell: Cell,
) -> Result<GenEditOutcome> {
    if prompt.is_empty() {
        return Err(Error::Config("generation edit requires a nonempty prompt".into()));
    }
    if m <= 0.0 {
        return Err(Error::Config("edit magnitude must be positive".into()));
    }
    let dir = steering_direction(model, cell, target)?;
    // The first edited write lands at the final prompt position so the first
    // decoding step already reads it.
    let start = prompt.len() - 1;
    let edited_range = start..start + n_positions;
    let mk_hook = |range: std::ops::Range<usize>| {
        let dir = dir.clone();
        move |ctx: &mut EditCtx<'_>| {
            if (ctx.layer, ctx.head) == cell && range.contains(&ctx.position) {
                // Native key direction, sign-aligned with the position's own
                // query so the read sees +v* rather than −v*.
                let mut k_hat = normalized(&ctx.event.k).unwrap_or_else(|_| ctx.event.k.clone());
                if dot(&k_hat, &ctx.event.q) < 0.0 {
                    for x in &mut k_hat {
                        *x = -*x;
                    }
                }
                let scale = m * ctx.event.native_write().frob_norm();
                let mut add = Mat::outer(&k_hat, &dir.direction);
                add.scale(scale);
                ctx.state.add_scaled(&add, 1.0);
            }
        }
    };
    let unedited = model.generate_greedy(prompt, horizon, None)?;
    let mut hook = mk_hook(edited_range.clone());
    let edited = model.generate_greedy(prompt, horizon, Some(&mut hook))?;
    // First-step distributions.
    let base = model.forward(prompt)?;
    let mut hook2 = mk_hook(edited_range);
    let patched = model.forward_with(prompt, TraceMode::Logits, &mut hook2)?;
    let p_base = base.final_probs();
    let p_edit = patched.final_probs();
    let t = target as usize;
    Ok(GenEditOutcome {
        target,
        magnitude: m,
        included: edited.contains(&target),
        included_unedited: unedited.contains(&target),
        rank_unedited: rank_of(&p_base, t),
        rank_edited: rank_of(&p_edit, t),
        dlogp_first: p_edit[t].max(1e-300).ln() - p_base[t].max(1e-300).ln(),
    })
}

// ---------------------------------------------------------------------------
// Coefficient amplification during decoding
// ---------------------------------------------------------------------------

/// Score features by mean activation at marker-token positions minus mean
/// activation elsewhere, over the capture's validation split.
pub fn boundary_feature_scores(
    dataset: &CaptureDataset,
    dict: &Dictionary,
    corpus: &[Vec<Token>],
    marker: Token,
) -> Result<Vec<f64>> {
    let pres: Vec<Vec<f64>> = dataset
        .val_idx
        .iter()
        .map(|&i| dict.encode(&dataset.raw_state(i)))
        .collect::<Result<_>>()?;
    let selected = dict.select(&pres)?;
    let mut sum_marker = vec![0.0; dict.n_f];
    let mut sum_other = vec![0.0; dict.n_f];
    let mut n_marker = 0usize;
    let mut n_other = 0usize;
    for (&rec, sel) in dataset.val_idx.iter().zip(&selected) {
        let w = &dataset.writes[rec];
        let tok = corpus[w.seq_id as usize][w.position as usize];
        let is_marker = tok == marker;
        if is_marker {
            n_marker += 1;
        } else {
            n_other += 1;
        }
        for &(i, c) in sel {
            if is_marker {
                sum_marker[i] += c;
            } else {
                sum_other[i] += c;
            }
        }
    }
    if n_marker == 0 {
        return Err(Error::Config("no marker-token positions in the validation split".into()));
    }
    Ok((0..dict.n_f)
        .map(|i| sum_marker[i] / n_marker as f64 - sum_other[i] / n_other.max(1) as f64)
        .collect())
}

/// Greedy continuation with the selected features' coefficients raised by
/// `offset` at every decoding position of the cell (the dictionary residual
/// is untouched: the state gains offset·ΣA_i).
pub fn amplify_coefficients(
    model: &HostModel,
    dict: &Dictionary,
    features: &[usize],
    offset: f64,
    prompt: &[Token],
    horizon: usize,
    cell: Cell,
) -> Result<Vec<Token>> {
    let mut add = Mat::zeros(dict.d_k, dict.d_v);
    for &f in features {
        let a = dict.atom_matrix(f);
        add.add_scaled(&a, offset);
    }
    let start = prompt.len() - 1;
    let mut hook = |ctx: &mut EditCtx<'_>| {
        if (ctx.layer, ctx.head) == cell && ctx.position >= start {
            ctx.state.add_scaled(&add, 1.0);
        }
    };
    model.generate_greedy(prompt, horizon, Some(&mut hook))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmplifyDose {
    pub dose: f64,
    pub offset: f64,
    pub marker_rate_amplified: f64,
    pub marker_rate_control: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AmplifyReport {
    pub selected: Vec<usize>,
    pub control: Vec<usize>,
    pub mean_boundary_activation: f64,
    pub marker_rate_baseline: f64,
    pub doses: Vec<AmplifyDose>,
}

/// Full amplification experiment: select boundary features on held-out
/// capture data, amplify during decoding over the steering prompts, and
/// compare marker-token frequency against baseline and a dose-matched
/// random-feature control.
#[allow(clippy::too_many_arguments)]
pub fn amplify_experiment(
    model: &HostModel,
    dict: &Dictionary,
    dataset: &CaptureDataset,
    capture_corpus: &[Vec<Token>],
    prompts: &[Vec<Token>],
    doses: &[f64],
    n_top: usize,
    marker: Token,
    cell: Cell,
    horizon: usize,
    seed: u64,
) -> Result<AmplifyReport> {
    let scores = boundary_feature_scores(dataset, dict, capture_corpus, marker)?;
    let mut order: Vec<usize> = (0..dict.n_f).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let selected: Vec<usize> = order[..n_top.min(order.len())].to_vec();
    // Mean positive activation of the selected features at marker positions.
    let pres: Vec<Vec<f64>> = dataset
        .val_idx
        .iter()
        .map(|&i| dict.encode(&dataset.raw_state(i)))
        .collect::<Result<_>>()?;
    let sel_codes = dict.select(&pres)?;
    let mut act_sum = 0.0;
    let mut act_n = 0usize;
    for (&rec, sel) in dataset.val_idx.iter().zip(&sel_codes) {
        let w = &dataset.writes[rec];
        if capture_corpus[w.seq_id as usize][w.position as usize] != marker {
            continue;
        }
        for &(i, c) in sel {
            if selected.contains(&i) {
                act_sum += c;
                act_n += 1;
            }
        }
    }
    let mean_act = if act_n > 0 { act_sum / act_n as f64 } else { 1.0 };
    // Dose-matched random control from the non-selected pool.
    let mut pool: Vec<usize> = (0..dict.n_f).filter(|i| !selected.contains(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0xa301, 0));
    pool.shuffle(&mut rng);
    let control: Vec<usize> = pool.into_iter().take(selected.len()).collect();

    let marker_rate = |continuations: &[Vec<Token>]| -> f64 {
        let total: usize = continuations.iter().map(|c| c.len()).sum();
        let hits: usize =
            continuations.iter().map(|c| c.iter().filter(|t| **t == marker).count()).sum();
        hits as f64 / total.max(1) as f64
    };
    let base_conts: Vec<Vec<Token>> = prompts
        .iter()
        .map(|p| model.generate_greedy(p, horizon, None))
        .collect::<Result<_>>()?;
    let marker_rate_baseline = marker_rate(&base_conts);
    let mut dose_reports = Vec::new();
    for &dose in doses {
        let offset = dose * mean_act;
        let amp: Vec<Vec<Token>> = prompts
            .iter()
            .map(|p| amplify_coefficients(model, dict, &selected, offset, p, horizon, cell))
            .collect::<Result<_>>()?;
        let ctl: Vec<Vec<Token>> = prompts
            .iter()
            .map(|p| amplify_coefficients(model, dict, &control, offset, p, horizon, cell))
            .collect::<Result<_>>()?;
        dose_reports.push(AmplifyDose {
            dose,
            offset,
            marker_rate_amplified: marker_rate(&amp),
            marker_rate_control: marker_rate(&ctl),
        });
    }
    Ok(AmplifyReport {
        selected,
        control,
        mean_boundary_activation: mean_act,
        marker_rate_baseline,
        doses: dose_reports,
    })
}
