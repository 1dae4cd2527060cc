//! The replacement-test harness.
//!
//! At a firing (sequence, position, cell) the dominant atom's scaled matrix
//! replaces the native write in the cache:
//!
//! ```text
//! S_t ← S_t − β_t k_t v_tᵀ + Δ
//! ```
//!
//! with Δ the atom at its coefficient, zero (deletion), or a fresh random
//! rank-1 atom at the same coefficient. The patched state propagates through
//! the rest of the sequence; the score is KL(p_patched ‖ p_baseline) at the
//! final output distribution. Every condition runs on its own state copies,
//! so condition order cannot leak — random draws are seeded per firing.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::CaptureDataset;
use crate::hosts::{EditCtx, HostModel, TraceMode};
use crate::mat::{kl_div, normalized, softmax, Mat};
use crate::partition::{AtomClass, AtomGeometry};
use crate::stats;
use crate::{subseed, Cell, Error, Result, Token};

/// One position where an atom carries the largest sparse coefficient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiringRecord {
    pub seq_id: u64,
    pub position: u32,
    pub cell: Cell,
    pub feature: usize,
    pub coefficient: f64,
    pub dominant: bool,
}

/// Per-firing KL under the three conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlTriple {
    pub seq_id: u64,
    pub position: u32,
    pub feature: usize,
    pub kl_atom: f64,
    pub kl_delete: f64,
    pub kl_random: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Atom,
    Delete,
    Random,
}

/// How a replacement matrix is scaled before patching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Δ carries the firing coefficient.
    Coefficient,
    /// Δ is rescaled to the native write's Frobenius norm (the per-firing
    /// replay protocol; deletion stays zero).
    MatchedNorm,
}

/// Scan the capture's validation split for dominant-atom firings, capped per
/// feature. Deterministic ordering: sequence-major, position-minor.
pub fn find_firings(
    dataset: &CaptureDataset,
    dict: &crate::sae::Dictionary,
    cap_per_feature: usize,
) -> Result<Vec<FiringRecord>> {
    find_firings_in(dataset, dict, cap_per_feature, &dataset.val_idx)
}

/// As `find_firings` over an explicit record index set.
pub fn find_firings_in(
    dataset: &CaptureDataset,
    dict: &crate::sae::Dictionary,
    cap_per_feature: usize,
    idx: &[usize],
) -> Result<Vec<FiringRecord>> {
    let pres: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| dict.encode(&dataset.raw_state(i)))
        .collect::<Result<_>>()?;
    let selected = dict.select(&pres)?;
    let mut taken = vec![0usize; dict.n_f];
    let mut out = Vec::new();
    for (&rec, sel) in idx.iter().zip(&selected) {
        if sel.is_empty() {
            continue;
        }
        // Dominant atom: largest coefficient, lower index on ties.
        let mut best = sel[0];
        for &(i, c) in &sel[1..] {
            if c > best.1 {
                best = (i, c);
            }
        }
        if taken[best.0] >= cap_per_feature {
            continue;
        }
        taken[best.0] += 1;
        let w = &dataset.writes[rec];
        out.push(FiringRecord {
            seq_id: w.seq_id,
            position: w.position,
            cell: dataset.cell,
            feature: best.0,
            coefficient: best.1,
            dominant: true,
        });
    }
    Ok(out)
}

/// Forward pass with the write at (cell, position) replaced by `delta`;
/// returns the final-position next-token distribution.
pub fn patched_final_probs(
    model: &HostModel,
    tokens: &[Token],
    cell: Cell,
    position: usize,
    delta: &Mat,
) -> Result<Vec<f64>> {
    let mut hook = |ctx: &mut EditCtx<'_>| {
        if (ctx.layer, ctx.head) == cell && ctx.position == position {
            let native = ctx.event.native_write();
            ctx.state.add_scaled(&native, -1.0);
            ctx.state.add_scaled(delta, 1.0);
        }
    };
    let trace = model.forward_with(tokens, TraceMode::Logits, &mut hook)?;
    Ok(trace.final_probs())
}

/// Replacement matrix for one condition at one firing. Random draws use a
/// per-firing seed so conditions can run in any order.
pub fn condition_delta(
    dict: &crate::sae::Dictionary,
    firing: &FiringRecord,
    condition: Condition,
    scale: ScaleMode,
    native_norm: f64,
    seed: u64,
) -> Result<Mat> {
    let rescale = |mut m: Mat| -> Mat {
        match scale {
            ScaleMode::Coefficient => m.scale(firing.coefficient),
            ScaleMode::MatchedNorm => {
                let n = m.frob_norm();
                if n > 1e-300 {
                    m.scale(native_norm / n);
                }
            }
        }
        m
    };
    match condition {
        Condition::Delete => Ok(Mat::zeros(dict.d_k, dict.d_v)),
        Condition::Atom => Ok(rescale(dict.atom_matrix(firing.feature))),
        Condition::Random => {
            let rseed = subseed(
                seed,
                0x2a4d,
                firing.seq_id.wrapping_mul(1009).wrapping_add(firing.position as u64),
            );
            Ok(rescale(random_rank1(dict.d_k, dict.d_v, rseed)?))
        }
    }
}

/// KL(p_patched ‖ p_baseline) at the final output distribution for one
/// firing under one condition.
pub fn replace_and_score(
    model: &HostModel,
    tokens: &[Token],
    dict: &crate::sae::Dictionary,
    firing: &FiringRecord,
    condition: Condition,
    seed: u64,
) -> Result<f64> {
    replace_and_score_scaled(model, tokens, dict, firing, condition, ScaleMode::Coefficient, seed)
}

/// As `replace_and_score` with an explicit scale mode.
pub fn replace_and_score_scaled(
    model: &HostModel,
    tokens: &[Token],
    dict: &crate::sae::Dictionary,
    firing: &FiringRecord,
    condition: Condition,
    scale: ScaleMode,
    seed: u64,
) -> Result<f64> {
    if firing.position as usize >= tokens.len() {
        return Err(Error::Config("firing position beyond sequence".into()));
    }
    let base = model.forward_with(tokens, TraceMode::Cell(firing.cell), &mut |_: &mut EditCtx<'_>| {})?;
    let p_base = base.final_probs();
    let native_norm = base.cell(firing.cell).events[firing.position as usize].native_write().frob_norm();
    let delta = condition_delta(dict, firing, condition, scale, native_norm, seed)?;
    let p_patched = patched_final_probs(model, tokens, firing.cell, firing.position as usize, &delta)?;
    let kl = kl_div(&p_patched, &p_base);
    if !kl.is_finite() {
        return Err(Error::Numeric(format!("non-finite KL at firing {firing:?}")));
    }
    Ok(kl)
}

// ---------------------------------------------------------------------------
// The suite
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerAtomRate {
    pub feature: usize,
    pub n: usize,
    pub win_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplacementSummary {
    pub n: usize,
    /// Fraction of firings with kl_atom < kl_delete.
    pub win_rate: f64,
    pub win_ci: stats::Ci,
    /// Fraction with kl_atom < kl_delete < kl_random.
    pub strict_chain_rate: f64,
    /// (median, MAD/√n) per condition.
    pub med_atom: (f64, f64),
    pub med_delete: (f64, f64),
    pub med_random: (f64, f64),
    /// Atoms with ≥ 5 firings.
    pub per_atom: Vec<PerAtomRate>,
    pub per_atom_mean: Option<f64>,
    pub per_atom_ci: Option<stats::Ci>,
    pub feature_boot_ci: Option<stats::Ci>,
    pub seq_boot_ci: Option<stats::Ci>,
    pub cliffs_delta_atom_delete: f64,
    pub wilcoxon_atom_delete: stats::TestResult,
    pub mw_register_bundle: Option<stats::TestResult>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplacementReport {
    pub triples: Vec<KlTriple>,
    pub summary: ReplacementSummary,
}

/// Run the three-condition replacement test over the firings and aggregate.
pub fn run_replacement_suite(
    model: &HostModel,
    corpus: &[Vec<Token>],
    dict: &crate::sae::Dictionary,
    firings: &[FiringRecord],
    classes: Option<&[AtomGeometry]>,
    scale: ScaleMode,
    seed: u64,
) -> Result<ReplacementReport> {
    if firings.is_empty() {
        return Err(Error::Config("replacement suite requires at least one firing".into()));
    }
    let mut triples = Vec::with_capacity(firings.len());
    for f in firings {
        let tokens = corpus
            .get(f.seq_id as usize)
            .ok_or_else(|| Error::Config(format!("sequence {} missing from corpus", f.seq_id)))?;
        let base = model.forward_with(tokens, TraceMode::Cell(f.cell), &mut |_: &mut EditCtx<'_>| {})?;
        let p_base = base.final_probs();
        let native_norm = base.cell(f.cell).events[f.position as usize].native_write().frob_norm();
        let mut kls = [0.0; 3];
        for (slot, cond) in [Condition::Atom, Condition::Delete, Condition::Random].into_iter().enumerate()
        {
            let delta = condition_delta(dict, f, cond, scale, native_norm, seed)?;
            let p = patched_final_probs(model, tokens, f.cell, f.position as usize, &delta)?;
            kls[slot] = kl_div(&p, &p_base);
            if !kls[slot].is_finite() {
                return Err(Error::Numeric("non-finite KL in suite".into()));
            }
        }
        triples.push(KlTriple {
            seq_id: f.seq_id,
            position: f.position,
            feature: f.feature,
            kl_atom: kls[0],
            kl_delete: kls[1],
            kl_random: kls[2],
        });
    }
    let summary = summarize_triples(&triples, classes, seed)?;
    Ok(ReplacementReport { triples, summary })
}

/// Aggregate a list of KL triples into the replacement summary.
pub fn summarize_triples(
    triples: &[KlTriple],
    classes: Option<&[AtomGeometry]>,
    seed: u64,
) -> Result<ReplacementSummary> {
    let n = triples.len();
    let wins: Vec<f64> =
        triples.iter().map(|t| if t.kl_atom < t.kl_delete { 1.0 } else { 0.0 }).collect();
    let n_wins = wins.iter().filter(|w| **w > 0.5).count();
    let strict =
        triples.iter().filter(|t| t.kl_atom < t.kl_delete && t.kl_delete < t.kl_random).count();
    let atom: Vec<f64> = triples.iter().map(|t| t.kl_atom).collect();
    let delete: Vec<f64> = triples.iter().map(|t| t.kl_delete).collect();
    let random: Vec<f64> = triples.iter().map(|t| t.kl_random).collect();

    // Per-atom win rates over atoms with ≥ 5 firings.
    let mut by_feature: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for (t, w) in triples.iter().zip(&wins) {
        by_feature.entry(t.feature).or_default().push(*w);
    }
    let per_atom: Vec<PerAtomRate> = by_feature
        .iter()
        .filter(|(_, v)| v.len() >= 5)
        .map(|(f, v)| PerAtomRate {
            feature: *f,
            n: v.len(),
            win_rate: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect();
    let (per_atom_mean, per_atom_ci) = if per_atom.len() >= 2 {
        let rates: Vec<Vec<f64>> = per_atom.iter().map(|p| vec![p.win_rate]).collect();
        let mean = per_atom.iter().map(|p| p.win_rate).sum::<f64>() / per_atom.len() as f64;
        let ci = stats::cluster_bootstrap(
            &rates,
            &|v| v.iter().sum::<f64>() / v.len() as f64,
            5000,
            subseed(seed, 0xb007, 1),
            0.95,
        )?;
        (Some(mean), Some(ci))
    } else {
        (None, None)
    };

    // Clustered bootstrap CIs for the pooled win rate.
    let feature_clusters: Vec<Vec<f64>> = by_feature.values().cloned().collect();
    let feature_boot_ci = if feature_clusters.len() >= 2 {
        Some(stats::cluster_bootstrap(
            &feature_clusters,
            &|v| v.iter().sum::<f64>() / v.len() as f64,
            5000,
            subseed(seed, 0xb007, 2),
            0.95,
        )?)
    } else {
        None
    };
    let mut by_seq: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
    for (t, w) in triples.iter().zip(&wins) {
        by_seq.entry(t.seq_id).or_default().push(*w);
    }
    let seq_clusters: Vec<Vec<f64>> = by_seq.into_values().collect();
    let seq_boot_ci = if seq_clusters.len() >= 2 {
        Some(stats::cluster_bootstrap(
            &seq_clusters,
            &|v| v.iter().sum::<f64>() / v.len() as f64,
            5000,
            subseed(seed, 0xb007, 3),
            0.95,
        )?)
    } else {
        None
    };

    // Register vs bundle per-atom win rates.
    let mw_register_bundle = classes.and_then(|geoms| {
        let class_of = |f: usize| geoms.get(f).map(|g| g.class);
        let reg: Vec<f64> = per_atom
            .iter()
            .filter(|p| class_of(p.feature) == Some(AtomClass::Register))
            .map(|p| p.win_rate)
            .collect();
        let bun: Vec<f64> = per_atom
            .iter()
            .filter(|p| class_of(p.feature) == Some(AtomClass::Bundle))
            .map(|p| p.win_rate)
            .collect();
        if reg.is_empty() || bun.is_empty() {
            None
        } else {
            stats::mann_whitney_u(&reg, &bun).ok()
        }
    });

    Ok(ReplacementSummary {
        n,
        win_rate: n_wins as f64 / n as f64,
        win_ci: stats::wilson_ci(n_wins, n, 0.95)?,
        strict_chain_rate: strict as f64 / n as f64,
        med_atom: stats::median_mad(&atom),
        med_delete: stats::median_mad(&delete),
        med_random: stats::median_mad(&random),
        per_atom,
        per_atom_mean,
        per_atom_ci,
        feature_boot_ci,
        seq_boot_ci,
        cliffs_delta_atom_delete: stats::cliffs_delta(&atom, &delete)?,
        wilcoxon_atom_delete: stats::wilcoxon_signed_rank(&atom, &delete, false)?,
        mw_register_bundle,
    })
}

// ---------------------------------------------------------------------------
// Selectivity
// ---------------------------------------------------------------------------

/// Top-K overlap between patched and native next-token predictions at the
/// final position under an additive perturbation rescaled to ε × the native
/// write's Frobenius norm.
pub fn selectivity(
    model: &HostModel,
    tokens: &[Token],
    cell: Cell,
    position: usize,
    perturbation: &Mat,
    eps: f64,
    k: usize,
) -> Result<f64> {
    if k > model.config.vocab_size {
        return Err(Error::Config("top-K larger than the vocabulary".into()));
    }
    let pnorm = perturbation.frob_norm();
    if pnorm <= 0.0 {
        return Err(Error::Degenerate("zero-norm perturbation".into()));
    }
    let base = model.forward_with(tokens, TraceMode::Cell(cell), &mut |_: &mut EditCtx<'_>| {})?;
    let native_norm = base.cell(cell).events[position].native_write().frob_norm();
    let scale = eps * native_norm / pnorm;
    let mut add = perturbation.clone();
    add.scale(scale);
    let mut hook = |ctx: &mut EditCtx<'_>| {
        if (ctx.layer, ctx.head) == cell && ctx.position == position {
            ctx.state.add_scaled(&add, 1.0);
        }
    };
    let patched = model.forward_with(tokens, TraceMode::Logits, &mut hook)?;
    Ok(topk_overlap(&base.logits[tokens.len() - 1], &patched.logits[tokens.len() - 1], k))
}

/// |topK(a) ∩ topK(b)| / K with deterministic tie handling.
pub fn topk_overlap(a: &[f64], b: &[f64], k: usize) -> f64 {
    let top = |xs: &[f64]| -> std::collections::BTreeSet<usize> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[j].partial_cmp(&xs[i]).unwrap().then(i.cmp(&j)));
        idx[..k].iter().cloned().collect()
    };
    let ta = top(a);
    let tb = top(b);
    ta.intersection(&tb).count() as f64 / k as f64
}

/// Matched-norm random rank-1 control direction (unit Frobenius norm).
pub fn random_rank1(d_k: usize, d_v: usize, seed: u64) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let a: Vec<f64> = (0..d_k).map(|_| gauss(&mut rng)).collect();
    let b: Vec<f64> = (0..d_v).map(|_| gauss(&mut rng)).collect();
    Ok(Mat::outer(&normalized(&a)?, &normalized(&b)?))
}

/// Rank-1 control with factors orthogonal to the given pair.
pub fn orthogonal_rank1(v: &[f64], w: &[f64], seed: u64) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let orth = |target: &[f64], rng: &mut ChaCha8Rng| -> Result<Vec<f64>> {
        let t = normalized(target)?;
        let mut x: Vec<f64> = (0..target.len()).map(|_| gauss(rng)).collect();
        let proj = crate::mat::dot(&x, &t);
        for (xi, ti) in x.iter_mut().zip(&t) {
            *xi -= proj * ti;
        }
        normalized(&x)
    };
    Ok(Mat::outer(&orth(v, &mut rng)?, &orth(w, &mut rng)?))
}

// ---------------------------------------------------------------------------
// Flat-SAE + top-1 SVD baseline
// ---------------------------------------------------------------------------

/// Substitute the top singular outer of the flat reconstruction, rescaled to
/// the native write's Frobenius norm, and score the KL.
pub fn flat_svd_substitute(
    flat_dict: &crate::sae::Dictionary,
    model: &HostModel,
    tokens: &[Token],
    dataset: &CaptureDataset,
    record: usize,
) -> Result<f64> {
    let raw = dataset.raw_state(record);
    let code = flat_dict.sparse_code(&raw)?;
    let recon = flat_dict.decode(&code)?;
    let (s1, u1, v1) = recon.top_singular();
    if s1 <= 1e-300 {
        return Err(Error::Degenerate("flat reconstruction has zero norm".into()));
    }
    let w = &dataset.writes[record];
    let native = w.native_write();
    let mut delta = Mat::outer(&u1, &v1);
    delta.scale(native.frob_norm());
    let base = model.forward_with(tokens, TraceMode::Logits, &mut |_: &mut EditCtx<'_>| {})?;
    let p = patched_final_probs(model, tokens, dataset.cell, w.position as usize, &delta)?;
    Ok(kl_div(&p, &base.final_probs()))
}

// ---------------------------------------------------------------------------
// Passage NLL under register erasure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassageNllReport {
    /// Per-passage (Δbits/token deletion, Δbits/token matched-norm random).
    pub per_passage: Vec<(f64, f64)>,
    pub mean_delete: f64,
    pub mean_random: f64,
}

/// Delete (or replace with matched-norm random writes) every register firing
/// in each passage and report the NLL change in bits/token.
pub fn passage_nll_deletion(
    model: &HostModel,
    passages: &[Vec<Token>],
    dict: &crate::sae::Dictionary,
    geoms: &[AtomGeometry],
    cell: Cell,
    seed: u64,
) -> Result<PassageNllReport> {
    let registers: std::collections::BTreeSet<usize> =
        geoms.iter().filter(|g| g.class == AtomClass::Register).map(|g| g.id).collect();
    let mut per_passage = Vec::with_capacity(passages.len());
    for (pi, passage) in passages.iter().enumerate() {
        let base = model.forward_with(passage, TraceMode::Cell(cell), &mut |_: &mut EditCtx<'_>| {})?;
        // Register firing positions by dominant atom.
        let mut positions: Vec<usize> = Vec::new();
        for (t, s) in base.cell(cell).states.iter().enumerate() {
            let code = dict.sparse_code(s)?;
            let mut best = (usize::MAX, 0.0);
            for (i, &c) in code.iter().enumerate() {
                if c > best.1 {
                    best = (i, c);
                }
            }
            if best.0 != usize::MAX && registers.contains(&best.0) {
                positions.push(t);
            }
        }
        let posset: std::collections::BTreeSet<usize> = positions.iter().cloned().collect();
        let base_nll = nll_bits(&base.logits, passage);
        if posset.is_empty() {
            per_passage.push((0.0, 0.0));
            continue;
        }
        let mut del_hook = |ctx: &mut EditCtx<'_>| {
            if (ctx.layer, ctx.head) == cell && posset.contains(&ctx.position) {
                let native = ctx.event.native_write();
                ctx.state.add_scaled(&native, -1.0);
            }
        };
        let del = model.forward_with(passage, TraceMode::Logits, &mut del_hook)?;
        let mut rnd_hook = |ctx: &mut EditCtx<'_>| {
            if (ctx.layer, ctx.head) == cell && posset.contains(&ctx.position) {
                let native = ctx.event.native_write();
                let rseed = subseed(seed, 0x9a55, ((pi as u64) << 32) | ctx.position as u64);
                let mut delta =
                    random_rank1(ctx.state.rows, ctx.state.cols, rseed).expect("random rank-1 draw");
                delta.scale(native.frob_norm());
                ctx.state.add_scaled(&native, -1.0);
                ctx.state.add_scaled(&delta, 1.0);
            }
        };
        let rnd = model.forward_with(passage, TraceMode::Logits, &mut rnd_hook)?;
        per_passage.push((
            nll_bits(&del.logits, passage) - base_nll,
            nll_bits(&rnd.logits, passage) - base_nll,
        ));
    }
    let n = per_passage.len().max(1) as f64;
    Ok(PassageNllReport {
        mean_delete: per_passage.iter().map(|p| p.0).sum::<f64>() / n,
        mean_random: per_passage.iter().map(|p| p.1).sum::<f64>() / n,
        per_passage,
    })
}

/// Mean negative log-likelihood in bits/token over next-token predictions.
fn nll_bits(logits: &[Vec<f64>], tokens: &[Token]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..tokens.len().saturating_sub(1) {
        let p = softmax(&logits[t]);
        total -= p[tokens[t + 1] as usize].max(1e-300).ln();
        count += 1;
    }
    total / (count.max(1) as f64) / std::f64::consts::LN_2
}

// ---------------------------------------------------------------------------
// Rank-1 vs rank-2 comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankComparison {
    pub n: usize,
    pub median_log_ratio: f64,
    pub cliffs_delta: f64,
    pub wilcoxon_p: f64,
    pub log_ratios: Vec<f64>,
}

/// Per-position dominant-atom substitution KL under each dictionary;
/// log-ratio is ln(kl_r2 / kl_r1), so negative favors rank-2.
pub fn rank_comparison(
    dict_r1: &crate::sae::Dictionary,
    dict_r2: &crate::sae::Dictionary,
    model: &HostModel,
    corpus: &[Vec<Token>],
    dataset: &CaptureDataset,
    max_positions: usize,
    seed: u64,
) -> Result<RankComparison> {
    let f1 = find_firings(dataset, dict_r1, usize::MAX)?;
    let f2 = find_firings(dataset, dict_r2, usize::MAX)?;
    let key = |f: &FiringRecord| (f.seq_id, f.position);
    let map2: std::collections::BTreeMap<(u64, u32), FiringRecord> =
        f2.into_iter().map(|f| (key(&f), f)).collect();
    let mut kl1 = Vec::new();
    let mut kl2 = Vec::new();
    for f in f1.into_iter().take(max_positions) {
        let Some(g) = map2.get(&key(&f)) else { continue };
        let tokens = &corpus[f.seq_id as usize];
        kl1.push(replace_and_score(model, tokens, dict_r1, &f, Condition::Atom, seed)?);
        kl2.push(replace_and_score(model, tokens, dict_r2, g, Condition::Atom, seed)?);
    }
    if kl1.len() < 5 {
        return Err(Error::Config("too few shared firing positions for the rank comparison".into()));
    }
    let log_ratios: Vec<f64> =
        kl1.iter().zip(&kl2).map(|(a, b)| (b.max(1e-30) / a.max(1e-30)).ln()).collect();
    Ok(RankComparison {
        n: kl1.len(),
        median_log_ratio: stats::median(&log_ratios),
        cliffs_delta: stats::cliffs_delta(&kl2, &kl1)?,
        wilcoxon_p: stats::wilcoxon_signed_rank(&kl2, &kl1, false)?.p,
        log_ratios,
    })
}
