//! Observational atom classes from cosine-to-native-write statistics.
//!
//! Per atom: the median signed cosine between its matrix and the native
//! write β k vᵀ over the validation positions where it fires. A
//! two-component 1-D Gaussian mixture (EM, seeded restarts) plus BIC
//! documents bimodality; classification itself is a plain threshold:
//! Register if alive and median cosine ≥ τ, Bundle if alive below τ,
//! Null otherwise. Cross-seed stability matches atoms greedily by
//! atom-matrix cosine.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::CaptureDataset;
use crate::mat::cosine;
#[cfg(test)]
use crate::mat::Mat;
use crate::sae::Dictionary;
use crate::{subseed, Error, Result};

/// Atoms must fire on at least this many validation positions to count as
/// alive.
pub const ALIVE_THRESHOLD: usize = 10;

/// Default register/bundle cosine threshold.
pub const DEFAULT_TAU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomClass {
    Register,
    Bundle,
    Null,
}

/// Per-atom geometry record emitted by the partition stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtomGeometry {
    pub id: usize,
    /// Median signed cosine to the native write over firing positions;
    /// absent when the atom never fires on the validation split.
    pub median_cos: Option<f64>,
    pub firings: usize,
    pub class: AtomClass,
}

/// Median cosine-to-native-write and firing counts per atom over the
/// validation split.
pub fn cosine_to_native(dict: &Dictionary, dataset: &CaptureDataset) -> Result<Vec<AtomGeometry>> {
    if dict.d_k != dataset.d_k || dict.d_v != dataset.d_v {
        return Err(Error::Shape("dictionary/dataset dimension mismatch".into()));
    }
    let idx = &dataset.val_idx;
    let pres: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| {
            let raw = dataset.raw_state(i);
            dict.encode(&raw).unwrap_or_else(|_| vec![0.0; dict.n_f])
        })
        .collect();
    let selected = dict.select(&pres)?;
    let mut cos_lists: Vec<Vec<f64>> = vec![Vec::new(); dict.n_f];
    let atom_vecs: Vec<Vec<f64>> = (0..dict.n_f).map(|i| dict.atom_vec(i)).collect();
    for (&rec, sel) in idx.iter().zip(&selected) {
        if sel.is_empty() {
            continue;
        }
        let native = dataset.writes[rec].native_write();
        for &(i, _) in sel {
            cos_lists[i].push(cosine(&atom_vecs[i], &native.data));
        }
    }
    Ok(cos_lists
        .into_iter()
        .enumerate()
        .map(|(id, list)| AtomGeometry {
            id,
            median_cos: if list.is_empty() { None } else { Some(crate::stats::median(&list)) },
            firings: list.len(),
            class: AtomClass::Null,
        })
        .collect())
}

/// Threshold classification: Register if alive and median cosine ≥ τ,
/// Bundle if alive below τ, Null otherwise. Returns updated geometries and
/// (register, bundle, null) counts.
pub fn classify(geoms: &[AtomGeometry], tau: f64) -> (Vec<AtomGeometry>, ClassCounts) {
    let mut out = geoms.to_vec();
    let mut counts = ClassCounts::default();
    for g in &mut out {
        let alive = g.firings >= ALIVE_THRESHOLD && g.median_cos.is_some();
        g.class = if !alive {
            counts.null += 1;
            AtomClass::Null
        } else if g.median_cos.unwrap() >= tau {
            counts.register += 1;
            AtomClass::Register
        } else {
            counts.bundle += 1;
            AtomClass::Bundle
        };
    }
    (out, counts)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub register: usize,
    pub bundle: usize,
    pub null: usize,
}

/// Median cosine of the register class, if any registers exist.
pub fn register_median_cos(geoms: &[AtomGeometry]) -> Option<f64> {
    let regs: Vec<f64> = geoms
        .iter()
        .filter(|g| g.class == AtomClass::Register)
        .filter_map(|g| g.median_cos)
        .collect();
    if regs.is_empty() {
        None
    } else {
        Some(crate::stats::median(&regs))
    }
}

// ---------------------------------------------------------------------------
// 1-D Gaussian mixture via EM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmFit {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub log_likelihood: f64,
    pub bic: f64,
    /// Log-likelihood after each EM iteration of the winning restart.
    pub ll_trace: Vec<f64>,
}

const VAR_FLOOR: f64 = 1e-8;

/// EM fit of a k-component 1-D Gaussian mixture with 10 seeded restarts.
/// BIC = p·ln(n) − 2·lnL with p = 3k − 1.
pub fn fit_gmm(values: &[f64], k: usize, seed: u64) -> Result<GmmFit> {
    let n = values.len();
    if n < 3 * k {
        return Err(Error::Config(format!("gmm requires at least {} values for k = {k}", 3 * k)));
    }
    let mut best: Option<GmmFit> = None;
    for restart in 0..10 {
        let fit = em_once(values, k, subseed(seed, 0x63b0, restart as u64))?;
        if best.as_ref().map_or(true, |b| fit.log_likelihood > b.log_likelihood) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

/// ΔBIC(k₂ vs k₁) = BIC(k₂) − BIC(k₁); negative favors k₂.
pub fn delta_bic(values: &[f64], k2: usize, k1: usize, seed: u64) -> Result<f64> {
    let f2 = fit_gmm(values, k2, seed)?;
    let f1 = fit_gmm(values, k1, seed)?;
    Ok(f2.bic - f1.bic)
}

fn em_once(values: &[f64], k: usize, seed: u64) -> Result<GmmFit> {
    let n = values.len();
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Init means at jittered quantiles, equal weights, shared variance.
    let sample_mean = values.iter().sum::<f64>() / nf;
    let sample_var =
        (values.iter().map(|x| (x - sample_mean) * (x - sample_mean)).sum::<f64>() / nf).max(VAR_FLOOR);
    let mut means: Vec<f64> = (0..k)
        .map(|j| {
            let q = (j as f64 + 0.5) / k as f64;
            let base = sorted[((q * nf) as usize).min(n - 1)];
            base + rng.gen_range(-0.3..0.3) * sample_var.sqrt()
        })
        .collect();
    let mut vars = vec![sample_var; k];
    let mut weights = vec![1.0 / k as f64; k];
    let mut resp = vec![vec![0.0f64; k]; n];
    let mut ll_trace = Vec::new();
    let mut last_ll = f64::NEG_INFINITY;
    for _iter in 0..300 {
        // E step.
        let mut ll = 0.0;
        for (i, &x) in values.iter().enumerate() {
            let mut total = 0.0;
            for j in 0..k {
                let p = weights[j] * gauss_pdf(x, means[j], vars[j]);
                resp[i][j] = p;
                total += p;
            }
            let total = total.max(1e-300);
            for j in 0..k {
                resp[i][j] /= total;
            }
            ll += total.ln();
        }
        ll_trace.push(ll);
        // M step.
        for j in 0..k {
            let nj: f64 = resp.iter().map(|r| r[j]).sum();
            let nj_safe = nj.max(1e-12);
            weights[j] = nj / nf;
            means[j] = resp.iter().zip(values).map(|(r, &x)| r[j] * x).sum::<f64>() / nj_safe;
            vars[j] = (resp
                .iter()
                .zip(values)
                .map(|(r, &x)| r[j] * (x - means[j]) * (x - means[j]))
                .sum::<f64>()
                / nj_safe)
                .max(VAR_FLOOR);
        }
        if (ll - last_ll).abs() < 1e-9 * (1.0 + ll.abs()) {
            last_ll = ll;
            break;
        }
        last_ll = ll;
    }
    let p_count = (3 * k - 1) as f64;
    Ok(GmmFit { weights, means, vars, log_likelihood: last_ll, bic: p_count * nf.ln() - 2.0 * last_ll, ll_trace })
}

fn gauss_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    (-d * d / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Sarle's bimodality coefficient (g₁² + 1) / (g₂ + 3(n−1)²/((n−2)(n−3))).
pub fn bimodality_coefficient(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 4 {
        return None;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let m2 = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    if m2 <= 0.0 {
        return None;
    }
    let m3 = values.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / nf;
    let m4 = values.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
    let g1 = m3 / m2.powf(1.5) * (nf * (nf - 1.0)).sqrt() / (nf - 2.0);
    let g2 = (nf - 1.0) / ((nf - 2.0) * (nf - 3.0))
        * ((nf + 1.0) * (m4 / (m2 * m2) - 3.0) + 6.0);
    Some((g1 * g1 + 1.0) / (g2 + 3.0 * (nf - 1.0) * (nf - 1.0) / ((nf - 2.0) * (nf - 3.0))))
}

// ---------------------------------------------------------------------------
// Cross-seed stability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Fraction of greedily matched atom pairs with cosine > 0.9.
    pub matched_fraction: f64,
    pub n_matched_above: usize,
    pub n_atoms: usize,
}

/// Greedy maximal matching of atoms across two dictionaries by signed
/// atom-matrix cosine; reports the fraction matching above 0.9.
pub fn seed_stability(dict_a: &Dictionary, dict_b: &Dictionary) -> Result<StabilityReport> {
    if dict_a.d_k != dict_b.d_k || dict_a.d_v != dict_b.d_v {
        return Err(Error::Shape("dictionaries live in different state spaces".into()));
    }
    let va: Vec<Vec<f64>> = (0..dict_a.n_f).map(|i| dict_a.atom_vec(i)).collect();
    let vb: Vec<Vec<f64>> = (0..dict_b.n_f).map(|i| dict_b.atom_vec(i)).collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(va.len() * vb.len());
    for (i, a) in va.iter().enumerate() {
        for (j, b) in vb.iter().enumerate() {
            pairs.push((cosine(a, b), i, j));
        }
    }
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let mut used_a = vec![false; va.len()];
    let mut used_b = vec![false; vb.len()];
    let n_pairs = va.len().min(vb.len());
    let mut matched = 0usize;
    let mut above = 0usize;
    for (c, i, j) in pairs {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        matched += 1;
        if c > 0.9 {
            above += 1;
        }
        if matched == n_pairs {
            break;
        }
    }
    Ok(StabilityReport {
        matched_fraction: above as f64 / n_pairs.max(1) as f64,
        n_matched_above: above,
        n_atoms: n_pairs,
    })
}
