//! Dictionary training: Adam on reconstruction MSE plus an auxiliary
//! dead-feature loss, periodic decoder renormalization, and resampling of
//! still-dead atoms from worst-reconstructed batch residuals.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::capture::CaptureDataset;
use crate::mat::{dot, norm, Mat};
use crate::{subseed, Error, Result};

use super::{
    Decoder, DecoderKind, Dictionary, Encoder, EncoderKind, SparsityRule,
};

/// What to build: atom count, decoder/encoder families, sparsity rule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SaeSpec {
    pub n_f: usize,
    pub decoder: DecoderKind,
    pub encoder: EncoderKind,
    pub sparsity: SparsitySpec,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SparsitySpec {
    TopK { k: usize },
    BatchTopK { k: usize },
    JumpRelu,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lambda_aux: f64,
    pub k_aux: usize,
    pub renorm_every: usize,
    /// 0 disables resampling.
    pub resample_every: usize,
    pub inactivity_threshold: usize,
    pub seed: u64,
    pub jump_theta_init: f64,
    pub jump_l0_weight: f64,
    pub jump_bandwidth_init: f64,
    pub jump_bandwidth_final: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 3e-4,
            lr_min: 3e-5,
            warmup: 50,
            batch: 256,
            epochs: 20,
            lambda_aux: 1e-2,
            k_aux: 256,
            renorm_every: 100,
            resample_every: 250,
            inactivity_threshold: 100,
            seed: 0,
            jump_theta_init: 1e-4,
            jump_l0_weight: 1e-5,
            jump_bandwidth_init: 1e-3,
            jump_bandwidth_final: 1e-5,
        }
    }
}

impl TrainConfig {
    /// Schedule adapted to minute-scale runs: the reference defaults assume
    /// hundreds of thousands of steps, toy captures provide hundreds, so the
    /// peak rate rises accordingly.
    pub fn toy(seed: u64) -> Self {
        TrainConfig {
            lr_peak: 1e-2,
            lr_min: 1e-3,
            warmup: 20,
            batch: 64,
            epochs: 20,
            k_aux: 16,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_peak <= 0.0 || self.lr_min <= 0.0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("train config values must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SaeMetrics {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// Atoms with zero firings within each epoch.
    pub epoch_dead: Vec<usize>,
    pub final_val_mse: f64,
    pub dead_count: usize,
    pub l0: f64,
    pub steps: usize,
}

/// Train a dictionary on a centered capture.
pub fn train_sae(
    dataset: &CaptureDataset,
    spec: &SaeSpec,
    cfg: &TrainConfig,
) -> Result<(Dictionary, SaeMetrics)> {
    cfg.validate()?;
    if !dataset.centered {
        return Err(Error::State("train_sae requires a centered dataset".into()));
    }
    if dataset.train_idx.is_empty() {
        return Err(Error::State("empty train split".into()));
    }
    let mut dict = init_dictionary(spec, dataset, cfg)?;
    let d = dict.d_in();
    let n_f = dict.n_f;
    let steps_per_epoch = dataset.train_idx.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut adam_m = zeroed_like(&dict);
    let mut adam_v = zeroed_like(&dict);
    let mut adam_t = 0usize;
    let mut since_fire = vec![0usize; n_f];
    let mut fired_this_epoch = vec![false; n_f];
    let mut metrics = SaeMetrics {
        train_mse: Vec::new(),
        val_mse: Vec::new(),
        epoch_dead: Vec::new(),
        final_val_mse: f64::NAN,
        dead_count: 0,
        l0: 0.0,
        steps: total_steps,
    };

    let mut pool_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 0x5ae0, 0));
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut order = dataset.train_idx.clone();
        order.shuffle(&mut pool_rng);
        fired_this_epoch.iter_mut().for_each(|f| *f = false);
        let mut epoch_sq = 0.0;
        let mut epoch_n = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| dataset.states[i].data.as_slice()).collect();
            let bandwidth = cosine_sched(step, total_steps, cfg.jump_bandwidth_init, cfg.jump_bandwidth_final);
            let mut grads = zeroed_like(&dict);
            let step_out = batch_step(&dict, &xs, cfg, &since_fire, bandwidth, &mut grads)?;
            let loss = step_out.recon_loss;
            if !loss.is_finite() {
                return Err(Error::Training { step, what: format!("loss {loss}") });
            }
            epoch_sq += step_out.sq_err_sum;
            epoch_n += xs.len();
            // Firing bookkeeping before the parameter update.
            for i in 0..n_f {
                if step_out.fired[i] {
                    since_fire[i] = 0;
                    fired_this_epoch[i] = true;
                } else {
                    since_fire[i] += 1;
                }
            }
            adam_t += 1;
            let lr = cosine_lr(step, total_steps, cfg);
            adam_step(&mut dict, &grads, &mut adam_m, &mut adam_v, adam_t, lr);
            step += 1;
            if cfg.renorm_every > 0 && step % cfg.renorm_every == 0 {
                dict.renorm();
            }
            if cfg.resample_every > 0 && step % cfg.resample_every == 0 {
                resample_dead(
                    &mut dict,
                    &xs,
                    &step_out.residuals,
                    &step_out.pres,
                    &mut since_fire,
                    cfg,
                    &mut adam_m,
                    &mut adam_v,
                );
            }
        }
        metrics.train_mse.push(epoch_sq / (epoch_n * d).max(1) as f64);
        let (val_mse, _, _) = eval_mse(&dict, dataset, &dataset.val_idx)?;
        metrics.val_mse.push(val_mse);
        metrics.epoch_dead.push(fired_this_epoch.iter().filter(|f| !**f).count());
    }
    dict.renorm();
    let (val_mse, l0, fired) = eval_mse(&dict, dataset, &dataset.val_idx)?;
    metrics.final_val_mse = val_mse;
    metrics.l0 = l0;
    metrics.dead_count = fired.iter().filter(|&&c| c == 0).count();
    Ok((dict, metrics))
}

/// Per-entry MSE, mean L0, and per-atom firing counts of `dict` on the given
/// record indices (the whole index set is one batch for BatchTopK).
pub fn eval_mse(
    dict: &Dictionary,
    dataset: &CaptureDataset,
    idx: &[usize],
) -> Result<(f64, f64, Vec<usize>)> {
    if idx.is_empty() {
        return Ok((f64::NAN, 0.0, vec![0; dict.n_f]));
    }
    let pres: Vec<Vec<f64>> = idx
        .iter()
        .map(|&i| dict.encode_centered(&dataset.states[i].data))
        .collect();
    let selected = dict.select(&pres)?;
    let mut sq = 0.0;
    let mut nnz = 0usize;
    let mut fired = vec![0usize; dict.n_f];
    for (&i, sel) in idx.iter().zip(&selected) {
        let xhat = dict.decode_selected(sel);
        let x = &dataset.states[i].data;
        sq += xhat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        nnz += sel.len();
        for &(a, _) in sel {
            fired[a] += 1;
        }
    }
    let d = dict.d_in();
    Ok((sq / (idx.len() * d) as f64, nnz as f64 / idx.len() as f64, fired))
}

/// Evaluate the same dictionary under a different TopK budget.
pub fn eval_mse_with_k(
    dict: &Dictionary,
    dataset: &CaptureDataset,
    idx: &[usize],
    k: usize,
) -> Result<f64> {
    let mut alt = dict.clone();
    alt.sparsity = SparsityRule::TopK { k };
    let (mse, _, _) = eval_mse(&alt, dataset, idx)?;
    Ok(mse)
}

fn cosine_lr(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup {
        return cfg.lr_peak * (step + 1) as f64 / cfg.warmup.max(1) as f64;
    }
    let span = total.saturating_sub(cfg.warmup).max(1) as f64;
    let p = (step - cfg.warmup) as f64 / span;
    cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

fn cosine_sched(step: usize, total: usize, start: f64, end: f64) -> f64 {
    let p = step as f64 / total.max(1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * p).cos())
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn init_dictionary(spec: &SaeSpec, dataset: &CaptureDataset, cfg: &TrainConfig) -> Result<Dictionary> {
    let (d_k, d_v) = (dataset.d_k, dataset.d_v);
    let n_f = spec.n_f;
    if n_f == 0 {
        return Err(Error::Config("n_f must be >= 1".into()));
    }
    if spec.encoder == EncoderKind::BilinearTied && spec.decoder != DecoderKind::Rank1 {
        return Err(Error::Config("tied bilinear encoder requires a rank-1 decoder".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 0x5ae1, 1));
    let unit = |d: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut v: Vec<f64> = (0..d)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen::<f64>();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let n = norm(&v);
        for x in &mut v {
            *x /= n;
        }
        v
    };
    let decoder = match spec.decoder {
        DecoderKind::Rank1 => Decoder::Rank1 {
            v: (0..n_f).map(|_| unit(d_k, &mut rng)).collect(),
            w: (0..n_f).map(|_| unit(d_v, &mut rng)).collect(),
        },
        DecoderKind::Rank2 => Decoder::Rank2 {
            v1: (0..n_f).map(|_| unit(d_k, &mut rng)).collect(),
            w1: (0..n_f).map(|_| unit(d_v, &mut rng)).collect(),
            v2: (0..n_f).map(|_| unit(d_k, &mut rng)).collect(),
            w2: (0..n_f).map(|_| unit(d_v, &mut rng)).collect(),
        },
        DecoderKind::FlatDense => Decoder::Flat { atoms: (0..n_f).map(|_| unit(d_k * d_v, &mut rng)).collect() },
    };
    let sparsity = match spec.sparsity {
        SparsitySpec::TopK { k } => SparsityRule::TopK { k },
        SparsitySpec::BatchTopK { k } => SparsityRule::BatchTopK { k },
        SparsitySpec::JumpRelu => SparsityRule::JumpRelu { theta: vec![cfg.jump_theta_init; n_f] },
    };
    let mut dict = Dictionary {
        n_f,
        d_k,
        d_v,
        decoder,
        encoder: Encoder::Dense { w: Mat::zeros(1, 1), b: Vec::new() },
        sparsity,
        mean: dataset.mean.clone(),
    };
    dict.encoder = match spec.encoder {
        EncoderKind::DenseLinear => {
            // Transposed-decoder initialization.
            let mut w = Mat::zeros(n_f, d_k * d_v);
            for i in 0..n_f {
                let a = dict.atom_vec(i);
                w.row_mut(i).copy_from_slice(&a);
            }
            Encoder::Dense { w, b: vec![0.0; n_f] }
        }
        EncoderKind::Bilinear => match &dict.decoder {
            Decoder::Rank1 { v, w } => Encoder::Bilinear { v: v.clone(), w: w.clone(), tied: false },
            _ => Encoder::Bilinear {
                v: (0..n_f).map(|_| unit(d_k, &mut rng)).collect(),
                w: (0..n_f).map(|_| unit(d_v, &mut rng)).collect(),
                tied: false,
            },
        },
        EncoderKind::BilinearTied => Encoder::Bilinear { v: Vec::new(), w: Vec::new(), tied: true },
    };
    Ok(dict)
}

// ---------------------------------------------------------------------------
// One optimization step
// ---------------------------------------------------------------------------

struct StepOut {
    recon_loss: f64,
    sq_err_sum: f64,
    fired: Vec<bool>,
    residuals: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
}

fn batch_step(
    dict: &Dictionary,
    xs: &[&[f64]],
    cfg: &TrainConfig,
    since_fire: &[usize],
    bandwidth: f64,
    grads: &mut Dictionary,
) -> Result<StepOut> {
    let n_f = dict.n_f;
    let b = xs.len() as f64;
    let pres: Vec<Vec<f64>> = xs.iter().map(|x| dict.encode_centered(x)).collect();
    let selected = dict.select(&pres)?;
    let mut fired = vec![false; n_f];
    let mut residuals = Vec::with_capacity(xs.len());
    let mut loss = 0.0;
    let mut sq_sum = 0.0;
    let dead: Vec<usize> = (0..n_f).filter(|&i| since_fire[i] >= cfg.inactivity_threshold).collect();
    for (s, x) in xs.iter().enumerate() {
        let sel = &selected[s];
        let xhat = dict.decode_selected(sel);
        let err: Vec<f64> = xhat.iter().zip(*x).map(|(a, b)| a - b).collect();
        let sq: f64 = err.iter().map(|e| e * e).sum();
        loss += sq / b;
        sq_sum += sq;
        // Auxiliary dead-feature loss reconstructs the residual x − x̂
        // through the k_aux highest-pre-activation dead atoms. The residual
        // is not detached, so the whole objective stays a plain
        // differentiable function; the main path's upstream gradient picks
        // up the extra term.
        let mut aux_cand: Vec<(usize, f64)> = Vec::new();
        let mut err_aux: Vec<f64> = Vec::new();
        if cfg.lambda_aux > 0.0 && !dead.is_empty() {
            aux_cand = dead.iter().map(|&i| (i, pres[s][i])).filter(|(_, a)| *a > 0.0).collect();
            aux_cand.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
            aux_cand.truncate(cfg.k_aux.min(n_f));
            if !aux_cand.is_empty() {
                let xhat_aux = dict.decode_selected(&aux_cand);
                // L_dead = ‖x̂_aux − (x − x̂)‖²; note x − x̂ = −err.
                err_aux = xhat_aux.iter().zip(&err).map(|(a, e)| a + e).collect();
                loss += cfg.lambda_aux * err_aux.iter().map(|e| e * e).sum::<f64>() / b;
            }
        }
        let mut d_xhat: Vec<f64> = err.iter().map(|e| 2.0 * e / b).collect();
        if !err_aux.is_empty() {
            for (d, ea) in d_xhat.iter_mut().zip(&err_aux) {
                *d += 2.0 * cfg.lambda_aux * ea / b;
            }
        }
        for &(i, c) in sel {
            fired[i] = true;
            let d_code = atom_grad(dict, grads, i, c, &d_xhat);
            encoder_backward(dict, grads, i, d_code, x);
        }
        if !err_aux.is_empty() {
            let d_xa: Vec<f64> = err_aux.iter().map(|e| 2.0 * cfg.lambda_aux * e / b).collect();
            for &(i, c) in &aux_cand {
                let d_code = atom_grad(dict, grads, i, c, &d_xa);
                encoder_backward(dict, grads, i, d_code, x);
            }
        }
        // JumpReLU: straight-through threshold gradients plus L0 penalty.
        if let SparsityRule::JumpRelu { theta } = &dict.sparsity {
            let g_theta = match &mut grads.sparsity {
                SparsityRule::JumpRelu { theta } => theta,
                _ => unreachable!(),
            };
            for i in 0..n_f {
                let a = pres[s][i];
                let th = theta[i];
                if (a - th).abs() <= bandwidth / 2.0 {
                    let d_code = atom_dot(dict, i, &d_xhat);
                    g_theta[i] += d_code * (-a / bandwidth);
                    g_theta[i] += cfg.jump_l0_weight / b * (-1.0 / bandwidth);
                }
            }
            loss += cfg.jump_l0_weight * sel.len() as f64 / b;
        }
        residuals.push(err.iter().map(|e| -e).collect());
    }
    Ok(StepOut { recon_loss: loss, sq_err_sum: sq_sum, fired, residuals, pres })
}

/// Accumulate decoder gradients for atom i given upstream d_x̂ and the
/// coefficient c; returns d_code = ⟨d_x̂, A_i⟩.
fn atom_grad(dict: &Dictionary, grads: &mut Dictionary, i: usize, c: f64, d_xhat: &[f64]) -> f64 {
    let d_v_dim = dict.d_v;
    match (&dict.decoder, &mut grads.decoder) {
        (Decoder::Rank1 { v, w }, Decoder::Rank1 { v: gv, w: gw }) => {
            let mut d_code = 0.0;
            for (r, vr) in v[i].iter().enumerate() {
                let row = &d_xhat[r * d_v_dim..(r + 1) * d_v_dim];
                let rw = dot(row, &w[i]);
                d_code += vr * rw;
                gv[i][r] += c * rw;
                for (cc, wc) in gw[i].iter_mut().enumerate() {
                    *wc += c * vr * row[cc];
                }
            }
            d_code
        }
        (Decoder::Rank2 { v1, w1, v2, w2 }, Decoder::Rank2 { v1: g1, w1: h1, v2: g2, w2: h2 }) => {
            let mut d_code = 0.0;
            for ((vv, ww), (gv, gw)) in
                [(&v1[i], &w1[i]), (&v2[i], &w2[i])].into_iter().zip([(&mut g1[i], &mut h1[i]), (&mut g2[i], &mut h2[i])])
            {
                for (r, vr) in vv.iter().enumerate() {
                    let row = &d_xhat[r * d_v_dim..(r + 1) * d_v_dim];
                    let rw = dot(row, ww);
                    d_code += vr * rw;
                    gv[r] += c * rw;
                    for (cc, wc) in gw.iter_mut().enumerate() {
                        *wc += c * vr * row[cc];
                    }
                }
            }
            d_code
        }
        (Decoder::Flat { atoms }, Decoder::Flat { atoms: ga }) => {
            let d_code = dot(d_xhat, &atoms[i]);
            for (g, dx) in ga[i].iter_mut().zip(d_xhat) {
                *g += c * dx;
            }
            d_code
        }
        _ => unreachable!("grads mirror the dictionary"),
    }
}

/// ⟨d_x̂, A_i⟩ without accumulating decoder gradients.
fn atom_dot(dict: &Dictionary, i: usize, d_xhat: &[f64]) -> f64 {
    let d_v_dim = dict.d_v;
    match &dict.decoder {
        Decoder::Rank1 { v, w } => {
            let mut acc = 0.0;
            for (r, vr) in v[i].iter().enumerate() {
                acc += vr * dot(&d_xhat[r * d_v_dim..(r + 1) * d_v_dim], &w[i]);
            }
            acc
        }
        Decoder::Rank2 { v1, w1, v2, w2 } => {
            let mut acc = 0.0;
            for (vv, ww) in [(&v1[i], &w1[i]), (&v2[i], &w2[i])] {
                for (r, vr) in vv.iter().enumerate() {
                    acc += vr * dot(&d_xhat[r * d_v_dim..(r + 1) * d_v_dim], ww);
                }
            }
            acc
        }
        Decoder::Flat { atoms } => dot(d_xhat, &atoms[i]),
    }
}

fn encoder_backward(dict: &Dictionary, grads: &mut Dictionary, i: usize, d_pre: f64, x: &[f64]) {
    let d_v_dim = dict.d_v;
    match (&dict.encoder, &mut grads.encoder) {
        (Encoder::Dense { .. }, Encoder::Dense { w: gw, b: gb }) => {
            for (g, xv) in gw.row_mut(i).iter_mut().zip(x) {
                *g += d_pre * xv;
            }
            gb[i] += d_pre;
        }
        (Encoder::Dense { .. }, _) => unreachable!("grads mirror the dictionary"),
        (Encoder::Bilinear { v, w, tied }, ge) => {
            let (ev, ew): (&Vec<f64>, &Vec<f64>) = if *tied {
                match &dict.decoder {
                    Decoder::Rank1 { v, w } => (&v[i], &w[i]),
                    _ => unreachable!(),
                }
            } else {
                (&v[i], &w[i])
            };
            // a = evᵀ X ew: d_ev = X ew, d_ew = Xᵀ ev.
            let d_k = dict.d_k;
            let mut d_ev = vec![0.0; d_k];
            let mut d_ew = vec![0.0; d_v_dim];
            for r in 0..d_k {
                let row = &x[r * d_v_dim..(r + 1) * d_v_dim];
                d_ev[r] = dot(row, ew);
                for (cc, val) in row.iter().enumerate() {
                    d_ew[cc] += ev[r] * val;
                }
            }
            if *tied {
                match &mut grads.decoder {
                    Decoder::Rank1 { v: gv, w: gw } => {
                        for (g, d) in gv[i].iter_mut().zip(&d_ev) {
                            *g += d_pre * d;
                        }
                        for (g, d) in gw[i].iter_mut().zip(&d_ew) {
                            *g += d_pre * d;
                        }
                    }
                    _ => unreachable!(),
                }
            } else {
                match ge {
                    Encoder::Bilinear { v: gv, w: gw, .. } => {
                        for (g, d) in gv[i].iter_mut().zip(&d_ev) {
                            *g += d_pre * d;
                        }
                        for (g, d) in gw[i].iter_mut().zip(&d_ew) {
                            *g += d_pre * d;
                        }
                    }
                    _ => unreachable!(),
                }
            }
        }
    }
}

/// Analytic-vs-central-finite-difference gradient check on a fresh
/// dictionary over one batch of the dataset; returns (worst relative error,
/// probes checked). Probes with absolute disagreement below 1e-9 count as
/// exact (finite differences bottom out in f64 noise there).
pub fn grad_check(
    dataset: &CaptureDataset,
    spec: &SaeSpec,
    cfg: &TrainConfig,
    probes: usize,
    h: f64,
) -> Result<(f64, usize)> {
    if !dataset.centered {
        return Err(Error::State("grad_check requires a centered dataset".into()));
    }
    let mut dict = init_dictionary(spec, dataset, cfg)?;
    let n_batch = dataset.states.len().min(12);
    let xs: Vec<&[f64]> = dataset.states[..n_batch].iter().map(|s| s.data.as_slice()).collect();
    // Mark half the atoms dead so the auxiliary loss participates.
    let since_fire: Vec<usize> =
        (0..spec.n_f).map(|i| if i < spec.n_f / 2 { cfg.inactivity_threshold + 1 } else { 0 }).collect();
    let mut grads = zeroed_like(&dict);
    batch_step(&dict, &xs, cfg, &since_fire, 1e-3, &mut grads)?;
    let mut gflat = Vec::new();
    visit(&grads, &mut |x| gflat.push(x));
    let n = gflat.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(subseed(cfg.seed, 0x6c, 0));
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for _ in 0..probes {
        let pi = rng.gen_range(0..n);
        let loss_at = |delta: f64, dict: &mut Dictionary| -> Result<f64> {
            let mut i = 0usize;
            visit_mut(dict, &mut |p| {
                if i == pi {
                    *p += delta;
                }
                i += 1;
            });
            let mut g2 = zeroed_like(dict);
            let out = batch_step(dict, &xs, cfg, &since_fire, 1e-3, &mut g2);
            let mut i = 0usize;
            visit_mut(dict, &mut |p| {
                if i == pi {
                    *p -= delta;
                }
                i += 1;
            });
            Ok(out?.recon_loss)
        };
        let fd = (loss_at(h, &mut dict)? - loss_at(-h, &mut dict)?) / (2.0 * h);
        let an = gflat[pi];
        if (fd - an).abs() <= 1e-9 {
            checked += 1;
            continue;
        }
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
        checked += 1;
    }
    Ok((worst, checked))
}

// ---------------------------------------------------------------------------
// Parameter plumbing
// ---------------------------------------------------------------------------

pub(crate) fn zeroed_like(d: &Dictionary) -> Dictionary {
    let mut z = d.clone();
    visit_mut(&mut z, &mut |p| *p = 0.0);
    z
}

pub(crate) fn visit(d: &Dictionary, f: &mut impl FnMut(f64)) {
    match &d.decoder {
        Decoder::Rank1 { v, w } => {
            for x in v.iter().chain(w).flatten() {
                f(*x);
            }
        }
        Decoder::Rank2 { v1, w1, v2, w2 } => {
            for x in v1.iter().chain(w1).chain(v2).chain(w2).flatten() {
                f(*x);
            }
        }
        Decoder::Flat { atoms } => {
            for x in atoms.iter().flatten() {
                f(*x);
            }
        }
    }
    match &d.encoder {
        Encoder::Dense { w, b } => {
            for x in w.data.iter().chain(b) {
                f(*x);
            }
        }
        Encoder::Bilinear { v, w, .. } => {
            for x in v.iter().chain(w).flatten() {
                f(*x);
            }
        }
    }
    if let SparsityRule::JumpRelu { theta } = &d.sparsity {
        for x in theta {
            f(*x);
        }
    }
}

pub(crate) fn visit_mut(d: &mut Dictionary, f: &mut impl FnMut(&mut f64)) {
    match &mut d.decoder {
        Decoder::Rank1 { v, w } => {
            for x in v.iter_mut().chain(w).flatten() {
                f(x);
            }
        }
        Decoder::Rank2 { v1, w1, v2, w2 } => {
            for x in v1.iter_mut().chain(w1).chain(v2).chain(w2).flatten() {
                f(x);
            }
        }
        Decoder::Flat { atoms } => {
            for x in atoms.iter_mut().flatten() {
                f(x);
            }
        }
    }
    match &mut d.encoder {
        Encoder::Dense { w, b } => {
            for x in w.data.iter_mut().chain(b) {
                f(x);
            }
        }
        Encoder::Bilinear { v, w, .. } => {
            for x in v.iter_mut().chain(w).flatten() {
                f(x);
            }
        }
    }
    if let SparsityRule::JumpRelu { theta } = &mut d.sparsity {
        for x in theta {
            f(x);
        }
    }
}

fn adam_step(
    dict: &mut Dictionary,
    grads: &Dictionary,
    m: &mut Dictionary,
    v: &mut Dictionary,
    t: usize,
    lr: f64,
) {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut g = Vec::new();
    visit(grads, &mut |x| g.push(x));
    let mut i = 0usize;
    visit_mut(m, &mut |p| {
        *p = b1 * *p + (1.0 - b1) * g[i];
        i += 1;
    });
    i = 0;
    visit_mut(v, &mut |p| {
        *p = b2 * *p + (1.0 - b2) * g[i] * g[i];
        i += 1;
    });
    let mut mv = Vec::with_capacity(g.len());
    visit(m, &mut |x| mv.push(x));
    let mut vv = Vec::with_capacity(g.len());
    visit(v, &mut |x| vv.push(x));
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    i = 0;
    visit_mut(dict, &mut |p| {
        *p -= lr * (mv[i] / bc1) / ((vv[i] / bc2).sqrt() + eps);
        i += 1;
    });
}

/// Zero one atom's entries in a dictionary-shaped accumulator.
fn zero_atom(d: &mut Dictionary, i: usize) {
    match &mut d.decoder {
        Decoder::Rank1 { v, w } => {
            v[i].iter_mut().for_each(|x| *x = 0.0);
            w[i].iter_mut().for_each(|x| *x = 0.0);
        }
        Decoder::Rank2 { v1, w1, v2, w2 } => {
            for vec in [&mut v1[i], &mut w1[i], &mut v2[i], &mut w2[i]] {
                vec.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Decoder::Flat { atoms } => atoms[i].iter_mut().for_each(|x| *x = 0.0),
    }
    match &mut d.encoder {
        Encoder::Dense { w, b } => {
            w.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
            b[i] = 0.0;
        }
        Encoder::Bilinear { v, w, tied } => {
            if !*tied {
                v[i].iter_mut().for_each(|x| *x = 0.0);
                w[i].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    if let SparsityRule::JumpRelu { theta } = &mut d.sparsity {
        theta[i] = 0.0;
    }
}

/// Reinitialize still-dead atoms from the top singular direction of the
/// worst-reconstructed batch residuals; dense encoder rows are scaled to
/// 0.2× the mean alive pre-activation magnitude.
#[allow(clippy::too_many_arguments)]
fn resample_dead(
    dict: &mut Dictionary,
    xs: &[&[f64]],
    residuals: &[Vec<f64>],
    pres: &[Vec<f64>],
    since_fire: &mut [usize],
    cfg: &TrainConfig,
    adam_m: &mut Dictionary,
    adam_v: &mut Dictionary,
) {
    let dead: Vec<usize> =
        (0..dict.n_f).filter(|&i| since_fire[i] >= cfg.inactivity_threshold).collect();
    if dead.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..residuals.len()).collect();
    order.sort_by(|&a, &b| {
        let na: f64 = residuals[a].iter().map(|x| x * x).sum();
        let nb: f64 = residuals[b].iter().map(|x| x * x).sum();
        nb.partial_cmp(&na).unwrap()
    });
    // Mean |pre-activation| over alive atoms on this batch.
    let alive: Vec<usize> =
        (0..dict.n_f).filter(|&i| since_fire[i] < cfg.inactivity_threshold).collect();
    let mut alive_mag = 0.0;
    let mut alive_n = 0usize;
    for p in pres {
        for &i in &alive {
            alive_mag += p[i].abs();
            alive_n += 1;
        }
    }
    let target_mag = if alive_n > 0 { 0.2 * alive_mag / alive_n as f64 } else { 0.2 };
    for (slot, &i) in dead.iter().enumerate() {
        let sample = order[slot % order.len()];
        let r = Mat { rows: dict.d_k, cols: dict.d_v, data: residuals[sample].clone() };
        if r.frob_norm() < 1e-12 {
            continue;
        }
        let svd = r.svd();
        let u1: Vec<f64> = (0..dict.d_k).map(|row| svd.u.get(row, 0)).collect();
        let w1: Vec<f64> = (0..dict.d_v).map(|row| svd.v.get(row, 0)).collect();
        match &mut dict.decoder {
            Decoder::Rank1 { v, w } => {
                v[i] = u1.clone();
                w[i] = w1.clone();
            }
            Decoder::Rank2 { v1, w1: ww1, v2, w2 } => {
                v1[i] = u1.clone();
                ww1[i] = w1.clone();
                let u2: Vec<f64> = (0..dict.d_k).map(|row| svd.u.get(row, 1)).collect();
                let wv2: Vec<f64> = (0..dict.d_v).map(|row| svd.v.get(row, 1)).collect();
                v2[i] = u2;
                w2[i] = wv2;
            }
            Decoder::Flat { atoms } => {
                let n = r.frob_norm();
                atoms[i] = r.data.iter().map(|x| x / n).collect();
            }
        }
        let atom = dict.atom_vec(i);
        match &mut dict.encoder {
            Encoder::Dense { w, b } => {
                let mut mag = 0.0;
                for x in xs {
                    mag += dot(x, &atom).abs();
                }
                mag /= xs.len() as f64;
                let scale = if mag > 1e-12 { target_mag / mag } else { 1.0 };
                for (dst, src) in w.row_mut(i).iter_mut().zip(&atom) {
                    *dst = scale * src;
                }
                b[i] = 0.0;
            }
            Encoder::Bilinear { v, w, tied } => {
                if !*tied {
                    v[i] = u1.clone();
                    w[i] = w1.clone();
                }
            }
        }
        if let SparsityRule::JumpRelu { theta } = &mut dict.sparsity {
            theta[i] = cfg.jump_theta_init;
        }
        zero_atom(adam_m, i);
        zero_atom(adam_v, i);
        since_fire[i] = 0;
    }
}
