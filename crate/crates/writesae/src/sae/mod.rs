//! Sparse dictionaries over cache states.
//!
//! A dictionary holds n_f atoms shaped like the host's write: rank-1 outer
//! products v_i w_iᵀ (the reference decoder), rank-2 sums (control), or flat
//! dense atoms (baseline). Encoders are a dense linear map on vec(S − M) or
//! a bilinear matched filter a_i = v_iᵉ ᵀ (S − M) w_iᵉ, optionally tied to the
//! decoder factors. Sparsity is TopK (ReLU then keep the k largest,
//! lower index wins ties), BatchTopK (keep batch·k across the whole batch),
//! or JumpReLU (per-atom learned threshold).
//!
//! Checkpoint format "WSDC" mirrors the capture format conventions
//! (little-endian, version 1).

pub mod planted;
mod train;

pub use train::{eval_mse, eval_mse_with_k, grad_check, train_sae, SaeMetrics, SaeSpec, SparsitySpec, TrainConfig};

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mat::{dot, norm, Mat};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Rank1,
    Rank2,
    FlatDense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    DenseLinear,
    Bilinear,
    BilinearTied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Decoder {
    Rank1 { v: Vec<Vec<f64>>, w: Vec<Vec<f64>> },
    Rank2 { v1: Vec<Vec<f64>>, w1: Vec<Vec<f64>>, v2: Vec<Vec<f64>>, w2: Vec<Vec<f64>> },
    Flat { atoms: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Dense { w: Mat, b: Vec<f64> },
    /// Matched-filter factors; with `tied` the decoder factors are used and
    /// these vectors stay empty.
    Bilinear { v: Vec<Vec<f64>>, w: Vec<Vec<f64>>, tied: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SparsityRule {
    TopK { k: usize },
    BatchTopK { k: usize },
    JumpRelu { theta: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub n_f: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub decoder: Decoder,
    pub encoder: Encoder,
    pub sparsity: SparsityRule,
    /// Centering mean; encode subtracts it, decode adds it back.
    pub mean: Mat,
}

impl Dictionary {
    pub fn d_in(&self) -> usize {
        self.d_k * self.d_v
    }

    pub fn decoder_kind(&self) -> DecoderKind {
        match self.decoder {
            Decoder::Rank1 { .. } => DecoderKind::Rank1,
            Decoder::Rank2 { .. } => DecoderKind::Rank2,
            Decoder::Flat { .. } => DecoderKind::FlatDense,
        }
    }

    pub fn encoder_kind(&self) -> EncoderKind {
        match &self.encoder {
            Encoder::Dense { .. } => EncoderKind::DenseLinear,
            Encoder::Bilinear { tied, .. } => {
                if *tied {
                    EncoderKind::BilinearTied
                } else {
                    EncoderKind::Bilinear
                }
            }
        }
    }

    /// vec(A_i) of atom i.
    pub fn atom_vec(&self, i: usize) -> Vec<f64> {
        match &self.decoder {
            Decoder::Rank1 { v, w } => {
                let mut out = vec![0.0; self.d_in()];
                for (r, vr) in v[i].iter().enumerate() {
                    for (c, wc) in w[i].iter().enumerate() {
                        out[r * self.d_v + c] = vr * wc;
                    }
                }
                out
            }
            Decoder::Rank2 { v1, w1, v2, w2 } => {
                let mut out = vec![0.0; self.d_in()];
                for (r, vr) in v1[i].iter().enumerate() {
                    for (c, wc) in w1[i].iter().enumerate() {
                        out[r * self.d_v + c] += vr * wc;
                    }
                }
                for (r, vr) in v2[i].iter().enumerate() {
                    for (c, wc) in w2[i].iter().enumerate() {
                        out[r * self.d_v + c] += vr * wc;
                    }
                }
                out
            }
            Decoder::Flat { atoms } => atoms[i].clone(),
        }
    }

    pub fn atom_matrix(&self, i: usize) -> Mat {
        Mat { rows: self.d_k, cols: self.d_v, data: self.atom_vec(i) }
    }

    /// Pre-activations for a raw (uncentered) state; centers internally.
    pub fn encode(&self, s_raw: &Mat) -> Result<Vec<f64>> {
        if s_raw.rows != self.d_k || s_raw.cols != self.d_v {
            return Err(Error::Shape(format!(
                "state {}x{} does not match dictionary {}x{}",
                s_raw.rows, s_raw.cols, self.d_k, self.d_v
            )));
        }
        let mut x = s_raw.data.clone();
        for (xi, mi) in x.iter_mut().zip(&self.mean.data) {
            *xi -= mi;
        }
        Ok(self.encode_centered(&x))
    }

    /// Pre-activations for an already-centered vec(S − M).
    pub fn encode_centered(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.d_in());
        match &self.encoder {
            Encoder::Dense { w, b } => {
                let mut a = w.matvec(x);
                for (ai, bi) in a.iter_mut().zip(b) {
                    *ai += bi;
                }
                a
            }
            Encoder::Bilinear { v, w, tied } => {
                let (ev, ew) = if *tied {
                    match &self.decoder {
                        Decoder::Rank1 { v, w } => (v, w),
                        _ => unreachable!("tied bilinear encoder requires a rank-1 decoder"),
                    }
                } else {
                    (v, w)
                };
                (0..self.n_f).map(|i| bilinear_form(x, &ev[i], &ew[i], self.d_v)).collect()
            }
        }
    }

    /// Sparse code for one raw state under the dictionary's rule
    /// (BatchTopK degenerates to per-sample TopK on a batch of one).
    pub fn sparse_code(&self, s_raw: &Mat) -> Result<Vec<f64>> {
        let pre = self.encode(s_raw)?;
        let sel = self.select(&[pre.clone()])?;
        let mut code = vec![0.0; self.n_f];
        for &(i, c) in &sel[0] {
            code[i] = c;
        }
        Ok(code)
    }

    /// Sparse-code entry for atom `i` at state `s_raw` (0 unless selected).
    pub fn firing_coefficient(&self, s_raw: &Mat, i: usize) -> Result<f64> {
        if i >= self.n_f {
            return Err(Error::Config(format!("feature {i} out of range {}", self.n_f)));
        }
        Ok(self.sparse_code(s_raw)?[i])
    }

    /// Apply the sparsity rule to a batch of pre-activations, returning
    /// selected (atom, coefficient) pairs per sample.
    pub fn select(&self, pres: &[Vec<f64>]) -> Result<Vec<Vec<(usize, f64)>>> {
        apply_sparsity_batch(pres, &self.sparsity, self.n_f)
    }

    /// Ŝ = M + Σ code_i · A_i.
    pub fn decode(&self, code: &[f64]) -> Result<Mat> {
        if code.len() != self.n_f {
            return Err(Error::Shape(format!("code length {} != n_f {}", code.len(), self.n_f)));
        }
        let mut out = self.mean.clone();
        for (i, &c) in code.iter().enumerate() {
            if c != 0.0 {
                self.add_atom_scaled(i, c, &mut out.data);
            }
        }
        Ok(out)
    }

    /// Reconstruction of the centered vector from selected pairs (no mean).
    pub fn decode_selected(&self, selected: &[(usize, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_in()];
        for &(i, c) in selected {
            self.add_atom_scaled(i, c, &mut out);
        }
        out
    }

    fn add_atom_scaled(&self, i: usize, c: f64, out: &mut [f64]) {
        match &self.decoder {
            Decoder::Rank1 { v, w } => {
                for (r, vr) in v[i].iter().enumerate() {
                    let base = r * self.d_v;
                    let cv = c * vr;
                    for (cc, wc) in w[i].iter().enumerate() {
                        out[base + cc] += cv * wc;
                    }
                }
            }
            Decoder::Rank2 { v1, w1, v2, w2 } => {
                for (vv, ww) in [(&v1[i], &w1[i]), (&v2[i], &w2[i])] {
                    for (r, vr) in vv.iter().enumerate() {
                        let base = r * self.d_v;
                        let cv = c * vr;
                        for (cc, wc) in ww.iter().enumerate() {
                            out[base + cc] += cv * wc;
                        }
                    }
                }
            }
            Decoder::Flat { atoms } => {
                for (o, a) in out.iter_mut().zip(&atoms[i]) {
                    *o += c * a;
                }
            }
        }
    }

    /// Normalize decoder factors (and untied bilinear encoder factors) to
    /// unit norm. Dense encoder rows absorb the decoder rescaling so the
    /// encode→decode map is unchanged; bilinear factors are projected.
    pub fn renorm(&mut self) {
        let mut scale_enc = vec![1.0; self.n_f];
        match &mut self.decoder {
            Decoder::Rank1 { v, w } => {
                for i in 0..self.n_f {
                    let cv = unitize(&mut v[i]);
                    let cw = unitize(&mut w[i]);
                    scale_enc[i] = cv * cw;
                }
            }
            Decoder::Rank2 { v1, w1, v2, w2 } => {
                for i in 0..self.n_f {
                    unitize(&mut v1[i]);
                    unitize(&mut w1[i]);
                    unitize(&mut v2[i]);
                    unitize(&mut w2[i]);
                }
            }
            Decoder::Flat { atoms } => {
                for i in 0..self.n_f {
                    scale_enc[i] = unitize(&mut atoms[i]);
                }
            }
        }
        match &mut self.encoder {
            Encoder::Dense { w, b } => {
                for i in 0..self.n_f {
                    if scale_enc[i] != 1.0 {
                        for x in w.row_mut(i) {
                            *x *= scale_enc[i];
                        }
                        b[i] *= scale_enc[i];
                    }
                }
            }
            Encoder::Bilinear { v, w, tied } => {
                if !*tied {
                    for i in 0..self.n_f {
                        unitize(&mut v[i]);
                        unitize(&mut w[i]);
                    }
                }
            }
        }
    }
}

fn unitize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 1e-300 {
        for x in v.iter_mut() {
            *x /= n;
        }
        n
    } else {
        1.0
    }
}

/// aᵀ X b for X stored row-major with `cols` columns.
fn bilinear_form(x: &[f64], a: &[f64], b: &[f64], cols: usize) -> f64 {
    let mut acc = 0.0;
    for (r, ar) in a.iter().enumerate() {
        let row = &x[r * cols..(r + 1) * cols];
        acc += ar * dot(row, b);
    }
    acc
}

/// Apply a sparsity rule to a batch of pre-activation vectors.
///
/// TopK: ReLU then keep the k largest entries per sample (lower index wins
/// exact ties). BatchTopK: keep the batch·k largest positive entries across
/// the whole batch. JumpReLU: a_i · 1[a_i > θ_i].
pub fn apply_sparsity_batch(
    pres: &[Vec<f64>],
    rule: &SparsityRule,
    n_f: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    match rule {
        SparsityRule::TopK { k } => {
            if *k > n_f {
                return Err(Error::Config(format!("k {} exceeds n_f {}", k, n_f)));
            }
            Ok(pres.iter().map(|p| topk_select(p, *k)).collect())
        }
        SparsityRule::BatchTopK { k } => {
            if *k > n_f {
                return Err(Error::Config(format!("k {} exceeds n_f {}", k, n_f)));
            }
            let budget = k * pres.len();
            let mut all: Vec<(f64, usize, usize)> = Vec::new();
            for (s, p) in pres.iter().enumerate() {
                for (i, &a) in p.iter().enumerate() {
                    if a > 0.0 {
                        all.push((a, s, i));
                    }
                }
            }
            all.sort_by(|x, y| {
                y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2))
            });
            let mut out: Vec<Vec<(usize, f64)>> = vec![Vec::new(); pres.len()];
            for &(a, s, i) in all.iter().take(budget) {
                out[s].push((i, a));
            }
            for sel in &mut out {
                sel.sort_by_key(|p| p.0);
            }
            Ok(out)
        }
        SparsityRule::JumpRelu { theta } => Ok(pres
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .filter(|(i, a)| **a > theta[*i])
                    .map(|(i, a)| (i, *a))
                    .collect()
            })
            .collect()),
    }
}

fn topk_select(pre: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut pos: Vec<(usize, f64)> = pre.iter().cloned().enumerate().filter(|(_, a)| *a > 0.0).collect();
    pos.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    pos.truncate(k);
    pos.sort_by_key(|p| p.0);
    pos
}

// ---------------------------------------------------------------------------
// Checkpoint IO ("WSDC")
// ---------------------------------------------------------------------------

const DICT_MAGIC: [u8; 4] = *b"WSDC";
const DICT_VERSION: u32 = 1;

pub fn write_dictionary_file(dict: &Dictionary, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&DICT_MAGIC)?;
    w.write_all(&DICT_VERSION.to_le_bytes())?;
    let dk = match dict.decoder_kind() {
        DecoderKind::Rank1 => 0u32,
        DecoderKind::Rank2 => 1,
        DecoderKind::FlatDense => 2,
    };
    let ek = match dict.encoder_kind() {
        EncoderKind::DenseLinear => 0u32,
        EncoderKind::Bilinear => 1,
        EncoderKind::BilinearTied => 2,
    };
    let (sk, k_or_zero) = match &dict.sparsity {
        SparsityRule::TopK { k } => (0u32, *k as u64),
        SparsityRule::BatchTopK { k } => (1, *k as u64),
        SparsityRule::JumpRelu { .. } => (2, 0),
    };
    for v in [dk, ek, sk] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in [dict.d_k as u32, dict.d_v as u32, dict.n_f as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&k_or_zero.to_le_bytes())?;
    wf(&mut w, &dict.mean.data)?;
    match &dict.decoder {
        Decoder::Rank1 { v, w: wv } => {
            for x in v.iter().chain(wv) {
                wf(&mut w, x)?;
            }
        }
        Decoder::Rank2 { v1, w1, v2, w2 } => {
            for x in v1.iter().chain(w1).chain(v2).chain(w2) {
                wf(&mut w, x)?;
            }
        }
        Decoder::Flat { atoms } => {
            for x in atoms {
                wf(&mut w, x)?;
            }
        }
    }
    match &dict.encoder {
        Encoder::Dense { w: ew, b } => {
            wf(&mut w, &ew.data)?;
            wf(&mut w, b)?;
        }
        Encoder::Bilinear { v, w: wv, tied } => {
            if !tied {
                for x in v.iter().chain(wv) {
                    wf(&mut w, x)?;
                }
            }
        }
    }
    if let SparsityRule::JumpRelu { theta } = &dict.sparsity {
        wf(&mut w, theta)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dictionary_file(path: &Path) -> Result<Dictionary> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    rex(&mut r, &mut magic, "magic")?;
    if magic != DICT_MAGIC {
        return Err(Error::BadMagic { expected: DICT_MAGIC });
    }
    let version = ru32(&mut r, "version")?;
    if version != DICT_VERSION {
        return Err(Error::BadVersion { found: version, expected: DICT_VERSION });
    }
    let dk = ru32(&mut r, "decoder kind")?;
    let ek = ru32(&mut r, "encoder kind")?;
    let sk = ru32(&mut r, "sparsity kind")?;
    let d_k = ru32(&mut r, "d_k")? as usize;
    let d_v = ru32(&mut r, "d_v")? as usize;
    let n_f = ru32(&mut r, "n_f")? as usize;
    let mut kb = [0u8; 8];
    rex(&mut r, &mut kb, "k")?;
    let k = u64::from_le_bytes(kb) as usize;
    let mut mean = Mat::zeros(d_k, d_v);
    rf(&mut r, &mut mean.data, "mean")?;
    let read_vecs = |r: &mut BufReader<std::fs::File>, n: usize, d: usize, what: &str| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = vec![0.0; d];
            rf(r, &mut v, what)?;
            out.push(v);
        }
        Ok(out)
    };
    let decoder = match dk {
        0 => Decoder::Rank1 {
            v: read_vecs(&mut r, n_f, d_k, "decoder v")?,
            w: read_vecs(&mut r, n_f, d_v, "decoder w")?,
        },
        1 => Decoder::Rank2 {
            v1: read_vecs(&mut r, n_f, d_k, "decoder v1")?,
            w1: read_vecs(&mut r, n_f, d_v, "decoder w1")?,
            v2: read_vecs(&mut r, n_f, d_k, "decoder v2")?,
            w2: read_vecs(&mut r, n_f, d_v, "decoder w2")?,
        },
        2 => Decoder::Flat { atoms: read_vecs(&mut r, n_f, d_k * d_v, "decoder atoms")? },
        other => return Err(Error::Format(format!("unknown decoder kind {other}"))),
    };
    let encoder = match ek {
        0 => {
            let mut w = Mat::zeros(n_f, d_k * d_v);
            rf(&mut r, &mut w.data, "encoder weights")?;
            let mut b = vec![0.0; n_f];
            rf(&mut r, &mut b, "encoder bias")?;
            Encoder::Dense { w, b }
        }
        1 => Encoder::Bilinear {
            v: read_vecs(&mut r, n_f, d_k, "encoder v")?,
            w: read_vecs(&mut r, n_f, d_v, "encoder w")?,
            tied: false,
        },
        2 => Encoder::Bilinear { v: Vec::new(), w: Vec::new(), tied: true },
        other => return Err(Error::Format(format!("unknown encoder kind {other}"))),
    };
    let sparsity = match sk {
        0 => SparsityRule::TopK { k },
        1 => SparsityRule::BatchTopK { k },
        2 => {
            let mut theta = vec![0.0; n_f];
            rf(&mut r, &mut theta, "theta")?;
            SparsityRule::JumpRelu { theta }
        }
        other => return Err(Error::Format(format!("unknown sparsity kind {other}"))),
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after dictionary".into()));
    }
    Ok(Dictionary { n_f, d_k, d_v, decoder, encoder, sparsity, mean })
}

fn wf<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn rex<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn ru32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    rex(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn rf<R: Read>(r: &mut R, out: &mut [f64], what: &str) -> Result<()> {
    let mut b = [0u8; 8];
    for o in out {
        rex(r, &mut b, what)?;
        *o = f64::from_le_bytes(b);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&v);
        for x in &mut v {
            *x /= n;
        }
        v
    }

    fn small_dict(encoder: EncoderKind, seed: u64) -> Dictionary {
        let (d_k, d_v, n_f) = (8, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<Vec<f64>> = (0..n_f).map(|_| unit_vec(d_k, &mut rng)).collect();
        let w: Vec<Vec<f64>> = (0..n_f).map(|_| unit_vec(d_v, &mut rng)).collect();
        let enc = match encoder {
            EncoderKind::DenseLinear => {
                let mut m = Mat::zeros(n_f, d_k * d_v);
                for x in &mut m.data {
                    *x = rng.gen_range(-0.5..0.5);
                }
                Encoder::Dense { w: m, b: (0..n_f).map(|_| rng.gen_range(-0.1..0.1)).collect() }
            }
            EncoderKind::Bilinear => Encoder::Bilinear {
                v: (0..n_f).map(|_| unit_vec(d_k, &mut rng)).collect(),
                w: (0..n_f).map(|_| unit_vec(d_v, &mut rng)).collect(),
                tied: false,
            },
            EncoderKind::BilinearTied => Encoder::Bilinear { v: Vec::new(), w: Vec::new(), tied: true },
        };
        Dictionary {
            n_f,
            d_k,
            d_v,
            decoder: Decoder::Rank1 { v, w },
            encoder: enc,
            sparsity: SparsityRule::TopK { k: 2 },
            mean: Mat::from_fn(d_k, d_v, |r, c| 0.05 * ((r * d_v + c) as f64).sin()),
        }
    }

    #[test]
    fn encode_at_mean_gives_bias_or_zero() {
        let dict = small_dict(EncoderKind::DenseLinear, 1);
        let a = dict.encode(&dict.mean.clone()).unwrap();
        if let Encoder::Dense { b, .. } = &dict.encoder {
            for (ai, bi) in a.iter().zip(b) {
                assert!((ai - bi).abs() < 1e-12);
            }
        }
        let dict = small_dict(EncoderKind::Bilinear, 2);
        let a = dict.encode(&dict.mean.clone()).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn tied_matched_filter_recovers_planted_coefficient() {
        let dict = small_dict(EncoderKind::BilinearTied, 3);
        let (v, w) = match &dict.decoder {
            Decoder::Rank1 { v, w } => (v.clone(), w.clone()),
            _ => unreachable!(),
        };
        let c = 1.7;
        let mut s = dict.mean.clone();
        s.add_outer(&v[1], &w[1], c);
        let a = dict.encode(&s).unwrap();
        assert!((a[1] - c).abs() < 1e-12);
        for j in 0..dict.n_f {
            if j != 1 {
                let want = c * dot(&v[1], &v[j]) * dot(&w[1], &w[j]);
                assert!((a[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encode_matches_naive_loop_oracle() {
        for kind in [EncoderKind::DenseLinear, EncoderKind::Bilinear] {
            let dict = small_dict(kind, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let s = Mat::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
            let a = dict.encode(&s).unwrap();
            // Naive: explicit loops over entries.
            let mut x = vec![0.0; 64];
            for i in 0..64 {
                x[i] = s.data[i] - dict.mean.data[i];
            }
            for i in 0..dict.n_f {
                let want = match &dict.encoder {
                    Encoder::Dense { w, b } => {
                        let mut acc = b[i];
                        for j in 0..64 {
                            acc += w.get(i, j) * x[j];
                        }
                        acc
                    }
                    Encoder::Bilinear { v, w, .. } => {
                        let mut acc = 0.0;
                        for r in 0..8 {
                            for c in 0..8 {
                                acc += v[i][r] * x[r * 8 + c] * w[i][c];
                            }
                        }
                        acc
                    }
                };
                assert!((a[i] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn topk_basics() {
        let rule = SparsityRule::TopK { k: 2 };
        // All-negative pre-activations give the all-zero code.
        let sel = apply_sparsity_batch(&[vec![-1.0, -0.5, -2.0]], &rule, 3).unwrap();
        assert!(sel[0].is_empty());
        // (3, 1, 2) with k = 2 keeps indices 0 and 2.
        let sel = apply_sparsity_batch(&[vec![3.0, 1.0, 2.0]], &rule, 3).unwrap();
        assert_eq!(sel[0], vec![(0, 3.0), (2, 2.0)]);
        // Exact tie: lower index wins.
        let sel = apply_sparsity_batch(&[vec![1.0, 2.0, 2.0, 2.0]], &SparsityRule::TopK { k: 2 }, 4).unwrap();
        assert_eq!(sel[0], vec![(1, 2.0), (2, 2.0)]);
        // k > n_f is a config error.
        assert!(apply_sparsity_batch(&[vec![1.0]], &SparsityRule::TopK { k: 5 }, 1).is_err());
    }

    #[test]
    fn batch_topk_is_global_across_batch() {
        let rule = SparsityRule::BatchTopK { k: 1 };
        let pres = vec![vec![3.0, 0.5, 0.1], vec![2.5, 2.9, 0.2]];
        let sel = apply_sparsity_batch(&pres, &rule, 3).unwrap();
        let total: usize = sel.iter().map(|s| s.len()).sum();
        assert_eq!(total, 2);
        assert_eq!(sel[0], vec![(0, 3.0)]);
        assert_eq!(sel[1], vec![(1, 2.9)]);
        // Exhaustive 3x3 check: batch budget picks the globally largest.
        let pres = vec![vec![1.0, 6.0, 2.0], vec![5.0, 0.1, 0.2], vec![0.3, 0.4, 7.0]];
        let sel = apply_sparsity_batch(&pres, &rule, 3).unwrap();
        let mut kept: Vec<f64> = sel.iter().flatten().map(|p| p.1).collect();
        kept.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert_eq!(kept, vec![7.0, 6.0, 5.0]);
    }

    #[test]
    fn jumprelu_thresholds_per_atom() {
        let rule = SparsityRule::JumpRelu { theta: vec![0.5, 0.1] };
        let sel = apply_sparsity_batch(&[vec![0.4, 0.4]], &rule, 2).unwrap();
        assert_eq!(sel[0], vec![(1, 0.4)]);
    }

    #[test]
    fn decode_cases() {
        let dict = small_dict(EncoderKind::DenseLinear, 5);
        // Zero code decodes to the mean.
        let out = dict.decode(&vec![0.0; 4]).unwrap();
        assert_eq!(out.data, dict.mean.data);
        // One-hot code: Ŝ − M = c · v w ᵀ with Frobenius norm |c|.
        let mut code = vec![0.0; 4];
        code[0] = -2.5;
        let out = dict.decode(&code).unwrap();
        let mut delta = out.clone();
        delta.add_scaled(&dict.mean, -1.0);
        assert!((delta.frob_norm() - 2.5).abs() < 1e-12);
        // Random code matches a naive accumulation oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let code: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = dict.decode(&code).unwrap();
        let mut want = dict.mean.clone();
        for i in 0..4 {
            let a = dict.atom_matrix(i);
            want.add_scaled(&a, code[i]);
        }
        for (x, y) in out.data.iter().zip(&want.data) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn renorm_is_idempotent_and_function_preserving_for_dense() {
        let mut dict = small_dict(EncoderKind::DenseLinear, 6);
        // Perturb decoder norms.
        if let Decoder::Rank1 { v, w } = &mut dict.decoder {
            for x in v[0].iter_mut() {
                *x *= 3.0;
            }
            for x in w[2].iter_mut() {
                *x *= 0.25;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = Mat::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
        let before = dict.decode(&dict.sparse_code(&s).unwrap()).unwrap();
        dict.renorm();
        let after = dict.decode(&dict.sparse_code(&s).unwrap()).unwrap();
        for (a, b) in before.data.iter().zip(&after.data) {
            assert!((a - b).abs() < 1e-9, "renorm changed the encode→decode map");
        }
        let snapshot = dict.clone();
        dict.renorm();
        if let (Decoder::Rank1 { v: v1, .. }, Decoder::Rank1 { v: v2, .. }) =
            (&snapshot.decoder, &dict.decoder)
        {
            for (a, b) in v1.iter().zip(v2) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_all_variants() {
        let dir = std::env::temp_dir().join("writesae_dict_test");
        std::fs::create_dir_all(&dir).unwrap();
        for (i, kind) in [EncoderKind::DenseLinear, EncoderKind::Bilinear, EncoderKind::BilinearTied]
            .into_iter()
            .enumerate()
        {
            let mut dict = small_dict(kind, 20 + i as u64);
            if i == 1 {
                dict.sparsity = SparsityRule::JumpRelu { theta: vec![0.1, 0.2, 0.3, 0.4] };
            }
            let path = dir.join(format!("dict{i}.wsdc"));
            write_dictionary_file(&dict, &path).unwrap();
            let rd = read_dictionary_file(&path).unwrap();
            assert_eq!(dict, rd);
            std::fs::remove_file(&path).unwrap();
        }
    }
}
