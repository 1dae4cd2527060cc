//! Per-cell state/write extraction and the WSAE capture file format.
//!
//! A capture holds one post-write state snapshot and one write event per
//! (sequence, position) for a single (layer, head) cell, plus the train-split
//! mean used for centering. Split is 80/20 by whole sequence, seeded.
//!
//! File format (little-endian, version 1) — the extension point for external
//! producers:
//!
//! ```text
//! magic    4 bytes  "WSAE"
//! version  u32      1
//! d_k      u32
//! d_v      u32
//! flags    u32      bit0 = centered
//! n        u64      record count
//! mean     d_k·d_v f64
//! records  n × { seq_id u64, position u32, state d_k·d_v f64,
//!                k d_k f64, v d_v f64, q d_k f64, alpha f64, beta f64 }
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::hosts::{HostModel, TraceMode, WriteEvent};
use crate::mat::Mat;
use crate::{subseed, Cell, Error, Result, Token};

const MAGIC: [u8; 4] = *b"WSAE";
const VERSION: u32 = 1;

/// Default split seed when none is supplied (and after reading a file,
/// which does not persist the split).
pub const DEFAULT_SPLIT_SEED: u64 = 42;

#[derive(Debug, Clone)]
pub struct CaptureDataset {
    pub cell: Cell,
    pub d_k: usize,
    pub d_v: usize,
    /// Post-write state per record; centered iff `centered`.
    pub states: Vec<Mat>,
    pub writes: Vec<WriteEvent>,
    pub mean: Mat,
    pub centered: bool,
    pub split_seed: u64,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl CaptureDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// The raw (uncentered) state of record `i`.
    pub fn raw_state(&self, i: usize) -> Mat {
        if self.centered {
            let mut s = self.states[i].clone();
            s.add_scaled(&self.mean, 1.0);
            s
        } else {
            self.states[i].clone()
        }
    }

    /// Derive the 80/20 by-sequence split from the record sequence ids.
    fn build_split(&mut self) {
        let mut seq_ids: Vec<u64> = Vec::new();
        for w in &self.writes {
            if seq_ids.last() != Some(&w.seq_id) && !seq_ids.contains(&w.seq_id) {
                seq_ids.push(w.seq_id);
            }
        }
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(subseed(self.split_seed, 0x5b11, 0));
        let mut order = seq_ids.clone();
        order.shuffle(&mut rng);
        let n_train = ((order.len() as f64) * 0.8).round() as usize;
        let n_train = n_train.clamp(usize::from(order.len() > 1), order.len());
        let train_set: std::collections::BTreeSet<u64> = order[..n_train].iter().cloned().collect();
        self.train_idx.clear();
        self.val_idx.clear();
        for (i, w) in self.writes.iter().enumerate() {
            if train_set.contains(&w.seq_id) {
                self.train_idx.push(i);
            } else {
                self.val_idx.push(i);
            }
        }
    }

    /// Subtract the train-split mean from every state and store it.
    pub fn center(&mut self) -> Result<()> {
        if self.centered {
            return Err(Error::State("dataset is already centered".into()));
        }
        if self.train_idx.is_empty() {
            return Err(Error::State("cannot center: empty train split".into()));
        }
        let mut mean = Mat::zeros(self.d_k, self.d_v);
        for &i in &self.train_idx {
            mean.add_scaled(&self.states[i], 1.0);
        }
        mean.scale(1.0 / self.train_idx.len() as f64);
        for s in &mut self.states {
            s.add_scaled(&mean, -1.0);
        }
        self.mean = mean;
        self.centered = true;
        Ok(())
    }

    /// Undo `center`, restoring raw states.
    pub fn decenter(&mut self) -> Result<()> {
        if !self.centered {
            return Err(Error::State("dataset is not centered".into()));
        }
        let mean = self.mean.clone();
        for s in &mut self.states {
            s.add_scaled(&mean, 1.0);
        }
        self.mean = Mat::zeros(self.d_k, self.d_v);
        self.centered = false;
        Ok(())
    }
}

/// Run the model over a corpus and extract one snapshot + write event per
/// (sequence, position) at `cell`. Ordering is sequence-major,
/// position-minor; record seq_id is the corpus index.
pub fn capture_states(model: &HostModel, corpus: &[Vec<Token>], cell: Cell) -> Result<CaptureDataset> {
    capture_states_seeded(model, corpus, cell, DEFAULT_SPLIT_SEED)
}

pub fn capture_states_seeded(
    model: &HostModel,
    corpus: &[Vec<Token>],
    cell: Cell,
    split_seed: u64,
) -> Result<CaptureDataset> {
    if corpus.is_empty() {
        return Err(Error::Config("capture requires a nonempty corpus".into()));
    }
    if cell.0 >= model.config.n_layers || cell.1 >= model.config.n_heads {
        return Err(Error::Config(format!(
            "cell ({}, {}) outside model ({} layers, {} heads)",
            cell.0, cell.1, model.config.n_layers, model.config.n_heads
        )));
    }
    let d_v_eff = model.config.state_cols();
    let mut ds = CaptureDataset {
        cell,
        d_k: model.config.d_k,
        d_v: d_v_eff,
        states: Vec::new(),
        writes: Vec::new(),
        mean: Mat::zeros(model.config.d_k, d_v_eff),
        centered: false,
        split_seed,
        train_idx: Vec::new(),
        val_idx: Vec::new(),
    };
    for (sid, seq) in corpus.iter().enumerate() {
        let mut hook = |_: &mut crate::hosts::EditCtx<'_>| {};
        let trace = model.forward_with(seq, TraceMode::Cell(cell), &mut hook)?;
        let ct = trace.cell(cell);
        for (t, (s, e)) in ct.states.iter().zip(&ct.events).enumerate() {
            let mut e = e.clone();
            e.seq_id = sid as u64;
            debug_assert_eq!(e.position as usize, t);
            ds.states.push(s.clone());
            ds.writes.push(e);
        }
    }
    ds.build_split();
    Ok(ds)
}

// ---------------------------------------------------------------------------
// File IO
// ---------------------------------------------------------------------------

pub fn write_capture_file(ds: &CaptureDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.d_k as u32).to_le_bytes())?;
    w.write_all(&(ds.d_v as u32).to_le_bytes())?;
    let flags: u32 = u32::from(ds.centered);
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    write_f64s(&mut w, &ds.mean.data)?;
    for (s, e) in ds.states.iter().zip(&ds.writes) {
        w.write_all(&e.seq_id.to_le_bytes())?;
        w.write_all(&e.position.to_le_bytes())?;
        write_f64s(&mut w, &s.data)?;
        write_f64s(&mut w, &e.k)?;
        write_f64s(&mut w, &e.v)?;
        write_f64s(&mut w, &e.q)?;
        w.write_all(&e.alpha.to_le_bytes())?;
        w.write_all(&e.beta.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_capture_file(path: &Path) -> Result<CaptureDataset> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::BadVersion { found: version, expected: VERSION });
    }
    let d_k = read_u32(&mut r, "d_k")? as usize;
    let d_v = read_u32(&mut r, "d_v")? as usize;
    if d_k == 0 || d_v == 0 {
        return Err(Error::Format("zero state dimension".into()));
    }
    let flags = read_u32(&mut r, "flags")?;
    let n = read_u64(&mut r, "record count")? as usize;
    let mut mean = Mat::zeros(d_k, d_v);
    read_f64s(&mut r, &mut mean.data, "mean")?;
    let mut ds = CaptureDataset {
        cell: (0, 0),
        d_k,
        d_v,
        states: Vec::with_capacity(n),
        writes: Vec::with_capacity(n),
        mean,
        centered: flags & 1 == 1,
        split_seed: DEFAULT_SPLIT_SEED,
        train_idx: Vec::new(),
        val_idx: Vec::new(),
    };
    for i in 0..n {
        let ctx = format!("record {i}");
        let seq_id = read_u64(&mut r, &ctx)?;
        let position = read_u32(&mut r, &ctx)?;
        let mut state = Mat::zeros(d_k, d_v);
        read_f64s(&mut r, &mut state.data, &ctx)?;
        let mut k = vec![0.0; d_k];
        let mut v = vec![0.0; d_v];
        let mut q = vec![0.0; d_k];
        read_f64s(&mut r, &mut k, &ctx)?;
        read_f64s(&mut r, &mut v, &ctx)?;
        read_f64s(&mut r, &mut q, &ctx)?;
        let mut buf = [0u8; 8];
        read_exact(&mut r, &mut buf, &ctx)?;
        let alpha = f64::from_le_bytes(buf);
        read_exact(&mut r, &mut buf, &ctx)?;
        let beta = f64::from_le_bytes(buf);
        ds.states.push(state);
        ds.writes.push(WriteEvent { seq_id, position, k, v, q, alpha, beta });
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => {}
        _ => return Err(Error::Format("trailing bytes after final record".into())),
    }
    ds.build_split();
    Ok(ds)
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, out: &mut [f64], what: &str) -> Result<()> {
    let mut b = [0u8; 8];
    for o in out {
        read_exact(r, &mut b, what)?;
        *o = f64::from_le_bytes(b);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hosts::{HostConfig, WriteRule};

    fn toy_capture() -> (HostModel, Vec<Vec<Token>>, CaptureDataset) {
        let model = HostModel::init(HostConfig::toy(WriteRule::GatedDelta, 2)).unwrap();
        let corpus = crate::corpus::uniform_corpus(64, 6, 24, 4);
        let ds = capture_states(&model, &corpus, (1, 0)).unwrap();
        (model, corpus, ds)
    }

    #[test]
    fn capture_counts_and_determinism() {
        let (model, corpus, ds) = toy_capture();
        assert_eq!(ds.len(), 6 * 24);
        let ds2 = capture_states(&model, &corpus, (1, 0)).unwrap();
        assert_eq!(ds.states.len(), ds2.states.len());
        for (a, b) in ds.states.iter().zip(&ds2.states) {
            assert_eq!(a.data, b.data);
        }
        for (a, b) in ds.writes.iter().zip(&ds2.writes) {
            assert_eq!(a, b);
        }
        // One sequence of length L yields exactly L records.
        let one = capture_states(&model, &corpus[..1], (0, 1)).unwrap();
        assert_eq!(one.len(), 24);
    }

    #[test]
    fn capture_states_match_forward_rerun() {
        let (model, corpus, ds) = toy_capture();
        let trace = model.forward(&corpus[2]).unwrap();
        let ct = trace.cell((1, 0));
        for t in 0..corpus[2].len() {
            let rec = &ds.states[2 * 24 + t];
            let diff: f64 = rec
                .data
                .iter()
                .zip(&ct.states[t].data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-10);
        }
    }

    #[test]
    fn split_is_by_whole_sequence() {
        let (_, _, ds) = toy_capture();
        let train: std::collections::BTreeSet<u64> =
            ds.train_idx.iter().map(|&i| ds.writes[i].seq_id).collect();
        let val: std::collections::BTreeSet<u64> =
            ds.val_idx.iter().map(|&i| ds.writes[i].seq_id).collect();
        assert!(train.is_disjoint(&val));
        assert!(!train.is_empty() && !val.is_empty());
    }

    #[test]
    fn centering_and_roundtrip() {
        let (_, _, mut ds) = toy_capture();
        let originals: Vec<Mat> = ds.states.clone();
        ds.center().unwrap();
        assert!(ds.centered);
        // Train-split post-centering mean ≤ 1e-9 entrywise.
        let mut mean = Mat::zeros(ds.d_k, ds.d_v);
        for &i in &ds.train_idx {
            mean.add_scaled(&ds.states[i], 1.0);
        }
        mean.scale(1.0 / ds.train_idx.len() as f64);
        assert!(mean.data.iter().all(|x| x.abs() <= 1e-9));
        // Double-centering is an error.
        assert!(matches!(ds.center(), Err(Error::State(_))));
        // De-centering restores originals.
        ds.decenter().unwrap();
        for (a, b) in ds.states.iter().zip(&originals) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn all_identical_states_center_to_zero() {
        let (_, _, mut ds) = toy_capture();
        let proto = ds.states[0].clone();
        for s in &mut ds.states {
            *s = proto.clone();
        }
        ds.center().unwrap();
        assert!(ds.states.iter().all(|s| s.data.iter().all(|x| x.abs() < 1e-12)));
    }

    #[test]
    fn file_roundtrip_identity() {
        let (_, _, mut ds) = toy_capture();
        ds.center().unwrap();
        let dir = std::env::temp_dir().join("writesae_capture_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.wsae");
        write_capture_file(&ds, &path).unwrap();
        let rd = read_capture_file(&path).unwrap();
        assert_eq!(rd.d_k, ds.d_k);
        assert_eq!(rd.d_v, ds.d_v);
        assert_eq!(rd.centered, ds.centered);
        assert_eq!(rd.mean.data, ds.mean.data);
        assert_eq!(rd.len(), ds.len());
        for (a, b) in rd.states.iter().zip(&ds.states) {
            assert_eq!(a.data, b.data);
        }
        for (a, b) in rd.writes.iter().zip(&ds.writes) {
            assert_eq!(a, b);
        }
        assert_eq!(rd.train_idx, ds.train_idx);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn file_error_taxonomy() {
        let dir = std::env::temp_dir().join("writesae_capture_test");
        std::fs::create_dir_all(&dir).unwrap();
        // Wrong magic.
        let p1 = dir.join("badmagic.wsae");
        std::fs::write(&p1, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_capture_file(&p1), Err(Error::BadMagic { .. })));
        // Wrong version.
        let p2 = dir.join("badver.wsae");
        let mut bytes = b"WSAE".to_vec();
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 24]);
        std::fs::write(&p2, &bytes).unwrap();
        assert!(matches!(read_capture_file(&p2), Err(Error::BadVersion { found: 9, .. })));
        // Truncation.
        let (_, _, ds) = toy_capture();
        let p3 = dir.join("trunc.wsae");
        write_capture_file(&ds, &p3).unwrap();
        let full = std::fs::read(&p3).unwrap();
        std::fs::write(&p3, &full[..full.len() - 5]).unwrap();
        assert!(matches!(read_capture_file(&p3), Err(Error::Truncated(_))));
        for p in [p1, p2, p3] {
            let _ = std::fs::remove_file(p);
        }
    }
}
