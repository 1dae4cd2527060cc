//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. Expensive artifacts (trained hosts, captures,
//! dictionaries) are built once in a shared fixture.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::sync::OnceLock;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use writesae::capture::{capture_states, CaptureDataset};
use writesae::causal::{self, Condition, ScaleMode};
use writesae::corpus::RecallGrammar;
use writesae::hosts::{
    gdn_step, train_toy_host_with, HostConfig, HostModel, HostTrainConfig, Token, WriteEvent,
    WriteRule,
};
use writesae::mat::{dot, kl_div, normalized, Mat};
use writesae::partition::{self, AtomGeometry};
use writesae::predictor;
use writesae::sae::{self, DecoderKind, Dictionary, EncoderKind, SaeSpec, SparsitySpec, TrainConfig};
use writesae::steer;
use writesae::stats;

// ---------------------------------------------------------------------------
// Shared fixture
// ---------------------------------------------------------------------------

struct Fixture {
    grammar: RecallGrammar,
    gdn: HostModel,
    ssm: HostModel,
    cap_corpus: Vec<Vec<Token>>,
    gdn_ds: CaptureDataset,
    ssm_ds: CaptureDataset,
    gdn_dict: Dictionary,
    gdn_geoms: Vec<AtomGeometry>,
}

fn train_cfg() -> HostTrainConfig {
    HostTrainConfig { batch: 8, lr_peak: 3e-3, lr_min: 3e-4, warmup: 30, clip: 1.0, eval_every: 200 }
}

fn sae_spec(n_f: usize, k: usize) -> SaeSpec {
    SaeSpec {
        n_f,
        decoder: DecoderKind::Rank1,
        encoder: EncoderKind::DenseLinear,
        sparsity: SparsitySpec::TopK { k },
    }
}

fn sae_cfg(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 40, k_aux: 32, ..TrainConfig::toy(seed) }
}

/// The cell with the fastest decay spectrum by construction: layer 0, last
/// head. Its write-dominated states carry the register regime.
const CELL: (usize, usize) = (0, 1);

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let grammar = RecallGrammar::new(7);
        let train_corpus = grammar.corpus(300, 64, 11);
        let (gdn, _) =
            train_toy_host_with(HostConfig::toy(WriteRule::GatedDelta, 0), &train_corpus, 1600, &train_cfg())
                .expect("gdn host");
        // State size matched to the 16×16 GDN cell: d_state = 256.
        let ssm_cfg = HostConfig { d_k: 256, ..HostConfig::toy(WriteRule::DiagonalSsm, 0) };
        let (ssm, _) = train_toy_host_with(ssm_cfg, &train_corpus, 1600, &train_cfg()).expect("ssm host");
        let cap_corpus = grammar.corpus(300, 16, 12);
        let mut gdn_ds = capture_states(&gdn, &cap_corpus, CELL).expect("gdn capture");
        gdn_ds.center().expect("center");
        let mut ssm_ds = capture_states(&ssm, &cap_corpus, CELL).expect("ssm capture");
        ssm_ds.center().expect("center");
        let (gdn_dict, _) = sae::train_sae(&gdn_ds, &sae_spec(128, 2), &sae_cfg(0)).expect("gdn sae");
        let geoms = partition::cosine_to_native(&gdn_dict, &gdn_ds).expect("geoms");
        let (gdn_geoms, _) = partition::classify(&geoms, 0.05);
        Fixture { grammar, gdn, ssm, cap_corpus, gdn_ds, ssm_ds, gdn_dict, gdn_geoms }
    })
}

fn unit_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalized(&v).unwrap()
}

/// Linear-readout host: no MLP, downstream write gate closed.
fn linear_host(seed: u64) -> HostModel {
    let mut cfg = HostConfig::toy(WriteRule::GatedDelta, seed);
    cfg.use_mlp = false;
    let mut model = HostModel::init(cfg).unwrap();
    for layer in &mut model.layers {
        for head in &mut layer.heads {
            head.w_beta.iter_mut().for_each(|x| *x = 0.0);
            head.b_beta = -40.0;
        }
    }
    model
}

// ---------------------------------------------------------------------------
// C1 — recurrence oracle
// ---------------------------------------------------------------------------

#[test]
fn c01_recurrence_matches_double_loop_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    // 1,000 random step instances at d = 8 against the naive elementwise
    // double loop.
    let mut max_err: f64 = 0.0;
    for _ in 0..1000 {
        let s = Mat::from_fn(8, 8, |_, _| rng.gen_range(-2.0..2.0));
        let e = WriteEvent {
            seq_id: 0,
            position: 0,
            k: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            v: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            q: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            alpha: rng.gen_range(0.05..1.0),
            beta: rng.gen_range(0.0..1.0),
        };
        let (fast, _) = gdn_step(&s, &e).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for l in 0..8 {
                    let idm = if i == l { 1.0 } else { 0.0 };
                    acc += (idm - e.beta * e.k[i] * e.k[l]) * s.get(l, j);
                }
                let oracle = e.alpha * acc + e.beta * e.k[i] * e.v[j];
                max_err = max_err.max((fast.get(i, j) - oracle).abs());
            }
        }
    }
    assert!(max_err <= 1e-10, "step oracle max err {max_err}");
    // Forward traces of length 64 equal cumulative step application.
    let mut fwd_err: f64 = 0.0;
    for seed in 0..5 {
        let cfg = HostConfig {
            d_k: 8,
            d_v: 8,
            ..HostConfig::toy(WriteRule::GatedDelta, 200 + seed)
        };
        let model = HostModel::init(cfg).unwrap();
        let tokens: Vec<Token> = (0..64).map(|_| rng.gen_range(0..64)).collect();
        let trace = model.forward(&tokens).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                let ct = trace.cell((l, h));
                let mut s = Mat::zeros(8, 8);
                for (t, e) in ct.events.iter().enumerate() {
                    let (s2, _) = gdn_step(&s, e).unwrap();
                    s = s2;
                    for (a, b) in s.data.iter().zip(&ct.states[t].data) {
                        fwd_err = fwd_err.max((a - b).abs());
                    }
                }
            }
        }
    }
    assert!(fwd_err <= 1e-10, "forward composition max err {fwd_err}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "oracle took {secs:.1}s");
    eprintln!("[PASS] C1 recurrence oracle: step err {max_err:.2e}, forward err {fwd_err:.2e}, {secs:.1}s");
}

// ---------------------------------------------------------------------------
// C2 — propagation exactness
// ---------------------------------------------------------------------------

#[test]
fn c02_propagation_matches_two_trajectory_differencing() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut max_err: f64 = 0.0;
    for trial in 0..200 {
        let model = HostModel::init(HostConfig::toy(WriteRule::GatedDelta, 300 + trial % 8)).unwrap();
        let tokens: Vec<Token> = (0..24).map(|_| rng.gen_range(0..64)).collect();
        let cell = ((trial % 2) as usize, ((trial / 2) % 2) as usize);
        let t0 = rng.gen_range(2..18);
        let spec = predictor::PerturbationSpec {
            cell,
            position: t0,
            eps: [0.1, 0.5, 1.0][trial as usize % 3],
            key_factor: unit_vec(16, &mut rng),
            out_factor: unit_vec(16, &mut rng),
        };
        let base = model.forward(&tokens).unwrap();
        let patched = predictor::forward_with_injection(&model, &tokens, &spec).unwrap();
        let last = tokens.len() - 1;
        let mut diff = patched.cell(cell).states[last].clone();
        diff.add_scaled(&base.cell(cell).states[last], -1.0);
        let prop = predictor::propagate_perturbation(&spec.delta(), &base.cell(cell).events[t0 + 1..=last]);
        for (a, b) in diff.data.iter().zip(&prop.data) {
            max_err = max_err.max((a - b).abs());
        }
    }
    assert!(max_err <= 1e-9, "differencing error {max_err}");
    // Rank preservation under β = 0.
    let mut worst_ratio: f64 = 0.0;
    for trial in 0..40 {
        let events: Vec<WriteEvent> = (0..12)
            .map(|t| WriteEvent {
                seq_id: 0,
                position: t,
                k: unit_vec(16, &mut rng),
                v: (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                q: unit_vec(16, &mut rng),
                alpha: rng.gen_range(0.2..1.0),
                beta: 0.0,
            })
            .collect();
        let d0 = Mat::outer(&unit_vec(16, &mut rng), &unit_vec(16, &mut rng));
        let out = predictor::propagate_perturbation(&d0, &events);
        let svd = out.svd();
        worst_ratio = worst_ratio.max(svd.s[1] / svd.s[0].max(1e-300));
        let _ = trial;
    }
    assert!(worst_ratio <= 1e-9, "rank leak {worst_ratio}");
    eprintln!("[PASS] C2 propagation exactness: max err {max_err:.2e}, σ₂/σ₁ ≤ {worst_ratio:.2e}");
}

// ---------------------------------------------------------------------------
// C3 — three-factor fit quality
// ---------------------------------------------------------------------------

#[test]
fn c03_three_factor_fit_exact_on_linear_and_strong_on_trained_host() {
    // (a) Constructed linear-readout host: every fit R² ≥ 0.999.
    let model = linear_host(42);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut min_r2 = f64::INFINITY;
    let mut n_fits = 0;
    'outer: for f in 0..12u64 {
        for s in 0..10u64 {
            let tokens: Vec<Token> = (0..24).map(|_| rng.gen_range(0..64)).collect();
            let kf = unit_vec(16, &mut rng);
            let of = unit_vec(16, &mut rng);
            let fit = predictor::fit_feature_sequence(&model, &tokens, (1, 0), 16, &kf, &of, &[0.5], 400 + f * 100 + s)
                .unwrap();
            if fit.degenerate {
                continue;
            }
            min_r2 = min_r2.min(fit.r2);
            n_fits += 1;
            if n_fits == 100 {
                break 'outer;
            }
        }
    }
    assert!(n_fits >= 100, "only {n_fits} linear fits");
    assert!(min_r2 >= 0.999, "linear-host min R² {min_r2}");
    // (b) Trained nonlinear host at ε ≤ 0.3: median per-feature R² ≥ 0.8.
    let fx = fixture();
    let eval_corpus = fx.grammar.corpus(10, 32, 77);
    let mut r2s = Vec::new();
    for f in 0..10u64 {
        let kf = unit_vec(16, &mut rng);
        let of = unit_vec(16, &mut rng);
        for seq in &eval_corpus {
            let fit = predictor::fit_feature_sequence(&fx.gdn, seq, (1, 1), seq.len() - 5, &kf, &of, &[0.1, 0.3], 500 + f)
                .unwrap();
            if !fit.degenerate {
                r2s.push(fit.r2);
            }
        }
    }
    let med = stats::median(&r2s);
    assert!(r2s.len() >= 90);
    assert!(med >= 0.8, "trained-host median R² {med}");
    eprintln!(
        "[PASS] C3 three-factor fits: linear host min R² {min_r2:.6} over {n_fits}, trained host median R² {med:.3} over {}",
        r2s.len()
    );
}

// ---------------------------------------------------------------------------
// C4 — planted-dictionary recovery
// ---------------------------------------------------------------------------

#[test]
fn c04_planted_dictionary_recovery() {
    let start = Instant::now();
    let (mut ds, truth) = sae::planted::planted_capture(32, 16, 16, 5000, 4, 42);
    ds.center().unwrap();
    let cfg = TrainConfig { epochs: 20, ..TrainConfig::toy(1) };
    let (dict, _) = sae::train_sae(&ds, &sae_spec(64, 4), &cfg).unwrap();
    let matches = sae::planted::match_atoms(&dict, &truth);
    let good = matches.iter().filter(|m| m.cos_v > 0.9 && m.cos_w > 0.9).count();
    let secs = start.elapsed().as_secs_f64();
    assert!(good * 100 >= 80 * 32, "recovered {good}/32 planted atoms");
    assert!(secs < 300.0, "recovery took {secs:.0}s");
    eprintln!("[PASS] C4 planted recovery: {good}/32 atoms at factor cosines > 0.9 in {secs:.1}s");
}

// ---------------------------------------------------------------------------
// C5 — gradient check
// ---------------------------------------------------------------------------

#[test]
fn c05_sae_gradients_match_finite_differences() {
    let mut worst_rel: f64 = 0.0;
    let mut checked = 0usize;
    for inst in 0..50u64 {
        let (mut ds, _) = sae::planted::planted_capture(4, 8, 8, 24, 2, 1000 + inst);
        ds.center().unwrap();
        let spec = sae_spec(8, 2);
        let cfg = TrainConfig { lambda_aux: 1e-2, k_aux: 4, seed: inst, ..TrainConfig::default() };
        let (rel, n) = sae::grad_check(&ds, &spec, &cfg, 3, 1e-6).unwrap();
        worst_rel = worst_rel.max(rel);
        checked += n;
    }
    assert!(worst_rel <= 1e-5, "worst relative gradient error {worst_rel}");
    eprintln!("[PASS] C5 gradient check: {checked} probes across 50 instances, worst rel err {worst_rel:.2e}");
}

// ---------------------------------------------------------------------------
// C6 — replacement harness soundness
// ---------------------------------------------------------------------------

#[test]
fn c06_replacement_harness_soundness() {
    let fx = fixture();
    let firings = causal::find_firings(&fx.gdn_ds, &fx.gdn_dict, 2).unwrap();
    assert!(firings.len() >= 20);
    // Atom ≡ native write gives KL ≤ 1e-10 on every tested firing; the
    // identity dictionary holds each firing's own native write direction.
    let by_key: std::collections::BTreeMap<(u64, u32), usize> = fx
        .gdn_ds
        .writes
        .iter()
        .enumerate()
        .map(|(i, w)| ((w.seq_id, w.position), i))
        .collect();
    let mut max_kl: f64 = 0.0;
    for f in firings.iter().take(40) {
        let rec = by_key[&(f.seq_id, f.position)];
        let w = &fx.gdn_ds.writes[rec];
        let native = w.native_write();
        let mut ident = fx.gdn_dict.clone();
        if let sae::Decoder::Rank1 { v, w: wv } = &mut ident.decoder {
            v[f.feature] = normalized(&w.k).unwrap();
            wv[f.feature] = normalized(&w.v).unwrap();
        }
        let tokens = &fx.cap_corpus[f.seq_id as usize];
        let kl = causal::replace_and_score_scaled(
            &fx.gdn,
            tokens,
            &ident,
            f,
            Condition::Atom,
            ScaleMode::MatchedNorm,
            1,
        )
        .unwrap();
        max_kl = max_kl.max(kl);
        let _ = native;
    }
    assert!(max_kl <= 1e-10, "identity substitution KL {max_kl}");
    // Condition-order invariance, bit-exact.
    for f in firings.iter().take(6) {
        let tokens = &fx.cap_corpus[f.seq_id as usize];
        let score = |cond| {
            causal::replace_and_score_scaled(&fx.gdn, tokens, &fx.gdn_dict, f, cond, ScaleMode::MatchedNorm, 9)
                .unwrap()
        };
        let fwd = [score(Condition::Atom), score(Condition::Delete), score(Condition::Random)];
        let rev = {
            let r = score(Condition::Random);
            let d = score(Condition::Delete);
            let a = score(Condition::Atom);
            [a, d, r]
        };
        assert_eq!(fwd, rev, "condition order leaked state");
    }
    // Aggregation against a straight-line reference on synthetic triples.
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let triples: Vec<causal::KlTriple> = (0..100)
        .map(|i| causal::KlTriple {
            seq_id: (i % 9) as u64,
            position: i as u32,
            feature: i % 5,
            kl_atom: rng.gen_range(0.0..1.0),
            kl_delete: rng.gen_range(0.0..2.0),
            kl_random: rng.gen_range(0.0..3.0),
        })
        .collect();
    let s = causal::summarize_triples(&triples, None, 4).unwrap();
    let wins = triples.iter().filter(|t| t.kl_atom < t.kl_delete).count();
    let strict =
        triples.iter().filter(|t| t.kl_atom < t.kl_delete && t.kl_delete < t.kl_random).count();
    assert_eq!(s.win_rate, wins as f64 / 100.0);
    assert_eq!(s.strict_chain_rate, strict as f64 / 100.0);
    eprintln!("[PASS] C6 harness soundness: identity KL ≤ {max_kl:.2e}, order-invariant, aggregation exact");
}

// ---------------------------------------------------------------------------
// C7 — directional replacement result on the trained host
// ---------------------------------------------------------------------------

#[test]
fn c07_atom_beats_deletion_on_trained_host() {
    let fx = fixture();
    let firings = causal::find_firings(&fx.gdn_ds, &fx.gdn_dict, 30).unwrap();
    let take: Vec<_> = firings.into_iter().take(1000).collect();
    assert!(take.len() >= 700, "need a large firing set, got {}", take.len());
    let report = causal::run_replacement_suite(
        &fx.gdn,
        &fx.cap_corpus,
        &fx.gdn_dict,
        &take,
        Some(&fx.gdn_geoms),
        ScaleMode::MatchedNorm,
        5,
    )
    .unwrap();
    let s = &report.summary;
    assert!(s.win_rate > 0.60, "win rate {}", s.win_rate);
    assert!(s.win_ci.low > 0.50, "Wilson CI low {}", s.win_ci.low);
    assert!(s.med_random.0 > s.med_atom.0, "median ordering violated");
    eprintln!(
        "[PASS] C7 replacement: n {} win {:.3} CI [{:.3},{:.3}] strict {:.3} medians atom/delete/random {:.5}/{:.5}/{:.5}",
        s.n, s.win_rate, s.win_ci.low, s.win_ci.high, s.strict_chain_rate, s.med_atom.0, s.med_delete.0, s.med_random.0
    );
}

// ---------------------------------------------------------------------------
// C8 — statistics oracles
// ---------------------------------------------------------------------------

#[test]
fn c08_statistics_match_enumeration_oracles() {
    let ci = stats::wilson_ci(4483, 4851, 0.95).unwrap();
    assert!((ci.low - 0.916).abs() <= 0.001 && (ci.high - 0.931).abs() <= 0.001);
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for trial in 0..200 {
        let n1 = rng.gen_range(1..=6);
        let n2 = rng.gen_range(1..=6);
        let x: Vec<f64> = (0..n1).map(|_| rng.gen_range(-4i32..4) as f64).collect();
        let y: Vec<f64> = (0..n2).map(|_| rng.gen_range(-4i32..4) as f64).collect();
        // Cliff's δ against the double loop.
        let mut gt = 0i64;
        let mut lt = 0i64;
        for &a in &x {
            for &b in &y {
                if a > b {
                    gt += 1;
                } else if a < b {
                    lt += 1;
                }
            }
        }
        let brute = (gt - lt) as f64 / (n1 * n2) as f64;
        assert_eq!(stats::cliffs_delta(&x, &y).unwrap(), brute, "trial {trial}");
        // Mann-Whitney against full enumeration.
        let mw = stats::mann_whitney_u(&x, &y).unwrap();
        let (u_o, p_o) = mw_enum(&x, &y);
        assert_eq!(mw.statistic, u_o);
        assert!((mw.p - p_o).abs() <= 1e-12);
        // Wilcoxon on paired data of the same size.
        let n = n1.min(n2).max(1);
        let w = stats::wilcoxon_signed_rank(&x[..n], &y[..n], false).unwrap();
        if !w.degenerate {
            let (w_o, p_w) = wilcoxon_enum(&x[..n], &y[..n]);
            assert_eq!(w.statistic, w_o);
            assert!((w.p - p_w).abs() <= 1e-12);
        }
    }
    eprintln!("[PASS] C8 statistics oracles: Wilson [{:.4},{:.4}], 200 enumerated rank-test instances exact", ci.low, ci.high);
}

fn mw_enum(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n1 = x.len();
    let n = n1 + y.len();
    let mut pooled = x.to_vec();
    pooled.extend_from_slice(y);
    let ranks = stats::midranks(&pooled);
    let u_obs: f64 = ranks[..n1].iter().sum::<f64>() - (n1 * (n1 + 1)) as f64 / 2.0;
    let mut le = 0u64;
    let mut ge = 0u64;
    let mut total = 0u64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let r1: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
        if u <= u_obs + 1e-9 {
            le += 1;
        }
        if u >= u_obs - 1e-9 {
            ge += 1;
        }
        total += 1;
    }
    (u_obs, (2.0 * le.min(ge) as f64 / total as f64).min(1.0))
}

fn wilcoxon_enum(x: &[f64], y: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = stats::midranks(&abs);
    let w_obs: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();
    let n = nz.len();
    let mut le = 0u64;
    let mut ge = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = ranks.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, r)| r).sum();
        if w <= w_obs + 1e-9 {
            le += 1;
        }
        if w >= w_obs - 1e-9 {
            ge += 1;
        }
    }
    (w_obs, (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0))
}

// ---------------------------------------------------------------------------
// C9 — mixture model selection
// ---------------------------------------------------------------------------

#[test]
fn c09_gmm_bic_separates_bimodal_cosines() {
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(909 + seed);
        let gauss = |rng: &mut ChaCha8Rng| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let mut values = Vec::with_capacity(300);
        for _ in 0..150 {
            values.push(0.05 * gauss(&mut rng));
        }
        for _ in 0..150 {
            values.push(0.26 + 0.05 * gauss(&mut rng));
        }
        let f2 = partition::fit_gmm(&values, 2, seed).unwrap();
        let f1 = partition::fit_gmm(&values, 1, seed).unwrap();
        for fit in [&f1, &f2] {
            for w in fit.ll_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "EM log-likelihood decreased");
            }
        }
        if f2.bic - f1.bic < -50.0 {
            hits += 1;
        }
    }
    assert!(hits >= 95, "ΔBIC < -50 in only {hits}/100 seeds");
    eprintln!("[PASS] C9 GMM/BIC: ΔBIC < -50 in {hits}/100 seeds, EM monotone in every run");
}

// ---------------------------------------------------------------------------
// C10 — selectivity sanity
// ---------------------------------------------------------------------------

#[test]
fn c10_selectivity_sanity() {
    let fx = fixture();
    let tokens = &fx.cap_corpus[0];
    let pert = causal::random_rank1(16, 16, 3).unwrap();
    // Zero perturbation → overlap 1 exactly.
    assert_eq!(causal::selectivity(&fx.gdn, tokens, CELL, 8, &pert, 0.0, 10).unwrap(), 1.0);
    // Exact-native-write patch → overlap 1.
    let base = fx.gdn.forward(tokens).unwrap();
    let native = base.cell(CELL).events[8].native_write();
    let p = causal::patched_final_probs(&fx.gdn, tokens, CELL, 8, &native).unwrap();
    assert_eq!(causal::topk_overlap(&base.logits[tokens.len() - 1], &logits_of(&p), 10), 1.0);
    // Matched-norm random and orthogonal controls at small ε.
    let mut overlaps_rand = Vec::new();
    let mut overlaps_orth = Vec::new();
    let mut overlaps_big = Vec::new();
    for (i, &rec) in fx.gdn_ds.val_idx.iter().step_by(29).enumerate().take(40) {
        let w = &fx.gdn_ds.writes[rec];
        let toks = &fx.cap_corpus[w.seq_id as usize];
        let pos = w.position as usize;
        let rnd = causal::random_rank1(16, 16, 7000 + i as u64).unwrap();
        overlaps_rand.push(causal::selectivity(&fx.gdn, toks, CELL, pos, &rnd, 0.1, 10).unwrap());
        let orth = causal::orthogonal_rank1(&w.k, &w.v, 8000 + i as u64).unwrap();
        overlaps_orth.push(causal::selectivity(&fx.gdn, toks, CELL, pos, &orth, 0.1, 10).unwrap());
        overlaps_big.push(causal::selectivity(&fx.gdn, toks, CELL, pos, &rnd, 3.0, 10).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mr, mo, mb) = (mean(&overlaps_rand), mean(&overlaps_orth), mean(&overlaps_big));
    assert!(mr >= 0.9, "random-control mean overlap {mr}");
    assert!(mo >= 0.9, "orthogonal-control mean overlap {mo}");
    eprintln!(
        "[PASS] C10 selectivity: random {mr:.4}, orthogonal {mo:.4} at ε=0.1 (ε=3.0 gives {mb:.4})"
    );
}

fn logits_of(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|p| p.max(1e-300).ln()).collect()
}

// ---------------------------------------------------------------------------
// C11 — steering
// ---------------------------------------------------------------------------

#[test]
fn c11_steering_noops_direction_and_generation_lift() {
    let fx = fixture();
    // Exact no-ops at zero dose.
    let prompt: Vec<Token> = fx.cap_corpus[1][..10].to_vec();
    let base = fx.gdn.generate_greedy(&prompt, 12, None).unwrap();
    let amp = steer::amplify_coefficients(&fx.gdn, &fx.gdn_dict, &[0, 1], 0.0, &prompt, 12, CELL).unwrap();
    assert_eq!(base, amp, "zero-offset amplification must be a no-op");
    // Direction check on the linear host: 100/100 constructed trials.
    let lin = linear_host(77);
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut raised = 0;
    let mut trials = 0;
    while trials < 100 {
        let p: Vec<Token> = (0..8).map(|_| rng.gen_range(0..64)).collect();
        let target: Token = rng.gen_range(0..64);
        let cell = (1usize, rng.gen_range(0..2usize));
        let tr = lin.forward(&p).unwrap();
        let last = p.len() - 1;
        let q = tr.cell(cell).events[last].q.clone();
        let Ok(dir) = steer::steering_direction(&lin, cell, target) else { continue };
        let k_hat = normalized(&q).unwrap();
        let mut add = Mat::outer(&k_hat, &dir.direction);
        add.scale(0.7);
        let mut hook = |ctx: &mut writesae::hosts::EditCtx<'_>| {
            if (ctx.layer, ctx.head) == cell && ctx.position == last {
                ctx.state.add_scaled(&add, 1.0);
            }
        };
        let patched = lin.forward_with(&p, writesae::hosts::TraceMode::Logits, &mut hook).unwrap();
        if patched.logits[last][target as usize] > tr.logits[last][target as usize] {
            raised += 1;
        }
        trials += 1;
    }
    assert_eq!(raised, 100, "aligned writes raised the target logit in {raised}/100 trials");
    // Generation edit over ≥ 100 prompts: best dose strictly exceeds the
    // unedited inclusion rate for mid-band targets (first-step rank 8).
    let prompts = fx.grammar.corpus(120, 24, 99);
    let steer_cell = (1, 0);
    let mut best = (0usize, 0usize, 0.0f64);
    let mut unedited_total = 0usize;
    for &dose in &[1.5, 3.0, 6.0] {
        let mut edited = 0;
        let mut unedited = 0;
        for p in &prompts {
            let probs = fx.gdn.forward(p).unwrap().final_probs();
            let mut idx: Vec<usize> = (0..probs.len()).collect();
            idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let target = idx[7] as Token;
            let out = steer::generation_edit(&fx.gdn, p, target, dose, 3, 20, steer_cell).unwrap();
            if out.included {
                edited += 1;
            }
            if out.included_unedited {
                unedited += 1;
            }
        }
        unedited_total = unedited;
        if edited > best.0 {
            best = (edited, unedited, dose);
        }
    }
    assert!(
        best.0 > unedited_total,
        "best dose {} inclusion {} vs unedited {}",
        best.2,
        best.0,
        unedited_total
    );
    eprintln!(
        "[PASS] C11 steering: no-op exact, linear-host direction 100/100, generation edit {}/{} vs unedited {}/{} at dose {}",
        best.0,
        prompts.len(),
        unedited_total,
        prompts.len(),
        best.2
    );
}

// ---------------------------------------------------------------------------
// C12 — cross-write-rule ordering
// ---------------------------------------------------------------------------

#[test]
fn c12_register_cosine_ordering_across_write_rules() {
    let fx = fixture();
    let mut holds = 0;
    let mut lines = Vec::new();
    let mut gdn_alive_cos: Vec<f64> = Vec::new();
    let mut ssm_alive_cos: Vec<f64> = Vec::new();
    for seed in [0u64, 1, 2] {
        let mut med = [0.0f64; 2];
        for (slot, ds) in [&fx.gdn_ds, &fx.ssm_ds].into_iter().enumerate() {
            let dict = if slot == 0 && seed == 0 {
                fx.gdn_dict.clone()
            } else {
                sae::train_sae(ds, &sae_spec(128, 2), &sae_cfg(seed)).unwrap().0
            };
            let geoms = partition::cosine_to_native(&dict, ds).unwrap();
            let (geoms, _) = partition::classify(&geoms, 0.05);
            med[slot] = partition::register_median_cos(&geoms).unwrap_or(-1.0);
            let alive = geoms
                .iter()
                .filter(|g| g.firings >= partition::ALIVE_THRESHOLD)
                .filter_map(|g| g.median_cos);
            if slot == 0 {
                gdn_alive_cos.extend(alive);
            } else {
                ssm_alive_cos.extend(alive);
            }
        }
        if med[0] > med[1] {
            holds += 1;
        }
        lines.push(format!("seed {seed}: gdn {:.3} vs ssm {:.3}", med[0], med[1]));
    }
    let ks = stats::ks_2samp(&gdn_alive_cos, &ssm_alive_cos).unwrap();
    assert!(holds >= 2, "ordering held in only {holds}/3 seeds ({lines:?})");
    eprintln!(
        "[PASS] C12 write-rule ordering: {holds}/3 seeds ({}), KS D {:.3} p {:.2e}",
        lines.join("; "),
        ks.statistic,
        ks.p
    );
}

// ---------------------------------------------------------------------------
// Extra invariants tied to the trained fixture
// ---------------------------------------------------------------------------

/// The fixed gate-product prediction fits the gated host and misfits the
/// diagonal host (pooled R² ordering).
#[test]
fn extra_analytic_gate_r2_negative_control() {
    let fx = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let eval = fx.grammar.corpus(8, 24, 55);
    let mut pooled = Vec::new();
    // Pool ε·G^α·⟨kf,q⟩·⟨of,u_tok⟩ against measured logit changes at the
    // final-layer cell and fit a single global slope per host; the gated
    // delta rule should be explained by the scalar gate product, the
    // diagonal host should not.
    let cell = (1, 0);
    for model in [&fx.gdn, &fx.ssm] {
        let d_k = model.config.d_k;
        let cols = model.config.state_cols();
        let mut points = Vec::new();
        for seq in &eval {
            let base = model.forward(seq).unwrap();
            let last = seq.len() - 1;
            let t0 = last - 5;
            for _ in 0..6 {
                let kf = unit_vec(d_k, &mut rng);
                let of = unit_vec(cols, &mut rng);
                let eps = 0.2;
                let g_alpha: f64 = base.cell(cell).events[t0 + 1..=last].iter().map(|e| e.alpha).product();
                let q = &base.cell(cell).events[last].q;
                let spec = predictor::PerturbationSpec {
                    cell,
                    position: t0,
                    eps,
                    key_factor: kf.clone(),
                    out_factor: of.clone(),
                };
                let patched = predictor::forward_with_injection(model, seq, &spec).unwrap();
                for tok in [1u32, 9, 20, 40] {
                    let u_tok = model.unembed_direction(cell, tok);
                    let x = eps * g_alpha * dot(&kf, q) * dot(&of, &u_tok);
                    let y = patched.logits[last][tok as usize] - base.logits[last][tok as usize];
                    points.push((x, y));
                }
            }
        }
        let fit = predictor::fit_g(&points, 1.0).unwrap();
        pooled.push(fit.r2);
    }
    assert!(
        pooled[1] < pooled[0],
        "diagonal-host analytic-form R² {} should undercut the gated host's {}",
        pooled[1],
        pooled[0]
    );
    eprintln!("[PASS] extra: gate-product form R² gated {:.3} > diagonal {:.3}", pooled[0], pooled[1]);
}

/// Amplified-substitution control: at native Frobenius norm a
/// near-orthogonal atom loses to deletion on most firings while a
/// high-cosine atom does not.
#[test]
fn extra_amplified_substitution_inverts_for_orthogonal_atoms() {
    let fx = fixture();
    let firings = causal::find_firings(&fx.gdn_ds, &fx.gdn_dict, 4).unwrap();
    let by_key: std::collections::BTreeMap<(u64, u32), usize> = fx
        .gdn_ds
        .writes
        .iter()
        .enumerate()
        .map(|(i, w)| ((w.seq_id, w.position), i))
        .collect();
    let mut orth_loses = 0usize;
    let mut hicos_wins = 0usize;
    let mut n = 0usize;
    for (i, f) in firings.iter().take(60).enumerate() {
        let rec = by_key[&(f.seq_id, f.position)];
        let w = &fx.gdn_ds.writes[rec];
        let native = w.native_write();
        let tokens = &fx.cap_corpus[f.seq_id as usize];
        let base = fx.gdn.forward(tokens).unwrap();
        let p_base = base.final_probs();
        let kl_del = kl_div(
            &causal::patched_final_probs(&fx.gdn, tokens, CELL, f.position as usize, &Mat::zeros(16, 16))
                .unwrap(),
            &p_base,
        );
        // Near-orthogonal atom at the native norm.
        let mut orth = causal::orthogonal_rank1(&w.k, &w.v, 9000 + i as u64).unwrap();
        orth.scale(native.frob_norm());
        let kl_orth = kl_div(
            &causal::patched_final_probs(&fx.gdn, tokens, CELL, f.position as usize, &orth).unwrap(),
            &p_base,
        );
        // High-cosine atom at the same norm (the write's own direction).
        let mut hic = native.clone();
        let nn = hic.frob_norm();
        if nn < 1e-12 {
            continue;
        }
        hic.scale(native.frob_norm() / nn);
        let kl_hic = kl_div(
            &causal::patched_final_probs(&fx.gdn, tokens, CELL, f.position as usize, &hic).unwrap(),
            &p_base,
        );
        if kl_orth >= kl_del {
            orth_loses += 1;
        }
        if kl_hic < kl_del {
            hicos_wins += 1;
        }
        n += 1;
    }
    assert!(orth_loses * 2 > n, "orthogonal atom lost on only {orth_loses}/{n}");
    assert!(hicos_wins * 2 > n, "high-cos atom won on only {hicos_wins}/{n}");
    eprintln!(
        "[PASS] extra: amplified substitution — orthogonal loses {orth_loses}/{n}, aligned wins {hicos_wins}/{n}"
    );
}

/// Reconstruction under larger k on real host captures.
#[test]
fn extra_reconstruction_monotone_in_k_on_host_captures() {
    let fx = fixture();
    let m2 = sae::eval_mse_with_k(&fx.gdn_dict, &fx.gdn_ds, &fx.gdn_ds.val_idx, 2).unwrap();
    let m4 = sae::eval_mse_with_k(&fx.gdn_dict, &fx.gdn_ds, &fx.gdn_ds.val_idx, 4).unwrap();
    let m8 = sae::eval_mse_with_k(&fx.gdn_dict, &fx.gdn_ds, &fx.gdn_ds.val_idx, 8).unwrap();
    // Monotone near the trained budget; far beyond it the encoder's unused
    // tail coefficients are uncalibrated and the property degrades (reported,
    // not asserted).
    assert!(m4 <= m2 + 1e-12, "k=4 {m4} vs k=2 {m2}");
    eprintln!(
        "[PASS] extra: val MSE at k=2/4/8: {m2:.2e} ≥ {m4:.2e} (monotone near budget); k=8 gives {m8:.2e}"
    );
}

/// Erasing the binding write of a recall query drops the bound value's
/// probability (the planted-grammar gating construction).
#[test]
fn extra_erasure_gates_recall_answers() {
    let fx = fixture();
    // Query-terminated prompts: … key value … MARK key → the next token must
    // be the most recently bound value. The association is carried by the
    // slow head's write at the latest value position; deleting that single
    // write should gate the answer.
    let seqs = fx.grammar.corpus(200, 40, 500);
    let mut cases: Vec<(Vec<Token>, usize, Token)> = Vec::new();
    for seq in &seqs {
        for t in (3..seq.len()).rev() {
            if seq[t - 1] == writesae::corpus::MARK {
                let key = seq[t];
                for a in (1..t - 1).rev() {
                    if seq[a] == key && a + 1 < t {
                        cases.push((seq[..=t].to_vec(), a + 1, seq[a + 1]));
                        break;
                    }
                }
                break;
            }
        }
    }
    assert!(cases.len() >= 40, "need query prompts, got {}", cases.len());
    let slow_cell = (0, 0);
    let mut dlogp = Vec::new();
    for (p, pos, value) in cases.iter().take(40) {
        let base = fx.gdn.forward(p).unwrap().final_probs();
        let del =
            causal::patched_final_probs(&fx.gdn, p, slow_cell, *pos, &Mat::zeros(16, 16)).unwrap();
        dlogp.push(del[*value as usize].max(1e-300).ln() - base[*value as usize].max(1e-300).ln());
    }
    let med = stats::median(&dlogp);
    let p = stats::wilcoxon_signed_rank(&dlogp, &vec![0.0; dlogp.len()], false).unwrap().p;
    assert!(med < 0.0, "gating erasure should drop the answer log-prob, median {med}");
    assert!(p < 0.01, "gating erasure p {p}");
    eprintln!("[PASS] extra: binding erasure median Δlogp {med:.3} (p {p:.2e}) over 40 queries");
}

/// Boundary-feature amplification shifts the marker rate away from baseline
/// more than the dose-matched random control.
#[test]
fn extra_amplification_shifts_marker_rate() {
    let fx = fixture();
    let score_corpus = fx.grammar.corpus(100, 64, 300);
    let mut score_ds = capture_states(&fx.gdn, &score_corpus, CELL).unwrap();
    score_ds.center().unwrap();
    let prompts = fx.grammar.corpus(40, 20, 123);
    let rep = steer::amplify_experiment(
        &fx.gdn,
        &fx.gdn_dict,
        &score_ds,
        &score_corpus,
        &prompts,
        &[2.0, 5.0, 10.0],
        4,
        writesae::corpus::MARK,
        CELL,
        30,
        17,
    )
    .unwrap();
    let base = rep.marker_rate_baseline;
    let best = rep
        .doses
        .iter()
        .max_by(|a, b| {
            (a.marker_rate_amplified - base)
                .abs()
                .partial_cmp(&(b.marker_rate_amplified - base).abs())
                .unwrap()
        })
        .unwrap();
    assert!(
        (best.marker_rate_amplified - base).abs() > (best.marker_rate_control - base).abs(),
        "amplified shift {:.4} vs control shift {:.4} at dose {}",
        (best.marker_rate_amplified - base).abs(),
        (best.marker_rate_control - base).abs(),
        best.dose
    );
    eprintln!(
        "[PASS] extra: amplification at dose {} moves marker rate {:.3}→{:.3} (control {:.3})",
        best.dose, base, best.marker_rate_amplified, best.marker_rate_control
    );
}
