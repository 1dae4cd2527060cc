//! Stage-sequential pipeline: train host → capture → train dictionary →
//! partition → replacement suite → prediction audit → steering probes →
//! report. Artifacts land in the config's output directory; the manifest
//! records checksums of everything written.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use writesae::capture::{capture_states, write_capture_file, CaptureDataset};
use writesae::causal::{self, ScaleMode as CausalScale};
use writesae::corpus::{RecallGrammar, MARK};
use writesae::hosts::{train_toy_host_with, HostModel, Token};
use writesae::mat::cosine;
use writesae::partition::{self, AtomGeometry};
use writesae::predictor;
use writesae::sae::{self, write_dictionary_file, Dictionary, SaeSpec};
use writesae::steer;
use writesae::{subseed, Cell};

use crate::config::{ExperimentConfig, ScaleMode};
use crate::report;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Convenience bundle the stages thread through the run.
pub struct PipelineCtx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl PipelineCtx {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let out = PathBuf::from(&cfg.out_dir);
        std::fs::create_dir_all(out.join("plots"))?;
        Ok(PipelineCtx { cfg, out })
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.out.join(name);
        let mut f = std::fs::File::create(&path)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut f = std::fs::File::create(self.out.join(name))?;
        for row in rows {
            serde_json::to_writer(&mut f, row)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn grammar(&self) -> RecallGrammar {
        RecallGrammar::new(self.cfg.corpus.seed)
    }

    pub fn train_corpus(&self) -> Vec<Vec<Token>> {
        self.grammar().corpus(self.cfg.corpus.n_train, self.cfg.corpus.train_len, subseed(self.cfg.corpus.seed, 0xc0, 1))
    }

    pub fn capture_corpus(&self) -> Vec<Vec<Token>> {
        self.grammar().corpus(self.cfg.corpus.n_capture, self.cfg.corpus.capture_len, subseed(self.cfg.corpus.seed, 0xc0, 2))
    }

    /// Marker-rich held-out corpus for amplification feature scoring.
    pub fn scoring_corpus(&self) -> Vec<Vec<Token>> {
        self.grammar().corpus(100, self.cfg.corpus.train_len.max(48), subseed(self.cfg.corpus.seed, 0xc0, 3))
    }

    pub fn steering_prompts(&self, n: usize, len: usize) -> Vec<Vec<Token>> {
        self.grammar().corpus(n, len, subseed(self.cfg.corpus.seed, 0xc0, 4))
    }

    /// Final-layer cell driven directly into the logits; the steering site.
    pub fn steer_cell(&self) -> Cell {
        (self.cfg.host.n_layers - 1, 0)
    }
}

/// The stage plan in execution order.
pub const STAGES: [&str; 8] =
    ["train-host", "capture", "train-sae", "partition", "replace", "predict", "steer", "report"];

/// Run every stage; returns the manifest.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let ctx = PipelineCtx::new(cfg.clone())?;
    // Presence of the marker means a partial run.
    let marker = ctx.out.join("RUN.partial");
    std::fs::write(&marker, b"pipeline in progress\n")?;
    ctx.write_json("config.json", cfg)?;
    let model = stage_train_host(&ctx).map_err(CliError::in_stage("train-host"))?;
    let ds = stage_capture(&ctx, &model).map_err(CliError::in_stage("capture"))?;
    let dict = stage_train_sae(&ctx, &ds).map_err(CliError::in_stage("train-sae"))?;
    let geoms = stage_partition(&ctx, &ds, &dict).map_err(CliError::in_stage("partition"))?;
    stage_replace(&ctx, &model, &ds, &dict, &geoms).map_err(CliError::in_stage("replace"))?;
    stage_predict(&ctx, &model).map_err(CliError::in_stage("predict"))?;
    stage_steer(&ctx, &model, &ds, &dict, &geoms).map_err(CliError::in_stage("steer"))?;
    report::emit_plots(&ctx.out).map_err(CliError::in_stage("report"))?;
    let audit = report::audit(&ctx.out).map_err(CliError::in_stage("report"))?;
    ctx.write_json("audit.json", &audit)?;
    if !audit.iter().all(|c| c.ok) {
        return Err(CliError::Stage {
            stage: "report",
            source: Box::new(CliError::Numeric("audit found non-recomputable summary values".into())),
        });
    }
    std::fs::remove_file(&marker)?;
    let manifest = build_manifest(&ctx)?;
    ctx.write_json("manifest.json", &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub fn stage_train_host(ctx: &PipelineCtx) -> Result<HostModel> {
    let corpus = ctx.train_corpus();
    let (model, metrics) =
        train_toy_host_with(ctx.cfg.host.clone(), &corpus, ctx.cfg.host_train.budget, &ctx.cfg.host_train.opt)?;
    ctx.write_json("host_metrics.json", &metrics)?;
    ctx.write_json("host.json", &model)?;
    Ok(model)
}

pub fn load_host(out: &Path) -> Result<HostModel> {
    let text = std::fs::read_to_string(out.join("host.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellChoice {
    pub swept: Vec<(usize, usize, f64)>,
    pub chosen: Cell,
}

pub fn stage_capture(ctx: &PipelineCtx, model: &HostModel) -> Result<CaptureDataset> {
    let corpus = ctx.capture_corpus();
    let cell = match ctx.cfg.capture_cell {
        Some(c) => {
            ctx.write_json("cell_choice.json", &CellChoice { swept: Vec::new(), chosen: c })?;
            c
        }
        None => sweep_cells(ctx, model, &corpus)?,
    };
    let mut ds = capture_states(model, &corpus, cell)?;
    ds.center()?;
    write_capture_file(&ds, &ctx.out.join("capture.wsae"))?;
    Ok(ds)
}

/// Choose the capture cell by median dominant-firing cosine to the native
/// write, measured with a short preview dictionary per cell. Geometry only:
/// the selection never sees replacement outcomes.
fn sweep_cells(ctx: &PipelineCtx, model: &HostModel, corpus: &[Vec<Token>]) -> Result<Cell> {
    let mut swept = Vec::new();
    let mut best: Option<(Cell, f64)> = None;
    for layer in 0..ctx.cfg.host.n_layers {
        for head in 0..ctx.cfg.host.n_heads {
            let cell = (layer, head);
            let mut ds = capture_states(model, corpus, cell)?;
            ds.center()?;
            let spec = SaeSpec {
                n_f: ctx.cfg.sae.n_f,
                decoder: ctx.cfg.sae.decoder,
                encoder: ctx.cfg.sae.encoder,
                sparsity: ctx.cfg.sae.sparsity.clone(),
            };
            let mut quick = ctx.cfg.sae.train.clone();
            quick.epochs = (quick.epochs / 3).max(6);
            let (dict, _) = sae::train_sae(&ds, &spec, &quick)?;
            let med = median_dominant_firing_cos(&ds, &dict)?;
            swept.push((layer, head, med));
            if best.map_or(true, |(_, b)| med > b) {
                best = Some((cell, med));
            }
        }
    }
    let chosen = best.expect("at least one cell").0;
    ctx.write_json("cell_choice.json", &CellChoice { swept, chosen })?;
    Ok(chosen)
}

fn median_dominant_firing_cos(ds: &CaptureDataset, dict: &Dictionary) -> Result<f64> {
    let firings = causal::find_firings(ds, dict, usize::MAX)?;
    if firings.is_empty() {
        return Ok(-1.0);
    }
    let by_key: std::collections::BTreeMap<(u64, u32), usize> = ds
        .writes
        .iter()
        .enumerate()
        .map(|(i, w)| ((w.seq_id, w.position), i))
        .collect();
    let cosines: Vec<f64> = firings
        .iter()
        .filter_map(|f| {
            let rec = *by_key.get(&(f.seq_id, f.position))?;
            let atom = dict.atom_vec(f.feature);
            Some(cosine(&atom, &ds.writes[rec].native_write().data))
        })
        .collect();
    Ok(writesae::stats::median(&cosines))
}

pub fn stage_train_sae(ctx: &PipelineCtx, ds: &CaptureDataset) -> Result<Dictionary> {
    let spec = SaeSpec {
        n_f: ctx.cfg.sae.n_f,
        decoder: ctx.cfg.sae.decoder,
        encoder: ctx.cfg.sae.encoder,
        sparsity: ctx.cfg.sae.sparsity.clone(),
    };
    let (dict, metrics) = sae::train_sae(ds, &spec, &ctx.cfg.sae.train)?;
    ctx.write_json("sae_metrics.json", &metrics)?;
    write_dictionary_file(&dict, &ctx.out.join("dict.wsdc"))?;
    // Encoder-swap ordering, reported only: flat ≤ rank1-dense ≤ bilinear
    // validation MSE is the expected shape at matched budget.
    let mut quick = ctx.cfg.sae.train.clone();
    quick.epochs = (quick.epochs / 2).max(8);
    let mut swap = Vec::new();
    for (name, dec, enc) in [
        ("flat", sae::DecoderKind::FlatDense, sae::EncoderKind::DenseLinear),
        ("rank1_dense", sae::DecoderKind::Rank1, sae::EncoderKind::DenseLinear),
        ("bilinear", sae::DecoderKind::Rank1, sae::EncoderKind::Bilinear),
    ] {
        let s = SaeSpec { n_f: ctx.cfg.sae.n_f, decoder: dec, encoder: enc, sparsity: ctx.cfg.sae.sparsity.clone() };
        let (_, m) = sae::train_sae(ds, &s, &quick)?;
        swap.push(serde_json::json!({ "variant": name, "val_mse": m.final_val_mse, "dead": m.dead_count }));
    }
    ctx.write_json("encoder_swap.json", &swap)?;
    Ok(dict)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub tau: f64,
    pub counts: partition::ClassCounts,
    pub register_median_cos: Option<f64>,
    pub delta_bic_2_vs_1: Option<f64>,
    pub bimodality: Option<f64>,
    pub tau_sweep: Vec<(f64, partition::ClassCounts)>,
}

pub fn stage_partition(
    ctx: &PipelineCtx,
    ds: &CaptureDataset,
    dict: &Dictionary,
) -> Result<Vec<AtomGeometry>> {
    let geoms = partition::cosine_to_native(dict, ds)?;
    let (geoms, counts) = partition::classify(&geoms, ctx.cfg.partition.tau);
    ctx.write_jsonl("partition.jsonl", &geoms)?;
    let alive: Vec<f64> = geoms
        .iter()
        .filter(|g| g.firings >= partition::ALIVE_THRESHOLD)
        .filter_map(|g| g.median_cos)
        .collect();
    let delta_bic = if alive.len() >= 6 {
        partition::delta_bic(&alive, 2, 1, subseed(ctx.cfg.seed, 0x6b, 0)).ok()
    } else {
        None
    };
    let tau_sweep = [0.02, 0.03, 0.05, 0.10]
        .iter()
        .map(|&tau| (tau, partition::classify(&geoms, tau).1))
        .collect();
    let summary = PartitionSummary {
        tau: ctx.cfg.partition.tau,
        counts,
        register_median_cos: partition::register_median_cos(&geoms),
        delta_bic_2_vs_1: delta_bic,
        bimodality: partition::bimodality_coefficient(&alive),
        tau_sweep,
    };
    ctx.write_json("partition_summary.json", &summary)?;
    Ok(geoms)
}

pub fn stage_replace(
    ctx: &PipelineCtx,
    model: &HostModel,
    ds: &CaptureDataset,
    dict: &Dictionary,
    geoms: &[AtomGeometry],
) -> Result<()> {
    let corpus = ctx.capture_corpus();
    let firings = causal::find_firings(ds, dict, ctx.cfg.replace.cap_per_feature)?;
    let take: Vec<_> = firings.into_iter().take(ctx.cfg.replace.max_firings).collect();
    let scale = match ctx.cfg.replace.scale {
        ScaleMode::Coefficient => CausalScale::Coefficient,
        ScaleMode::MatchedNorm => CausalScale::MatchedNorm,
    };
    let report = causal::run_replacement_suite(
        model,
        &corpus,
        dict,
        &take,
        Some(geoms),
        scale,
        subseed(ctx.cfg.seed, 0x4e, 0),
    )?;
    ctx.write_jsonl("replacement.jsonl", &report.triples)?;
    ctx.write_json("replacement_summary.json", &report.summary)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictRow {
    pub feature: usize,
    pub seq: usize,
    pub g: f64,
    pub gate_product: f64,
    pub r2: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictSummary {
    pub n_fits: usize,
    pub median_r2: f64,
    pub p25_r2: f64,
    pub p75_r2: f64,
}

pub fn stage_predict(ctx: &PipelineCtx, model: &HostModel) -> Result<()> {
    let pc = &ctx.cfg.predict;
    let grammar = ctx.grammar();
    let seqs = grammar.corpus(pc.n_seqs, 32, subseed(ctx.cfg.corpus.seed, 0xc0, 5));
    let cell = ctx.steer_cell();
    let mut rows = Vec::new();
    for f in 0..pc.n_features {
        let kf = causal::random_rank1(ctx.cfg.host.d_k, 1, subseed(ctx.cfg.seed, 0xf0, f as u64))?.data;
        let of = causal::random_rank1(model.config.state_cols(), 1, subseed(ctx.cfg.seed, 0xf1, f as u64))?.data;
        for (si, seq) in seqs.iter().enumerate() {
            let pos = seq.len().saturating_sub(pc.horizon + 1);
            let fit = predictor::fit_feature_sequence(
                model,
                seq,
                cell,
                pos,
                &kf,
                &of,
                &pc.eps,
                subseed(ctx.cfg.seed, 0xf2, (f * 1000 + si) as u64),
            )?;
            if !fit.degenerate {
                rows.push(PredictRow {
                    feature: f,
                    seq: si,
                    g: fit.g,
                    gate_product: fit.gate_product,
                    r2: fit.r2,
                    n_points: fit.n_points,
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Numeric("all prediction fits degenerate".into()));
    }
    // CSV of fits.
    let mut csv = String::from("feature,seq,g,gate_product,r2,n_points\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{},{}\n", r.feature, r.seq, r.g, r.gate_product, r.r2, r.n_points));
    }
    std::fs::write(ctx.out.join("predict.csv"), csv)?;
    let mut r2s: Vec<f64> = rows.iter().map(|r| r.r2).collect();
    r2s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| r2s[((r2s.len() - 1) as f64 * p).round() as usize];
    let summary = PredictSummary { n_fits: rows.len(), median_r2: q(0.5), p25_r2: q(0.25), p75_r2: q(0.75) };
    ctx.write_json("predict_summary.json", &summary)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateDoseSummary {
    pub dose: f64,
    pub n: usize,
    pub included_edited: usize,
    pub included_unedited: usize,
    pub median_dlogp_first: f64,
    pub mean_dlogp_first: f64,
    pub rank_improved: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteerSummary {
    pub steer_cell: Cell,
    pub erase: Option<steer::EraseReport>,
    pub erase_feature: Option<usize>,
    pub install: Option<steer::DoseReport>,
    pub sign_agreement: f64,
    pub sign_ci: writesae::stats::Ci,
    pub sign_pearson_r: f64,
    pub sign_median_ratio: f64,
    pub generate: Vec<GenerateDoseSummary>,
    pub amplify: steer::AmplifyReport,
}

pub fn stage_steer(
    ctx: &PipelineCtx,
    model: &HostModel,
    ds: &CaptureDataset,
    dict: &Dictionary,
    geoms: &[AtomGeometry],
) -> Result<()> {
    let sc = &ctx.cfg.steer;
    let corpus = ctx.capture_corpus();
    let cap_cell = ds.cell;
    let steer_cell = ctx.steer_cell();

    // Erasure + installs on the busiest register atom (falling back to the
    // busiest alive atom).
    let mut candidates: Vec<&AtomGeometry> = geoms
        .iter()
        .filter(|g| g.class == partition::AtomClass::Register && g.firings >= 10)
        .collect();
    if candidates.is_empty() {
        candidates = geoms.iter().filter(|g| g.firings >= 10).collect();
    }
    candidates.sort_by(|a, b| b.firings.cmp(&a.firings).then(a.id.cmp(&b.id)));
    let (erase, install, erase_feature) = if let Some(g) = candidates.first() {
        let feature = g.id;
        let mut firings = steer::feature_firings(ds, dict, feature)?;
        firings.truncate(60);
        let pref = steer::preferred_token(model, &corpus, &firings, cap_cell)?;
        let erase = steer::erase_at_firings(
            model,
            &corpus,
            &firings,
            pref.token,
            cap_cell,
            subseed(ctx.cfg.seed, 0x57, 0),
        )?;
        let install = steer::install_at_nonfiring(
            model,
            &corpus,
            ds,
            dict,
            feature,
            pref.token,
            &sc.install_magnitudes,
            40,
            subseed(ctx.cfg.seed, 0x57, 1),
        )
        .ok();
        (Some(erase), install, Some(feature))
    } else {
        (None, None, None)
    };

    // Single-position sign test at the steering cell.
    let targets: Vec<Token> = (0..model.config.vocab_size as Token).step_by(4).collect();
    let sign = steer::sign_test(model, &corpus, steer_cell, &targets, sc.sign_trials, subseed(ctx.cfg.seed, 0x57, 2))?;
    ctx.write_jsonl("steer_sign.jsonl", &sign.trials)?;

    // Generation edits: targets initially ranked in the middle band
    // (rank 8 of the first-step distribution), dose sweep.
    let prompts = ctx.steering_prompts(sc.gen_prompts, 24);
    let mut gen_rows: Vec<steer::GenEditOutcome> = Vec::new();
    let mut gen_summaries = Vec::new();
    for &dose in &sc.gen_doses {
        let mut per_dose = Vec::new();
        for p in &prompts {
            let probs = model.forward(p)?.final_probs();
            let mut idx: Vec<usize> = (0..probs.len()).collect();
            idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let target = idx[7] as Token;
            let out = steer::generation_edit(model, p, target, dose, sc.gen_positions, sc.horizon, steer_cell)?;
            per_dose.push(out);
        }
        let dlogps: Vec<f64> = per_dose.iter().map(|o| o.dlogp_first).collect();
        gen_summaries.push(GenerateDoseSummary {
            dose,
            n: per_dose.len(),
            included_edited: per_dose.iter().filter(|o| o.included).count(),
            included_unedited: per_dose.iter().filter(|o| o.included_unedited).count(),
            median_dlogp_first: writesae::stats::median(&dlogps),
            mean_dlogp_first: dlogps.iter().sum::<f64>() / dlogps.len().max(1) as f64,
            rank_improved: per_dose.iter().filter(|o| o.rank_edited < o.rank_unedited).count(),
        });
        gen_rows.extend(per_dose);
    }
    ctx.write_jsonl("steer_generate.jsonl", &gen_rows)?;

    // Coefficient amplification with held-out scoring capture.
    let score_corpus = ctx.scoring_corpus();
    let mut score_ds = capture_states(model, &score_corpus, cap_cell)?;
    score_ds.center()?;
    let amp_prompts = ctx.steering_prompts(sc.amplify_prompts, 20);
    let amplify = steer::amplify_experiment(
        model,
        dict,
        &score_ds,
        &score_corpus,
        &amp_prompts,
        &sc.amplify_doses,
        sc.amplify_top,
        MARK,
        cap_cell,
        30,
        subseed(ctx.cfg.seed, 0x57, 3),
    )?;

    let summary = SteerSummary {
        steer_cell,
        erase,
        erase_feature,
        install,
        sign_agreement: sign.agreement,
        sign_ci: sign.agreement_ci,
        sign_pearson_r: sign.pearson_r,
        sign_median_ratio: sign.median_ratio,
        generate: gen_summaries,
        amplify,
    };
    ctx.write_json("steer_summary.json", &summary)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_vec(cfg)?;
    Ok(hex_digest(&canonical))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn build_manifest(ctx: &PipelineCtx) -> Result<Manifest> {
    let mut artifacts = Vec::new();
    let mut stack = vec![ctx.out.clone()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "manifest.json") {
                let bytes = std::fs::read(&path)?;
                artifacts.push(ArtifactEntry {
                    path: path.strip_prefix(&ctx.out).unwrap().display().to_string(),
                    sha256: hex_digest(&bytes),
                    bytes: bytes.len() as u64,
                });
            }
        }
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest { config_hash: config_hash(&ctx.cfg)?, seed: ctx.cfg.seed, artifacts })
}
