//! Plot-data emission (CSV plus minimal static SVG) and the audit that
//! recomputes every headline summary number from the per-record JSONL.

use std::path::Path;

use serde::{Deserialize, Serialize};
use writesae::causal::{summarize_triples, KlTriple};
use writesae::partition::{classify, AtomGeometry};
use writesae::subseed;

use crate::config::ExperimentConfig;
use crate::pipeline::{GenerateDoseSummary, PartitionSummary, SteerSummary};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditCheck {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(CliError::from))
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Recompute summary values from per-record artifacts and compare.
pub fn audit(out: &Path) -> Result<Vec<AuditCheck>> {
    let cfg: ExperimentConfig = read_json(&out.join("config.json"))?;
    let mut checks = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));

    // Replacement summary from the triple records.
    let triples: Vec<KlTriple> = read_jsonl(&out.join("replacement.jsonl"))?;
    let geoms: Vec<AtomGeometry> = read_jsonl(&out.join("partition.jsonl"))?;
    let stored: writesae::causal::ReplacementSummary = read_json(&out.join("replacement_summary.json"))?;
    let recomputed = summarize_triples(&triples, Some(&geoms), subseed(cfg.seed, 0x4e, 0))
        .map_err(CliError::from)?;
    for (name, a, b) in [
        ("replacement.win_rate", stored.win_rate, recomputed.win_rate),
        ("replacement.strict_chain_rate", stored.strict_chain_rate, recomputed.strict_chain_rate),
        ("replacement.win_ci.low", stored.win_ci.low, recomputed.win_ci.low),
        ("replacement.med_atom", stored.med_atom.0, recomputed.med_atom.0),
        ("replacement.med_delete", stored.med_delete.0, recomputed.med_delete.0),
        ("replacement.med_random", stored.med_random.0, recomputed.med_random.0),
        ("replacement.cliffs_delta", stored.cliffs_delta_atom_delete, recomputed.cliffs_delta_atom_delete),
    ] {
        checks.push(AuditCheck {
            name: name.into(),
            ok: close(a, b),
            detail: format!("stored {a} recomputed {b}"),
        });
    }

    // Partition counts from the per-atom records.
    let psum: PartitionSummary = read_json(&out.join("partition_summary.json"))?;
    let (_, counts) = classify(&geoms, psum.tau);
    checks.push(AuditCheck {
        name: "partition.counts".into(),
        ok: counts == psum.counts,
        detail: format!("stored {:?} recomputed {:?}", psum.counts, counts),
    });

    // Generation-edit inclusion counts from the per-trial records.
    let gen_rows: Vec<writesae::steer::GenEditOutcome> = read_jsonl(&out.join("steer_generate.jsonl"))?;
    let ssum: SteerSummary = read_json(&out.join("steer_summary.json"))?;
    for ds in &ssum.generate {
        let rows: Vec<_> = gen_rows.iter().filter(|r| r.magnitude == ds.dose).collect();
        let edited = rows.iter().filter(|r| r.included).count();
        let unedited = rows.iter().filter(|r| r.included_unedited).count();
        let recomputed = GenerateDoseSummary {
            dose: ds.dose,
            n: rows.len(),
            included_edited: edited,
            included_unedited: unedited,
            median_dlogp_first: 0.0,
            mean_dlogp_first: 0.0,
            rank_improved: 0,
        };
        checks.push(AuditCheck {
            name: format!("steer.generate[{}]", ds.dose),
            ok: recomputed.n == ds.n
                && recomputed.included_edited == ds.included_edited
                && recomputed.included_unedited == ds.included_unedited,
            detail: format!(
                "stored {}/{} of {}, recomputed {}/{} of {}",
                ds.included_edited, ds.included_unedited, ds.n, edited, unedited, rows.len()
            ),
        });
    }
    Ok(checks)
}

// ---------------------------------------------------------------------------
// Plot data + minimal SVG
// ---------------------------------------------------------------------------

pub fn emit_plots(out: &Path) -> Result<()> {
    let plots = out.join("plots");
    std::fs::create_dir_all(&plots)?;

    // KL scatter.
    let triples: Vec<KlTriple> = read_jsonl(&out.join("replacement.jsonl"))?;
    let mut csv = String::from("kl_atom,kl_delete,kl_random\n");
    for t in &triples {
        csv.push_str(&format!("{},{},{}\n", t.kl_atom, t.kl_delete, t.kl_random));
    }
    std::fs::write(plots.join("kl_scatter.csv"), &csv)?;
    let pts_delete: Vec<(f64, f64)> = triples.iter().map(|t| (t.kl_atom, t.kl_delete)).collect();
    let pts_random: Vec<(f64, f64)> = triples.iter().map(|t| (t.kl_atom, t.kl_random)).collect();
    std::fs::write(
        plots.join("kl_scatter.svg"),
        log_scatter_svg(
            &[(&pts_delete, "#d62728"), (&pts_random, "#2ca02c")],
            "KL(atom) vs controls (log-log)",
        ),
    )?;

    // Cosine histogram over alive atoms.
    let geoms: Vec<AtomGeometry> = read_jsonl(&out.join("partition.jsonl"))?;
    let cosines: Vec<f64> = geoms
        .iter()
        .filter(|g| g.firings >= writesae::partition::ALIVE_THRESHOLD)
        .filter_map(|g| g.median_cos)
        .collect();
    let mut csv = String::from("median_cos\n");
    for c in &cosines {
        csv.push_str(&format!("{c}\n"));
    }
    std::fs::write(plots.join("cosine_hist.csv"), &csv)?;
    std::fs::write(
        plots.join("cosine_hist.svg"),
        histogram_svg(&cosines, 24, "median cosine to native write (alive atoms)"),
    )?;

    // Dose curve from the generation-edit summaries.
    let ssum: SteerSummary = read_json(&out.join("steer_summary.json"))?;
    let mut csv = String::from("dose,included_edited,included_unedited,n\n");
    let mut pts = Vec::new();
    for d in &ssum.generate {
        csv.push_str(&format!("{},{},{},{}\n", d.dose, d.included_edited, d.included_unedited, d.n));
        pts.push((d.dose, d.included_edited as f64 / d.n.max(1) as f64));
    }
    std::fs::write(plots.join("dose_curve.csv"), &csv)?;
    std::fs::write(plots.join("dose_curve.svg"), line_svg(&pts, "target inclusion vs dose"))?;
    Ok(())
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">{title}</text>\n",
        W / 2.0
    )
}

fn log_scatter_svg(series: &[(&Vec<(f64, f64)>, &str)], title: &str) -> String {
    let floor = 1e-12f64;
    let all: Vec<f64> = series
        .iter()
        .flat_map(|(pts, _)| pts.iter().flat_map(|(x, y)| [x.max(floor), y.max(floor)]))
        .collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min).log10().floor();
    let hi = all.iter().cloned().fold(floor, f64::max).log10().ceil();
    let span = (hi - lo).max(1.0);
    let sx = |v: f64| PAD + (v.max(floor).log10() - lo) / span * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v.max(floor).log10() - lo) / span * (H - 2.0 * PAD);
    let mut svg = svg_header(title);
    // y = x reference line.
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n",
        sx(10f64.powf(lo)),
        sy(10f64.powf(lo)),
        sx(10f64.powf(hi)),
        sy(10f64.powf(hi))
    ));
    for (pts, color) in series {
        for (x, y) in pts.iter() {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"1.6\" fill=\"{color}\" fill-opacity=\"0.5\"/>\n",
                sx(*x),
                sy(*y)
            ));
        }
    }
    svg.push_str(&axis_box());
    svg.push_str("</svg>\n");
    svg
}

fn histogram_svg(values: &[f64], bins: usize, title: &str) -> String {
    let mut svg = svg_header(title);
    if !values.is_empty() {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.05);
        let width = (hi - lo).max(1e-9);
        let mut counts = vec![0usize; bins];
        for v in values {
            let b = (((v - lo) / width) * bins as f64).floor() as usize;
            counts[b.min(bins - 1)] += 1;
        }
        let peak = *counts.iter().max().unwrap() as f64;
        let bw = (W - 2.0 * PAD) / bins as f64;
        for (i, c) in counts.iter().enumerate() {
            let h = (*c as f64 / peak) * (H - 2.0 * PAD);
            svg.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#1f77b4\"/>\n",
                PAD + i as f64 * bw,
                H - PAD - h,
                bw.max(1.0) - 0.5,
                h
            ));
        }
    }
    svg.push_str(&axis_box());
    svg.push_str("</svg>\n");
    svg
}

fn line_svg(pts: &[(f64, f64)], title: &str) -> String {
    let mut svg = svg_header(title);
    if !pts.is_empty() {
        let xmax = pts.iter().map(|p| p.0).fold(1e-9, f64::max);
        let sx = |v: f64| PAD + v / xmax * (W - 2.0 * PAD);
        let sy = |v: f64| H - PAD - v.clamp(0.0, 1.0) * (H - 2.0 * PAD);
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, (x, y))| format!("{}{:.1},{:.1}", if i == 0 { "M" } else { "L" }, sx(*x), sy(*y)))
            .collect();
        svg.push_str(&format!(
            "<path d=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for (x, y) in pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#1f77b4\"/>\n",
                sx(*x),
                sy(*y)
            ));
        }
    }
    svg.push_str(&axis_box());
    svg.push_str("</svg>\n");
    svg
}

fn axis_box() -> String {
    format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    )
}
