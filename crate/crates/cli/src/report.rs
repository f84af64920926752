//! Report assembly: pool completed run directories, refuse mismatched
//! configs, and emit the final-round summary table (mean ± std over seeds),
//! per-metric learning curves, and the heterogeneity scatter.

use std::path::{Path, PathBuf};

use fedlab_core::config::ExperimentConfig;
use fedlab_core::data::PartitionManifest;
use fedlab_core::error::{Error, Result};
use fedlab_core::metrics::{amp, fm, wlp, AccuracyProfile};
use fedlab_core::records::{read_records, RoundRecord};

use crate::plot::{heterogeneity_scatter, line_plot, Series};

pub struct RunData {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub label: String,
    pub per_seed: Vec<(u64, Vec<RoundRecord>)>,
}

pub fn algorithm_label(cfg: &ExperimentConfig) -> String {
    let name = cfg.algorithm.name.as_str();
    if cfg.algorithm.use_t1 && name != "fedkf" {
        format!("{name}+t1")
    } else {
        name.to_string()
    }
}

/// Load one run directory: resolved config plus every seed's records.
pub fn load_run_dir(dir: &Path) -> Result<RunData> {
    let cfg_path = dir.join("resolved_config.toml");
    if !cfg_path.exists() {
        return Err(Error::config(format!(
            "{} is not a run directory (missing resolved_config.toml)",
            dir.display()
        )));
    }
    let config = ExperimentConfig::load(&cfg_path)?;
    let mut per_seed = Vec::new();
    for &s in &config.seeds {
        let rec_path = dir.join(format!("seed_{s}")).join("records.jsonl");
        if !rec_path.exists() {
            return Err(Error::config(format!(
                "run {} is incomplete: missing {}",
                dir.display(),
                rec_path.display()
            )));
        }
        let records = read_records(&rec_path)?;
        if records.is_empty() {
            return Err(Error::config(format!(
                "{} holds no records",
                rec_path.display()
            )));
        }
        per_seed.push((s, records));
    }
    // Seeds of one run must agree on the evaluated round sequence.
    let rounds0: Vec<u64> = per_seed[0].1.iter().map(|r| r.round).collect();
    for (s, recs) in &per_seed {
        let rounds: Vec<u64> = recs.iter().map(|r| r.round).collect();
        if rounds != rounds0 {
            return Err(Error::config(format!(
                "seed {s} evaluated rounds {rounds:?}, expected {rounds0:?}"
            )));
        }
    }
    Ok(RunData {
        dir: dir.to_path_buf(),
        label: algorithm_label(&config),
        config,
        per_seed,
    })
}

/// The fields every pooled run must share; algorithm and seeds may differ.
fn pool_key(cfg: &ExperimentConfig) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Key<'a> {
        dataset: &'a str,
        synthetic: &'a Option<fedlab_core::config::SyntheticConfig>,
        rounds: u64,
        eval_every: u64,
        partition: &'a fedlab_core::data::PartitionSpec,
        selection: &'a fedlab_core::server::SelectionPolicy,
        model: &'a fedlab_core::config::ModelConfig,
        client: &'a fedlab_core::config::ClientConfig,
    }
    serde_json::to_string(&Key {
        dataset: &cfg.dataset,
        synthetic: &cfg.synthetic,
        rounds: cfg.rounds,
        eval_every: cfg.eval_every,
        partition: &cfg.partition,
        selection: &cfg.selection,
        model: &cfg.model,
        client: &cfg.client,
    })
    .map_err(Error::from)
}

pub fn check_poolable(runs: &[RunData]) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::config("report needs at least one run directory"));
    }
    let key0 = pool_key(&runs[0].config)?;
    for r in &runs[1..] {
        if pool_key(&r.config)? != key0 {
            return Err(Error::config(format!(
                "refusing to pool {} with {}: experiment settings differ \
                 (only the algorithm and seeds may vary)",
                r.dir.display(),
                runs[0].dir.display()
            )));
        }
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub struct SummaryRow {
    pub label: String,
    pub num_seeds: usize,
    /// percent
    pub amp: (f64, f64),
    /// scaled ×10⁻³ (i.e. value × 1000)
    pub fm: (f64, f64),
    /// percent
    pub wlp: (f64, f64),
}

/// Final-round metrics, aggregated over seeds.
pub fn summarize(run: &RunData) -> SummaryRow {
    let finals: Vec<&RoundRecord> =
        run.per_seed.iter().map(|(_, recs)| recs.last().unwrap()).collect();
    let amps: Vec<f64> = finals.iter().map(|r| r.amp * 100.0).collect();
    let fms: Vec<f64> = finals.iter().map(|r| r.fm * 1000.0).collect();
    let wlps: Vec<f64> = finals.iter().map(|r| r.wlp * 100.0).collect();
    SummaryRow {
        label: run.label.clone(),
        num_seeds: run.per_seed.len(),
        amp: mean_std(&amps),
        fm: mean_std(&fms),
        wlp: mean_std(&wlps),
    }
}

/// Plain-text table; FM's scale is stated in the header, std is over seeds.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>5}  {:>16}  {:>16}  {:>16}\n",
        "algorithm", "seeds", "AMP (%)", "FM (x1e-3)", "WLP (%)"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>5}  {:>8.2} ± {:<5.2}  {:>8.2} ± {:<5.2}  {:>8.2} ± {:<5.2}\n",
            r.label,
            r.num_seeds,
            r.amp.0,
            r.amp.1,
            r.fm.0,
            r.fm.1,
            r.wlp.0,
            r.wlp.1
        ));
    }
    out.push_str("(mean ± std over seeds; final evaluated round)\n");
    out
}

pub fn render_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "algorithm,num_seeds,amp_mean_pct,amp_std_pct,fm_mean_x1e3,fm_std_x1e3,\
         wlp_mean_pct,wlp_std_pct\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.label, r.num_seeds, r.amp.0, r.amp.1, r.fm.0, r.fm.1, r.wlp.0, r.wlp.1
        ));
    }
    out
}

/// One line per run: metric vs round, mean over seeds.
fn metric_series(runs: &[RunData], get: fn(&RoundRecord) -> f64) -> Vec<Series> {
    runs.iter()
        .map(|run| {
            let rounds: Vec<u64> = run.per_seed[0].1.iter().map(|r| r.round).collect();
            let points = rounds
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let mean = run
                        .per_seed
                        .iter()
                        .map(|(_, recs)| get(&recs[i]))
                        .sum::<f64>()
                        / run.per_seed.len() as f64;
                    (t as f64, mean)
                })
                .collect();
            Series { label: run.label.clone(), points }
        })
        .collect()
}

/// Write table, CSV, learning-curve SVGs, and (when a partition manifest is
/// available) the heterogeneity scatter. Returns the rendered text table.
pub fn write_report(runs: &[RunData], out_dir: &Path) -> Result<String> {
    check_poolable(runs)?;
    std::fs::create_dir_all(out_dir)?;
    let rows: Vec<SummaryRow> = runs.iter().map(summarize).collect();
    let table = render_table(&rows);
    std::fs::write(out_dir.join("report.txt"), &table)?;
    std::fs::write(out_dir.join("report.csv"), render_csv(&rows))?;

    for (name, get) in [
        ("amp", (|r: &RoundRecord| r.amp * 100.0) as fn(&RoundRecord) -> f64),
        ("fm", |r: &RoundRecord| r.fm * 1000.0),
        ("wlp", |r: &RoundRecord| r.wlp * 100.0),
    ] {
        let title = match name {
            "amp" => "AMP (%) vs communication round",
            "fm" => "FM (x1e-3) vs communication round",
            _ => "WLP (%) vs communication round",
        };
        let svg = line_plot(title, "round", name, &metric_series(runs, get));
        std::fs::write(out_dir.join(format!("{name}.svg")), svg)?;
    }

    let manifest_path = runs[0].dir.join("partition.json");
    if manifest_path.exists() {
        let manifest: PartitionManifest =
            serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
        let svg = heterogeneity_scatter(
            &format!(
                "{} partition, K={}, alpha={}",
                manifest.dataset, manifest.spec.k, manifest.spec.alpha
            ),
            &manifest.label_counts,
        );
        std::fs::write(out_dir.join("heterogeneity.svg"), svg)?;
    } else {
        eprintln!(
            "note: {} not found; skipping heterogeneity scatter",
            manifest_path.display()
        );
    }
    Ok(table)
}

/// Metrics table for a standalone accuracy profile read from JSON.
pub fn profile_table(profile: &AccuracyProfile) -> String {
    format!(
        "{:<10} {:>10} {:>12} {:>10}\n{:<10} {:>10.4} {:>12.4} {:>10.4}\n",
        "",
        "AMP (%)",
        "FM (x1e-3)",
        "WLP (%)",
        "profile",
        amp(profile) * 100.0,
        fm(profile) * 1000.0,
        wlp(profile) * 100.0
    )
}
