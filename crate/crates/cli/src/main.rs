//! `fedlab` — declarative federated-learning experiment runner.
//!
//! Exit codes: 0 success, 1 validation error (bad config/arguments),
//! 2 runtime failure.

mod plot;
mod report;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fedlab_core::config::{data_dir_from_env, ExperimentConfig};
use fedlab_core::data::PartitionManifest;
use fedlab_core::error::{Error, Result};
use fedlab_core::gradcheck;
use fedlab_core::metrics::{check_afl_bounds, AccuracyProfile};
use fedlab_core::models::save_checkpoint;
use fedlab_core::rng::stream;
use fedlab_core::server::{run_training, TrainSetup};

#[derive(Parser)]
#[command(
    name = "fedlab",
    about = "Federated-learning simulation lab: partition, train, report",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset directory (overrides config and environment).
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the partition manifest for a config.
    Partition {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train: one sub-run per seed, records + checkpoints + resolved config.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Run a single seed instead of the config's seed list.
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
        /// Continue each sub-run from its saved state.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize finished runs: table, CSV, and SVG plots.
    Report {
        /// Run directories (each holding resolved_config.toml + seed_*/).
        #[arg(value_name = "RUN_DIR", required_unless_present = "profile")]
        runs: Vec<PathBuf>,
        /// Where to write report files.
        #[arg(long, value_name = "DIR", default_value = "report")]
        out: PathBuf,
        /// Instead of runs: metrics for one accuracy profile JSON
        /// ({"per_client_acc": [...], "test_sizes": [...]}).
        #[arg(long, value_name = "FILE", conflicts_with = "runs")]
        profile: Option<PathBuf>,
    },
    /// Verify the agnostic-loss bound MP >= WLP on random profiles.
    CheckBounds {
        /// Number of random accuracy profiles.
        #[arg(long, default_value_t = 10)]
        profiles: usize,
        /// Mixture draws per profile.
        #[arg(long, default_value_t = 1000)]
        mixtures: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        /// Number of random configurations.
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Relative-error tolerance.
        #[arg(long, default_value_t = gradcheck::DEFAULT_TOL)]
        tol: f64,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version exit 0; genuine argument errors are
            // validation failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_validation() { 1 } else { 2 });
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Partition { common } => cmd_partition(&common),
        Command::Run { common, seed, resume } => cmd_run(&common, seed, resume),
        Command::Report { runs, out, profile } => cmd_report(&runs, &out, profile.as_deref()),
        Command::CheckBounds { profiles, mixtures, seed } => {
            cmd_check_bounds(profiles, mixtures, seed)
        }
        Command::Gradcheck { configs, seed, tol } => cmd_gradcheck(configs, seed, tol),
    }
}

/// Dataset dir is only consulted for on-disk datasets.
fn resolve_data(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf> {
    if cfg.dataset == "synthetic" {
        return Ok(PathBuf::from("."));
    }
    data_dir_from_env(flag, cfg.data_dir.as_deref())
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<&PathBuf>) -> Result<PathBuf> {
    flag.cloned()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::config("no output directory: set output_dir or pass --out"))
}

fn cmd_partition(common: &ConfigArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = out_dir(&cfg, common.out.as_ref())?;
    let data_dir = resolve_data(&cfg, common.data_dir.as_deref())?;
    let data = cfg.load_data(&data_dir)?;
    let partition = cfg.build_partition(&data)?;
    let manifest = PartitionManifest::new(&cfg.dataset, data.len(), &partition);
    std::fs::create_dir_all(&out)?;
    let path = out.join("partition.json");
    let mut body = serde_json::to_vec_pretty(&manifest)?;
    body.push(b'\n');
    std::fs::write(&path, body)?;
    let train: usize = manifest.train_sizes.iter().sum();
    let test: usize = manifest.test_sizes.iter().sum();
    println!(
        "wrote {} (K={}, alpha={}, {} train / {} test, mean label entropy {:.4})",
        path.display(),
        partition.spec.k,
        partition.spec.alpha,
        train,
        test,
        manifest.mean_label_entropy
    );
    Ok(())
}

fn cmd_run(common: &ConfigArgs, seed: Option<u64>, resume: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(d) = &common.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    let out = out_dir(&cfg, common.out.as_ref())?;
    cfg.output_dir = Some(out.clone());
    cfg.validate()?;

    let data_dir = resolve_data(&cfg, common.data_dir.as_deref())?;
    let data = cfg.load_data(&data_dir)?;
    let partition = cfg.build_partition(&data)?;
    let arch = cfg.model.resolve(&data)?;
    let gen_arch = cfg.generator.as_ref().map(|g| g.resolve(&data)).transpose()?;

    std::fs::create_dir_all(&out)?;
    let resolved = cfg.resolved();
    std::fs::write(out.join("resolved_config.toml"), resolved.to_toml_string()?)?;
    let manifest = PartitionManifest::new(&cfg.dataset, data.len(), &partition);
    std::fs::write(
        out.join("partition.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;

    for &s in &cfg.seeds {
        let sub = out.join(format!("seed_{s}"));
        let setup = TrainSetup {
            data: &data,
            partition: &partition,
            arch: arch.clone(),
            gen_arch: gen_arch.clone(),
            algo: cfg.algorithm.clone(),
            hp: cfg.client.hyperparams(),
            selection: cfg.selection,
            rounds: cfg.rounds,
            seed: s,
            eval_every: cfg.eval_every,
            failure_policy: cfg.failure_policy,
            checkpoint_every: cfg.checkpoint_every,
            out_dir: Some(sub.clone()),
            resume,
        };
        let started = std::time::Instant::now();
        let (final_model, records) = run_training(&setup)?;
        save_checkpoint(&sub.join("checkpoints").join("final"), &final_model, cfg.rounds as usize)?;
        if let Some(last) = records.last() {
            println!(
                "seed {s}: {} rounds in {:.1}s — AMP {:.2}% FM {:.3}x1e-3 WLP {:.2}%",
                cfg.rounds,
                started.elapsed().as_secs_f64(),
                last.amp * 100.0,
                last.fm * 1000.0,
                last.wlp * 100.0
            );
        } else {
            println!("seed {s}: {} rounds, nothing evaluated", cfg.rounds);
        }
    }
    println!("run directory: {}", out.display());
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: &Path, profile: Option<&Path>) -> Result<()> {
    if let Some(path) = profile {
        let profile: AccuracyProfile = serde_json::from_slice(&std::fs::read(path)?)?;
        profile.validate()?;
        print!("{}", report::profile_table(&profile));
        return Ok(());
    }
    let mut loaded = Vec::new();
    for dir in runs {
        loaded.push(report::load_run_dir(dir)?);
    }
    let table = report::write_report(&loaded, out)?;
    print!("{table}");
    println!("report files in {}", out.display());
    Ok(())
}

fn cmd_check_bounds(profiles: usize, mixtures: usize, seed: u64) -> Result<()> {
    if profiles == 0 || mixtures == 0 {
        return Err(Error::config("profiles and mixtures must be >= 1"));
    }
    use rand::Rng;
    let mut rng = stream(seed, "bounds-profiles", &[]);
    let mut worst_margin = f64::INFINITY;
    let mut all_hold = true;
    for i in 0..profiles {
        let k = rng.random_range(2..=20usize);
        let accs: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..100usize)).collect();
        let profile = AccuracyProfile::new(accs, sizes)?;
        let report = check_afl_bounds(&profile, mixtures, seed.wrapping_add(i as u64))?;
        let margin = report.min_observed_mp - report.wlp;
        worst_margin = worst_margin.min(margin);
        all_hold &= report.holds;
        println!(
            "profile {i:>2} (K={k:>2}): WLP {:.6}  min MP {:.6}  margin {margin:+.3e}  {}",
            report.wlp,
            report.min_observed_mp,
            if report.holds { "ok" } else { "VIOLATED" }
        );
    }
    println!(
        "{} profiles x {} mixtures: worst margin {worst_margin:+.3e}",
        profiles, mixtures
    );
    if !all_hold {
        return Err(Error::data(
            "agnostic bound violated: observed MP < WLP - 1e-12",
        ));
    }
    println!("bound holds: MP >= WLP - 1e-12 on every sampled mixture");
    Ok(())
}

fn cmd_gradcheck(configs: usize, seed: u64, tol: f64) -> Result<()> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(Error::config("tol must be positive and finite"));
    }
    let report = gradcheck::run_suite(configs, seed, tol)?;
    // Worst case per check kind across configurations.
    let mut worst: std::collections::BTreeMap<String, f64> = Default::default();
    for c in &report.checks {
        let base = c.name.split('[').next().unwrap_or(&c.name).to_string();
        let e = worst.entry(base).or_insert(0.0);
        *e = e.max(c.max_rel_err);
    }
    for (name, err) in &worst {
        println!("{name:<40} max rel err {err:.3e}");
    }
    println!(
        "{} configurations, overall max rel err {:.3e} (tol {:.1e})",
        report.num_configs, report.max_rel_err, report.tol
    );
    if !report.passed {
        return Err(Error::data("gradient check failed: analytic vs FD mismatch"));
    }
    println!("all gradients match central finite differences");
    Ok(())
}
