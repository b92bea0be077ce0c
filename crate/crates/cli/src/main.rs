mod io;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use io::{config_hash, load_config, merge_reports, Cell, OutDir};
use serde_json::{json, Value};
use spikelab_core::experiment::{
    run_fluct, run_haar_check, run_predict, run_simulate, workers_from_env, ExperimentConfig,
    HaarCheckConfig, SimulationRun,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "spikelab", version, about = "Outliers of perturbed Hermitian random matrices")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Predicted outlier locations, counts and cluster composition.
    Predict(Common),
    /// Repeated sampling and outlier classification over the N grid.
    Simulate(Common),
    /// Rescaled deviations, rates, polygons and covariances.
    Fluct(Common),
    /// Exact identities and Monte Carlo limit laws of the Haar/Gaussian suite.
    HaarCheck(HaarArgs),
    /// Merge the JSON summaries in the output directory into report.json.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated list, e.g. `250,1000,4000`.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
}

#[derive(Args)]
struct HaarArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    /// First entry is used as the matrix size.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
}

const DEFAULT_OUT: &str = "spikelab-out";

fn prepare(c: &Common) -> Result<(ExperimentConfig, OutDir)> {
    let mut cfg = load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    if let Some(g) = &c.n_grid {
        cfg.n_grid = g.clone();
    }
    if let Some(o) = &c.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate().context("invalid config")?;
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let out = OutDir::create(dir, config_hash(&cfg)?)?;
    Ok((cfg, out))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Predict(c) => {
            let (cfg, out) = prepare(&c)?;
            let rep = run_predict(&cfg)?;
            let p = out.write_json("predictions.json", "predictions", &rep)?;
            println!("expected outliers: {}", rep.total_expected);
            println!("wrote {}", p.display());
        }
        Cmd::Simulate(c) => {
            let (cfg, out) = prepare(&c)?;
            let run = run_simulate(&cfg, workers_from_env())?;
            write_simulation(&out, &run)?;
            for s in &run.sizes {
                println!(
                    "N={} trials={} failed={} modal_outliers={} counts_ok_rate={:.3}",
                    s.n, s.trials, s.failed, s.modal_outliers, s.counts_ok_rate
                );
            }
        }
        Cmd::Fluct(c) => {
            let (cfg, out) = prepare(&c)?;
            let run = match cached_run(&out)? {
                Some(run) => run,
                None => {
                    let run = run_simulate(&cfg, workers_from_env())?;
                    write_simulation(&out, &run)?;
                    run
                }
            };
            write_fluct(&out, &cfg, &run)?;
        }
        Cmd::HaarCheck(h) => {
            let (hc, seed, out) = prepare_haar(&h)?;
            let rows = run_haar_check(&hc, seed, workers_from_env())?;
            let failed = rows.iter().filter(|r| !r.pass).count();
            out.write_json("haar_check.json", "haar_check", &json!({ "n": hc.n, "trials": hc.trials, "rows": rows }))?;
            for r in &rows {
                println!("{} {:<60} z={:+.2} value={:.6e}", if r.pass { "PASS" } else { "FAIL" }, r.name, r.z, r.empirical);
            }
            println!("{} of {} checks passed", rows.len() - failed, rows.len());
        }
        Cmd::Report { out } => {
            let merged = merge_reports(&out, &["report.json", "simulation.json"])?;
            let count = merged.as_object().map_or(0, |m| m.len());
            if count == 0 {
                bail!("no summaries found in {}", out.display());
            }
            let doc = json!({ "schema_version": io::SCHEMA_VERSION, "documents": merged });
            let path = out.join("report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
            println!("merged {count} documents into {}", path.display());
        }
    }
    Ok(())
}

fn prepare_haar(h: &HaarArgs) -> Result<(HaarCheckConfig, u64, OutDir)> {
    let cfg = h.config.as_deref().map(load_config).transpose()?;
    let mut hc = cfg.as_ref().map(|c| c.haar_check).unwrap_or_default();
    if let Some(t) = h.trials {
        hc.trials = t;
    }
    if let Some(n) = h.n_grid.as_ref().and_then(|g| g.first()) {
        hc.n = *n;
    }
    let seed = h.seed.or(cfg.as_ref().map(|c| c.master_seed)).unwrap_or(0);
    let dir = h
        .out
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let stamp = serde_json::to_vec(&json!({ "haar_check": hc, "seed": seed }))?;
    let hash = io::sha_hex(&stamp);
    Ok((hc, seed, OutDir::create(dir, hash)?))
}

/// Reuses `simulation.json` when its config hash matches.
fn cached_run(out: &OutDir) -> Result<Option<SimulationRun>> {
    let path = out.path("simulation.json");
    if !path.exists() {
        return Ok(None);
    }
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if doc.get("config_hash").and_then(Value::as_str) != Some(out.hash.as_str()) {
        return Ok(None);
    }
    Ok(Some(serde_json::from_value(doc["data"].clone())?))
}

fn write_simulation(out: &OutDir, run: &SimulationRun) -> Result<()> {
    let mut csv = out.csv(
        "trials.csv",
        &["n", "trial", "theta_index", "xi_index", "outlier_re", "outlier_im", "xi_re", "xi_im"],
    );
    let mut failures = out.csv("failures.csv", &["n", "trial", "error"]);
    let mut spectra = out.csv("spectra.csv", &["n", "trial", "re", "im"]);
    for r in &run.records {
        if let Some(e) = &r.error {
            failures.row(vec![r.n.into(), r.trial.into(), e.replace(',', ";").as_str().into()]);
            continue;
        }
        for cl in &r.clusters {
            for z in &cl.members {
                csv.row(vec![
                    r.n.into(),
                    r.trial.into(),
                    cl.theta_index.into(),
                    cl.xi_index.into(),
                    z.re.into(),
                    z.im.into(),
                    cl.xi.re.into(),
                    cl.xi.im.into(),
                ]);
            }
        }
        for z in &r.unmatched {
            csv.row(vec![r.n.into(), r.trial.into(), Cell::Empty, Cell::Empty, z.re.into(), z.im.into(), Cell::Empty, Cell::Empty]);
        }
        for z in &r.spectrum {
            spectra.row(vec![r.n.into(), r.trial.into(), z.re.into(), z.im.into()]);
        }
    }
    csv.finish()?;
    failures.finish()?;
    spectra.finish()?;
    out.write_json("simulation.json", "simulation", run)?;
    out.write_json(
        "summary.json",
        "simulation_summary",
        &json!({ "expected_total": run.expected_total, "sizes": run.sizes }),
    )?;
    Ok(())
}

fn write_fluct(out: &OutDir, cfg: &ExperimentConfig, run: &SimulationRun) -> Result<()> {
    let f = run_fluct(cfg, run)?;
    let mut lam = out.csv(
        "lambda_samples.csv",
        &["n", "trial", "theta_index", "xi_index", "p", "beta", "re", "im"],
    );
    for r in &f.lambda {
        lam.row(vec![
            r.n.into(),
            r.trial.into(),
            r.theta_index.into(),
            r.xi_index.into(),
            r.p.into(),
            r.beta.into(),
            r.value.re.into(),
            r.value.im.into(),
        ]);
    }
    lam.finish()?;
    let mut scatter = out.csv("correlation_scatter.csv", &["n", "a_theta", "a_xi", "b_theta", "b_xi", "x", "y"]);
    for e in &f.covariance {
        for &(x, y) in &e.pairs {
            scatter.row(vec![e.n.into(), e.a.0.into(), e.a.1.into(), e.b.0.into(), e.b.1.into(), x.into(), y.into()]);
        }
    }
    scatter.finish()?;
    out.write_json("rates.json", "rates", &f.rates)?;
    out.write_json("polygon.json", "polygon", &f.polygons)?;
    let cov: Vec<Value> = f
        .covariance
        .iter()
        .map(|e| json!({ "n": e.n, "a": e.a, "b": e.b, "same_theta": e.same_theta, "check": e.check }))
        .collect();
    out.write_json("covariance.json", "covariance", &cov)?;
    for r in &f.rates {
        match r.fit {
            Some(fit) => println!(
                "rate theta{} xi{} p={}: slope {:+.4} ± {:.4} (theory {:+.4})",
                r.theta_index, r.xi_index, r.p, fit.slope, fit.stderr, r.theoretical
            ),
            None => println!("rate theta{} xi{} p={}: grid too narrow for a fit", r.theta_index, r.xi_index, r.p),
        }
    }
    for p in &f.polygons {
        println!(
            "polygon N={} theta{} xi{} p={}: gap {:.4} (target {:.4}), radius cv {:.3}",
            p.n, p.theta_index, p.xi_index, p.stats.p, p.stats.gap_mean, p.target_gap, p.stats.radius_cv
        );
    }
    for e in &f.covariance {
        println!(
            "{}: corr {:+.3} (predicted {:+.3}), z vs 0 {:+.2}, z vs prediction {:+.2}",
            e.check.name, e.check.empirical, e.check.predicted, e.check.z_null, e.check.z_predicted
        );
    }
    if f.skipped > 0 {
        println!("{} clusters skipped for a wrong member count", f.skipped);
    }
    Ok(())
}
