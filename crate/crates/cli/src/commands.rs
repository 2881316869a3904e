//! Command implementations. Every file they produce goes through
//! [`Outputs`] so it ends up in the run manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use volex_core::hjb::{closed_form_w, lambda_sweep, SolverDiagnostics};
use volex_core::montecarlo::{epsilon_sweep, estimate_cost, sample_paths, StrategySpec};
use volex_core::strategies::{
    permanent_impact_cost, permanent_impact_strategy, twap, PermanentImpactParams, PermanentRegime,
};
use volex_core::{MarketParams, TimeGrid};

use crate::config::{PdeSection, PermanentImpactSection, RunConfig};
use crate::error::CliError;
use crate::manifest::Outputs;

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> volex_core::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    text.into_bytes()
}

pub fn simulate(cfg: &RunConfig, out: &mut Outputs, quiet: bool) -> Result<(), CliError> {
    if cfg.experiment.is_none() && cfg.permanent_impact.is_none() {
        return Err(CliError::Config(
            "simulate needs an [experiment] or [permanent_impact] section".into(),
        ));
    }
    if cfg.paths.is_some() && cfg.experiment.is_none() {
        return Err(CliError::Config("[paths] needs an [experiment] section".into()));
    }
    if let Some(exp) = &cfg.experiment {
        exp.validate()?;
        if cfg.simulate.sweep {
            let result = epsilon_sweep(exp)?;
            out.write("sweep.csv", &csv_bytes(|b| result.write_csv(b))?)?;
            if !quiet {
                println!(
                    "{:>8} {:>6} {:>14} {:>12} {:>12}",
                    "epsilon", "rho", "strategy", "IS", "stderr"
                );
                for r in &result.rows {
                    println!(
                        "{:>8.3} {:>6.2} {:>14} {:>12.6e} {:>12.3e}",
                        r.epsilon,
                        r.rho,
                        r.strategy.as_str(),
                        r.report.is_cost,
                        r.report.is_stderr(&result.params)
                    );
                }
            }
            let floored: usize = result.rows.iter().map(|r| r.floored).sum();
            if floored > 0 {
                log::warn!("adaptive rates floored at zero {floored} times");
            }
        }
        if let Some(p) = &cfg.paths {
            let sample = sample_paths(exp, p.rho, p.epsilon, p.index)?;
            out.write("paths.csv", &csv_bytes(|b| sample.write_csv(b))?)?;
            if !quiet {
                println!(
                    "sample path {} at rho = {}, epsilon = {}: {} floored rates",
                    p.index, p.rho, p.epsilon, sample.floored
                );
            }
        }
    }
    if let Some(pi) = &cfg.permanent_impact {
        permanent_impact(pi, out, quiet)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PermanentImpactReport {
    regime: PermanentRegime,
    mu_tilde: f64,
    discriminant: f64,
    cost: f64,
    twap_cost: f64,
    min_rate: f64,
}

fn permanent_impact(section: &PermanentImpactSection, out: &mut Outputs, quiet: bool) -> Result<(), CliError> {
    let params = section.params;
    params.validate()?;
    if !(section.v0 > 0.0 && section.v0.is_finite()) {
        return Err(CliError::Config(format!(
            "[permanent_impact] v0 must be > 0, got {}",
            section.v0
        )));
    }
    let grid = TimeGrid::new(params.horizon, section.n_steps)?;
    let ab = PermanentImpactParams::new(section.mu, section.sigma, &params);
    let schedule = permanent_impact_strategy(&params, &ab, &grid)?;
    let inv = |t: f64| ab.expected_inverse_volume(section.v0, t);
    let report = PermanentImpactReport {
        regime: ab.regime(),
        mu_tilde: ab.mu_tilde,
        discriminant: ab.d_disc,
        cost: permanent_impact_cost(&schedule, &params, inv),
        twap_cost: permanent_impact_cost(&twap(&params, &grid), &params, inv),
        min_rate: schedule.rates().iter().copied().fold(f64::INFINITY, f64::min),
    };
    out.write("permanent_impact.csv", &csv_bytes(|b| schedule.write_csv(b))?)?;
    out.write("permanent_impact.json", &json_bytes(&report))?;
    if !quiet {
        println!(
            "permanent impact: {:?} regime, cost {:.6e} (TWAP {:.6e})",
            report.regime, report.cost, report.twap_cost
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct PdePoint {
    lambda: f64,
    j: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form_rel_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc_j: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc_stderr: Option<f64>,
    diagnostics: SolverDiagnostics,
}

#[derive(Serialize)]
struct PdeReport {
    x0: f64,
    monotone: bool,
    extrapolated_j: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    closed_form_limit: Option<f64>,
    points: Vec<PdePoint>,
}

pub fn pde(cfg: &RunConfig, seed: u64, out: &mut Outputs, quiet: bool) -> Result<(), CliError> {
    let section: &PdeSection = cfg
        .pde
        .as_ref()
        .ok_or_else(|| CliError::Config("pde needs a [pde] section".into()))?;
    if section.lambdas.is_empty() {
        return Err(CliError::Config("[pde] lambdas must not be empty".into()));
    }
    let mut grid = section.grid;
    if section.verify.is_some() && grid.save_every > 1 {
        // The feedback rule interpolates W in time; thinned slices bias it.
        log::warn!(
            "Monte Carlo check requested: keeping every time slice instead of every {}",
            grid.save_every
        );
        grid = grid.with_save_every(1);
    }
    let sweep = lambda_sweep(&section.model, &section.lambdas, section.x0, &grid, &section.options)?;
    let horizon = section.grid.horizon;
    let v0 = section.model.initial_volume();
    let x2 = section.x0 * section.x0;
    let closed = |lambda: f64| {
        closed_form_w(&section.model, horizon, lambda, 0.0, v0)
            .ok()
            .map(|w| x2 * w)
    };
    let mc_grid = match &section.verify {
        Some(v) => Some((TimeGrid::new(horizon, v.n_steps)?, v.n_paths)),
        None => None,
    };
    let mut points = Vec::with_capacity(sweep.points.len());
    for (i, p) in sweep.points.iter().enumerate() {
        let closed_form_j = closed(p.lambda);
        let (mc_j, mc_stderr) = match &mc_grid {
            Some((grid, n_paths)) => {
                let params = MarketParams::new(1.0, 1.0, horizon, section.x0)?;
                let spec = StrategySpec::Penalized { surface: &p.surface };
                let r = estimate_cost(&params, &spec, &section.model, *n_paths, grid, seed)?;
                (Some(r.j_estimate), Some(r.stderr))
            }
            None => (None, None),
        };
        if section.write_surfaces {
            out.write(&format!("w_lambda_{i}.csv"), &csv_bytes(|b| p.surface.write_csv(b))?)?;
        }
        points.push(PdePoint {
            lambda: p.lambda,
            j: p.j,
            closed_form_rel_error: closed_form_j.map(|c| (p.j - c).abs() / c),
            closed_form_j,
            mc_j,
            mc_stderr,
            diagnostics: p.surface.diagnostics().clone(),
        });
    }
    let report = PdeReport {
        x0: section.x0,
        monotone: sweep.is_monotone(),
        extrapolated_j: sweep.extrapolated,
        closed_form_limit: closed(f64::INFINITY),
        points,
    };
    out.write("lambda_sweep.csv", &csv_bytes(|b| sweep.write_csv(b))?)?;
    out.write("pde_report.json", &json_bytes(&report))?;
    if !quiet {
        println!("{:>10} {:>14} {:>14} {:>12}", "lambda", "J", "closed form", "rel error");
        for p in &report.points {
            let (c, e) = match (p.closed_form_j, p.closed_form_rel_error) {
                (Some(c), Some(e)) => (format!("{c:.8}"), format!("{e:.3e}")),
                _ => ("-".into(), "-".into()),
            };
            println!("{:>10} {:>14.8} {:>14} {:>12}", p.lambda, p.j, c, e);
            if let (Some(m), Some(s)) = (p.mc_j, p.mc_stderr) {
                println!("{:>10} {:>14.8} (Monte Carlo, stderr {s:.2e})", "", m);
            }
        }
        println!(
            "J^lambda monotone: {}; extrapolated limit {:.8}",
            report.monotone, report.extrapolated_j
        );
        if let Some(c) = report.closed_form_limit {
            println!(
                "closed-form limit {c:.8} (rel error {:.3e})",
                (report.extrapolated_j - c).abs() / c
            );
        }
    }
    Ok(())
}

/// Run directories found under `dir`: `dir` itself and its immediate
/// subdirectories, in name order.
fn run_dirs(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>, CliError> {
    let mut runs = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("cannot read directory {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        if entry.file_type().map_err(|e| CliError::io(entry.path(), e))?.is_dir() {
            runs.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    runs.sort();
    runs.insert(0, (".".into(), dir.to_path_buf()));
    Ok(runs)
}

fn read_rows(path: &Path) -> Result<(csv::StringRecord, Vec<csv::StringRecord>), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(volex_core::VolexError::from)?;
    let header = r.headers().map_err(volex_core::VolexError::from)?.clone();
    let rows = r
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(volex_core::VolexError::from)?;
    Ok((header, rows))
}

fn column(header: &csv::StringRecord, name: &str, path: &Path) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Config(format!("{} has no `{name}` column", path.display())))
}

/// `(run, rho, epsilon)` as written in the source files.
type SweepKey = (String, String, String);
/// Strategy name to `(IS, stderr)`.
type ByStrategy = BTreeMap<String, (String, String)>;

/// Merges every `sweep.csv`, `paths.csv` and `lambda_sweep.csv` under `dir`
/// into wide, plot-ready tables tagged by run directory.
pub fn figures(dir: &Path, out: &mut Outputs, quiet: bool) -> Result<(), CliError> {
    let runs = run_dirs(dir)?;
    let mut found = 0;

    // Key order follows the files.
    let mut sweep: Vec<(SweepKey, ByStrategy)> = Vec::new();
    let mut strategies: Vec<String> = Vec::new();
    for (run, path) in &runs {
        let file = path.join("sweep.csv");
        if !file.is_file() {
            continue;
        }
        found += 1;
        let (header, rows) = read_rows(&file)?;
        let [e, r, s, is, se] = ["epsilon", "rho", "strategy", "IS", "stderr"].map(|c| column(&header, c, &file));
        let (e, r, s, is, se) = (e?, r?, s?, is?, se?);
        for row in rows {
            let key = (run.clone(), row[r].to_string(), row[e].to_string());
            let strategy = row[s].to_string();
            if !strategies.contains(&strategy) {
                strategies.push(strategy.clone());
            }
            let entry = match sweep.iter_mut().find(|(k, _)| *k == key) {
                Some(entry) => entry,
                None => {
                    sweep.push((key, BTreeMap::new()));
                    sweep.last_mut().expect("just pushed")
                }
            };
            entry.1.insert(strategy, (row[is].to_string(), row[se].to_string()));
        }
    }
    if !sweep.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["run".to_string(), "rho".into(), "epsilon".into()];
        for s in &strategies {
            header.push(format!("IS_{s}"));
            header.push(format!("stderr_{s}"));
        }
        w.write_record(&header).map_err(volex_core::VolexError::from)?;
        for ((run, rho, eps), by_strategy) in &sweep {
            let mut rec = vec![run.clone(), rho.clone(), eps.clone()];
            for s in &strategies {
                let (is, se) = by_strategy.get(s).cloned().unwrap_or_default();
                rec.push(is);
                rec.push(se);
            }
            w.write_record(&rec).map_err(volex_core::VolexError::from)?;
        }
        out.write("figure_costs.csv", &finish(w)?)?;
    }

    for (name, columns) in [
        ("paths.csv", &["t", "v", "x_stat", "x_adap", "x_ant"][..]),
        ("lambda_sweep.csv", &["lambda", "J"][..]),
    ] {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["run"];
        header.extend_from_slice(columns);
        w.write_record(&header).map_err(volex_core::VolexError::from)?;
        let mut any = false;
        for (run, path) in &runs {
            let file = path.join(name);
            if !file.is_file() {
                continue;
            }
            found += 1;
            any = true;
            let (h, rows) = read_rows(&file)?;
            let idx = columns
                .iter()
                .map(|c| column(&h, c, &file))
                .collect::<Result<Vec<_>, _>>()?;
            for row in rows {
                let mut rec = vec![run.as_str()];
                rec.extend(idx.iter().map(|&i| &row[i]));
                w.write_record(&rec).map_err(volex_core::VolexError::from)?;
            }
        }
        if any {
            let merged = format!("figure_{}", name.replace("lambda_sweep", "lambdas"));
            out.write(&merged, &finish(w)?)?;
        }
    }

    if found == 0 {
        return Err(CliError::Config(format!(
            "no sweep.csv, paths.csv or lambda_sweep.csv under {}",
            dir.display()
        )));
    }
    if !quiet {
        println!("merged {found} files from {}", dir.display());
    }
    Ok(())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, CliError> {
    w.into_inner().map_err(|e| CliError::io("<buffer>", e.into_error()))
}
