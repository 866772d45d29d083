// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};

use hdgm_core::diagnostics::{losocv, st_variogram, station_acf, studentized_residuals};
use hdgm_core::emfit::fitted_values;
use hdgm_core::io::{self, FitArtifact, RunConfig, SimConfig};
use hdgm_core::model::apply_standardization;
use hdgm_core::scenario::{run_scenario, ScenarioSpec};
use hdgm_core::sim::{simulate, simulate_grid};
use hdgm_core::{em_fit, predict_response, EmOptions, Error, ModelSpec, Result};

use crate::{Cli, Command, EmFlags};

pub enum Outcome {
    Done,
    NotConverged,
}

fn em_options(cfg: &RunConfig, flags: &EmFlags) -> Result<EmOptions> {
    let mut o = cfg.em;
    if let Some(v) = flags.max_iter {
        o.max_iter = v;
    }
    if let Some(v) = flags.tol {
        o.tol = v;
    }
    if let Some(v) = flags.seed {
        o.seed = v;
    }
    if !(o.tol > 0.0) || o.max_iter == 0 {
        return Err(Error::input("EM needs tol > 0 and max_iter >= 1"));
    }
    Ok(o)
}

fn model_spec(cfg: &RunConfig) -> Result<ModelSpec> {
    cfg.model
        .clone()
        .ok_or_else(|| Error::input("the configuration has no [model] table"))
}

fn pick(flag: Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| cfg.clone())
        .ok_or_else(|| Error::input(format!("no {what} given (flag or configuration)")))
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let cfg = match &cli.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let has_config = cfg.is_some();
    let cfg = cfg.unwrap_or_default();
    match cli.command {
        Command::Fit { panel, out, em } => fit(&cfg, panel, out, &em),
        Command::Predict { fit, grid, out } => {
            let art = io::load_artifact(&fit)?;
            let data = if has_config { cfg.data.clone() } else { art.data.clone() };
            let grid = io::ingest_grid(&pick(grid, &data.grid, "grid")?, &data, &art.model.spec)?;
            let pred = predict_response(&art.model, &grid, None)?;
            io::write_predictions_csv(&out_dir(out, &cfg).join("predictions.csv"), &pred)?;
            Ok(Outcome::Done)
        }
        Command::Scenario {
            fit,
            grid,
            out,
            only,
            target,
            r,
            name,
        } => {
            let art = io::load_artifact(&fit)?;
            let data = if has_config { cfg.data.clone() } else { art.data.clone() };
            let grid = io::ingest_grid(&pick(grid, &data.grid, "grid")?, &data, &art.model.spec)?;
            let mut specs: Vec<ScenarioSpec> = cfg.scenarios();
            if !only.is_empty() {
                specs.retain(|s| only.contains(&s.name));
            }
            if let (Some(target), Some(r)) = (target, r) {
                let mut s = ScenarioSpec::new(name, target, r);
                s.mask = cfg.mask.clone().unwrap_or_default();
                specs.push(s);
            }
            if specs.is_empty() {
                return Err(Error::input("no scenarios to run"));
            }
            let dir = out_dir(out, &cfg);
            let mut results = Vec::with_capacity(specs.len());
            for s in &specs {
                let res = run_scenario(&art.model, &grid, s)?;
                let base = safe_name(&s.name);
                io::write_scenario_deltas_csv(&dir.join(format!("scenario_{base}_deltas.csv")), &grid, &res)?;
                io::write_scenario_map_csv(&dir.join(format!("scenario_{base}_map.csv")), &res)?;
                results.push(res);
            }
            io::write_scenario_summary_csv(&dir.join("scenario_summary.csv"), &results)?;
            Ok(Outcome::Done)
        }
        Command::Cv {
            panel,
            holdout,
            out,
            em,
        } => {
            let spec = model_spec(&cfg)?;
            let opts = em_options(&cfg, &em)?;
            let panel = io::ingest_panel(&pick(panel, &cfg.data.panel, "panel")?, &cfg.data, &spec)?;
            let holdout = if holdout.is_empty() { cfg.cv.holdout.clone() } else { holdout };
            let report = losocv(&panel, &spec, &opts, &holdout)?;
            let dir = out_dir(out, &cfg);
            io::write_cv_csv(&dir.join("cv.csv"), &report)?;
            io::write_cv_predictions_csv(&dir.join("cv_predictions.csv"), &report, panel.dates())?;
            Ok(Outcome::Done)
        }
        Command::Diagnose {
            fit,
            panel,
            out,
            max_lag,
            space_bins,
            time_lags,
        } => {
            let art = io::load_artifact(&fit)?;
            let data = if has_config { cfg.data.clone() } else { art.data.clone() };
            let panel = io::ingest_panel(&pick(panel, &data.panel, "panel")?, &data, &art.model.spec)?;
            let d = &cfg.diagnostics;
            let res = studentized_residuals(&art.model, &panel)?;
            let acf = station_acf(&res, max_lag.unwrap_or(d.max_lag));
            let vg = st_variogram(
                &panel.response,
                &panel.sites,
                space_bins.unwrap_or(d.space_bins),
                d.max_distance,
                time_lags.unwrap_or(d.time_lags),
            )?;
            let dir = out_dir(out, &cfg);
            io::write_station_series_csv(&dir.join("residuals.csv"), &panel.sites, panel.dates(), &res)?;
            io::write_acf_csv(&dir.join("acf.csv"), &panel.sites, &acf)?;
            io::write_variogram_csv(&dir.join("variogram.csv"), &vg)?;
            Ok(Outcome::Done)
        }
        Command::Simulate {
            spec,
            out,
            latent_out,
            grid_out,
            seed,
        } => {
            let mut sc = SimConfig::load(&spec)?;
            if let Some(s) = seed {
                sc.spec.seed = s;
            }
            let sim = simulate(&sc.spec)?;
            io::write_panel_csv(&out, &sim.panel)?;
            if let Some(p) = latent_out {
                io::write_latent_csv(&p, &sim.panel.sites, &sim.latent)?;
            }
            if let Some(p) = grid_out {
                let g = sc
                    .grid
                    .as_ref()
                    .ok_or_else(|| Error::input("--grid-out needs a [grid] table in the simulation spec"))?;
                let grid = simulate_grid(
                    (g.lat[0], g.lat[1]),
                    (g.lon[0], g.lon[1]),
                    g.spacing,
                    &sc.spec.covariate_names(),
                    sim.panel.dates(),
                    g.seed.unwrap_or(sc.spec.seed.wrapping_add(1)),
                )?;
                io::write_grid_csv(&p, &grid)?;
            }
            Ok(Outcome::Done)
        }
    }
}

fn fit(cfg: &RunConfig, panel: Option<PathBuf>, out: Option<PathBuf>, em: &EmFlags) -> Result<Outcome> {
    let spec = model_spec(cfg)?;
    let opts = em_options(cfg, em)?;
    let panel_path = pick(panel, &cfg.data.panel, "panel")?;
    let panel = io::ingest_panel(&panel_path, &cfg.data, &spec)?;
    let model = em_fit(&panel, &spec, &opts)?;
    let dir = out_dir(out, cfg);
    write_fit_outputs(&dir, &model, &panel, cfg)?;
    Ok(if model.report.converged {
        Outcome::Done
    } else {
        Outcome::NotConverged
    })
}

fn write_fit_outputs(
    dir: &Path,
    model: &hdgm_core::FittedModel,
    panel: &hdgm_core::ObservationPanel,
    cfg: &RunConfig,
) -> Result<()> {
    let mut data = cfg.data.clone();
    data.panel = None;
    io::save_artifact(&dir.join("fit.json"), &FitArtifact::new(model.clone(), data))?;
    io::write_coefficients_csv(&dir.join("coefficients.csv"), &model.report)?;
    io::write_sigma2_csv(&dir.join("sigma2.csv"), &model.dates, &model.params.sigma2_eps)?;
    let sp = apply_standardization(panel, &model.spec, &model.params.standardization)?;
    let fitted = fitted_values(
        &sp.design,
        &model.params.beta,
        model.params.alpha,
        &model.z_smooth,
        &model.params.standardization,
    );
    io::write_station_series_csv(&dir.join("fitted.csv"), &model.sites, &model.dates, &fitted)?;
    let summary = serde_json::json!({
        "iterations": model.report.iterations,
        "converged": model.report.converged,
        "criterion": model.report.criterion,
        "loglik": model.report.loglik_trace.last(),
        "rmse_in_sample": model.report.rmse_in_sample,
        "alpha": model.params.alpha,
        "g": model.params.g,
        "theta": model.params.theta,
        "loglik_trace": model.report.loglik_trace,
    });
    io::write_atomic(&dir.join("fit_report.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}
