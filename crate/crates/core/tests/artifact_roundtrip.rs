// SPDX-License-Identifier: Apache-2.0

use chrono::NaiveDate;
use hdgm_core::io::{load_artifact, save_artifact, DataConfig, FitArtifact};
use hdgm_core::sim::{simulate, simulate_grid, Layout, MissingMechanism, Skedastic, SimSpec, TrueParams};
use hdgm_core::{em_fit, predict_response, EmOptions, Interaction, ModelSpec, Season};

#[test]
fn saved_fit_reloads_bit_for_bit() {
    let spec = SimSpec {
        layout: Layout::Random {
            n: 7,
            lat: (44.5, 46.5),
            lon: (8.5, 11.5),
        },
        t_len: 120,
        params: TrueParams {
            beta: vec![0.5, 1.0, -0.4],
            alpha: 0.8,
            g: 0.6,
            theta: 0.9,
        },
        skedastic: Skedastic::Constant { value: 0.7 },
        missing: MissingMechanism::Blocks { gaps: 3, max_len: 6 },
        initial: Default::default(),
        seed: 31,
        start_date: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
    };
    let panel = simulate(&spec).unwrap().panel;
    let mut ms = ModelSpec::new(vec!["x1".into(), "x2".into()]);
    ms.interactions = vec![Interaction {
        base: "x2".into(),
        levels: vec![Season::Winter],
    }];
    let model = em_fit(&panel, &ms, &EmOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fit.json");
    save_artifact(&path, &FitArtifact::new(model.clone(), DataConfig::default())).unwrap();
    let back = load_artifact(&path).unwrap().model;

    assert_eq!(back.params, model.params);
    assert_eq!(back.spec, model.spec);
    assert_eq!(back.sites, model.sites);
    assert_eq!(back.dates, model.dates);
    assert_eq!(back.z_smooth, model.z_smooth);
    assert_eq!(back.report.beta_cov, model.report.beta_cov);
    assert_eq!(back.report.coefficients, model.report.coefficients);
    assert_eq!(back.report.loglik_trace, model.report.loglik_trace);

    let grid = simulate_grid((44.6, 46.4), (8.6, 11.4), 0.5, &["x1".into(), "x2".into()], panel.dates(), 8).unwrap();
    let a = predict_response(&model, &grid, None).unwrap();
    let b = predict_response(&back, &grid, None).unwrap();
    assert_eq!(a.y_hat, b.y_hat);
}
