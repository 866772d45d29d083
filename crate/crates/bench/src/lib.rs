// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by the benchmarks.

use chrono::NaiveDate;
use hdgm_core::sim::{simulate, Layout, Skedastic, SimOutput, SimSpec, TrueParams};

/// Simulated panel with two covariates and a seasonal variance profile.
pub fn panel(n: usize, t_len: usize, seed: u64) -> SimOutput {
    let spec = SimSpec {
        layout: Layout::Random {
            n,
            lat: (44.5, 46.5),
            lon: (8.5, 11.5),
        },
        t_len,
        params: TrueParams {
            beta: vec![1.0, -0.5, 0.3],
            alpha: 0.6,
            g: 0.8,
            theta: 1.5,
        },
        skedastic: Skedastic::Sinusoidal {
            min: 0.5,
            max: 1.5,
            period: 150.0,
        },
        missing: Default::default(),
        initial: Default::default(),
        seed,
        start_date: NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date"),
    };
    simulate(&spec).expect("valid simulation spec")
}

