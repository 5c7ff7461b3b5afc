use cevkmv_core::cev::{cev_default_probability, CevParams, GridSettings};
use cevkmv_core::estimation::{dd_entry, fit_fixed_effects};
use cevkmv_core::market_model::{distance_to_default, Group};
use cevkmv_core::mc::{
    simulate_default_prob, simulate_panel, simulate_raw_inputs, Dynamics, GroupSpec, SimSpec,
    StudySpec, VolLaw,
};
use cevkmv_core::normal;
use cevkmv_core::pipeline::default_point;
use cevkmv_core::stats_tests::z1_test;
use cevkmv_core::Quarter;

const PATHS: usize = 1_000_000;

#[test]
fn pde_matches_monte_carlo_at_beta_0_7() {
    let (v0, d, r, t) = (100.0, 80.0, 0.03, 1.0);
    let params = CevParams::from_local_vol(0.3, v0, 0.7).unwrap();
    let grid = GridSettings::default().grid_for(v0, d, r, t, params);
    let pde = cev_default_probability(v0, params, d, r, t, &grid).unwrap();
    let spec = SimSpec::new(
        Dynamics::Cev {
            delta: params.delta,
            beta: 0.7,
        },
        v0,
        r,
        t,
        PATHS,
        70,
    );
    let mc = simulate_default_prob(&spec, d).unwrap();
    let z = (pde - mc.estimate) / mc.std_error;
    assert!(
        z.abs() < 3.0,
        "pde {pde} mc {} ± {} (z {z:.2})",
        mc.estimate,
        mc.std_error
    );
}

#[test]
fn classical_distance_matches_gbm_frequency() {
    let (v0, s, d, r, t) = (150.0, 0.25, 80.0, 0.03, 1.0);
    let dd = distance_to_default(v0, s, d, r, t).unwrap();
    let spec = SimSpec::new(Dynamics::Gbm { sigma: s }, v0, r, t, PATHS, 150);
    let mc = simulate_default_prob(&spec, d).unwrap();
    let z = (normal::cdf(-dd) - mc.estimate) / mc.std_error;
    assert!(
        z.abs() < 3.0,
        "N(-dd) {} mc {} ± {}",
        normal::cdf(-dd),
        mc.estimate,
        mc.std_error
    );
}

#[test]
fn halving_the_euler_step_moves_the_estimate_within_noise() {
    let params = CevParams::from_local_vol(0.3, 100.0, 0.6).unwrap();
    let dynamics = Dynamics::Cev {
        delta: params.delta,
        beta: 0.6,
    };
    let coarse = SimSpec::new(dynamics, 100.0, 0.03, 1.0, PATHS, 600);
    let fine = SimSpec {
        steps: 2 * coarse.steps,
        seed: 601,
        ..coarse
    };
    let a = simulate_default_prob(&coarse, 80.0).unwrap();
    let b = simulate_default_prob(&fine, 80.0).unwrap();
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!((a.estimate - b.estimate).abs() < 2.0 * se, "{a:?} vs {b:?}");
}

#[test]
fn generator_is_independent_of_worker_count() {
    let spec = StudySpec::two_group(0.98, 1.14, (3, 3), 2);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_raw_inputs(&spec, 9).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn generator_lands_at_table_scale() {
    let inputs = simulate_raw_inputs(&StudySpec::two_group(0.98, 1.14, (60, 60), 4), 10).unwrap();
    let targets = [
        (Group::St, 3.819e9, 4.899e9),
        (Group::NonSt, 19.648e9, 28.404e9),
    ];
    for (group, equity, dp) in targets {
        let rows: Vec<_> = inputs
            .fundamentals
            .iter()
            .filter(|r| r.group == group)
            .collect();
        let n = rows.len() as f64;
        let mean_equity = rows.iter().map(|r| r.equity_value.unwrap()).sum::<f64>() / n;
        let mean_dp = rows
            .iter()
            .map(|r| default_point(r.std_debt.unwrap(), r.ltd_debt.unwrap()))
            .sum::<f64>()
            / n;
        assert!(
            (mean_equity / equity - 1.0).abs() < 0.35,
            "{group}: equity {mean_equity:e}"
        );
        assert!(
            (mean_dp / dp - 1.0).abs() < 0.35,
            "{group}: default point {mean_dp:e}"
        );
    }
}

#[test]
fn planted_groups_separate_under_z1() {
    let spec = |group, beta, median, vol, leverage| GroupSpec {
        group,
        beta,
        asset_median: median,
        asset_dispersion: 0.5,
        local_vol: vol,
        leverage,
        rate: 0.03,
        horizon: 1.0,
        vol_law: VolLaw::Local,
    };
    let specs = [
        spec(Group::St, 0.98, 8.55e9, (0.18, 0.24), (0.52, 0.62)),
        spec(Group::NonSt, 1.14, 47.2e9, (0.15, 0.19), (0.56, 0.64)),
    ];
    let grid = GridSettings {
        check_convergence: false,
        ..GridSettings::default()
    };
    let seeds = 20;
    let mut rejections = 0;
    for seed in 0..seeds {
        let panels = simulate_panel(
            &specs,
            60,
            4,
            Quarter::new(2019, 1).unwrap(),
            0.05,
            1000 + seed,
        )
        .unwrap();
        let last = *panels[0].quarters().last().unwrap();
        let samples: Vec<Vec<f64>> = panels
            .iter()
            .map(|p| {
                let fit = fit_fixed_effects(p).unwrap();
                p.entries()
                    .iter()
                    .filter(|e| e.quarter == last)
                    .map(|e| dd_entry(e, p.group(), &fit, &grid).unwrap().distance)
                    .filter(|d| d.is_finite() && *d > 0.0)
                    .collect()
            })
            .collect();
        let (_, p) = z1_test(&samples[0], &samples[1]).unwrap();
        if p < 0.05 {
            rejections += 1;
        }
    }
    eprintln!("z1 rejections: {rejections} of {seeds}");
    assert!(rejections * 10 >= seeds * 9, "{rejections} of {seeds}");
}
