use cevkmv_core::cev::GridSettings;
use cevkmv_core::estimation::{
    dd_panel, fit_equivalent_vol, fit_fixed_effects, AssetPanel, CalibrationSettings, PanelEntry,
};
use cevkmv_core::market_model::Group;
use cevkmv_core::mc::{simulate_panel, GroupSpec, VolLaw};
use cevkmv_core::Quarter;

fn start() -> Quarter {
    Quarter::new(2019, 1).unwrap()
}

fn group_spec(group: Group, beta: f64, law: VolLaw) -> GroupSpec {
    let (median, vol, leverage) = match group {
        Group::St => (8.55e9, (0.18, 0.24), (0.52, 0.62)),
        Group::NonSt => (47.2e9, (0.15, 0.19), (0.56, 0.64)),
    };
    GroupSpec {
        group,
        beta,
        asset_median: median,
        asset_dispersion: 0.5,
        local_vol: vol,
        leverage,
        rate: 0.03,
        horizon: 1.0,
        vol_law: law,
    }
}

/// Least squares with one dummy per firm and a common slope, solved through
/// the full normal equations by Gaussian elimination.
#[allow(clippy::needless_range_loop)]
fn dummy_variable_fit(panel: &AssetPanel) -> (f64, Vec<f64>) {
    let firms = panel.firms();
    let k = firms.len() + 1;
    let mut a = vec![vec![0.0; k + 1]; k];
    for e in panel.entries() {
        let i = firms.iter().position(|f| *f == e.firm_id).unwrap();
        let mut row = vec![0.0; k];
        row[i] = 1.0;
        row[k - 1] = e.asset_value.ln();
        let y = e.asset_vol.ln();
        for r in 0..k {
            for c in 0..k {
                a[r][c] += row[r] * row[c];
            }
            a[r][k] += row[r] * y;
        }
    }
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for r in 0..k {
            if r != col {
                let factor = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= factor * a[col][c];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..k).map(|r| a[r][k] / a[r][r]).collect();
    (1.0 + coef[k - 1], coef[..k - 1].to_vec())
}

#[test]
fn fixed_effects_matches_dummy_variable_regression() {
    let spec = group_spec(Group::St, 0.9, VolLaw::Local);
    let panel = &simulate_panel(&[spec], 7, 5, start(), 0.1, 21).unwrap()[0];
    let fit = fit_fixed_effects(panel).unwrap();
    let (beta, ln_deltas) = dummy_variable_fit(panel);
    assert!((fit.beta - beta).abs() < 1e-9, "{} vs {beta}", fit.beta);
    for (firm, ln_delta) in panel.firms().iter().zip(ln_deltas) {
        assert!((fit.deltas[*firm].ln() - ln_delta).abs() < 1e-8);
    }
}

#[test]
fn fixed_effects_recovers_planted_elasticity() {
    let spec = group_spec(Group::NonSt, 1.185, VolLaw::Local);
    let panel = &simulate_panel(&[spec], 186, 9, start(), 0.05, 3).unwrap()[0];
    let fit = fit_fixed_effects(panel).unwrap();
    assert!((fit.beta - 1.185).abs() < 0.02, "{}", fit.beta);
}

#[test]
fn equivalent_vol_recovers_planted_elasticity_at_st_scale() {
    let spec = group_spec(Group::St, 0.9841, VolLaw::Equivalent);
    let panel = &simulate_panel(&[spec], 186, 9, start(), 0.0, 4).unwrap()[0];
    let fit = fit_equivalent_vol(panel, &CalibrationSettings::default()).unwrap();
    assert!((fit.beta - 0.9841).abs() < 0.01, "{}", fit.beta);
}

#[test]
fn estimators_agree_without_model_risk_at_unit_beta() {
    let spec = group_spec(Group::St, 1.0, VolLaw::Local);
    let panel = &simulate_panel(&[spec], 50, 9, start(), 0.0, 5).unwrap()[0];
    let fe = fit_fixed_effects(panel).unwrap();
    let ev = fit_equivalent_vol(panel, &CalibrationSettings::default()).unwrap();
    assert!(
        (fe.beta - ev.beta).abs() < 1e-3,
        "{} vs {}",
        fe.beta,
        ev.beta
    );
}

#[test]
fn estimators_part_ways_away_from_unit_beta() {
    // Local-vol data: the expansion evaluates δ f^{β−1} at f = (F+K)/2, which
    // moves less than V, so the calibrated slope overshoots.
    for beta in [0.9, 1.14] {
        let spec = group_spec(Group::St, beta, VolLaw::Local);
        let panel = &simulate_panel(&[spec], 50, 9, start(), 0.0, 6).unwrap()[0];
        let fe = fit_fixed_effects(panel).unwrap();
        let ev = fit_equivalent_vol(panel, &CalibrationSettings::default()).unwrap();
        assert!((fe.beta - beta).abs() < 1e-9);
        let ratio = (ev.beta - 1.0) / (fe.beta - 1.0);
        assert!(ratio > 1.2 && ratio < 2.5, "beta {beta}: ratio {ratio}");
    }
}

#[test]
fn group_mean_distances_are_ordered() {
    let specs = [
        group_spec(Group::St, 0.98, VolLaw::Local),
        group_spec(Group::NonSt, 1.14, VolLaw::Local),
    ];
    let panels = simulate_panel(&specs, 40, 4, start(), 0.05, 8).unwrap();
    let settings = GridSettings {
        check_convergence: false,
        ..GridSettings::default()
    };
    let means: Vec<f64> = panels
        .iter()
        .map(|p| {
            let fit = fit_fixed_effects(p).unwrap();
            let dds = dd_panel(p, &fit, &settings).unwrap();
            dds.iter().map(|r| r.distance).sum::<f64>() / dds.len() as f64
        })
        .collect();
    assert!(means[0] < means[1], "{means:?}");
}

#[test]
fn thin_panels_are_rejected() {
    let entry = |firm: &str, q: Quarter| PanelEntry {
        firm_id: firm.into(),
        quarter: q,
        asset_value: 100.0,
        asset_vol: 0.2,
        default_point: 50.0,
        rate: 0.03,
        horizon: 1.0,
    };
    let q = start();
    assert!(AssetPanel::new(
        Group::St,
        vec![entry("A", q), entry("A", q.next()), entry("B", q)]
    )
    .is_err());
}
