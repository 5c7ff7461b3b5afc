//! Benchmark fixtures shared by the bench targets.

use cevkmv_core::estimation::AssetPanel;
use cevkmv_core::market_model::Group;
use cevkmv_core::mc::{simulate_panel, GroupSpec, VolLaw};
use cevkmv_core::Quarter;

/// Noiseless panel at ST magnitudes, observed through `law`.
pub fn st_panel(firms: usize, quarters: usize, law: VolLaw) -> AssetPanel {
    let spec = GroupSpec {
        group: Group::St,
        beta: 0.98,
        asset_median: 8.55e9,
        asset_dispersion: 0.5,
        local_vol: (0.18, 0.24),
        leverage: (0.52, 0.62),
        rate: 0.03,
        horizon: 1.0,
        vol_law: law,
    };
    let start = Quarter::new(2019, 1).expect("valid quarter");
    simulate_panel(&[spec], firms, quarters, start, 0.0, 1)
        .expect("valid spec")
        .remove(0)
}
