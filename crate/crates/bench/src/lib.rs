//! Shared fixtures for the criterion benches.

use locprod::estimator::{Bandwidths, TechnologySpec};
use locprod::simulator::{generate_panel, SimConfig};
use locprod::PanelDataset;

pub use locprod;

/// A synthetic panel of `n` firms over ten periods with its shortcut
/// bandwidths and technology.
pub fn synthetic(n: usize) -> (PanelDataset, Bandwidths, TechnologySpec) {
    let cfg = SimConfig {
        n_firms: n,
        seed: 17,
        ..Default::default()
    };
    let (panel, _) = generate_panel(&cfg).expect("valid simulation config");
    (panel, cfg.shortcut_bandwidths(), cfg.technology())
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixture_has_expected_shape() {
        let (panel, bw, _) = super::synthetic(50);
        assert_eq!(panel.n_firms(), 50);
        assert_eq!(bw.h1, bw.h2);
    }
}
