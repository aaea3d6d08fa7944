use super::{fit_with_plans, EstimationResult, FitPlans, TechnologySpec};
use crate::error::Result;
use crate::panel::PanelDataset;

/// The same two-step pipeline with every observation weighted equally: one
/// global coefficient vector evaluated at the centroid of the sites.
pub fn estimate_invariant(panel: &PanelDataset, tech: &TechnologySpec) -> Result<EstimationResult> {
    tech.check(panel)?;
    let plans = FitPlans::uniform(panel)?;
    fit_with_plans(panel, tech, &plans, &panel.shares(), None)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::MicroDgp;
    use super::super::{full_fit, Bandwidths, TechnologyForm};
    use super::*;

    #[test]
    fn co_located_panel_matches_local_fit() {
        let (panel, _) = MicroDgp {
            co_located: true,
            sigma_eta: 0.08,
            sigma_zeta: 0.05,
            with_control: true,
            ..Default::default()
        }
        .generate(31);
        let tech = TechnologySpec::for_panel(TechnologyForm::CobbDouglas, &panel);
        let inv = estimate_invariant(&panel, &tech).unwrap();
        let loc = full_fit(&panel, Bandwidths { h1: 20, h2: 20 }, &tech).unwrap();
        assert!((inv.first.theta - loc.first.theta).abs() < 1e-10);
        assert!((inv.first.material[0][0] - loc.first.material[0][0]).abs() < 1e-10);
        let (a, b) = (
            inv.second.coefficients[0].as_ref().unwrap().to_solver(),
            loc.second.coefficients[0].as_ref().unwrap().to_solver(),
        );
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10, "{a:?} {b:?}");
        }
        for (x, y) in inv.productivity.omega.iter().zip(&loc.productivity.omega) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_noise_invariant_recovery() {
        let (panel, truth) = MicroDgp::default().generate(32);
        let tech = TechnologySpec::for_panel(TechnologyForm::CobbDouglas, &panel);
        let inv = estimate_invariant(&panel, &tech).unwrap();
        let c = inv.second.coefficients[0].as_ref().unwrap();
        assert!((inv.first.theta - 1.0).abs() < 1e-10);
        assert!((inv.first.material[0][0] - truth.beta_m[0]).abs() < 1e-6);
        assert!((c.tech[0] - truth.beta_k[0]).abs() < 1e-6);
        assert!((c.tech[1] - truth.beta_l[0]).abs() < 1e-6);
        assert!((c.rho0 - truth.rho0[0]).abs() < 1e-6);
        assert!((c.rho1 - truth.rho1).abs() < 1e-6);
    }
}
