use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::step1::ShareModel;
use super::step2::{fit_target, second_step_rows, site_systems, SecondStepCoefficients};
use super::{lagged_site_counts, step1, TechnologyForm, TechnologySpec};
use crate::error::{Error, Result};
use crate::kernel::{kernel_weights, KernelSpec};
use crate::panel::PanelDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvStep {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub step: CvStep,
    /// Candidates in ascending order.
    pub grid: Vec<usize>,
    /// Total squared prediction error per candidate; `None` when no
    /// location could be evaluated.
    pub scores: Vec<Option<f64>>,
    /// Held-out locations skipped per candidate.
    pub skipped: Vec<usize>,
    pub chosen: usize,
}

/// Leave-one-location-out weights at site `s` for neighbor count `h`.
fn held_out_weights(panel: &PanelDataset, counts: &[usize], s: usize, h: usize) -> Option<Vec<f64>> {
    let mut c = counts.to_vec();
    c[s] = 0;
    if h > c.iter().sum::<usize>() {
        return None;
    }
    let mut w = kernel_weights(&panel.sites()[s], panel.sites(), &c, KernelSpec::gaussian(h))
        .ok()?
        .site_weights;
    w[s] = 0.0;
    Some(w)
}

/// Leave-one-location-out cross-validation of the neighbor count. The
/// second step needs the first-step bandwidth `h1`, at which the first step
/// is frozen.
pub fn cross_validate(
    panel: &PanelDataset,
    step: CvStep,
    grid: &[usize],
    tech: &TechnologySpec,
    h1: Option<usize>,
) -> Result<CvResult> {
    tech.check(panel)?;
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid[0] == 0 {
        return Err(Error::InvalidArgument("bandwidth grid must hold positive values".into()));
    }
    if panel.sites().len() < 2 {
        return Err(Error::InvalidArgument("cross-validation needs at least two locations".into()));
    }
    let per_candidate: Vec<(Option<f64>, usize)> = match step {
        CvStep::First => {
            let counts = panel.site_counts();
            let shares = panel.shares();
            let model = ShareModel::new(panel, &shares, tech);
            let mut site_sums = vec![0.0; counts.len()];
            for o in panel.observations() {
                site_sums[o.site] += o.v;
            }
            grid.iter()
                .map(|&h| {
                    let errs: Vec<Option<f64>> = (0..counts.len())
                        .into_par_iter()
                        .map(|s| {
                            let w = held_out_weights(panel, &counts, s, h)?;
                            let members = &panel.site_members()[s];
                            match tech.form {
                                TechnologyForm::CobbDouglas => {
                                    let num: f64 = w.iter().zip(&site_sums).map(|(w, x)| w * x).sum();
                                    let den: f64 = w.iter().zip(&counts).map(|(w, &c)| w * c as f64).sum();
                                    if den <= 0.0 {
                                        return None;
                                    }
                                    let pred = num / den;
                                    Some(members.iter().map(|&i| (shares[i] - pred).powi(2)).sum())
                                }
                                TechnologyForm::Translog => {
                                    let obs_w: Vec<f64> =
                                        panel.observations().iter().map(|o| w[o.site]).collect();
                                    let c = model.fit(&obs_w).ok()?;
                                    let e: f64 = members
                                        .iter()
                                        .map(|&i| (shares[i] - model.predict(&c, i)).powi(2))
                                        .sum();
                                    e.is_finite().then_some(e)
                                }
                            }
                        })
                        .collect();
                    summarize(h, &errs)
                })
                .collect()
        }
        CvStep::Second => {
            let h1 = h1.ok_or_else(|| Error::InvalidArgument("second-step CV needs h1".into()))?;
            let first = step1(panel, h1, tech)?;
            let lagged = panel.build_lagged_rows();
            if lagged.is_empty() {
                return Err(Error::InvalidArgument("panel has no lagged rows".into()));
            }
            let rows = second_step_rows(panel, tech, &first, &lagged)?;
            let (systems, row_site) = site_systems(panel, &rows, &lagged)?;
            let counts = lagged_site_counts(panel, &lagged);
            let mut members = vec![Vec::new(); counts.len()];
            for (i, &s) in row_site.iter().enumerate() {
                members[s].push(i);
            }
            let polish = match tech.form {
                TechnologyForm::CobbDouglas => None,
                TechnologyForm::Translog => Some((&rows, row_site.as_slice())),
            };
            grid.iter()
                .map(|&h| {
                    let errs: Vec<Option<f64>> = (0..counts.len())
                        .into_par_iter()
                        .map(|s| {
                            if members[s].is_empty() {
                                return Some(0.0);
                            }
                            let w = held_out_weights(panel, &counts, s, h)?;
                            let rep = fit_target(&systems, &w, polish).ok()?;
                            let theta = SecondStepCoefficients::from_solver(&rep.estimate, tech.n_tech()).to_solver();
                            let e: f64 = members[s].iter().map(|&i| rows.residual(&theta, i).powi(2)).sum();
                            e.is_finite().then_some(e)
                        })
                        .collect();
                    summarize(h, &errs)
                })
                .collect()
        }
    };
    let (scores, skipped): (Vec<Option<f64>>, Vec<usize>) = per_candidate.into_iter().unzip();
    let chosen = argmin_first(&grid, &scores)
        .ok_or_else(|| Error::Estimation("no bandwidth candidate could be evaluated".into()))?;
    Ok(CvResult {
        step,
        grid,
        scores,
        skipped,
        chosen,
    })
}

/// Smallest score; the earliest (smallest) candidate wins ties.
fn argmin_first(grid: &[usize], scores: &[Option<f64>]) -> Option<usize> {
    let mut chosen: Option<(usize, f64)> = None;
    for (h, s) in grid.iter().zip(scores) {
        if let Some(s) = s {
            if chosen.is_none_or(|(_, best)| *s < best) {
                chosen = Some((*h, *s));
            }
        }
    }
    chosen.map(|(h, _)| h)
}

fn summarize(h: usize, errs: &[Option<f64>]) -> (Option<f64>, usize) {
    let skipped = errs.iter().filter(|e| e.is_none()).count();
    if skipped > 0 {
        warn!("h={h}: {skipped} held-out location(s) skipped");
    }
    if skipped == errs.len() {
        (None, skipped)
    } else {
        (Some(errs.iter().flatten().sum()), skipped)
    }
}
