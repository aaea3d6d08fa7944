//! Adaptive nearest-neighbor bandwidths and Gaussian kernel weights.
//!
//! Neighbor counts are in firm-year observations. Weights are computed per
//! unique site and expanded to observations on demand.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Location, PanelDataset};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// Second-order Gaussian.
    #[default]
    Gaussian,
}

impl KernelFamily {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => (-0.5 * u * u).exp() * INV_SQRT_2PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    /// Neighbor count in observations.
    pub h: usize,
    pub kernel: KernelFamily,
}

impl KernelSpec {
    pub fn gaussian(h: usize) -> Self {
        KernelSpec {
            h,
            kernel: KernelFamily::Gaussian,
        }
    }
}

/// Result of the order-statistic bandwidth search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub radius: f64,
    /// The h-th order statistic was zero and the radius was raised to the
    /// smallest positive distance.
    pub escalated: bool,
    /// Every observation sits at the target; weights are uniform.
    pub all_coincident: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub target: Location,
    pub bandwidth: Bandwidth,
    /// One weight per site, aligned with the site slice passed in.
    pub site_weights: Vec<f64>,
}

impl WeightVector {
    /// Expand to one weight per observation given each observation's site.
    pub fn per_observation(&self, site_of: impl IntoIterator<Item = usize>) -> Vec<f64> {
        site_of.into_iter().map(|s| self.site_weights[s]).collect()
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// The h-th smallest distance from `target` over all observations, where site
/// `j` hosts `counts[j]` observations.
pub fn adaptive_bandwidth(
    target: &Location,
    sites: &[Location],
    counts: &[usize],
    h: usize,
) -> Result<Bandwidth> {
    if sites.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            expected: sites.len(),
            found: counts.len(),
        });
    }
    let total: usize = counts.iter().sum();
    if h == 0 || h > total {
        return Err(Error::InvalidArgument(format!(
            "neighbor count h={h} outside 1..={total}"
        )));
    }
    let mut dist: Vec<(f64, usize)> = sites
        .iter()
        .zip(counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| distance(target.coords(), s.coords()).map(|d| (d, c)))
        .collect::<Result<_>>()?;
    dist.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut seen = 0;
    let mut order_stat = 0.0;
    for &(d, c) in &dist {
        seen += c;
        if seen >= h {
            order_stat = d;
            break;
        }
    }
    if order_stat > 0.0 {
        return Ok(Bandwidth {
            radius: order_stat,
            escalated: false,
            all_coincident: false,
        });
    }
    match dist.iter().find(|(d, _)| *d > 0.0) {
        Some(&(d, _)) => Ok(Bandwidth {
            radius: d,
            escalated: true,
            all_coincident: false,
        }),
        None => Ok(Bandwidth {
            radius: 0.0,
            escalated: true,
            all_coincident: true,
        }),
    }
}

/// Kernel weights at every site for the target location.
pub fn kernel_weights(
    target: &Location,
    sites: &[Location],
    counts: &[usize],
    spec: KernelSpec,
) -> Result<WeightVector> {
    let bandwidth = adaptive_bandwidth(target, sites, counts, spec.h)?;
    let site_weights = sites
        .iter()
        .map(|s| {
            if bandwidth.all_coincident {
                Ok(spec.kernel.eval(0.0))
            } else {
                distance(target.coords(), s.coords()).map(|d| spec.kernel.eval(d / bandwidth.radius))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightVector {
        target: target.clone(),
        bandwidth,
        site_weights,
    })
}

/// Observation-aligned kernel weights over a panel.
pub fn panel_kernel_weights(target: &Location, panel: &PanelDataset, spec: KernelSpec) -> Result<Vec<f64>> {
    let wv = kernel_weights(target, panel.sites(), &panel.site_counts(), spec)?;
    Ok(wv.per_observation(panel.observations().iter().map(|o| o.site)))
}
