//! Firm-level panel ingestion and the derived quantities every estimation
//! step consumes: log material shares, price ratios, unique locations and
//! lagged row pairs.
//!
//! Observations are kept in input order. Each distinct coordinate vector is
//! stored once as a *site*; observations refer to their site by index so that
//! kernel weights, which depend on location alone, are computed per site.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A location coordinate vector (radians for latitude/longitude data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location(pub Vec<f64>);

impl Location {
    pub fn new(coords: impl Into<Vec<f64>>) -> Self {
        Location(coords.into())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    fn key(&self) -> Vec<u64> {
        self.0.iter().map(|c| c.to_bits()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PanelObservation {
    /// Index into [`PanelDataset::firm_ids`].
    pub firm: usize,
    pub period: i64,
    pub y: f64,
    pub k: f64,
    /// Zero when the panel carries no labor input.
    pub l: f64,
    pub m: f64,
    /// Productivity controls `G`, possibly empty.
    pub controls: Vec<f64>,
    /// Index into [`PanelDataset::sites`].
    pub site: usize,
    /// Log nominal material share of revenue.
    pub v: f64,
    /// ln(P^M_t / P^Y_t) attached to this observation.
    pub price_ratio: f64,
}

/// One observation paired with the same firm's observation one period earlier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaggedRow {
    pub current: usize,
    pub lagged: usize,
}

/// Pre-validation record used to assemble a [`PanelDataset`]. All numeric
/// fields are already in logs.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub firm_id: String,
    pub period: i64,
    pub y: f64,
    pub k: f64,
    pub l: f64,
    pub m: f64,
    pub controls: Vec<f64>,
    pub coords: Vec<f64>,
    pub price_ratio: Option<f64>,
    pub v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    firm_ids: Vec<String>,
    observations: Vec<PanelObservation>,
    sites: Vec<Location>,
    site_members: Vec<Vec<usize>>,
    control_names: Vec<String>,
    has_labor: bool,
    price_series: BTreeMap<i64, f64>,
}

/// Log share identity: v = ln(P^M/P^Y) + m − y.
pub fn derive_share(m: f64, y: f64, price_ratio: f64) -> f64 {
    price_ratio + m - y
}

impl PanelDataset {
    /// Validate and assemble records. Shares are derived from the price ratio
    /// (default 0) unless supplied; a missing price ratio is implied from a
    /// supplied share.
    pub fn from_records(
        records: Vec<RawRecord>,
        control_names: Vec<String>,
        has_labor: bool,
    ) -> Result<Self> {
        let n_controls = control_names.len();
        let mut firm_index: HashMap<String, usize> = HashMap::new();
        let mut firm_ids = Vec::new();
        let mut firm_coords: Vec<Vec<u64>> = Vec::new();
        let mut site_index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut sites = Vec::new();
        let mut site_members: Vec<Vec<usize>> = Vec::new();
        let mut seen: HashMap<(usize, i64), usize> = HashMap::new();
        let mut observations = Vec::with_capacity(records.len());
        let mut coord_dim = None;

        for (row, rec) in records.into_iter().enumerate() {
            if rec.controls.len() != n_controls {
                return Err(Error::DimensionMismatch {
                    expected: n_controls,
                    found: rec.controls.len(),
                });
            }
            match coord_dim {
                None => coord_dim = Some(rec.coords.len()),
                Some(d) if d != rec.coords.len() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: rec.coords.len(),
                    })
                }
                _ => {}
            }
            let named = [("output", rec.y), ("capital", rec.k), ("labor", rec.l), ("materials", rec.m)];
            for (col, val) in named {
                if !val.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{col} for firm {}, period {} (row {})",
                        rec.firm_id,
                        rec.period,
                        row + 1
                    )));
                }
            }
            if rec.controls.iter().chain(rec.coords.iter()).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "control or coordinate for firm {}, period {}",
                    rec.firm_id, rec.period
                )));
            }

            let key = Location(rec.coords.clone()).key();
            let firm = match firm_index.get(&rec.firm_id) {
                Some(&f) => {
                    if firm_coords[f] != key {
                        return Err(Error::Integrity(format!(
                            "firm {} has time-varying coordinates",
                            rec.firm_id
                        )));
                    }
                    f
                }
                None => {
                    let f = firm_ids.len();
                    firm_index.insert(rec.firm_id.clone(), f);
                    firm_ids.push(rec.firm_id.clone());
                    firm_coords.push(key.clone());
                    f
                }
            };
            if seen.insert((firm, rec.period), row).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate observation for firm {}, period {}",
                    rec.firm_id, rec.period
                )));
            }
            let site = *site_index.entry(key).or_insert_with(|| {
                sites.push(Location(rec.coords.clone()));
                site_members.push(Vec::new());
                sites.len() - 1
            });
            site_members[site].push(observations.len());

            let (price_ratio, v) = match (rec.price_ratio, rec.v) {
                (Some(p), Some(v)) => (p, v),
                (Some(p), None) => (p, derive_share(rec.m, rec.y, p)),
                (None, Some(v)) => (v - rec.m + rec.y, v),
                (None, None) => (0.0, derive_share(rec.m, rec.y, 0.0)),
            };
            if !price_ratio.is_finite() || !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "share for firm {}, period {}",
                    rec.firm_id, rec.period
                )));
            }
            observations.push(PanelObservation {
                firm,
                period: rec.period,
                y: rec.y,
                k: rec.k,
                l: if has_labor { rec.l } else { 0.0 },
                m: rec.m,
                controls: rec.controls,
                site,
                v,
                price_ratio,
            });
        }

        let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
        for o in &observations {
            let e = sums.entry(o.period).or_insert((0.0, 0));
            e.0 += o.price_ratio;
            e.1 += 1;
        }
        let price_series = sums.into_iter().map(|(t, (s, c))| (t, s / c as f64)).collect();

        Ok(PanelDataset {
            firm_ids,
            observations,
            sites,
            site_members,
            control_names,
            has_labor,
            price_series,
        })
    }

    pub fn observations(&self) -> &[PanelObservation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn firm_ids(&self) -> &[String] {
        &self.firm_ids
    }

    pub fn n_firms(&self) -> usize {
        self.firm_ids.len()
    }

    /// Unique locations in order of first appearance.
    pub fn sites(&self) -> &[Location] {
        &self.sites
    }

    /// Observation indices at each site; partitions the observation set.
    pub fn site_members(&self) -> &[Vec<usize>] {
        &self.site_members
    }

    pub fn site_counts(&self) -> Vec<usize> {
        self.site_members.iter().map(Vec::len).collect()
    }

    pub fn control_names(&self) -> &[String] {
        &self.control_names
    }

    pub fn control_dimension(&self) -> usize {
        self.control_names.len()
    }

    pub fn has_labor(&self) -> bool {
        self.has_labor
    }

    /// Per-period mean of ln(P^M/P^Y).
    pub fn price_series(&self) -> &BTreeMap<i64, f64> {
        &self.price_series
    }

    pub fn period_range(&self) -> Option<(i64, i64)> {
        let min = self.observations.iter().map(|o| o.period).min()?;
        let max = self.observations.iter().map(|o| o.period).max()?;
        Some((min, max))
    }

    pub fn shares(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.v).collect()
    }

    /// One row per observation whose firm is also observed one period earlier.
    pub fn build_lagged_rows(&self) -> Vec<LaggedRow> {
        let index: HashMap<(usize, i64), usize> = self
            .observations
            .iter()
            .enumerate()
            .map(|(i, o)| ((o.firm, o.period), i))
            .collect();
        let rows: Vec<LaggedRow> = self
            .observations
            .iter()
            .enumerate()
            .filter_map(|(i, o)| {
                index
                    .get(&(o.firm, o.period - 1))
                    .map(|&j| LaggedRow { current: i, lagged: j })
            })
            .collect();
        if rows.is_empty() {
            warn!("panel has no lagged rows; second step cannot be estimated");
        }
        rows
    }

    /// A copy restricted to the given observation indices (order preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = indices
            .iter()
            .map(|&i| {
                let o = &self.observations[i];
                RawRecord {
                    firm_id: self.firm_ids[o.firm].clone(),
                    period: o.period,
                    y: o.y,
                    k: o.k,
                    l: o.l,
                    m: o.m,
                    controls: o.controls.clone(),
                    coords: self.sites[o.site].0.clone(),
                    price_ratio: Some(o.price_ratio),
                    v: Some(o.v),
                }
            })
            .collect();
        Self::from_records(records, self.control_names.clone(), self.has_labor)
    }

    pub fn metadata(&self) -> PanelMetadata {
        let (period_min, period_max) = self.period_range().unwrap_or((0, 0));
        PanelMetadata {
            n_observations: self.len(),
            n_firms: self.n_firms(),
            n_locations: self.sites.len(),
            n_lagged_rows: self.build_lagged_rows().len(),
            period_min,
            period_max,
            controls: self.control_names.clone(),
            has_labor: self.has_labor,
        }
    }

    /// Canonical CSV mirror: logged values plus `price_ratio` and `log_share`.
    pub fn write_canonical<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let schema = ColumnSchema::canonical(self);
        let mut header: Vec<String> = vec![
            schema.firm_id.clone(),
            schema.period.clone(),
            schema.output.clone(),
            schema.capital.clone(),
        ];
        if self.has_labor {
            header.push("labor".into());
        }
        header.extend([
            schema.materials.clone(),
            schema.latitude.clone(),
            schema.longitude.clone(),
        ]);
        header.extend(self.control_names.iter().cloned());
        header.extend(["price_ratio".to_string(), "log_share".to_string()]);
        w.write_record(&header)?;
        for o in &self.observations {
            let c = &self.sites[o.site].0;
            let lat = c.first().copied().unwrap_or(0.0);
            let lon = c.get(1).copied().unwrap_or(0.0);
            let mut rec = vec![self.firm_ids[o.firm].clone(), o.period.to_string()];
            rec.push(o.y.to_string());
            rec.push(o.k.to_string());
            if self.has_labor {
                rec.push(o.l.to_string());
            }
            rec.push(o.m.to_string());
            rec.push(lat.to_string());
            rec.push(lon.to_string());
            rec.extend(o.controls.iter().map(f64::to_string));
            rec.push(o.price_ratio.to_string());
            rec.push(o.v.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelMetadata {
    pub n_observations: usize,
    pub n_firms: usize,
    pub n_locations: usize,
    pub n_lagged_rows: usize,
    pub period_min: i64,
    pub period_max: i64,
    pub controls: Vec<String>,
    pub has_labor: bool,
}

/// Maps canonical names to source column names.
///
/// Optional columns left as `None` are picked up under their canonical name
/// when the header carries them. Nominal cost, revenue and price indices are
/// always read as levels and logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnSchema {
    pub firm_id: String,
    pub period: String,
    pub output: String,
    pub capital: String,
    pub labor: String,
    /// Panel has no labor input; the labor column is neither required nor read.
    pub no_labor: bool,
    pub materials: String,
    pub latitude: String,
    pub longitude: String,
    pub controls: Vec<String>,
    pub materials_cost: Option<String>,
    pub revenue: Option<String>,
    pub price_materials: Option<String>,
    pub price_output: Option<String>,
    /// Log price ratio ln(P^M/P^Y), already logged.
    pub price_ratio: Option<String>,
    /// Log material share, already logged.
    pub log_share: Option<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            firm_id: "firm_id".into(),
            period: "period".into(),
            output: "output".into(),
            capital: "capital".into(),
            labor: "labor".into(),
            no_labor: false,
            materials: "materials".into(),
            latitude: "latitude".into(),
            longitude: "longitude".into(),
            controls: Vec::new(),
            materials_cost: None,
            revenue: None,
            price_materials: None,
            price_output: None,
            price_ratio: None,
            log_share: None,
        }
    }
}

impl ColumnSchema {
    /// Schema that reads back a file produced by [`PanelDataset::write_canonical`].
    pub fn canonical(panel: &PanelDataset) -> Self {
        ColumnSchema {
            no_labor: !panel.has_labor(),
            controls: panel.control_names().to_vec(),
            price_ratio: Some("price_ratio".into()),
            log_share: Some("log_share".into()),
            ..Default::default()
        }
    }
}

struct ColumnIndex {
    firm_id: usize,
    period: usize,
    output: usize,
    capital: usize,
    labor: Option<usize>,
    materials: usize,
    latitude: usize,
    longitude: usize,
    controls: Vec<usize>,
    cost_revenue: Option<(usize, usize)>,
    prices: Option<(usize, usize)>,
    price_ratio: Option<usize>,
    log_share: Option<usize>,
}

fn resolve_columns(header: &csv::StringRecord, schema: &ColumnSchema) -> Result<ColumnIndex> {
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let required = |name: &str| find(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    // Explicitly configured optional columns must exist; defaulted ones are
    // used only when present under the canonical name.
    let optional = |configured: &Option<String>, canonical: &str| -> Result<Option<usize>> {
        match configured {
            Some(name) => required(name).map(Some),
            None => Ok(find(canonical)),
        }
    };
    let cost = optional(&schema.materials_cost, "materials_cost")?;
    let revenue = optional(&schema.revenue, "revenue")?;
    let pm = optional(&schema.price_materials, "price_materials")?;
    let py = optional(&schema.price_output, "price_output")?;
    let pair = |a: Option<usize>, b: Option<usize>, what: &str| -> Result<Option<(usize, usize)>> {
        match (a, b) {
            (Some(a), Some(b)) => Ok(Some((a, b))),
            (None, None) => Ok(None),
            _ => Err(Error::InvalidArgument(format!("{what} columns must be supplied together"))),
        }
    };
    Ok(ColumnIndex {
        firm_id: required(&schema.firm_id)?,
        period: required(&schema.period)?,
        output: required(&schema.output)?,
        capital: required(&schema.capital)?,
        labor: if schema.no_labor { None } else { Some(required(&schema.labor)?) },
        materials: required(&schema.materials)?,
        latitude: required(&schema.latitude)?,
        longitude: required(&schema.longitude)?,
        controls: schema.controls.iter().map(|c| required(c)).collect::<Result<_>>()?,
        cost_revenue: pair(cost, revenue, "materials_cost/revenue")?,
        prices: pair(pm, py, "price_materials/price_output")?,
        price_ratio: optional(&schema.price_ratio, "price_ratio")?,
        log_share: optional(&schema.log_share, "log_share")?,
    })
}

/// Read a delimiter-separated panel with a header row.
///
/// With `log_transform` set, output and input columns are levels and are
/// logged. Share precedence: explicit `log_share`, then nominal cost over
/// revenue, then price ratio (explicit column or price indices) plus m − y,
/// then a zero price ratio.
pub fn load_panel<R: Read>(
    source: R,
    schema: &ColumnSchema,
    log_transform: bool,
    delimiter: u8,
) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = reader.headers()?.clone();
    let cols = resolve_columns(&header, schema)?;

    let mut records = Vec::new();
    for (i, result) in reader.records().enumerate() {
        let row = i + 1;
        let rec = result.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let field = |idx: usize| -> Result<&str> {
            rec.get(idx).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing field {}", idx + 1),
            })
        };
        let number = |idx: usize| -> Result<f64> {
            let raw = field(idx)?;
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("column `{}`: cannot parse `{raw}` as a number", &header[idx]),
            })
        };
        let firm_id = field(cols.firm_id)?.to_string();
        let period_raw = field(cols.period)?;
        let period = period_raw.parse::<i64>().map_err(|_| Error::Parse {
            row,
            message: format!("period `{period_raw}` is not an integer"),
        })?;
        let level = |idx: usize, force_log: bool| -> Result<f64> {
            let x = number(idx)?;
            if log_transform || force_log {
                if x <= 0.0 {
                    return Err(Error::Domain {
                        firm: firm_id.clone(),
                        period,
                        column: header[idx].to_string(),
                        value: x,
                    });
                }
                Ok(x.ln())
            } else {
                Ok(x)
            }
        };
        let y = level(cols.output, false)?;
        let k = level(cols.capital, false)?;
        let l = match cols.labor {
            Some(idx) => level(idx, false)?,
            None => 0.0,
        };
        let m = level(cols.materials, false)?;
        let controls = cols.controls.iter().map(|&c| number(c)).collect::<Result<Vec<_>>>()?;
        let coords = vec![number(cols.latitude)?, number(cols.longitude)?];

        let mut price_ratio = match cols.price_ratio {
            Some(idx) => Some(number(idx)?),
            None => None,
        };
        if price_ratio.is_none() {
            if let Some((pm, py)) = cols.prices {
                price_ratio = Some(level(pm, true)? - level(py, true)?);
            }
        }
        let v = if let Some(idx) = cols.log_share {
            Some(number(idx)?)
        } else if let Some((cost, rev)) = cols.cost_revenue {
            Some(level(cost, true)? - level(rev, true)?)
        } else {
            None
        };
        records.push(RawRecord {
            firm_id,
            period,
            y,
            k,
            l,
            m,
            controls,
            coords,
            price_ratio,
            v,
        });
    }
    PanelDataset::from_records(records, schema.controls.clone(), !schema.no_labor)
}
