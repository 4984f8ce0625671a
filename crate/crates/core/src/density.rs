//! Occupation-measure estimates of the stationary density and the
//! regularity diagnostics built on them.

use std::fmt::Write as _;
use std::ops::ControlFlow;

use serde::Serialize;
use thiserror::Error;

use crate::pdmp::{run_observed, BoundingBox, Observer, PdmpConfig, SimError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DensityError {
    #[error("grid needs at least 2 cells per axis, got {0}")]
    TooFewCells(usize),
    #[error("blow-up diagnostic needs at least 4 radii, got {0}")]
    TooFewRadii(usize),
    #[error("radii must be positive and strictly decreasing")]
    RadiiOrder,
    #[error("ball of radius {radius} around the center does not fit in the box")]
    BallOutsideBox { radius: f64 },
    #[error("only {hits} samples in the largest ball, need at least {needed}")]
    InsufficientSamples { hits: u64, needed: u64 },
    #[error("no occupation recorded in the ball of radius {radius}")]
    EmptyBall { radius: f64 },
    #[error("smoothness probe needs nested grids of increasing resolution")]
    NotNested,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Geometry of a per-state histogram: `cells_per_axis^d` cells per state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    bbox: BoundingBox,
    cells_per_axis: usize,
    n_states: usize,
}

impl GridSpec {
    pub fn new(bbox: BoundingBox, cells_per_axis: usize, n_states: usize) -> Result<Self, DensityError> {
        if cells_per_axis < 2 {
            return Err(DensityError::TooFewCells(cells_per_axis));
        }
        Ok(GridSpec {
            bbox,
            cells_per_axis,
            n_states,
        })
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn dim(&self) -> usize {
        self.bbox.dim()
    }

    pub fn cells_per_state(&self) -> usize {
        self.cells_per_axis.pow(self.dim() as u32)
    }

    pub fn len(&self) -> usize {
        self.cells_per_state() * self.n_states
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        self.bbox.extent(axis) / self.cells_per_axis as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.cell_width(k)).product()
    }

    #[inline]
    fn axis_index(&self, axis: usize, v: f64) -> usize {
        let lo = self.bbox.lower()[axis];
        let u = (v - lo) / self.bbox.extent(axis) * self.cells_per_axis as f64;
        (u.max(0.0) as usize).min(self.cells_per_axis - 1)
    }

    /// Flat index of the cell containing `x` in `state`; axis 0 varies slowest.
    #[inline]
    pub fn flat_index(&self, state: usize, x: &[f64]) -> usize {
        let mut idx = 0;
        for (axis, &v) in x.iter().enumerate() {
            idx = idx * self.cells_per_axis + self.axis_index(axis, v);
        }
        state * self.cells_per_state() + idx
    }

    /// `(state, per-axis cell indices)` of a flat index.
    pub fn unflatten(&self, flat: usize) -> (usize, Vec<usize>) {
        let per = self.cells_per_state();
        let state = flat / per;
        let mut rem = flat % per;
        let mut idx = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            idx[axis] = rem % self.cells_per_axis;
            rem /= self.cells_per_axis;
        }
        (state, idx)
    }

    pub fn cell_center(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(k, &i)| self.bbox.lower()[k] + (i as f64 + 0.5) * self.cell_width(k))
            .collect()
    }
}

/// Per-state histogram over the box. Raw values are recorded time; after
/// [`DensityGrid::normalize`] they are densities with respect to Lebesgue
/// times counting measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid {
    spec: GridSpec,
    values: Vec<f64>,
    total_weight: f64,
    normalized: bool,
}

impl DensityGrid {
    pub fn new(spec: GridSpec) -> Self {
        DensityGrid {
            values: vec![0.0; spec.len()],
            spec,
            total_weight: 0.0,
            normalized: false,
        }
    }

    /// Cell averages of `density(state, x)` by midpoint sub-sampling with
    /// `sub^d` points per cell, already normalized as given.
    pub fn from_fn(spec: GridSpec, sub: usize, density: impl Fn(usize, &[f64]) -> f64) -> Self {
        let d = spec.dim();
        let per = spec.cells_per_state();
        let mut values = vec![0.0; spec.len()];
        let n_sub = sub.pow(d as u32);
        let mut p = vec![0.0; d];
        for (flat, val) in values.iter_mut().enumerate() {
            let (state, idx) = spec.unflatten(flat);
            let mut acc = 0.0;
            for s in 0..n_sub {
                let mut rem = s;
                for k in (0..d).rev() {
                    let j = rem % sub;
                    rem /= sub;
                    let w = spec.cell_width(k);
                    p[k] = spec.bbox.lower()[k] + idx[k] as f64 * w + (j as f64 + 0.5) * w / sub as f64;
                }
                acc += density(state, &p);
            }
            *val = acc / n_sub as f64;
        }
        let _ = per;
        DensityGrid {
            spec,
            values,
            total_weight: 1.0,
            normalized: true,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn add(&mut self, state: usize, x: &[f64], weight: f64) {
        let i = self.spec.flat_index(state, x);
        self.values[i] += weight;
        self.total_weight += weight;
    }

    /// Elementwise sum of raw accumulations.
    pub fn merge(&mut self, other: &DensityGrid) {
        debug_assert_eq!(self.spec, other.spec);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.total_weight += other.total_weight;
    }

    /// Divides by total weight and cell volume so the grid integrates to 1.
    pub fn normalize(&mut self) {
        if self.normalized || self.total_weight <= 0.0 {
            return;
        }
        let scale = 1.0 / (self.total_weight * self.spec.cell_volume());
        self.values.iter_mut().for_each(|v| *v *= scale);
        self.normalized = true;
    }

    /// `sum over states and cells of value * cell volume`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.cell_volume()
    }

    /// Mass of each discrete state.
    pub fn state_marginal(&self) -> Vec<f64> {
        let vol = self.spec.cell_volume();
        let total = if self.normalized { 1.0 } else { self.total_weight };
        self.values
            .chunks_exact(self.spec.cells_per_state())
            .map(|c| c.iter().sum::<f64>() * vol / total * if self.normalized { 1.0 } else { 1.0 / vol })
            .collect()
    }

    pub fn state_values(&self, state: usize) -> &[f64] {
        let per = self.spec.cells_per_state();
        &self.values[state * per..(state + 1) * per]
    }

    /// Relative L1 distance `sum |a - b| / sum |a|` between normalized grids.
    pub fn relative_l1(&self, other: &DensityGrid) -> f64 {
        let num: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum();
        let den: f64 = self.values.iter().map(|a| a.abs()).sum();
        num / den
    }

    /// Total-variation distance between the cell masses of two grids.
    pub fn total_variation(&self, other: &DensityGrid) -> f64 {
        let ma = self.cell_masses();
        let mb = other.cell_masses();
        0.5 * ma.iter().zip(&mb).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Probability of each cell.
    pub fn cell_masses(&self) -> Vec<f64> {
        let total: f64 = self.values.iter().sum();
        self.values.iter().map(|v| v / total).collect()
    }

    /// CSV for one state: `#` metadata lines, then
    /// `cell_index_1,...,cell_index_d,value` rows.
    pub fn to_csv(&self, state: usize, metadata: &[(&str, String)]) -> String {
        let spec = &self.spec;
        let mut out = String::new();
        let bounds: Vec<String> = (0..spec.dim())
            .map(|k| format!("{}:{}", spec.bbox.lower()[k], spec.bbox.upper()[k]))
            .collect();
        let _ = writeln!(out, "# box={}", bounds.join(","));
        let _ = writeln!(out, "# cells={}", spec.cells_per_axis);
        let _ = writeln!(out, "# state={state}");
        let _ = writeln!(out, "# normalized={}", self.normalized);
        let _ = writeln!(out, "# total_time={}", self.total_weight);
        for (k, v) in metadata {
            let _ = writeln!(out, "# {k}={v}");
        }
        let per = spec.cells_per_state();
        for (local, v) in self.state_values(state).iter().enumerate() {
            let (_, idx) = spec.unflatten(state * per + local);
            for i in &idx {
                let _ = write!(out, "{i},");
            }
            let _ = writeln!(out, "{v}");
        }
        out
    }
}

/// Occupation mass in nested balls around `center` for one state,
/// accumulated from raw weighted samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialMass {
    center: Vec<f64>,
    state: usize,
    radii: Vec<f64>,
    radii_sq: Vec<f64>,
    mass: Vec<f64>,
    hits: Vec<u64>,
    total_weight: f64,
}

impl RadialMass {
    /// `radii` must be positive and strictly decreasing.
    pub fn new(center: Vec<f64>, state: usize, radii: Vec<f64>) -> Result<Self, DensityError> {
        if radii.len() < 4 {
            return Err(DensityError::TooFewRadii(radii.len()));
        }
        if radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) || radii.windows(2).any(|w| w[1] >= w[0]) {
            return Err(DensityError::RadiiOrder);
        }
        let n = radii.len();
        Ok(RadialMass {
            center,
            state,
            radii_sq: radii.iter().map(|r| r * r).collect(),
            radii,
            mass: vec![0.0; n],
            hits: vec![0; n],
            total_weight: 0.0,
        })
    }

    /// Requires every ball to lie inside `bbox`.
    pub fn check_inside(&self, bbox: &BoundingBox) -> Result<(), DensityError> {
        if self.center.len() != bbox.dim() {
            return Err(DensityError::Dimension(format!(
                "center has {} coordinates, box has {}",
                self.center.len(),
                bbox.dim()
            )));
        }
        let depth = bbox.depth(&self.center);
        match self.radii.first() {
            Some(&r) if r > depth => Err(DensityError::BallOutsideBox { radius: r }),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn add(&mut self, state: usize, x: &[f64], weight: f64) {
        self.total_weight += weight;
        if state != self.state {
            return;
        }
        let d2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        for k in 0..self.radii_sq.len() {
            if d2 > self.radii_sq[k] {
                break;
            }
            self.mass[k] += weight;
            self.hits[k] += 1;
        }
    }

    pub fn merge(&mut self, other: &RadialMass) {
        for k in 0..self.mass.len() {
            self.mass[k] += other.mass[k];
            self.hits[k] += other.hits[k];
        }
        self.total_weight += other.total_weight;
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn hits(&self) -> &[u64] {
        &self.hits
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }
}

/// Volume of the Euclidean ball of radius `r` in dimension `d`.
pub fn ball_volume(d: usize, r: f64) -> f64 {
    // V_0 = 1, V_1 = 2, V_d = V_{d-2} 2 pi / d.
    let even = d.is_multiple_of(2);
    let mut v = if even { 1.0 } else { 2.0 };
    let mut k = if even { 2 } else { 3 };
    while k <= d {
        v *= 2.0 * std::f64::consts::PI / k as f64;
        k += 2;
    }
    v * r.powi(d as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlowupVerdict {
    Diverging,
    Bounded,
    Inconclusive,
}

/// Fit of the mass ratio `m(r) = P(B_r x {i}) / Leb(B_r)` against `r`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlowupReport {
    pub center: Vec<f64>,
    pub state: usize,
    pub radii: Vec<f64>,
    pub mass_ratios: Vec<f64>,
    pub hits: Vec<u64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub verdict: BlowupVerdict,
}

pub const MIN_BALL_HITS: u64 = 1000;
pub const DIVERGING_SLOPE: f64 = -0.1;
pub const DIVERGING_R2: f64 = 0.8;
pub const BOUNDED_SLOPE: f64 = 0.05;

/// Least-squares slope of `log m(r)` on `log r` with the verdict rule:
/// diverging if `slope <= -0.1` and `R^2 >= 0.8`, bounded if
/// `|slope| <= 0.05`, otherwise inconclusive.
pub fn blowup_diagnostic(radial: &RadialMass) -> Result<BlowupReport, DensityError> {
    let hits = radial.hits[0];
    if hits < MIN_BALL_HITS {
        return Err(DensityError::InsufficientSamples {
            hits,
            needed: MIN_BALL_HITS,
        });
    }
    if let Some(k) = radial.mass.iter().position(|m| *m <= 0.0) {
        return Err(DensityError::EmptyBall {
            radius: radial.radii[k],
        });
    }
    let d = radial.center.len();
    let ratios: Vec<f64> = radial
        .mass
        .iter()
        .zip(&radial.radii)
        .map(|(m, r)| m / radial.total_weight / ball_volume(d, *r))
        .collect();
    let xs: Vec<f64> = radial.radii.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = ratios.iter().map(|m| m.ln()).collect();
    let (slope, intercept, r_squared) = least_squares(&xs, &ys);
    let verdict = if slope <= DIVERGING_SLOPE && r_squared >= DIVERGING_R2 {
        BlowupVerdict::Diverging
    } else if slope.abs() <= BOUNDED_SLOPE {
        BlowupVerdict::Bounded
    } else {
        BlowupVerdict::Inconclusive
    };
    Ok(BlowupReport {
        center: radial.center.clone(),
        state: radial.state,
        radii: radial.radii.clone(),
        mass_ratios: ratios,
        hits: radial.hits.clone(),
        slope,
        intercept,
        r_squared,
        verdict,
    })
}

/// Ordinary least squares `y = a x + b`; returns `(a, b, R^2)`.
fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, intercept, r2)
}

/// Sup-norm and discrete-gradient stability of a density across nested
/// refinements, restricted to cells whose centers lie in a ball.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmoothnessReport {
    pub center: Vec<f64>,
    pub radius: f64,
    pub resolutions: Vec<usize>,
    pub sup: Vec<f64>,
    pub gradient_sup: Vec<f64>,
    pub sup_ratios: Vec<f64>,
    pub gradient_ratios: Vec<f64>,
    pub stable: bool,
}

pub const SMOOTHNESS_RATIO: f64 = 1.2;

fn ratio(fine: f64, coarse: f64) -> f64 {
    if coarse == 0.0 && fine == 0.0 {
        1.0
    } else {
        fine / coarse
    }
}

pub fn smoothness_probe(grids: &[&DensityGrid], center: &[f64], radius: f64) -> Result<SmoothnessReport, DensityError> {
    if grids.len() < 2 {
        return Err(DensityError::NotNested);
    }
    for w in grids.windows(2) {
        let (a, b) = (w[0].spec(), w[1].spec());
        if a.bbox() != b.bbox()
            || b.cells_per_axis() <= a.cells_per_axis()
            || b.cells_per_axis() % a.cells_per_axis() != 0
        {
            return Err(DensityError::NotNested);
        }
    }
    let mut sup = Vec::new();
    let mut gradient_sup = Vec::new();
    for g in grids {
        let (s, gr) = region_extrema(g, center, radius)?;
        sup.push(s);
        gradient_sup.push(gr);
    }
    let sup_ratios: Vec<f64> = sup.windows(2).map(|w| ratio(w[1], w[0])).collect();
    let gradient_ratios: Vec<f64> = gradient_sup.windows(2).map(|w| ratio(w[1], w[0])).collect();
    let stable = sup_ratios
        .iter()
        .chain(&gradient_ratios)
        .all(|r| *r <= SMOOTHNESS_RATIO);
    Ok(SmoothnessReport {
        center: center.to_vec(),
        radius,
        resolutions: grids.iter().map(|g| g.spec().cells_per_axis()).collect(),
        sup,
        gradient_sup,
        sup_ratios,
        gradient_ratios,
        stable,
    })
}

/// Largest normalized cell value and largest forward-difference gradient
/// magnitude among cells centered in the ball, over all states.
fn region_extrema(grid: &DensityGrid, center: &[f64], radius: f64) -> Result<(f64, f64), DensityError> {
    let spec = grid.spec();
    if center.len() != spec.dim() {
        return Err(DensityError::Dimension(format!(
            "region center has {} coordinates, grid has {}",
            center.len(),
            spec.dim()
        )));
    }
    let mut g = grid.clone();
    g.normalize();
    let d = spec.dim();
    let n = spec.cells_per_axis();
    let per = spec.cells_per_state();
    let inside = |idx: &[usize]| {
        let c = spec.cell_center(idx);
        c.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>() <= radius * radius
    };
    let mut sup = 0.0f64;
    let mut grad = 0.0f64;
    for flat in 0..spec.len() {
        let (state, idx) = spec.unflatten(flat);
        if !inside(&idx) {
            continue;
        }
        let v = g.values[flat];
        sup = sup.max(v);
        let mut g2 = 0.0;
        let mut stride = 1;
        for axis in (0..d).rev() {
            if idx[axis] + 1 < n {
                let mut nb = idx.clone();
                nb[axis] += 1;
                if inside(&nb) {
                    let diff = g.values[state * per + (flat % per) + stride] - v;
                    g2 += (diff / spec.cell_width(axis)).powi(2);
                }
            }
            stride *= n;
        }
        grad = grad.max(g2.sqrt());
    }
    Ok((sup, grad))
}

/// What to accumulate during one Monte Carlo pass.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationRequest {
    /// Cells per axis of each histogram to fill.
    pub grid_cells: Vec<usize>,
    pub radial: Vec<RadialMass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupationEstimate {
    /// Normalized histograms in the order requested.
    pub grids: Vec<DensityGrid>,
    pub radial: Vec<RadialMass>,
}

/// Adds the midpoint of every recorded RK step with weight equal to the
/// step duration.
struct OccupationObserver {
    record_from: f64,
    grids: Vec<DensityGrid>,
    radial: Vec<RadialMass>,
    mid: Vec<f64>,
}

impl Observer for OccupationObserver {
    #[inline]
    fn on_step(&mut self, t: f64, dt: f64, state: usize, from: &[f64], to: &[f64]) -> ControlFlow<()> {
        if t >= self.record_from {
            for (m, (a, b)) in self.mid.iter_mut().zip(from.iter().zip(to)) {
                *m = 0.5 * (a + b);
            }
            for g in &mut self.grids {
                g.add(state, &self.mid, dt);
            }
            for r in &mut self.radial {
                r.add(state, &self.mid, dt);
            }
        }
        ControlFlow::Continue(())
    }
}

/// Time-weighted occupation of `(X_t, I_t)` over `[burn_in, horizon]` for
/// `trajectories` independent paths, merged in index order.
pub fn estimate_occupation(
    cfg: &PdmpConfig,
    request: &OccupationRequest,
    trajectories: usize,
    workers: usize,
) -> Result<OccupationEstimate, DensityError> {
    cfg.validate()?;
    let record_from = cfg.recording_start()?;
    let specs = request
        .grid_cells
        .iter()
        .map(|&c| GridSpec::new(cfg.bbox.clone(), c, cfg.n_states()))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &request.radial {
        r.check_inside(&cfg.bbox)?;
    }
    let empty = OccupationObserver {
        record_from,
        grids: specs.into_iter().map(DensityGrid::new).collect(),
        radial: request.radial.clone(),
        mid: vec![0.0; cfg.dim()],
    };
    let merged = run_observed(
        cfg,
        trajectories,
        workers,
        |_| OccupationObserver {
            record_from,
            grids: empty.grids.clone(),
            radial: empty.radial.clone(),
            mid: vec![0.0; cfg.dim()],
        },
        Ok::<_, SimError>((empty.grids.clone(), empty.radial.clone())),
        |acc, index, res| {
            let (mut grids, mut radial) = acc?;
            let (obs, _) = res.map_err(|e| SimError::Trajectory {
                index,
                source: Box::new(e),
            })?;
            for (g, o) in grids.iter_mut().zip(&obs.grids) {
                g.merge(o);
            }
            for (r, o) in radial.iter_mut().zip(&obs.radial) {
                r.merge(o);
            }
            Ok((grids, radial))
        },
    )??;
    let (mut grids, radial) = merged;
    grids.iter_mut().for_each(DensityGrid::normalize);
    Ok(OccupationEstimate { grids, radial })
}

/// Normalized stationary-density histogram with `cells_per_axis^d` cells
/// per state.
pub fn estimate_density(
    cfg: &PdmpConfig,
    cells_per_axis: usize,
    trajectories: usize,
    workers: usize,
) -> Result<DensityGrid, DensityError> {
    let req = OccupationRequest {
        grid_cells: vec![cells_per_axis],
        radial: Vec::new(),
    };
    let mut est = estimate_occupation(cfg, &req, trajectories, workers)?;
    Ok(est.grids.remove(0))
}

/// Pools regeneration cycles into a normalized histogram:
/// total occupation divided by total cycle time.
pub fn pooled_regeneration_density(spec: &GridSpec, cycles: &[crate::pdmp::RegenerationCycle]) -> DensityGrid {
    let mut grid = DensityGrid::new(spec.clone());
    for c in cycles {
        for &(cell, w) in &c.occupation {
            grid.values[cell] += w;
        }
        grid.total_weight += c.duration;
    }
    grid.normalize();
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> BoundingBox {
        BoundingBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn flat_index_roundtrip() {
        let spec = GridSpec::new(unit_box(), 4, 2).unwrap();
        assert_eq!(spec.flat_index(0, &[-1.0, -1.0]), 0);
        assert_eq!(spec.flat_index(0, &[1.0, 1.0]), 15);
        assert_eq!(spec.flat_index(1, &[-0.9, 0.6]), 16 + 3);
        assert_eq!(spec.flat_index(0, &[0.6, -0.9]), 12);
        let (s, idx) = spec.unflatten(16 + 3);
        assert_eq!((s, idx), (1, vec![0, 3]));
        assert!(GridSpec::new(unit_box(), 1, 2).is_err());
    }

    #[test]
    fn normalization_and_marginal() {
        let spec = GridSpec::new(unit_box(), 8, 2).unwrap();
        let mut g = DensityGrid::new(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let s = usize::from(rng.random::<f64>() < 0.25);
            g.add(s, &x, rng.random_range(0.0..0.01));
        }
        let raw_marginal = g.state_marginal();
        g.normalize();
        assert!((g.integral() - 1.0).abs() < 1e-9);
        let m = g.state_marginal();
        assert!((m[0] + m[1] - 1.0).abs() < 1e-9);
        assert!((m[1] - raw_marginal[1]).abs() < 1e-12);
        assert!((m[1] - 0.25).abs() < 0.02);
    }

    #[test]
    fn ball_volumes() {
        assert!((ball_volume(1, 2.0) - 4.0).abs() < 1e-15);
        assert!((ball_volume(2, 1.0) - std::f64::consts::PI).abs() < 1e-15);
        assert!((ball_volume(3, 1.0) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn radial_mass_validation() {
        assert!(matches!(
            RadialMass::new(vec![0.0, 0.0], 0, vec![0.2, 0.1, 0.05]),
            Err(DensityError::TooFewRadii(3))
        ));
        assert!(matches!(
            RadialMass::new(vec![0.0, 0.0], 0, vec![0.2, 0.1, 0.1, 0.05]),
            Err(DensityError::RadiiOrder)
        ));
        let r = RadialMass::new(vec![0.9, 0.0], 0, vec![0.2, 0.1, 0.05, 0.025]).unwrap();
        assert!(matches!(
            r.check_inside(&unit_box()),
            Err(DensityError::BallOutsideBox { .. })
        ));
    }

    fn radii() -> Vec<f64> {
        vec![0.2, 0.1, 0.05, 0.025]
    }

    #[test]
    fn uniform_samples_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = RadialMass::new(vec![0.0, 0.0], 0, radii()).unwrap();
        for _ in 0..4_000_000 {
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            r.add(0, &x, 1.0);
        }
        let rep = blowup_diagnostic(&r).unwrap();
        assert_eq!(rep.verdict, BlowupVerdict::Bounded, "{rep:?}");
        assert!(rep.slope.abs() < 0.05);
    }

    #[test]
    fn inverse_sqrt_radial_law_diverges() {
        // Density proportional to |x|^{-1/2} on the unit disc: the radius has
        // CDF r^{3/2}, so r = U^{2/3}; m(r) then scales as r^{-1/2}.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = RadialMass::new(vec![0.0, 0.0], 1, radii()).unwrap();
        for _ in 0..4_000_000 {
            let rad = rng.random::<f64>().powf(2.0 / 3.0);
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            r.add(1, &[rad * th.cos(), rad * th.sin()], 1.0);
        }
        let rep = blowup_diagnostic(&r).unwrap();
        assert_eq!(rep.verdict, BlowupVerdict::Diverging, "{rep:?}");
        assert!((rep.slope + 0.5).abs() < 0.03, "{}", rep.slope);
        assert!(rep.r_squared > 0.99);
    }

    #[test]
    fn too_few_hits() {
        let mut r = RadialMass::new(vec![0.0, 0.0], 0, radii()).unwrap();
        for _ in 0..999 {
            r.add(0, &[0.0, 0.0], 1.0);
        }
        assert!(matches!(
            blowup_diagnostic(&r),
            Err(DensityError::InsufficientSamples { hits: 999, .. })
        ));
        let mut r = RadialMass::new(vec![0.0, 0.0], 0, radii()).unwrap();
        for _ in 0..2000 {
            r.add(0, &[0.15, 0.0], 1.0);
        }
        assert!(matches!(blowup_diagnostic(&r), Err(DensityError::EmptyBall { .. })));
    }

    fn grids_of(f: impl Fn(usize, &[f64]) -> f64 + Copy) -> Vec<DensityGrid> {
        [32, 64, 128]
            .iter()
            .map(|&c| DensityGrid::from_fn(GridSpec::new(unit_box(), c, 1).unwrap(), 4, f))
            .collect()
    }

    #[test]
    fn smoothness_of_uniform_density() {
        let grids = grids_of(|_, _| 0.25);
        let refs: Vec<&DensityGrid> = grids.iter().collect();
        let rep = smoothness_probe(&refs, &[0.0, 0.0], 0.5).unwrap();
        assert!(rep.stable, "{rep:?}");
        assert!(rep.sup_ratios.iter().all(|r| (r - 1.0).abs() < 1e-12));
    }

    #[test]
    fn smoothness_flags_inverse_sqrt_singularity() {
        let grids = grids_of(|_, x| (x[0] * x[0] + x[1] * x[1]).sqrt().powf(-0.5));
        let refs: Vec<&DensityGrid> = grids.iter().collect();
        let rep = smoothness_probe(&refs, &[0.0, 0.0], 0.5).unwrap();
        assert!(!rep.stable);
        for r in &rep.sup_ratios {
            assert!((r - 2f64.sqrt()).abs() < 0.02, "{rep:?}");
        }
    }

    #[test]
    fn smoothness_of_smooth_bump_is_stable() {
        let grids = grids_of(|_, x| (-(x[0] * x[0] + x[1] * x[1]) / 0.18).exp());
        let refs: Vec<&DensityGrid> = grids.iter().collect();
        let rep = smoothness_probe(&refs, &[0.0, 0.0], 0.5).unwrap();
        assert!(rep.stable, "{rep:?}");
    }

    #[test]
    fn smoothness_requires_nesting() {
        let a = DensityGrid::from_fn(GridSpec::new(unit_box(), 32, 1).unwrap(), 1, |_, _| 1.0);
        let b = DensityGrid::from_fn(GridSpec::new(unit_box(), 48, 1).unwrap(), 1, |_, _| 1.0);
        assert!(matches!(
            smoothness_probe(&[&a, &b], &[0.0, 0.0], 0.3),
            Err(DensityError::NotNested)
        ));
    }

    #[test]
    fn csv_layout() {
        let spec = GridSpec::new(unit_box(), 2, 2).unwrap();
        let mut g = DensityGrid::new(spec);
        g.add(1, &[0.5, -0.5], 2.0);
        g.normalize();
        let csv = g.to_csv(1, &[("seed", "7".into())]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# box=-1:1,-1:1");
        assert_eq!(lines[1], "# cells=2");
        assert_eq!(lines[2], "# state=1");
        assert!(lines.contains(&"# seed=7"));
        let rows: Vec<&str> = lines.iter().filter(|l| !l.starts_with('#')).copied().collect();
        assert_eq!(rows, vec!["0,0,0", "0,1,0", "1,0,1", "1,1,0"]);
    }
}
