//! Three-stage spatial-temporal fusion for reconstructing missing satellite
//! cells.
//!
//! For a gap at time t_j: (1) local linear temporal projection from a
//! reference time t_i where the cell was observed, with coefficients fit by
//! weighted Huber regression between the two days' ground observations;
//! (2) spatial enhancement over similarity-thresholded neighbor cells with
//! inverse-distance weights (distance = concentration similarity); (3)
//! multi-temporal combination across reference times weighted by inverse
//! temporal variance.

use crate::grid::{Field, FieldStack, GridError};
use rayon::prelude::*;
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("target cell ({0}, {1}) is not valid in the reference satellite field")]
    TargetInvalid(usize, usize),
    #[error("insufficient data: {got} pairs, need {need}")]
    InsufficientData { got: usize, need: usize },
    #[error("no estimate available")]
    NoEstimate,
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Thresholds and caps for the fusion algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// Spatial-similarity threshold on |S_i(x,y) - S_i(x_k,y_k)|.
    pub tau_spatial: f64,
    /// Consistency threshold on |S_i(x_k,y_k) - G_i(x_k,y_k)|.
    pub tau_consistency: f64,
    /// Neighbor cap N.
    pub max_neighbors: usize,
    /// Huber loss transition point.
    pub huber_delta: f64,
    /// Reference-time cap M.
    pub max_reference_times: usize,
    /// Minimum co-valid ground pairs for a regression or variance estimate.
    pub min_overlap: usize,
    /// Floor applied to similarity distances and variances before inversion.
    pub idw_epsilon: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            tau_spatial: 1.5,
            tau_consistency: 2.0,
            max_neighbors: 8,
            huber_delta: 1.0,
            max_reference_times: 5,
            min_overlap: 3,
            idw_epsilon: 1e-6,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.tau_spatial > 0.0 && self.tau_consistency > 0.0) {
            return Err(FusionError::Config("thresholds must be > 0".into()));
        }
        if !(self.huber_delta > 0.0 && self.idw_epsilon > 0.0) {
            return Err(FusionError::Config(
                "huber_delta and idw_epsilon must be > 0".into(),
            ));
        }
        if self.max_neighbors < 1 || self.max_reference_times < 1 {
            return Err(FusionError::Config(
                "neighbor and reference-time caps must be >= 1".into(),
            ));
        }
        if self.min_overlap < 2 {
            return Err(FusionError::Config("min_overlap must be >= 2".into()));
        }
        Ok(())
    }
}

/// Cells passing both similarity thresholds, with their concentration
/// distances and normalized inverse-distance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub cells: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Local temporal dynamics between two days: g_j ~ slope * g_i + intercept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalLinearCoeffs {
    pub slope: f64,
    pub intercept: f64,
    /// Set when the predictor was constant and the fit fell back to
    /// slope 0 / robust location of the response.
    pub degenerate: bool,
}

/// One reference time's projected estimate with its variance proxy and
/// (post-combination) normalized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEstimate {
    pub reference_time: i64,
    pub estimate: f64,
    pub variance: f64,
    pub weight: f64,
}

/// Per-run bookkeeping emitted by `gap_fill`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionReport {
    pub copied: usize,
    pub filled: usize,
    pub unfilled: usize,
    pub params: FusionParams,
}

impl FusionReport {
    /// Machine-readable `key = value` text block.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "copied = {}", self.copied);
        let _ = writeln!(s, "filled = {}", self.filled);
        let _ = writeln!(s, "unfilled = {}", self.unfilled);
        let _ = writeln!(s, "tau_spatial = {}", self.params.tau_spatial);
        let _ = writeln!(s, "tau_consistency = {}", self.params.tau_consistency);
        let _ = writeln!(s, "max_neighbors = {}", self.params.max_neighbors);
        let _ = writeln!(s, "huber_delta = {}", self.params.huber_delta);
        let _ = writeln!(
            s,
            "max_reference_times = {}",
            self.params.max_reference_times
        );
        let _ = writeln!(s, "min_overlap = {}", self.params.min_overlap);
        let _ = writeln!(s, "idw_epsilon = {}", self.params.idw_epsilon);
        s
    }
}

/// Neighbor selection on a reference day. A cell qualifies when it is valid
/// in both the satellite and ground fields, lies within `tau_spatial` of the
/// target's satellite value, and within `tau_consistency` of its own ground
/// observation. The target cell itself qualifies when ground-valid. When more
/// than N qualify, the N smallest distances win (ties by cell index).
pub fn find_similar_cells(
    satellite: &Field,
    ground: &Field,
    target: (usize, usize),
    params: &FusionParams,
) -> Result<NeighborSet, FusionError> {
    if satellite.spec() != ground.spec() {
        return Err(FusionError::Config(
            "satellite and ground fields must share a grid spec".into(),
        ));
    }
    let co_valid: Vec<(usize, usize)> = (0..satellite.rows())
        .flat_map(|r| (0..satellite.cols()).map(move |c| (r, c)))
        .filter(|&(r, c)| satellite.is_valid(r, c) && ground.is_valid(r, c))
        .collect();
    find_similar_in_candidates(satellite, ground, target, &co_valid, params)
}

/// Same selection rule over a precomputed co-valid candidate list; `gap_fill`
/// uses this to avoid rescanning the grid per target cell.
fn find_similar_in_candidates(
    satellite: &Field,
    ground: &Field,
    target: (usize, usize),
    candidates: &[(usize, usize)],
    params: &FusionParams,
) -> Result<NeighborSet, FusionError> {
    let (tr, tc) = target;
    let s_target = satellite
        .try_get(tr, tc)
        .ok_or(FusionError::TargetInvalid(tr, tc))?;

    let mut qualifying: Vec<(f64, usize, usize)> = Vec::new();
    for &(r, c) in candidates {
        let s = match satellite.try_get(r, c) {
            Some(v) => v,
            None => continue,
        };
        let g = match ground.try_get(r, c) {
            Some(v) => v,
            None => continue,
        };
        let d = (s_target - s).abs();
        if d < params.tau_spatial && (s - g).abs() < params.tau_consistency {
            qualifying.push((d, r, c));
        }
    }
    qualifying.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    qualifying.truncate(params.max_neighbors);

    let cells: Vec<(usize, usize)> = qualifying.iter().map(|&(_, r, c)| (r, c)).collect();
    let distances: Vec<f64> = qualifying.iter().map(|&(d, _, _)| d).collect();
    let inv: Vec<f64> = distances
        .iter()
        .map(|&d| 1.0 / d.max(params.idw_epsilon))
        .collect();
    let z: f64 = inv.iter().sum();
    let weights: Vec<f64> = inv.iter().map(|&v| v / z).collect();
    Ok(NeighborSet {
        cells,
        distances,
        weights,
    })
}

fn weighted_least_squares(x: &[f64], y: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let mut sw = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        sw += wi;
        sx += wi * xi;
        sy += wi * yi;
        sxx += wi * xi * xi;
        sxy += wi * xi * yi;
    }
    let det = sw * sxx - sx * sx;
    let scale = sw * sxx.abs() + sx * sx;
    if sw <= 0.0 || det.abs() <= 1e-14 * scale.max(1e-300) {
        return None;
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    (slope.is_finite() && intercept.is_finite()).then_some((slope, intercept))
}

/// Weighted Huber location: IRLS on the one-parameter model y ~ b.
fn weighted_huber_location(y: &[f64], w: &[f64], delta: f64) -> f64 {
    let sw: f64 = w.iter().sum();
    let mut b = y.iter().zip(w).map(|(&yi, &wi)| yi * wi).sum::<f64>() / sw;
    for _ in 0..50 {
        let mut su = 0.0;
        let mut suy = 0.0;
        for (&yi, &wi) in y.iter().zip(w) {
            let r = (yi - b).abs();
            let u = if r <= delta { wi } else { wi * delta / r };
            su += u;
            suy += u * yi;
        }
        let next = suy / su;
        let done = (next - b).abs() < 1e-10 * b.abs().max(1.0);
        b = next;
        if done {
            break;
        }
    }
    b
}

const IRLS_TOL: f64 = 1e-8;
const IRLS_MAX_ITER: usize = 50;

/// Fits g_j ~ slope * g_i + intercept minimizing the weighted Huber loss, by
/// iteratively reweighted least squares. A constant predictor degenerates to
/// slope 0 with the robust location of g_j as intercept.
pub fn fit_local_linear(
    g_i: &[f64],
    g_j: &[f64],
    weights: &[f64],
    delta: f64,
    min_overlap: usize,
) -> Result<LocalLinearCoeffs, FusionError> {
    if g_i.len() != g_j.len() || g_i.len() != weights.len() {
        return Err(FusionError::Config(format!(
            "pair/weight lengths differ: {} / {} / {}",
            g_i.len(),
            g_j.len(),
            weights.len()
        )));
    }
    if g_i.len() < min_overlap {
        return Err(FusionError::InsufficientData {
            got: g_i.len(),
            need: min_overlap,
        });
    }
    if weights.iter().any(|&w| w.is_nan() || w < 0.0) || weights.iter().all(|&w| w == 0.0) {
        return Err(FusionError::Config(
            "weights must be non-negative and not all zero".into(),
        ));
    }

    // constant predictor: no slope is identifiable
    let sw: f64 = weights.iter().sum();
    let mean_x = g_i.iter().zip(weights).map(|(&x, &w)| x * w).sum::<f64>() / sw;
    let var_x = g_i
        .iter()
        .zip(weights)
        .map(|(&x, &w)| w * (x - mean_x) * (x - mean_x))
        .sum::<f64>()
        / sw;
    let x_scale = g_i.iter().fold(1.0f64, |m, &x| m.max(x.abs()));
    if var_x <= 1e-12 * x_scale * x_scale {
        return Ok(LocalLinearCoeffs {
            slope: 0.0,
            intercept: weighted_huber_location(g_j, weights, delta),
            degenerate: true,
        });
    }

    let (mut slope, mut intercept) = weighted_least_squares(g_i, g_j, weights).ok_or(
        FusionError::Config("degenerate initial least squares".into()),
    )?;
    let mut u = vec![0.0; g_i.len()];
    for _ in 0..IRLS_MAX_ITER {
        for ((ui, (&xi, &yi)), &wi) in u.iter_mut().zip(g_i.iter().zip(g_j)).zip(weights) {
            let r = (yi - slope * xi - intercept).abs();
            *ui = if r <= delta { wi } else { wi * delta / r };
        }
        let (next_slope, next_intercept) = match weighted_least_squares(g_i, g_j, &u) {
            Some(v) => v,
            None => break,
        };
        let change = (next_slope - slope)
            .abs()
            .max((next_intercept - intercept).abs());
        let scale = next_slope.abs().max(next_intercept.abs()).max(1.0);
        slope = next_slope;
        intercept = next_intercept;
        if change < IRLS_TOL * scale {
            break;
        }
    }
    Ok(LocalLinearCoeffs {
        slope,
        intercept,
        degenerate: false,
    })
}

/// Linear temporal projection: slope * s_i + intercept.
pub fn temporal_project(s_i: f64, coeffs: &LocalLinearCoeffs) -> f64 {
    coeffs.slope * s_i + coeffs.intercept
}

/// Weighted sum of per-neighbor temporal projections.
pub fn neighborhood_estimate(
    neighbors: &NeighborSet,
    coeffs_per_cell: &[LocalLinearCoeffs],
    s_i_per_cell: &[f64],
) -> Result<f64, FusionError> {
    if neighbors.is_empty() {
        return Err(FusionError::NoEstimate);
    }
    if coeffs_per_cell.len() != neighbors.len() || s_i_per_cell.len() != neighbors.len() {
        return Err(FusionError::Config(
            "coefficient/value lists must align with the neighbor set".into(),
        ));
    }
    Ok(neighbors
        .weights
        .iter()
        .zip(coeffs_per_cell)
        .zip(s_i_per_cell)
        .map(|((&w, c), &s)| w * temporal_project(s, c))
        .sum())
}

/// Temporal variance proxy between two ground fields: mean squared
/// difference over co-valid cells (floored at idw_epsilon^2), falling back to
/// the day gap when fewer than min_overlap cells are co-valid.
pub fn temporal_variance(
    g_p: &Field,
    g_j: &Field,
    t_p: i64,
    t_j: i64,
    params: &FusionParams,
) -> f64 {
    let floor = params.idw_epsilon * params.idw_epsilon;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, c, vp) in g_p.iter_valid() {
        if let Some(vj) = g_j.try_get(r, c) {
            let d = vj - vp;
            sum += d * d;
            count += 1;
        }
    }
    if count >= params.min_overlap {
        (sum / count as f64).max(floor)
    } else {
        ((t_j - t_p).abs() as f64).max(floor)
    }
}

/// Inverse-variance combination across reference times. Normalized weights
/// are written back into the estimates; returns the combined value.
pub fn multi_temporal_combine(estimates: &mut [TemporalEstimate]) -> Result<f64, FusionError> {
    if estimates.is_empty() {
        return Err(FusionError::NoEstimate);
    }
    if estimates.iter().any(|e| e.variance.is_nan() || e.variance <= 0.0) {
        return Err(FusionError::Config(
            "all temporal variances must be > 0".into(),
        ));
    }
    let z: f64 = estimates.iter().map(|e| 1.0 / e.variance).sum();
    let mut combined = 0.0;
    for e in estimates.iter_mut() {
        e.weight = (1.0 / e.variance) / z;
        combined += e.weight * e.estimate;
    }
    Ok(combined)
}

/// Per-reference-day data shared by every target cell of one output day.
struct RefDay {
    /// Cells valid in both the reference satellite and ground fields.
    co_valid_sg: Vec<(usize, usize)>,
    /// Regression between the reference and target days' ground values, if
    /// enough co-valid pairs exist.
    fit: Option<LocalLinearCoeffs>,
    variance: f64,
}

/// Fills every invalid satellite cell that has at least one usable reference
/// day. Valid cells are copied bit-exactly; unfillable cells stay masked.
pub fn gap_fill(
    satellite: &FieldStack,
    ground: &FieldStack,
    params: &FusionParams,
) -> Result<(FieldStack, FusionReport), FusionError> {
    params.validate()?;
    if satellite.spec() != ground.spec() {
        return Err(FusionError::Config(
            "satellite and ground stacks must share a grid spec".into(),
        ));
    }
    if satellite.times() != ground.times() {
        return Err(FusionError::Config(
            "satellite and ground stacks must share a time axis".into(),
        ));
    }
    let spec = satellite.spec().clone();
    let (rows, cols) = (spec.rows, spec.cols);
    let n_times = satellite.len();

    // per-cell sorted list of time positions where the satellite is valid
    let mut valid_at: Vec<Vec<u32>> = vec![Vec::new(); rows * cols];
    for t in 0..n_times {
        let f = satellite.field(t);
        for (r, c, _) in f.iter_valid() {
            valid_at[r * cols + c].push(t as u32);
        }
    }

    let times = satellite.times();
    let day_results: Vec<(Field, usize, usize, usize)> = (0..n_times)
        .into_par_iter()
        .map(|j| {
            let s_j = satellite.field(j);
            let g_j = ground.field(j);
            let mut out = s_j.clone();
            let mut filled = 0usize;
            let mut unfilled = 0usize;
            let copied = s_j.valid_count();
            let mut ref_cache: HashMap<usize, RefDay> = HashMap::new();

            for r in 0..rows {
                for c in 0..cols {
                    if s_j.is_valid(r, c) {
                        continue;
                    }
                    let refs = nearest_reference_times(&valid_at[r * cols + c], times, j, params);
                    let mut estimates: Vec<TemporalEstimate> = Vec::new();
                    for i in refs {
                        let ref_day = ref_cache.entry(i).or_insert_with(|| {
                            build_ref_day(
                                satellite.field(i),
                                g_j,
                                ground.field(i),
                                times[i],
                                times[j],
                                params,
                            )
                        });
                        let fit = match ref_day.fit {
                            Some(f) => f,
                            None => continue,
                        };
                        let s_i = satellite.field(i);
                        let g_i = ground.field(i);
                        let neighbors = match find_similar_in_candidates(
                            s_i,
                            g_i,
                            (r, c),
                            &ref_day.co_valid_sg,
                            params,
                        ) {
                            Ok(n) if !n.is_empty() => n,
                            _ => continue,
                        };
                        let s_vals: Vec<f64> = neighbors
                            .cells
                            .iter()
                            .map(|&(nr, nc)| s_i.get(nr, nc))
                            .collect();
                        let coeffs = vec![fit; neighbors.len()];
                        let est = neighborhood_estimate(&neighbors, &coeffs, &s_vals)
                            .expect("non-empty neighbor set");
                        estimates.push(TemporalEstimate {
                            reference_time: times[i],
                            estimate: est,
                            variance: ref_day.variance,
                            weight: 0.0,
                        });
                    }
                    if estimates.is_empty() {
                        unfilled += 1;
                    } else {
                        let value = multi_temporal_combine(&mut estimates)
                            .expect("non-empty estimate list");
                        out.set(r, c, value).expect("combined estimate is finite");
                        filled += 1;
                    }
                }
            }
            (out, copied, filled, unfilled)
        })
        .collect();

    let mut fields = Vec::with_capacity(n_times);
    let mut report = FusionReport {
        copied: 0,
        filled: 0,
        unfilled: 0,
        params: params.clone(),
    };
    for (f, copied, filled, unfilled) in day_results {
        fields.push(f);
        report.copied += copied;
        report.filled += filled;
        report.unfilled += unfilled;
    }
    let stack = FieldStack::new(&spec, times.to_vec(), fields)?;
    Ok((stack, report))
}

fn build_ref_day(
    s_i: &Field,
    g_j: &Field,
    g_i: &Field,
    t_i: i64,
    t_j: i64,
    params: &FusionParams,
) -> RefDay {
    let co_valid_sg: Vec<(usize, usize)> = g_i
        .iter_valid()
        .filter(|&(r, c, _)| s_i.is_valid(r, c))
        .map(|(r, c, _)| (r, c))
        .collect();

    // regression pairs: all cells ground-valid on both days, unit weights
    let mut gi_vals = Vec::new();
    let mut gj_vals = Vec::new();
    for (r, c, vi) in g_i.iter_valid() {
        if let Some(vj) = g_j.try_get(r, c) {
            gi_vals.push(vi);
            gj_vals.push(vj);
        }
    }
    let fit = fit_local_linear(
        &gi_vals,
        &gj_vals,
        &vec![1.0; gi_vals.len()],
        params.huber_delta,
        params.min_overlap,
    )
    .ok();
    let variance = temporal_variance(g_i, g_j, t_i, t_j, params);
    RefDay {
        co_valid_sg,
        fit,
        variance,
    }
}

/// Up to M positions nearest in day-index distance to position `j` where the
/// cell is valid, preferring the earlier day on ties.
fn nearest_reference_times(
    valid_positions: &[u32],
    times: &[i64],
    j: usize,
    params: &FusionParams,
) -> Vec<usize> {
    let t_j = times[j];
    let mut refs: Vec<usize> = Vec::with_capacity(params.max_reference_times);
    // two cursors around the insertion point of j
    let split = valid_positions.partition_point(|&p| (p as usize) < j);
    let mut lo = split;
    let mut hi = split;
    // skip j itself if the cell were somehow valid there
    if hi < valid_positions.len() && valid_positions[hi] as usize == j {
        hi += 1;
    }
    while refs.len() < params.max_reference_times {
        let below = lo.checked_sub(1).map(|i| valid_positions[i] as usize);
        let above = valid_positions.get(hi).map(|&p| p as usize);
        match (below, above) {
            (None, None) => break,
            (Some(b), None) => {
                refs.push(b);
                lo -= 1;
            }
            (None, Some(a)) => {
                refs.push(a);
                hi += 1;
            }
            (Some(b), Some(a)) => {
                let db = (times[b] - t_j).abs();
                let da = (times[a] - t_j).abs();
                if db <= da {
                    refs.push(b);
                    lo -= 1;
                } else {
                    refs.push(a);
                    hi += 1;
                }
            }
        }
    }
    refs
}
