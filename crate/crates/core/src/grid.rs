//! Geographic grids, gridded fields with validity masks, and station regridding.
//!
//! Row 0 sits at the `lat_min` edge (south), column 0 at the `lon_min` edge.
//! `rows`/`cols` are authoritative: the effective per-axis cell size is derived
//! from the bounding box and the dimension counts, not from `resolution`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("point ({lat}, {lon}) outside box [{lat_min}, {lat_max}] x [{lon_min}, {lon_max}]")]
    OutOfBounds {
        lat: f64,
        lon: f64,
        lat_min: f64,
        lat_max: f64,
        lon_min: f64,
        lon_max: f64,
    },
    #[error("station {station_id}: {reason}")]
    BadRecord { station_id: String, reason: String },
    #[error("field shape {got_rows}x{got_cols} does not match spec {rows}x{cols}")]
    ShapeMismatch {
        got_rows: usize,
        got_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Geographic bounding box plus grid dimensions. The coordinate frame for
/// every field in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    /// Nominal resolution in degrees per cell, kept for provenance. The
    /// effective cell size comes from `cell_height`/`cell_width`.
    pub resolution: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(
        lat_min: f64,
        lat_max: f64,
        lon_min: f64,
        lon_max: f64,
        resolution: f64,
        rows: usize,
        cols: usize,
    ) -> Result<Self, GridError> {
        let spec = Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
            resolution,
            rows,
            cols,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.lat_min.is_finite() && self.lat_max.is_finite())
            || !(self.lon_min.is_finite() && self.lon_max.is_finite())
        {
            return Err(GridError::InvalidSpec("non-finite bounding box".into()));
        }
        if self.lat_min >= self.lat_max {
            return Err(GridError::InvalidSpec(format!(
                "lat_min {} >= lat_max {}",
                self.lat_min, self.lat_max
            )));
        }
        if self.lon_min >= self.lon_max {
            return Err(GridError::InvalidSpec(format!(
                "lon_min {} >= lon_max {}",
                self.lon_min, self.lon_max
            )));
        }
        if self.resolution.is_nan() || self.resolution <= 0.0 {
            return Err(GridError::InvalidSpec(format!(
                "resolution {} must be > 0",
                self.resolution
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(GridError::InvalidSpec(format!(
                "rows {} and cols {} must be >= 1",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Effective cell height in degrees, derived from box and row count.
    pub fn cell_height(&self) -> f64 {
        (self.lat_max - self.lat_min) / self.rows as f64
    }

    /// Effective cell width in degrees, derived from box and column count.
    pub fn cell_width(&self) -> f64 {
        (self.lon_max - self.lon_min) / self.cols as f64
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Center latitude of row `r`.
    pub fn center_lat(&self, r: usize) -> f64 {
        self.lat_min + (r as f64 + 0.5) * self.cell_height()
    }

    /// Center longitude of column `c`.
    pub fn center_lon(&self, c: usize) -> f64 {
        self.lon_min + (c as f64 + 0.5) * self.cell_width()
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min && lat <= self.lat_max && lon >= self.lon_min && lon <= self.lon_max
    }
}

/// One day's concentration grid with a validity mask. Invalid cells hold NaN
/// and are never read by numeric operations.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    spec: GridSpec,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl Field {
    /// All-invalid field (every value NaN, every mask bit false).
    pub fn all_masked(spec: &GridSpec) -> Self {
        let n = spec.n_cells();
        Self {
            spec: spec.clone(),
            values: vec![f64::NAN; n],
            mask: vec![false; n],
        }
    }

    /// Builds a field from flat row-major values and mask, enforcing the
    /// NaN-sentinel and finite-value invariants.
    pub fn from_parts(spec: &GridSpec, values: Vec<f64>, mask: Vec<bool>) -> Result<Self, GridError> {
        let n = spec.n_cells();
        if values.len() != n || mask.len() != n {
            return Err(GridError::ShapeMismatch {
                got_rows: values.len(),
                got_cols: mask.len(),
                rows: spec.rows,
                cols: spec.cols,
            });
        }
        let mut values = values;
        for (i, (v, &m)) in values.iter_mut().zip(mask.iter()).enumerate() {
            if m {
                if !v.is_finite() {
                    return Err(GridError::Invalid(format!(
                        "valid cell {} holds non-finite value {}",
                        i, v
                    )));
                }
            } else {
                *v = f64::NAN;
            }
        }
        Ok(Self {
            spec: spec.clone(),
            values,
            mask,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn rows(&self) -> usize {
        self.spec.rows
    }

    pub fn cols(&self) -> usize {
        self.spec.cols
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.spec.cols + c
    }

    #[inline]
    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.mask[self.idx(r, c)]
    }

    /// Value of a valid cell. Panics if the cell is masked invalid; callers
    /// must check `is_valid` first.
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let i = self.idx(r, c);
        assert!(self.mask[i], "read of masked-invalid cell ({r}, {c})");
        self.values[i]
    }

    /// Value if valid, None otherwise. Never exposes the NaN sentinel.
    #[inline]
    pub fn try_get(&self, r: usize, c: usize) -> Option<f64> {
        let i = self.idx(r, c);
        if self.mask[i] {
            Some(self.values[i])
        } else {
            None
        }
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) -> Result<(), GridError> {
        if !value.is_finite() {
            return Err(GridError::Invalid(format!(
                "attempt to set non-finite value {} at ({}, {})",
                value, r, c
            )));
        }
        let i = self.idx(r, c);
        self.values[i] = value;
        self.mask[i] = true;
        Ok(())
    }

    pub fn clear(&mut self, r: usize, c: usize) {
        let i = self.idx(r, c);
        self.values[i] = f64::NAN;
        self.mask[i] = false;
    }

    /// Flat row-major values; masked cells hold NaN.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Iterator over (row, col, value) of valid cells, row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let cols = self.spec.cols;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (i / cols, i % cols, self.values[i]))
    }
}

/// Time-ordered sequence of fields sharing one grid spec.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack {
    spec: GridSpec,
    times: Vec<i64>,
    fields: Vec<Field>,
}

impl FieldStack {
    pub fn new(spec: &GridSpec, times: Vec<i64>, fields: Vec<Field>) -> Result<Self, GridError> {
        if times.len() != fields.len() {
            return Err(GridError::Invalid(format!(
                "{} times but {} fields",
                times.len(),
                fields.len()
            )));
        }
        if !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(GridError::Invalid(
                "day indices must be strictly increasing".into(),
            ));
        }
        for f in &fields {
            if f.spec() != spec {
                return Err(GridError::Invalid(
                    "all fields in a stack must share the grid spec".into(),
                ));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            times,
            fields,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field(&self, t: usize) -> &Field {
        &self.fields[t]
    }

    pub fn field_mut(&mut self, t: usize) -> &mut Field {
        &mut self.fields[t]
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    /// Position of a day index in the time axis, if present.
    pub fn position_of_day(&self, day: i64) -> Option<usize> {
        self.times.binary_search(&day).ok()
    }
}

/// One station observation on one day.
#[derive(Debug, Clone, PartialEq)]
pub struct StationRecord {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub day: i64,
    pub value: f64,
}

impl StationRecord {
    pub fn validate(&self) -> Result<(), GridError> {
        if !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(GridError::BadRecord {
                station_id: self.station_id.clone(),
                reason: format!("non-finite coordinates ({}, {})", self.lat, self.lon),
            });
        }
        if !self.value.is_finite() || self.value < 0.0 {
            return Err(GridError::BadRecord {
                station_id: self.station_id.clone(),
                reason: format!("value {} must be finite and >= 0", self.value),
            });
        }
        Ok(())
    }
}

/// Cell whose center is nearest the point. Ties break toward the lower index
/// on each axis independently.
pub fn cell_of(lat: f64, lon: f64, spec: &GridSpec) -> Result<(usize, usize), GridError> {
    if !spec.contains(lat, lon) {
        return Err(GridError::OutOfBounds {
            lat,
            lon,
            lat_min: spec.lat_min,
            lat_max: spec.lat_max,
            lon_min: spec.lon_min,
            lon_max: spec.lon_max,
        });
    }
    Ok((
        nearest_index(lat - spec.lat_min, spec.cell_height(), spec.rows),
        nearest_index(lon - spec.lon_min, spec.cell_width(), spec.cols),
    ))
}

/// Nearest cell-center index along one axis for offset `x` from the low edge.
/// Centers sit at (i + 0.5)*size; round-half-down breaks center ties toward
/// the lower index.
fn nearest_index(x: f64, size: f64, count: usize) -> usize {
    // fractional center index, then nearest integer with ties-to-lower
    let frac = x / size - 0.5;
    let i = (frac - 0.5).ceil();
    if i < 0.0 {
        0
    } else if i as usize >= count {
        count - 1
    } else {
        i as usize
    }
}

/// Grids station records onto one field per requested day. A cell is valid iff
/// at least one record maps to it that day; colliding records are averaged.
pub fn regrid_stations(
    records: &[StationRecord],
    spec: &GridSpec,
    days: &[i64],
) -> Result<FieldStack, GridError> {
    spec.validate()?;
    if !days.windows(2).all(|w| w[0] < w[1]) {
        return Err(GridError::Invalid(
            "day indices must be strictly increasing".into(),
        ));
    }

    let mut sums = vec![vec![0.0f64; spec.n_cells()]; days.len()];
    let mut counts = vec![vec![0u32; spec.n_cells()]; days.len()];

    for rec in records {
        rec.validate()?;
        let (r, c) = cell_of(rec.lat, rec.lon, spec).map_err(|e| GridError::BadRecord {
            station_id: rec.station_id.clone(),
            reason: e.to_string(),
        })?;
        let t = days
            .binary_search(&rec.day)
            .map_err(|_| GridError::BadRecord {
                station_id: rec.station_id.clone(),
                reason: format!("day {} outside requested day range", rec.day),
            })?;
        let i = r * spec.cols + c;
        sums[t][i] += rec.value;
        counts[t][i] += 1;
    }

    let mut fields = Vec::with_capacity(days.len());
    for (sum_day, count_day) in sums.into_iter().zip(counts) {
        let mut field = Field::all_masked(spec);
        for (i, (&s, &n)) in sum_day.iter().zip(count_day.iter()).enumerate() {
            if n > 0 {
                field.set(i / spec.cols, i % spec.cols, s / n as f64)?;
            }
        }
        fields.push(field);
    }
    FieldStack::new(spec, days.to_vec(), fields)
}
