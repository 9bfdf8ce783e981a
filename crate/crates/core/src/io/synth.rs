//! Seeded synthetic dataset generator: a smooth drifting-plume truth field,
//! an affine satellite view with spatially correlated gap blobs, and station
//! samples of the truth at fixed cells.
//!
//! Every emitted value is rounded through 32-bit precision so full pipelines
//! survive disk round trips bit-identically.

use super::{quantize_f32, IoError};
use crate::grid::{Field, FieldStack, GridSpec, StationRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed affine relation between truth and the satellite view.
pub const SATELLITE_GAIN: f64 = 0.9;
pub const SATELLITE_OFFSET: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub spec: GridSpec,
    pub n_days: usize,
    pub n_stations: usize,
    /// Approximate fraction of satellite cells masked per day.
    pub gap_fraction: f64,
    pub plume_count: usize,
    pub noise_sigma: f64,
}

impl SynthConfig {
    pub fn new(spec: GridSpec) -> Self {
        Self {
            seed: 0,
            spec,
            n_days: 485,
            n_stations: 29,
            gap_fraction: 0.3,
            plume_count: 7,
            noise_sigma: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), IoError> {
        self.spec.validate()?;
        if self.n_days < 1 {
            return Err(IoError::Invalid("n_days must be >= 1".into()));
        }
        if self.n_stations < 1 || self.n_stations > self.spec.n_cells() {
            return Err(IoError::Invalid(format!(
                "n_stations {} must be in 1..={}",
                self.n_stations,
                self.spec.n_cells()
            )));
        }
        if !(0.0..1.0).contains(&self.gap_fraction) {
            return Err(IoError::Invalid("gap_fraction must be in [0, 1)".into()));
        }
        if self.noise_sigma < 0.0 || self.plume_count == 0 {
            return Err(IoError::Invalid(
                "noise_sigma must be >= 0 and plume_count >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub satellite: FieldStack,
    pub stations: Vec<StationRecord>,
    pub truth: FieldStack,
}

struct Plume {
    amplitude: f64,
    sigma: f64,
    row0: f64,
    col0: f64,
    vel_row: f64,
    vel_col: f64,
    period: f64,
    phase: f64,
    depth: f64,
}

/// Reflects a coordinate into [0, max] (bouncing drift).
fn reflect(x: f64, max: f64) -> f64 {
    if max <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    let m = x.rem_euclid(period);
    if m <= max {
        m
    } else {
        period - m
    }
}

/// Standard normal via Box-Muller; consumes exactly two uniforms per call.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthData, IoError> {
    config.validate()?;
    let spec = &config.spec;
    let (rows, cols) = (spec.rows, spec.cols);
    let n_cells = spec.n_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // the first two plumes are strong emitters; the rest are moderate
    let plumes: Vec<Plume> = (0..config.plume_count)
        .map(|k| Plume {
            amplitude: if k < 2 {
                rng.gen_range(24.0..30.0)
            } else {
                rng.gen_range(12.0..24.0)
            },
            sigma: rng.gen_range(5.0..9.0),
            row0: rng.gen_range(0.0..rows as f64),
            col0: rng.gen_range(0.0..cols as f64),
            vel_row: rng.gen_range(-0.05..0.05),
            vel_col: rng.gen_range(-0.05..0.05),
            period: rng.gen_range(8.0..30.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            depth: rng.gen_range(0.5..0.9),
        })
        .collect();
    let seasonal_base = rng.gen_range(3.0..6.0);
    let seasonal_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    // stations: distinct cells via partial Fisher-Yates
    let mut cell_ids: Vec<usize> = (0..n_cells).collect();
    for i in 0..config.n_stations {
        let j = rng.gen_range(i..n_cells);
        cell_ids.swap(i, j);
    }
    let station_cells: Vec<(usize, usize)> = cell_ids[..config.n_stations]
        .iter()
        .map(|&i| (i / cols, i % cols))
        .collect();

    let times: Vec<i64> = (0..config.n_days as i64).collect();
    let mut truth_fields = Vec::with_capacity(config.n_days);
    let mut sat_fields = Vec::with_capacity(config.n_days);
    let mut stations = Vec::with_capacity(config.n_days * config.n_stations);

    for (ti, &t) in times.iter().enumerate() {
        let tf = t as f64;
        let seasonal = seasonal_base
            * (1.0 + 0.5 * (std::f64::consts::TAU * tf / 365.0 + seasonal_phase).sin());
        let centers: Vec<(f64, f64, f64)> = plumes
            .iter()
            .map(|p| {
                let amp = p.amplitude
                    * (1.0 + p.depth * (std::f64::consts::TAU * tf / p.period + p.phase).sin());
                (
                    reflect(p.row0 + p.vel_row * tf, (rows - 1) as f64),
                    reflect(p.col0 + p.vel_col * tf, (cols - 1) as f64),
                    amp,
                )
            })
            .collect();

        let mut truth_vals = Vec::with_capacity(n_cells);
        for r in 0..rows {
            for c in 0..cols {
                let mut v = seasonal;
                for (p, &(pr, pc, amp)) in plumes.iter().zip(&centers) {
                    let dr = r as f64 - pr;
                    let dc = c as f64 - pc;
                    v += amp * (-(dr * dr + dc * dc) / (2.0 * p.sigma * p.sigma)).exp();
                }
                if config.noise_sigma > 0.0 {
                    v += config.noise_sigma * normal(&mut rng);
                }
                truth_vals.push(quantize_f32(v.max(0.0)));
            }
        }

        // spatially correlated gaps: threshold a smooth random bump field at
        // its own per-day quantile so the realized fraction tracks the target
        let mut gap_mask = vec![false; n_cells];
        if config.gap_fraction > 0.0 {
            let n_bumps = rng.gen_range(80..150);
            let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
                .map(|_| {
                    (
                        rng.gen_range(0.0..rows as f64),
                        rng.gen_range(0.0..cols as f64),
                        rng.gen_range(0.8..1.6),
                    )
                })
                .collect();
            let mut bump_field = Vec::with_capacity(n_cells);
            for r in 0..rows {
                for c in 0..cols {
                    let mut v = 0.0;
                    for &(br, bc, bs) in &bumps {
                        let dr = r as f64 - br;
                        let dc = c as f64 - bc;
                        v += (-(dr * dr + dc * dc) / (2.0 * bs * bs)).exp();
                    }
                    bump_field.push(v);
                }
            }
            let mut sorted = bump_field.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let cut = ((1.0 - config.gap_fraction) * n_cells as f64).floor() as usize;
            let threshold = sorted[cut.min(n_cells - 1)];
            for (m, &v) in gap_mask.iter_mut().zip(&bump_field) {
                *m = v >= threshold;
            }
        }

        let mut truth_field = Field::all_masked(spec);
        let mut sat_field = Field::all_masked(spec);
        for r in 0..rows {
            for c in 0..cols {
                let v = truth_vals[r * cols + c];
                truth_field.set(r, c, v)?;
                if !gap_mask[r * cols + c] {
                    sat_field.set(r, c, quantize_f32(SATELLITE_GAIN * v + SATELLITE_OFFSET))?;
                }
            }
        }
        for (si, &(r, c)) in station_cells.iter().enumerate() {
            stations.push(StationRecord {
                station_id: format!("s{si:03}"),
                lat: spec.center_lat(r),
                lon: spec.center_lon(c),
                day: times[ti],
                value: truth_vals[r * cols + c],
            });
        }
        truth_fields.push(truth_field);
        sat_fields.push(sat_field);
    }

    Ok(SynthData {
        satellite: FieldStack::new(spec, times.clone(), sat_fields)?,
        stations,
        truth: FieldStack::new(spec, times, truth_fields)?,
    })
}
