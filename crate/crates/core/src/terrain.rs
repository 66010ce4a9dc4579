//! Elevation preprocessing: normalization, rotation, resolution reduction,
//! near-flat detection and synthetic terrain.

use rand::Rng;

use crate::baseline::slope_degrees;
use crate::error::{ReliefError, Result};
use crate::raster_io::{DemGrid, Raster};
use crate::rng::seeded;

/// Default slope below which a cell counts as near-flat, in degrees.
pub const DEFAULT_FLAT_SLOPE_DEG: f64 = 1.5;

/// Elevations mapped into `[k_min, k_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedField {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Elevation (m) mapped to `k_min`.
    pub source_min: f64,
    /// Elevation (m) mapped to `k_max`.
    pub source_max: f64,
    pub k_min: f64,
    pub k_max: f64,
}

impl NormalizedField {
    pub fn to_raster(&self) -> Raster {
        Raster {
            rows: self.rows,
            cols: self.cols,
            values: self.values.clone(),
        }
    }

    /// Inverse map of a normalized value back to meters.
    pub fn denormalize(&self, v: f64) -> f64 {
        let span = self.source_max - self.source_min;
        if span == 0.0 {
            return self.source_min;
        }
        self.source_min + (v - self.k_min) / (self.k_max - self.k_min) * span
    }
}

pub(crate) fn check_k_range(k_min: f64, k_max: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&k_min) || !(0.0..=1.0).contains(&k_max) || k_min >= k_max {
        return Err(ReliefError::invalid(format!(
            "elevation range [{k_min}, {k_max}] must satisfy 0 <= k_min < k_max <= 1"
        )));
    }
    Ok(())
}

/// Affinely maps elevations into `[k_min, k_max]`.
///
/// The source range is the DEM's valid extremes unless `range_override` is
/// given, in which case values outside it clamp. Nodata cells and every cell
/// of a constant DEM map to `k_min`.
pub fn normalize(
    dem: &DemGrid,
    k_min: f64,
    k_max: f64,
    range_override: Option<(f64, f64)>,
) -> Result<NormalizedField> {
    check_k_range(k_min, k_max)?;
    let (lo, hi) = match range_override {
        Some((lo, hi)) => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ReliefError::invalid(format!(
                    "normalization range ({lo}, {hi}) must be finite with min < max"
                )));
            }
            (lo, hi)
        }
        None => dem
            .valid_range()
            .ok_or_else(|| ReliefError::invalid("DEM has no valid (non-nodata) cells"))?,
    };
    let span = hi - lo;
    let kspan = k_max - k_min;
    let values = dem
        .values
        .iter()
        .map(|&v| {
            if dem.is_nodata(v) || span == 0.0 {
                k_min
            } else if v >= hi {
                // k_min + kspan can land an ulp short of k_max
                k_max
            } else {
                (k_min + (v - lo) / span * kspan).clamp(k_min, k_max)
            }
        })
        .collect();
    Ok(NormalizedField {
        rows: dem.rows,
        cols: dem.cols,
        values,
        source_min: lo,
        source_max: hi,
        k_min,
        k_max,
    })
}

/// Quarter turns (counter-clockwise) if the angle is an exact multiple of 90.
fn quarter_turns(angle_deg: f64) -> Option<u32> {
    let a = angle_deg.rem_euclid(360.0);
    (a % 90.0 == 0.0).then(|| (a / 90.0) as u32 % 4)
}

fn rotate_quarter(field: &Raster, turns: u32) -> Raster {
    let (rows, cols) = (field.rows, field.cols);
    match turns {
        0 => field.clone(),
        2 => Raster {
            rows,
            cols,
            values: field.values.iter().rev().copied().collect(),
        },
        1 => {
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..cols {
                for c in 0..rows {
                    values.push(field.get(c, cols - 1 - r));
                }
            }
            Raster {
                rows: cols,
                cols: rows,
                values,
            }
        }
        _ => {
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..cols {
                for c in 0..rows {
                    values.push(field.get(rows - 1 - c, r));
                }
            }
            Raster {
                rows: cols,
                cols: rows,
                values,
            }
        }
    }
}

/// Rotates a raster counter-clockwise by `angle_deg` about its centre.
///
/// The output is the smallest axis-aligned raster holding the rotated
/// footprint, grown by at most one cell per axis so both sides keep the
/// parity of the source (the centre then stays on the cell grid and a
/// rotation back can be cropped without a half-cell offset). Samples are
/// bilinear; cells outside the footprint take `fill`. Multiples of 90
/// degrees are exact index permutations.
pub fn rotate(field: &Raster, angle_deg: f64, fill: f64) -> Raster {
    if let Some(turns) = quarter_turns(angle_deg) {
        return rotate_quarter(field, turns);
    }
    let (s, c) = crate::baseline::sin_cos_deg(angle_deg);
    let half_w = field.cols as f64 / 2.0;
    let half_h = field.rows as f64 / 2.0;
    let extent = |h: f64, n: usize| {
        let mut m = (2.0 * h - 1e-9).ceil().max(1.0) as usize;
        if m % 2 != n % 2 {
            m += 1;
        }
        m
    };
    let out_cols = extent(half_w * c.abs() + half_h * s.abs(), field.cols);
    let out_rows = extent(half_w * s.abs() + half_h * c.abs(), field.rows);
    sample_rotated(field, s, c, fill, out_rows, out_cols)
}

/// Rotates like [`rotate`] but samples onto an output raster of the given
/// size centred on the source centre.
pub fn rotate_into(
    field: &Raster,
    angle_deg: f64,
    fill: f64,
    out_rows: usize,
    out_cols: usize,
) -> Raster {
    if let Some(turns) = quarter_turns(angle_deg) {
        let r = rotate_quarter(field, turns);
        if (r.rows, r.cols) == (out_rows, out_cols) {
            return r;
        }
    }
    let (s, c) = crate::baseline::sin_cos_deg(angle_deg);
    sample_rotated(field, s, c, fill, out_rows, out_cols)
}

fn sample_rotated(
    field: &Raster,
    sin: f64,
    cos: f64,
    fill: f64,
    out_rows: usize,
    out_cols: usize,
) -> Raster {
    let (rows, cols) = (field.rows, field.cols);
    let src_cx = (cols as f64 - 1.0) / 2.0;
    let src_cy = (rows as f64 - 1.0) / 2.0;
    let dst_cx = (out_cols as f64 - 1.0) / 2.0;
    let dst_cy = (out_rows as f64 - 1.0) / 2.0;
    let eps = 1e-9;
    let mut values = vec![fill; out_rows * out_cols];
    crate::exec::for_each_chunk_mut(&mut values, out_cols, |r, row| {
        let y = dst_cy - r as f64;
        for (col, out) in row.iter_mut().enumerate() {
            let x = col as f64 - dst_cx;
            // Inverse rotation back into the source frame.
            let sx = x * cos + y * sin;
            let sy = -x * sin + y * cos;
            let fc = sx + src_cx;
            let fr = src_cy - sy;
            if fc < -0.5 - eps || fc > cols as f64 - 0.5 + eps {
                continue;
            }
            if fr < -0.5 - eps || fr > rows as f64 - 0.5 + eps {
                continue;
            }
            let fc = fc.clamp(0.0, cols as f64 - 1.0);
            let fr = fr.clamp(0.0, rows as f64 - 1.0);
            let c0 = fc.floor() as usize;
            let r0 = fr.floor() as usize;
            let c1 = (c0 + 1).min(cols - 1);
            let r1 = (r0 + 1).min(rows - 1);
            let tx = fc - c0 as f64;
            let ty = fr - r0 as f64;
            let top = field.get(r0, c0) * (1.0 - tx) + field.get(r0, c1) * tx;
            let bottom = field.get(r1, c0) * (1.0 - tx) + field.get(r1, c1) * tx;
            *out = top * (1.0 - ty) + bottom * ty;
        }
    });
    Raster {
        rows: out_rows,
        cols: out_cols,
        values,
    }
}

/// Centred crop (or the raster itself when sizes match). Size differences
/// must be even.
pub fn crop_centered(field: &Raster, rows: usize, cols: usize) -> Result<Raster> {
    if rows > field.rows || cols > field.cols {
        return Err(ReliefError::shape(format!(
            "cannot crop {}x{} to larger {rows}x{cols}",
            field.rows, field.cols
        )));
    }
    let (dr, dc) = (field.rows - rows, field.cols - cols);
    if dr % 2 != 0 || dc % 2 != 0 {
        return Err(ReliefError::shape(
            "centred crop needs even size differences",
        ));
    }
    Ok(field.window(dr / 2, dc / 2, rows, cols))
}

/// Block-mean resolution reduction; `cell_size` grows by `factor`.
///
/// Partial blocks at the right and bottom edges average the cells they have.
/// Nodata cells are excluded from means; an all-nodata block stays nodata.
pub fn downsample(dem: &DemGrid, factor: usize) -> Result<DemGrid> {
    if factor == 0 {
        return Err(ReliefError::invalid("downsample factor must be at least 1"));
    }
    if factor > dem.rows && factor > dem.cols {
        return Err(ReliefError::invalid(format!(
            "downsample factor {factor} exceeds both DEM dimensions {}x{}",
            dem.rows, dem.cols
        )));
    }
    if factor == 1 {
        return Ok(dem.clone());
    }
    let rows = dem.rows.div_ceil(factor);
    let cols = dem.cols.div_ceil(factor);
    let nodata = dem.nodata_value.unwrap_or(f64::NAN);
    let mut values = vec![0.0; rows * cols];
    crate::exec::for_each_chunk_mut(&mut values, cols, |r, out_row| {
        for (c, out) in out_row.iter_mut().enumerate() {
            let mut sum = 0.0;
            let mut n = 0usize;
            for sr in r * factor..((r + 1) * factor).min(dem.rows) {
                for sc in c * factor..((c + 1) * factor).min(dem.cols) {
                    let v = dem.get(sr, sc);
                    if !dem.is_nodata(v) {
                        sum += v;
                        n += 1;
                    }
                }
            }
            *out = if n == 0 { nodata } else { sum / n as f64 };
        }
    });
    Ok(DemGrid {
        rows,
        cols,
        cell_size: dem.cell_size * factor as f64,
        nodata_value: dem.nodata_value,
        origin_x: dem.origin_x,
        origin_y: dem.origin_y,
        values,
    })
}

/// Per-cell near-flat flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatMask {
    pub rows: usize,
    pub cols: usize,
    pub flat: Vec<bool>,
}

impl FlatMask {
    pub fn count(&self) -> usize {
        self.flat.iter().filter(|&&f| f).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.flat.len() as f64
    }
}

/// Marks cells whose Horn slope is below `slope_threshold_deg`.
pub fn flat_mask(dem: &DemGrid, slope_threshold_deg: f64) -> Result<FlatMask> {
    let slopes = slope_degrees(dem)?;
    Ok(FlatMask {
        rows: dem.rows,
        cols: dem.cols,
        flat: slopes.iter().map(|&s| s < slope_threshold_deg).collect(),
    })
}

/// Raises every valid cell by `offset_m`.
pub fn vertical_shift(dem: &DemGrid, offset_m: f64) -> DemGrid {
    dem.with_values(
        dem.values
            .iter()
            .map(|&v| if dem.is_nodata(v) { v } else { v + offset_m })
            .collect(),
    )
}

/// Parameters for [`synth_terrain`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Lowest elevation in meters.
    pub base_m: f64,
    /// Elevation range in meters; the output spans exactly
    /// `[base_m, base_m + amplitude_m]`.
    pub amplitude_m: f64,
    /// Displacement decay per midpoint-subdivision level, in `(0, 1]`.
    /// Smaller is smoother.
    pub roughness: f64,
    /// Fraction of cells flattened into a plain at the lowest elevations.
    pub flat_fraction: f64,
    pub cell_size: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            base_m: 200.0,
            amplitude_m: 1000.0,
            roughness: 0.5,
            flat_fraction: 0.0,
            cell_size: 30.0,
        }
    }
}

/// Diamond-square fractal terrain, deterministic per seed.
///
/// A plain is added by lifting every cell below the `flat_fraction` quantile
/// to that quantile, so `flat_fraction = 1` yields a constant grid.
pub fn synth_terrain(seed: u64, rows: usize, cols: usize, spec: &SynthSpec) -> Result<DemGrid> {
    if rows < 2 || cols < 2 {
        return Err(ReliefError::invalid(format!(
            "synthetic terrain needs at least 2x2 cells, got {rows}x{cols}"
        )));
    }
    if !(spec.roughness > 0.0 && spec.roughness <= 1.0) {
        return Err(ReliefError::invalid("roughness must be in (0, 1]"));
    }
    if !(0.0..=1.0).contains(&spec.flat_fraction) {
        return Err(ReliefError::invalid("flat fraction must be in [0, 1]"));
    }
    if !(spec.amplitude_m >= 0.0 && spec.amplitude_m.is_finite() && spec.base_m.is_finite()) {
        return Err(ReliefError::invalid(
            "amplitude must be finite and non-negative",
        ));
    }

    let mut size = 2usize;
    while size + 1 < rows.max(cols) {
        size *= 2;
    }
    let n = size + 1;
    let mut h = vec![0.0f64; n * n];
    let mut rng = seeded(seed);
    let mut jitter = |scale: f64| rng.random_range(-1.0..1.0) * scale;
    for &(r, c) in &[(0, 0), (0, size), (size, 0), (size, size)] {
        h[r * n + c] = jitter(1.0);
    }
    let mut step = size;
    let mut scale = 1.0;
    while step > 1 {
        let half = step / 2;
        // Diamond: square centres.
        for r in (half..n).step_by(step) {
            for c in (half..n).step_by(step) {
                let avg = (h[(r - half) * n + c - half]
                    + h[(r - half) * n + c + half]
                    + h[(r + half) * n + c - half]
                    + h[(r + half) * n + c + half])
                    / 4.0;
                h[r * n + c] = avg + jitter(scale);
            }
        }
        // Square: edge midpoints.
        for r in (0..n).step_by(half) {
            let start = if (r / half).is_multiple_of(2) {
                half
            } else {
                0
            };
            for c in (start..n).step_by(step) {
                let mut sum = 0.0;
                let mut k = 0.0;
                if r >= half {
                    sum += h[(r - half) * n + c];
                    k += 1.0;
                }
                if r + half < n {
                    sum += h[(r + half) * n + c];
                    k += 1.0;
                }
                if c >= half {
                    sum += h[r * n + c - half];
                    k += 1.0;
                }
                if c + half < n {
                    sum += h[r * n + c + half];
                    k += 1.0;
                }
                h[r * n + c] = sum / k + jitter(scale);
            }
        }
        scale *= spec.roughness;
        step = half;
    }

    let mut values: Vec<f64> = (0..rows)
        .flat_map(|r| h[r * n..r * n + cols].to_vec())
        .collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 && spec.amplitude_m > 0.0 {
            (spec.base_m + (*v - lo) / span * spec.amplitude_m)
                .clamp(spec.base_m, spec.base_m + spec.amplitude_m)
        } else {
            spec.base_m
        };
    }
    if spec.flat_fraction > 0.0 {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let idx = (spec.flat_fraction * (sorted.len() - 1) as f64).round() as usize;
        let plain = sorted[idx];
        for v in values.iter_mut() {
            if *v < plain {
                *v = plain;
            }
        }
    }
    DemGrid::new(rows, cols, spec.cell_size, values)
}
