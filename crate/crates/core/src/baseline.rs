//! Analytical shading: Horn gradients, Lambertian diffuse shading and an
//! elevation-dependent contrast modulation.
//!
//! Coordinates: x grows east (column index), y grows north (decreasing row
//! index), z is up. Azimuths are clockwise from north.

use crate::error::{ReliefError, Result};
use crate::raster_io::{DemGrid, GrayImage};
use crate::terrain::NormalizedField;

/// Sine and cosine of an angle in degrees.
///
/// The angle is reduced to a quadrant and an offset inside it, so angles that
/// differ by a multiple of 90 degrees produce results that are exact sign and
/// component swaps of each other, and multiples of 90 give exact 0/±1.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let d = deg.rem_euclid(360.0);
    // `%` on floats is exact, so the offset inside the quadrant carries no
    // rounding from the reduction.
    let rest = d % 90.0;
    let quadrant = ((d - rest) / 90.0) as i32 % 4;
    let (s, c) = if rest == 0.0 {
        (0.0, 1.0)
    } else {
        rest.to_radians().sin_cos()
    };
    match quadrant {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}

/// Direction towards the light source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightVector {
    pub azimuth_deg: f64,
    pub altitude_deg: f64,
}

impl Default for LightVector {
    /// Upper-left light at 45 degrees.
    fn default() -> Self {
        LightVector {
            azimuth_deg: 315.0,
            altitude_deg: 45.0,
        }
    }
}

impl LightVector {
    /// Azimuth is reduced into `[0, 360)`; altitude must lie in `(0, 90]`.
    pub fn new(azimuth_deg: f64, altitude_deg: f64) -> Result<Self> {
        if !azimuth_deg.is_finite() {
            return Err(ReliefError::invalid("azimuth must be finite"));
        }
        if !(altitude_deg > 0.0 && altitude_deg <= 90.0) {
            return Err(ReliefError::invalid(format!(
                "sun altitude must be in (0, 90], got {altitude_deg}"
            )));
        }
        Ok(LightVector {
            azimuth_deg: azimuth_deg.rem_euclid(360.0),
            altitude_deg,
        })
    }

    /// Unit vector (east, north, up).
    pub fn unit(&self) -> [f64; 3] {
        let (sa, ca) = sin_cos_deg(self.azimuth_deg);
        let (se, ce) = sin_cos_deg(self.altitude_deg);
        [sa * ce, ca * ce, se]
    }
}

/// Per-cell surface gradient in rise over run.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub rows: usize,
    pub cols: usize,
    /// Eastward derivative.
    pub dzdx: Vec<f64>,
    /// Northward derivative.
    pub dzdy: Vec<f64>,
}

/// Horn's 3x3 weighted-difference gradient.
///
/// With the neighbourhood labelled `a b c / d e f / g h i` (north row first),
/// `dz/dx = ((c - a) + (i - g) + 2 (f - d)) / (8 cell)` and
/// `dz/dy = ((a - g) + (c - i) + 2 (b - h)) / (8 cell)`. The differences are
/// paired so that a 180 degree rotation of the grid negates both components
/// bit for bit. Out-of-grid neighbours replicate the edge; nodata neighbours
/// take the centre value and nodata centres get a zero gradient.
pub fn horn_gradient(dem: &DemGrid, vertical_exaggeration: f64) -> Result<Gradient> {
    let (rows, cols) = (dem.rows, dem.cols);
    if rows < 3 || cols < 3 {
        return Err(ReliefError::invalid(format!(
            "Horn gradient needs at least 3x3 cells, got {rows}x{cols}"
        )));
    }
    let scale = vertical_exaggeration / (8.0 * dem.cell_size);
    let mut dzdx = vec![0.0; rows * cols];
    let mut dzdy = vec![0.0; rows * cols];
    let at = |r: isize, c: isize, centre: f64| -> f64 {
        let rr = r.clamp(0, rows as isize - 1) as usize;
        let cc = c.clamp(0, cols as isize - 1) as usize;
        let v = dem.get(rr, cc);
        if dem.is_nodata(v) {
            centre
        } else {
            v
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            let e = dem.get(r, c);
            if dem.is_nodata(e) {
                continue;
            }
            let (ri, ci) = (r as isize, c as isize);
            let a = at(ri - 1, ci - 1, e);
            let b = at(ri - 1, ci, e);
            let cc = at(ri - 1, ci + 1, e);
            let d = at(ri, ci - 1, e);
            let f = at(ri, ci + 1, e);
            let g = at(ri + 1, ci - 1, e);
            let h = at(ri + 1, ci, e);
            let i = at(ri + 1, ci + 1, e);
            let gx = ((cc - a) + (i - g)) + 2.0 * (f - d);
            let gy = ((a - g) + (cc - i)) + 2.0 * (b - h);
            dzdx[r * cols + c] = gx * scale;
            dzdy[r * cols + c] = gy * scale;
        }
    }
    Ok(Gradient {
        rows,
        cols,
        dzdx,
        dzdy,
    })
}

/// Slope angle in degrees for every cell, from the Horn gradient.
pub fn slope_degrees(dem: &DemGrid) -> Result<Vec<f64>> {
    let g = horn_gradient(dem, 1.0)?;
    Ok(g.dzdx
        .iter()
        .zip(&g.dzdy)
        .map(|(p, q)| p.hypot(*q).atan().to_degrees())
        .collect())
}

/// Lambertian diffuse shading, `clamp(n . l, 0, 1)`, no ambient term.
pub fn diffuse_shade(
    dem: &DemGrid,
    light: &LightVector,
    vertical_exaggeration: f64,
) -> Result<GrayImage> {
    let grad = horn_gradient(dem, vertical_exaggeration)?;
    let [lx, ly, lz] = light.unit();
    let values = grad
        .dzdx
        .iter()
        .zip(&grad.dzdy)
        .map(|(&p, &q)| {
            // n = (-p, -q, 1) / |(-p, -q, 1)|
            let dot = (lz - (p * lx + q * ly)) / (p * p + q * q + 1.0).sqrt();
            dot.clamp(0.0, 1.0)
        })
        .collect();
    GrayImage::new(dem.rows, dem.cols, values)
}

/// Scales contrast about mid-grey with elevation.
///
/// `out = 0.5 + (v - 0.5) * (1 - strength * (1 - e))` where `e` is the
/// normalized elevation: lowlands keep `1 - strength` of their contrast,
/// the highest cells keep all of it.
pub fn aerial_perspective(
    shading: &GrayImage,
    norm_elev: &NormalizedField,
    strength: f64,
) -> Result<GrayImage> {
    if (shading.rows, shading.cols) != (norm_elev.rows, norm_elev.cols) {
        return Err(ReliefError::shape(format!(
            "shading is {}x{}, elevation field is {}x{}",
            shading.rows, shading.cols, norm_elev.rows, norm_elev.cols
        )));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(ReliefError::invalid(format!(
            "aerial perspective strength must be in [0, 1], got {strength}"
        )));
    }
    let values = shading
        .values
        .iter()
        .zip(&norm_elev.values)
        .map(|(&v, &e)| (v - (v - 0.5) * (strength * (1.0 - e))).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(shading.rows, shading.cols, values)
}

/// 180 degree rotation of a raster (index reversal).
#[cfg(test)]
pub(crate) fn rotate180_values(values: &[f64]) -> Vec<f64> {
    values.iter().rev().copied().collect()
}
