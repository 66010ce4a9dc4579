//! Rendering whole elevation models with a tile shader: preprocessing
//! controls, overlapping tiles, centre crops and blended assembly.

use std::time::{Duration, Instant};

use crate::baseline::{diffuse_shade, LightVector};
use crate::error::{ReliefError, Result};
use crate::raster_io::{DemGrid, GrayImage, Raster};
use crate::tensor::{Real, Tensor4};
use crate::terrain::{check_k_range, downsample, normalize, rotate, rotate_into};
use crate::unet::UNet;

/// User controls for [`shade`] and [`shade_whole`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShadeOptions {
    /// Counter-clockwise rotation applied before shading and undone after.
    pub rotation_deg: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub downsample_factor: usize,
    /// Elevation range (m) mapped onto `[k_min, k_max]`; the DEM's own
    /// extremes when absent.
    pub norm_range: Option<(f64, f64)>,
    pub blend_width: usize,
    /// Upper bound for a whole-image pass, in bytes.
    pub memory_budget: u64,
}

impl Default for ShadeOptions {
    fn default() -> Self {
        ShadeOptions {
            rotation_deg: 0.0,
            k_min: 0.0,
            k_max: 1.0,
            downsample_factor: 1,
            norm_range: None,
            blend_width: 20,
            memory_budget: 2 << 30,
        }
    }
}

impl ShadeOptions {
    pub fn validate(&self) -> Result<()> {
        check_k_range(self.k_min, self.k_max)?;
        if !self.rotation_deg.is_finite() {
            return Err(ReliefError::invalid("rotation must be finite"));
        }
        if self.downsample_factor == 0 {
            return Err(ReliefError::invalid("downsample factor must be at least 1"));
        }
        Ok(())
    }
}

/// One tile placement: the output window `(top, left)` of side `out_side`
/// in raster coordinates, which is also the top-left of the `tile_size`
/// input window in the padded raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub row: usize,
    pub col: usize,
    pub top: usize,
    pub left: usize,
}

/// Tile layout covering a raster, with separable blend weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePlan {
    pub rows: usize,
    pub cols: usize,
    pub tile_size: usize,
    pub crop_border: usize,
    pub out_side: usize,
    pub blend_width: usize,
    pub stride: usize,
    pub row_starts: Vec<usize>,
    pub col_starts: Vec<usize>,
    /// Normalized weight profile of each placement row, `out_side` long.
    pub row_weights: Vec<Vec<f64>>,
    pub col_weights: Vec<Vec<f64>>,
    /// Row-major over `row_starts x col_starts`.
    pub placements: Vec<Placement>,
}

impl TilePlan {
    /// Padded raster size the input windows index into.
    pub fn padded_dims(&self) -> (usize, usize) {
        (
            self.rows + 2 * self.crop_border,
            self.cols + 2 * self.crop_border,
        )
    }

    pub fn weight(&self, p: &Placement, u: usize, v: usize) -> f64 {
        self.row_weights[p.row][u] * self.col_weights[p.col][v]
    }

    /// Total blend weight at every pixel.
    pub fn weight_sums(&self) -> Raster {
        let mut sums = Raster::filled(self.rows, self.cols, 0.0);
        for p in &self.placements {
            for u in 0..self.out_side {
                for v in 0..self.out_side {
                    let i = (p.top + u) * self.cols + p.left + v;
                    sums.values[i] += self.weight(p, u, v);
                }
            }
        }
        sums
    }
}

fn axis_starts(n: usize, out: usize, stride: usize) -> Vec<usize> {
    let count = (n - out).div_ceil(stride) + 1;
    (0..count).map(|k| (k * stride).min(n - out)).collect()
}

/// Ramp weights along one axis, renormalized to sum to one at every cell.
fn axis_weights(n: usize, starts: &[usize], out: usize, blend: usize) -> Vec<Vec<f64>> {
    let last = starts.len() - 1;
    let raw: Vec<Vec<f64>> = starts
        .iter()
        .enumerate()
        .map(|(k, _)| {
            (0..out)
                .map(|u| {
                    let mut w: f64 = 1.0;
                    if blend > 0 {
                        if k > 0 {
                            w = w.min((u as f64 + 0.5) / blend as f64);
                        }
                        if k < last {
                            w = w.min((out as f64 - u as f64 - 0.5) / blend as f64);
                        }
                    }
                    w
                })
                .collect()
        })
        .collect();
    let mut total = vec![0.0; n];
    for (s, w) in starts.iter().zip(&raw) {
        for (u, v) in w.iter().enumerate() {
            total[s + u] += v;
        }
    }
    starts
        .iter()
        .zip(raw)
        .map(|(s, w)| {
            w.into_iter()
                .enumerate()
                .map(|(u, v)| v / total[s + u])
                .collect()
        })
        .collect()
}

/// Lays `out_side = tile_size - 2 crop_border` windows over a
/// `rows x cols` raster with stride `out_side - blend_width`; the last
/// window on each axis is moved inward to end at the raster edge.
pub fn plan_tiles(
    rows: usize,
    cols: usize,
    tile_size: usize,
    crop_border: usize,
    blend_width: usize,
) -> Result<TilePlan> {
    if 2 * crop_border >= tile_size {
        return Err(ReliefError::invalid(format!(
            "crop border {crop_border} leaves nothing of a {tile_size} tile"
        )));
    }
    let out = tile_size - 2 * crop_border;
    if blend_width >= out {
        return Err(ReliefError::invalid(format!(
            "blend width {blend_width} must be smaller than the {out}-cell output tile"
        )));
    }
    if rows < out || cols < out {
        return Err(ReliefError::invalid(format!(
            "{rows}x{cols} raster is smaller than one {out}x{out} output tile"
        )));
    }
    let stride = out - blend_width;
    let row_starts = axis_starts(rows, out, stride);
    let col_starts = axis_starts(cols, out, stride);
    let row_weights = axis_weights(rows, &row_starts, out, blend_width);
    let col_weights = axis_weights(cols, &col_starts, out, blend_width);
    let mut placements = Vec::with_capacity(row_starts.len() * col_starts.len());
    for (row, &top) in row_starts.iter().enumerate() {
        for (col, &left) in col_starts.iter().enumerate() {
            placements.push(Placement {
                row,
                col,
                top,
                left,
            });
        }
    }
    Ok(TilePlan {
        rows,
        cols,
        tile_size,
        crop_border,
        out_side: out,
        blend_width,
        stride,
        row_starts,
        col_starts,
        row_weights,
        col_weights,
        placements,
    })
}

/// Accumulates patches in placement order as a running weighted mean, so a
/// pixel whose covering patches agree gets exactly that value.
struct Assembler<'a> {
    plan: &'a TilePlan,
    acc: Vec<f64>,
    weight: Vec<f64>,
    next: usize,
}

impl<'a> Assembler<'a> {
    fn new(plan: &'a TilePlan) -> Self {
        Assembler {
            plan,
            acc: vec![0.0; plan.rows * plan.cols],
            weight: vec![0.0; plan.rows * plan.cols],
            next: 0,
        }
    }

    fn add(&mut self, patch: &Raster) -> Result<()> {
        let plan = self.plan;
        let out = plan.out_side;
        let p = plan
            .placements
            .get(self.next)
            .ok_or_else(|| ReliefError::shape("more patches than placements"))?;
        if (patch.rows, patch.cols) != (out, out) {
            return Err(ReliefError::shape(format!(
                "patch is {}x{}, expected {out}x{out}",
                patch.rows, patch.cols
            )));
        }
        for u in 0..out {
            for v in 0..out {
                let w = plan.weight(p, u, v);
                let i = (p.top + u) * plan.cols + p.left + v;
                self.weight[i] += w;
                let a = self.acc[i];
                self.acc[i] = a + (w / self.weight[i]) * (patch.get(u, v) - a);
            }
        }
        self.next += 1;
        Ok(())
    }

    fn finish(self) -> Result<Raster> {
        if self.next != self.plan.placements.len() {
            return Err(ReliefError::shape(format!(
                "{} patches for {} placements",
                self.next,
                self.plan.placements.len()
            )));
        }
        Ok(Raster {
            rows: self.plan.rows,
            cols: self.plan.cols,
            values: self.acc,
        })
    }
}

/// Blends one `out_side` square patch per placement into a raster.
pub fn blend_assemble(patches: &[Raster], plan: &TilePlan) -> Result<Raster> {
    if patches.len() != plan.placements.len() {
        return Err(ReliefError::shape(format!(
            "{} patches for {} placements",
            patches.len(),
            plan.placements.len()
        )));
    }
    let mut asm = Assembler::new(plan);
    for p in patches {
        asm.add(p)?;
    }
    asm.finish()
}

/// How normalized values relate to meters, for shaders that need it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub source_min: f64,
    pub source_max: f64,
    pub k_min: f64,
    pub k_max: f64,
    pub cell_size: f64,
}

impl Normalization {
    pub fn to_meters(&self, v: f64) -> f64 {
        let span = self.source_max - self.source_min;
        self.source_min + (v - self.k_min) / (self.k_max - self.k_min) * span
    }
}

/// Anything that turns square normalized elevation tiles into shading.
pub trait TileShader {
    fn tile_size(&self) -> usize;
    fn crop_border(&self) -> usize;
    /// Shades `tile_size` square tiles; outputs have the same size.
    fn shade_tiles(&self, tiles: &[Raster], norm: &Normalization) -> Result<Vec<Raster>>;
    /// Cell size the shader expects, if it has one.
    fn expected_cell_size(&self) -> Option<f64> {
        None
    }
}

/// Tiles evaluated per network call.
const BATCH: usize = 4;

impl<T: Real> TileShader for UNet<T> {
    fn tile_size(&self) -> usize {
        self.config().tile_size
    }

    fn crop_border(&self) -> usize {
        self.config().crop_border
    }

    fn shade_tiles(&self, tiles: &[Raster], _norm: &Normalization) -> Result<Vec<Raster>> {
        let t = self.tile_size();
        let mut out = Vec::with_capacity(tiles.len());
        for group in tiles.chunks(BATCH) {
            let mut data = Vec::with_capacity(group.len() * t * t);
            for r in group {
                data.extend(r.values.iter().map(|&v| T::from_f64_lossy(v)));
            }
            let y = self.predict(&Tensor4::from_vec([group.len(), 1, t, t], data)?)?;
            for b in 0..group.len() {
                out.push(Raster {
                    rows: t,
                    cols: t,
                    values: y.sample(b).iter().map(|v| v.as_f64()).collect(),
                });
            }
        }
        Ok(out)
    }

    fn expected_cell_size(&self) -> Option<f64> {
        self.meta.cell_size
    }
}

/// Lambertian shading run through the tile pipeline: tiles are mapped back
/// to meters and shaded with [`diffuse_shade`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiffuseShader {
    pub light: LightVector,
    pub vertical_exaggeration: f64,
    pub tile_size: usize,
    pub crop_border: usize,
}

impl TileShader for DiffuseShader {
    fn tile_size(&self) -> usize {
        self.tile_size
    }

    fn crop_border(&self) -> usize {
        self.crop_border
    }

    fn shade_tiles(&self, tiles: &[Raster], norm: &Normalization) -> Result<Vec<Raster>> {
        tiles
            .iter()
            .map(|r| {
                let dem = DemGrid::new(
                    r.rows,
                    r.cols,
                    norm.cell_size,
                    r.values.iter().map(|&v| norm.to_meters(v)).collect(),
                )?;
                Ok(diffuse_shade(&dem, &self.light, self.vertical_exaggeration)?.to_raster())
            })
            .collect()
    }
}

/// Result of a shading run.
#[derive(Debug, Clone, PartialEq)]
pub struct Shaded {
    pub image: GrayImage,
    pub tiles: usize,
    pub elapsed: Duration,
    pub warnings: Vec<String>,
}

struct Prepared {
    field: Raster,
    norm: Normalization,
    rows: usize,
    cols: usize,
    warnings: Vec<String>,
}

fn prepare(dem: &DemGrid, options: &ShadeOptions, expected_cell: Option<f64>) -> Result<Prepared> {
    options.validate()?;
    let dem = if options.downsample_factor > 1 {
        downsample(dem, options.downsample_factor)?
    } else {
        dem.clone()
    };
    let mut warnings = Vec::new();
    if let Some(c) = expected_cell {
        if (c - dem.cell_size).abs() > 1e-9 * c.abs().max(1.0) {
            warnings.push(format!(
                "model was trained at cell size {c} m, DEM has {} m; expect a change in detail",
                dem.cell_size
            ));
        }
    }
    let field = normalize(&dem, options.k_min, options.k_max, options.norm_range)?;
    let norm = Normalization {
        source_min: field.source_min,
        source_max: field.source_max,
        k_min: field.k_min,
        k_max: field.k_max,
        cell_size: dem.cell_size,
    };
    let raster = field.to_raster();
    let rotated = if options.rotation_deg.rem_euclid(360.0) == 0.0 {
        raster
    } else {
        rotate(&raster, options.rotation_deg, options.k_min)
    };
    Ok(Prepared {
        field: rotated,
        norm,
        rows: dem.rows,
        cols: dem.cols,
        warnings,
    })
}

fn finish(shaded: Raster, prep: &Prepared, options: &ShadeOptions) -> Result<GrayImage> {
    let back = if options.rotation_deg.rem_euclid(360.0) == 0.0 {
        shaded
    } else {
        rotate_into(&shaded, -options.rotation_deg, 0.0, prep.rows, prep.cols)
    };
    Ok(GrayImage::from_raster_clamped(back))
}

/// Renders a DEM tile by tile: downsample, normalize, rotate, shade
/// overlapping tiles, keep their centres, blend, rotate back.
pub fn shade<S: TileShader + ?Sized>(
    shader: &S,
    dem: &DemGrid,
    options: &ShadeOptions,
) -> Result<Shaded> {
    let start = Instant::now();
    let prep = prepare(dem, options, shader.expected_cell_size())?;
    let (t, crop) = (shader.tile_size(), shader.crop_border());
    let field = &prep.field;
    let plan = plan_tiles(field.rows, field.cols, t, crop, options.blend_width)?;
    let padded = field.pad_replicate(crop, crop, crop, crop);
    let out = plan.out_side;
    let mut asm = Assembler::new(&plan);
    for group in plan.placements.chunks(BATCH) {
        let inputs: Vec<Raster> = group
            .iter()
            .map(|p| padded.window(p.top, p.left, t, t))
            .collect();
        let shaded = shader.shade_tiles(&inputs, &prep.norm)?;
        if shaded.len() != inputs.len() {
            return Err(ReliefError::shape(
                "shader returned the wrong number of tiles",
            ));
        }
        for s in &shaded {
            if (s.rows, s.cols) != (t, t) {
                return Err(ReliefError::shape("shader changed the tile size"));
            }
            asm.add(&s.window(crop, crop, out, out))?;
        }
    }
    let assembled = asm.finish()?;
    let image = finish(assembled, &prep, options)?;
    Ok(Shaded {
        image,
        tiles: plan.placements.len(),
        elapsed: start.elapsed(),
        warnings: prep.warnings,
    })
}

/// Renders a DEM in one network pass. The normalized raster is padded by the
/// crop border, then to a multiple of `2^levels`, by edge replication.
pub fn shade_whole<T: Real>(
    model: &UNet<T>,
    dem: &DemGrid,
    options: &ShadeOptions,
) -> Result<Shaded> {
    let start = Instant::now();
    let prep = prepare(dem, options, model.meta.cell_size)?;
    let crop = model.config().crop_border;
    let d = model.config().divisor();
    let field = &prep.field;
    let (h, w) = (field.rows + 2 * crop, field.cols + 2 * crop);
    let (ph, pw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
    let required = model
        .config()
        .estimate_eval_bytes(ph, pw, std::mem::size_of::<T>());
    if required > options.memory_budget {
        return Err(ReliefError::MemoryBudget {
            required,
            budget: options.memory_budget,
        });
    }
    let padded = field.pad_replicate(crop, crop + ph - h, crop, crop + pw - w);
    let x = Tensor4::from_vec(
        [1, 1, ph, pw],
        padded
            .values
            .iter()
            .map(|&v| T::from_f64_lossy(v))
            .collect(),
    )?;
    let y = model.predict(&x)?;
    let full = Raster {
        rows: ph,
        cols: pw,
        values: y.data().iter().map(|v| v.as_f64()).collect(),
    };
    let inner = full.window(crop, crop, field.rows, field.cols);
    let image = finish(inner, &prep, options)?;
    Ok(Shaded {
        image,
        tiles: 1,
        elapsed: start.elapsed(),
        warnings: prep.warnings,
    })
}
