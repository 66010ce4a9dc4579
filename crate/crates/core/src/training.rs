//! Tile datasets, flat-area augmentation and the optimization loop.
//!
//! Every random draw comes from a stream derived from the run seed and the
//! position in the run (origin period, epoch, batch), so a run can stop
//! after any epoch and resume with an identical trajectory from only the
//! model, optimizer state and loss history.
//!
//! # Checkpoint file
//!
//! | field | type |
//! |---|---|
//! | magic | `b"RLFCKPT\0"` |
//! | version | u32 (1) |
//! | model length, model file | u64, bytes |
//! | epoch, Adam step | u64, u64 |
//! | parameter count `n` | u64 |
//! | parameters, first moments, second moments | `3n` f64 |
//! | history length, losses | u64, f64 each |
//! | checksum | u32 CRC-32 of every preceding byte |

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{ReliefError, Result};
use crate::raster_io::{DemGrid, GrayImage, Raster};
use crate::rng::{derived, SeededRng};
use crate::tensor::{mse_loss, AdamConfig, AdamState, Real, Region, Tensor4};
use crate::terrain::{flat_mask, normalize, vertical_shift, DEFAULT_FLAT_SLOPE_DEG};
use crate::unet::{Cursor, UNet, UNetConfig};

const CKPT_MAGIC: &[u8; 8] = b"RLFCKPT\0";
const CKPT_VERSION: u32 = 1;

// Stream labels for `rng::derived`.
const ORIGIN: u64 = 1;
const SHUFFLE: u64 = 2;
const DROPOUT: u64 = 3;
const FLAT: u64 = 4;
const VSHIFT: u64 = 5;

/// An elevation model and the shading drawn for it, cell for cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub dem: DemGrid,
    pub shading: GrayImage,
}

impl TrainingPair {
    pub fn new(dem: DemGrid, shading: GrayImage) -> Result<Self> {
        if (dem.rows, dem.cols) != (shading.rows, shading.cols) {
            return Err(ReliefError::shape(format!(
                "DEM is {}x{} but shading is {}x{}",
                dem.rows, dem.cols, shading.rows, shading.cols
            )));
        }
        Ok(TrainingPair { dem, shading })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileKind {
    Real,
    FlatSynthetic,
    VerticalShifted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSample {
    /// Normalized elevation, `tile_size` square.
    pub input: Raster,
    pub target: Raster,
    /// Where the loss is measured: the tile minus its crop border.
    pub region: Region,
    pub kind: TileKind,
}

fn loss_region(config: &UNetConfig) -> Region {
    Region::centered(config.tile_size, config.tile_size, config.crop_border)
        .expect("validated configuration")
}

/// Tile count along one axis for a given origin offset.
pub fn tiles_along(extent: usize, origin: usize, tile: usize) -> usize {
    extent.saturating_sub(origin) / tile
}

/// Non-overlapping tiles starting at `origin = (dy, dx)`; windows that would
/// run past the raster are dropped. Elevations are normalized to `[0, 1]`
/// with the pair's own extremes.
pub fn make_tiles(
    pair: &TrainingPair,
    config: &UNetConfig,
    origin: (usize, usize),
) -> Result<Vec<TileSample>> {
    let t = config.tile_size;
    let (dy, dx) = origin;
    if dy >= t || dx >= t {
        return Err(ReliefError::invalid(format!(
            "tiling origin {origin:?} must lie inside the first tile"
        )));
    }
    let (ny, nx) = (
        tiles_along(pair.dem.rows, dy, t),
        tiles_along(pair.dem.cols, dx, t),
    );
    if ny == 0 || nx == 0 {
        return Err(ReliefError::invalid(format!(
            "{}x{} raster holds no {t}x{t} tile at origin {origin:?}",
            pair.dem.rows, pair.dem.cols
        )));
    }
    let field = normalize(&pair.dem, 0.0, 1.0, None)?.to_raster();
    let shading = pair.shading.to_raster();
    let region = loss_region(config);
    let mut out = Vec::with_capacity(ny * nx);
    for i in 0..ny {
        for j in 0..nx {
            let (top, left) = (dy + i * t, dx + j * t);
            out.push(TileSample {
                input: field.window(top, left, t, t),
                target: shading.window(top, left, t, t),
                region,
                kind: TileKind::Real,
            });
        }
    }
    Ok(out)
}

/// Mean shading over the near-flat cells of a pair.
pub fn estimate_flat_tone(pair: &TrainingPair, slope_threshold_deg: f64) -> Result<f64> {
    let mask = flat_mask(&pair.dem, slope_threshold_deg)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (&f, &v) in mask.flat.iter().zip(&pair.shading.values) {
        if f {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(ReliefError::NoFlatCells {
            threshold_deg: slope_threshold_deg,
        });
    }
    Ok(sum / n as f64)
}

/// Constant tiles at uniformly random normalized elevations, all shaded
/// with `flat_tone`.
pub fn make_flat_tiles<R: Rng + ?Sized>(
    count: usize,
    flat_tone: f64,
    rng: &mut R,
    config: &UNetConfig,
) -> Result<Vec<TileSample>> {
    if !(0.0..=1.0).contains(&flat_tone) {
        return Err(ReliefError::invalid(format!(
            "flat tone {flat_tone} outside [0, 1]"
        )));
    }
    let t = config.tile_size;
    let region = loss_region(config);
    Ok((0..count)
        .map(|_| {
            let z: f64 = rng.random();
            TileSample {
                input: Raster::filled(t, t, z),
                target: Raster::filled(t, t, flat_tone),
                region,
                kind: TileKind::FlatSynthetic,
            }
        })
        .collect())
}

/// Settings for [`make_vertical_shift_tiles`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerticalShift {
    /// Share of near-flat tiles to duplicate.
    pub fraction: f64,
    pub max_offset_m: f64,
    pub slope_threshold_deg: f64,
}

/// Duplicates of near-flat tiles (at origin (0, 0), more than half their
/// cells near-flat) raised or lowered by a uniform random offset, then
/// normalized with the pair's range and clamped. Targets are unchanged.
pub fn make_vertical_shift_tiles<R: Rng + ?Sized>(
    pair: &TrainingPair,
    shift: &VerticalShift,
    rng: &mut R,
    config: &UNetConfig,
) -> Result<Vec<TileSample>> {
    if !(0.0..=1.0).contains(&shift.fraction) {
        return Err(ReliefError::invalid(format!(
            "vertical shift fraction {} outside [0, 1]",
            shift.fraction
        )));
    }
    if !(shift.max_offset_m >= 0.0 && shift.max_offset_m.is_finite()) {
        return Err(ReliefError::invalid(
            "maximum offset must be finite and non-negative",
        ));
    }
    if shift.fraction == 0.0 {
        return Ok(Vec::new());
    }
    let t = config.tile_size;
    let range = pair
        .dem
        .valid_range()
        .ok_or_else(|| ReliefError::invalid("DEM has no valid cells"))?;
    let mask = flat_mask(&pair.dem, shift.slope_threshold_deg)?;
    let (ny, nx) = (pair.dem.rows / t, pair.dem.cols / t);
    let mut candidates = Vec::new();
    for i in 0..ny {
        for j in 0..nx {
            let mut flat = 0;
            for r in i * t..(i + 1) * t {
                let row = &mask.flat[r * mask.cols + j * t..r * mask.cols + (j + 1) * t];
                flat += row.iter().filter(|&&f| f).count();
            }
            if 2 * flat > t * t {
                candidates.push((i * t, j * t));
            }
        }
    }
    if candidates.is_empty() {
        return Err(ReliefError::NoFlatCells {
            threshold_deg: shift.slope_threshold_deg,
        });
    }
    let take = ((shift.fraction * candidates.len() as f64).round() as usize).max(1);
    let chosen = rand::seq::index::sample(rng, candidates.len(), take).into_vec();
    let shading = pair.shading.to_raster();
    let dem = pair.dem.to_raster();
    let region = loss_region(config);
    let mut out = Vec::with_capacity(take);
    for k in chosen {
        let (top, left) = candidates[k];
        let offset = if shift.max_offset_m > 0.0 {
            rng.random_range(-shift.max_offset_m..=shift.max_offset_m)
        } else {
            0.0
        };
        let w = dem.window(top, left, t, t);
        let section = DemGrid {
            rows: t,
            cols: t,
            cell_size: pair.dem.cell_size,
            nodata_value: pair.dem.nodata_value,
            origin_x: None,
            origin_y: None,
            values: w.values,
        };
        let shifted = vertical_shift(&section, offset);
        let field = normalize(&shifted, 0.0, 1.0, Some(range))?;
        out.push(TileSample {
            input: field.to_raster(),
            target: shading.window(top, left, t, t),
            region,
            kind: TileKind::VerticalShifted,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs between redraws of the tiling origin.
    pub origin_shift_period: u64,
    /// Number of synthetic flat tiles added to every epoch.
    pub flat_tiles: usize,
    /// Grey used for flat tiles; estimated from the first pair if absent.
    pub flat_tone: Option<f64>,
    pub vertical_shift: Option<VerticalShift>,
    pub slope_threshold_deg: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            batch_size: 8,
            adam: AdamConfig::default(),
            origin_shift_period: 25,
            flat_tiles: 0,
            flat_tone: None,
            vertical_shift: None,
            slope_threshold_deg: DEFAULT_FLAT_SLOPE_DEG,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.origin_shift_period == 0 {
            return Err(ReliefError::invalid(
                "batch size and origin shift period must be at least 1",
            ));
        }
        self.adam.validate()
    }
}

/// Summary of one finished epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    /// One-based epoch number.
    pub epoch: u64,
    pub loss: f64,
    pub tiles: usize,
    pub origin: (usize, usize),
}

/// Everything a run needs to continue: model, optimizer moments, the number
/// of completed epochs and their losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub model: UNet<T>,
    pub adam: AdamState,
    pub epoch: u64,
    pub history: Vec<f64>,
}

/// Fixed augmentation tiles, regenerated identically on resume.
fn augmentation<T: Real>(
    model: &UNet<T>,
    pairs: &[TrainingPair],
    hyper: &TrainHyper,
) -> Result<Vec<TileSample>> {
    let config = model.config();
    let mut out = Vec::new();
    if hyper.flat_tiles > 0 {
        let tone = match hyper.flat_tone {
            Some(t) => t,
            None => estimate_flat_tone(&pairs[0], hyper.slope_threshold_deg)?,
        };
        out.extend(make_flat_tiles(
            hyper.flat_tiles,
            tone,
            &mut derived(hyper.seed, &[FLAT]),
            config,
        )?);
    }
    if let Some(vs) = &hyper.vertical_shift {
        for (i, pair) in pairs.iter().enumerate() {
            let mut rng = derived(hyper.seed, &[VSHIFT, i as u64]);
            out.extend(make_vertical_shift_tiles(pair, vs, &mut rng, config)?);
        }
    }
    Ok(out)
}

fn tile_batch<T: Real>(tiles: &[&TileSample], t: usize) -> (Tensor4<T>, Tensor4<T>) {
    let n = tiles.len();
    let conv = |r: &Raster| {
        r.values
            .iter()
            .map(|&v| T::from_f64_lossy(v))
            .collect::<Vec<_>>()
    };
    let mut x = Vec::with_capacity(n * t * t);
    let mut y = Vec::with_capacity(n * t * t);
    for s in tiles {
        x.extend(conv(&s.input));
        y.extend(conv(&s.target));
    }
    (
        Tensor4::from_vec([n, 1, t, t], x).expect("tile size"),
        Tensor4::from_vec([n, 1, t, t], y).expect("tile size"),
    )
}

impl<T: Real> TrainState<T> {
    pub fn new(model: UNet<T>) -> Self {
        let n = model.param_count();
        TrainState {
            model,
            adam: AdamState::new(n),
            epoch: 0,
            history: Vec::new(),
        }
    }

    /// Trains until `target_epoch` epochs have completed in total.
    pub fn run_until(
        &mut self,
        pairs: &[TrainingPair],
        hyper: &TrainHyper,
        target_epoch: u64,
        mut reporter: impl FnMut(&EpochReport),
    ) -> Result<()> {
        hyper.validate()?;
        if pairs.is_empty() {
            return Err(ReliefError::invalid("training needs at least one pair"));
        }
        if self.epoch >= target_epoch {
            return Ok(());
        }
        let config = self.model.config().clone();
        let t = config.tile_size;
        let extra = augmentation(&self.model, pairs, hyper)?;
        let mut real: Vec<TileSample> = Vec::new();
        let mut origin = (0, 0);
        let mut built_for = None;

        while self.epoch < target_epoch {
            let e = self.epoch;
            let period = e / hyper.origin_shift_period;
            if built_for != Some(period) {
                let mut rng = derived(hyper.seed, &[ORIGIN, period]);
                origin = (rng.random_range(0..t), rng.random_range(0..t));
                real.clear();
                for (i, pair) in pairs.iter().enumerate() {
                    // A pair too small for a shifted grid still trains at (0, 0).
                    let o = if tiles_along(pair.dem.rows, origin.0, t) > 0
                        && tiles_along(pair.dem.cols, origin.1, t) > 0
                    {
                        origin
                    } else {
                        (0, 0)
                    };
                    real.extend(make_tiles(pair, &config, o).map_err(|err| {
                        ReliefError::invalid(format!("training pair {}: {err}", i + 1))
                    })?);
                }
                built_for = Some(period);
            }
            let mut order: Vec<&TileSample> = real.iter().chain(&extra).collect();
            order.shuffle(&mut derived(hyper.seed, &[SHUFFLE, e]));

            let mut weighted = 0.0;
            for (b, batch) in order.chunks(hyper.batch_size).enumerate() {
                let (x, y) = tile_batch::<T>(batch, t);
                let mut rng: SeededRng = derived(hyper.seed, &[DROPOUT, e, b as u64]);
                let (pred, cache) = self.model.forward_train(&x, &mut rng)?;
                let (loss, grad) = mse_loss(&pred, &y, batch[0].region)?;
                if !loss.is_finite() {
                    return Err(ReliefError::NonFinite(format!(
                        "loss {loss} at epoch {}, batch {}",
                        e + 1,
                        b + 1
                    )));
                }
                let grads = self.model.backward(&cache, &grad)?;
                self.model
                    .apply_adam(&grads, &mut self.adam, &hyper.adam)
                    .map_err(|err| match err {
                        ReliefError::NonFinite(m) => ReliefError::NonFinite(format!(
                            "{m} at epoch {}, batch {}",
                            e + 1,
                            b + 1
                        )),
                        other => other,
                    })?;
                weighted += loss * batch.len() as f64;
            }
            let mean = weighted / order.len() as f64;
            self.history.push(mean);
            self.epoch += 1;
            self.stamp(pairs, hyper.seed);
            reporter(&EpochReport {
                epoch: self.epoch,
                loss: mean,
                tiles: order.len(),
                origin,
            });
        }
        Ok(())
    }

    /// Records training provenance on the model.
    fn stamp(&mut self, pairs: &[TrainingPair], seed: u64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in pairs {
            if let Some((a, b)) = p.dem.valid_range() {
                lo = lo.min(a);
                hi = hi.max(b);
            }
        }
        let meta = &mut self.model.meta;
        if lo <= hi {
            meta.norm_min = Some(lo);
            meta.norm_max = Some(hi);
        }
        meta.cell_size = Some(pairs[0].dem.cell_size);
        meta.seed = seed;
        meta.epochs = self.epoch;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CKPT_MAGIC);
        b.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let model = self.model.to_bytes();
        b.extend_from_slice(&(model.len() as u64).to_le_bytes());
        b.extend_from_slice(&model);
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.adam.t.to_le_bytes());
        let params = self.model.flat_params();
        b.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for v in params.iter().chain(&self.adam.m).chain(&self.adam.v) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.history.len() as u64).to_le_bytes());
        for v in &self.history {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    pub fn checkpoint<W: Write>(&self, mut sink: W) -> Result<()> {
        sink.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn resume<R: Read>(mut source: R) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CKPT_MAGIC {
            return Err(ReliefError::format("not a training checkpoint (bad magic)"));
        }
        let mut r = Cursor { bytes, pos: 8 };
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(ReliefError::format(format!(
                "checkpoint version {version}, expected {CKPT_VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let mut model = UNet::<T>::from_bytes(r.take(len)?)?;
        if r.pos + 4 >= bytes.len() {
            return Err(ReliefError::format("checkpoint holds no optimizer state"));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(&bytes[..bytes.len() - 4]) != stored {
            return Err(ReliefError::format("checkpoint checksum mismatch"));
        }
        let epoch = r.u64()?;
        let t = r.u64()?;
        let n = r.u64()? as usize;
        if n != model.param_count() {
            return Err(ReliefError::format(format!(
                "checkpoint optimizer state covers {n} parameters, model has {}",
                model.param_count()
            )));
        }
        let mut read = |k: usize| (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>();
        let params = read(n)?;
        let m = read(n)?;
        let v = read(n)?;
        let h = r.u64()? as usize;
        if h > bytes.len() / 8 {
            return Err(ReliefError::format("implausible history length"));
        }
        let history = (0..h).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if r.pos + 4 != bytes.len() {
            return Err(ReliefError::format("trailing bytes in checkpoint"));
        }
        model.set_flat_params(&params)?;
        Ok(TrainState {
            model,
            adam: AdamState { m, v, t },
            epoch,
            history,
        })
    }
}

/// Trains a model for `epochs` epochs from scratch and returns it with the
/// per-epoch mean losses.
pub fn train<T: Real>(
    model: UNet<T>,
    pairs: &[TrainingPair],
    hyper: &TrainHyper,
    epochs: u64,
    reporter: impl FnMut(&EpochReport),
) -> Result<(UNet<T>, Vec<f64>)> {
    let mut state = TrainState::new(model);
    state.run_until(pairs, hyper, epochs, reporter)?;
    Ok((state.model, state.history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{diffuse_shade, LightVector};
    use crate::rng::seeded;
    use crate::terrain::{synth_terrain, SynthSpec};

    fn cfg(tile: usize) -> UNetConfig {
        UNetConfig {
            levels: 2,
            base_channels: 2,
            dropout_rates: vec![0.0, 0.1],
            tile_size: tile,
            crop_border: tile / 8,
        }
    }

    fn pair(seed: u64, rows: usize, cols: usize) -> TrainingPair {
        let dem = synth_terrain(seed, rows, cols, &SynthSpec::default()).unwrap();
        let shading = diffuse_shade(&dem, &LightVector::default(), 1.0).unwrap();
        TrainingPair::new(dem, shading).unwrap()
    }

    #[test]
    fn tile_counts() {
        let p = pair(1, 40, 50);
        let c = cfg(16);
        assert_eq!(make_tiles(&p, &c, (0, 0)).unwrap().len(), 2 * 3);
        assert_eq!(make_tiles(&p, &c, (9, 3)).unwrap().len(), 2);
        assert!(make_tiles(&p, &c, (16, 0)).is_err());
        let a = make_tiles(&p, &c, (0, 0)).unwrap();
        let b = make_tiles(&p, &c, (1, 0)).unwrap();
        assert_ne!(a[0], b[0]);
        for s in &a {
            assert!(s
                .input
                .values
                .iter()
                .chain(&s.target.values)
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mismatched_pair_rejected() {
        let p = pair(1, 20, 20);
        let img = GrayImage::new(20, 21, vec![0.5; 420]).unwrap();
        assert!(TrainingPair::new(p.dem, img).is_err());
    }

    #[test]
    fn flat_tone_examples() {
        let dem = DemGrid::new(10, 10, 30.0, vec![100.0; 100]).unwrap();
        let shading = GrayImage::new(10, 10, vec![0.7; 100]).unwrap();
        let p = TrainingPair::new(dem, shading).unwrap();
        assert!((estimate_flat_tone(&p, 1.5).unwrap() - 0.7).abs() < 1e-12);

        let steep = pair(3, 20, 20);
        let steep = TrainingPair::new(
            steep
                .dem
                .with_values(steep.dem.values.iter().map(|v| v * 50.0).collect()),
            steep.shading,
        )
        .unwrap();
        assert!(matches!(
            estimate_flat_tone(&steep, 0.01),
            Err(ReliefError::NoFlatCells { .. })
        ));
    }

    #[test]
    fn flat_tiles_are_constant() {
        let c = cfg(16);
        assert!(make_flat_tiles(0, 0.6, &mut seeded(1), &c)
            .unwrap()
            .is_empty());
        let tiles = make_flat_tiles(20, 0.6, &mut seeded(1), &c).unwrap();
        for s in &tiles {
            assert!(s.target.values.iter().all(|&v| v == 0.6));
            let z = s.input.values[0];
            assert!(s.input.values.iter().all(|&v| v == z));
            assert_eq!(s.kind, TileKind::FlatSynthetic);
        }
    }

    fn flat_pair() -> TrainingPair {
        let spec = SynthSpec {
            flat_fraction: 0.6,
            ..SynthSpec::default()
        };
        let dem = synth_terrain(7, 48, 48, &spec).unwrap();
        let shading = diffuse_shade(&dem, &LightVector::default(), 1.0).unwrap();
        TrainingPair::new(dem, shading).unwrap()
    }

    #[test]
    fn vertical_shift_tiles() {
        let p = flat_pair();
        let c = cfg(16);
        let none = VerticalShift {
            fraction: 0.0,
            max_offset_m: 50.0,
            slope_threshold_deg: 1.5,
        };
        assert!(make_vertical_shift_tiles(&p, &none, &mut seeded(1), &c)
            .unwrap()
            .is_empty());
        let zero = VerticalShift {
            fraction: 1.0,
            max_offset_m: 0.0,
            slope_threshold_deg: 1.5,
        };
        let dup = make_vertical_shift_tiles(&p, &zero, &mut seeded(1), &c).unwrap();
        assert!(!dup.is_empty());
        let real = make_tiles(&p, &c, (0, 0)).unwrap();
        for s in &dup {
            assert_eq!(s.kind, TileKind::VerticalShifted);
            let twin = real.iter().find(|r| r.target == s.target).unwrap();
            assert_eq!(twin.input, s.input);
        }
        let shifted = VerticalShift {
            max_offset_m: 80.0,
            ..zero
        };
        for s in make_vertical_shift_tiles(&p, &shifted, &mut seeded(2), &c).unwrap() {
            assert!(s.input.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let c = cfg(16);
        let m = UNet::<f32>::build(c, &mut seeded(2)).unwrap();
        let (trained, hist) = train(
            m.clone(),
            &[pair(1, 32, 32)],
            &TrainHyper::default(),
            0,
            |_| {},
        )
        .unwrap();
        assert_eq!(trained, m);
        assert!(hist.is_empty());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let c = cfg(16);
        let m = UNet::<f32>::build(c, &mut seeded(2)).unwrap();
        let state = TrainState::new(m);
        let bytes = state.to_bytes();
        assert_eq!(TrainState::<f32>::from_bytes(&bytes).unwrap(), state);
        // Model but no optimizer section.
        let model_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let cut = &bytes[..20 + model_len];
        let err = TrainState::<f32>::from_bytes(cut).unwrap_err();
        assert!(err.to_string().contains("optimizer"), "{err}");
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 12] ^= 0x40;
        assert!(TrainState::<f32>::from_bytes(&bad).is_err());
    }
}
