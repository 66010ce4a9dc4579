//! Elevation and grayscale rasters, and their on-disk formats.
//!
//! DEMs travel as ESRI ASCII grids; shadings as 8-bit grayscale binary PGM
//! (P5) or PNG. Row 0 is always the northernmost row, i.e. the first data row
//! of an ASCII grid and the top scanline of an image.

use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{ReliefError, Result};

/// Plain row-major grid of reals with no range constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(ReliefError::invalid("raster dimensions must be positive"));
        }
        if values.len() != rows * cols {
            return Err(ReliefError::shape(format!(
                "{} values for a {rows}x{cols} raster",
                values.len()
            )));
        }
        Ok(Raster { rows, cols, values })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Raster {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.cols + col] = v;
    }

    /// Sub-window copy; the window must lie inside the raster.
    pub fn window(&self, top: usize, left: usize, rows: usize, cols: usize) -> Raster {
        assert!(top + rows <= self.rows && left + cols <= self.cols);
        let mut values = Vec::with_capacity(rows * cols);
        for r in top..top + rows {
            let start = r * self.cols + left;
            values.extend_from_slice(&self.values[start..start + cols]);
        }
        Raster { rows, cols, values }
    }

    /// Pads every side by the given amounts, replicating edge cells.
    pub fn pad_replicate(&self, top: usize, bottom: usize, left: usize, right: usize) -> Raster {
        let rows = self.rows + top + bottom;
        let cols = self.cols + left + right;
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let sr = r.saturating_sub(top).min(self.rows - 1);
            for c in 0..cols {
                let sc = c.saturating_sub(left).min(self.cols - 1);
                values.push(self.get(sr, sc));
            }
        }
        Raster { rows, cols, values }
    }
}

/// Georeferenced elevation raster.
#[derive(Debug, Clone, PartialEq)]
pub struct DemGrid {
    pub rows: usize,
    pub cols: usize,
    /// Ground distance of one cell in meters.
    pub cell_size: f64,
    pub nodata_value: Option<f64>,
    /// Map x coordinate of the lower-left corner.
    pub origin_x: Option<f64>,
    /// Map y coordinate of the lower-left corner.
    pub origin_y: Option<f64>,
    /// Elevations in meters, row-major, northernmost row first.
    pub values: Vec<f64>,
}

impl DemGrid {
    /// Builds a grid without georeferencing or nodata, validating invariants.
    pub fn new(rows: usize, cols: usize, cell_size: f64, values: Vec<f64>) -> Result<Self> {
        let grid = DemGrid {
            rows,
            cols,
            cell_size,
            nodata_value: None,
            origin_x: None,
            origin_y: None,
            values,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(ReliefError::invalid("DEM dimensions must be positive"));
        }
        if self.values.len() != self.rows * self.cols {
            return Err(ReliefError::shape(format!(
                "{} values for a {}x{} DEM",
                self.values.len(),
                self.rows,
                self.cols
            )));
        }
        if !(self.cell_size.is_finite() && self.cell_size > 0.0) {
            return Err(ReliefError::invalid(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        if let Some(nd) = self.nodata_value {
            if nd.is_nan() {
                return Err(ReliefError::invalid("nodata sentinel must not be NaN"));
            }
        }
        if let Some(i) = self
            .values
            .iter()
            .position(|&v| !self.is_nodata(v) && !v.is_finite())
        {
            return Err(ReliefError::NonFinite(format!(
                "DEM cell ({}, {}) is {}",
                i / self.cols,
                i % self.cols,
                self.values[i]
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn is_nodata(&self, v: f64) -> bool {
        self.nodata_value == Some(v)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Minimum and maximum over valid cells, or `None` if every cell is nodata.
    pub fn valid_range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .filter(|&&v| !self.is_nodata(v))
            .fold(None, |acc, &v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// Copy with the same geometry but new values.
    pub fn with_values(&self, values: Vec<f64>) -> DemGrid {
        assert_eq!(values.len(), self.values.len());
        DemGrid {
            values,
            ..self.clone()
        }
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            rows: self.rows,
            cols: self.cols,
            values: self.values.clone(),
        }
    }
}

/// Grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl GrayImage {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(ReliefError::invalid("image dimensions must be positive"));
        }
        if values.len() != rows * cols {
            return Err(ReliefError::shape(format!(
                "{} values for a {rows}x{cols} image",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ReliefError::invalid(format!(
                "gray value {v} outside [0, 1]"
            )));
        }
        Ok(GrayImage { rows, cols, values })
    }

    /// Converts a raster by clamping every value into `[0, 1]`.
    pub fn from_raster_clamped(r: Raster) -> Self {
        let values = r.values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        GrayImage {
            rows: r.rows,
            cols: r.cols,
            values,
        }
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            rows: self.rows,
            cols: self.cols,
            values: self.values.clone(),
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// 8-bit grey levels, `round(v * 255)` with halves rounded up.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|&v| quantize(v)).collect()
    }
}

/// Maps a value in `[0, 1]` to its 8-bit grey level (round half up).
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Png,
}

impl std::str::FromStr for ImageFormat {
    type Err = ReliefError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pgm" => Ok(ImageFormat::Pgm),
            "png" => Ok(ImageFormat::Png),
            other => Err(ReliefError::invalid(format!(
                "unknown image format '{other}'"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// ESRI ASCII grid

#[derive(Default)]
struct AsciiHeader {
    ncols: Option<usize>,
    nrows: Option<usize>,
    cellsize: Option<f64>,
    xll: Option<f64>,
    yll: Option<f64>,
    nodata: Option<f64>,
}

fn parse_err(line: usize, token: usize, message: impl Into<String>) -> ReliefError {
    ReliefError::Parse {
        line,
        token,
        message: message.into(),
    }
}

fn looks_numeric(tok: &str) -> bool {
    tok.parse::<f64>().is_ok()
}

/// Reads an ESRI ASCII grid.
///
/// Header keys are matched case-insensitively; `xllcorner`, `yllcorner` and
/// `NODATA_value` are optional. The header ends at the first line whose first
/// token is numeric.
pub fn read_ascii_grid<R: Read>(source: R) -> Result<DemGrid> {
    let reader = BufReader::new(source);
    let mut header = AsciiHeader::default();
    let mut values: Vec<f64> = Vec::new();
    let mut in_body = false;
    let mut expected = 0usize;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let mut tokens = line.split_whitespace().peekable();
        let Some(first) = tokens.peek().copied() else {
            continue;
        };

        if !in_body && !looks_numeric(first) {
            let key = first.to_ascii_lowercase();
            tokens.next();
            let value = tokens.next().ok_or_else(|| {
                parse_err(line_no, 2, format!("header key '{first}' has no value"))
            })?;
            if tokens.next().is_some() {
                return Err(parse_err(line_no, 3, "trailing tokens after header value"));
            }
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| parse_err(line_no, 2, format!("'{v}' is not a number")))
            };
            let count = |v: &str| -> Result<usize> {
                let n = num(v)?;
                if n.fract() != 0.0 || n < 1.0 {
                    return Err(parse_err(
                        line_no,
                        2,
                        format!("{key} must be a positive integer, got {v}"),
                    ));
                }
                Ok(n as usize)
            };
            match key.as_str() {
                "ncols" => header.ncols = Some(count(value)?),
                "nrows" => header.nrows = Some(count(value)?),
                "cellsize" => {
                    let c = num(value)?;
                    if !(c.is_finite() && c > 0.0) {
                        return Err(parse_err(
                            line_no,
                            2,
                            format!("cellsize must be positive, got {value}"),
                        ));
                    }
                    header.cellsize = Some(c);
                }
                "xllcorner" => header.xll = Some(num(value)?),
                "yllcorner" => header.yll = Some(num(value)?),
                "nodata_value" => {
                    let nd = num(value)?;
                    if nd.is_nan() {
                        return Err(parse_err(line_no, 2, "NODATA_value must not be NaN"));
                    }
                    header.nodata = Some(nd);
                }
                _ => {
                    return Err(parse_err(
                        line_no,
                        1,
                        format!("unknown header key '{first}'"),
                    ))
                }
            }
            continue;
        }

        if !in_body {
            let (Some(nc), Some(nr)) = (header.ncols, header.nrows) else {
                return Err(parse_err(line_no, 1, "data before ncols/nrows header"));
            };
            if header.cellsize.is_none() {
                return Err(parse_err(line_no, 1, "data before cellsize header"));
            }
            expected = nc * nr;
            values.reserve(expected);
            in_body = true;
        }

        for (t, tok) in tokens.enumerate() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(line_no, t + 1, format!("'{tok}' is not a number")))?;
            if header.nodata != Some(v) && !v.is_finite() {
                return Err(parse_err(
                    line_no,
                    t + 1,
                    format!("non-finite elevation '{tok}'"),
                ));
            }
            if values.len() == expected {
                return Err(parse_err(
                    line_no,
                    t + 1,
                    format!("more than the {expected} values declared by the header"),
                ));
            }
            values.push(v);
        }
    }

    let (Some(cols), Some(rows), Some(cell_size)) = (header.ncols, header.nrows, header.cellsize)
    else {
        return Err(ReliefError::format(
            "ASCII grid header is missing ncols, nrows or cellsize",
        ));
    };
    if values.len() != rows * cols {
        return Err(ReliefError::format(format!(
            "header declares {rows}x{cols} = {} values, body has {}",
            rows * cols,
            values.len()
        )));
    }
    let grid = DemGrid {
        rows,
        cols,
        cell_size,
        nodata_value: header.nodata,
        origin_x: header.xll,
        origin_y: header.yll,
        values,
    };
    grid.validate()?;
    Ok(grid)
}

/// Writes an ESRI ASCII grid. Values use the shortest decimal form that
/// parses back to the identical `f64`.
pub fn write_ascii_grid<W: Write>(grid: &DemGrid, sink: W) -> Result<()> {
    grid.validate()?;
    let mut w = std::io::BufWriter::new(sink);
    writeln!(w, "ncols {}", grid.cols)?;
    writeln!(w, "nrows {}", grid.rows)?;
    if let Some(x) = grid.origin_x {
        writeln!(w, "xllcorner {x:?}")?;
    }
    if let Some(y) = grid.origin_y {
        writeln!(w, "yllcorner {y:?}")?;
    }
    writeln!(w, "cellsize {:?}", grid.cell_size)?;
    if let Some(nd) = grid.nodata_value {
        writeln!(w, "NODATA_value {nd:?}")?;
    }
    for row in grid.values.chunks(grid.cols) {
        let mut first = true;
        for v in row {
            if !first {
                w.write_all(b" ")?;
            }
            first = false;
            write!(w, "{v}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Gray images

pub fn write_gray_image<W: Write>(img: &GrayImage, mut sink: W, format: ImageFormat) -> Result<()> {
    let bytes = img.to_bytes();
    match format {
        ImageFormat::Pgm => {
            write!(sink, "P5\n{} {}\n255\n", img.cols, img.rows)?;
            sink.write_all(&bytes)?;
            sink.flush()?;
        }
        ImageFormat::Png => {
            let mut enc = png::Encoder::new(sink, img.cols as u32, img.rows as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(png_err)?;
            writer.write_image_data(&bytes).map_err(png_err)?;
            writer.finish().map_err(png_err)?;
        }
    }
    Ok(())
}

fn png_err(e: png::EncodingError) -> ReliefError {
    match e {
        png::EncodingError::IoError(io) => ReliefError::Io(io),
        other => ReliefError::format(other.to_string()),
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Reads an 8-bit grayscale PGM (P5) or PNG; byte `b` becomes `b / 255`.
pub fn read_gray_image<R: Read>(mut source: R) -> Result<GrayImage> {
    let mut data = Vec::new();
    source.read_to_end(&mut data)?;
    if data.starts_with(&PNG_SIGNATURE) {
        read_png(&data)
    } else if data.starts_with(b"P5") {
        read_pgm(&data)
    } else if data.starts_with(b"P2") || data.starts_with(b"P6") || data.starts_with(b"P3") {
        Err(ReliefError::Unsupported(
            "only binary grayscale PGM (P5) is supported".into(),
        ))
    } else {
        Err(ReliefError::format("not a PGM or PNG stream"))
    }
}

fn read_pgm(data: &[u8]) -> Result<GrayImage> {
    // Header: magic, width, height, maxval, separated by whitespace with
    // optional '#' comments, then exactly one whitespace byte.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match data.get(pos) {
                Some(b'#') => {
                    while data.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ReliefError::format("truncated PGM header")),
            }
        }
        let start = pos;
        while data.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(ReliefError::format("malformed PGM header"));
        }
        *field = std::str::from_utf8(&data[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ReliefError::format("malformed PGM header number"))?;
    }
    let [cols, rows, maxval] = fields;
    if maxval != 255 {
        return Err(ReliefError::Unsupported(format!(
            "PGM maxval {maxval}; only 8-bit (255) is supported"
        )));
    }
    if !data.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(ReliefError::format("malformed PGM header terminator"));
    }
    pos += 1;
    let n = rows * cols;
    let pixels = data
        .get(pos..pos + n)
        .ok_or_else(|| ReliefError::format(format!("truncated PGM: expected {n} pixel bytes")))?;
    GrayImage::new(
        rows,
        cols,
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

fn read_png(data: &[u8]) -> Result<GrayImage> {
    let decoder = png::Decoder::new(std::io::Cursor::new(data));
    let mut reader = decoder
        .read_info()
        .map_err(|e| ReliefError::format(format!("PNG: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale {
        return Err(ReliefError::Unsupported(format!(
            "PNG color type {:?}; only grayscale is supported",
            info.color_type
        )));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ReliefError::Unsupported(format!(
            "PNG bit depth {:?}; only 8-bit is supported",
            info.bit_depth
        )));
    }
    let (cols, rows) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(rows * cols)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| ReliefError::format(format!("PNG: {e}")))?;
    let bytes = &buf[..frame.buffer_size()];
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let line = &bytes[r * frame.line_size..r * frame.line_size + cols];
        values.extend(line.iter().map(|&b| b as f64 / 255.0));
    }
    GrayImage::new(rows, cols, values)
}
