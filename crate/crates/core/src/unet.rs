//! The U-Net: five-level encoder/decoder with skip concatenation, dropout at
//! every level and a linear single-channel output.
//!
//! Convolution layers are stored in one flat list whose order is also the
//! file order:
//!
//! 1. `enc{l}.conv1`, `enc{l}.conv2` for `l = 0..levels`
//! 2. `bottleneck.conv1`, `bottleneck.conv2`
//! 3. `dec{l}.up`, `dec{l}.conv1`, `dec{l}.conv2` for `l = levels-1 ..= 0`
//! 4. `final`
//!
//! # Model file
//!
//! All integers and floats little-endian.
//!
//! | field | type |
//! |---|---|
//! | magic | `b"RLFUNET\0"` |
//! | version | u32 (1) |
//! | levels, base_channels | u32, u32 |
//! | dropout count, rates | u32, f64 each |
//! | tile_size, crop_border | u32, u32 |
//! | norm_min, norm_max, cell_size | u8 presence flag + f64 each |
//! | seed, epochs | u64, u64 |
//! | parameter count | u64 |
//! | parameters | f32 each; per layer the weights `(out, in, 3, 3)` then the bias |
//! | checksum | u32 CRC-32 of every preceding byte |

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{ReliefError, Result};
use crate::tensor::{
    adam_step, clip01, concat_channels, conv2d_backward, conv2d_forward, dropout, dropout_backward,
    he_init, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, split_channels,
    upsample2_backward, upsample2_forward, AdamConfig, AdamState, ConvGrads, ConvParams,
    DropoutMask, Mode, ParamGroupMut, PoolIndices, Real, Tensor4,
};

const MAGIC: &[u8; 8] = b"RLFUNET\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// One rate per level, outermost first.
    pub dropout_rates: Vec<f64>,
    pub tile_size: usize,
    pub crop_border: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 5,
            base_channels: 16,
            dropout_rates: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            tile_size: 256,
            crop_border: 50,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(ReliefError::invalid(
                "levels and base channels must be positive",
            ));
        }
        if self.levels > 16 {
            return Err(ReliefError::invalid(format!(
                "{} levels is too deep",
                self.levels
            )));
        }
        if !self.tile_size.is_power_of_two() || self.tile_size >> self.levels < 4 {
            return Err(ReliefError::invalid(format!(
                "tile size {} must be a power of two with at least 4 cells after {} poolings",
                self.tile_size, self.levels
            )));
        }
        if 2 * self.crop_border >= self.tile_size {
            return Err(ReliefError::invalid(format!(
                "crop border {} leaves nothing of a {} tile",
                self.crop_border, self.tile_size
            )));
        }
        if self.dropout_rates.len() != self.levels {
            return Err(ReliefError::invalid(format!(
                "{} dropout rates for {} levels",
                self.dropout_rates.len(),
                self.levels
            )));
        }
        for (i, &r) in self.dropout_rates.iter().enumerate() {
            if !(0.0..1.0).contains(&r) {
                return Err(ReliefError::invalid(format!(
                    "dropout rate {r} not in [0, 1)"
                )));
            }
            if i > 0 && r < self.dropout_rates[i - 1] {
                return Err(ReliefError::invalid(
                    "dropout rates must not decrease towards the innermost level",
                ));
            }
        }
        Ok(())
    }

    /// Feature channels at `level`; `level == levels` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Side of the centre crop kept from each tile.
    pub fn out_side(&self) -> usize {
        self.tile_size - 2 * self.crop_border
    }

    /// Required divisor of input height and width.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    /// `(name, in_channels, out_channels)` for every layer in storage order.
    pub fn layer_specs(&self) -> Vec<(String, usize, usize)> {
        let l_n = self.levels;
        let mut v = Vec::with_capacity(5 * l_n + 3);
        for l in 0..l_n {
            let cin = if l == 0 { 1 } else { self.channels(l - 1) };
            v.push((format!("enc{l}.conv1"), cin, self.channels(l)));
            v.push((format!("enc{l}.conv2"), self.channels(l), self.channels(l)));
        }
        v.push((
            "bottleneck.conv1".into(),
            self.channels(l_n - 1),
            self.channels(l_n),
        ));
        v.push((
            "bottleneck.conv2".into(),
            self.channels(l_n),
            self.channels(l_n),
        ));
        for l in (0..l_n).rev() {
            let c = self.channels(l);
            v.push((format!("dec{l}.up"), self.channels(l + 1), c));
            v.push((format!("dec{l}.conv1"), 2 * c, c));
            v.push((format!("dec{l}.conv2"), c, c));
        }
        v.push(("final".into(), self.channels(0), 1));
        v
    }

    pub fn param_count(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|(_, i, o)| o * i * 9 + o)
            .sum()
    }

    /// Radius, in input cells, beyond which an input change cannot reach an
    /// output cell. Each 3x3 convolution at scale `s` adds `s`, a pooling
    /// step at scale `s` adds `s` and an upsampling to scale `s` adds `s`.
    pub fn receptive_field_radius(&self) -> usize {
        let mut r = 0;
        for l in 0..self.levels {
            r += 3 << l; // two convolutions and the pool
        }
        r += 2 << self.levels;
        for l in 0..self.levels {
            r += 4 << l; // upsampling, up convolution and two convolutions
        }
        r + 1
    }

    /// Rough peak bytes for an evaluation pass on an `h x w` input with
    /// `scalar_bytes` per value: the skip tensors plus the largest single
    /// convolution working set (input, unfolded columns, output).
    pub fn estimate_eval_bytes(&self, h: usize, w: usize, scalar_bytes: usize) -> u64 {
        let mut skips = 0u64;
        for l in 0..self.levels {
            skips += (self.channels(l) * (h >> l) * (w >> l)) as u64;
        }
        let mut peak = 0u64;
        for (name, cin, cout) in self.layer_specs() {
            let level = layer_level(&name, self.levels);
            let hw = ((h >> level) * (w >> level)) as u64;
            peak = peak.max(hw * (cin as u64 * 10 + cout as u64 + 2 * cin as u64));
        }
        (skips + peak) * scalar_bytes as u64
    }
}

fn layer_level(name: &str, levels: usize) -> usize {
    if name == "final" {
        return 0;
    }
    if name.starts_with("bottleneck") {
        return levels;
    }
    name[3..]
        .split('.')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Provenance of a model: the normalization range and cell size of its
/// training data, its seed and the number of epochs trained.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelMeta {
    pub norm_min: Option<f64>,
    pub norm_max: Option<f64>,
    pub cell_size: Option<f64>,
    pub seed: u64,
    pub epochs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    layers: Vec<ConvParams<T>>,
    pub meta: ModelMeta,
}

/// Single-precision model, the default for training and inference.
pub type UNetModel = UNet<f32>;

/// Activations recorded by a training forward pass.
pub struct ForwardCache<T> {
    input_shape: [usize; 4],
    /// Input of every layer, by layer index.
    layer_inputs: Vec<Tensor4<T>>,
    /// Output of every layer that feeds a ReLU, by layer index.
    pre_relu: Vec<Option<Tensor4<T>>>,
    /// Encoder levels, then the bottleneck, then decoder levels innermost
    /// first.
    masks: Vec<DropoutMask<T>>,
    pools: Vec<PoolIndices>,
}

struct Idx {
    levels: usize,
}

impl Idx {
    fn enc(&self, l: usize, j: usize) -> usize {
        2 * l + j
    }
    fn bott(&self, j: usize) -> usize {
        2 * self.levels + j
    }
    fn dec(&self, l: usize, j: usize) -> usize {
        2 * self.levels + 2 + 3 * (self.levels - 1 - l) + j
    }
    fn last(&self) -> usize {
        5 * self.levels + 2
    }
}

impl<T: Real> UNet<T> {
    /// He-initialized weights and zero biases, drawn layer by layer.
    pub fn build<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_specs()
            .into_iter()
            .map(|(_, i, o)| he_init(o, i, rng))
            .collect();
        Ok(UNet {
            config,
            layers,
            meta: ModelMeta::default(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvParams<T>] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvParams::param_count).sum()
    }

    /// All parameters in file order, widened to `f64`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for p in &self.layers {
            v.extend(p.weight.iter().chain(&p.bias).map(|x| x.as_f64()));
        }
        v
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(ReliefError::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut it = values.iter();
        for p in &mut self.layers {
            for x in p.weight.iter_mut().chain(p.bias.iter_mut()) {
                *x = T::from_f64_lossy(*it.next().expect("length checked"));
            }
        }
        Ok(())
    }

    /// Same network at another precision.
    pub fn cast<U: Real>(&self) -> UNet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
        UNet {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|p| ConvParams {
                    out_channels: p.out_channels,
                    in_channels: p.in_channels,
                    weight: conv(&p.weight),
                    bias: conv(&p.bias),
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        let [_, c, h, w] = input.shape();
        let d = self.config.divisor();
        if c != 1 {
            return Err(ReliefError::shape(format!(
                "expected 1 input channel, got {c}"
            )));
        }
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(ReliefError::shape(format!(
                "input {h}x{w} is not divisible by {d}"
            )));
        }
        if let Some(v) = input
            .data()
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(ReliefError::invalid(format!(
                "input value {v:?} outside [0, 1]"
            )));
        }
        Ok(())
    }

    /// Runs the network. Evaluation clips the output to `[0, 1]`; training
    /// applies dropout and returns the raw linear output.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &Tensor4<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor4<T>> {
        let out = self.run(input, mode, rng, None)?;
        Ok(match mode {
            Mode::Eval => clip01(&out),
            Mode::Train => out,
        })
    }

    /// Evaluation pass; needs no random stream.
    pub fn predict(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut rng = crate::rng::seeded(0);
        self.forward(input, Mode::Eval, &mut rng)
    }

    /// Training pass that records what [`UNet::backward`] needs.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        input: &Tensor4<T>,
        rng: &mut R,
    ) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        let n = self.layers.len();
        let mut cache = ForwardCache {
            input_shape: input.shape(),
            layer_inputs: Vec::with_capacity(n),
            pre_relu: Vec::with_capacity(n),
            masks: Vec::new(),
            pools: Vec::new(),
        };
        let out = self.run(input, Mode::Train, rng, Some(&mut cache))?;
        Ok((out, cache))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        input: &Tensor4<T>,
        mode: Mode,
        rng: &mut R,
        mut cache: Option<&mut ForwardCache<T>>,
    ) -> Result<Tensor4<T>> {
        self.check_input(input)?;
        let ix = Idx {
            levels: self.config.levels,
        };
        let rates = &self.config.dropout_rates;

        // conv followed by ReLU, recording input and pre-activation.
        let conv_relu = |i: usize, x: Tensor4<T>, cache: &mut Option<&mut ForwardCache<T>>| {
            let y = conv2d_forward(&x, &self.layers[i])?;
            let a = relu_forward(&y);
            if let Some(c) = cache.as_deref_mut() {
                c.layer_inputs.push(x);
                c.pre_relu.push(Some(y));
            }
            Ok::<_, ReliefError>(a)
        };
        let drop_out =
            |x: Tensor4<T>, rate: f64, rng: &mut R, cache: &mut Option<&mut ForwardCache<T>>| {
                let (y, mask) = dropout(&x, rate, rng, mode)?;
                if let Some(c) = cache.as_deref_mut() {
                    c.masks.push(mask);
                }
                Ok::<_, ReliefError>(y)
            };

        let mut skips = Vec::with_capacity(ix.levels);
        let mut x = input.clone();
        for (l, &rate) in rates.iter().enumerate().take(ix.levels) {
            x = conv_relu(ix.enc(l, 0), x, &mut cache)?;
            x = conv_relu(ix.enc(l, 1), x, &mut cache)?;
            x = drop_out(x, rate, rng, &mut cache)?;
            let (p, idx) = maxpool2_forward(&x)?;
            if let Some(c) = cache.as_deref_mut() {
                c.pools.push(idx);
            }
            skips.push(x);
            x = p;
        }
        x = conv_relu(ix.bott(0), x, &mut cache)?;
        x = conv_relu(ix.bott(1), x, &mut cache)?;
        x = drop_out(x, rates[ix.levels - 1], rng, &mut cache)?;
        for l in (0..ix.levels).rev() {
            let up = upsample2_forward(&x);
            let u = conv_relu(ix.dec(l, 0), up, &mut cache)?;
            let skip = skips.pop().expect("one skip per level");
            x = concat_channels(&skip, &u)?;
            drop(skip);
            drop(u);
            x = conv_relu(ix.dec(l, 1), x, &mut cache)?;
            x = conv_relu(ix.dec(l, 2), x, &mut cache)?;
            x = drop_out(x, rates[l], rng, &mut cache)?;
        }
        let out = conv2d_forward(&x, &self.layers[ix.last()])?;
        if let Some(c) = cache {
            c.layer_inputs.push(x);
            c.pre_relu.push(None);
        }
        Ok(out)
    }

    /// Parameter gradients for a recorded training pass, one entry per
    /// layer in storage order.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_out: &Tensor4<T>,
    ) -> Result<Vec<ConvGrads<T>>> {
        let ix = Idx {
            levels: self.config.levels,
        };
        let n_layers = self.layers.len();
        if cache.layer_inputs.len() != n_layers
            || cache.masks.len() != 2 * ix.levels + 1
            || cache.pools.len() != ix.levels
        {
            return Err(ReliefError::invalid(
                "activation cache does not belong to this network",
            ));
        }
        let [n, _, h, w] = cache.input_shape;
        if grad_out.shape() != [n, 1, h, w] {
            return Err(ReliefError::shape(format!(
                "output gradient {:?} for input {:?}",
                grad_out.shape(),
                cache.input_shape
            )));
        }
        let mut grads: Vec<Option<ConvGrads<T>>> = (0..n_layers).map(|_| None).collect();

        let conv_back = |i: usize, g: &Tensor4<T>, grads: &mut Vec<Option<ConvGrads<T>>>| {
            let (gi, gp) = conv2d_backward(&cache.layer_inputs[i], &self.layers[i], g)?;
            grads[i] = Some(gp);
            Ok::<_, ReliefError>(gi)
        };
        let conv_relu_back = |i: usize, g: &Tensor4<T>, grads: &mut Vec<Option<ConvGrads<T>>>| {
            let pre = cache.pre_relu[i]
                .as_ref()
                .ok_or_else(|| ReliefError::invalid("missing activation"))?;
            let g = relu_backward(pre, g)?;
            conv_back(i, &g, grads)
        };

        let mut g = conv_back(ix.last(), grad_out, &mut grads)?;
        let mut skip_grads: Vec<Tensor4<T>> = Vec::with_capacity(ix.levels);
        for l in 0..ix.levels {
            let mask = &cache.masks[ix.levels + 1 + (ix.levels - 1 - l)];
            g = dropout_backward(&g, mask)?;
            g = conv_relu_back(ix.dec(l, 2), &g, &mut grads)?;
            g = conv_relu_back(ix.dec(l, 1), &g, &mut grads)?;
            let (gskip, gu) = split_channels(&g, self.config.channels(l))?;
            skip_grads.push(gskip);
            let gup = conv_relu_back(ix.dec(l, 0), &gu, &mut grads)?;
            g = upsample2_backward(&gup)?;
        }
        g = dropout_backward(&g, &cache.masks[ix.levels])?;
        g = conv_relu_back(ix.bott(1), &g, &mut grads)?;
        g = conv_relu_back(ix.bott(0), &g, &mut grads)?;
        for l in (0..ix.levels).rev() {
            let mut gx = maxpool2_backward(&g, &cache.pools[l])?;
            let gskip = &skip_grads[l];
            if gskip.shape() != gx.shape() {
                return Err(ReliefError::shape("skip gradient shape mismatch"));
            }
            for (a, b) in gx.data_mut().iter_mut().zip(gskip.data()) {
                *a += *b;
            }
            g = dropout_backward(&gx, &cache.masks[l])?;
            g = conv_relu_back(ix.enc(l, 1), &g, &mut grads)?;
            g = conv_relu_back(ix.enc(l, 0), &g, &mut grads)?;
        }
        Ok(grads
            .into_iter()
            .map(|g| g.expect("every layer visited"))
            .collect())
    }

    /// One optimizer step over all layers.
    pub fn apply_adam(
        &mut self,
        grads: &[ConvGrads<T>],
        state: &mut AdamState,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(ReliefError::shape(format!(
                "{} gradient layers for {} network layers",
                grads.len(),
                self.layers.len()
            )));
        }
        let names = self.config.layer_specs();
        let mut groups = Vec::with_capacity(2 * grads.len());
        for ((p, g), (name, _, _)) in self.layers.iter_mut().zip(grads).zip(&names) {
            groups.push(ParamGroupMut {
                name: format!("{name}.weight"),
                params: &mut p.weight,
                grads: &g.weight,
            });
            groups.push(ParamGroupMut {
                name: format!("{name}.bias"),
                params: &mut p.bias,
                grads: &g.bias,
            });
        }
        adam_step(&mut groups, state, cfg)
    }

    pub fn save<W: Write>(&self, mut sink: W) -> Result<()> {
        sink.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 4 * self.param_count());
        b.extend_from_slice(MAGIC);
        put_u32(&mut b, VERSION);
        let c = &self.config;
        put_u32(&mut b, c.levels as u32);
        put_u32(&mut b, c.base_channels as u32);
        put_u32(&mut b, c.dropout_rates.len() as u32);
        for r in &c.dropout_rates {
            b.extend_from_slice(&r.to_le_bytes());
        }
        put_u32(&mut b, c.tile_size as u32);
        put_u32(&mut b, c.crop_border as u32);
        for v in [self.meta.norm_min, self.meta.norm_max, self.meta.cell_size] {
            b.push(v.is_some() as u8);
            b.extend_from_slice(&v.unwrap_or(0.0).to_le_bytes());
        }
        b.extend_from_slice(&self.meta.seed.to_le_bytes());
        b.extend_from_slice(&self.meta.epochs.to_le_bytes());
        b.extend_from_slice(&(self.param_count() as u64).to_le_bytes());
        for p in &self.layers {
            for x in p.weight.iter().chain(&p.bias) {
                b.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&b);
        put_u32(&mut b, crc);
        b
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ReliefError::format("not a relief model file (bad magic)"));
        }
        let mut r = Cursor {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(ReliefError::format(format!(
                "model format version {version}, expected {VERSION}"
            )));
        }
        if bytes.len() < 4 {
            return Err(ReliefError::format("truncated model file"));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let levels = r.u32()? as usize;
        let base_channels = r.u32()? as usize;
        let nd = r.u32()? as usize;
        if nd > 64 {
            return Err(ReliefError::format(format!(
                "implausible dropout count {nd}"
            )));
        }
        let dropout_rates = (0..nd).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let tile_size = r.u32()? as usize;
        let crop_border = r.u32()? as usize;
        let config = UNetConfig {
            levels,
            base_channels,
            dropout_rates,
            tile_size,
            crop_border,
        };
        config
            .validate()
            .map_err(|e| ReliefError::format(format!("stored configuration invalid: {e}")))?;
        let mut opt = || -> Result<Option<f64>> {
            let flag = r.u8()?;
            let v = r.f64()?;
            Ok((flag != 0).then_some(v))
        };
        let norm_min = opt()?;
        let norm_max = opt()?;
        let cell_size = opt()?;
        let seed = r.u64()?;
        let epochs = r.u64()?;
        let count = r.u64()? as usize;
        if count != config.param_count() {
            return Err(ReliefError::format(format!(
                "file holds {count} parameters, configuration needs {}",
                config.param_count()
            )));
        }
        if r.pos + 4 * count + 4 != bytes.len() {
            return Err(ReliefError::format(format!(
                "model file is {} bytes, expected {}",
                bytes.len(),
                r.pos + 4 * count + 4
            )));
        }
        if crc32fast::hash(body) != stored {
            return Err(ReliefError::format("model checksum mismatch"));
        }
        let mut layers = Vec::new();
        for (_, i, o) in config.layer_specs() {
            let mut read = |n: usize| -> Result<Vec<T>> {
                (0..n)
                    .map(|_| r.f32().map(|v| T::from_f64_lossy(v as f64)))
                    .collect()
            };
            let weight = read(o * i * 9)?;
            let bias = read(o)?;
            let p = ConvParams {
                out_channels: o,
                in_channels: i,
                weight,
                bias,
            };
            p.check()?;
            layers.push(p);
        }
        Ok(UNet {
            config,
            layers,
            meta: ModelMeta {
                norm_min,
                norm_max,
                cell_size,
                seed,
                epochs,
            },
        })
    }
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl Cursor<'_> {
    pub fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ReliefError::format(format!(
                "truncated file: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small(levels: usize, base: usize, tile: usize, rates: Vec<f64>) -> UNetConfig {
        UNetConfig {
            levels,
            base_channels: base,
            dropout_rates: rates,
            tile_size: tile,
            crop_border: tile / 8,
        }
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        let bad = [
            UNetConfig {
                tile_size: 100,
                ..Default::default()
            },
            // 64 / 32 = 2 < 4
            UNetConfig {
                tile_size: 64,
                ..Default::default()
            },
            UNetConfig {
                dropout_rates: vec![0.5, 0.4, 0.3, 0.2, 0.1],
                ..Default::default()
            },
            UNetConfig {
                crop_border: 128,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn channel_doubling() {
        let c = UNetConfig::default();
        let enc: Vec<_> = (0..5).map(|l| c.channels(l)).collect();
        assert_eq!(enc, vec![16, 32, 64, 128, 256]);
        assert_eq!(c.out_side(), 156);
    }

    #[test]
    fn parameter_count_closed_form() {
        // levels 3, base 4: channels 4, 8, 16, bottleneck 32.
        let c = small(3, 4, 32, vec![0.0; 3]);
        let conv = |i: usize, o: usize| 9 * i * o + o;
        let enc = conv(1, 4) + conv(4, 4) + conv(4, 8) + conv(8, 8) + conv(8, 16) + conv(16, 16);
        let bott = conv(16, 32) + conv(32, 32);
        let dec = (conv(32, 16) + conv(32, 16) + conv(16, 16))
            + (conv(16, 8) + conv(16, 8) + conv(8, 8))
            + (conv(8, 4) + conv(8, 4) + conv(4, 4));
        let fin = conv(4, 1);
        assert_eq!(c.param_count(), enc + bott + dec + fin);
        let m = UNet::<f32>::build(c, &mut seeded(1)).unwrap();
        assert_eq!(m.param_count(), m.config().param_count());
    }

    #[test]
    fn build_is_deterministic() {
        let c = small(2, 4, 16, vec![0.1, 0.2]);
        let a = UNet::<f32>::build(c.clone(), &mut seeded(5)).unwrap();
        let b = UNet::<f32>::build(c.clone(), &mut seeded(5)).unwrap();
        let d = UNet::<f32>::build(c, &mut seeded(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
        assert!(a.layers().iter().all(|p| p.bias.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn shapes_preserved() {
        let c = small(3, 2, 64, vec![0.0, 0.1, 0.2]);
        let m = UNet::<f32>::build(c, &mut seeded(1)).unwrap();
        let x = Tensor4::from_fn([2, 1, 64, 64], |i| (i % 97) as f32 / 97.0);
        let y = m.forward(&x, Mode::Train, &mut seeded(2)).unwrap();
        assert_eq!(y.shape(), [2, 1, 64, 64]);
        let x = Tensor4::from_fn([1, 1, 128, 64], |i| (i % 13) as f32 / 13.0);
        assert_eq!(m.predict(&x).unwrap().shape(), [1, 1, 128, 64]);
        assert!(m.predict(&Tensor4::zeros([1, 1, 60, 64])).is_err());
        assert!(m
            .predict(&Tensor4::from_fn([1, 1, 64, 64], |_| 1.5))
            .is_err());
    }

    #[test]
    fn eval_is_deterministic_and_clipped() {
        let c = small(2, 4, 32, vec![0.3, 0.5]);
        let m = UNet::<f32>::build(c, &mut seeded(9)).unwrap();
        let x = Tensor4::from_fn([1, 1, 32, 32], |i| ((i * 7919) % 101) as f32 / 100.0);
        let a = m.forward(&x, Mode::Eval, &mut seeded(1)).unwrap();
        let b = m.forward(&x, Mode::Eval, &mut seeded(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let c = small(2, 2, 16, vec![0.0, 0.0]);
        let m = UNet::<f64>::build(c, &mut seeded(3)).unwrap();
        let x = Tensor4::from_fn([1, 1, 16, 16], |i| (i % 5) as f64 / 5.0);
        let (_, cache) = m.forward_train(&x, &mut seeded(0)).unwrap();
        let grads = m.backward(&cache, &Tensor4::zeros([1, 1, 16, 16])).unwrap();
        assert!(grads
            .iter()
            .all(|g| g.weight.iter().chain(&g.bias).all(|&v| v == 0.0)));
    }

    #[test]
    fn gradient_is_linear_in_output_gradient() {
        let c = small(2, 2, 16, vec![0.0, 0.0]);
        let m = UNet::<f64>::build(c, &mut seeded(3)).unwrap();
        let x = Tensor4::from_fn([1, 1, 16, 16], |i| (i % 11) as f64 / 11.0);
        let (_, cache) = m.forward_train(&x, &mut seeded(0)).unwrap();
        let g1 = Tensor4::from_fn([1, 1, 16, 16], |i| ((i % 3) as f64 - 1.0) * 0.25);
        let g2 = g1.map(|v| 2.0 * v);
        let a = m.backward(&cache, &g1).unwrap();
        let b = m.backward(&cache, &g2).unwrap();
        for (ga, gb) in a.iter().zip(&b) {
            for (x, y) in ga
                .weight
                .iter()
                .chain(&ga.bias)
                .zip(gb.weight.iter().chain(&gb.bias))
            {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let c = small(2, 4, 32, vec![0.1, 0.2]);
        let mut m = UNet::<f32>::build(c, &mut seeded(4)).unwrap();
        m.meta = ModelMeta {
            norm_min: Some(-12.5),
            norm_max: Some(4478.0),
            cell_size: Some(25.0),
            seed: 4,
            epochs: 17,
        };
        let bytes = m.to_bytes();
        let back = UNet::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let x = Tensor4::from_fn([1, 1, 32, 32], |i| (i % 17) as f32 / 16.0);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            UNet::<f32>::from_bytes(&bad),
            Err(ReliefError::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(UNet::<f32>::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 1;
        assert!(UNet::<f32>::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("checksum"));
        assert!(UNet::<f32>::from_bytes(&bytes[..bytes.len() - 7]).is_err());
    }

    #[test]
    fn receptive_field_bounds_influence() {
        let c = small(2, 2, 64, vec![0.0, 0.0]);
        let r = c.receptive_field_radius();
        let m = UNet::<f64>::build(c, &mut seeded(12)).unwrap();
        let x = Tensor4::from_fn([1, 1, 64, 64], |i| ((i * 31) % 64) as f64 / 64.0);
        let mut y = x.clone();
        let (py, px) = (5usize, 40usize);
        let k = y.index(0, 0, py, px);
        y.data_mut()[k] = 1.0 - y.data()[k];
        let mut rng = seeded(0);
        let a = m.forward(&x, Mode::Train, &mut rng).unwrap();
        let b = m.forward(&y, Mode::Train, &mut rng).unwrap();
        let mut reach = 0;
        for yy in 0..64 {
            for xx in 0..64 {
                if a.at(0, 0, yy, xx) != b.at(0, 0, yy, xx) {
                    let d = yy.abs_diff(py).max(xx.abs_diff(px));
                    reach = reach.max(d);
                }
            }
        }
        assert!(reach > 0 && reach <= r, "reach {reach}, radius {r}");
    }
}
