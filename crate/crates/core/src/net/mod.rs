//! The restoration network: Bayer space-to-depth input, a convolution stack
//! with grouped residual dense blocks, depth-to-space upsampling and a
//! 12-map head constrained into an NIG field. Forward and reverse passes are
//! hand-written over channel-major `f64` activations.

mod checkpoint;
mod head;
mod ops;

pub use checkpoint::{read_container, write_container, Checkpoint, NamedArray, TrainingMeta, CHECKPOINT_VERSION};
pub use head::{head_map, head_map_with_base, inv_softplus, sigmoid, softplus, ALPHA_EPS, BETA_MIN, LAMBDA_MIN};
pub use ops::{Geom, LRELU_SLOPE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bayer::{bayer_transform, bilinear_demosaic, inverse_transform_image, pack4, DihedralTransform};
use crate::error::{Error, Result};
use crate::image::{Image, Phase, RawMosaic, CHANNELS};
use crate::nig::{NigField, NigGradField};

use ops::{conv_backward, conv_forward, depth_to_space, lrelu_backward_inplace, lrelu_inplace, space_to_depth};

/// Offset subtracted from raw samples before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;

/// Number of raw head maps: `(mean, lambda, alpha, beta)` x 3 channels.
pub const HEAD_MAPS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub channels: usize,
    pub grdb_blocks: usize,
    pub grdb_layers: usize,
    pub growth: usize,
    pub kernel: usize,
    pub seed: u64,
    /// Predict the mean as a residual over bilinear demosaicking.
    pub residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: 16,
            grdb_blocks: 2,
            grdb_layers: 3,
            growth: 16,
            kernel: 3,
            seed: 0,
            residual: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.grdb_blocks == 0 || self.grdb_layers == 0 || self.growth == 0 {
            return Err(Error::InvalidParameter(format!("network counts must be >= 1: {self:?}")));
        }
        if self.kernel != 3 {
            return Err(Error::InvalidParameter(format!("kernel must be 3, got {}", self.kernel)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    /// Index of the weight array; the bias follows it.
    idx: usize,
    cin: usize,
    k: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    conv_in: ConvSpec,
    blocks: Vec<(Vec<ConvSpec>, ConvSpec)>,
    mid: ConvSpec,
    up: ConvSpec,
    out: ConvSpec,
}

impl Layout {
    fn new(cfg: &NetConfig) -> (Layout, Vec<(String, Vec<usize>)>) {
        let mut names = Vec::new();
        let mut add = |name: String, cin: usize, cout: usize, k: usize| {
            let idx = names.len();
            names.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            names.push((format!("{name}.bias"), vec![cout]));
            ConvSpec { idx, cin, k }
        };
        let c = cfg.channels;
        let g = cfg.growth;
        let conv_in = add("conv_in".into(), 4, c, 3);
        let blocks = (0..cfg.grdb_blocks)
            .map(|b| {
                let dense = (0..cfg.grdb_layers)
                    .map(|l| add(format!("grdb{b}.dense{l}"), c + l * g, g, 3))
                    .collect();
                let fuse = add(format!("grdb{b}.fuse"), c + cfg.grdb_layers * g, c, 1);
                (dense, fuse)
            })
            .collect();
        let mid = add("conv_mid".into(), c, c, 3);
        let up = add("conv_up".into(), c, 4 * c, 3);
        let out = add("conv_out".into(), c, HEAD_MAPS, 3);
        (
            Layout {
                conv_in,
                blocks,
                mid,
                up,
                out,
            },
            names,
        )
    }
}

/// Named flat arrays, in a fixed order determined by the configuration.
/// Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> ParamSet {
        ParamSet {
            names: other.names.clone(),
            shapes: other.shapes.clone(),
            values: other.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_slice())
    }

    pub fn iter_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn ensure_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names || self.shapes != other.shapes {
            return Err(Error::Shape("parameter sets have different layouts".into()));
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, the storage precision of
    /// checkpoints.
    pub fn round_to_f32(&mut self) {
        self.values
            .iter_mut()
            .flatten()
            .for_each(|v| *v = *v as f32 as f64);
    }
}

/// Activations kept by [`Network::forward`] for the reverse pass.
pub struct Cache {
    lo: Geom,
    hi: Geom,
    packed: Vec<f64>,
    a_in: Vec<f64>,
    blocks: Vec<BlockCache>,
    mid: Vec<f64>,
    up: Vec<f64>,
    full: Vec<f64>,
    raw12: Vec<f64>,
}

struct BlockCache {
    /// Block input followed by each dense layer's output.
    cat: Vec<f64>,
    fused: Vec<f64>,
}

impl Cache {
    /// Raw head maps `[12][N][H][W]`.
    pub fn raw12(&self) -> &[f64] {
        &self.raw12
    }

    pub fn batch(&self) -> usize {
        self.hi.n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    params: ParamSet,
}

impl Network {
    /// Fresh network: fan-in scaled Gaussian kernels (std `sqrt(2 / fan_in)`),
    /// zero biases and a zero head, so the untrained mean prediction equals
    /// the residual base. Values are rounded to `f32`.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let (layout, names) = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut values = Vec::with_capacity(names.len());
        for (i, (_, shape)) in names.iter().enumerate() {
            let len: usize = shape.iter().product();
            let is_weight = i % 2 == 0;
            if is_weight && i != layout.out.idx {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                values.push((0..len).map(|_| normal.sample(&mut rng)).collect());
            } else {
                values.push(vec![0.0; len]);
            }
        }
        let mut params = ParamSet {
            names: names.iter().map(|(n, _)| n.clone()).collect(),
            shapes: names.into_iter().map(|(_, s)| s).collect(),
            values,
        };
        params.round_to_f32();
        Ok(Network { config, params })
    }

    pub fn from_params(config: NetConfig, params: ParamSet) -> Result<Self> {
        let template = Network::new(config)?;
        template.params.ensure_same_layout(&params)?;
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config).0
    }

    /// Gaussian init of the head, for tests that need gradients to reach
    /// every layer from the first step.
    pub fn randomize_head(&mut self, std: f64, seed: u64) {
        let idx = self.layout().out.idx;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).expect("positive std");
        for i in [idx, idx + 1] {
            self.params.values[i].iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        self.params.round_to_f32();
    }

    /// Sets the head biases so that a zero head input yields the given
    /// `(lambda, alpha, beta)` everywhere.
    pub fn set_head_bias(&mut self, lambda: f64, alpha: f64, beta: f64) -> Result<()> {
        let targets = [lambda - LAMBDA_MIN, alpha - 1.0 - ALPHA_EPS, beta - BETA_MIN];
        if targets.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "head targets out of range: lambda={lambda}, alpha={alpha}, beta={beta}"
            )));
        }
        let idx = self.layout().out.idx + 1;
        let bias = &mut self.params.values[idx];
        for (k, t) in targets.iter().enumerate() {
            bias[3 + 3 * k..6 + 3 * k].fill(inv_softplus(*t));
        }
        self.params.round_to_f32();
        Ok(())
    }

    fn conv(&self, spec: ConvSpec, input: &[f64], g: Geom) -> Vec<f64> {
        conv_forward(
            input,
            spec.cin,
            g,
            &self.params.values[spec.idx],
            &self.params.values[spec.idx + 1],
            spec.k,
        )
    }

    fn base(&self, raw: &RawMosaic) -> Image {
        if self.config.residual {
            bilinear_demosaic(raw)
        } else {
            Image::zeros(raw.height(), raw.width())
        }
    }

    /// Batched forward pass over mosaics of identical size. The network is
    /// phase-agnostic arithmetic, but it is trained on RGGB inputs; see
    /// [`Network::predict`] for other phases.
    pub fn forward(&self, raws: &[RawMosaic]) -> Result<(Vec<NigField>, Cache)> {
        let first = raws
            .first()
            .ok_or_else(|| Error::Shape("forward needs at least one input".into()))?;
        let (h, w) = (first.height(), first.width());
        if raws.iter().any(|r| r.height() != h || r.width() != w) {
            return Err(Error::Shape("batch inputs must share dimensions".into()));
        }
        let n = raws.len();
        let lo = Geom { n, h: h / 2, w: w / 2 };
        let hi = Geom { n, h, w };
        let l = self.layout();
        let c = self.config.channels;

        let mut packed = vec![0.0; 4 * lo.cols()];
        for (i, raw) in raws.iter().enumerate() {
            let p = pack4(raw);
            for k in 0..4 {
                let dst = &mut packed[k * lo.cols() + i * lo.h * lo.w..][..lo.h * lo.w];
                for (d, &v) in dst.iter_mut().zip(p.plane(k)) {
                    *d = v - INPUT_CENTER;
                }
            }
        }
        let mut a_in = self.conv(l.conv_in, &packed, lo);
        lrelu_inplace(&mut a_in);

        let mut x = a_in.clone();
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for (dense, fuse) in &l.blocks {
            let mut cat = x.clone();
            for spec in dense {
                let mut d = self.conv(*spec, &cat, lo);
                lrelu_inplace(&mut d);
                cat.extend_from_slice(&d);
            }
            let mut fused = self.conv(*fuse, &cat, lo);
            lrelu_inplace(&mut fused);
            x = x.iter().zip(&fused).map(|(a, b)| a + b).collect();
            blocks.push(BlockCache { cat, fused });
        }
        let mut mid = self.conv(l.mid, &x, lo);
        lrelu_inplace(&mut mid);
        let mut up = self.conv(l.up, &mid, lo);
        lrelu_inplace(&mut up);
        let full = depth_to_space(&up, c, lo);
        let raw12 = self.conv(l.out, &full, hi);

        let hw = h * w;
        let mut fields = Vec::with_capacity(n);
        for (i, raw) in raws.iter().enumerate() {
            let mut maps = Vec::with_capacity(HEAD_MAPS * hw);
            for j in 0..HEAD_MAPS {
                maps.extend_from_slice(&raw12[j * hi.cols() + i * hw..][..hw]);
            }
            fields.push(head_map_with_base(&maps, &self.base(raw))?);
        }
        let cache = Cache {
            lo,
            hi,
            packed,
            a_in,
            blocks,
            mid,
            up,
            full,
            raw12,
        };
        Ok((fields, cache))
    }

    /// Reverse pass. `grads[i]` is the loss gradient with respect to the
    /// constrained outputs `(mean, lambda, alpha, beta)` of batch item `i`.
    pub fn backward(&self, cache: &Cache, grads: &[NigGradField]) -> Result<ParamSet> {
        let (lo, hi) = (cache.lo, cache.hi);
        if grads.len() != hi.n {
            return Err(Error::Shape(format!("{} gradients for a batch of {}", grads.len(), hi.n)));
        }
        let hw = hi.h * hi.w;
        let per = CHANNELS * hw;
        for g in grads {
            if [&g.mean, &g.lambda, &g.alpha, &g.beta].iter().any(|v| v.len() != per) {
                return Err(Error::Shape("gradient field does not match output size".into()));
            }
        }
        let l = self.layout();
        let c = self.config.channels;
        let mut out = ParamSet::zeros_like(&self.params);

        // head: chain through the constraint maps
        let mut d12 = vec![0.0; HEAD_MAPS * hi.cols()];
        for (i, g) in grads.iter().enumerate() {
            for (f, comp) in [&g.mean, &g.lambda, &g.alpha, &g.beta].into_iter().enumerate() {
                for ch in 0..CHANNELS {
                    let j = f * CHANNELS + ch;
                    let dst = &mut d12[j * hi.cols() + i * hw..][..hw];
                    let u = &cache.raw12[j * hi.cols() + i * hw..][..hw];
                    let src = &comp[ch * hw..][..hw];
                    for p in 0..hw {
                        dst[p] = if f == 0 { src[p] } else { src[p] * sigmoid(u[p]) };
                    }
                }
            }
        }

        let mut dfull = vec![0.0; c * hi.cols()];
        self.conv_back(l.out, &cache.full, hi, &d12, &mut out, Some(&mut dfull));
        let mut dup = space_to_depth(&dfull, c, lo);
        lrelu_backward_inplace(&cache.up, &mut dup);
        let mut dmid = vec![0.0; c * lo.cols()];
        self.conv_back(l.up, &cache.mid, lo, &dup, &mut out, Some(&mut dmid));
        lrelu_backward_inplace(&cache.mid, &mut dmid);
        let last_out = self.block_output(cache, cache.blocks.len());
        let mut dx = vec![0.0; c * lo.cols()];
        self.conv_back(l.mid, &last_out, lo, &dmid, &mut out, Some(&mut dx));

        let g = self.config.growth;
        for (b, (dense, fuse)) in l.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[b];
            let mut dcat = vec![0.0; bc.cat.len()];
            let mut dfused = dx.clone();
            lrelu_backward_inplace(&bc.fused, &mut dfused);
            self.conv_back(*fuse, &bc.cat, lo, &dfused, &mut out, Some(&mut dcat));
            for (li, spec) in dense.iter().enumerate().rev() {
                let start = (c + li * g) * lo.cols();
                let end = start + g * lo.cols();
                let (head_part, tail) = dcat.split_at_mut(start);
                let dd = &mut tail[..end - start];
                lrelu_backward_inplace(&bc.cat[start..end], dd);
                self.conv_back(*spec, &bc.cat[..start], lo, dd, &mut out, Some(head_part));
            }
            // residual path plus the block input's share of the dense features
            for (d, e) in dx.iter_mut().zip(&dcat[..c * lo.cols()]) {
                *d += e;
            }
        }
        lrelu_backward_inplace(&cache.a_in, &mut dx);
        self.conv_back(l.conv_in, &cache.packed, lo, &dx, &mut out, None);
        Ok(out)
    }

    fn block_output(&self, cache: &Cache, b: usize) -> Vec<f64> {
        if b == 0 {
            return cache.a_in.clone();
        }
        let bc = &cache.blocks[b - 1];
        let n = self.config.channels * cache.lo.cols();
        bc.cat[..n].iter().zip(&bc.fused).map(|(a, f)| a + f).collect()
    }

    fn conv_back(&self, spec: ConvSpec, input: &[f64], g: Geom, dout: &[f64], out: &mut ParamSet, dinput: Option<&mut [f64]>) {
        let (dw, rest) = out.values.split_at_mut(spec.idx + 1);
        conv_backward(
            input,
            spec.cin,
            g,
            &self.params.values[spec.idx],
            spec.k,
            dout,
            &mut dw[spec.idx],
            &mut rest[0],
            dinput,
        );
    }

    /// Single-image inference for any Bayer phase: the raster is first
    /// unified to RGGB (reflect pad / crop by one pixel where needed) and the
    /// outputs are mapped back.
    pub fn predict(&self, raw: &RawMosaic) -> Result<NigField> {
        if raw.phase() == Phase::Rggb {
            let (mut fields, _) = self.forward(std::slice::from_ref(raw))?;
            return Ok(fields.remove(0));
        }
        let t = DihedralTransform::IDENTITY;
        let unified = bayer_transform(raw, t);
        let (mut fields, _) = self.forward(std::slice::from_ref(&unified))?;
        let f = fields.remove(0);
        let (h, w) = (raw.height(), raw.width());
        let back = |img: &Image| inverse_transform_image(img, t, raw.phase(), h, w);
        NigField::new(back(&f.mean), back(&f.lambda), back(&f.alpha), back(&f.beta))
    }

    /// Mean prediction, clamped to `[0, 1]`.
    pub fn restore(&self, raw: &RawMosaic) -> Result<Image> {
        Ok(self.predict(raw)?.mean.clamped())
    }
}
