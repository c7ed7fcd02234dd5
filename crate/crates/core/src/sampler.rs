//! The point-wise sampler family and grid rendering.
//!
//! Every sampler maps a position `x` plus per-texture parameters to RGB:
//!
//! | variant   | decoder input            | transforms     |
//! |-----------|--------------------------|----------------|
//! | `perlin`  | none (weighted noise sum)| identity       |
//! | `perlinT` | none (weighted noise sum)| learned        |
//! | `mlp`     | `[x, e]`                 | n/a            |
//! | `oursP`   | `[x, n, e]`              | identity       |
//! | `oursNoT` | `[n, e]`                 | identity       |
//! | `ours`    | `[n, e]`                 | learned        |
//!
//! Two evaluation paths exist: a tape graph used for training and a
//! tape-free streaming path used for rendering. Both run the same kernels,
//! so their outputs agree bitwise.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise::{sample_stack_into, TransformSet};
use crate::params::{Bound, ParamStore};
use crate::tensor::{linear_forward, relu_in_place, Scalar, Tape, Tensor, Var};
use crate::transform::{check_dim, params_per_octave};

pub const CODE_LEN: usize = 64;
pub const DEFAULT_OCTAVES: usize = 8;
pub const HIDDEN: usize = 128;
/// Width-128 layers followed by relu; the output layer comes on top.
pub const HIDDEN_LAYERS: usize = 5;
pub const DEFAULT_TILE: usize = 128;

/// Rows per decoder batch on the streaming path.
const CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Perlin,
    PerlinT,
    Mlp,
    OursP,
    OursNoT,
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Perlin,
        Variant::PerlinT,
        Variant::Mlp,
        Variant::OursP,
        Variant::OursNoT,
        Variant::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Perlin => "perlin",
            Variant::PerlinT => "perlinT",
            Variant::Mlp => "mlp",
            Variant::OursP => "oursP",
            Variant::OursNoT => "oursNoT",
            Variant::Ours => "ours",
        }
    }

    /// Stable numeric tag used in checkpoints.
    pub fn code(self) -> u32 {
        Variant::ALL.iter().position(|&v| v == self).unwrap() as u32
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Variant::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown variant tag {code}")))
    }

    pub fn has_decoder(self) -> bool {
        !matches!(self, Variant::Perlin | Variant::PerlinT)
    }

    pub fn learns_transforms(self) -> bool {
        matches!(self, Variant::PerlinT | Variant::Ours)
    }

    pub fn reads_noise(self) -> bool {
        self != Variant::Mlp
    }

    pub fn reads_position(self) -> bool {
        matches!(self, Variant::Mlp | Variant::OursP)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Contract(format!(
                    "unknown variant {s:?} (expected perlin, perlinT, mlp, oursP, oursNoT or ours)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub variant: Variant,
    pub dim: usize,
    pub octaves: usize,
    pub code_len: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl SamplerConfig {
    pub fn new(variant: Variant, dim: usize) -> Self {
        Self {
            variant,
            dim,
            octaves: DEFAULT_OCTAVES,
            code_len: CODE_LEN,
            hidden: HIDDEN,
            hidden_layers: HIDDEN_LAYERS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim)?;
        if self.variant.reads_noise() && self.octaves == 0 {
            return Err(Error::Contract(format!(
                "{} needs at least one octave",
                self.variant
            )));
        }
        if self.octaves > 62 {
            return Err(Error::Contract("at most 62 octaves are supported".into()));
        }
        if self.variant.has_decoder() && (self.hidden == 0 || self.hidden_layers == 0) {
            return Err(Error::Contract(
                "decoder needs at least one hidden layer".into(),
            ));
        }
        if self.variant.has_decoder() && self.code_len == 0 {
            return Err(Error::Contract("texture code must not be empty".into()));
        }
        Ok(())
    }

    /// Length of the per-texture code: `e` for decoder variants, the
    /// flattened `m x 3` RGB weights for the weighted-noise variants.
    pub fn texture_code_len(&self) -> usize {
        if self.variant.has_decoder() {
            self.code_len
        } else {
            3 * self.octaves
        }
    }

    pub fn transform_params(&self) -> usize {
        params_per_octave(self.dim)
    }

    pub fn decoder_input_width(&self) -> usize {
        let mut w = self.code_len;
        if self.variant.reads_position() {
            w += self.dim;
        }
        if self.variant.reads_noise() {
            w += self.octaves;
        }
        w
    }

    /// `(in, out)` for every decoder layer, input to output.
    pub fn decoder_shapes(&self) -> Vec<(usize, usize)> {
        if !self.variant.has_decoder() {
            return Vec::new();
        }
        let mut shapes = vec![(self.decoder_input_width(), self.hidden)];
        shapes.extend((1..self.hidden_layers).map(|_| (self.hidden, self.hidden)));
        shapes.push((self.hidden, 3));
        shapes
    }

    /// Fresh decoder weights: He-uniform into relu layers, `sqrt(3 / fan_in)`
    /// for the linear output layer, zero biases.
    pub fn init_decoder<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let shapes = self.decoder_shapes();
        let last = shapes.len().saturating_sub(1);
        for (k, &(i, o)) in shapes.iter().enumerate() {
            let w = if k == last {
                Tensor::uniform(&[i, o], (3.0 / i as f64).sqrt(), rng)?
            } else {
                Tensor::he_uniform(&[i, o], i, rng)?
            };
            store.insert(decoder_weight(k), w);
            store.insert(decoder_bias(k), Tensor::zeros(&[o])?);
        }
        Ok(store)
    }
}

pub fn decoder_weight(layer: usize) -> String {
    format!("decoder.layer{layer}.weight")
}

pub fn decoder_bias(layer: usize) -> String {
    format!("decoder.layer{layer}.bias")
}

/// Resolved parameters of one texture: code (`e`, or RGB weights) and transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub code: Vec<f32>,
    pub transforms: TransformSet,
}

impl Texture {
    /// Identity transforms; `code` as given.
    pub fn with_identity(cfg: &SamplerConfig, code: Vec<f32>) -> Result<Self> {
        Ok(Self {
            code,
            transforms: TransformSet::identity(cfg.octaves.max(1), cfg.dim)?,
        })
    }

    fn check(&self, cfg: &SamplerConfig) -> Result<()> {
        if self.code.len() != cfg.texture_code_len() {
            return Err(Error::Dimension {
                op: "texture code",
                lhs: vec![self.code.len()],
                rhs: vec![cfg.texture_code_len()],
            });
        }
        if cfg.variant.learns_transforms()
            && (self.transforms.octaves() != cfg.octaves || self.transforms.dim() != cfg.dim)
        {
            return Err(Error::Dimension {
                op: "texture transforms",
                lhs: vec![self.transforms.octaves(), self.transforms.dim()],
                rhs: vec![cfg.octaves, cfg.dim],
            });
        }
        Ok(())
    }
}

/// Regular grid of sample positions: pixel `(i, j)` sits at
/// `origin + u * (i / width) + v * (j / height)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    origin: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    width: usize,
    height: usize,
}

impl GridSpec {
    pub fn new(
        origin: Vec<f64>,
        u: Vec<f64>,
        v: Vec<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let dim = origin.len();
        check_dim(dim)?;
        if u.len() != dim || v.len() != dim {
            return Err(Error::Dimension {
                op: "grid axes",
                lhs: vec![u.len(), v.len()],
                rhs: vec![dim, dim],
            });
        }
        if width == 0 || height == 0 {
            return Err(Error::Contract("grid resolution must be at least 1".into()));
        }
        if origin.iter().chain(&u).chain(&v).any(|c| !c.is_finite()) {
            return Err(Error::Contract("grid coordinates must be finite".into()));
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let (uu, vv, uv) = (dot(&u, &u), dot(&v, &v), dot(&u, &v));
        if !(uu * vv - uv * uv > 1e-12 * uu * vv) || uu == 0.0 || vv == 0.0 {
            return Err(Error::Degenerate {
                op: "grid",
                reason: "axes u and v must be linearly independent".into(),
            });
        }
        Ok(Self {
            origin,
            u,
            v,
            width,
            height,
        })
    }

    /// Axis-aligned window `[origin, origin + extent]` in the first two coordinates.
    pub fn window(origin: &[f64], extent: [f64; 2], width: usize, height: usize) -> Result<Self> {
        let dim = origin.len();
        let mut u = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        if dim >= 2 {
            u[0] = extent[0];
            v[1] = extent[1];
        }
        Self::new(origin.to_vec(), u, v, width, height)
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn axes(&self) -> (&[f64], &[f64]) {
        (&self.u, &self.v)
    }

    pub fn position(&self, i: usize, j: usize, out: &mut [f64]) {
        let fi = i as f64 / self.width as f64;
        let fj = j as f64 / self.height as f64;
        for d in 0..self.dim() {
            out[d] = self.origin[d] + self.u[d] * fi + self.v[d] * fj;
        }
    }

    /// Positions of the `w x h` block starting at pixel `(x0, y0)`, row-major.
    pub fn positions(&self, x0: usize, y0: usize, w: usize, h: usize) -> Vec<f64> {
        let dim = self.dim();
        let mut out = vec![0.0; w * h * dim];
        for (r, j) in (y0..y0 + h).enumerate() {
            for (c, i) in (x0..x0 + w).enumerate() {
                let at = (r * w + c) * dim;
                self.position(i, j, &mut out[at..at + dim]);
            }
        }
        out
    }
}

/// Pixel rectangle delivered by [`Sampler::render_tiles`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug)]
struct Dense {
    w: Tensor<f32>,
    b: Tensor<f32>,
    inputs: usize,
    outputs: usize,
}

/// Tape-free evaluator over a fixed set of decoder weights.
#[derive(Clone, Debug)]
pub struct Sampler {
    cfg: SamplerConfig,
    layers: Vec<Dense>,
    identity: TransformSet,
}

impl Sampler {
    /// Reads `decoder.*` tensors from `params` (ignored by weighted-noise variants).
    pub fn new(cfg: SamplerConfig, params: &ParamStore<f32>) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        for (k, (i, o)) in cfg.decoder_shapes().into_iter().enumerate() {
            let w = params.get(&decoder_weight(k))?.clone();
            let b = params.get(&decoder_bias(k))?.clone();
            if w.shape() != [i, o] || b.shape() != [o] {
                return Err(Error::Dimension {
                    op: "decoder layer",
                    lhs: w.shape().to_vec(),
                    rhs: vec![i, o],
                });
            }
            layers.push(Dense {
                w,
                b,
                inputs: i,
                outputs: o,
            });
        }
        Ok(Self {
            cfg,
            layers,
            identity: TransformSet::identity(cfg.octaves.max(1), cfg.dim)?,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn transforms<'a>(&'a self, tex: &'a Texture) -> &'a TransformSet {
        if self.cfg.variant.learns_transforms() {
            &tex.transforms
        } else {
            &self.identity
        }
    }

    /// Per-point feature rows: decoder inputs, or the raw noise stack for
    /// the weighted-noise variants.
    fn features(&self, tex: &Texture, positions: &[f64], seed: u64) -> Result<(Vec<f32>, usize)> {
        let cfg = &self.cfg;
        let (dim, m) = (cfg.dim, cfg.octaves);
        let n = positions.len() / dim;
        let width = if cfg.variant.has_decoder() {
            cfg.decoder_input_width()
        } else {
            m
        };
        let transforms = self.transforms(tex);
        let mut feats = Vec::with_capacity(n * width);
        let mut noise = vec![0.0f64; m];
        for x in positions.chunks_exact(dim) {
            if cfg.variant.reads_position() {
                feats.extend(x.iter().map(|&c| c as f32));
            }
            if cfg.variant.reads_noise() {
                sample_stack_into(x, transforms, seed, &mut noise)?;
                feats.extend(noise.iter().map(|&c| c as f32));
            }
            if cfg.variant.has_decoder() {
                feats.extend_from_slice(&tex.code);
            }
        }
        Ok((feats, width))
    }

    /// Decoder input vector at a single point (noise-only variants return the noise stack).
    pub fn decoder_input(&self, tex: &Texture, x: &[f64], seed: u64) -> Result<Vec<f32>> {
        tex.check(&self.cfg)?;
        check_positions(x, self.cfg.dim)?;
        Ok(self.features(tex, x, seed)?.0)
    }

    /// Interleaved RGB (`3 * n` values) for `n` positions of `dim` coordinates each.
    pub fn eval_points(&self, tex: &Texture, positions: &[f64], seed: u64) -> Result<Vec<f32>> {
        tex.check(&self.cfg)?;
        check_positions(positions, self.cfg.dim)?;
        let dim = self.cfg.dim;
        let total = positions.len() / dim;
        let mut out = Vec::with_capacity(total * 3);
        for chunk in positions.chunks(CHUNK * dim) {
            let n = chunk.len() / dim;
            let (mut act, width) = self.features(tex, chunk, seed)?;
            if !self.cfg.variant.has_decoder() {
                out.extend(linear_forward(&act, &tex.code, None, n, width, 3));
                continue;
            }
            let last = self.layers.len() - 1;
            for (k, layer) in self.layers.iter().enumerate() {
                act = linear_forward(
                    &act,
                    layer.w.data(),
                    Some(layer.b.data()),
                    n,
                    layer.inputs,
                    layer.outputs,
                );
                if k != last {
                    relu_in_place(&mut act);
                }
            }
            out.extend(act);
        }
        Ok(out)
    }

    pub fn eval(&self, tex: &Texture, x: &[f64], seed: u64) -> Result<[f32; 3]> {
        let rgb = self.eval_points(tex, x, seed)?;
        Ok([rgb[0], rgb[1], rgb[2]])
    }

    /// Streams the grid tile by tile; `sink` receives each tile's interleaved RGB
    /// in row-major order. Auxiliary memory is proportional to one tile.
    pub fn render_tiles<F>(
        &self,
        tex: &Texture,
        grid: &GridSpec,
        seed: u64,
        tile: usize,
        mut sink: F,
    ) -> Result<()>
    where
        F: FnMut(TileRect, &[f32]) -> Result<()>,
    {
        if grid.dim() != self.cfg.dim {
            return Err(Error::Dimension {
                op: "render",
                lhs: vec![grid.dim()],
                rhs: vec![self.cfg.dim],
            });
        }
        if tile == 0 {
            return Err(Error::Contract("tile size must be at least 1".into()));
        }
        for y in (0..grid.height).step_by(tile) {
            let h = tile.min(grid.height - y);
            for x in (0..grid.width).step_by(tile) {
                let w = tile.min(grid.width - x);
                let rgb = self.eval_points(tex, &grid.positions(x, y, w, h), seed)?;
                sink(
                    TileRect {
                        x,
                        y,
                        width: w,
                        height: h,
                    },
                    &rgb,
                )?;
            }
        }
        Ok(())
    }

    /// Unclamped image of the whole grid.
    pub fn render(&self, tex: &Texture, grid: &GridSpec, seed: u64, tile: usize) -> Result<Image> {
        let mut img = Image::filled(grid.width, grid.height, [0.0; 3])?;
        self.render_tiles(tex, grid, seed, tile, |r, rgb| {
            for (p, px) in rgb.chunks_exact(3).enumerate() {
                img.set_pixel(r.x + p % r.width, r.y + p / r.width, [px[0], px[1], px[2]]);
            }
            Ok(())
        })?;
        Ok(img)
    }
}

fn check_positions(positions: &[f64], dim: usize) -> Result<()> {
    if positions.is_empty() || !positions.len().is_multiple_of(dim) {
        return Err(Error::Dimension {
            op: "positions",
            lhs: vec![positions.len()],
            rhs: vec![dim],
        });
    }
    Ok(())
}

/// Weighted noise sum `sum_i noise(2^(i-1) x | xi_i) * w_i`, in double precision.
pub fn eval_perlin(x: &[f64], weights: &[[f64; 3]], seed: u64) -> Result<[f64; 3]> {
    let t = TransformSet::identity(weights.len().max(1), x.len())?;
    eval_perlin_t(x, weights, &t, seed)
}

/// Weighted noise sum `sum_i noise(T_i 2^(i-1) x | xi_i) * w_i`, in double precision.
pub fn eval_perlin_t(
    x: &[f64],
    weights: &[[f64; 3]],
    transforms: &TransformSet,
    seed: u64,
) -> Result<[f64; 3]> {
    if weights.len() != transforms.octaves() {
        return Err(Error::Dimension {
            op: "eval_perlin_t",
            lhs: vec![weights.len()],
            rhs: vec![transforms.octaves()],
        });
    }
    let noise = crate::noise::sample_stack(x, transforms, seed)?;
    let mut rgb = [0.0; 3];
    for (n, w) in noise.iter().zip(weights) {
        for c in 0..3 {
            rgb[c] += n * w[c];
        }
    }
    Ok(rgb)
}

/// Texture parameters already recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TextureVars {
    /// `[texture_code_len]`.
    pub code: Var,
    /// Raw per-octave parameters `[m, p]`; `None` means identity transforms.
    pub raw_transforms: Option<Var>,
}

/// Records the render of `grid` and returns a `[3, height, width]` image node.
pub fn render_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &SamplerConfig,
    decoder: &Bound,
    tex: &TextureVars,
    grid: &GridSpec,
    seed: u64,
) -> Result<Var> {
    cfg.validate()?;
    if grid.dim() != cfg.dim {
        return Err(Error::Dimension {
            op: "render",
            lhs: vec![grid.dim()],
            rhs: vec![cfg.dim],
        });
    }
    let (dim, m) = (cfg.dim, cfg.octaves);
    let (w, h) = (grid.width(), grid.height());
    let n = w * h;
    let coords = Arc::new(grid.positions(0, 0, w, h));

    let mut parts = Vec::new();
    if cfg.variant.reads_position() {
        let pos = Tensor::new(&[n, dim], coords.iter().map(|&c| T::from_f64(c)).collect())?;
        parts.push(tape.constant(pos));
    }
    let mut noise = None;
    if cfg.variant.reads_noise() {
        let transforms = match (cfg.variant.learns_transforms(), tex.raw_transforms) {
            (true, Some(raw)) => tape.transforms(raw, dim)?,
            _ => {
                let id = TransformSet::identity(m, dim)?;
                let t = Tensor::from_f64(&[m, dim, dim], id.as_slice())?;
                tape.constant(t)
            }
        };
        let nv = tape.noise_stack(Arc::clone(&coords), dim, transforms, seed)?;
        parts.push(nv);
        noise = Some(nv);
    }

    let rgb = if cfg.variant.has_decoder() {
        let code = tape.reshape(tex.code, &[1, cfg.code_len])?;
        parts.push(tape.broadcast_rows(code, n)?);
        let mut act = tape.concat_cols(&parts)?;
        let layers = cfg.decoder_shapes().len();
        for k in 0..layers {
            let wv = decoder.get(&decoder_weight(k))?;
            let bv = decoder.get(&decoder_bias(k))?;
            act = tape.linear(act, wv, Some(bv))?;
            if k + 1 != layers {
                act = tape.relu(act);
            }
        }
        act
    } else {
        let weights = tape.reshape(tex.code, &[m, 3])?;
        tape.linear(
            noise.expect("weighted-noise variants read noise"),
            weights,
            None,
        )?
    };
    let planar = tape.transpose(rgb)?;
    tape.reshape(planar, &[3, h, w])
}
