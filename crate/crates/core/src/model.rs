//! A sampler together with the source of its texture parameters, and its
//! checkpoint representation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::TensorArchive;
use crate::encoder::{init_translator, translate, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise::TransformSet;
use crate::params::{Bound, ParamStore};
use crate::sampler::{Sampler, SamplerConfig, Texture, TextureVars, Variant};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const TEXTURE_CODE: &str = "texture.code";
pub const TEXTURE_TRANSFORM: &str = "texture.transform";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// One exemplar; `e` and transforms are free variables.
    Single,
    /// Encoder and translator produce the texture parameters.
    Space,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::Space => "space",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Mode::Single),
            "space" => Ok(Mode::Space),
            _ => Err(Error::Contract(format!(
                "unknown mode {s:?} (expected single or space)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureModel {
    pub sampler: SamplerConfig,
    pub mode: Mode,
    /// Present in space mode.
    pub encoder: Option<EncoderConfig>,
    pub params: ParamStore<f32>,
}

impl TextureModel {
    pub fn init(
        sampler: SamplerConfig,
        mode: Mode,
        encoder: Option<EncoderConfig>,
        seed: u64,
    ) -> Result<Self> {
        sampler.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = sampler.init_decoder::<f32, _>(&mut rng)?;
        let encoder = match mode {
            Mode::Single => {
                let bound = if sampler.variant.has_decoder() {
                    1.0
                } else {
                    0.5
                };
                params.insert(
                    TEXTURE_CODE,
                    Tensor::uniform(&[sampler.texture_code_len()], bound, &mut rng)?,
                );
                if sampler.variant.learns_transforms() {
                    params.insert(
                        TEXTURE_TRANSFORM,
                        Tensor::zeros(&[sampler.octaves, sampler.transform_params()])?,
                    );
                }
                None
            }
            Mode::Space => {
                let enc = encoder.unwrap_or_default();
                for (n, t) in enc.init::<f32, _>(&mut rng)?.iter() {
                    params.insert(n, t.clone());
                }
                for (n, t) in init_translator::<f32, _>(&sampler, enc.z_len, &mut rng)?.iter() {
                    params.insert(n, t.clone());
                }
                Some(enc)
            }
        };
        Ok(Self {
            sampler,
            mode,
            encoder,
            params,
        })
    }

    pub fn variant(&self) -> Variant {
        self.sampler.variant
    }

    fn encoder_config(&self) -> Result<&EncoderConfig> {
        self.encoder.as_ref().ok_or_else(|| {
            Error::Contract("this model has no encoder (single-exemplar mode)".into())
        })
    }

    /// Records texture parameters on `tape`. Space mode needs the exemplar
    /// patch node (`[3, S, S]` with `S` the encoder input size).
    pub fn texture_vars<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        exemplar: Option<Var>,
    ) -> Result<TextureVars> {
        match self.mode {
            Mode::Single => Ok(TextureVars {
                code: bound.get(TEXTURE_CODE)?,
                raw_transforms: if self.sampler.variant.learns_transforms() {
                    Some(bound.get(TEXTURE_TRANSFORM)?)
                } else {
                    None
                },
            }),
            Mode::Space => {
                let patch = exemplar
                    .ok_or_else(|| Error::Contract("space mode needs an exemplar patch".into()))?;
                let z = self.encoder_config()?.forward(tape, bound, patch)?;
                translate(tape, &self.sampler, bound, z)
            }
        }
    }

    pub fn sampler(&self) -> Result<Sampler> {
        Sampler::new(self.sampler, &self.params)
    }

    /// Code `z` of the centered encoder-sized crop of `exemplar`.
    pub fn encode(&self, exemplar: &Image) -> Result<Vec<f32>> {
        let enc = self.encoder_config()?;
        let patch = exemplar.center_crop(enc.input_size)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(patch.to_tensor());
        let z = enc.forward(&mut tape, &bound, x)?;
        Ok(tape.value(z).to_vec())
    }

    /// Texture parameters for code `z` (space mode).
    pub fn texture_from_z(&self, z: &[f32]) -> Result<Texture> {
        let enc = self.encoder_config()?;
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false);
        let zv = tape.constant(Tensor::new(&[1, enc.z_len], z.to_vec()).map_err(|_| {
            Error::Dimension {
                op: "texture code",
                lhs: vec![z.len()],
                rhs: vec![enc.z_len],
            }
        })?);
        let vars = translate(&mut tape, &self.sampler, &bound, zv)?;
        self.resolve(&mut tape, vars)
    }

    /// Texture parameters: the free variables in single mode, the encoded
    /// exemplar in space mode.
    pub fn texture(&self, exemplar: Option<&Image>) -> Result<Texture> {
        match self.mode {
            Mode::Single => {
                let mut tape = Tape::<f32>::new();
                let bound = self.params.bind(&mut tape, false);
                let vars = self.texture_vars(&mut tape, &bound, None)?;
                self.resolve(&mut tape, vars)
            }
            Mode::Space => {
                let img = exemplar
                    .ok_or_else(|| Error::Contract("space mode needs an exemplar".into()))?;
                self.texture_from_z(&self.encode(img)?)
            }
        }
    }

    fn resolve(&self, tape: &mut Tape<f32>, vars: TextureVars) -> Result<Texture> {
        let code = tape.value(vars.code).to_vec();
        let transforms = match vars.raw_transforms {
            Some(raw) => {
                let t = tape.transforms(raw, self.sampler.dim)?;
                let mats = tape.value(t).data().iter().map(|&v| v as f64).collect();
                TransformSet::new(self.sampler.dim, mats)?
            }
            None => TransformSet::identity(self.sampler.octaves.max(1), self.sampler.dim)?,
        };
        Ok(Texture { code, transforms })
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        let meta = |v: usize| Tensor::scalar(v as f32);
        let s = &self.sampler;
        a.push("meta.variant", meta(s.variant.code() as usize))?;
        a.push("meta.dim", meta(s.dim))?;
        a.push("meta.octaves", meta(s.octaves))?;
        a.push("meta.code_len", meta(s.code_len))?;
        a.push("meta.hidden", meta(s.hidden))?;
        a.push("meta.hidden_layers", meta(s.hidden_layers))?;
        a.push("meta.mode", meta(matches!(self.mode, Mode::Space) as usize))?;
        if let Some(enc) = &self.encoder {
            a.push("meta.encoder.input_size", meta(enc.input_size))?;
            a.push("meta.encoder.z_len", meta(enc.z_len))?;
            let ch = enc.channels.iter().map(|&c| c as f32).collect();
            a.push(
                "meta.encoder.channels",
                Tensor::new(&[enc.channels.len()], ch)?,
            )?;
        }
        for (n, t) in self.params.iter() {
            a.push(n, t.clone())?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let int = |name: &str| -> Result<usize> {
            let t = a.get(name)?;
            let v = t.data()[0];
            if t.len() != 1 || v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!(
                    "{name} must be a non-negative integer"
                )));
            }
            Ok(v as usize)
        };
        let sampler = SamplerConfig {
            variant: Variant::from_code(int("meta.variant")? as u32)?,
            dim: int("meta.dim")?,
            octaves: int("meta.octaves")?,
            code_len: int("meta.code_len")?,
            hidden: int("meta.hidden")?,
            hidden_layers: int("meta.hidden_layers")?,
        };
        sampler.validate()?;
        let mode = if int("meta.mode")? == 1 {
            Mode::Space
        } else {
            Mode::Single
        };
        let encoder = match mode {
            Mode::Single => None,
            Mode::Space => {
                let enc = EncoderConfig {
                    input_size: int("meta.encoder.input_size")?,
                    z_len: int("meta.encoder.z_len")?,
                    channels: a
                        .get("meta.encoder.channels")?
                        .data()
                        .iter()
                        .map(|&c| c as usize)
                        .collect(),
                };
                enc.validate()?;
                Some(enc)
            }
        };
        let mut params = ParamStore::new();
        for (n, t) in a.entries() {
            if !n.starts_with("meta.") {
                params.insert(n.clone(), t.clone());
            }
        }
        let model = Self {
            sampler,
            mode,
            encoder,
            params,
        };
        model.check_params()?;
        Ok(model)
    }

    /// Verifies every parameter the model reads is present with the right shape.
    fn check_params(&self) -> Result<()> {
        let reference = Self::init(self.sampler, self.mode, self.encoder.clone(), 0)?;
        for (n, t) in reference.params.iter() {
            let have = self.params.get(n)?;
            if have.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "{n}: expected shape {:?}, found {:?}",
                    t.shape(),
                    have.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}
