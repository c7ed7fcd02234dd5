//! Encoder `g` (exemplar patch to compact code `z`) and translator `h`
//! (`z` to the extended code and raw per-octave transforms).

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::sampler::{SamplerConfig, TextureVars};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const Z_LEN: usize = 8;
const SLOPE: f64 = 0.2;
const EPS: f64 = 1e-5;

/// Convolution stack: one 3x3 stride-1 conv, then 4x4 stride-2 convs, each
/// followed by instance norm and leaky relu, then a linear map to `z`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub z_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            channels: vec![32, 64, 128, 256, 256, 256],
            z_len: Z_LEN,
        }
    }
}

impl EncoderConfig {
    /// Narrow 64-pixel variant for small corpora and tests.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            channels: vec![16, 32, 32, 32, 32],
            z_len: Z_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.z_len == 0 {
            return Err(Error::Contract(
                "encoder needs non-empty channel widths and z".into(),
            ));
        }
        let downs = self.channels.len() - 1;
        if !self.input_size.is_multiple_of(1 << downs) || self.final_size() < 2 {
            return Err(Error::Contract(format!(
                "input size {} does not survive {downs} stride-2 stages",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn final_size(&self) -> usize {
        self.input_size >> (self.channels.len() - 1)
    }

    fn conv_shapes(&self) -> Vec<[usize; 4]> {
        let mut c = 3;
        self.channels
            .iter()
            .enumerate()
            .map(|(k, &o)| {
                let ks = if k == 0 { 3 } else { 4 };
                let s = [o, c, ks, ks];
                c = o;
                s
            })
            .collect()
    }

    fn flat_len(&self) -> usize {
        self.channels.last().unwrap() * self.final_size() * self.final_size()
    }

    /// Weights plus biases of the convolution stack.
    pub fn conv_param_count(&self) -> usize {
        self.conv_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>() + s[0])
            .sum()
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut store = ParamStore::new();
        for (k, s) in self.conv_shapes().into_iter().enumerate() {
            let fan_in = s[1] * s[2] * s[3];
            store.insert(
                format!("encoder.conv{k}.weight"),
                Tensor::he_uniform(&s, fan_in, rng)?,
            );
            store.insert(format!("encoder.conv{k}.bias"), Tensor::zeros(&[s[0]])?);
        }
        let flat = self.flat_len();
        store.insert(
            "encoder.fc.weight",
            Tensor::uniform(&[flat, self.z_len], (3.0 / flat as f64).sqrt(), rng)?,
        );
        store.insert("encoder.fc.bias", Tensor::zeros(&[self.z_len])?);
        Ok(store)
    }

    /// `[3, S, S]` image node to a `[1, z_len]` code node.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        image: Var,
    ) -> Result<Var> {
        let s = self.input_size;
        if tape.value(image).shape() != [3, s, s] {
            return Err(Error::Dimension {
                op: "encode",
                lhs: tape.value(image).shape().to_vec(),
                rhs: vec![3, s, s],
            });
        }
        let mut x = image;
        for k in 0..self.channels.len() {
            let w = params.get(&format!("encoder.conv{k}.weight"))?;
            let b = params.get(&format!("encoder.conv{k}.bias"))?;
            x = if k == 0 {
                tape.conv2d(x, w, Some(b), 1, 1)?
            } else {
                tape.conv2d(x, w, Some(b), 2, 1)?
            };
            x = tape.instance_norm(x, EPS)?;
            x = tape.leaky_relu(x, SLOPE);
        }
        let flat = tape.reshape(x, &[1, self.flat_len()])?;
        let w = params.get("encoder.fc.weight")?;
        let b = params.get("encoder.fc.bias")?;
        tape.linear(flat, w, Some(b))
    }
}

/// Translator heads: `e` from a small random init, transforms from zero so
/// an untrained translator emits identity matrices.
pub fn init_translator<T: Scalar, R: Rng + ?Sized>(
    cfg: &SamplerConfig,
    z_len: usize,
    rng: &mut R,
) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    let l = cfg.texture_code_len();
    store.insert(
        "translator.code.weight",
        Tensor::uniform(&[z_len, l], (3.0 / z_len as f64).sqrt(), rng)?,
    );
    store.insert("translator.code.bias", Tensor::zeros(&[l])?);
    if cfg.variant.learns_transforms() {
        let n = cfg.octaves * cfg.transform_params();
        store.insert("translator.transform.weight", Tensor::zeros(&[z_len, n])?);
        store.insert("translator.transform.bias", Tensor::zeros(&[n])?);
    }
    Ok(store)
}

/// `[1, z_len]` code node to texture parameters for the sampler.
pub fn translate<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &SamplerConfig,
    params: &Bound,
    z: Var,
) -> Result<TextureVars> {
    let w = params.get("translator.code.weight")?;
    let b = params.get("translator.code.bias")?;
    let e = tape.linear(z, w, Some(b))?;
    let code = tape.reshape(e, &[cfg.texture_code_len()])?;
    let raw_transforms = if cfg.variant.learns_transforms() {
        let w = params.get("translator.transform.weight")?;
        let b = params.get("translator.transform.bias")?;
        let raw = tape.linear(z, w, Some(b))?;
        Some(tape.reshape(raw, &[cfg.octaves, cfg.transform_params()])?)
    } else {
        None
    };
    Ok(TextureVars {
        code,
        raw_transforms,
    })
}
