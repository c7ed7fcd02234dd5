//! Frozen convolutional feature extractors and the Gram-matrix style loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise::hashed_uniform;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Seed of the hashed weight table used by the mini extractor.
const MINI_SEED: u64 = 0x6d69_6e69_7667_6700;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    Vgg19,
    MiniVgg,
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExtractorKind::Vgg19 => "vgg",
            ExtractorKind::MiniVgg => "minivgg",
        })
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vgg" | "vgg19" => Ok(ExtractorKind::Vgg19),
            "minivgg" | "mini" => Ok(ExtractorKind::MiniVgg),
            _ => Err(Error::Contract(format!(
                "unknown extractor {s:?} (expected vgg or minivgg)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Layer {
    /// 3x3, stride 1, pad 1; index into the `features.convK` names.
    Conv(usize),
    Relu,
    MaxPool,
    AvgPool,
    Tap,
}

/// Frozen feature extractor. Weights are recorded as constants, so only the
/// input image can receive gradients.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    kind: ExtractorKind,
    layers: Vec<Layer>,
    weights: ParamStore<T>,
}

fn conv_name(k: usize) -> (String, String) {
    (
        format!("features.conv{k}.weight"),
        format!("features.conv{k}.bias"),
    )
}

/// Channel widths of the VGG-19 convolutions up to the first conv of block 4.
const VGG_WIDTHS: [usize; 9] = [64, 64, 128, 128, 256, 256, 256, 256, 512];

#[rustfmt::skip]
fn vgg_layers() -> Vec<Layer> {
    use Layer::*;
    vec![
        Conv(0), Relu, Tap, Conv(1), Relu, MaxPool,
        Conv(2), Relu, Tap, Conv(3), Relu, MaxPool,
        Conv(4), Relu, Tap, Conv(5), Relu, Conv(6), Relu, Conv(7), Relu, MaxPool,
        Conv(8), Relu, Tap,
    ]
}

const MINI_WIDTHS: [usize; 4] = [16, 32, 64, 128];

#[rustfmt::skip]
fn mini_layers() -> Vec<Layer> {
    use Layer::*;
    vec![
        Conv(0), Relu, Tap, AvgPool,
        Conv(1), Relu, Tap, AvgPool,
        Conv(2), Relu, Tap, AvgPool,
        Conv(3), Relu, Tap,
    ]
}

impl<T: Scalar> FeatureExtractor<T> {
    /// VGG-19 geometry over `features.conv0..conv8` from `weights`
    /// (additional tensors are ignored).
    pub fn vgg19(weights: &ParamStore<f32>) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut c = 3;
        for (k, &o) in VGG_WIDTHS.iter().enumerate() {
            let (wn, bn) = conv_name(k);
            let w = weights.get(&wn)?;
            let b = weights.get(&bn)?;
            if w.shape() != [o, c, 3, 3] || b.shape() != [o] {
                return Err(Error::Format(format!(
                    "{wn}: expected [{o}, {c}, 3, 3], found {:?}",
                    w.shape()
                )));
            }
            store.insert(wn, w.cast());
            store.insert(bn, b.cast());
            c = o;
        }
        Ok(Self {
            kind: ExtractorKind::Vgg19,
            layers: vgg_layers(),
            weights: store,
        })
    }

    /// Four blocks of fixed pseudo-random 3x3 convolutions with widths
    /// 16/32/64/128, relu and 2x2 average pooling. Weights are He-scaled
    /// values from the noise hash; biases are zero.
    pub fn mini_vgg() -> Self {
        let mut store = ParamStore::new();
        let mut c = 3;
        for (k, &o) in MINI_WIDTHS.iter().enumerate() {
            let fan_in = c * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..o * fan_in)
                .map(|i| T::from_f64(hashed_uniform(MINI_SEED, k as u64, i as u64) * bound))
                .collect();
            let (wn, bn) = conv_name(k);
            store.insert(wn, Tensor::from_parts(vec![o, c, 3, 3], data));
            store.insert(bn, Tensor::from_parts(vec![o], vec![T::zero(); o]));
            c = o;
        }
        Self {
            kind: ExtractorKind::MiniVgg,
            layers: mini_layers(),
            weights: store,
        }
    }

    pub fn kind(&self) -> ExtractorKind {
        self.kind
    }

    pub fn weights(&self) -> &ParamStore<T> {
        &self.weights
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            kind: self.kind,
            layers: self.layers.clone(),
            weights: self.weights.cast(),
        }
    }

    pub fn tap_count(&self) -> usize {
        self.layers.iter().filter(|l| **l == Layer::Tap).count()
    }

    /// Smallest side that keeps every tap non-empty.
    pub fn min_size(&self) -> usize {
        let last_tap = self
            .layers
            .iter()
            .rposition(|l| *l == Layer::Tap)
            .unwrap_or(0);
        let pools = self.layers[..last_tap]
            .iter()
            .filter(|l| matches!(l, Layer::MaxPool | Layer::AvgPool))
            .count();
        1 << pools
    }

    /// Tap activations for a `[3, H, W]` image node with values in `[0, 1]`.
    pub fn extract(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        let shape = tape.value(image).shape().to_vec();
        let min = self.min_size();
        if shape.len() != 3 || shape[0] != 3 || shape[1] < min || shape[2] < min {
            return Err(Error::Dimension {
                op: "extract",
                lhs: shape,
                rhs: vec![3, min, min],
            });
        }
        let shift: Vec<f64> = (0..3)
            .map(|c| -IMAGENET_MEAN[c] / IMAGENET_STD[c])
            .collect();
        let scale: Vec<f64> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
        let mut x = tape.channel_affine(image, &scale, &shift)?;
        let mut taps = Vec::with_capacity(self.tap_count());
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(k) => {
                    let (wn, bn) = conv_name(*k);
                    let w = tape.constant(self.weights.get(&wn)?.clone());
                    let b = tape.constant(self.weights.get(&bn)?.clone());
                    tape.conv2d(x, w, Some(b), 1, 1)?
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool => tape.max_pool2(x)?,
                Layer::AvgPool => tape.avg_pool2(x)?,
                Layer::Tap => {
                    taps.push(x);
                    x
                }
            };
        }
        Ok(taps)
    }

    /// Tap activations as plain tensors.
    pub fn features(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let taps = self.extract(&mut tape, x)?;
        Ok(taps.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Gram matrices of every tap.
    pub fn grams(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let taps = self.extract(&mut tape, x)?;
        taps.into_iter()
            .map(|v| {
                let g = tape.gram(v)?;
                Ok(tape.value(g).clone())
            })
            .collect()
    }

    /// `sum_taps |gram(F(image)) - target|^2` with fixed target Gram matrices.
    pub fn style_loss_to(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        target: &[Tensor<T>],
    ) -> Result<Var> {
        let taps = self.extract(tape, image)?;
        if target.len() != taps.len() {
            return Err(Error::Dimension {
                op: "style_loss",
                lhs: vec![taps.len()],
                rhs: vec![target.len()],
            });
        }
        let mut total = None;
        for (f, t) in taps.into_iter().zip(target) {
            let g = tape.gram(f)?;
            let t = tape.constant(t.clone());
            let d = tape.sq_dist(g, t)?;
            total = Some(match total {
                None => d,
                Some(acc) => tape.add(acc, d)?,
            });
        }
        Ok(total.expect("extractors have at least one tap"))
    }

    /// Style loss between two image nodes; differentiable in both.
    pub fn style_loss(&self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (
            tape.value(a).shape().to_vec(),
            tape.value(b).shape().to_vec(),
        );
        if sa != sb {
            return Err(Error::Dimension {
                op: "style_loss",
                lhs: sa,
                rhs: sb,
            });
        }
        let fa = self.extract(tape, a)?;
        let fb = self.extract(tape, b)?;
        let mut total = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let gx = tape.gram(x)?;
            let gy = tape.gram(y)?;
            let d = tape.sq_dist(gx, gy)?;
            total = Some(match total {
                None => d,
                Some(acc) => tape.add(acc, d)?,
            });
        }
        Ok(total.expect("extractors have at least one tap"))
    }

    pub fn style_distance(&self, a: &Image, b: &Image) -> Result<StyleDistance> {
        if (a.width(), a.height()) != (b.width(), b.height()) {
            return Err(Error::Dimension {
                op: "style_distance",
                lhs: vec![a.height(), a.width()],
                rhs: vec![b.height(), b.width()],
            });
        }
        let ga = self.grams(&a.to_tensor())?;
        let gb = self.grams(&b.to_tensor())?;
        gram_distance(&ga, &gb)
    }
}

/// Style distance with its per-tap breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDistance {
    pub value: f64,
    pub per_tap: Vec<f64>,
}

/// `sum_taps |ga - gb|^2`, accumulated in double precision.
pub fn gram_distance<T: Scalar>(ga: &[Tensor<T>], gb: &[Tensor<T>]) -> Result<StyleDistance> {
    if ga.len() != gb.len() {
        return Err(Error::Dimension {
            op: "gram_distance",
            lhs: vec![ga.len()],
            rhs: vec![gb.len()],
        });
    }
    let mut per_tap = Vec::with_capacity(ga.len());
    for (a, b) in ga.iter().zip(gb) {
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op: "gram_distance",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        per_tap.push(
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&p, &q)| {
                    let d = p.as_f64() - q.as_f64();
                    d * d
                })
                .sum(),
        );
    }
    Ok(StyleDistance {
        value: per_tap.iter().sum(),
        per_tap,
    })
}
