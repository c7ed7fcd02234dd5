//! Training loops for single-exemplar and space modes.
//!
//! Each step draws a patch from the corpus and a slice through the target
//! domain per batch item, renders the slice with one seed shared by the whole
//! step, and applies one Adam update on the mean style loss.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Mode, TextureModel};
use crate::noise::finalize;
use crate::optim::Adam;
use crate::perceptual::{ExtractorKind, FeatureExtractor};
use crate::sampler::{render_on_tape, GridSpec, SamplerConfig, Variant};
use crate::tensor::Tape;

const STEP_SEED_SALT: u64 = 0x5EED_0F57_E9A1_1CE5;
const STEP_RNG_SALT: u64 = 0xC0FF_EE15_BA7C_4E55;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub variant: Variant,
    pub target_dim: usize,
    pub octaves: usize,
    pub patch_size: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub global_seed: u64,
    pub extractor: ExtractorKind,
    /// Lattice units spanned by one rendered patch.
    pub extent: f64,
    /// 3D slices are placed with offsets in `[0, slice_range)` along every axis.
    pub slice_range: f64,
    /// Space mode only; its input size must equal `patch_size`.
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Single,
            variant: Variant::Ours,
            target_dim: 2,
            octaves: 8,
            patch_size: 128,
            batch: 8,
            steps: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            global_seed: 0,
            extractor: ExtractorKind::Vgg19,
            extent: 4.0,
            slice_range: 16.0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 64-pixel patches, batch 4, the hermetic mini extractor.
    pub fn desk() -> Self {
        Self {
            patch_size: 64,
            batch: 4,
            extractor: ExtractorKind::MiniVgg,
            encoder: EncoderConfig::desk(),
            ..Self::default()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            octaves: self.octaves,
            ..SamplerConfig::new(self.variant, self.target_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler_config().validate()?;
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.patch_size < 32 {
            return bad(format!(
                "patch_size must be at least 32, got {}",
                self.patch_size
            ));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) || !(self.slice_range >= 0.0) {
            return bad("extent must be positive and slice_range non-negative".into());
        }
        if self.mode == Mode::Space {
            self.encoder.validate()?;
            if self.encoder.input_size != self.patch_size {
                return bad(format!(
                    "encoder input size {} must equal patch_size {}",
                    self.encoder.input_size, self.patch_size
                ));
            }
        }
        Ok(())
    }

    /// Noise seed shared by every read within `step`.
    pub fn step_seed(&self, step: usize) -> u64 {
        finalize(self.global_seed ^ finalize((step as u64).wrapping_add(STEP_SEED_SALT)))
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(finalize(
            self.global_seed.wrapping_add(STEP_RNG_SALT) ^ step as u64,
        ))
    }
}

/// Uniform top-left corner of a `size` crop inside a `width x height` image.
pub fn sample_patch_offset<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    size: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if width < size || height < size || size == 0 {
        return Err(Error::Dimension {
            op: "sample_exemplar_patch",
            lhs: vec![height, width],
            rhs: vec![size, size],
        });
    }
    Ok((
        rng.gen_range(0..=width - size),
        rng.gen_range(0..=height - size),
    ))
}

/// Uniformly placed axis-aligned crop of side `size`.
pub fn sample_exemplar_patch<R: Rng + ?Sized>(
    exemplar: &Image,
    size: usize,
    rng: &mut R,
) -> Result<Image> {
    let (x, y) = sample_patch_offset(exemplar.width(), exemplar.height(), size, rng)?;
    exemplar.crop(x, y, size, size)
}

/// A plane through the target domain with orthonormal in-plane axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub origin: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// Normal axis for 3D slices.
    pub axis: Option<usize>,
}

impl Slice {
    pub fn grid(&self, extent: f64, resolution: usize) -> Result<GridSpec> {
        let scale = |a: &[f64]| a.iter().map(|c| c * extent).collect();
        GridSpec::new(
            self.origin.clone(),
            scale(&self.u),
            scale(&self.v),
            resolution,
            resolution,
        )
    }
}

/// Identity slice in 2D; in 3D a plane orthogonal to a uniformly chosen
/// major axis, with random offset and in-plane translation in `[0, range)`.
pub fn sample_slice<R: Rng + ?Sized>(target_dim: usize, range: f64, rng: &mut R) -> Result<Slice> {
    match target_dim {
        2 => Ok(Slice {
            origin: vec![0.0, 0.0],
            u: vec![1.0, 0.0],
            v: vec![0.0, 1.0],
            axis: None,
        }),
        3 => {
            let axis = rng.gen_range(0..3);
            let mut origin = vec![0.0; 3];
            if range > 0.0 {
                for c in origin.iter_mut() {
                    *c = rng.gen_range(0.0..range);
                }
            }
            let mut u = vec![0.0; 3];
            let mut v = vec![0.0; 3];
            u[(axis + 1) % 3] = 1.0;
            v[(axis + 2) % 3] = 1.0;
            Ok(Slice {
                origin,
                u,
                v,
                axis: Some(axis),
            })
        }
        d => Err(Error::Contract(format!(
            "target dimension must be 2 or 3, got {d}"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub losses: Vec<f64>,
    pub optimizer: Adam,
}

/// One batch item after sampling: what to render and what to match.
struct Item {
    patch: Image,
    grid: GridSpec,
}

pub struct Trainer {
    config: TrainConfig,
    model: TextureModel,
    state: TrainState,
    extractor: FeatureExtractor<f32>,
    corpus: Vec<Image>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        corpus: Vec<Image>,
        extractor: FeatureExtractor<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let model = TextureModel::init(
            config.sampler_config(),
            config.mode,
            Some(config.encoder.clone()),
            config.global_seed,
        )?;
        Self::with_model(config, model, corpus, extractor)
    }

    pub fn with_model(
        config: TrainConfig,
        model: TextureModel,
        corpus: Vec<Image>,
        extractor: FeatureExtractor<f32>,
    ) -> Result<Self> {
        config.validate()?;
        if model.sampler != config.sampler_config() || model.mode != config.mode {
            return Err(Error::Contract(
                "model does not match the training configuration".into(),
            ));
        }
        if corpus.is_empty() {
            return Err(Error::Contract("training corpus is empty".into()));
        }
        if config.mode == Mode::Single && corpus.len() != 1 {
            return Err(Error::Contract(format!(
                "single-exemplar mode needs exactly one exemplar, got {}",
                corpus.len()
            )));
        }
        let p = config.patch_size;
        if let Some(img) = corpus.iter().find(|i| i.width() < p || i.height() < p) {
            return Err(Error::Dimension {
                op: "exemplar",
                lhs: vec![img.height(), img.width()],
                rhs: vec![p, p],
            });
        }
        let optimizer = Adam::new(config.lr, config.beta1, config.beta2, config.eps);
        Ok(Self {
            config,
            model,
            state: TrainState {
                step: 0,
                losses: Vec::new(),
                optimizer,
            },
            extractor,
            corpus,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &TextureModel {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn extractor(&self) -> &FeatureExtractor<f32> {
        &self.extractor
    }

    pub fn into_model(self) -> TextureModel {
        self.model
    }

    fn draw_items(&self, step: usize) -> Result<Vec<Item>> {
        let mut rng = self.config.step_rng(step);
        (0..self.config.batch)
            .map(|_| {
                let pick = rng.gen_range(0..self.corpus.len());
                let patch =
                    sample_exemplar_patch(&self.corpus[pick], self.config.patch_size, &mut rng)?;
                let slice =
                    sample_slice(self.config.target_dim, self.config.slice_range, &mut rng)?;
                let grid = slice.grid(self.config.extent, self.config.patch_size)?;
                Ok(Item { patch, grid })
            })
            .collect()
    }

    /// Loss and parameter gradients of one batch item.
    fn item(&self, item: &Item, seed: u64) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
        let target = self.extractor.grams(&item.patch.to_tensor())?;
        let mut tape = Tape::<f32>::new();
        let bound = self.model.params.bind(&mut tape, true);
        let exemplar = match self.model.mode {
            Mode::Space => Some(tape.constant(item.patch.to_tensor())),
            Mode::Single => None,
        };
        let tex = self.model.texture_vars(&mut tape, &bound, exemplar)?;
        let image = render_on_tape(
            &mut tape,
            &self.model.sampler,
            &bound,
            &tex,
            &item.grid,
            seed,
        )?;
        let loss = self.extractor.style_loss_to(&mut tape, image, &target)?;
        let value = tape.value(loss).data()[0] as f64;
        let grads = tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, var) in bound.iter() {
            if let Some(g) = grads.get(var) {
                out.insert(name.to_string(), g.to_vec());
            }
        }
        Ok((value, out))
    }

    /// One optimizer update; returns the mean batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.state.step;
        let seed = self.config.step_seed(step);
        let items = self.draw_items(step)?;
        let results: Vec<Result<(f64, BTreeMap<String, Vec<f32>>)>> =
            items.par_iter().map(|it| self.item(it, seed)).collect();

        let mut total = 0.0;
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for r in results {
            // Coordinates leave the lattice range only once the transform has blown up.
            let (loss, g) = r.map_err(|e| match e {
                Error::Range { value } => Error::NonFinite {
                    step,
                    detail: format!(
                        "sample coordinate {value} outside the lattice range\n{}",
                        self.diagnostics(f64::NAN, &BTreeMap::new())
                    ),
                },
                e => e,
            })?;
            total += loss;
            for (name, gv) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, gv);
                    }
                }
            }
        }
        let n = self.config.batch as f32;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v /= n);
        }
        let loss = total / self.config.batch as f64;
        if !loss.is_finite() || grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                step,
                detail: self.diagnostics(loss, &grads),
            });
        }
        self.state.optimizer.step(&mut self.model.params, &grads)?;
        if self
            .model
            .params
            .iter()
            .any(|(_, t)| t.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite {
                step,
                detail: self.diagnostics(loss, &grads),
            });
        }
        self.state.step += 1;
        self.state.losses.push(loss);
        Ok(loss)
    }

    fn diagnostics(&self, loss: f64, grads: &BTreeMap<String, Vec<f32>>) -> String {
        let mut lines = vec![format!("loss = {loss}")];
        for (name, t) in self.model.params.iter() {
            let norm = |v: &[f32]| {
                v.iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt()
            };
            let gnorm = grads.get(name).map(|g| norm(g)).unwrap_or(0.0);
            lines.push(format!(
                "{name}: |param| = {:.6e}, |grad| = {gnorm:.6e}",
                norm(t.data())
            ));
        }
        lines.join("\n")
    }

    /// Runs until `config.steps` updates have been applied, calling `on_step`
    /// after each one.
    pub fn run<F>(&mut self, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer) -> Result<()>,
    {
        while self.state.step < self.config.steps {
            self.step()?;
            on_step(self)?;
        }
        Ok(())
    }
}

/// Trains a fresh model from `config` and returns it with its final state.
pub fn train(
    config: TrainConfig,
    corpus: Vec<Image>,
    extractor: FeatureExtractor<f32>,
) -> Result<(TextureModel, TrainState)> {
    let mut t = Trainer::new(config, corpus, extractor)?;
    t.run(|_| Ok(()))?;
    Ok((t.model, t.state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_crop_and_determinism() {
        let img = Image::new(
            64,
            64,
            (0..3 * 64 * 64).map(|v| (v % 251) as f32 / 251.0).collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_exemplar_patch(&img, 64, &mut rng).unwrap(), img);
        let a = sample_exemplar_patch(&img, 40, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_exemplar_patch(&img, 40, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(sample_exemplar_patch(&img, 65, &mut rng).is_err());
    }

    #[test]
    fn crop_offsets_cover_valid_positions() {
        // per-axis coverage: 129 valid offsets per axis for a 128 crop of 256
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let side = 256 - 128 + 1;
        let (mut xs, mut ys) = (vec![false; side], vec![false; side]);
        for _ in 0..10_000 {
            let (x, y) = sample_patch_offset(256, 256, 128, &mut rng).unwrap();
            xs[x] = true;
            ys[y] = true;
        }
        for seen in [xs, ys] {
            let covered = seen.iter().filter(|&&s| s).count() as f64 / side as f64;
            assert!(covered >= 0.95, "{covered}");
        }
    }

    #[test]
    fn slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sample_slice(2, 16.0, &mut rng).unwrap();
        assert_eq!(
            (s.origin, s.u, s.v),
            (vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0])
        );
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            let s = sample_slice(3, 16.0, &mut rng).unwrap();
            let dot: f64 = s.u.iter().zip(&s.v).map(|(a, b)| a * b).sum();
            assert_eq!(dot, 0.0);
            let a = s.axis.unwrap();
            assert_eq!((s.u[a], s.v[a]), (0.0, 0.0));
            counts[a] += 1;
        }
        for c in counts {
            assert!((c as f64 / 3000.0 - 1.0 / 3.0).abs() < 0.05, "{counts:?}");
        }
        assert!(sample_slice(4, 1.0, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        let small = TrainConfig {
            patch_size: 16,
            ..TrainConfig::desk()
        };
        assert!(small.validate().is_err());
        let space = TrainConfig {
            mode: Mode::Space,
            patch_size: 128,
            ..TrainConfig::desk()
        };
        assert!(space.validate().is_err());
        let c = TrainConfig::desk();
        assert_ne!(c.step_seed(0), c.step_seed(1));
    }
}
