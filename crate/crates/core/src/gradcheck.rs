//! Central finite-difference checks for graphs recorded on a 64-bit [`Tape`].
//!
//! Numeric derivatives only ever call the forward pass, so they are an
//! independent oracle for [`Tape::backward`].

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::noise::{sample, sample_with_grad, NoiseSpec};
use crate::params::Bound;
use crate::perceptual::FeatureExtractor;
use crate::sampler::{render_on_tape, GridSpec, SamplerConfig, TextureVars, Variant};
use crate::tensor::{Tape, Tensor, Var};
use crate::transform::params_per_octave;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Largest relative gap between one-sided slopes for a probe to count as smooth.
pub const KINK_RATIO: f64 = 1e-3;

/// Analytic and numeric derivatives at the probed coordinates.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|)` in the Euclidean norm over all probed coordinates.
    pub fn rel_error(&self) -> f64 {
        rel_error(&self.analytic, &self.numeric)
    }
}

pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(n).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut n.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Every `(input, element)` pair.
pub fn all_coords(inputs: &[Tensor<f64>]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect()
}

/// `count` distinct coordinates drawn without replacement.
pub fn random_coords(inputs: &[Tensor<f64>], count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut all = all_coords(inputs);
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all.truncate(count);
    all
}

fn eval<F>(inputs: &[Tensor<f64>], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares `d loss / d input` from the tape with central differences of step `h`.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    build: F,
    coords: &[(usize, usize)],
    h: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &(i, e) in coords {
        analytic.push(grads.get(vars[i]).map_or(0.0, |g| g.data()[e]));
        let mut shifted = inputs.to_vec();
        let mut probe = |delta: f64| -> Result<f64> {
            let mut data = inputs[i].to_vec();
            data[e] += delta;
            shifted[i] = Tensor::new(inputs[i].shape(), data)?;
            eval(&shifted, &build)
        };
        let plus = probe(h)?;
        let minus = probe(-h)?;
        numeric.push((plus - minus) / (2.0 * h));
    }
    Ok(GradCheck { analytic, numeric })
}

/// Like [`check`], but walks `candidates` in order and keeps the first
/// `count` coordinates whose one-sided slopes agree, so probes that straddle
/// a relu or lattice-cell kink are skipped.
pub fn check_smooth<F>(
    inputs: &[Tensor<f64>],
    build: F,
    candidates: &[(usize, usize)],
    count: usize,
    h: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let center = eval(inputs, &build)?;
    let mut kept = Vec::with_capacity(count);
    for &(i, e) in candidates {
        if kept.len() == count {
            break;
        }
        let probe = |delta: f64| -> Result<f64> {
            let mut shifted = inputs.to_vec();
            let mut data = inputs[i].to_vec();
            data[e] += delta;
            shifted[i] = Tensor::new(inputs[i].shape(), data)?;
            eval(&shifted, &build)
        };
        let fwd = (probe(h)? - center) / h;
        let bwd = (center - probe(-h)?) / h;
        if (fwd - bwd).abs() <= KINK_RATIO * fwd.abs().max(bwd.abs()).max(1e-12) {
            kept.push((i, e));
        }
    }
    check(inputs, build, &kept, h)
}

/// `sum(out * r)` for a fixed random `r`, so every output element carries a distinct weight.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5))?;
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(1e-2..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng).expect("valid shape")
}

/// Distinct values spaced 0.01 apart, shuffled, so pooling windows never tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|k| k as f64 * 0.01 - n as f64 * 0.005).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).expect("valid shape")
}

/// Random points whose lattice coordinates stay at least `margin` away
/// from every cell boundary for all octaves and transforms given.
fn safe_points(
    n: usize,
    dim: usize,
    mats: &[f64],
    octaves: usize,
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let dd = dim * dim;
    let mut out = Vec::with_capacity(n * dim);
    while out.len() < n * dim {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let ok = (0..octaves).all(|i| {
            let freq = (1u64 << i) as f64;
            (0..dim).all(|r| {
                let u: f64 = (0..dim)
                    .map(|k| mats[i * dd + r * dim + k] * x[k])
                    .sum::<f64>()
                    * freq;
                let f = u - u.floor();
                f > margin && f < 1.0 - margin
            })
        });
        if ok {
            out.extend(x);
        }
    }
    out
}

fn random_raw(octaves: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..octaves * params_per_octave(dim))
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect()
}

fn materialized(raw: &[f64], dim: usize) -> Vec<f64> {
    raw.chunks_exact(params_per_octave(dim))
        .flat_map(|r| crate::transform::materialize(r, dim))
        .collect()
}

type Case = (
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
);

/// One seeded instance of the named operator check.
fn instance(op: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = seed;
    let case: Case = match op {
        "linear" => (
            vec![
                uniform(&[3, 4], &mut rng),
                uniform(&[4, 5], &mut rng),
                uniform(&[5], &mut rng),
            ],
            Box::new(move |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, s)
            }),
        ),
        "conv2d_3x3" => (
            vec![
                uniform(&[2, 6, 5], &mut rng),
                uniform(&[3, 2, 3, 3], &mut rng),
                uniform(&[3], &mut rng),
            ],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                project(t, y, s)
            }),
        ),
        "conv2d_4x4_s2" => (
            vec![
                uniform(&[2, 8, 8], &mut rng),
                uniform(&[3, 2, 4, 4], &mut rng),
                uniform(&[3], &mut rng),
            ],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                project(t, y, s)
            }),
        ),
        "max_pool2" => (
            vec![distinct(&[2, 4, 6], &mut rng)],
            Box::new(move |t, v| {
                let y = t.max_pool2(v[0])?;
                project(t, y, s)
            }),
        ),
        "avg_pool2" => (
            vec![uniform(&[2, 4, 6], &mut rng)],
            Box::new(move |t, v| {
                let y = t.avg_pool2(v[0])?;
                project(t, y, s)
            }),
        ),
        "relu" => (
            vec![away_from_zero(&[4, 5], &mut rng)],
            Box::new(move |t, v| {
                let y = t.relu(v[0]);
                project(t, y, s)
            }),
        ),
        "leaky_relu" => (
            vec![away_from_zero(&[4, 5], &mut rng)],
            Box::new(move |t, v| {
                let y = t.leaky_relu(v[0], 0.2);
                project(t, y, s)
            }),
        ),
        "instance_norm" => (
            vec![uniform(&[3, 4, 4], &mut rng)],
            Box::new(move |t, v| {
                let y = t.instance_norm(v[0], 1e-5)?;
                project(t, y, s)
            }),
        ),
        "add" | "mul" | "sq_dist" | "mse" => {
            let name = op.to_string();
            (
                vec![uniform(&[3, 4], &mut rng), uniform(&[3, 4], &mut rng)],
                Box::new(move |t, v| match name.as_str() {
                    "add" => {
                        let y = t.add(v[0], v[1])?;
                        project(t, y, s)
                    }
                    "mul" => {
                        let y = t.mul(v[0], v[1])?;
                        project(t, y, s)
                    }
                    "sq_dist" => t.sq_dist(v[0], v[1]),
                    _ => t.mse(v[0], v[1]),
                }),
            )
        }
        "scale_sum" => (
            vec![uniform(&[3, 4], &mut rng)],
            Box::new(move |t, v| {
                let y = t.scale(v[0], -1.7);
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            }),
        ),
        "reshape_transpose" => (
            vec![uniform(&[2, 6], &mut rng)],
            Box::new(move |t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                let y = t.transpose(y)?;
                project(t, y, s)
            }),
        ),
        "concat_broadcast" => (
            vec![uniform(&[5, 2], &mut rng), uniform(&[3], &mut rng)],
            Box::new(move |t, v| {
                let b = t.broadcast_rows(v[1], 5)?;
                let y = t.concat_cols(&[v[0], b])?;
                project(t, y, s)
            }),
        ),
        "channel_affine" => (
            vec![uniform(&[3, 2, 2], &mut rng)],
            Box::new(move |t, v| {
                let y = t.channel_affine(v[0], &[0.5, -2.0, 4.0], &[0.1, 0.2, -0.3])?;
                project(t, y, s)
            }),
        ),
        "gram" => (
            vec![uniform(&[3, 4, 5], &mut rng)],
            Box::new(move |t, v| {
                let y = t.gram(v[0])?;
                project(t, y, s)
            }),
        ),
        "transforms_2d" | "transforms_3d" => {
            let dim = if op.ends_with("2d") { 2 } else { 3 };
            let raw = random_raw(3, dim, &mut rng);
            (
                vec![Tensor::new(&[3, params_per_octave(dim)], raw)?],
                Box::new(move |t, v| {
                    let y = t.transforms(v[0], dim)?;
                    project(t, y, s)
                }),
            )
        }
        "noise_stack_2d" | "noise_stack_3d" => {
            let dim = if op.ends_with("2d") { 2 } else { 3 };
            let octaves = 3;
            let raw = random_raw(octaves, dim, &mut rng);
            let mats = materialized(&raw, dim);
            let coords = Arc::new(safe_points(6, dim, &mats, octaves, 1e-3, &mut rng));
            let seed_field = rng.gen::<u64>();
            (
                vec![Tensor::new(&[octaves, dim, dim], mats)?],
                Box::new(move |t, v| {
                    let n = t.noise_stack(Arc::clone(&coords), dim, v[0], seed_field)?;
                    project(t, n, s)
                }),
            )
        }
        "noise_transform_params" => {
            let (dim, octaves) = (2, 4);
            let raw = random_raw(octaves, dim, &mut rng);
            let mats = materialized(&raw, dim);
            let coords = Arc::new(safe_points(6, dim, &mats, octaves, 1e-3, &mut rng));
            let seed_field = rng.gen::<u64>();
            (
                vec![Tensor::new(&[octaves, params_per_octave(dim)], raw)?],
                Box::new(move |t, v| {
                    let m = t.transforms(v[0], dim)?;
                    let n = t.noise_stack(Arc::clone(&coords), dim, m, seed_field)?;
                    project(t, n, s)
                }),
            )
        }
        other => {
            return Err(crate::Error::Contract(format!(
                "unknown gradient case `{other}`"
            )))
        }
    };
    Ok(case)
}

/// Operator checks run by [`run_op_suite`].
pub const OPS: &[&str] = &[
    "linear",
    "conv2d_3x3",
    "conv2d_4x4_s2",
    "max_pool2",
    "avg_pool2",
    "relu",
    "leaky_relu",
    "instance_norm",
    "add",
    "mul",
    "scale_sum",
    "reshape_transpose",
    "concat_broadcast",
    "channel_affine",
    "gram",
    "sq_dist",
    "mse",
    "transforms_2d",
    "transforms_3d",
    "noise_stack_2d",
    "noise_stack_3d",
    "noise_transform_params",
];

/// Worst relative error over `instances` seeded instances of `op`.
pub fn worst_op_error(op: &str, instances: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let (inputs, build) = instance(op, 1000 + k)?;
        let coords = all_coords(&inputs);
        worst = worst.max(check(&inputs, build, &coords, STEP)?.rel_error());
    }
    Ok(worst)
}

/// Worst relative error of `d noise / d x` against central differences,
/// over `instances` random points at least `1e-3` from lattice hyperplanes.
pub fn worst_coordinate_error(dim: usize, instances: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + k);
        let octave = rng.gen_range(1..=4u32);
        let raw = random_raw(1, dim, &mut rng);
        let mat = materialized(&raw, dim);
        let freq = (1u64 << (octave - 1)) as f64;
        let scaled: Vec<f64> = mat.iter().map(|v| v * freq).collect();
        let x = safe_points(1, dim, &scaled, 1, 1e-3, &mut rng);
        let spec = NoiseSpec::new(rng.gen(), octave, dim)?;
        let g = sample_with_grad(&x, &mat, &spec)?;
        let mut numeric = Vec::with_capacity(dim);
        for d in 0..dim {
            let mut p = x.clone();
            let mut m = x.clone();
            p[d] += STEP;
            m[d] -= STEP;
            numeric.push((sample(&p, &mat, &spec)? - sample(&m, &mat, &spec)?) / (2.0 * STEP));
        }
        worst = worst.max(rel_error(&g.d_x, &numeric));
    }
    Ok(worst)
}

/// Small `ours` sampler rendered on an 8x8 grid and scored against random
/// target Gram matrices by the mini extractor; checks `probes` random
/// parameters (decoder, code and raw transforms).
pub fn pipeline_error(seed: u64, probes: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SamplerConfig {
        octaves: 3,
        code_len: 4,
        hidden: 8,
        hidden_layers: 2,
        ..SamplerConfig::new(Variant::Ours, 2)
    };
    let decoder = cfg.init_decoder::<f64, _>(&mut rng)?;
    let mut names: Vec<String> = decoder.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor<f64>> = decoder
        .iter()
        .map(|(_, t)| {
            let data = t
                .data()
                .iter()
                .map(|v| v + rng.gen_range(-0.05..0.05))
                .collect();
            Tensor::new(t.shape(), data)
        })
        .collect::<Result<_>>()?;
    names.push("code".into());
    inputs.push(uniform(&[cfg.code_len], &mut rng));
    names.push("raw".into());
    inputs.push(Tensor::uniform(&[cfg.octaves, 3], 0.4, &mut rng)?);

    let fx = FeatureExtractor::<f64>::mini_vgg();
    let target = fx.grams(&Tensor::uniform(&[3, 8, 8], 1.0, &mut rng)?.map(f64::abs))?;
    let grid = GridSpec::window(
        &[rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        [2.0, 2.0],
        8,
        8,
    )?;
    let field_seed: u64 = rng.gen();
    let n = names.len();
    let build = |t: &mut Tape<f64>, v: &[Var]| {
        let bound = Bound::from_vars(
            names[..n - 2]
                .iter()
                .cloned()
                .zip(v[..n - 2].iter().copied()),
        );
        let tex = TextureVars {
            code: v[n - 2],
            raw_transforms: Some(v[n - 1]),
        };
        let img = render_on_tape(t, &cfg, &bound, &tex, &grid, field_seed)?;
        fx.style_loss_to(t, img, &target)
    };
    let candidates = random_coords(&inputs, usize::MAX, seed ^ 0x51);
    let result = check_smooth(&inputs, build, &candidates, probes, STEP)?;
    if result.analytic.len() < probes {
        return Err(crate::error::Error::Contract(format!(
            "only {} smooth probes found",
            result.analytic.len()
        )));
    }
    Ok(result.rel_error())
}

/// Style loss gradient with respect to every pixel of an 8x8 image.
pub fn style_input_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = FeatureExtractor::<f64>::mini_vgg();
    let target = fx.grams(&Tensor::uniform(&[3, 8, 8], 1.0, &mut rng)?.map(f64::abs))?;
    let image = Tensor::uniform(&[3, 8, 8], 1.0, &mut rng)?.map(f64::abs);
    let inputs = [image];
    let build = |t: &mut Tape<f64>, v: &[Var]| fx.style_loss_to(t, v[0], &target);
    Ok(check(&inputs, build, &all_coords(&inputs), STEP)?.rel_error())
}

/// `(name, worst relative error)` for every operator, coordinate gradients,
/// the style loss input gradient and the full render pipeline.
pub fn run_op_suite(instances: u64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for op in OPS {
        out.push((op.to_string(), worst_op_error(op, instances)?));
    }
    for dim in [2, 3] {
        out.push((
            format!("noise_coordinates_{dim}d"),
            worst_coordinate_error(dim, instances)?,
        ));
    }
    let worst = |f: &dyn Fn(u64) -> Result<f64>| -> Result<f64> {
        (0..instances).try_fold(0.0f64, |w, k| Ok(w.max(f(9000 + k)?)))
    };
    out.push(("style_loss_input_8x8".into(), worst(&style_input_error)?));
    out.push((
        "pipeline_20_params".into(),
        worst(&|s| pipeline_error(s, 20))?,
    ));
    Ok(out)
}
