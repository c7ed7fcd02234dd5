//! Property tests for the noise field, transforms, archive and loss.

use ntex_core::noise::{lattice_value, sample, sample_stack};
use ntex_core::perceptual::FeatureExtractor;
use ntex_core::transform::{materialize, params_per_octave};
use ntex_core::{
    GridSpec, Mode, NoiseSpec, SamplerConfig, Tape, Tensor, TensorArchive, TextureModel,
    TransformSet, Variant,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const I2: [f64; 4] = [1.0, 0.0, 0.0, 1.0];

fn det(m: &[f64], dim: usize) -> f64 {
    if dim == 2 {
        m[0] * m[3] - m[1] * m[2]
    } else {
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Smallest lag (in x units, scanned on a fine grid) at which the
/// autocorrelation of one octave along the first axis drops below 1/2.
fn half_correlation_lag(octave: u32) -> f64 {
    let spec = NoiseSpec::new(77, octave, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let points: Vec<[f64; 2]> = (0..4000)
        .map(|_| [rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0)])
        .collect();
    let base: Vec<f64> = points
        .iter()
        .map(|p| sample(p, &I2, &spec).unwrap())
        .collect();
    let mut lag = 0.0;
    let step = 1.0 / 1024.0;
    loop {
        lag += step;
        let shifted: Vec<f64> = points
            .iter()
            .map(|p| sample(&[p[0] + lag, p[1]], &I2, &spec).unwrap())
            .collect();
        if pearson(&base, &shifted) < 0.5 {
            return lag;
        }
    }
}

#[test]
fn octave_correlation_length_halves() {
    let lags: Vec<f64> = (1..=5).map(half_correlation_lag).collect();
    for w in lags.windows(2) {
        let ratio = w[0] / w[1];
        assert!((2.0 / 1.5..=2.0 * 1.5).contains(&ratio), "lags {lags:?}");
    }
}

#[test]
fn distinct_octave_fields_are_decorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let points: Vec<[f64; 2]> = (0..10_000)
        .map(|_| [rng.gen_range(-1e3..1e3), rng.gen_range(-1e3..1e3)])
        .collect();
    let t = TransformSet::identity(4, 2).unwrap();
    let stacks: Vec<Vec<f64>> = points
        .iter()
        .map(|p| sample_stack(p, &t, 3).unwrap())
        .collect();
    // Fields i and j read at the same lattice scale, so only the seed differs.
    for i in 0..4 {
        for j in i + 1..4 {
            let scale_i = 0.5f64.powi(i as i32);
            let scale_j = 0.5f64.powi(j as i32);
            let a: Vec<f64> = points
                .iter()
                .map(|p| {
                    sample(
                        &[p[0] * scale_i, p[1] * scale_i],
                        &I2,
                        &NoiseSpec::new(3, i as u32 + 1, 2).unwrap(),
                    )
                    .unwrap()
                })
                .collect();
            let b: Vec<f64> = points
                .iter()
                .map(|p| {
                    sample(
                        &[p[0] * scale_j, p[1] * scale_j],
                        &I2,
                        &NoiseSpec::new(3, j as u32 + 1, 2).unwrap(),
                    )
                    .unwrap()
                })
                .collect();
            assert!(pearson(&a, &b).abs() < 0.05, "octaves {i} {j}");
            let si: Vec<f64> = stacks.iter().map(|s| s[i]).collect();
            let sj: Vec<f64> = stacks.iter().map(|s| s[j]).collect();
            assert!(pearson(&si, &sj).abs() < 0.05, "stack octaves {i} {j}");
        }
    }
}

#[test]
fn two_seeds_differ_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let t = TransformSet::identity(8, 3).unwrap();
    let differ = (0..100)
        .filter(|_| {
            let p = [
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
            ];
            sample_stack(&p, &t, 1).unwrap() != sample_stack(&p, &t, 2).unwrap()
        })
        .count();
    assert!(differ >= 99);
}

#[test]
fn one_pixel_shifts_are_closer_than_any_other_exemplar() {
    let corpus = ntex_core::synthetic::desk_corpus(8, 64, 3).unwrap();
    let fx = FeatureExtractor::<f32>::mini_vgg();
    for (k, a) in corpus.iter().enumerate() {
        let far = corpus
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, b)| fx.style_distance(a, b).unwrap().value)
            .fold(f64::INFINITY, f64::min);
        for (sx, sy) in [(1, 0), (0, 1), (1, 1)] {
            let mut shifted = a.clone();
            for y in 0..64 {
                for x in 0..64 {
                    shifted.set_pixel(x, y, a.pixel((x + sx) % 64, (y + sy) % 64));
                }
            }
            let near = fx.style_distance(a, &shifted).unwrap().value;
            assert!(
                near < 0.1 * far,
                "exemplar {k} shift ({sx},{sy}): near {near} far {far}"
            );
        }
    }
}

fn small_model(variant: Variant, seed: u64) -> TextureModel {
    TextureModel::init(SamplerConfig::new(variant, 2), Mode::Single, None, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lattice_values_are_deterministic_and_bounded(
        seed in any::<u64>(), octave in 1u32..=8, x in -100_000i64..100_000, y in -100_000i64..100_000, z in -100_000i64..100_000,
    ) {
        for coords in [vec![x, y], vec![x, y, z]] {
            let spec = NoiseSpec::new(seed, octave, coords.len()).unwrap();
            let v = lattice_value(&coords, &spec).unwrap();
            prop_assert!((-1.0..1.0).contains(&v));
            prop_assert_eq!(v.to_bits(), lattice_value(&coords, &spec).unwrap().to_bits());
        }
    }

    #[test]
    fn noise_is_continuous_across_cell_faces(seed in any::<u64>(), cx in -1000i64..1000, y in -1000.0f64..1000.0) {
        let spec = NoiseSpec::new(seed, 1, 2).unwrap();
        let eps = 1e-9;
        let lo = sample(&[cx as f64 - eps, y], &I2, &spec).unwrap();
        let hi = sample(&[cx as f64 + eps, y], &I2, &spec).unwrap();
        prop_assert!((lo - hi).abs() < 1e-7);
    }

    #[test]
    fn materialized_transforms_are_invertible(raw in prop::collection::vec(-4.0f64..4.0, 6), three in any::<bool>()) {
        let dim = if three { 3 } else { 2 };
        let p = params_per_octave(dim);
        let raw = &raw[..p];
        let m = materialize(raw, dim);
        let want: f64 = raw[p - dim..].iter().sum::<f64>().exp();
        let d = det(&m, dim);
        prop_assert!(d != 0.0);
        prop_assert!((d - want).abs() <= 1e-9 * want);
    }

    #[test]
    fn translated_windows_agree_on_overlap(
        seed in any::<u64>(), ox in -4096i64..4096, oy in -4096i64..4096, dx in 1usize..24, dy in 0usize..24,
    ) {
        let model = small_model(Variant::Ours, seed);
        let sampler = model.sampler().unwrap();
        let tex = model.texture(None).unwrap();
        // 32 pixels over 2 lattice units: every position is an exact dyadic rational.
        let step = 2.0 / 32.0;
        let a0 = [ox as f64 * 0.25, oy as f64 * 0.25];
        let b0 = [a0[0] + dx as f64 * step, a0[1] + dy as f64 * step];
        let a = sampler.render(&tex, &GridSpec::window(&a0, [2.0, 2.0], 32, 32).unwrap(), seed, 16).unwrap();
        let b = sampler.render(&tex, &GridSpec::window(&b0, [2.0, 2.0], 32, 32).unwrap(), seed, 16).unwrap();
        for y in 0..32 - dy {
            for x in 0..32 - dx {
                let pa = a.pixel(x + dx, y + dy);
                let pb = b.pixel(x, y);
                prop_assert_eq!(pa.map(f32::to_bits), pb.map(f32::to_bits));
            }
        }
    }

    #[test]
    fn mlp_renders_ignore_the_noise_seed(init in any::<u64>(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let model = small_model(Variant::Mlp, init);
        let sampler = model.sampler().unwrap();
        let tex = model.texture(None).unwrap();
        let grid = GridSpec::window(&[-1.5, 7.25], [4.0, 4.0], 24, 24).unwrap();
        let a = sampler.render(&tex, &grid, s1, 128).unwrap();
        let b = sampler.render(&tex, &grid, s2, 128).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn archive_round_trip_is_byte_identical(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..6), fill in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(fill);
        let mut archive = TensorArchive::new();
        for (k, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7F7F_FFFF)).collect();
            archive.push(format!("t{k}.w"), Tensor::new(shape, data).unwrap()).unwrap();
        }
        let bytes = archive.to_bytes();
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        for ((na, ta), (nb, tb)) in archive.entries().iter().zip(back.entries()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            prop_assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn gram_is_symmetric_and_positive_semidefinite(c in 1usize..7, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(&[c, h, w], 2.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.gram(v).unwrap();
        let g = tape.value(g).data().to_vec();
        for i in 0..c {
            for j in 0..c {
                prop_assert!((g[i * c + j] - g[j * c + i]).abs() <= 1e-15 * g[i * c + i].abs().max(1.0));
            }
        }
        let min = symmetric_eigenvalues(g, c).into_iter().fold(f64::INFINITY, f64::min);
        prop_assert!(min >= -1e-8, "min eigenvalue {min}");
    }

    #[test]
    fn style_loss_is_nonnegative_symmetric_and_zero_on_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fx = FeatureExtractor::<f64>::mini_vgg();
        let a = Tensor::<f64>::uniform(&[3, 8, 8], 1.0, &mut rng).unwrap().map(f64::abs);
        let b = Tensor::<f64>::uniform(&[3, 8, 8], 1.0, &mut rng).unwrap().map(f64::abs);
        let loss = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (vx, vy) = (tape.constant(x.clone()), tape.constant(y.clone()));
            let l = fx.style_loss(&mut tape, vx, vy).unwrap();
            tape.value(l).data()[0]
        };
        let ab = loss(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, loss(&b, &a));
        prop_assert_eq!(loss(&a, &a), 0.0);
    }
}
