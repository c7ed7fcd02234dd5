//! Similarity, diversity and success, plus per-point timing.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::perceptual::{gram_distance, FeatureExtractor};
use crate::sampler::{GridSpec, Sampler, Texture, DEFAULT_TILE};
use crate::tensor::Tensor;

/// Display scale for similarity and diversity.
pub const DISPLAY_SCALE: f64 = 1e3;

/// Renders `grid` once per seed (unclamped).
pub fn render_seeds(
    sampler: &Sampler,
    tex: &Texture,
    grid: &GridSpec,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    seeds
        .iter()
        .map(|&s| sampler.render(tex, grid, s, DEFAULT_TILE))
        .collect()
}

/// Mean style distance between the exemplar patch and each render.
pub fn similarity(fx: &FeatureExtractor<f32>, exemplar: &Image, renders: &[Image]) -> Result<f64> {
    if renders.is_empty() {
        return Err(Error::Contract(
            "similarity needs at least one render".into(),
        ));
    }
    let target = fx.grams(&exemplar.to_tensor())?;
    let mut total = 0.0;
    for r in renders {
        total += gram_distance(&target, &fx.grams(&r.to_tensor())?)?.value;
    }
    Ok(total / renders.len() as f64)
}

/// Mean style distance over all unordered pairs of renders.
pub fn diversity(fx: &FeatureExtractor<f32>, renders: &[Image]) -> Result<f64> {
    if renders.len() < 2 {
        return Err(Error::Contract(format!(
            "diversity needs at least two renders, got {}",
            renders.len()
        )));
    }
    let grams: Vec<Vec<Tensor<f32>>> = renders
        .iter()
        .map(|r| fx.grams(&r.to_tensor()))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..grams.len() {
        for j in i + 1..grams.len() {
            total += gram_distance(&grams[i], &grams[j])?.value;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// `div * (max_err - err)`.
pub fn success(err: f64, div: f64, max_err: f64) -> Result<f64> {
    if max_err < err || err < 0.0 || div < 0.0 {
        return Err(Error::Contract(format!(
            "success needs max_err >= err >= 0 and div >= 0 (err {err}, div {div}, max_err {max_err})"
        )));
    }
    Ok(div * (max_err - err))
}

/// Median wall-clock nanoseconds per point over `reps` timed passes of
/// `n_points` positions on a square grid at `offset`, after one warm-up pass.
pub fn time_per_point(
    sampler: &Sampler,
    tex: &Texture,
    offset: f64,
    n_points: usize,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    let dim = sampler.config().dim;
    let side = (n_points as f64).sqrt().ceil().max(1.0) as usize;
    let mut origin = vec![offset; dim];
    if dim == 3 {
        origin[2] = offset + 0.5;
    }
    let grid = GridSpec::window(&origin, [4.0, 4.0], side, side)?;
    let positions = grid.positions(0, 0, side, side);
    let positions = &positions[..n_points.max(1) * dim];
    let n = positions.len() / dim;
    sampler.eval_points(tex, positions, seed)?;
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let out = sampler.eval_points(tex, positions, seed)?;
        let elapsed = start.elapsed().as_nanos() as f64;
        std::hint::black_box(out);
        times.push(elapsed / n as f64);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub corpus: String,
    pub similarity: f64,
    pub diversity: f64,
    pub success: f64,
}

/// Table of methods against corpora. Success uses the largest similarity
/// error found in this report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// `(method, corpus, similarity, diversity)` measurements.
    pub fn from_measurements(measurements: &[(String, String, f64, f64)]) -> Result<Self> {
        let max_err = measurements.iter().map(|m| m.2).fold(0.0, f64::max);
        let rows = measurements
            .iter()
            .map(|(method, corpus, sim, div)| {
                Ok(MetricRow {
                    method: method.clone(),
                    corpus: corpus.clone(),
                    similarity: *sim,
                    diversity: *div,
                    success: success(*sim, *div, max_err)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn max_err(&self) -> f64 {
        self.rows.iter().map(|r| r.similarity).fold(0.0, f64::max)
    }

    /// Raw and display-scaled values.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "method,corpus,similarity,diversity,success,similarity_x1e3,diversity_x1e3\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:.4},{:.4}",
                r.method,
                r.corpus,
                r.similarity,
                r.diversity,
                r.success,
                r.similarity * DISPLAY_SCALE,
                r.diversity * DISPLAY_SCALE
            );
        }
        s
    }

    /// Aligned text table with Sim/Div/Suc columns per corpus.
    pub fn to_table(&self) -> String {
        let mut corpora: Vec<&str> = Vec::new();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !corpora.contains(&r.corpus.as_str()) {
                corpora.push(&r.corpus);
            }
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let mw = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<mw$}", "method");
        for c in &corpora {
            let _ = write!(s, " | {:^32}", c);
        }
        s.push('\n');
        s.push_str(&" ".repeat(mw));
        for _ in &corpora {
            let _ = write!(s, " | {:>10} {:>10} {:>10}", "Sim", "Div", "Suc");
        }
        s.push('\n');
        for m in &methods {
            let _ = write!(s, "{:<mw$}", m);
            for c in &corpora {
                match self.rows.iter().find(|r| r.method == *m && r.corpus == *c) {
                    Some(r) => {
                        let _ = write!(
                            s,
                            " | {:>10.3} {:>10.3} {:>10.3}",
                            r.similarity * DISPLAY_SCALE,
                            r.diversity * DISPLAY_SCALE,
                            r.success * DISPLAY_SCALE * DISPLAY_SCALE
                        );
                    }
                    None => {
                        let _ = write!(s, " | {:>10} {:>10} {:>10}", "-", "-", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}
