//! The `ntex` subcommands as library functions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ntex_core::metrics::{diversity, render_seeds, similarity, MetricReport};
use ntex_core::trainer::Trainer;
use ntex_core::{
    ExtractorKind, FeatureExtractor, GridSpec, Image, Mode, TensorArchive, Texture, TextureModel,
};

use crate::config::TrainSpec;
use crate::error::{CliError, CliResult, Context};
use crate::imageio::{self, read_corpus, read_image, render_to_file, write_file};
use crate::mesh::{Mesh, DEFAULT_CELLS_PER_DIAGONAL};

/// `WxH`.
pub fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::usage(format!("size {s:?} must look like WxH"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

/// Comma-separated finite numbers.
pub fn parse_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| match t.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(CliError::usage(format!(
                "{t:?} in {s:?} is not a finite number"
            ))),
        })
        .collect()
}

/// Axis-aligned window `ox,oy[,oz]:ex,ey` in lattice units.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub origin: Vec<f64>,
    pub extent: [f64; 2],
}

impl Window {
    pub fn parse(s: &str) -> CliResult<Self> {
        let bad =
            |why: &str| CliError::usage(format!("window {s:?}: {why} (expected ox,oy[,oz]:ex,ey)"));
        let (o, e) = s.split_once(':').ok_or_else(|| bad("missing `:`"))?;
        let origin = parse_list(o)?;
        let extent = parse_list(e)?;
        if !(2..=3).contains(&origin.len()) {
            return Err(bad("origin needs 2 or 3 coordinates"));
        }
        if extent.len() != 2 || extent.iter().any(|&v| v <= 0.0) {
            return Err(bad("extent needs two positive values"));
        }
        Ok(Self {
            origin,
            extent: [extent[0], extent[1]],
        })
    }

    /// Origin at zero, 4 lattice units wide, square pixels.
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            origin: vec![0.0, 0.0],
            extent: [4.0, 4.0 * height as f64 / width as f64],
        }
    }

    /// Grid for a `dim`-dimensional model; a 2D origin on a 3D model sits at z = 0.
    pub fn grid(&self, dim: usize, width: usize, height: usize) -> CliResult<GridSpec> {
        let mut origin = self.origin.clone();
        match (dim, origin.len()) {
            (3, 2) => origin.push(0.0),
            (d, n) if d == n => {}
            (d, n) => {
                return Err(CliError::usage(format!(
                    "window has {n} coordinates but the model is {d}-dimensional"
                )))
            }
        }
        Ok(GridSpec::window(&origin, self.extent, width, height)?)
    }
}

pub fn load_model(path: &Path) -> CliResult<TextureModel> {
    TextureModel::load(path).context(path.display())
}

/// Texture parameters for `model`; space-mode models need `--exemplar`.
pub fn texture_for(model: &TextureModel, exemplar: Option<&Path>) -> CliResult<Texture> {
    match (model.mode, exemplar) {
        (Mode::Space, None) => Err(CliError::usage(
            "this checkpoint is a texture space; pass --exemplar",
        )),
        (Mode::Space, Some(p)) => Ok(model.texture(Some(&read_image(p)?))?),
        (Mode::Single, _) => Ok(model.texture(None)?),
    }
}

pub fn load_extractor(
    kind: ExtractorKind,
    weights: Option<&Path>,
) -> CliResult<FeatureExtractor<f32>> {
    match kind {
        ExtractorKind::MiniVgg => Ok(FeatureExtractor::mini_vgg()),
        ExtractorKind::Vgg19 => {
            let path = weights.ok_or_else(|| CliError::usage("--extractor vgg needs --weights"))?;
            let archive = TensorArchive::load(path).context(path.display())?;
            Ok(FeatureExtractor::vgg19(&archive.to_params()).context(path.display())?)
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).context(dir.display())
}

/// Trains from a config file. Writes `model.ntex`, periodic
/// `checkpoint_NNNNNN.ntex` files and `loss.csv` into the output directory.
/// A non-finite loss leaves `diverged.txt` next to them.
pub fn train(config: &Path, mut progress: impl FnMut(usize, f64)) -> CliResult<PathBuf> {
    let spec = TrainSpec::load(config)?;
    let corpus = read_corpus(&spec.corpus)?;
    let fx = load_extractor(spec.train.extractor, spec.weights.as_deref())?;
    create_dir(&spec.out_dir)?;
    let out = spec.out_dir.clone();
    let mut trainer = Trainer::new(spec.train.clone(), corpus, fx)?;
    let write_losses = |t: &Trainer| -> CliResult<()> {
        let mut csv = String::from("step,loss\n");
        for (k, l) in t.state().losses.iter().enumerate() {
            let _ = writeln!(csv, "{},{l:e}", k + 1);
        }
        write_file(&out.join("loss.csv"), csv.as_bytes())
    };
    let every = spec.checkpoint_every;
    let result = trainer.run(|t| {
        let step = t.state().step;
        progress(step, *t.state().losses.last().unwrap_or(&f64::NAN));
        if every > 0 && step % every == 0 {
            t.model()
                .save(out.join(format!("checkpoint_{step:06}.ntex")))?;
        }
        Ok(())
    });
    write_losses(&trainer)?;
    if let Err(e) = result {
        let err = CliError::from(e);
        if err.code == crate::error::EXIT_NUMERIC {
            write_file(
                &out.join("diverged.txt"),
                format!("{}\n", err.message).as_bytes(),
            )?;
        }
        return Err(err);
    }
    let path = out.join("model.ntex");
    trainer.model().save(&path)?;
    Ok(path)
}

#[derive(Clone, Debug)]
pub struct RenderArgs {
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub size: (usize, usize),
    pub tile: usize,
    pub exemplar: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn sample(args: &RenderArgs, window: Option<&Window>) -> CliResult<()> {
    let model = load_model(&args.checkpoint)?;
    let tex = texture_for(&model, args.exemplar.as_deref())?;
    let (w, h) = args.size;
    let window = window.cloned().unwrap_or_else(|| Window::default_for(w, h));
    let grid = window.grid(model.sampler.dim, w, h)?;
    render_to_file(
        &model.sampler()?,
        &tex,
        &grid,
        args.seed,
        args.tile,
        &args.out,
    )
}

/// Plane through a 3D model, normal to `axis`, at `offset` along it. The
/// in-plane axes are the next two axes in cyclic order, and `window` gives
/// the in-plane origin and extent.
pub fn slice_grid(
    axis: usize,
    offset: f64,
    window: &Window,
    width: usize,
    height: usize,
) -> CliResult<GridSpec> {
    if axis > 2 || window.origin.len() != 2 {
        return Err(CliError::usage(
            "slice needs an axis in x|y|z and a 2D in-plane window",
        ));
    }
    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut origin = vec![0.0; 3];
    origin[axis] = offset;
    origin[a] = window.origin[0];
    origin[b] = window.origin[1];
    let mut u = vec![0.0; 3];
    let mut v = vec![0.0; 3];
    u[a] = window.extent[0];
    v[b] = window.extent[1];
    Ok(GridSpec::new(origin, u, v, width, height)?)
}

pub fn parse_axis(s: &str) -> CliResult<usize> {
    match s {
        "x" | "X" => Ok(0),
        "y" | "Y" => Ok(1),
        "z" | "Z" => Ok(2),
        _ => Err(CliError::usage(format!("axis {s:?} must be x, y or z"))),
    }
}

pub fn slice(
    args: &RenderArgs,
    axis: usize,
    offset: f64,
    window: Option<&Window>,
) -> CliResult<()> {
    let model = load_model(&args.checkpoint)?;
    if model.sampler.dim != 3 {
        return Err(CliError::usage("slice needs a 3D checkpoint"));
    }
    let tex = texture_for(&model, args.exemplar.as_deref())?;
    let (w, h) = args.size;
    let window = window.cloned().unwrap_or_else(|| Window::default_for(w, h));
    let grid = slice_grid(axis, offset, &window, w, h)?;
    render_to_file(
        &model.sampler()?,
        &tex,
        &grid,
        args.seed,
        args.tile,
        &args.out,
    )
}

#[derive(Clone, Debug)]
pub struct MeshArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    /// Lattice units per model unit; defaults to a 4-cell bounding-box diagonal.
    pub scale: Option<f64>,
    pub exemplar: Option<PathBuf>,
}

pub fn mesh(args: &MeshArgs) -> CliResult<()> {
    let model = load_model(&args.checkpoint)?;
    if model.sampler.dim != 3 {
        return Err(CliError::usage("mesh texturing needs a 3D checkpoint"));
    }
    let tex = texture_for(&model, args.exemplar.as_deref())?;
    let mesh = Mesh::load_obj(&args.input)?;
    let scale = args
        .scale
        .unwrap_or_else(|| mesh.lattice_scale(DEFAULT_CELLS_PER_DIAGONAL));
    let rgb = model
        .sampler()?
        .eval_points(&tex, &mesh.lattice_positions(scale), args.seed)?;
    let colors: Vec<[f32; 3]> = rgb.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let text = match args.out.extension().and_then(|e| e.to_str()) {
        Some("ply") => mesh.to_ply(&colors),
        Some("obj") => mesh.to_colored_obj(&colors),
        _ => return Err(CliError::usage("mesh output must end in .ply or .obj")),
    };
    write_file(&args.out, text.as_bytes())
}

#[derive(Clone, Debug)]
pub struct InterpArgs {
    pub checkpoint: PathBuf,
    pub a: PathBuf,
    pub b: PathBuf,
    pub steps: usize,
    pub seed: u64,
    pub size: (usize, usize),
    pub tile: usize,
    pub out: PathBuf,
}

/// `z_t = (1 - t) z_a + t z_b` for `t = k / (steps - 1)`; frames are laid out
/// left to right in one image.
pub fn interp(args: &InterpArgs, window: Option<&Window>) -> CliResult<()> {
    if args.steps < 2 {
        return Err(CliError::usage("interp needs --steps >= 2"));
    }
    let model = load_model(&args.checkpoint)?;
    if model.mode != Mode::Space {
        return Err(CliError::usage("interp needs a texture-space checkpoint"));
    }
    let za = model.encode(&read_image(&args.a)?)?;
    let zb = model.encode(&read_image(&args.b)?)?;
    let (w, h) = args.size;
    let window = window.cloned().unwrap_or_else(|| Window::default_for(w, h));
    let grid = window.grid(model.sampler.dim, w, h)?;
    let sampler = model.sampler()?;
    let n = args.steps;
    let mut strip = Image::filled(w * n, h, [0.0; 3])?;
    for k in 0..n {
        let t = k as f32 / (n - 1) as f32;
        let z: Vec<f32> = za
            .iter()
            .zip(&zb)
            .map(|(&a, &b)| (1.0 - t) * a + t * b)
            .collect();
        let tex = model.texture_from_z(&z)?;
        let frame = sampler.render(&tex, &grid, args.seed, args.tile)?;
        for y in 0..h {
            for x in 0..w {
                strip.set_pixel(k * w + x, y, frame.pixel(x, y));
            }
        }
    }
    imageio::write_image(&args.out, &strip)
}

#[derive(Clone, Debug)]
pub struct ZoomArgs {
    pub render: RenderArgs,
    pub center: Vec<f64>,
    pub factors: Vec<f64>,
    /// Lattice units covered at factor 1.
    pub extent: f64,
}

/// Windows of extent `extent / f` centered on `center`, one per factor.
pub fn zoom_windows(
    center: &[f64],
    factors: &[f64],
    extent: f64,
    width: usize,
    height: usize,
) -> CliResult<Vec<Window>> {
    factors
        .iter()
        .map(|&f| {
            if !(f > 0.0) {
                return Err(CliError::usage(format!("zoom factor {f} must be positive")));
            }
            let ex = extent / f;
            let ey = ex * height as f64 / width as f64;
            let mut origin = center.to_vec();
            origin[0] -= ex / 2.0;
            origin[1] -= ey / 2.0;
            Ok(Window {
                origin,
                extent: [ex, ey],
            })
        })
        .collect()
}

/// Writes one `zoom_NNN.png` frame per factor into the `out` directory.
pub fn zoom(args: &ZoomArgs) -> CliResult<Vec<PathBuf>> {
    let r = &args.render;
    let model = load_model(&r.checkpoint)?;
    let tex = texture_for(&model, r.exemplar.as_deref())?;
    let sampler = model.sampler()?;
    let (w, h) = r.size;
    create_dir(&r.out)?;
    let mut paths = Vec::new();
    for (k, win) in zoom_windows(&args.center, &args.factors, args.extent, w, h)?
        .iter()
        .enumerate()
    {
        let path = r.out.join(format!("zoom_{k:03}.png"));
        render_to_file(
            &sampler,
            &tex,
            &win.grid(model.sampler.dim, w, h)?,
            r.seed,
            r.tile,
            &path,
        )?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Clone, Debug)]
pub struct MetricsArgs {
    pub checkpoints: Vec<PathBuf>,
    pub corpora: Vec<PathBuf>,
    pub seeds: usize,
    pub extractor: ExtractorKind,
    pub weights: Option<PathBuf>,
    pub out: PathBuf,
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .or_else(|| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Similarity, diversity and success for every (checkpoint, corpus) pair.
/// Renders match the exemplar size over 4 lattice units; seeds are `0..n`.
/// Writes the CSV to `out` and returns the text table.
pub fn metrics(args: &MetricsArgs) -> CliResult<String> {
    if args.seeds < 2 {
        return Err(CliError::usage("metrics needs --seeds >= 2"));
    }
    let fx = load_extractor(args.extractor, args.weights.as_deref())?;
    let seeds: Vec<u64> = (0..args.seeds as u64).collect();
    let mut rows = Vec::new();
    for ckpt in &args.checkpoints {
        let model = load_model(ckpt)?;
        let sampler = model.sampler()?;
        for corpus in &args.corpora {
            let exemplars = imageio::list_images(corpus)?;
            let (mut sim, mut div) = (0.0, 0.0);
            for path in &exemplars {
                let img = read_image(path)?;
                let tex = match model.mode {
                    Mode::Space => model.texture(Some(&img))?,
                    Mode::Single => model.texture(None)?,
                };
                let window = Window::default_for(img.width(), img.height());
                let grid = window.grid(model.sampler.dim, img.width(), img.height())?;
                let renders = render_seeds(&sampler, &tex, &grid, &seeds)?;
                sim += similarity(&fx, &img, &renders)?;
                div += diversity(&fx, &renders)?;
            }
            let n = exemplars.len() as f64;
            rows.push((stem(ckpt), stem(corpus), sim / n, div / n));
        }
    }
    let report = MetricReport::from_measurements(&rows)?;
    write_file(&args.out, report.to_csv().as_bytes())?;
    Ok(report.to_table())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_and_window_parsing() {
        assert_eq!(parse_size("640x480").unwrap(), (640, 480));
        assert!(parse_size("0x4").is_err());
        assert!(parse_size("64").is_err());
        let w = Window::parse("1.5,-2:4,2").unwrap();
        assert_eq!(w.origin, vec![1.5, -2.0]);
        assert_eq!(w.extent, [4.0, 2.0]);
        assert_eq!(Window::parse("0,0,3:1,1").unwrap().origin.len(), 3);
        for bad in [
            "0,0",
            "0:1,1",
            "0,0:1",
            "0,0:-1,1",
            "0,0:nan,1",
            "0,0,0,0:1,1",
        ] {
            assert!(Window::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn window_dimension_handling() {
        let w = Window::parse("1,2:4,4").unwrap();
        assert_eq!(w.grid(3, 4, 4).unwrap().origin(), &[1.0, 2.0, 0.0]);
        assert!(Window::parse("1,2,3:4,4").unwrap().grid(2, 4, 4).is_err());
    }

    #[test]
    fn slice_axes_are_cyclic() {
        let w = Window::parse("1,2:4,8").unwrap();
        let g = slice_grid(0, 5.0, &w, 2, 2).unwrap();
        assert_eq!(g.origin(), &[5.0, 1.0, 2.0]);
        assert_eq!(g.axes(), (&[0.0, 4.0, 0.0][..], &[0.0, 0.0, 8.0][..]));
        let g = slice_grid(2, 5.0, &w, 2, 2).unwrap();
        assert_eq!(g.origin(), &[1.0, 2.0, 5.0]);
        assert!(parse_axis("w").is_err());
    }

    #[test]
    fn zoom_windows_share_a_center() {
        let ws = zoom_windows(&[3.0, -1.0], &[1.0, 2.0, 8.0], 4.0, 16, 16).unwrap();
        for w in &ws {
            assert_eq!(w.origin[0] + w.extent[0] / 2.0, 3.0);
            assert_eq!(w.origin[1] + w.extent[1] / 2.0, -1.0);
        }
        assert_eq!(ws[2].extent, [0.5, 0.5]);
        assert!(zoom_windows(&[0.0, 0.0], &[0.0], 4.0, 8, 8).is_err());
    }
}
