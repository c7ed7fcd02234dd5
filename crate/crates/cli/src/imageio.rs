//! Image files: PNG and binary PPM, 8-bit RGB. Writes go to a temporary
//! file in the destination directory and are renamed into place.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ntex_core::sampler::TileRect;
use ntex_core::{GridSpec, Image, Sampler, Texture};
use tempfile::NamedTempFile;

use crate::error::{CliError, CliResult, Context};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Png,
    Ppm,
}

impl Format {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => Ok(Format::Png),
            Some("ppm") => Ok(Format::Ppm),
            _ => Err(CliError::usage(format!(
                "{}: unsupported image extension (use .png or .ppm)",
                path.display()
            ))),
        }
    }
}

/// Straight clamp to `[0, 1]` and round to 8 bits.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_image(path: &Path) -> CliResult<Image> {
    let rgb = image::open(path).context(path.display())?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data: Vec<f32> = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image::from_interleaved(w as usize, h as usize, &data)?)
}

/// PNG and PPM files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .context(dir.display())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && Format::from_path(p).is_ok())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::usage(format!(
            "{}: no .png or .ppm images",
            dir.display()
        )));
    }
    Ok(paths)
}

pub fn read_corpus(dir: &Path) -> CliResult<Vec<Image>> {
    list_images(dir)?.iter().map(|p| read_image(p)).collect()
}

fn temp_beside(path: &Path) -> CliResult<NamedTempFile> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    NamedTempFile::new_in(dir).context(dir.display())
}

/// Writes `bytes` to `path` atomically.
pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = temp_beside(path)?;
    tmp.write_all(bytes).context(path.display())?;
    tmp.persist(path)
        .map_err(|e| CliError::from(e.error).context(path.display()))?;
    Ok(())
}

enum Sink {
    /// The stream writer emits whole chunks, so it writes to the file
    /// directly; `file` keeps a handle for the final sync.
    Png {
        stream: png::StreamWriter<'static, File>,
        file: File,
    },
    Ppm(BufWriter<File>),
}

/// Row-streaming 8-bit RGB writer.
pub struct RowWriter {
    sink: Sink,
    tmp: tempfile::TempPath,
    path: PathBuf,
    width: usize,
    rows_left: usize,
}

impl RowWriter {
    pub fn create(path: &Path, width: usize, height: usize) -> CliResult<Self> {
        if width == 0 || height == 0 {
            return Err(CliError::usage("image size must be positive"));
        }
        let format = Format::from_path(path)?;
        let (file, tmp) = temp_beside(path)?.into_parts();
        let sink = match format {
            Format::Ppm => {
                let mut out = BufWriter::new(file);
                write!(out, "P6\n{width} {height}\n255\n")?;
                Sink::Ppm(out)
            }
            Format::Png => {
                let handle = file.try_clone()?;
                let mut enc = png::Encoder::new(file, width as u32, height as u32);
                enc.set_color(png::ColorType::Rgb);
                enc.set_depth(png::BitDepth::Eight);
                Sink::Png {
                    stream: enc.write_header()?.into_stream_writer()?,
                    file: handle,
                }
            }
        };
        Ok(Self {
            sink,
            tmp,
            path: path.to_path_buf(),
            width,
            rows_left: height,
        })
    }

    /// Appends whole rows of interleaved RGB bytes.
    pub fn write_rows(&mut self, rgb: &[u8]) -> CliResult<()> {
        let stride = self.width * 3;
        if !rgb.len().is_multiple_of(stride) || rgb.len() / stride > self.rows_left {
            return Err(CliError::usage(
                "row data does not match the image geometry",
            ));
        }
        self.rows_left -= rgb.len() / stride;
        match &mut self.sink {
            Sink::Png { stream, .. } => stream.write_all(rgb)?,
            Sink::Ppm(w) => w.write_all(rgb)?,
        }
        Ok(())
    }

    /// Flushes and moves the file into place.
    pub fn finish(self) -> CliResult<()> {
        if self.rows_left != 0 {
            return Err(CliError::usage(format!(
                "{} rows were never written",
                self.rows_left
            )));
        }
        let file = match self.sink {
            Sink::Png { stream, file } => {
                stream.finish()?;
                file
            }
            Sink::Ppm(w) => w.into_inner().map_err(|e| CliError::from(e.into_error()))?,
        };
        file.sync_all()?;
        drop(file);
        self.tmp
            .persist(&self.path)
            .map_err(|e| CliError::from(e.error).context(self.path.display()))?;
        Ok(())
    }
}

pub fn write_image(path: &Path, img: &Image) -> CliResult<()> {
    let mut w = RowWriter::create(path, img.width(), img.height())?;
    let mut row = Vec::with_capacity(img.width() * 3);
    for y in 0..img.height() {
        row.clear();
        for x in 0..img.width() {
            row.extend(img.pixel(x, y).map(to_u8));
        }
        w.write_rows(&row)?;
    }
    w.finish()
}

/// Renders `grid` straight to `path`, one band of tile rows at a time, so
/// memory stays proportional to `width * tile`.
pub fn render_to_file(
    sampler: &Sampler,
    tex: &Texture,
    grid: &GridSpec,
    seed: u64,
    tile: usize,
    path: &Path,
) -> CliResult<()> {
    let (w, h) = (grid.width(), grid.height());
    let mut out = RowWriter::create(path, w, h)?;
    let mut band: Vec<u8> = Vec::new();
    let mut write_err: Option<CliError> = None;
    let rendered = sampler.render_tiles(tex, grid, seed, tile, |r: TileRect, rgb: &[f32]| {
        if r.x == 0 {
            band.clear();
            band.resize(w * r.height * 3, 0);
        }
        for row in 0..r.height {
            let src = &rgb[row * r.width * 3..(row + 1) * r.width * 3];
            let dst = &mut band[(row * w + r.x) * 3..(row * w + r.x + r.width) * 3];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = to_u8(s);
            }
        }
        if r.x + r.width == w {
            if let Err(e) = out.write_rows(&band) {
                write_err = Some(e);
                return Err(ntex_core::Error::Contract("image write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    rendered?;
    out.finish()
}
