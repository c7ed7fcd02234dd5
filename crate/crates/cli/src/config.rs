//! Flat `key = value` training configuration files.
//!
//! ```text
//! # desk-scale run
//! variant = ours
//! patch_size = 64
//! extractor = minivgg
//! corpus = exemplars/
//! out_dir = runs/desk
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ntex_core::{EncoderConfig, ExtractorKind, Mode, TrainConfig, Variant};

use crate::error::{CliError, CliResult, Context};

const KEYS: &[&str] = &[
    "mode",
    "variant",
    "target_dim",
    "octaves",
    "patch_size",
    "batch",
    "steps",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "extractor",
    "weights",
    "extent",
    "slice_range",
    "corpus",
    "out_dir",
    "checkpoint_every",
    "encoder_input_size",
    "encoder_channels",
];

#[derive(Clone, Debug)]
pub struct TrainSpec {
    pub train: TrainConfig,
    /// Directory of PNG/PPM exemplars, read in file-name order.
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// VGG-19 feature archive; required when `extractor = vgg`.
    pub weights: Option<PathBuf>,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::usage(format!("config key `{key}`: cannot parse {value:?}")))
}

impl TrainSpec {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).context(path.display())?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).context(path.display())
    }

    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::usage(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(CliError::usage(format!(
                    "line {}: unknown key `{k}`",
                    lineno + 1
                )));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CliError::usage(format!(
                    "line {}: duplicate key `{k}`",
                    lineno + 1
                )));
            }
        }
        let get = |k: &str| entries.get(k).map(String::as_str);
        let path = |k: &str| get(k).map(|v| base.join(v));

        let mut t = TrainConfig::default();
        if let Some(v) = get("extractor") {
            if ExtractorKind::from_str(v)? == ExtractorKind::MiniVgg {
                t = TrainConfig::desk();
            }
        }
        if let Some(v) = get("mode") {
            t.mode = Mode::from_str(v)?;
        }
        if let Some(v) = get("variant") {
            t.variant = Variant::from_str(v)?;
        }
        macro_rules! set {
            ($field:ident, $key:literal) => {
                if let Some(v) = get($key) {
                    t.$field = parse($key, v)?;
                }
            };
        }
        set!(target_dim, "target_dim");
        set!(octaves, "octaves");
        set!(patch_size, "patch_size");
        set!(batch, "batch");
        set!(steps, "steps");
        set!(lr, "lr");
        set!(beta1, "beta1");
        set!(beta2, "beta2");
        set!(eps, "eps");
        set!(global_seed, "seed");
        set!(extent, "extent");
        set!(slice_range, "slice_range");
        if let Some(v) = get("extractor") {
            t.extractor = ExtractorKind::from_str(v)?;
        }
        t.encoder = EncoderConfig {
            input_size: t.patch_size,
            ..t.encoder
        };
        if let Some(v) = get("encoder_input_size") {
            t.encoder.input_size = parse("encoder_input_size", v)?;
        }
        if let Some(v) = get("encoder_channels") {
            t.encoder.channels = v
                .split(',')
                .map(|c| parse("encoder_channels", c.trim()))
                .collect::<CliResult<_>>()?;
        }
        t.validate()?;

        let corpus = path("corpus").ok_or_else(|| CliError::usage("config is missing `corpus`"))?;
        let out_dir =
            path("out_dir").ok_or_else(|| CliError::usage("config is missing `out_dir`"))?;
        let weights = path("weights");
        if t.extractor == ExtractorKind::Vgg19 && weights.is_none() {
            return Err(CliError::usage(
                "extractor = vgg needs `weights` (a VGG-19 feature archive)",
            ));
        }
        let checkpoint_every = match get("checkpoint_every") {
            Some(v) => parse("checkpoint_every", v)?,
            None => 0,
        };
        Ok(Self {
            train: t,
            corpus,
            out_dir,
            weights,
            checkpoint_every,
        })
    }
}
