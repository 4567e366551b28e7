use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hrank::data::{Cifar10, DatasetSource, Split, Synthetic, SyntheticConfig};
use hrank::graph::{build_preset, format, Network, PresetOptions};
use hrank::planner::PruneRateConfig;

use crate::{DataArgs, ModelArgs, PresetShape, UsageError};

pub fn load_model(model: &ModelArgs, shape: &PresetShape, seed: u64) -> Result<Network> {
    match (&model.model, &model.preset) {
        (Some(path), _) => Ok(format::load(path)?),
        (None, Some(name)) => Ok(build_preset(
            name,
            &PresetOptions::new(shape.num_classes).width(shape.width).seed(seed),
        )?),
        (None, None) => Err(UsageError("one of --model or --preset is required".into()).into()),
    }
}

pub fn open_data(args: &DataArgs) -> Result<Option<Box<dyn DatasetSource>>> {
    if let Some(dir) = &args.dataset_dir {
        let split: Split = args.split.parse()?;
        return Ok(Some(Box::new(Cifar10::open(dir, split)?)));
    }
    if let Some(spec) = &args.synthetic {
        return Ok(Some(Box::new(Synthetic::new(parse_synthetic(spec)?)?)));
    }
    Ok(None)
}

pub fn require_data(args: &DataArgs) -> Result<Box<dyn DatasetSource>> {
    open_data(args)?.ok_or_else(|| UsageError("one of --dataset-dir or --synthetic is required".into()).into())
}

/// Files a data source reads, for input fingerprints.
pub fn data_files(args: &DataArgs) -> Vec<PathBuf> {
    match (&args.dataset_dir, args.split.parse::<Split>()) {
        (Some(dir), Ok(split)) => split.files().iter().map(|f| dir.join(f)).collect(),
        _ => Vec::new(),
    }
}

/// `key=value` pairs separated by commas; unknown keys are rejected.
pub fn parse_synthetic(spec: &str) -> Result<SyntheticConfig> {
    let mut cfg = SyntheticConfig::new(10, 1000);
    let bad = |m: String| UsageError(format!("--synthetic: {m}"));
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, found {part:?}")))?;
        let num = |v: &str| -> Result<f64> { v.parse().map_err(|_| bad(format!("{key}: {v:?} is not a number")).into()) };
        let int = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| bad(format!("{key}: {v:?} is not a nonnegative integer")).into())
        };
        match key {
            "classes" => cfg.num_classes = int(value)?,
            "n" => cfg.n = int(value)?,
            "seed" => cfg.seed = int(value)? as u64,
            "margin" => cfg.margin = num(value)?,
            "noise" => cfg.noise = num(value)?,
            "blobs" => cfg.blobs = int(value)?,
            "jitter" => cfg.jitter = int(value)?,
            "dims" => {
                let d: Vec<usize> = value.split('x').map(int).collect::<Result<_>>()?;
                cfg.dims = d
                    .try_into()
                    .map_err(|_| bad(format!("dims must look like 3x32x32, found {value:?}")))?;
            }
            other => return Err(bad(format!("unknown key {other:?}")).into()),
        }
    }
    Ok(cfg)
}

/// A bare number is a uniform rate; anything else is read as a rate file.
pub fn load_rates(arg: &str) -> Result<PruneRateConfig> {
    if let Ok(rate) = arg.parse::<f64>() {
        if !(0.0..1.0).contains(&rate) {
            return Err(UsageError(format!("--rates {rate} is outside [0, 1)")).into());
        }
        return Ok(PruneRateConfig::uniform(rate));
    }
    Ok(PruneRateConfig::from_json(&read_text(Path::new(arg))?)?)
}

pub fn rates_is_file(arg: &str) -> bool {
    arg.parse::<f64>().is_err()
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

/// Runs `f` on a dedicated pool when a worker count is given.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(UsageError("--workers must be at least 1".into()).into()),
        Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f)),
    }
}
