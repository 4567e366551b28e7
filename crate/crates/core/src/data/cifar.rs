//! CIFAR-10 binary batches: records of one label byte followed by 3072 pixel
//! bytes (1024 red, then green, then blue, each row-major 32×32).

use std::path::{Path, PathBuf};

use super::DatasetSource;
use crate::error::{Error, Result};

pub const RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2023, 0.1994, 0.2010];
const PLANE: usize = 32 * 32;
const RECORDS_PER_FILE: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            Split::Test => &["test_batch.bin"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?} (expected train or test)"))),
        }
    }
}

/// Pixel byte to normalized value.
pub fn normalize(byte: u8, channel: usize) -> f64 {
    (byte as f64 / 255.0 - CIFAR10_MEAN[channel]) / CIFAR10_STD[channel]
}

/// Inverse of [`normalize`], on the `[0, 1]` scale.
pub fn denormalize(value: f64, channel: usize) -> f64 {
    value * CIFAR10_STD[channel] + CIFAR10_MEAN[channel]
}

pub struct Cifar10 {
    name: String,
    raw: Vec<u8>,
}

impl Cifar10 {
    /// Reads the batch files of one split from `dir`.
    pub fn open(dir: impl AsRef<Path>, split: Split) -> Result<Self> {
        let dir = dir.as_ref();
        let paths: Vec<PathBuf> = split.files().iter().map(|f| dir.join(f)).collect();
        let mut ds = Self::from_files(&paths)?;
        ds.name = format!("cifar10:{}", split.as_str());
        Ok(ds)
    }

    pub fn from_files(paths: &[PathBuf]) -> Result<Self> {
        let mut raw = Vec::new();
        for path in paths {
            raw.extend(read_batch(path)?);
        }
        Ok(Cifar10 {
            name: "cifar10".into(),
            raw,
        })
    }

    pub fn from_bytes(name: &str, bytes: Vec<u8>) -> Result<Self> {
        check_len(name, bytes.len())?;
        Ok(Cifar10 {
            name: name.into(),
            raw: bytes,
        })
    }

    pub fn record(&self, index: usize) -> &[u8] {
        &self.raw[index * RECORD_LEN..(index + 1) * RECORD_LEN]
    }

    /// The records in the on-disk layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.raw.clone()
    }
}

fn check_len(name: &str, len: usize) -> Result<()> {
    if len == 0 || len % RECORD_LEN != 0 {
        return Err(Error::format(
            name,
            format!(
                "expected a positive multiple of {RECORD_LEN} bytes ({} for a full batch), found {len}",
                RECORDS_PER_FILE * RECORD_LEN
            ),
        ));
    }
    Ok(())
}

fn read_batch(path: &Path) -> Result<Vec<u8>> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| {
        Error::format(
            &name,
            format!(
                "cannot read ({e}); expected {} bytes of {RECORD_LEN}-byte records",
                RECORDS_PER_FILE * RECORD_LEN
            ),
        )
    })?;
    check_len(&name, bytes.len())?;
    if let Some(pos) = bytes.chunks_exact(RECORD_LEN).position(|r| r[0] > 9) {
        return Err(Error::format(
            &name,
            format!("record {pos} has label {}, expected 0..=9", bytes[pos * RECORD_LEN]),
        ));
    }
    Ok(bytes)
}

impl DatasetSource for Cifar10 {
    fn describe(&self) -> String {
        self.name.clone()
    }

    fn len(&self) -> usize {
        self.raw.len() / RECORD_LEN
    }

    fn image_dims(&self) -> [usize; 3] {
        [3, 32, 32]
    }

    fn num_classes(&self) -> usize {
        10
    }

    fn label(&self, index: usize) -> usize {
        self.record(index)[0] as usize
    }

    fn write_image(&self, index: usize, out: &mut [f64]) {
        let pixels = &self.record(index)[1..];
        for (c, (dst, src)) in out.chunks_exact_mut(PLANE).zip(pixels.chunks_exact(PLANE)).enumerate() {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = normalize(s, c);
            }
        }
    }
}
