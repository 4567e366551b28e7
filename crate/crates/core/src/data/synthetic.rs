use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::DatasetSource;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub n: usize,
    pub dims: [usize; 3],
    pub seed: u64,
    /// RMS amplitude of the class prototype.
    pub margin: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Gaussian blobs per prototype.
    pub blobs: usize,
    /// Maximum per-image translation of the prototype, in pixels.
    pub jitter: usize,
}

impl SyntheticConfig {
    pub fn new(num_classes: usize, n: usize) -> Self {
        SyntheticConfig {
            num_classes,
            n,
            dims: [3, 32, 32],
            seed: 0,
            margin: 1.0,
            noise: 1.0,
            blobs: 3,
            jitter: 0,
        }
    }

    pub fn dims(mut self, dims: [usize; 3]) -> Self {
        self.dims = dims;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn blobs(mut self, blobs: usize) -> Self {
        self.blobs = blobs;
        self
    }

    pub fn jitter(mut self, jitter: usize) -> Self {
        self.jitter = jitter;
        self
    }
}

/// Class-conditional images: a per-class prototype built from Gaussian blobs
/// with signed per-channel amplitudes, plus i.i.d. Gaussian noise. Images are
/// generated on demand from `(seed, index)` so large sources cost no memory.
pub struct Synthetic {
    cfg: SyntheticConfig,
    prototypes: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Synthetic {
    pub fn new(cfg: SyntheticConfig) -> Result<Self> {
        let [c, h, w] = cfg.dims;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("synthetic image dims {:?} must be positive", cfg.dims)));
        }
        if cfg.num_classes == 0 || cfg.n < cfg.num_classes {
            return Err(Error::Config(format!(
                "synthetic source needs n >= num_classes >= 1, got n = {}, classes = {}",
                cfg.n, cfg.num_classes
            )));
        }
        if !(cfg.margin.is_finite() && cfg.noise.is_finite() && cfg.margin >= 0.0 && cfg.noise >= 0.0) {
            return Err(Error::Config("synthetic margin and noise must be finite and nonnegative".into()));
        }
        if cfg.blobs == 0 || 2 * cfg.jitter >= h.min(w) {
            return Err(Error::Config(format!(
                "synthetic source needs at least one blob and jitter below half the image side, got {} and {}",
                cfg.blobs, cfg.jitter
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let prototypes = (0..cfg.num_classes).map(|_| prototype(&cfg, &mut rng)).collect();
        let mut labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.num_classes).collect();
        labels.shuffle(&mut rng);
        Ok(Synthetic {
            cfg,
            prototypes,
            labels,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class]
    }
}

fn prototype(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [c, h, w] = cfg.dims;
    let mut p = vec![0.0; c * h * w];
    for _ in 0..cfg.blobs {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let sigma = rng.random_range(h.min(w) as f64 / 8.0..h.min(w) as f64 / 4.0).max(0.5);
        let amps: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        for (ch, amp) in amps.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    p[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let rms = (p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64).sqrt();
    if rms > 0.0 {
        p.iter_mut().for_each(|v| *v *= cfg.margin / rms);
    }
    p
}

impl DatasetSource for Synthetic {
    fn describe(&self) -> String {
        let c = &self.cfg;
        format!(
            "synthetic:classes={},n={},dims={}x{}x{},seed={},margin={},noise={},blobs={},jitter={}",
            c.num_classes, c.n, c.dims[0], c.dims[1], c.dims[2], c.seed, c.margin, c.noise, c.blobs, c.jitter
        )
    }

    fn len(&self) -> usize {
        self.cfg.n
    }

    fn image_dims(&self) -> [usize; 3] {
        self.cfg.dims
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn write_image(&self, index: usize, out: &mut [f64]) {
        let [c, h, w] = self.cfg.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index as u64 + 1);
        let j = self.cfg.jitter as i64;
        let (dy, dx) = if j > 0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0, 0)
        };
        let proto = &self.prototypes[self.labels[index]];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y as i64 - dy, x as i64 - dx);
                    let base = if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                        proto[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    out[(ch * h + y) * w + x] = base + self.cfg.noise * noise;
                }
            }
        }
    }
}
