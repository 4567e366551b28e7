//! Labelled image sources and seeded sampling.

mod cifar;
mod synthetic;

pub use cifar::{denormalize, normalize, Cifar10, Split, CIFAR10_MEAN, CIFAR10_STD, RECORD_LEN};
pub use synthetic::{Synthetic, SyntheticConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Random-access labelled images. Implementations are read-only after
/// construction, so one source can feed several samplers at once.
pub trait DatasetSource: Send + Sync {
    /// Short identifier such as `cifar10:train`, recorded in manifests.
    fn describe(&self) -> String;
    fn len(&self) -> usize;
    fn image_dims(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    fn label(&self, index: usize) -> usize;
    /// Writes image `index` into `out`, which holds exactly `c·h·w` values.
    fn write_image(&self, index: usize, out: &mut [f64]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

/// Materializes the listed images in order.
pub fn gather(src: &dyn DatasetSource, indices: &[usize]) -> Batch {
    let [c, h, w] = src.image_dims();
    let len = c * h * w;
    let mut data = vec![0.0; indices.len() * len];
    for (chunk, &i) in data.chunks_exact_mut(len).zip(indices) {
        src.write_image(i, chunk);
    }
    Batch {
        images: Tensor4::from_vec([indices.len(), c, h, w], data).expect("sized above"),
        labels: indices.iter().map(|&i| src.label(i)).collect(),
    }
}

/// `g` distinct indices drawn uniformly without replacement, in a seeded order.
pub fn sample_indices(size: usize, g: usize, seed: u64) -> Result<Vec<usize>> {
    if g > size {
        return Err(Error::Data(format!("cannot sample {g} images from a source of {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, size, g).into_vec())
}

/// A fixed draw from a source, consumed in batches.
pub struct Sample<'a> {
    src: &'a dyn DatasetSource,
    indices: Vec<usize>,
}

pub fn sample(src: &dyn DatasetSource, g: usize, seed: u64) -> Result<Sample<'_>> {
    Ok(Sample {
        src,
        indices: sample_indices(src.len(), g, seed)?,
    })
}

impl<'a> Sample<'a> {
    pub fn from_indices(src: &'a dyn DatasetSource, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Data(format!("index {bad} is outside a source of {}", src.len())));
        }
        Ok(Sample { src, indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn source(&self) -> &'a dyn DatasetSource {
        self.src
    }

    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        self.indices
            .chunks(batch_size.max(1))
            .map(move |chunk| gather(self.src, chunk))
    }
}

/// Images already in memory, mainly for tests and small experiments.
#[derive(Clone, Debug)]
pub struct InMemory {
    images: Tensor4,
    labels: Vec<usize>,
    num_classes: usize,
}

impl InMemory {
    pub fn new(images: Tensor4, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != images.images() {
            return Err(Error::Data(format!(
                "{} labels for {} images",
                labels.len(),
                images.images()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} is outside {num_classes} classes")));
        }
        Ok(InMemory {
            images,
            labels,
            num_classes,
        })
    }

    pub fn subset(src: &dyn DatasetSource, indices: &[usize]) -> Self {
        let b = gather(src, indices);
        InMemory {
            images: b.images,
            labels: b.labels,
            num_classes: src.num_classes(),
        }
    }
}

impl DatasetSource for InMemory {
    fn describe(&self) -> String {
        format!("memory:{}", self.labels.len())
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn image_dims(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.dims();
        [c, h, w]
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn write_image(&self, index: usize, out: &mut [f64]) {
        out.copy_from_slice(self.images.image(index));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_sample_is_a_permutation() {
        let mut idx = sample_indices(50, 50, 4).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn seeds_control_order() {
        assert_eq!(sample_indices(1000, 20, 1).unwrap(), sample_indices(1000, 20, 1).unwrap());
        assert_ne!(sample_indices(1000, 20, 1).unwrap(), sample_indices(1000, 20, 2).unwrap());
    }

    #[test]
    fn oversampling_is_a_data_error() {
        assert!(matches!(sample_indices(10, 11, 0), Err(Error::Data(_))));
    }

    #[test]
    fn sampled_class_frequencies_are_near_uniform() {
        let src = Synthetic::new(SyntheticConfig::new(10, 5000).seed(3)).unwrap();
        let s = sample(&src, 500, 11).unwrap();
        let mut counts = [0usize; 10];
        for &i in s.indices() {
            counts[src.label(i)] += 1;
        }
        // multinomial: mean 50, sd = sqrt(500 * 0.1 * 0.9)
        let sd = (500.0f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - 50.0).abs() <= 4.0 * sd, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn samples_never_repeat(size in 1usize..400, frac in 0.0f64..=1.0, seed: u64) {
            let g = ((size as f64) * frac) as usize;
            let idx = sample_indices(size, g, seed).unwrap();
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), g);
            prop_assert!(idx.iter().all(|&i| i < size));
        }
    }
}
