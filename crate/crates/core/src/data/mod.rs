//! Datasets: IDX digits, synthetic MNIST-ONE/TWO, the binary cache and a
//! generic PNG folder loader.

pub mod cache;
pub mod folder;
pub mod idx;
pub mod synth;

pub use idx::DigitSource;
pub use synth::{synth_mnist_one, synth_mnist_two, SynthLayout, SynthObject, SynthSample, MNIST_ONE, MNIST_TWO};

use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::generator::Dataset;
use crate::tensor::Tensor;

/// A batch-addressable image collection with integer labels.
#[derive(Clone, Debug)]
pub struct ImageSet {
    /// `n×c×h×w` in `[-1, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("image set must be n×c×h×w, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dimension { axis: "image count", expected: images.shape()[0], actual: labels.len() });
        }
        Ok(Self { images, labels })
    }

    /// Images of synthetic samples, labelled by their first object.
    pub fn from_samples(samples: &[SynthSample]) -> Result<Self> {
        let imgs: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
        let labels = samples.iter().map(|s| s.objects.first().map_or(0, |o| o.label as usize)).collect();
        Self::new(Tensor::stack(&imgs)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(c, h, w)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        self.images.select(indices)
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        ImageSet { images: self.images.select(indices), labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Synthetic samples for the configured dataset, read from the cache file
/// when it exists and written to it otherwise.
pub fn load_synthetic(config: &TrainConfig, root: &Path) -> Result<Vec<SynthSample>> {
    let layout = match config.model.dataset {
        Dataset::MnistOne => MNIST_ONE,
        Dataset::MnistTwo => MNIST_TWO,
        other => return Err(Error::Config(format!("`{other}` is not a synthetic digit dataset"))),
    };
    if let Some(cache) = &config.data.cache {
        if cache.exists() {
            let samples = cache::read_cache(cache)?;
            if samples.len() != config.data.num_samples {
                return Err(Error::format(cache, format!("{} samples cached, {} configured", samples.len(), config.data.num_samples)));
            }
            return Ok(samples);
        }
    }
    let src = DigitSource::from_dir(root)?;
    let samples = synth::synth_range(&src, layout, config.data.num_samples, config.data.data_seed)?;
    if let Some(cache) = &config.data.cache {
        cache::write_cache(cache, &samples)?;
    }
    Ok(samples)
}

/// The training images of `config`: synthetic digits or a PNG folder under `root`.
pub fn load_training_set(config: &TrainConfig, root: &Path) -> Result<ImageSet> {
    let set = match config.model.dataset {
        Dataset::MnistOne | Dataset::MnistTwo => ImageSet::from_samples(&load_synthetic(config, root)?)?,
        _ => {
            let images = folder::load_png_folder(root, config.model.image_size)?;
            let n = images.shape()[0].min(config.data.num_samples);
            let images = images.select(&(0..n).collect::<Vec<_>>());
            ImageSet::new(images, vec![0; n])?
        }
    };
    let (c, h, w) = set.image_shape();
    let m = &config.model;
    if c != m.channels || h != m.image_size || w != m.image_size {
        return Err(Error::Config(format!("data is {c}×{h}×{w}, model expects {}×{}×{}", m.channels, m.image_size, m.image_size)));
    }
    Ok(set)
}
