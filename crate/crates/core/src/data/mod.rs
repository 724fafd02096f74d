//! Datasets, synthetic generation and non-IID partitioning.

mod folder;
mod partition;

pub use folder::load_folder_dataset;
pub use partition::{dirichlet_partition, domain_partition, split_per_client, ClientShard, PartitionPlan};

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::Batch;

/// Labelled images `[n, channels, H, W]` in `[0, 1]`, optionally tagged with
/// a domain index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub domains: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        images: Array4<f64>,
        labels: Vec<usize>,
        domains: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if domains.as_ref().is_some_and(|d| d.len() != labels.len()) {
            return Err(Error::Data("domain tag count differs from sample count".into()));
        }
        Ok(Dataset {
            images,
            labels,
            domains,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Number of distinct domains (1 when untagged).
    pub fn domain_count(&self) -> usize {
        self.domains.as_ref().map_or(1, |d| d.iter().max().map_or(0, |m| m + 1))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domains: self.domains.as_ref().map(|d| indices.iter().map(|&i| d[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Parameters of [`synth_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples: usize,
    pub image_size: usize,
    pub noise: f64,
    pub domains: usize,
}

/// Coarse grid of the class templates; each cell is one flat colour.
const TEMPLATE_GRID: usize = 4;

/// Synthetic RGB images: one random blocky template per class, recoloured by
/// a per-domain channel affine map, plus clipped Gaussian pixel noise.
///
/// Sample `i` has label `i mod C` and domain `(i div C) mod D`.
pub fn synth_dataset<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Result<Dataset> {
    let SynthSpec {
        classes,
        samples,
        image_size,
        noise,
        domains,
    } = *spec;
    if classes == 0 || domains == 0 || image_size == 0 {
        return Err(Error::Data("classes, domains and image size must be positive".into()));
    }
    if samples < classes {
        return Err(Error::Data(format!("{samples} samples cannot cover {classes} classes")));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::Data("noise must be a finite non-negative number".into()));
    }
    let grid = TEMPLATE_GRID.min(image_size);
    let cell = |p: usize| (p * grid / image_size).min(grid - 1);

    let templates: Vec<Array3<f64>> = (0..classes)
        .map(|_| {
            let colours = Array3::from_shape_fn((3, grid, grid), |_| rng.random::<f64>());
            Array3::from_shape_fn((3, image_size, image_size), |(c, y, x)| colours[[c, cell(y), cell(x)]])
        })
        .collect();
    // domain 0 is the identity map
    let affine: Vec<[(f64, f64); 3]> = (0..domains)
        .map(|d| {
            if d == 0 {
                [(1.0, 0.0); 3]
            } else {
                std::array::from_fn(|_| {
                    let a = rng.random_range(0.4..1.0);
                    (a, rng.random_range(0.0..1.0 - a))
                })
            }
        })
        .collect();

    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut images = Array4::zeros((samples, 3, image_size, image_size));
    let mut labels = Vec::with_capacity(samples);
    let mut tags = Vec::with_capacity(samples);
    for (i, mut img) in images.axis_iter_mut(Axis(0)).enumerate() {
        let (label, domain) = (i % classes, (i / classes) % domains);
        let t = &templates[label];
        for ((c, y, x), v) in img.indexed_iter_mut() {
            let (a, b) = affine[domain][c];
            let jitter = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            *v = (a * t[[c, y, x]] + b + jitter).clamp(0.0, 1.0);
        }
        labels.push(label);
        tags.push(domain);
    }
    Dataset::new(images, labels, Some(tags), classes)
}
