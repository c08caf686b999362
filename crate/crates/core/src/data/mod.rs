//! Datasets, the `.clds` file format, synthetic tasks and class-wise splits.

mod clds;
mod split;
mod synth;

pub use clds::{decode_clds, encode_clds, read_clds, write_clds, CLDS_HEADER_LEN, CLDS_MAGIC, CLDS_VERSION};
pub use split::{apply_task_order, parse_order, split_by_class, Task, TaskSplit, SPLIT_RATIOS};
pub use synth::{gen_synthetic, gen_synthetic_parts, Benchmark, SyntheticParts, SyntheticSpec};

use crate::error::{Error, Result};

/// Images `[N × h × w × c]` stored row-major as `f32`, with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        (height, width, channels): (usize, usize, usize),
        n_classes: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let px = height * width * channels;
        if px == 0 || images.len() != labels.len() * px {
            return Err(Error::Data(format!(
                "{} pixel values for {} labels of {height}x{width}x{channels} images",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {bad} >= n_classes {n_classes}")));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            n_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let px = self.pixels();
        &self.images[i * px..(i + 1) * px]
    }

    /// Samples whose label is in `classes`, relabeled to their position in `classes`.
    pub fn subset_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.select(&idx, classes)
    }

    /// Samples at `idx`, relabeled through `classes` (global label → local position).
    pub(crate) fn select(&self, idx: &[usize], classes: &[usize]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(idx.len() * self.pixels());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let local = classes
                .iter()
                .position(|&c| c == self.labels[i])
                .ok_or_else(|| Error::Data(format!("label {} not in class set", self.labels[i])))?;
            images.extend_from_slice(self.image(i));
            labels.push(local);
        }
        Dataset::new(
            (self.height, self.width, self.channels),
            classes.len(),
            images,
            labels,
        )
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
