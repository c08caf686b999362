//! Synthetic image classes whose prototypes share a low-rank basis.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{split_by_class, Dataset, TaskSplit};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Rank of the basis shared by every class prototype.
    pub rank: usize,
    /// Per-pixel standard deviation of the prototypes.
    pub prototype_scale: f64,
    /// Standard deviation of the per-sample Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("synthetic rank must be at least 1".into()));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.n_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("n_classes and samples_per_class must be at least 1".into()));
        }
        if self.height * self.width * self.channels == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Generated dataset together with the generating basis and prototypes.
#[derive(Clone, Debug)]
pub struct SyntheticParts {
    pub dataset: Dataset,
    /// `[rank × pixels]`, row-major.
    pub basis: Vec<f64>,
    /// `[n_classes × pixels]`, row-major.
    pub prototypes: Vec<f64>,
}

pub fn gen_synthetic_parts(spec: &SyntheticSpec) -> Result<SyntheticParts> {
    spec.validate()?;
    let px = spec.pixels();
    let r = spec.rank;
    let mut brng = rng::stream(spec.seed, "synth-basis", &[]);
    let basis: Vec<f64> = (0..r * px).map(|_| StandardNormal.sample(&mut brng)).collect();

    let coef_std = spec.prototype_scale / (r as f64).sqrt();
    let mut prototypes = vec![0.0; spec.n_classes * px];
    for c in 0..spec.n_classes {
        let mut prng = rng::stream(spec.seed, "synth-prototype", &[c as u64]);
        let w: Vec<f64> = (0..r)
            .map(|_| coef_std * Distribution::<f64>::sample(&StandardNormal, &mut prng))
            .collect();
        let proto = &mut prototypes[c * px..(c + 1) * px];
        for (i, wi) in w.iter().enumerate() {
            for (p, b) in proto.iter_mut().zip(&basis[i * px..(i + 1) * px]) {
                *p += wi * b;
            }
        }
    }

    let n = spec.n_classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.n_classes {
        let mut nrng = rng::stream(spec.seed, "synth-noise", &[c as u64]);
        let proto = &prototypes[c * px..(c + 1) * px];
        for _ in 0..spec.samples_per_class {
            for &p in proto {
                let eps: f64 = StandardNormal.sample(&mut nrng);
                images.push((p + spec.noise * eps) as f32);
            }
            labels.push(c);
        }
    }
    let dataset = Dataset::new(
        (spec.height, spec.width, spec.channels),
        spec.n_classes,
        images,
        labels,
    )?;
    Ok(SyntheticParts {
        dataset,
        basis,
        prototypes,
    })
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    Ok(gen_synthetic_parts(spec)?.dataset)
}

/// A base task for backbone pretraining plus a disjoint continual task stream,
/// all drawn from one synthetic class pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub base_classes: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub synthetic: SyntheticSpec,
}

impl Benchmark {
    /// `synth-10/5`: 10 continual classes in 5 tasks of 2, plus a 4-class base task.
    pub fn synth_10_5(seed: u64) -> Self {
        Benchmark {
            base_classes: 4,
            tasks: 5,
            classes_per_task: 2,
            synthetic: SyntheticSpec {
                n_classes: 14,
                samples_per_class: 250,
                height: 16,
                width: 16,
                channels: 1,
                rank: 6,
                prototype_scale: 0.1,
                noise: 0.25,
                seed,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        if self.base_classes == 0 {
            return Err(Error::Config("base_classes must be at least 1".into()));
        }
        let need = self.base_classes + self.tasks * self.classes_per_task;
        if need > self.synthetic.n_classes {
            return Err(Error::Config(format!(
                "benchmark needs {need} classes but the generator makes {}",
                self.synthetic.n_classes
            )));
        }
        Ok(())
    }

    /// Returns `(base, continual)`: the first `base_classes` classes and the rest, each relabeled from 0.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let all = gen_synthetic(&self.synthetic)?;
        let base: Vec<usize> = (0..self.base_classes).collect();
        let rest: Vec<usize> = (self.base_classes..self.synthetic.n_classes).collect();
        Ok((all.subset_classes(&base)?, all.subset_classes(&rest)?))
    }

    pub fn split(&self, continual: &Dataset) -> Result<TaskSplit> {
        split_by_class(continual, self.tasks, self.classes_per_task)
    }
}
