//! Shared fixtures for the integration suites: the bundled handwritten-digit
//! IDX data and small trained models on it.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use energy_attack::basis::{CovAccumulator, EnergyBasis};
use energy_attack::data::{load_idx, Dataset};
use energy_attack::nnet::{train, Image, Model, NnetError, TrainConfig};
use energy_attack::oracle::LogitModel;
use energy_attack::whitebox::frank_wolfe_attack;

/// Load the handwritten-digit dataset. By default this is the bundled
/// 24×24 IDX fixture under `data/`; set `MNIST_IDX_DIR` to a directory
/// holding `train-images-idx3-ubyte.gz` / `train-labels-idx1-ubyte.gz` to
/// run the suites against real MNIST instead.
pub fn digits() -> Dataset {
    if let Ok(dir) = std::env::var("MNIST_IDX_DIR") {
        let dir = PathBuf::from(dir);
        let ds = load_idx(
            &dir.join("train-images-idx3-ubyte.gz"),
            &dir.join("train-labels-idx1-ubyte.gz"),
        )
        .expect("MNIST_IDX_DIR is set but the IDX pair failed to load");
        return ds;
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    load_idx(
        &root.join("data/digits24-images.idx.gz"),
        &root.join("data/digits24-labels.idx.gz"),
    )
    .expect("bundled digit fixture should load")
}

/// Training subset size: the fixture has 1797 images, real MNIST plenty.
pub fn train_count(ds: &Dataset) -> usize {
    ds.len().saturating_sub(297).min(2000)
}

pub fn train_mlp(images: &[Image], num_classes: usize, seed: u64, epochs: usize) -> (Model, f64) {
    let shape = images[0].shape();
    let mut model = Model::mlp(shape, 128, num_classes, seed).unwrap();
    let acc = train(
        &mut model,
        images,
        &TrainConfig {
            epochs,
            lr: 0.1,
            batch_size: 32,
            seed: seed ^ 0x5eed,
        },
    )
    .unwrap();
    (model, acc)
}

pub fn train_conv(images: &[Image], num_classes: usize, seed: u64, epochs: usize) -> (Model, f64) {
    let shape = images[0].shape();
    let mut model = Model::convnet(shape, num_classes, seed).unwrap();
    let acc = train(
        &mut model,
        images,
        &TrainConfig {
            epochs,
            lr: 0.1,
            batch_size: 32,
            seed: seed ^ 0x5eed,
        },
    )
    .unwrap();
    (model, acc)
}

/// Frank-Wolfe harvest of an energy basis over the given images.
pub fn harvest_basis(
    model: &Model,
    images: &[Image],
    epsilon: f64,
    patch_side: usize,
    tag: &str,
) -> EnergyBasis {
    let (c, _, _) = images[0].shape();
    let mut acc = CovAccumulator::new(c, patch_side);
    for img in images {
        let pert = frank_wolfe_attack(model, img, img.label, epsilon, 20).unwrap();
        acc.accumulate(&pert, 1).unwrap();
    }
    acc.extract_basis(tag).unwrap()
}

/// A victim wrapper that records every queried image and checks it against
/// its base image's constraints. Bases are matched by label, so attack
/// batches must carry distinct labels.
pub struct ConstraintSpy<'a> {
    pub inner: &'a Model,
    pub bases: Vec<Image>,
    pub epsilon: f64,
    pub queries_seen: std::cell::Cell<u64>,
    pub violations: std::cell::Cell<u64>,
}

impl<'a> ConstraintSpy<'a> {
    pub fn new(inner: &'a Model, bases: Vec<Image>, epsilon: f64) -> Self {
        let mut labels: Vec<usize> = bases.iter().map(|b| b.label).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(
            labels.len(),
            bases.len(),
            "spy bases must have distinct labels"
        );
        ConstraintSpy {
            inner,
            bases,
            epsilon,
            queries_seen: std::cell::Cell::new(0),
            violations: std::cell::Cell::new(0),
        }
    }
}

impl LogitModel for ConstraintSpy<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn logits(&self, x: &Image) -> Result<Vec<f64>, NnetError> {
        self.queries_seen.set(self.queries_seen.get() + 1);
        let base = self
            .bases
            .iter()
            .find(|b| b.label == x.label)
            .expect("queried image matches a base by label");
        let ok = x.pixels.len() == base.pixels.len()
            && x.pixels
                .iter()
                .zip(&base.pixels)
                .all(|(&q, &b)| (q - b).abs() <= self.epsilon + 1e-12 && (0.0..=1.0).contains(&q));
        if !ok {
            self.violations.set(self.violations.get() + 1);
        }
        self.inner.logits(x)
    }
}
