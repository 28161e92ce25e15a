use rand::Rng;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, ParamSpec, Tensor};

/// I.i.d. `N(0, 2/fan_in)` entries.
pub fn he_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<f32>> {
    if fan_in == 0 {
        return Err(Error::invalid("he_init needs fan_in >= 1"));
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Ok(Tensor::from_fn(shape, |_| normal.sample(rng) as f32))
}

/// He-initialised weights and zero biases, drawn in spec order from one stream.
pub fn init_params(specs: Vec<ParamSpec>, seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = specs
        .iter()
        .map(|s| match s.fan_in {
            0 => Tensor::zeros(&s.shape),
            f => he_init(&s.shape, f, &mut rng).expect("fan_in checked"),
        })
        .collect();
    ParamSet::from_values(specs, values).expect("shapes come from specs")
}

/// Inverse-frequency weights `N / (C · max(count, 1))`, rescaled to mean 1.
pub fn class_weights(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::invalid("class weights of an empty label set"));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        *counts
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("class {l} out of range {num_classes}")))? += 1;
    }
    let n = labels.len() as f64;
    let raw: Vec<f64> = counts.iter().map(|&c| n / (num_classes as f64 * c.max(1) as f64)).collect();
    let mean = raw.iter().sum::<f64>() / num_classes as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// SGD with classical momentum: `v ← μ·v + g`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum { lr, momentum, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if let Some((p, g)) = params.iter().zip(grads).find(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let (lr, mu) = (self.lr as f32, self.momentum as f32);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled partition of `0..n` into `folds` test sets whose sizes differ
/// by at most one; each fold trains on the complement. Index lists are sorted.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(Error::invalid(format!("{folds} folds for {n} items")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let mut test = order[start..start + size].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        train.sort_unstable();
        out.push(Fold { train, test });
        start += size;
    }
    Ok(out)
}
