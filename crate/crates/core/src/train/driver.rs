use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{class_weights, init_params, SgdMomentum};
use crate::anatomy::NUM_CLASSES;
use crate::cnn::{cnn_forward_tape, patch_input, CnnConfig, CnnModel};
use crate::error::{Error, Result};
use crate::gnn::{gnn_forward_tape, GnnConfig, GnnModel};
use crate::graphcore::EdgeIndex;
use crate::tensor::{ParamSet, Tape, Tensor, Var};
use crate::volume::BranchPatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassWeighting {
    /// Normalised inverse class frequency over the training items.
    Inverse,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    pub folds: usize,
    /// CNN patches per optimisation step.
    pub batch: usize,
    pub weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 5e-4, momentum: 0.9, epochs: 150, seed: 0, folds: 5, batch: 32, weighting: ClassWeighting::Inverse }
    }
}

impl TrainConfig {
    /// Defaults for a GNN of the given depth; the 7-layer stack trains
    /// longer at a lower rate.
    pub fn for_depth(layers: usize) -> Self {
        if layers >= 7 {
            TrainConfig { lr: 1e-5, epochs: 250, ..Self::default() }
        } else {
            Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::invalid(format!("need at least 2 folds, got {}", self.folds)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-item weighted loss over the epoch, evaluated before each step.
    pub loss: f64,
    /// Training accuracy over the same forward passes.
    pub acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,acc\n");
        for e in &self.epochs {
            writeln!(s, "{},{},{}", e.epoch, e.loss, e.acc).expect("write to string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// One branch patch with its class index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub patch: BranchPatch,
    pub class: usize,
}

/// One tree for the graph stage: frozen CNN features, optional
/// positional encodings, edges with self-loops, and per-node targets
/// (`None` rows carry no loss).
#[derive(Clone, Debug)]
pub struct GraphSample {
    pub features: Tensor<f32>,
    pub pe: Option<Tensor<f32>>,
    pub edges: EdgeIndex,
    pub targets: Vec<Option<usize>>,
}

impl GraphSample {
    fn labeled(&self) -> (Vec<usize>, Vec<usize>) {
        self.targets.iter().enumerate().filter_map(|(i, t)| t.map(|c| (i, c))).unzip()
    }
}

fn weights_for(labels: &[usize], mode: ClassWeighting) -> Result<Vec<f64>> {
    match mode {
        ClassWeighting::Inverse => class_weights(labels, NUM_CLASSES),
        ClassWeighting::Uniform => Ok(vec![1.0; NUM_CLASSES]),
    }
}

/// Outcome of one optimisation step's forward/backward pass.
struct StepResult {
    grads: Vec<Tensor<f32>>,
    /// Weighted mean loss of the step.
    loss: f64,
    items: usize,
    correct: usize,
}

fn argmax_correct(logits: &Tensor<f32>, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let row = logits.row(i);
            // first maximum wins ties
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == t
        })
        .count()
}

fn collect_grads(tape: &Tape<f32>, theta: &[Var], loss: Var) -> Result<Vec<Tensor<f32>>> {
    let mut g = tape.backward(loss)?;
    Ok(theta.iter().map(|&v| g.take(v).expect("every parameter receives a gradient")).collect())
}

/// Epoch loop shared by both stages: a seeded shuffle of `steps` per
/// epoch, one optimiser step each.
fn run_epochs(
    params: &mut ParamSet<f32>,
    steps: &[Vec<usize>],
    cfg: &TrainConfig,
    mut step: impl FnMut(&ParamSet<f32>, &[usize]) -> Result<StepResult>,
) -> Result<TrainLog> {
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..steps.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut items, mut correct) = (0.0, 0usize, 0usize);
        for &s in &order {
            let r = step(params, &steps[s])?;
            if !r.loss.is_finite() {
                return Err(Error::invalid(format!("loss diverged at epoch {epoch}")));
            }
            opt.step(params.values_mut(), &r.grads)?;
            loss += r.loss * r.items as f64;
            items += r.items;
            correct += r.correct;
        }
        let n = items.max(1) as f64;
        log.epochs.push(EpochStats { epoch, loss: loss / n, acc: correct as f64 / n });
    }
    Ok(log)
}

/// The last update can overflow without any recorded loss seeing it.
fn require_finite(params: &ParamSet<f32>) -> Result<()> {
    match params.specs().iter().zip(params.values()).find(|(_, v)| v.data().iter().any(|x| !x.is_finite())) {
        Some((spec, _)) => Err(Error::invalid(format!("training diverged: {} is not finite", spec.name))),
        None => Ok(()),
    }
}

/// Trains the CNN on labelled patches in shuffled batches of `cfg.batch`.
/// Batches are drawn afresh every epoch.
pub fn train_cnn(net: &CnnConfig, data: &[LabeledPatch], cfg: &TrainConfig) -> Result<(CnnModel, TrainLog)> {
    cfg.validate()?;
    fit_cnn(net, data, cfg)
}

/// [`train_cnn`] without the hyperparameter range checks.
pub(crate) fn fit_cnn(net: &CnnConfig, data: &[LabeledPatch], cfg: &TrainConfig) -> Result<(CnnModel, TrainLog)> {
    net.validate()?;
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::invalid("epochs and batch size must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("CNN training set is empty"));
    }
    if let Some(p) = data.iter().find(|p| p.patch.side != net.side) {
        return Err(Error::shape(format!("patch side {} vs network side {}", p.patch.side, net.side)));
    }
    let labels: Vec<usize> = data.iter().map(|p| p.class).collect();
    let w = weights_for(&labels, cfg.weighting)?;
    let mut params = init_params(net.param_specs(), cfg.seed);

    // batches are re-drawn per epoch from a dedicated stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch) {
            let mut tape = Tape::<f32>::new();
            let theta = params.attach(&mut tape);
            let xs: Vec<Var> = batch.iter().map(|&i| tape.constant(patch_input(&data[i].patch))).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| data[i].class).collect();
            let out = cnn_forward_tape(&mut tape, net, &theta, &xs)?;
            let l = tape.weighted_cross_entropy(out.logits, &targets, &w)?;
            let value = tape.value(l).item() as f64;
            if !value.is_finite() {
                return Err(Error::invalid(format!("loss diverged at epoch {epoch}")));
            }
            correct += argmax_correct(tape.value(out.logits), &targets);
            let grads = collect_grads(&tape, &theta, l)?;
            drop(tape);
            opt.step(params.values_mut(), &grads)?;
            loss += value * batch.len() as f64;
        }
        let n = data.len() as f64;
        log.epochs.push(EpochStats { epoch, loss: loss / n, acc: correct as f64 / n });
    }
    require_finite(&params)?;
    Ok((CnnModel::from_params(net.clone(), params)?, log))
}

/// Trains a graph network, one tree per optimisation step.
pub fn train_gnn(net: &GnnConfig, data: &[GraphSample], cfg: &TrainConfig) -> Result<(GnnModel, TrainLog)> {
    cfg.validate()?;
    fit_gnn(net, data, cfg)
}

pub(crate) fn fit_gnn(net: &GnnConfig, data: &[GraphSample], cfg: &TrainConfig) -> Result<(GnnModel, TrainLog)> {
    net.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("GNN training set is empty"));
    }
    for (t, s) in data.iter().enumerate() {
        if s.targets.len() != s.edges.n || s.features.rows() != s.edges.n {
            return Err(Error::shape(format!("tree {t}: features, targets and graph disagree on node count")));
        }
        if net.uses_pe() != s.pe.is_some() {
            return Err(Error::invalid(format!("tree {t}: positional encodings do not match the {} config", net.arch)));
        }
    }
    let labeled: Vec<(Arc<[usize]>, Vec<usize>)> = data
        .iter()
        .map(|s| {
            let (rows, classes) = s.labeled();
            (Arc::from(rows), classes)
        })
        .collect();
    let all: Vec<usize> = labeled.iter().flat_map(|l| l.1.iter().copied()).collect();
    let w = weights_for(&all, cfg.weighting)?;
    let mut params = init_params(net.param_specs(), cfg.seed);
    let steps: Vec<Vec<usize>> = (0..data.len()).filter(|&t| !labeled[t].1.is_empty()).map(|t| vec![t]).collect();
    if steps.is_empty() {
        return Err(Error::invalid("no labelled nodes in the GNN training set"));
    }
    let log = run_epochs(&mut params, &steps, cfg, |params, step| {
        let t = step[0];
        let s = &data[t];
        let (rows, targets) = &labeled[t];
        let mut tape = Tape::<f32>::new();
        let theta = params.attach(&mut tape);
        let h = tape.constant(s.features.clone());
        let p = s.pe.as_ref().map(|p| tape.constant(p.clone()));
        let out = gnn_forward_tape(&mut tape, net, &theta, h, p, &s.edges)?;
        let logits = tape.gather_rows(out.logits, rows.clone())?;
        let l = tape.weighted_cross_entropy(logits, targets, &w)?;
        let correct = argmax_correct(tape.value(logits), targets);
        Ok(StepResult { loss: tape.value(l).item() as f64, items: targets.len(), correct, grads: collect_grads(&tape, &theta, l)? })
    })?;
    require_finite(&params)?;
    Ok((GnnModel::from_params(net.clone(), params)?, log))
}
