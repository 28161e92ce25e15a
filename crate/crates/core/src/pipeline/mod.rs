//! End-to-end labeling and the seeded k-fold evaluation driver.
//!
//! One CNN is trained per (seed, fold); every graph model in the run reuses
//! its frozen features and its positional encodings, which come from the
//! CNN's leave-one-out predictions and are computed once per tree.

use serde::{Deserialize, Serialize};

use crate::anatomy::Class;
use crate::cnn::{CnnConfig, CnnModel};
use crate::error::{Error, Result};
use crate::gnn::{GnnConfig, GnnModel};
use crate::graphcore::{compute_positional_encodings, select_anchors, TreeGraph};
use crate::labeling::{
    accuracy_per_class, assign_labels_basic, assign_labels_leave_one_out, count_macs, topological_distance, ClassProbMatrix,
    LabelAssignment, MetricsReport, TdReport,
};
use crate::tensor::Tensor;
use crate::train::{kfold_split, train_cnn, train_gnn, Fold, GraphSample, LabeledPatch, TrainConfig};
use crate::volume::{BranchPatch, VoxelLabelMap};


/// A tree ready for training or evaluation: its graph, one patch per
/// branch in node order, and per-node class targets.
#[derive(Clone, Debug)]
pub struct PreparedTree {
    pub graph: TreeGraph,
    pub patches: Vec<BranchPatch>,
    pub targets: Vec<Option<usize>>,
}

impl PreparedTree {
    pub fn new(volume: &VoxelLabelMap, graph: TreeGraph, side: usize) -> Result<Self> {
        let patches = crate::cnn::tree_patches(volume, &graph, side)?;
        let targets = graph.labels().iter().map(|l| l.map(Class::index)).collect();
        Ok(PreparedTree { graph, patches, targets })
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }

    fn labeled_patches(&self) -> impl Iterator<Item = LabeledPatch> + '_ {
        self.patches
            .iter()
            .zip(&self.targets)
            .filter_map(|(p, t)| t.map(|class| LabeledPatch { patch: p.clone(), class }))
    }
}

/// Positional encodings anchored on the CNN's leave-one-out assignment.
pub fn positional_encodings(g: &TreeGraph, cnn_probs: &ClassProbMatrix) -> Result<Tensor<f32>> {
    let assignment = assign_labels_leave_one_out(cnn_probs)
        .map_err(|e| Error::invalid(format!("tree with {} branches cannot be anchored: {e}", g.len())))?;
    let anchors = select_anchors(g, assignment.as_slice())?;
    Ok(compute_positional_encodings(g, &anchors)?.to_tensor())
}

/// Per-tree output of a labeler.
#[derive(Clone, Debug, PartialEq)]
pub struct TreePrediction {
    pub probs: ClassProbMatrix,
    pub assignment: LabelAssignment,
}

/// A trained CNN, optionally refined by a graph network.
#[derive(Clone, Debug)]
pub struct Labeler {
    pub cnn: CnnModel,
    pub gnn: Option<GnnModel>,
}

impl Labeler {
    pub fn label(&self, volume: &VoxelLabelMap, graph: &TreeGraph) -> Result<TreePrediction> {
        let patches = self.cnn.tree_patches(volume, graph)?;
        self.label_patches(graph, &patches)
    }

    pub fn label_patches(&self, graph: &TreeGraph, patches: &[BranchPatch]) -> Result<TreePrediction> {
        let tf = self.cnn.features_from_patches(patches)?;
        let probs = match &self.gnn {
            None => tf.probs,
            Some(g) => {
                let pe = g.config.uses_pe().then(|| positional_encodings(graph, &tf.probs)).transpose()?;
                g.predict(&tf.features, pe.as_ref(), &graph.edge_index())?
            }
        };
        let assignment = assign_labels_basic(&probs);
        Ok(TreePrediction { probs, assignment })
    }
}

/// A graph model evaluated alongside the CNN baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedModel {
    pub name: String,
    pub config: GnnConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub cnn: CnnConfig,
    pub cnn_train: TrainConfig,
    pub gnn_train: TrainConfig,
    pub models: Vec<NamedModel>,
    pub seeds: Vec<u64>,
    pub folds: usize,
}

impl CvConfig {
    pub fn validate(&self, trees: usize) -> Result<()> {
        self.cnn.validate()?;
        self.cnn_train.validate()?;
        self.gnn_train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::invalid("cross-validation needs at least one seed"));
        }
        if self.folds < 2 || self.folds > trees {
            return Err(Error::invalid(format!("{} folds for {trees} trees", self.folds)));
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.push(CNN_METHOD);
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("method names must be unique and differ from \"cnn\""));
        }
        for m in &self.models {
            m.config.validate()?;
            if m.config.input_dim != self.cnn.feature_dim {
                return Err(Error::shape(format!(
                    "{} expects {}-wide features, CNN emits {}",
                    m.name, m.config.input_dim, self.cnn.feature_dim
                )));
            }
        }
        Ok(())
    }
}

pub const CNN_METHOD: &str = "cnn";

/// Per-seed training seeds stay distinct across folds and stages.
fn stage_seed(seed: u64, fold: usize, stage: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(fold as u64 * 7919 + stage)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub folds: Vec<Fold>,
    /// Test-fold results merged over all folds.
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Mean over seeds with any mislabeled branch.
    pub mean_td: Option<f64>,
    pub runs: Vec<SeedRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config: CvConfig,
    pub trees: usize,
    pub methods: Vec<MethodSummary>,
}

impl CvReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// Plain-text per-class accuracy table, one column per method.
    pub fn table(&self) -> String {
        let mut s = format!("{:<12}", "class");
        for m in &self.methods {
            s.push_str(&format!(" {:>10}", m.name));
        }
        s.push('\n');
        let mean_class = |m: &MethodSummary, k: usize| {
            let v: Vec<f64> = m.runs.iter().filter_map(|r| r.metrics.per_class[k].1.acc).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        for (k, c) in Class::segmental().enumerate() {
            s.push_str(&format!("{:<12}", c.name()));
            for m in &self.methods {
                match mean_class(m, k) {
                    Some(a) => s.push_str(&format!(" {:>10.2}", 100.0 * a)),
                    None => s.push_str(&format!(" {:>10}", "-")),
                }
            }
            s.push('\n');
        }
        s.push_str(&format!("{:<12}", "ACC"));
        for m in &self.methods {
            s.push_str(&format!(" {:>10}", format!("{:.2}±{:.2}", 100.0 * m.mean_acc, 100.0 * m.std_acc)));
        }
        s.push('\n');
        s.push_str(&format!("{:<12}", "TD"));
        for m in &self.methods {
            match m.mean_td {
                Some(t) => s.push_str(&format!(" {:>10.2}", t)),
                None => s.push_str(&format!(" {:>10}", "-")),
            }
        }
        s.push('\n');
        s
    }
}

struct TreeStage {
    features: Tensor<f32>,
    probs: ClassProbMatrix,
    pe: Option<Tensor<f32>>,
}

/// Runs k-fold cross-validation for every seed and method. `progress`
/// receives one line per finished stage.
pub fn cross_validate(trees: &[PreparedTree], cfg: &CvConfig, mut progress: impl FnMut(&str)) -> Result<CvReport> {
    cfg.validate(trees.len())?;
    if let Some(t) = trees.iter().find(|t| t.patches.first().is_some_and(|p| p.side != cfg.cnn.side)) {
        return Err(Error::shape(format!("tree patches of side {} for a side-{} CNN", t.patches[0].side, cfg.cnn.side)));
    }
    let methods = 1 + cfg.models.len();
    let needs_pe = cfg.models.iter().any(|m| m.config.uses_pe());
    let mut runs: Vec<Vec<SeedRun>> = vec![Vec::new(); methods];
    let references: Vec<Vec<Option<usize>>> = trees.iter().map(|t| t.graph.reference_nodes()).collect();
    let mean_nodes = trees.iter().map(PreparedTree::len).sum::<usize>().div_ceil(trees.len());
    let mean_edges = trees.iter().map(|t| t.graph.edge_index().len()).sum::<usize>().div_ceil(trees.len());
    let cnn_macs = count_macs(&cfg.cnn.mac_layers()).total * mean_nodes as u64;
    let cnn_params = cfg.cnn.param_count() as u64;

    for &seed in &cfg.seeds {
        let folds = kfold_split(trees.len(), cfg.folds, seed)?;
        let mut assigned: Vec<Vec<Option<LabelAssignment>>> = vec![vec![None; trees.len()]; methods];
        for (f, fold) in folds.iter().enumerate() {
            let patches: Vec<LabeledPatch> = fold.train.iter().flat_map(|&t| trees[t].labeled_patches()).collect();
            let cnn_cfg = TrainConfig { seed: stage_seed(seed, f, 0), ..cfg.cnn_train.clone() };
            let (cnn, log) = train_cnn(&cfg.cnn, &patches, &cnn_cfg)?;
            let last = log.last().expect("at least one epoch");
            progress(&format!("seed {seed} fold {f}: cnn loss {:.4} acc {:.4}", last.loss, last.acc));

            let stages: Vec<TreeStage> = trees
                .iter()
                .map(|t| {
                    let tf = cnn.features_from_patches(&t.patches)?;
                    let pe = if needs_pe { Some(positional_encodings(&t.graph, &tf.probs)?) } else { None };
                    Ok(TreeStage { features: tf.features, probs: tf.probs, pe })
                })
                .collect::<Result<_>>()?;
            for &t in &fold.test {
                assigned[0][t] = Some(assign_labels_basic(&stages[t].probs));
            }

            for (m, model) in cfg.models.iter().enumerate() {
                let sample = |t: usize| GraphSample {
                    features: stages[t].features.clone(),
                    pe: if model.config.uses_pe() { stages[t].pe.clone() } else { None },
                    edges: trees[t].graph.edge_index(),
                    targets: trees[t].targets.clone(),
                };
                let data: Vec<GraphSample> = fold.train.iter().map(|&t| sample(t)).collect();
                let gnn_cfg = TrainConfig { seed: stage_seed(seed, f, 1 + m as u64), ..cfg.gnn_train.clone() };
                let (gnn, log) = train_gnn(&model.config, &data, &gnn_cfg)?;
                let last = log.last().expect("at least one epoch");
                progress(&format!("seed {seed} fold {f}: {} loss {:.4} acc {:.4}", model.name, last.loss, last.acc));
                for &t in &fold.test {
                    let s = sample(t);
                    let probs = gnn.predict(&s.features, s.pe.as_ref(), &s.edges)?;
                    assigned[m + 1][t] = Some(assign_labels_basic(&probs));
                }
            }
        }

        for (m, per_tree) in assigned.into_iter().enumerate() {
            let per_tree: Vec<LabelAssignment> = per_tree.into_iter().map(|a| a.expect("folds cover every tree")).collect();
            let acc = accuracy_per_class(&per_tree, &references)?;
            let td = per_tree
                .iter()
                .zip(&references)
                .zip(trees)
                .map(|((a, r), t)| topological_distance(a, r, &t.graph))
                .collect::<Result<Vec<_>>>()?;
            let (macs, params) = match m {
                0 => (cnn_macs, cnn_params),
                _ => {
                    let g = &cfg.models[m - 1].config;
                    (cnn_macs + count_macs(&g.mac_layers(mean_nodes, mean_edges)).total, cnn_params + g.param_count() as u64)
                }
            };
            let metrics = MetricsReport::new(&acc, &TdReport::from_trees(&td), macs, params);
            runs[m].push(SeedRun { seed, folds: folds.clone(), metrics });
        }
    }

    let names = std::iter::once(CNN_METHOD.to_owned()).chain(cfg.models.iter().map(|m| m.name.clone()));
    let methods = names.zip(runs).map(|(name, runs)| summarize(name, runs)).collect();
    Ok(CvReport { config: cfg.clone(), trees: trees.len(), methods })
}

fn summarize(name: String, runs: Vec<SeedRun>) -> MethodSummary {
    let accs: Vec<f64> = runs.iter().map(|r| r.metrics.overall.acc).collect();
    let n = accs.len() as f64;
    let mean_acc = accs.iter().sum::<f64>() / n;
    let std_acc = if accs.len() > 1 {
        (accs.iter().map(|a| (a - mean_acc).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let tds: Vec<f64> = runs.iter().filter_map(|r| r.metrics.overall.td).collect();
    let mean_td = (!tds.is_empty()).then(|| tds.iter().sum::<f64>() / tds.len() as f64);
    MethodSummary { name, mean_acc, std_acc, mean_td, runs }
}
