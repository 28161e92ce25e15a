//! Command-line front end. Every subcommand with an output directory writes
//! its resolved configuration there as `config.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::anatomy::Class;
use crate::cnn::CnnConfig;
use crate::error::{Error, Result};
use crate::gnn::{Arch, GnnConfig, PeMode};
use crate::graphcore::TreeGraph;
use crate::labeling::{count_macs, export_features_csv, LabelAssignment};
use crate::pipeline::{cross_validate, positional_encodings, CvConfig, Labeler, NamedModel, PreparedTree, TreePrediction};
use crate::synth::{read_manifest, write_corpus, CorpusManifest, SyntheticTreeSpec};
use crate::tensor::{read_checkpoint, write_checkpoint, NamedTensors, Tensor};
use crate::train::{train_cnn, train_gnn, Checkpoint, ClassWeighting, GraphSample, TrainConfig};
use crate::volume::{build_branch_graph, read_label_map};


pub const CONFIG_ECHO: &str = "config.json";
pub const CNN_CHECKPOINT: &str = "cnn.ckpt";
pub const GNN_CHECKPOINT: &str = "gnn.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(name = "airway-spgnn", version, about = "Anatomical labeling of segmented airway trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus of labeled trees.
    Synth(SynthArgs),
    /// Build the branch adjacency graph of a label volume.
    Graph(GraphArgs),
    /// Train the branch-patch CNN on a corpus.
    TrainCnn(TrainCnnArgs),
    /// Extract CNN features and positional encodings for every corpus tree.
    Features(FeaturesArgs),
    /// Train a graph network on extracted features.
    TrainGnn(TrainGnnArgs),
    /// Label one tree.
    Predict(PredictArgs),
    /// Seeded k-fold cross-validation of the CNN and graph models.
    Eval(EvalArgs),
    /// Multiply-accumulate count of a configuration.
    Macs(MacsArgs),
    /// Write per-branch CNN features of corpus trees as CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 5)]
    pub depth: u32,
    #[arg(long, default_value_t = 0.1)]
    pub missing_prob: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GraphArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// Output graph JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Inverse,
    Uniform,
}

impl From<Weighting> for ClassWeighting {
    fn from(w: Weighting) -> Self {
        match w {
            Weighting::Inverse => ClassWeighting::Inverse,
            Weighting::Uniform => ClassWeighting::Uniform,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Defaults to 5e-4 (1e-5 for 7-layer graph networks).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Defaults to 150 (250 for 7-layer graph networks).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = Weighting::Inverse)]
    pub weighting: Weighting,
}

impl OptimArgs {
    fn resolve(&self, layers: usize) -> Result<TrainConfig> {
        let base = TrainConfig::for_depth(layers);
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(base.lr),
            momentum: self.momentum,
            epochs: self.epochs.unwrap_or(base.epochs),
            seed: self.seed,
            batch: self.batch,
            weighting: self.weighting.into(),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainCnnArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// 16 and 32 select the desk networks, 80 the full-size one.
    #[arg(long, default_value_t = 32)]
    pub patch_side: usize,
    /// Train on these manifest positions only (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub trees: Option<Vec<usize>>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub cnn: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "spgnn", value_parser = parse_arch)]
    pub arch: Arch,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, conflicts_with = "no_skip")]
    pub skip: bool,
    #[arg(long)]
    pub no_skip: bool,
    /// No positional encodings.
    #[arg(long, conflicts_with = "nlpe")]
    pub no_pe: bool,
    /// Raw positional encodings at every layer instead of a learned stream.
    #[arg(long)]
    pub nlpe: bool,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<GnnConfig> {
        let mut cfg = GnnConfig::new(self.arch, self.layers)?;
        if self.skip {
            cfg.skip = true;
        }
        if self.no_skip {
            cfg.skip = false;
        }
        if self.no_pe {
            if self.arch == Arch::Spgnn {
                return Err(Error::invalid("--no-pe contradicts --arch spgnn; the no-PE variant is --arch gats"));
            }
            cfg.pe = PeMode::None;
        }
        if self.nlpe {
            if self.arch != Arch::Spgnn {
                return Err(Error::invalid(format!("--nlpe needs --arch spgnn, got {}", self.arch)));
            }
            cfg.pe = PeMode::Frozen;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainGnnArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Directory written by `features`.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub trees: Option<Vec<usize>>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub cnn: PathBuf,
    /// Graph network checkpoint; without it the CNN labels alone.
    #[arg(long)]
    pub gnn: Option<PathBuf>,
    #[arg(long)]
    pub volume: PathBuf,
    /// Precomputed graph JSON; built from the volume when absent.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Output assignment JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 32)]
    pub patch_side: usize,
    /// Graph models to compare with the CNN.
    #[arg(long, value_delimiter = ',', default_value = "gats,spgnn", value_parser = parse_arch)]
    pub archs: Vec<Arch>,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub cnn_lr: f64,
    #[arg(long, default_value_t = 150)]
    pub cnn_epochs: usize,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct MacsArgs {
    #[arg(long, default_value_t = 32)]
    pub patch_side: usize,
    /// Branches in the tree.
    #[arg(long, default_value_t = 50)]
    pub nodes: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub cnn: PathBuf,
    /// Output directory, one CSV per tree.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, S>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::invalid(e.to_string().trim_end().to_owned()))?;
    execute(&cli.command)
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(cmd, a),
        Command::Graph(a) => graph(a),
        Command::TrainCnn(a) => train_cnn_cmd(cmd, a),
        Command::Features(a) => features(cmd, a),
        Command::TrainGnn(a) => train_gnn_cmd(cmd, a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(cmd, a),
        Command::Macs(a) => macs(a),
        Command::ExportFeatures(a) => export(cmd, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Echo of the parsed command plus whatever it resolved to.
fn echo_config(dir: &Path, cmd: &Command, resolved: impl Serialize) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a, R> {
        args: &'a Command,
        resolved: R,
    }
    write_json(&dir.join(CONFIG_ECHO), &Echo { args: cmd, resolved })
}

fn cnn_preset(side: usize) -> Result<CnnConfig> {
    match side {
        16 => Ok(CnnConfig::desk16()),
        32 => Ok(CnnConfig::desk32()),
        80 => Ok(CnnConfig::default()),
        s => Err(Error::invalid(format!("--patch-side must be 16, 32 or 80, got {s}"))),
    }
}

/// Corpus trees with their graphs, optionally restricted to `subset`.
fn load_corpus(path: &Path, subset: Option<&[usize]>) -> Result<(PathBuf, CorpusManifest, Vec<usize>)> {
    let manifest = read_manifest(path)?;
    let dir = if path.is_dir() { path.to_path_buf() } else { path.parent().unwrap_or(Path::new(".")).to_path_buf() };
    let picks = match subset {
        None => (0..manifest.trees.len()).collect(),
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&i| i >= manifest.trees.len()) {
                return Err(Error::invalid(format!("tree {bad} not in a corpus of {}", manifest.trees.len())));
            }
            s.to_vec()
        }
    };
    if picks.is_empty() {
        return Err(Error::invalid("no trees selected"));
    }
    Ok((dir, manifest, picks))
}

fn prepare(dir: &Path, manifest: &CorpusManifest, i: usize, side: usize) -> Result<PreparedTree> {
    let e = &manifest.trees[i];
    let volume = read_label_map(&dir.join(&e.mhd))?;
    let graph = TreeGraph::read_json(&dir.join(&e.graph))?;
    PreparedTree::new(&volume, graph, side)
}

fn synth(cmd: &Command, a: &SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::invalid("--count must be at least 1"));
    }
    let spec = SyntheticTreeSpec { depth: a.depth, missing_prob: a.missing_prob, ..SyntheticTreeSpec::with_seed(a.seed) };
    spec.validate()?;
    let manifest = write_corpus(&a.out, &spec, a.count)?;
    echo_config(&a.out, cmd, &manifest.spec)?;
    println!("wrote {} trees to {}", manifest.trees.len(), a.out.display());
    Ok(())
}

fn graph(a: &GraphArgs) -> Result<()> {
    let v = read_label_map(&a.volume)?;
    let g = build_branch_graph(&v)?;
    g.write_json(&a.out)?;
    println!("{} branches, {} edges", g.len(), g.edges().len());
    Ok(())
}

fn train_cnn_cmd(cmd: &Command, a: &TrainCnnArgs) -> Result<()> {
    let net = cnn_preset(a.patch_side)?;
    let cfg = a.optim.resolve(0)?;
    let (dir, manifest, picks) = load_corpus(&a.corpus, a.trees.as_deref())?;
    let mut patches = Vec::new();
    for &i in &picks {
        let t = prepare(&dir, &manifest, i, net.side)?;
        patches.extend(t.patches.into_iter().zip(t.targets).filter_map(|(patch, c)| c.map(|class| crate::train::LabeledPatch { patch, class })));
    }
    create_dir(&a.out)?;
    echo_config(&a.out, cmd, (&net, &cfg))?;
    let (model, log) = train_cnn(&net, &patches, &cfg)?;
    log.write_csv(&a.out.join(TRAIN_LOG))?;
    Checkpoint::from_cnn(&model, &cfg, cfg.epochs).write(&a.out.join(CNN_CHECKPOINT))?;
    let last = log.last().expect("epochs >= 1");
    println!("trained on {} patches: loss {:.4} acc {:.4}", patches.len(), last.loss, last.acc);
    Ok(())
}

fn features_file(dir: &Path, manifest: &CorpusManifest, i: usize) -> PathBuf {
    dir.join(format!("tree_{:06}.features", manifest.trees[i].seed))
}

fn features(cmd: &Command, a: &FeaturesArgs) -> Result<()> {
    let cnn = Checkpoint::read(&a.cnn)?.into_cnn()?;
    let (dir, manifest, picks) = load_corpus(&a.corpus, None)?;
    create_dir(&a.out)?;
    echo_config(&a.out, cmd, &cnn.config)?;
    for &i in &picks {
        let t = prepare(&dir, &manifest, i, cnn.config.side)?;
        let tf = cnn.features_from_patches(&t.patches)?;
        let mut named = NamedTensors::new();
        named.insert("probs".into(), Tensor::new(&[t.len(), 22], (0..t.len()).flat_map(|i| tf.probs.row(i).iter().map(|&p| p as f32)).collect())?);
        match positional_encodings(&t.graph, &tf.probs) {
            Ok(pe) => {
                named.insert("pe".into(), pe);
            }
            Err(e) => eprintln!("tree {}: no positional encodings ({e})", manifest.trees[i].seed),
        }
        named.insert("features".into(), tf.features);
        write_checkpoint(&features_file(&a.out, &manifest, i), &named)?;
    }
    println!("wrote features for {} trees", picks.len());
    Ok(())
}

fn train_gnn_cmd(cmd: &Command, a: &TrainGnnArgs) -> Result<()> {
    let net = a.model.resolve()?;
    let cfg = a.optim.resolve(net.layers())?;
    let (dir, manifest, picks) = load_corpus(&a.corpus, a.trees.as_deref())?;
    let mut data = Vec::with_capacity(picks.len());
    for &i in &picks {
        let g = TreeGraph::read_json(&dir.join(&manifest.trees[i].graph))?;
        let path = features_file(&a.features, &manifest, i);
        let mut named = read_checkpoint(&path)?;
        let features = named.remove("features").ok_or_else(|| Error::format("features file", "no features tensor"))?;
        let pe = if net.uses_pe() {
            Some(named.remove("pe").ok_or_else(|| Error::invalid(format!("{} has no positional encodings", path.display())))?)
        } else {
            None
        };
        let targets = g.labels().iter().map(|l| l.map(Class::index)).collect();
        data.push(GraphSample { features, pe, edges: g.edge_index(), targets });
    }
    create_dir(&a.out)?;
    echo_config(&a.out, cmd, (&net, &cfg))?;
    let (model, log) = train_gnn(&net, &data, &cfg)?;
    log.write_csv(&a.out.join(TRAIN_LOG))?;
    Checkpoint::from_gnn(&model, &cfg, cfg.epochs).write(&a.out.join(GNN_CHECKPOINT))?;
    let last = log.last().expect("epochs >= 1");
    println!("trained {} on {} trees: loss {:.4} acc {:.4}", net.arch, data.len(), last.loss, last.acc);
    Ok(())
}

/// Assignment document written by `predict`.
#[derive(Debug, Serialize)]
pub struct AssignmentJson {
    /// Class name → assigned branch ID (null when unassigned).
    pub labels: BTreeMap<String, Option<u32>>,
    /// Branch ID → label, `other` for unassigned branches.
    pub branches: BTreeMap<u32, String>,
}

impl AssignmentJson {
    pub fn new(g: &TreeGraph, a: &LabelAssignment) -> Self {
        let ids = g.node_ids();
        let labels = Class::segmental().map(|c| (c.name().to_owned(), a.get(c).map(|i| ids[i]))).collect();
        let branches = a.node_labels(g.len()).iter().zip(ids).map(|(c, &id)| (id, c.name().to_owned())).collect();
        AssignmentJson { labels, branches }
    }
}

fn predict(a: &PredictArgs) -> Result<()> {
    let cnn = Checkpoint::read(&a.cnn)?.into_cnn()?;
    let gnn = a.gnn.as_deref().map(|p| Checkpoint::read(p)?.into_gnn()).transpose()?;
    if let Some(g) = &gnn {
        if g.config.input_dim != cnn.config.feature_dim {
            return Err(Error::shape(format!("graph network takes {} features, CNN emits {}", g.config.input_dim, cnn.config.feature_dim)));
        }
    }
    let volume = read_label_map(&a.volume)?;
    let graph = match &a.graph {
        Some(p) => TreeGraph::read_json(p)?,
        None => build_branch_graph(&volume)?,
    };
    let TreePrediction { assignment, .. } = Labeler { cnn, gnn }.label(&volume, &graph)?;
    write_json(&a.out, &AssignmentJson::new(&graph, &assignment))?;
    println!("labeled {} of 18 segmental classes", Class::segmental().filter(|&c| assignment.get(c).is_some()).count());
    Ok(())
}

fn eval(cmd: &Command, a: &EvalArgs) -> Result<()> {
    let cnn = cnn_preset(a.patch_side)?;
    let (dir, manifest, picks) = load_corpus(&a.corpus, None)?;
    let mut models = Vec::new();
    for &arch in &a.archs {
        let m = ModelArgs { arch, layers: a.layers, skip: false, no_skip: false, no_pe: false, nlpe: false };
        models.push(NamedModel { name: arch.name().to_owned(), config: GnnConfig { input_dim: cnn.feature_dim, ..m.resolve()? } });
    }
    let gnn_base = TrainConfig::for_depth(a.layers);
    let cfg = CvConfig {
        cnn_train: TrainConfig { lr: a.cnn_lr, epochs: a.cnn_epochs, batch: a.batch, ..TrainConfig::default() },
        gnn_train: TrainConfig { lr: a.lr.unwrap_or(gnn_base.lr), epochs: a.epochs.unwrap_or(gnn_base.epochs), ..gnn_base },
        cnn,
        models,
        seeds: a.seeds.clone(),
        folds: a.folds,
    };
    cfg.validate(picks.len())?;
    create_dir(&a.out)?;
    echo_config(&a.out, cmd, &cfg)?;
    let trees = picks.iter().map(|&i| prepare(&dir, &manifest, i, cfg.cnn.side)).collect::<Result<Vec<_>>>()?;
    let report = cross_validate(&trees, &cfg, |s| eprintln!("{s}"))?;
    write_json(&a.out.join(METRICS), &report)?;
    let table = report.table();
    std::fs::write(a.out.join("table.txt"), &table).map_err(|e| Error::io(a.out.join("table.txt"), e))?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct MacsJson {
    cnn_per_branch: u64,
    cnn_per_tree: u64,
    gnn_per_tree: u64,
    total_per_tree: u64,
    cnn_params: usize,
    gnn_params: usize,
    components: BTreeMap<String, u64>,
}

fn macs(a: &MacsArgs) -> Result<()> {
    let cnn = cnn_preset(a.patch_side)?;
    let gnn = GnnConfig { input_dim: cnn.feature_dim, ..a.model.resolve()? };
    if a.nodes == 0 {
        return Err(Error::invalid("--nodes must be at least 1"));
    }
    // a tree of n branches has n - 1 undirected edges
    let edges = a.nodes + 2 * (a.nodes - 1);
    let c = count_macs(&cnn.mac_layers());
    let g = count_macs(&gnn.mac_layers(a.nodes, edges));
    let components = c.components.iter().map(|(k, v)| (format!("cnn.{k}"), *v)).chain(g.components.iter().map(|(k, v)| (format!("gnn.{k}"), *v))).collect();
    let doc = MacsJson {
        cnn_per_branch: c.total,
        cnn_per_tree: c.total * a.nodes as u64,
        gnn_per_tree: g.total,
        total_per_tree: c.total * a.nodes as u64 + g.total,
        cnn_params: cnn.param_count(),
        gnn_params: gnn.param_count(),
        components,
    };
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn export(cmd: &Command, a: &ExportArgs) -> Result<()> {
    let cnn = Checkpoint::read(&a.cnn)?.into_cnn()?;
    let (dir, manifest, picks) = load_corpus(&a.corpus, None)?;
    create_dir(&a.out)?;
    echo_config(&a.out, cmd, &cnn.config)?;
    for &i in &picks {
        let t = prepare(&dir, &manifest, i, cnn.config.side)?;
        let tf = cnn.features_from_patches(&t.patches)?;
        let path = a.out.join(format!("tree_{:06}.csv", manifest.trees[i].seed));
        export_features_csv(&path, t.graph.node_ids(), t.graph.labels(), &tf.features)?;
    }
    println!("exported {} trees", picks.len());
    Ok(())
}
