use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graphcore::TreeGraph;
use crate::tensor::gradcheck::check_gradients;

type M = Vec<Vec<f64>>;

fn random_tree(n: usize, seed: u64) -> TreeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<u32> = (1..=n as u32).collect();
    let edges: Vec<(u32, u32)> = (1..n).map(|i| (rng.gen_range(0..i) as u32 + 1, i as u32 + 1)).collect();
    TreeGraph::from_edges(&ids, &edges).unwrap()
}

fn path(n: usize) -> TreeGraph {
    let ids: Vec<u32> = (1..=n as u32).collect();
    let edges: Vec<(u32, u32)> = (1..n as u32).map(|i| (i, i + 1)).collect();
    TreeGraph::from_edges(&ids, &edges).unwrap()
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-1.0..1.0))
}

fn small(arch: Arch, widths: &[usize], input_dim: usize) -> GnnConfig {
    let mut c = GnnConfig::new(arch, 4).unwrap();
    c.widths = widths.to_vec();
    c.input_dim = input_dim;
    c
}

fn params(cfg: &GnnConfig, seed: u64) -> ParamSet<f64> {
    init_params(cfg.param_specs(), seed).cast()
}

// dense oracles over the adjacency lists

fn rows(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &M, w: &Tensor<f64>) -> M {
    let (k, m) = (w.rows(), w.cols());
    a.iter()
        .map(|r| {
            assert_eq!(r.len(), k);
            (0..m).map(|j| (0..k).map(|i| r[i] * w.data()[i * m + j]).sum()).collect()
        })
        .collect()
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

fn elu_m(a: M) -> M {
    a.into_iter().map(|r| r.into_iter().map(elu).collect()).collect()
}

fn add_m(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn cat_m(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

fn hood(g: &TreeGraph, b: usize) -> Vec<usize> {
    let mut n = vec![b];
    n.extend_from_slice(g.neighbors(b));
    n
}

/// Attention layer straight from its formula; also returns α per node
/// over `hood(b)`.
fn dense_gat(h: &M, g: &TreeGraph, w_a: &Tensor<f64>, w_g: &Tensor<f64>, w_r: &Tensor<f64>) -> (M, M) {
    let a = mm(h, w_a);
    let gg = mm(h, w_g);
    let d = w_a.cols();
    let r = w_r.data();
    let mut out = Vec::new();
    let mut alphas = Vec::new();
    for b in 0..h.len() {
        let nb = hood(g, b);
        let e: Vec<f64> = nb
            .iter()
            .map(|&j| elu((0..d).map(|c| r[c] * gg[b][c] + r[d + c] * gg[j][c]).sum()))
            .collect();
        let z: f64 = e.iter().map(|v| v.exp()).sum();
        let alpha: Vec<f64> = e.iter().map(|v| v.exp() / z).collect();
        out.push((0..d).map(|c| elu(nb.iter().zip(&alpha).map(|(&j, al)| al * a[j][c]).sum())).collect());
        alphas.push(alpha);
    }
    (out, alphas)
}

fn dense_gcn(h: &M, g: &TreeGraph, w: &Tensor<f64>) -> M {
    let hw = mm(h, w);
    let deg: Vec<f64> = (0..h.len()).map(|b| hood(g, b).len() as f64).collect();
    (0..h.len())
        .map(|b| {
            (0..w.cols())
                .map(|c| elu(hood(g, b).iter().map(|&j| hw[j][c] / (deg[b] * deg[j]).sqrt()).sum()))
                .collect()
        })
        .collect()
}

fn dense_gin(h: &M, g: &TreeGraph, w: &Tensor<f64>) -> M {
    let x: M = (0..h.len())
        .map(|b| {
            let nb = hood(g, b);
            (0..h[b].len()).map(|c| h[b][c] + nb.iter().map(|&j| h[j][c]).sum::<f64>() / nb.len() as f64).collect()
        })
        .collect();
    elu_m(mm(&x, w))
}

fn dense_sage(h: &M, g: &TreeGraph, w_pool: &Tensor<f64>, w: &Tensor<f64>) -> M {
    let pooled = elu_m(mm(h, w_pool));
    let mx: M = (0..h.len())
        .map(|b| {
            (0..pooled[0].len())
                .map(|c| hood(g, b).iter().map(|&j| pooled[j][c]).fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect();
    elu_m(mm(&cat_m(h, &mx), w))
}

fn softmax_m(a: &M) -> M {
    a.iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - mx).exp()).sum();
            r.iter().map(|v| (v - mx).exp() / z).collect()
        })
        .collect()
}

fn head(h: &M, p: &ParamSet<f64>) -> M {
    let b = p.get("head.bias").unwrap().data();
    let logits: M = mm(h, p.get("head.weight").unwrap())
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    softmax_m(&logits)
}

fn max_diff(probs: &ClassProbMatrix, want: &M) -> f64 {
    want.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().zip(probs.row(i)).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

fn layer_out(kind: LayerKind, h: &Tensor<f64>, g: &TreeGraph, w: &[Tensor<f64>]) -> (Tensor<f64>, Option<Tensor<f64>>) {
    let mut t = Tape::new();
    let hv = t.constant(h.clone());
    let wv: Vec<Var> = w.iter().map(|x| t.constant(x.clone())).collect();
    let e = g.edge_index();
    let (out, alpha) = match kind {
        LayerKind::Gat => {
            let (o, a) = gat_layer(&mut t, hv, &e, wv[0], wv[1], wv[2]).unwrap();
            (o, Some(a))
        }
        LayerKind::Gcn => (gcn_layer(&mut t, hv, &e, wv[0]).unwrap(), None),
        LayerKind::Gin => (gin_layer(&mut t, hv, &e, wv[0]).unwrap(), None),
        LayerKind::Sage => (sage_layer(&mut t, hv, &e, wv[0], wv[1]).unwrap(), None),
    };
    (t.value(out).clone(), alpha.map(|a| t.value(a).clone()))
}

fn diff_m(t: &Tensor<f64>, want: &M) -> f64 {
    want.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().zip(t.row(i)).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn isolated_node_attends_to_itself() {
    let g = TreeGraph::from_edges(&[1], &[]).unwrap();
    let h = random_matrix(1, 4, 1);
    let w = [random_matrix(4, 3, 2), random_matrix(4, 3, 3), random_matrix(6, 1, 4)];
    let (out, alpha) = layer_out(LayerKind::Gat, &h, &g, &w);
    assert_eq!(alpha.unwrap().data(), &[1.0]);
    let want = elu_m(mm(&rows(&h), &w[0]));
    assert!(diff_m(&out, &want) < 1e-15);
}

#[test]
fn identical_pair_splits_attention_evenly() {
    let g = path(2);
    let h = Tensor::from_rows(&[vec![0.3, -0.7, 1.1], vec![0.3, -0.7, 1.1]]).unwrap();
    let w = [random_matrix(3, 2, 5), random_matrix(3, 2, 6), random_matrix(4, 1, 7)];
    let alpha = layer_out(LayerKind::Gat, &h, &g, &w).1.unwrap();
    assert!(alpha.data().iter().all(|&a| (a - 0.5).abs() < 1e-15), "{:?}", alpha.data());
}

#[test]
fn gat_layer_matches_dense_formula() {
    // 4-node star plus random trees
    let star = TreeGraph::from_edges(&[1, 2, 3, 4], &[(1, 2), (1, 3), (1, 4)]).unwrap();
    for (k, g) in [star, random_tree(7, 3), random_tree(12, 4)].into_iter().enumerate() {
        let k = k as u64;
        let h = random_matrix(g.len(), 5, 10 + k);
        let w = [random_matrix(5, 4, 20 + k), random_matrix(5, 4, 30 + k), random_matrix(8, 1, 40 + k)];
        let (out, alpha) = layer_out(LayerKind::Gat, &h, &g, &w);
        let (want, want_alpha) = dense_gat(&rows(&h), &g, &w[0], &w[1], &w[2]);
        assert!(diff_m(&out, &want) < 1e-12);
        // edge order is (dst, src) sorted; map each edge back to hood position
        let e = g.edge_index();
        let alpha = alpha.unwrap();
        for (i, (&s, &t)) in e.src.iter().zip(e.dst.iter()).enumerate() {
            let pos = hood(&g, t).iter().position(|&j| j == s).unwrap();
            assert!((alpha.data()[i] - want_alpha[t][pos]).abs() < 1e-12);
        }
    }
}

#[test]
fn ablation_layers_match_dense_formulas() {
    for seed in 0..4 {
        let g = random_tree(5, 50 + seed);
        let h = random_matrix(5, 6, 60 + seed);
        let w = random_matrix(6, 3, 70 + seed);
        let d = diff_m(&layer_out(LayerKind::Gcn, &h, &g, &[w.clone()]).0, &dense_gcn(&rows(&h), &g, &w));
        assert!(d < 1e-12, "gcn {d}");
        let d = diff_m(&layer_out(LayerKind::Gin, &h, &g, &[w.clone()]).0, &dense_gin(&rows(&h), &g, &w));
        assert!(d < 1e-12, "gin {d}");
        let (wp, ws) = (random_matrix(6, 6, 80 + seed), random_matrix(12, 3, 90 + seed));
        let got = layer_out(LayerKind::Sage, &h, &g, &[wp.clone(), ws.clone()]).0;
        let d = diff_m(&got, &dense_sage(&rows(&h), &g, &wp, &ws));
        assert!(d < 1e-12, "sage {d}");
    }
}

#[test]
fn ablation_layer_degenerate_cases() {
    let single = TreeGraph::from_edges(&[1], &[]).unwrap();
    let h = random_matrix(1, 4, 1);
    let w = random_matrix(4, 3, 2);
    let want = elu_m(mm(&rows(&h), &w));
    assert!(diff_m(&layer_out(LayerKind::Gcn, &h, &single, &[w.clone()]).0, &want) < 1e-15);

    // equal features: GIN sees 2·h_b
    let g = random_tree(4, 9);
    let row = vec![0.4, -0.2, 0.9, 0.1];
    let h = Tensor::from_rows(&vec![row.clone(); 4]).unwrap();
    let twice: M = vec![row.iter().map(|v| 2.0 * v).collect(); 4];
    assert!(diff_m(&layer_out(LayerKind::Gin, &h, &g, &[w.clone()]).0, &elu_m(mm(&twice, &w))) < 1e-15);
}

#[test]
fn layers_reject_missing_self_loops_and_bad_shapes() {
    let g = path(3);
    let full = g.edge_index();
    let keep: Vec<usize> = (0..full.len()).filter(|&i| full.src[i] != full.dst[i] || full.src[i] != 1).collect();
    let broken = EdgeIndex {
        n: 3,
        src: keep.iter().map(|&i| full.src[i]).collect(),
        dst: keep.iter().map(|&i| full.dst[i]).collect(),
    };
    let mut t = Tape::<f64>::new();
    let h = t.constant(random_matrix(3, 2, 0));
    let w = t.constant(random_matrix(2, 2, 1));
    let r = t.constant(random_matrix(4, 1, 2));
    assert!(gat_layer(&mut t, h, &broken, w, w, r).is_err());
    assert!(gcn_layer(&mut t, h, &broken, w).is_err());
    let wrong = t.constant(random_matrix(4, 2, 3));
    assert!(gat_layer(&mut t, wrong, &full, w, w, r).is_err());
}

#[test]
fn default_widths_and_input_shapes() {
    let s = GnnConfig::new(Arch::Spgnn, 4).unwrap();
    let specs = s.param_specs();
    let shape = |n: &str| specs.iter().find(|p| p.name == n).unwrap().shape.clone();
    assert_eq!(shape("layer1.hp.w_a"), vec![1024 + 39, 256]);
    assert_eq!(shape("layer1.hp.skip"), vec![1063, 256]);
    assert_eq!(shape("layer1.p.w_a"), vec![39, 256]);
    let hp: Vec<usize> = (1..=4).map(|l| shape(&format!("layer{l}.hp.w_a"))[1]).collect();
    let p: Vec<usize> = (1..=3).map(|l| shape(&format!("layer{l}.p.w_a"))[1]).collect();
    assert_eq!(hp, [256, 128, 64, 1024]);
    assert_eq!(p, [256, 128, 64]);
    assert_eq!(shape("layer4.hp.w_a"), vec![64 + 64, 1024]);
    assert!(!specs.iter().any(|p| p.name.starts_with("layer4.p")));
    assert_eq!(shape("head.weight"), vec![1024, 22]);

    let frozen = GnnConfig { pe: PeMode::Frozen, ..s.clone() };
    let specs = frozen.param_specs();
    assert!(specs.iter().all(|p| !p.name.contains(".p.")));
    assert_eq!(specs.iter().find(|p| p.name == "layer3.hp.w_a").unwrap().shape, vec![128 + 39, 64]);

    let gats = GnnConfig::new(Arch::Gats, 4).unwrap();
    assert_eq!(gats.param_specs().len(), 4 * 4 + 2);
    let gat = GnnConfig::new(Arch::Gat, 4).unwrap();
    assert!(!gat.skip && gat.param_specs().len() == 4 * 3 + 2);
    assert_eq!(GnnConfig::new(Arch::Gcn, 7).unwrap().widths, [256, 128, 64, 64, 64, 64, 1024]);
    assert_eq!(GnnConfig::new(Arch::Sage, 2).unwrap().widths, [256, 1024]);
    assert!(GnnConfig::new(Arch::Gin, 3).is_err());
}

#[test]
fn config_contradictions_rejected() {
    assert!(GnnConfig { pe: PeMode::None, ..GnnConfig::new(Arch::Spgnn, 4).unwrap() }.validate().is_err());
    assert!(GnnConfig { pe: PeMode::Learnable, ..GnnConfig::new(Arch::Gats, 4).unwrap() }.validate().is_err());
    assert_eq!("sage".parse::<Arch>().unwrap(), Arch::Sage);
    assert!("transformer".parse::<Arch>().is_err());
    let m = GnnModel::init(GnnConfig::new(Arch::Gat, 2).unwrap(), 0).unwrap();
    assert!(GnnModel::from_params(GnnConfig::new(Arch::Gats, 2).unwrap(), m.params).is_err());
}

#[test]
fn single_node_and_zero_weights() {
    let g = TreeGraph::from_edges(&[4], &[]).unwrap();
    let e = g.edge_index();
    let cfg = GnnConfig::new(Arch::Gats, 4).unwrap();
    let h0 = random_matrix(1, 1024, 3);
    let p = gats_forward(&cfg, &params(&cfg, 1), &h0, &e).unwrap();
    assert_eq!(p.rows(), 1);
    assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let g = random_tree(6, 2);
    let e = g.edge_index();
    let h0 = random_matrix(6, 1024, 4);
    let pe = random_matrix(6, PE_DIM, 5);
    for arch in Arch::ALL {
        let cfg = GnnConfig::new(arch, 4).unwrap();
        let zero = ParamSet::<f64>::zeros(cfg.param_specs());
        let probs = gnn_probs(&cfg, &zero, &h0, cfg.uses_pe().then_some(&pe), &e).unwrap();
        for i in 0..6 {
            assert!(probs.row(i).iter().all(|&v| (v - 1.0 / 22.0).abs() < 1e-15), "{arch}");
        }
    }
}

#[test]
fn gats_matches_layer_by_layer_composition() {
    let g = path(3);
    let cfg = small(Arch::Gats, &[5, 4, 3, 6], 7);
    let p = params(&cfg, 8);
    let h0 = random_matrix(3, 7, 9);
    let mut h = rows(&h0);
    for l in 1..=4 {
        let w = |s: &str| p.get(&format!("layer{l}.h.{s}")).unwrap();
        let (gat, _) = dense_gat(&h, &g, w("w_a"), w("w_g"), w("w_r"));
        h = elu_m(add_m(&mm(&h, w("skip")), &gat));
    }
    let got = gats_forward(&cfg, &p, &h0, &g.edge_index()).unwrap();
    assert!(max_diff(&got, &head(&h, &p)) < 1e-12);

    // full width on the 3-node path
    let cfg = GnnConfig::new(Arch::Gats, 4).unwrap();
    let p = params(&cfg, 10);
    let h0 = random_matrix(3, 1024, 11);
    let mut h = rows(&h0);
    for l in 1..=4 {
        let w = |s: &str| p.get(&format!("layer{l}.h.{s}")).unwrap();
        let (gat, _) = dense_gat(&h, &g, w("w_a"), w("w_g"), w("w_r"));
        h = elu_m(add_m(&mm(&h, w("skip")), &gat));
    }
    let got = gats_forward(&cfg, &p, &h0, &g.edge_index()).unwrap();
    assert!(max_diff(&got, &head(&h, &p)) < 1e-6);
}

/// Two-stream update composed by hand from the attention oracle.
fn dense_spgnn(cfg: &GnnConfig, p: &ParamSet<f64>, h0: &Tensor<f64>, p0: &Tensor<f64>, g: &TreeGraph) -> M {
    let (mut h, mut pe) = (rows(h0), rows(p0));
    let raw = pe.clone();
    let layers = cfg.layers();
    for l in 1..=layers {
        let x = cat_m(&h, if cfg.pe == PeMode::Frozen { &raw } else { &pe });
        let w = |s: &str| p.get(&format!("layer{l}.hp.{s}")).unwrap();
        let (gat, _) = dense_gat(&x, g, w("w_a"), w("w_g"), w("w_r"));
        let h_next = if cfg.skip { elu_m(add_m(&mm(&x, w("skip")), &gat)) } else { gat };
        if cfg.pe == PeMode::Learnable && l < layers {
            let w = |s: &str| p.get(&format!("layer{l}.p.{s}")).unwrap();
            let (gat, _) = dense_gat(&pe, g, w("w_a"), w("w_g"), w("w_r"));
            pe = if cfg.skip { elu_m(add_m(&mm(&pe, w("skip")), &gat)) } else { gat };
        }
        h = h_next;
    }
    head(&h, p)
}

#[test]
fn spgnn_matches_two_stream_composition() {
    let star = TreeGraph::from_edges(&[1, 2, 3, 4], &[(1, 2), (2, 3), (2, 4)]).unwrap();
    let h0 = random_matrix(4, 6, 1);
    let p0 = random_matrix(4, PE_DIM, 2).cast::<f64>();
    let p0 = Tensor::new(p0.shape(), p0.data().iter().map(|v| v.abs()).collect()).unwrap();
    for pe in [PeMode::Learnable, PeMode::Frozen] {
        for skip in [true, false] {
            let cfg = GnnConfig { pe, skip, ..small(Arch::Spgnn, &[5, 4, 3, 6], 6) };
            let p = params(&cfg, 3);
            let got = spgnn_forward(&cfg, &p, &h0, &p0, &star.edge_index()).unwrap();
            assert!(max_diff(&got, &dense_spgnn(&cfg, &p, &h0, &p0, &star)) < 1e-12, "{pe:?} {skip}");
        }
    }
    let cfg = GnnConfig::new(Arch::Spgnn, 4).unwrap();
    let p = params(&cfg, 4);
    let h0 = random_matrix(4, 1024, 5);
    let got = spgnn_forward(&cfg, &p, &h0, &p0, &star.edge_index()).unwrap();
    assert!(max_diff(&got, &dense_spgnn(&cfg, &p, &h0, &p0, &star)) < 1e-6);

    let two = path(2);
    let got = spgnn_forward(&cfg, &p, &random_matrix(2, 1024, 6), &random_matrix(2, PE_DIM, 7), &two.edge_index()).unwrap();
    assert_eq!(got.rows(), 2);
    for i in 0..2 {
        assert!((got.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(spgnn_forward(&cfg, &p, &random_matrix(2, 1024, 6), &random_matrix(2, 38, 7), &two.edge_index()).is_err());
}

#[test]
fn spgnn_with_silent_positional_stream_is_widened_gats() {
    let g = random_tree(9, 11);
    let e = g.edge_index();
    let widths = [6, 5, 4, 7];
    let gats = small(Arch::Gats, &widths, 8);
    let spg = small(Arch::Spgnn, &widths, 8);
    let gp = params(&gats, 12);
    let mut sp = ParamSet::<f64>::zeros(spg.param_specs());
    for (spec, value) in gp.specs().iter().zip(gp.values()) {
        // same leading rows; rows over the positional block stay zero
        let dst = sp.get_mut(&spec.name.replace(".h.", ".hp.")).unwrap();
        assert_eq!(dst.cols(), value.cols());
        dst.data_mut()[..value.len()].copy_from_slice(value.data());
    }
    let h0 = random_matrix(9, 8, 13);
    let a = gats_forward(&gats, &gp, &h0, &e).unwrap();
    let b = spgnn_forward(&spg, &sp, &h0, &Tensor::zeros(&[9, PE_DIM]), &e).unwrap();
    assert_eq!(a, b);
}

#[test]
fn attention_rows_sum_to_one_at_every_layer() {
    for seed in 0..10 {
        let g = random_tree(3 + seed as usize * 4, seed);
        let e = g.edge_index();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = GnnConfig::new(Arch::Spgnn, 4).unwrap();
        let p = init_params(cfg.param_specs(), seed).cast::<f64>();
        let mut t = Tape::new();
        let theta = p.attach_frozen(&mut t);
        let h = t.constant(random_matrix(g.len(), 1024, seed + 100));
        let pe = t.constant(Tensor::from_fn(&[g.len(), PE_DIM], |_| rng.gen_range(0.0..1.0)));
        let out = gnn_forward_tape(&mut t, &cfg, &theta, h, Some(pe), &e).unwrap();
        assert_eq!(out.attention.len(), 7);
        for &a in &out.attention {
            let mut sums = vec![0.0; g.len()];
            for (i, &d) in e.dst.iter().enumerate() {
                sums[d] += t.value(a).data()[i];
            }
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6), "{sums:?}");
        }
    }
}

fn permuted_graph(g: &TreeGraph, perm: &[usize]) -> TreeGraph {
    // node i becomes the node with the perm[i]-th smallest id
    let ids: Vec<u32> = (0..g.len()).map(|i| perm[i] as u32 + 1).collect();
    let edges: Vec<(u32, u32)> = g
        .edges()
        .iter()
        .map(|&(a, b)| (ids[g.index_of(a).unwrap()], ids[g.index_of(b).unwrap()]))
        .collect();
    TreeGraph::from_edges(&(1..=g.len() as u32).collect::<Vec<_>>(), &edges).unwrap()
}

fn permute_rows<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let d = t.cols();
    let mut out = vec![T::zero(); t.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p * d..(p + 1) * d].copy_from_slice(t.row(i));
    }
    Tensor::new(t.shape(), out).unwrap()
}

#[test]
fn every_architecture_is_permutation_equivariant() {
    use rand::seq::SliceRandom;
    let g = random_tree(11, 21);
    let mut perm: Vec<usize> = (0..11).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(22));
    let gp = permuted_graph(&g, &perm);
    let h0 = random_matrix(11, 1024, 23).cast::<f32>();
    let p0 = Tensor::from_fn(&[11, PE_DIM], |i| ((i * 7919) % 101) as f32 / 100.0);
    for arch in Arch::ALL {
        for layers in [2, 4] {
            let cfg = GnnConfig::new(arch, layers).unwrap();
            let params = init_params(cfg.param_specs(), 24);
            let run = |g: &TreeGraph, h: &Tensor<f32>, p: &Tensor<f32>| {
                let mut t = Tape::new();
                let theta = params.attach_frozen(&mut t);
                let hv = t.constant(h.clone());
                let pv = cfg.uses_pe().then(|| t.constant(p.clone()));
                let out = gnn_forward_tape(&mut t, &cfg, &theta, hv, pv, &g.edge_index()).unwrap();
                (t.value(out.features).clone(), t.value(out.logits).clone())
            };
            let (f, l) = run(&g, &h0, &p0);
            let (fp, lp) = run(&gp, &permute_rows(&h0, &perm), &permute_rows(&p0, &perm));
            assert_eq!(permute_rows(&f, &perm), fp, "{arch} x{layers}");
            assert_eq!(permute_rows(&l, &perm), lp, "{arch} x{layers}");
        }
    }
}

#[test]
fn forward_rejects_mismatched_inputs() {
    let g = path(3);
    let e = g.edge_index();
    let cfg = GnnConfig::new(Arch::Spgnn, 2).unwrap();
    let m = GnnModel::init(cfg, 1).unwrap();
    let h = Tensor::<f32>::zeros(&[3, 1024]);
    assert!(m.predict(&h, None, &e).is_err());
    assert!(m.predict(&Tensor::zeros(&[3, 1000]), Some(&Tensor::zeros(&[3, PE_DIM])), &e).is_err());
    assert!(m.predict(&h, Some(&Tensor::zeros(&[3, PE_DIM])), &e).is_ok());
    let gat = GnnModel::init(GnnConfig::new(Arch::Gat, 2).unwrap(), 1).unwrap();
    assert!(gat.predict(&h, Some(&Tensor::zeros(&[3, PE_DIM])), &e).is_err());
}

#[test]
fn mac_layers_cover_every_weight() {
    for arch in Arch::ALL {
        let cfg = GnnConfig::new(arch, 4).unwrap();
        let r = crate::labeling::count_macs(&cfg.mac_layers(10, 28));
        let weights: u64 = cfg
            .param_specs()
            .iter()
            .filter(|s| s.fan_in > 0 && !s.name.ends_with("w_r"))
            .map(|s| s.numel() as u64 * 10)
            .sum();
        let extra: u64 = r.components.iter().filter(|c| c.0.ends_with("attention") || c.0.ends_with("aggregate")).map(|c| c.1).sum();
        assert_eq!(r.total, weights + extra, "{arch}");
    }
}

fn gradcheck_arch(cfg: &GnnConfig, n: usize, seed: u64) -> crate::tensor::gradcheck::GradCheck {
    let g = random_tree(n, seed);
    let e = g.edge_index();
    let theta = init_params(cfg.param_specs(), seed).cast::<f64>().values().to_vec();
    // modest inputs keep every log-probability above the loss clamp, where
    // the loss is smooth
    let h0 = random_matrix(n, cfg.input_dim, seed + 1);
    let h0 = Tensor::new(h0.shape(), h0.data().iter().map(|v| 0.25 * v).collect()).unwrap();
    let p0 = Tensor::from_fn(&[n, PE_DIM], |i| (i % 13) as f64 / 12.0);
    let targets: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % NUM_CLASSES).collect();
    let w: Vec<f64> = (0..NUM_CLASSES).map(|c| 0.5 + (c % 4) as f64 * 0.25).collect();
    check_gradients(&theta, 120, seed, |t, v| {
        let h = t.constant(h0.clone());
        let p = cfg.uses_pe().then(|| t.constant(p0.clone()));
        let out = gnn_forward_tape(t, cfg, v, h, p, &e)?;
        t.weighted_cross_entropy(out.logits, &targets, &w)
    })
    .unwrap()
}

#[test]
fn small_networks_gradients_match_finite_differences() {
    for arch in Arch::ALL {
        for skip in [true, false] {
            let cfg = GnnConfig { skip, ..small(arch, &[6, 5, 4, 8], 7) };
            let r = gradcheck_arch(&cfg, 6, 31);
            assert!(r.checked >= 100 && r.max_rel_err < 1e-4, "{arch} skip={skip}: {r:?}");
        }
    }
    let frozen = GnnConfig { pe: PeMode::Frozen, ..small(Arch::Spgnn, &[6, 5, 4, 8], 7) };
    let r = gradcheck_arch(&frozen, 6, 32);
    assert!(r.checked >= 100 && r.max_rel_err < 1e-4, "nlpe: {r:?}");
}

