use std::collections::BTreeSet;

use super::*;
use crate::volume::read_label_map;

#[test]
fn splitmix_reference_outputs() {
    let mut r = SplitMix64::new(1234567);
    let got: Vec<u64> = (0..5).map(|_| r.next_u64()).collect();
    assert_eq!(
        got,
        [6457827717110365317, 3203168211198807973, 9817491932198370423, 4593380528125082431, 16408922859458223821]
    );
    let mut r = SplitMix64::new(3);
    for _ in 0..1000 {
        let x = r.next_f64();
        assert!((0.0..1.0).contains(&x));
        assert!(r.below(7) < 7);
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = SyntheticTreeSpec::with_seed(42);
    let a = generate_tree(&spec).unwrap();
    let b = generate_tree(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_tree(&SyntheticTreeSpec::with_seed(43)).unwrap();
    assert_ne!(a.nodes.iter().map(|n| n.geometry.clone()).collect::<Vec<_>>(), c.nodes.iter().map(|n| n.geometry.clone()).collect::<Vec<_>>());
}

#[test]
fn anatomy_invariants_hold() {
    for seed in 0..100 {
        let spec = SyntheticTreeSpec { seed, missing_prob: 0.3, ..Default::default() };
        let t = generate_tree(&spec).unwrap();
        let classes: Vec<Class> = t.nodes.iter().map(|n| n.class).collect();
        for c in [Class::TRACHEA, Class::LEFT_MAIN, Class::RIGHT_MAIN] {
            assert_eq!(classes.iter().filter(|&&x| x == c).count(), 1);
        }
        assert!(t.segmentals_present() >= 14);
        assert_eq!(t.nodes[0].class, Class::TRACHEA);
        assert!(t.topology().is_connected());
        assert!(t.nodes.iter().all(|n| n.children.len() <= 2));
        assert!(t.nodes.iter().all(|n| n.level <= spec.depth));
    }
    for seed in 0..30 {
        let t = generate_tree(&SyntheticTreeSpec { seed, missing_prob: 0.0, ..Default::default() }).unwrap();
        assert_eq!(t.segmentals_present(), 18);
    }
    let leaves = generate_tree(&SyntheticTreeSpec { seed: 1, depth: 4, missing_prob: 0.0, ..Default::default() }).unwrap();
    assert_eq!(leaves.nodes.len(), 35);
    assert!(leaves.nodes.iter().filter(|n| n.class.is_segmental()).all(|n| n.children.is_empty()));
}

#[test]
fn missing_rate_tracks_probability() {
    for p in [0.1, 0.2] {
        let seeds = 1000;
        let mut present = 0;
        for seed in 0..seeds {
            let t = generate_tree(&SyntheticTreeSpec { seed, missing_prob: p, depth: 4, ..Default::default() }).unwrap();
            present += t.segmentals_present();
        }
        let trials = (seeds * 18) as f64;
        let rate = present as f64 / trials;
        let sigma = (p * (1.0 - p) / trials).sqrt();
        assert!((rate - (1.0 - p)).abs() < 3.0 * sigma, "p={p}: rate {rate}");
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let base = SyntheticTreeSpec::default();
    for bad in [
        SyntheticTreeSpec { depth: 3, ..base.clone() },
        SyntheticTreeSpec { missing_prob: 0.31, ..base.clone() },
        SyntheticTreeSpec { length_jitter: -0.1, ..base.clone() },
        SyntheticTreeSpec { dims: [4, 128, 128], ..base.clone() },
        SyntheticTreeSpec { spacing: [0.0, 1.0, 1.0], ..base.clone() },
    ] {
        assert!(generate_tree(&bad).is_err());
    }
}

fn single_segment() -> SyntheticTree {
    let geometry = BranchGeometry { start: [5.0, 5.0, 9.0], dir: [0.0, 0.0, -1.0], length: 6.0, radius: 1.2, t0: 0.0, end_radius: 1.2 };
    SyntheticTree {
        spec: SyntheticTreeSpec::default(),
        nodes: vec![SynthNode { id: 1, parent: None, children: vec![], class: Class::TRACHEA, level: 1, geometry }],
    }
}

#[test]
fn single_segment_is_one_component() {
    let v = rasterize_tree(&single_segment(), [10, 10, 12], [1.0; 3]).unwrap();
    let g = build_branch_graph(&v).unwrap();
    assert_eq!(g.len(), 1);
    // 26-connected flood fill over the label reaches every voxel
    let cells: BTreeSet<[usize; 3]> = (0..v.len()).filter(|&i| v.voxels()[i] == 1).map(|i| v.coords(i)).collect();
    let mut seen = BTreeSet::new();
    let mut stack = vec![*cells.iter().next().unwrap()];
    while let Some(p) = stack.pop() {
        if !seen.insert(p) {
            continue;
        }
        for q in &cells {
            if (0..3).all(|a| p[a].abs_diff(q[a]) <= 1) && !seen.contains(q) {
                stack.push(*q);
            }
        }
    }
    assert_eq!(seen.len(), cells.len());
    assert!(rasterize_tree(&single_segment(), [10, 10, 8], [1.0; 3]).is_err());
}

#[test]
fn rasterized_topology_round_trips() {
    for seed in 0..12 {
        let s = generate_sample(&SyntheticTreeSpec::with_seed(seed)).unwrap();
        assert_eq!(s.graph.edges(), s.tree.edges().as_slice(), "seed {seed}");
        for (i, id) in s.graph.node_ids().iter().enumerate() {
            assert_eq!(s.volume.get(s.graph.centers()[i]), *id);
            assert_eq!(s.graph.labels()[i], s.tree.class_of(*id));
        }
    }
}

#[test]
fn relabeling_permutes_voxels() {
    let spec = SyntheticTreeSpec { seed: 5, depth: 4, ..Default::default() };
    let t = generate_tree(&spec).unwrap();
    let n = t.nodes.len() as u32;
    let f = |id: u32| (id * 7) % (n + 1) + 100;
    let a = rasterize_tree(&t, spec.dims, spec.spacing).unwrap();
    let b = rasterize_tree(&t.relabeled(f), spec.dims, spec.spacing).unwrap();
    assert!(a.voxels().iter().zip(b.voxels()).all(|(&x, &y)| if x == 0 { y == 0 } else { y == f(x) }));
}

#[test]
fn corpus_on_disk_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let base = SyntheticTreeSpec { seed: 7, depth: 4, ..Default::default() };
    let m = write_corpus(dir.path(), &base, 2).unwrap();
    assert_eq!(m.trees.len(), 2);
    assert_eq!(read_manifest(dir.path()).unwrap(), m);
    let s = generate_sample(&base).unwrap();
    let v = read_label_map(&dir.path().join(&m.trees[0].mhd)).unwrap();
    assert_eq!(v, s.volume);
    let g = TreeGraph::read_json(&dir.path().join(&m.trees[0].graph)).unwrap();
    assert_eq!(g, s.graph);
    assert_eq!(m.trees[1].seed, 8);
    assert_eq!(m.trees[0].labels[&1], "trachea");
}
