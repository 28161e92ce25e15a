use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::anatomy::{Class, NUM_NAMED};
use crate::error::Error;

fn path(n: u32) -> TreeGraph {
    let ids: Vec<u32> = (1..=n).collect();
    let edges: Vec<_> = (1..n).map(|i| (i, i + 1)).collect();
    TreeGraph::from_edges(&ids, &edges).unwrap()
}

fn star(leaves: u32) -> TreeGraph {
    let ids: Vec<u32> = (1..=leaves + 1).collect();
    let edges: Vec<_> = (2..=leaves + 1).map(|i| (1, i)).collect();
    TreeGraph::from_edges(&ids, &edges).unwrap()
}

/// Random tree with shuffled, gappy branch IDs.
fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> TreeGraph {
    let mut ids: Vec<u32> = (0..n as u32).map(|i| i * 3 + 1).collect();
    ids.shuffle(rng);
    let edges: Vec<_> = (1..n).map(|i| (ids[rng.gen_range(0..i)], ids[i])).collect();
    TreeGraph::from_edges(&ids, &edges).unwrap()
}

fn floyd_warshall(g: &TreeGraph) -> Vec<Vec<u64>> {
    let n = g.len();
    let inf = u64::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in g.edges() {
        let (i, j) = (g.index_of(a).unwrap(), g.index_of(b).unwrap());
        d[i][j] = 1;
        d[j][i] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

#[test]
fn bfs_on_path_and_identity() {
    let g = path(3);
    assert_eq!(bfs_shortest_paths(&g, 0).unwrap(), vec![0, 1, 2]);
    assert_eq!(bfs_shortest_paths(&g, 2).unwrap()[2], 0);
    assert!(bfs_shortest_paths(&g, 3).is_err());
}

#[test]
fn bfs_flags_unreachable_nodes() {
    let g = TreeGraph::from_edges(&[1, 2, 3], &[(1, 2)]).unwrap();
    assert_eq!(bfs_shortest_paths(&g, 0).unwrap(), vec![0, 1, UNREACHABLE]);
    assert!(matches!(graph_diameter(&g), Err(Error::Disconnected { components: 2 })));
}

#[test]
fn diameter_examples() {
    assert_eq!(graph_diameter(&path(4)).unwrap(), 3);
    assert_eq!(graph_diameter(&star(5)).unwrap(), 2);
    assert!(graph_diameter(&path(1)).is_err());
}

#[test]
fn bfs_and_diameter_match_floyd_warshall() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.gen_range(2..=20);
        let g = random_tree(n, &mut rng);
        let fw = floyd_warshall(&g);
        for (s, fw_row) in fw.iter().enumerate() {
            let h = bfs_shortest_paths(&g, s).unwrap();
            assert!(h.iter().zip(fw_row).all(|(&a, &b)| a as u64 == b));
        }
        let diam = fw.iter().flatten().copied().max().unwrap();
        assert_eq!(graph_diameter(&g).unwrap() as u64, diam);
    }
}

#[test]
fn leaves_examples_and_degree_oracle() {
    assert_eq!(find_leaves(&path(3), 0, None).unwrap(), vec![2]);
    assert_eq!(find_leaves(&star(4), 0, None).unwrap(), vec![1, 2, 3, 4]);
    assert!(find_leaves(&path(3), 9, None).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..30 {
        let n = rng.gen_range(2..=20);
        let g = random_tree(n, &mut rng);
        let root = rng.gen_range(0..n);
        let mut degree = vec![0; n];
        for &(a, b) in g.edges() {
            degree[g.index_of(a).unwrap()] += 1;
            degree[g.index_of(b).unwrap()] += 1;
        }
        let expect: Vec<usize> = (0..n).filter(|&i| i != root && degree[i] == 1).collect();
        assert_eq!(find_leaves(&g, root, None).unwrap(), expect);
    }
}

#[test]
fn positional_encoding_examples() {
    let g = path(3);
    let pe = compute_positional_encodings(&g, &AnchorSet::new(vec![0])).unwrap();
    assert_eq!(pe.values(), &[0.0, 0.5, 1.0]);

    let g = star(4);
    let anchors = AnchorSet::new(vec![0, 2, 4]);
    let pe = compute_positional_encodings(&g, &anchors).unwrap();
    for (col, &a) in anchors.nodes().iter().enumerate() {
        assert_eq!(pe.get(a, col), 0.0);
    }
    assert!(compute_positional_encodings(&path(1), &AnchorSet::new(vec![0])).is_err());
}

#[test]
fn positional_encodings_match_oracle_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.gen_range(2..=20);
        let g = random_tree(n, &mut rng);
        let anchors: Vec<usize> = (0..6).map(|_| rng.gen_range(0..n)).collect();
        let pe = compute_positional_encodings(&g, &AnchorSet::new(anchors.clone())).unwrap();
        let fw = floyd_warshall(&g);
        let diam = *fw.iter().flatten().max().unwrap() as f64;
        let mut max_diff: f64 = 0.0;
        for b in 0..n {
            for (i, &a) in anchors.iter().enumerate() {
                let v = pe.get(b, i);
                assert!((0.0..=1.0).contains(&v));
                max_diff = max_diff.max((v - fw[b][a] as f64 / diam).abs());
            }
        }
        assert_eq!(max_diff, 0.0);
    }
}

#[test]
fn positional_encodings_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let n = rng.gen_range(3..=15);
        let g = random_tree(n, &mut rng);
        // relabel ids with a random bijection, keep topology
        let mut new_ids: Vec<u32> = (0..n as u32).map(|i| 1000 + 7 * i).collect();
        new_ids.shuffle(&mut rng);
        let map = |id: u32| new_ids[g.index_of(id).unwrap()];
        let edges: Vec<_> = g.edges().iter().map(|&(a, b)| (map(a), map(b))).collect();
        let h = TreeGraph::from_edges(&new_ids, &edges).unwrap();
        let anchors: Vec<usize> = (0..4).map(|_| rng.gen_range(0..n)).collect();
        let h_anchors: Vec<usize> = anchors.iter().map(|&a| h.index_of(map(g.node_ids()[a])).unwrap()).collect();
        let pg = compute_positional_encodings(&g, &AnchorSet::new(anchors)).unwrap();
        let ph = compute_positional_encodings(&h, &AnchorSet::new(h_anchors)).unwrap();
        for i in 0..n {
            let j = h.index_of(map(g.node_ids()[i])).unwrap();
            assert_eq!(pg.row(i), ph.row(j));
        }
    }
}

#[test]
fn encodings_are_distance_sensitive_on_paths() {
    for n in 3..12u32 {
        let g = path(n);
        let pe = compute_positional_encodings(&g, &AnchorSet::new(vec![0])).unwrap();
        for u in 0..n as usize {
            for v in 0..n as usize {
                for w in 0..n as usize {
                    let (duv, duw) = (u.abs_diff(v), u.abs_diff(w));
                    if duv < duw {
                        let dist = |a: usize, b: usize| (pe.get(a, 0) - pe.get(b, 0)).abs();
                        assert!(dist(u, v) <= dist(u, w));
                    }
                }
            }
        }
        // the far endpoint realises the diameter
        assert_eq!(pe.get(n as usize - 1, 0), 1.0);
    }
}

/// Binary tree of 35 nodes whose 18 leaves play the segmentals; each
/// "segmental" is then extended by a short random chain/fork.
fn anchor_fixture(rng: &mut ChaCha8Rng) -> (TreeGraph, Vec<Option<usize>>) {
    let mut edges = Vec::new();
    let mut next = 2u32;
    let mut frontier = vec![1u32];
    let mut named = vec![1u32];
    while named.len() < NUM_NAMED {
        let p = frontier.remove(0);
        for _ in 0..2 {
            edges.push((p, next));
            frontier.push(next);
            if named.len() < NUM_NAMED {
                named.push(next);
            }
            next += 1;
        }
    }
    let segs: Vec<u32> = named[3..].to_vec();
    for &s in &segs {
        let mut tip = vec![s];
        for _ in 0..rng.gen_range(0..3) {
            let p = tip[rng.gen_range(0..tip.len())];
            edges.push((p, next));
            tip.push(next);
            next += 1;
        }
    }
    let ids: Vec<u32> = (1..next).collect();
    let g = TreeGraph::from_edges(&ids, &edges).unwrap();
    let mut predicted = vec![None; NUM_NAMED];
    for (c, id) in Class::named().zip(&named) {
        predicted[c.index()] = Some(g.index_of(*id).unwrap());
    }
    (g, predicted)
}

#[test]
fn anchors_follow_canonical_order_and_farthest_leaf_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let (g, predicted) = anchor_fixture(&mut rng);
        let a = select_anchors(&g, &predicted).unwrap();
        assert_eq!(a.len(), NUM_ANCHORS);
        for c in Class::named() {
            assert_eq!(a.nodes()[c.index()], predicted[c.index()].unwrap());
        }
        let fw = floyd_warshall(&g);
        let t = predicted[0].unwrap();
        let degree: Vec<usize> = (0..g.len()).map(|i| fw[i].iter().filter(|&&d| d == 1).count()).collect();
        for (k, c) in Class::segmental().enumerate() {
            let s = predicted[c.index()].unwrap();
            let mut best: Option<(u64, usize)> = None;
            for l in 0..g.len() {
                let below = fw[t][s] + fw[s][l] == fw[t][l];
                if l != t && degree[l] == 1 && below && best.is_none_or(|(d, _)| fw[s][l] > d) {
                    best = Some((fw[s][l], l));
                }
            }
            assert_eq!(a.nodes()[21 + k], best.unwrap().1, "{c}");
        }
    }
}

#[test]
fn leaf_segmental_reuses_itself_and_unique_leaf_is_chosen() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (g, predicted) = anchor_fixture(&mut rng);
    let a = select_anchors(&g, &predicted).unwrap();
    for (k, c) in Class::segmental().enumerate() {
        let s = predicted[c.index()].unwrap();
        let leaves = find_leaves(&g, predicted[0].unwrap(), Some(s)).unwrap();
        if g.degree(s) == 1 {
            assert_eq!(a.nodes()[21 + k], s);
        } else if leaves.len() == 1 {
            assert_eq!(a.nodes()[21 + k], leaves[0]);
        }
    }
    let mut partial = predicted.clone();
    partial[5] = None;
    assert!(select_anchors(&g, &partial).is_err());
}

#[test]
fn json_is_canonical() {
    let g = TreeGraph::new(
        vec![
            (5, [1, 2, 3], 10, Some(Class::TRACHEA)),
            (2, [0, 0, 0], 4, None),
            (9, [3, 3, 3], 1, Some(Class::rb(4))),
        ],
        [(9, 5), (5, 2), (2, 5)],
    )
    .unwrap();
    let doc = g.to_json();
    assert_eq!(doc.nodes.iter().map(|n| n.id).collect::<Vec<_>>(), vec![2, 5, 9]);
    assert_eq!(doc.edges, vec![[2, 5], [5, 9]]);
    let s = serde_json::to_string(&doc).unwrap();
    assert!(s.contains(r#""label":"RB4""#));
    assert!(s.contains(r#""label":null"#));
    let back = TreeGraph::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
    assert_eq!(back, g);
    assert!(TreeGraph::from_edges(&[1, 2], &[(1, 3)]).is_err());
}

#[test]
fn edge_index_has_self_loops_and_both_directions() {
    let g = path(3);
    let e = g.edge_index();
    assert_eq!(e.len(), 3 + 4);
    assert!(e.has_all_self_loops());
    assert_eq!(e.degrees(), vec![2, 3, 2]);
}
