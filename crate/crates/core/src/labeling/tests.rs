use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::anatomy::NUM_SEGMENTAL;
use crate::graphcore::TreeGraph;

fn random_probs(n: usize, rng: &mut ChaCha8Rng) -> ClassProbMatrix {
    let mut v = Vec::with_capacity(n * NUM_CLASSES);
    for _ in 0..n {
        let row: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s: f64 = row.iter().sum();
        v.extend(row.iter().map(|x| x / s));
    }
    ClassProbMatrix::new(n, v).unwrap()
}

/// Row `i` puts most mass on class `i` (mod 22).
fn diagonal(n: usize) -> ClassProbMatrix {
    let mut v = vec![0.1 / 21.0; n * NUM_CLASSES];
    for i in 0..n {
        v[i * NUM_CLASSES + i % NUM_CLASSES] = 0.9;
    }
    ClassProbMatrix::new(n, v).unwrap()
}

#[test]
fn prob_matrix_validation() {
    assert!(ClassProbMatrix::new(1, vec![0.5; 22]).is_err());
    assert!(ClassProbMatrix::new(1, vec![0.0; 21]).is_err());
    let mut row = vec![0.0; 22];
    row[0] = 1.5;
    row[1] = -0.5;
    assert!(ClassProbMatrix::new(1, row).is_err());
    assert_eq!(diagonal(3).argmax_rows(), vec![Class::TRACHEA, Class::LEFT_MAIN, Class::RIGHT_MAIN]);
}

#[test]
fn basic_assignment_on_diagonal() {
    let a = assign_labels_basic(&diagonal(21));
    for s in Class::segmental() {
        assert_eq!(a.get(s), Some(s.index()));
    }
    assert_eq!(a.get(Class::TRACHEA), None);
}

#[test]
fn basic_assignment_conflict_keeps_most_confident() {
    // branch 0 tops LB1+2 (0.9 of the column max) and LB3 (0.8)
    let mut rows = vec![vec![0.0; 22]; 2];
    rows[0][3] = 0.6;
    rows[0][4] = 0.4;
    rows[1][3] = 0.1;
    rows[1][4] = 0.2;
    rows[1][21] = 0.7;
    for r in &mut rows {
        let s: f64 = r.iter().sum();
        r[21] += 1.0 - s;
    }
    let c = ClassProbMatrix::new(2, rows.concat()).unwrap();
    let a = assign_labels_basic(&c);
    assert_eq!(a.get(Class::lb(1)), Some(0));
    assert_eq!(a.get(Class::lb(3)), None);
    assert!(a.is_injective());
}

fn basic_oracle(c: &ClassProbMatrix) -> Vec<Option<usize>> {
    let segs: Vec<Class> = Class::segmental().collect();
    let winners: Vec<usize> = segs
        .iter()
        .map(|&s| {
            let col: Vec<f64> = (0..c.rows()).map(|i| c.get(i, s)).collect();
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            col.iter().position(|&x| x == max).unwrap()
        })
        .collect();
    segs.iter()
        .enumerate()
        .map(|(k, &s)| {
            let row = winners[k];
            let rivals: Vec<usize> = (0..segs.len()).filter(|&j| winners[j] == row).collect();
            let best = rivals.iter().copied().max_by(|&x, &y| c.get(row, segs[x]).total_cmp(&c.get(row, segs[y])).then(y.cmp(&x))).unwrap();
            (best == k).then_some(row).filter(|_| s.is_segmental())
        })
        .collect()
}

#[test]
fn basic_assignment_matches_rule_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.gen_range(1..30);
        let c = random_probs(n, &mut rng);
        let a = assign_labels_basic(&c);
        let expect = basic_oracle(&c);
        for (k, s) in Class::segmental().enumerate() {
            assert_eq!(a.get(s), expect[k]);
        }
        assert!(a.is_injective());
        assert!(a.assigned() <= n.min(NUM_SEGMENTAL));
    }
}

#[test]
fn greedy_hand_example() {
    let table = [[0.9, 0.8], [0.6, 0.7], [0.1, 0.2]];
    let m = greedy_matching(3, 2, |i, k| table[i][k]);
    assert_eq!(m, vec![Some(0), Some(1)]);
}

/// Repeated global-max scan with explicit retirement.
fn greedy_oracle(t: &[Vec<f64>]) -> Vec<Option<usize>> {
    let (rows, cols) = (t.len(), t[0].len());
    let mut out = vec![None; cols];
    let mut row_free = vec![true; rows];
    for _ in 0..rows.min(cols) {
        let mut best: Option<(f64, usize, usize)> = None;
        for k in 0..cols {
            if out[k].is_some() {
                continue;
            }
            for i in 0..rows {
                if row_free[i] && best.is_none_or(|(p, _, _)| t[i][k] > p) {
                    best = Some((t[i][k], k, i));
                }
            }
        }
        let (_, k, i) = best.unwrap();
        out[k] = Some(i);
        row_free[i] = false;
    }
    out
}

#[test]
fn greedy_matches_brute_force_on_small_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let rows = rng.gen_range(1..=8);
        let cols = rng.gen_range(1..=5);
        // coarse values force plenty of ties
        let t: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect()).collect();
        assert_eq!(greedy_matching(rows, cols, |i, k| t[i][k]), greedy_oracle(&t));
    }
}

#[test]
fn leave_one_out_is_total_and_injective() {
    let a = assign_labels_leave_one_out(&diagonal(25)).unwrap();
    for c in Class::named() {
        assert_eq!(a.get(c), Some(c.index()));
    }
    assert!(assign_labels_leave_one_out(&diagonal(20)).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.gen_range(21..60);
        let a = assign_labels_leave_one_out(&random_probs(n, &mut rng)).unwrap();
        assert_eq!(a.assigned(), 21);
        assert!(a.is_injective());
        assert_eq!(a.get(Class::OTHER), None);
    }
}

fn refs_identity() -> Vec<Option<usize>> {
    (0..NUM_CLASSES).map(|c| (c < 21).then_some(c)).collect()
}

#[test]
fn accuracy_examples() {
    let good = assign_labels_leave_one_out(&diagonal(25)).unwrap();
    let r = accuracy_per_class(&[good.clone(), good.clone()], &[refs_identity(), refs_identity()]).unwrap();
    assert!(r.per_class.iter().all(|&a| a == Some(1.0)));
    assert_eq!(r.overall, 1.0);

    let mut bad = good.clone();
    bad.set(Class::rb(4), Some(22));
    let r = accuracy_per_class(&[good.clone(), bad], &[refs_identity(), refs_identity()]).unwrap();
    assert_eq!(r.per_class[Class::rb(4).index() - 3], Some(0.5));
    assert!((r.overall - (17.0 + 0.5) / 18.0).abs() < 1e-15);

    // class absent from the only reference drops out of the mean
    let mut missing = refs_identity();
    missing[Class::lb(6).index()] = None;
    let r = accuracy_per_class(&[good], &[missing]).unwrap();
    assert_eq!(r.per_class[Class::lb(6).index() - 3], None);
    assert_eq!(r.overall, 1.0);
    assert!(accuracy_per_class(&[], &[]).is_err());
}

#[test]
fn accuracy_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trees = 12;
    let mut asg = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..trees {
        let n = rng.gen_range(21..40);
        asg.push(assign_labels_leave_one_out(&random_probs(n, &mut rng)).unwrap());
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        refs.push((0..NUM_CLASSES).map(|c| (c < 21 && rng.gen_bool(0.9)).then(|| perm[c])).collect::<Vec<_>>());
    }
    let r = accuracy_per_class(&asg, &refs).unwrap();
    let mut sum = 0.0;
    let mut classes = 0;
    for (k, s) in Class::segmental().enumerate() {
        let (mut hit, mut tot) = (0, 0);
        for t in 0..trees {
            if let Some(truth) = refs[t][s.index()] {
                tot += 1;
                hit += (asg[t].get(s) == Some(truth)) as usize;
            }
        }
        assert_eq!((r.correct[k], r.total[k]), (hit, tot));
        if tot > 0 {
            sum += hit as f64 / tot as f64;
            classes += 1;
        }
    }
    assert!((r.overall - sum / classes as f64).abs() < 1e-12);
}

fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> TreeGraph {
    let ids: Vec<u32> = (1..=n as u32).collect();
    let edges: Vec<_> = (2..=n as u32).map(|i| (rng.gen_range(1..i), i)).collect();
    TreeGraph::from_edges(&ids, &edges).unwrap()
}

fn floyd_warshall(g: &TreeGraph) -> Vec<Vec<u32>> {
    let n = g.len();
    let mut d = vec![vec![u32::MAX / 2; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in g.edges() {
        let (i, j) = (a as usize - 1, b as usize - 1);
        d[i][j] = 1;
        d[j][i] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
            }
        }
    }
    d
}

#[test]
fn td_examples() {
    // path 0-1-2-...: reference at i, prediction at its parent
    let ids: Vec<u32> = (1..=25).collect();
    let edges: Vec<_> = (1..25).map(|i| (i, i + 1)).collect();
    let g = TreeGraph::from_edges(&ids, &edges).unwrap();
    let mut a = LabelAssignment::default();
    for s in Class::segmental() {
        a.set(s, Some(s.index()));
    }
    let td = topological_distance(&a, &refs_identity(), &g).unwrap();
    assert!(td.samples.is_empty() && td.unpredicted.is_empty());
    let report = TdReport::from_trees(&[td]);
    assert_eq!(report.overall, None);
    assert!(report.per_class.iter().all(|s| s.n == 0 && s.mean.is_none()));

    a.set(Class::lb(3), Some(Class::lb(3).index() - 1));
    a.set(Class::rb(2), None);
    let td = topological_distance(&a, &refs_identity(), &g).unwrap();
    assert_eq!(td.samples, vec![(Class::lb(3), 1)]);
    assert_eq!(td.unpredicted, vec![Class::rb(2)]);

    let split = TreeGraph::from_edges(&[1, 2, 3], &[(1, 2)]).unwrap();
    assert!(topological_distance(&a, &refs_identity(), &split).is_err());
}

#[test]
fn td_matches_floyd_warshall() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(2..=20);
        let g = random_tree(n, &mut rng);
        let fw = floyd_warshall(&g);
        let mut a = LabelAssignment::default();
        let mut r = vec![None; NUM_CLASSES];
        for s in Class::segmental() {
            r[s.index()] = Some(rng.gen_range(0..n));
            a.set(s, Some(rng.gen_range(0..n)));
        }
        let td = topological_distance(&a, &r, &g).unwrap();
        let mut expect = Vec::new();
        for s in Class::segmental() {
            let (p, t) = (a.get(s).unwrap(), r[s.index()].unwrap());
            if p != t {
                expect.push((s, fw[p][t]));
            }
        }
        assert_eq!(td.samples, expect);
    }
}

#[test]
fn td_statistics_are_population_moments() {
    let trees = vec![
        TreeTd { samples: vec![(Class::lb(3), 1), (Class::rb(1), 4)], unpredicted: vec![] },
        TreeTd { samples: vec![(Class::lb(3), 3)], unpredicted: vec![Class::lb(4)] },
    ];
    let r = TdReport::from_trees(&trees);
    let lb3 = &r.per_class[Class::lb(3).index() - 3];
    assert_eq!((lb3.n, lb3.mean, lb3.std), (2, Some(2.0), Some(1.0)));
    assert_eq!(r.overall, Some(3.0));
    assert_eq!(r.unpredicted, 1);
}

#[test]
fn kappa_perfect_and_chance() {
    let a = vec![0, 1, 2, 2, 1, 0, 3];
    let k = weighted_kappa_linear(&a, &a, 4).unwrap();
    assert!((k.kappa - 1.0).abs() < 1e-12);
    let k = weighted_kappa_linear(&[1, 1, 1], &[1, 1, 1], 3).unwrap();
    assert_eq!(k.kappa, 1.0);

    let n = 10_000;
    let constant = vec![0; n];
    let uniform: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let k = weighted_kappa_linear(&constant, &uniform, 2).unwrap();
    assert!(k.kappa.abs() < 1e-12);

    assert!(weighted_kappa_linear(&[0, 1], &[0], 2).is_err());
    assert!(weighted_kappa_linear(&[0, 5], &[0, 1], 2).is_err());
    assert!(weighted_kappa_linear(&[0], &[0], 2).is_err());
}

#[test]
fn kappa_matches_reference_script() {
    // confusion matrix [[2,1,0],[0,2,1],[1,0,2]]; reference kappa and
    // standard error computed once with an independent statistics package
    let table = [[2, 1, 0], [0, 2, 1], [1, 0, 2]];
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, row) in table.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            for _ in 0..count {
                a.push(i);
                b.push(j);
            }
        }
    }
    let k = weighted_kappa_linear(&a, &b, 3).unwrap();
    assert!((k.kappa - 0.5).abs() < 1e-10);
    assert!((k.se - 0.25515518153991434).abs() < 1e-10);
    assert!((k.ci_low - (0.5 - 1.96 * 0.25515518153991434)).abs() < 1e-10);
    assert!((k.ci_high - (0.5 + 1.96 * 0.25515518153991434)).abs() < 1e-10);
}

#[test]
fn mac_examples() {
    assert_eq!(Layer::Linear { rows: 1, d_in: 1024, d_out: 22 }.macs(), 22528);
    assert_eq!(Layer::Conv3d { c_in: 1, c_out: 1, kernel: [3; 3], out: [1; 3] }.macs(), 27);
    let r = count_macs(&[
        ("a".into(), Layer::Linear { rows: 2, d_in: 3, d_out: 4 }),
        ("b".into(), Layer::Attention { edges: 5, d_out: 2 }),
    ]);
    assert_eq!(r.total, 24 + 30);
    assert_eq!(r.components[1], ("b".to_string(), 30));
}

#[test]
fn feature_csv_format_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    export_features_csv(&p, &[], &[], &Tensor::<f32>::zeros(&[0, 4])).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "branch_id,label,f0000,f0001,f0002,f0003\n");

    let f = Tensor::new(&[3, 4], vec![0.1f32, -2.5, 1e-7, 3.0, 0.333_333_34, 7.0, 8.0, 9.0, -0.0, 1.5e9, 2.0, 0.25]).unwrap();
    let labels = [Some(Class::lb(1)), None, Some(Class::OTHER)];
    export_features_csv(&p, &[4, 9, 2], &labels, &f).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.split(',').count() == 6));
    assert!(lines[1].starts_with("4,LB1+2,"));
    assert!(lines[2].starts_with("9,,"));
    let rows = read_features_csv(&p).unwrap();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.values, f.row(i));
        assert_eq!(r.label, labels[i]);
    }
    assert!(export_features_csv(&p, &[1], &[None], &f).is_err());
}

#[test]
fn metrics_json_keeps_class_order() {
    let good = assign_labels_leave_one_out(&diagonal(25)).unwrap();
    let acc = accuracy_per_class(&[good], &[refs_identity()]).unwrap();
    let td = TdReport::from_trees(&[TreeTd::default()]);
    let m = MetricsReport::new(&acc, &td, 10, 20);
    let s = serde_json::to_string(&m).unwrap();
    assert!(s.starts_with(r#"{"per_class":{"LB1+2":{"acc":1.0,"td_mean":null,"td_std":null,"n_td":0},"LB3""#), "{s}");
    assert!(s.contains(r#""overall":{"acc":1.0,"td":null},"macs":10,"params":20"#));
    let back: MetricsReport = serde_json::from_str(&s).unwrap();
    assert_eq!(back, m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignments_are_injective(seed in any::<u64>(), n in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_probs(n, &mut rng);
        prop_assert!(assign_labels_basic(&c).is_injective());
        if n >= 21 {
            let a = assign_labels_leave_one_out(&c).unwrap();
            prop_assert!(a.is_injective());
            prop_assert_eq!(a.assigned(), 21);
        }
    }

    #[test]
    fn accuracy_survives_row_rescaling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let c = random_probs(n, &mut rng);
        let mut v = Vec::new();
        for i in 0..n {
            let s = rng.gen_range(0.1..10.0);
            let row: Vec<f64> = c.row(i).iter().map(|x| x * s).collect();
            let t: f64 = row.iter().sum();
            v.extend(row.iter().map(|x| x / t));
        }
        let c2 = ClassProbMatrix::new(n, v).unwrap();
        let refs = vec![refs_identity()];
        let a1 = accuracy_per_class(&[assign_labels_leave_one_out(&c).unwrap()], &refs).unwrap();
        let a2 = accuracy_per_class(&[assign_labels_leave_one_out(&c2).unwrap()], &refs).unwrap();
        prop_assert_eq!(a1.overall, a2.overall);
    }
}
