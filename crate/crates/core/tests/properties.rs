use hypergen::analysis::{double_sidedness, seed_dependence, strongest_connection};
use hypergen::contour::contour;
use hypergen::experiments::{generalization_axis, spearman};
use hypergen::hypernet::gaussian_kl;
use hypergen::layout::{layout_energy, Edge, EnergyCoefficients, NeuronGraph, Node, Point, Role};
use hypergen::tensor::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))
}

fn pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))
}

/// Layered graph with `sizes` and edge weights drawn from `weights`.
fn layered(sizes: &[usize], weights: &[f64]) -> NeuronGraph {
    let mut nodes = Vec::new();
    let mut base = Vec::new();
    for (layer, &n) in sizes.iter().enumerate() {
        base.push(nodes.len());
        nodes.extend((0..n).map(|index| Node {
            layer,
            index,
            role: Role::Hidden,
        }));
    }
    let mut edges = Vec::new();
    let mut k = 0;
    for l in 0..sizes.len() - 1 {
        for i in 0..sizes[l] {
            for j in 0..sizes[l + 1] {
                edges.push(Edge {
                    from: base[l] + i,
                    to: base[l + 1] + j,
                    weight: weights[k % weights.len()],
                });
                k += 1;
            }
        }
    }
    NeuronGraph { nodes, edges }
}

/// Rotation by `theta` in the `(a, b)` coordinate plane.
fn rotate(pos: &[Point], a: usize, b: usize, theta: f64) -> Vec<Point> {
    let (s, c) = theta.sin_cos();
    pos.iter()
        .map(|p| {
            let mut q = *p;
            q[a] = c * p[a] - s * p[b];
            q[b] = s * p[a] + c * p[b];
            q
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn alpha1_is_scale_invariant(w in sized_matrix(), c in 1e-3f64..1e3) {
        let a = double_sidedness(&w).unwrap();
        let b = double_sidedness(&w.scale(c)).unwrap();
        prop_assert_eq!(a.degenerate, b.degenerate);
        if !a.degenerate {
            prop_assert!((a.value - b.value).abs() <= 1e-12 * a.value.abs().max(1.0));
        }
    }

    #[test]
    fn alpha2_is_linear_in_scale(w in sized_matrix(), c in 1e-3f64..1e3) {
        let a = strongest_connection(&w).unwrap();
        let b = strongest_connection(&w.scale(c)).unwrap();
        prop_assert!((b - c * a).abs() <= 1e-12 * (c * a).max(1.0));
        prop_assert!(strongest_connection(&w.scale(-c)).unwrap() == b);
    }

    #[test]
    fn alpha3_is_bounded_and_symmetric((w, v) in pair()) {
        prop_assume!(w.data().iter().chain(v.data()).any(|&x| x != 0.0));
        let a = seed_dependence(&w, &v).unwrap();
        prop_assert!((0.0..=2.0).contains(&a));
        prop_assert_eq!(a, seed_dependence(&v, &w).unwrap());
        prop_assert_eq!(seed_dependence(&w, &w.scale(-1.0)).unwrap(), 2.0);
    }

    #[test]
    fn kl_is_nonnegative(mq in -5.0f64..5.0, mp in -5.0f64..5.0, lq in -3.0f64..3.0, lp in -3.0f64..3.0) {
        let kl = gaussian_kl(mq, lq.exp(), mp, lp.exp());
        prop_assert!(kl >= -1e-12);
        prop_assert_eq!(gaussian_kl(mq, lq.exp(), mq, lq.exp()), 0.0);
    }

    #[test]
    fn row_broadcast_matches_loop(m in sized_matrix(), seed in 0u64..1000) {
        let cols = m.shape()[1];
        let row: Vec<f64> = (0..cols).map(|j| (seed as f64 + j as f64).sin()).collect();
        let sum = m.add(&Tensor::from_vec(row.clone())).unwrap();
        prop_assert_eq!(sum.shape(), m.shape());
        for r in 0..m.shape()[0] {
            for c in 0..cols {
                prop_assert_eq!(sum.row(r)[c], m.row(r)[c] + row[c]);
            }
        }
        let scalar = m.mul(&Tensor::scalar(2.5)).unwrap();
        prop_assert_eq!(scalar, m.scale(2.5));
    }

    #[test]
    fn slice_then_concat_restores_bits(m in sized_matrix(), cut in 0usize..8, axis in 0usize..2) {
        let n = m.shape()[axis];
        let cut = cut.min(n);
        let a = m.slice(axis, 0..cut).unwrap();
        let b = m.slice(axis, cut..n).unwrap();
        let back = Tensor::concat(&[&a, &b], axis).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn softmax_normalizes_and_ignores_shifts(m in sized_matrix(), shift in -50.0f64..50.0, axis in 0usize..2) {
        let s = m.softmax(axis).unwrap();
        let totals = s.reduce(axis, hypergen::tensor::ReduceOp::Sum).unwrap();
        prop_assert!(totals.data().iter().all(|t| (t - 1.0).abs() < 1e-12));
        let shifted = m.map(|x| x + shift).softmax(axis).unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_energy_is_rotation_invariant(
        coords in prop::collection::vec(-2.0f64..2.0, 4 * 9),
        weights in prop::collection::vec(-3.0f64..3.0, 1..20),
        planes in prop::collection::vec((0usize..4, 1usize..4, -3.2f64..3.2), 1..4),
    ) {
        let graph = layered(&[3, 5, 1], &weights);
        let pos: Vec<Point> = coords.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let coef = EnergyCoefficients::default();
        let e0 = layout_energy(&pos, &graph, &coef, 0.7);
        let mut rotated = pos.clone();
        for (a, off, theta) in planes {
            rotated = rotate(&rotated, a, (a + off) % 4, theta);
        }
        let e1 = layout_energy(&rotated, &graph, &coef, 0.7);
        prop_assert!((e0 - e1).abs() <= 1e-9 * e0.abs().max(1.0), "{} vs {}", e0, e1);
    }

    #[test]
    fn layout_energy_ignores_node_order(
        coords in prop::collection::vec(-2.0f64..2.0, 4 * 6),
        weights in prop::collection::vec(-3.0f64..3.0, 1..10),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let graph = layered(&[2, 3, 1], &weights);
        let pos: Vec<Point> = coords.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        // node k moves to slot perm[k]
        let mut nodes = graph.nodes.clone();
        let mut moved = pos.clone();
        for k in 0..6 {
            nodes[perm[k]] = graph.nodes[k];
            moved[perm[k]] = pos[k];
        }
        let edges = graph.edges.iter().map(|e| Edge { from: perm[e.from], to: perm[e.to], weight: e.weight }).collect();
        let permuted = NeuronGraph { nodes, edges };
        let coef = EnergyCoefficients::default();
        let a = layout_energy(&pos, &graph, &coef, 1.0);
        let b = layout_energy(&moved, &permuted, &coef, 1.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn contours_of_planar_fields_are_exact(a in 0.1f64..2.0, b in -2.0f64..2.0, c in -1.0f64..1.0, level in -1.0f64..1.0) {
        let xs: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = (0..11).map(|i| -0.5 + i as f64 * 0.1).collect();
        let z: Vec<Vec<f64>> = ys.iter().map(|&y| xs.iter().map(|&x| a * x + b * y + c).collect()).collect();
        let cont = contour(&xs, &ys, &z, level).unwrap();
        prop_assert!(cont.polylines.len() <= 1);
        for p in cont.polylines.iter().flatten() {
            prop_assert!((a * p[0] + b * p[1] + c - level).abs() < 1e-9);
        }
    }

    #[test]
    fn spearman_is_bounded_and_rank_based(xs in prop::collection::vec(-10.0f64..10.0, 3..40), seed in 0u64..100) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * ((i as u64 + seed) as f64).cos()).collect();
        prop_assume!(xs.iter().any(|&x| x != xs[0]) && ys.iter().any(|&y| y != ys[0]));
        let r = spearman(&xs, &ys).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let cubed: Vec<f64> = xs.iter().map(|x| x.powi(3) + 7.0).collect();
        prop_assert!((spearman(&xs, &cubed).unwrap() - 1.0).abs() < 1e-12);
        let flipped: Vec<f64> = xs.iter().map(|x| -x).collect();
        prop_assert!((spearman(&xs, &flipped).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn generalization_axis_covers_twice_the_size(n in 1usize..80, div in 1usize..16) {
        let axis = generalization_axis(n, div);
        let step = (n / div).max(1);
        prop_assert_eq!(axis[0], step);
        prop_assert!(axis.windows(2).all(|w| w[1] - w[0] == step));
        prop_assert!(*axis.last().unwrap() <= 2 * n && *axis.last().unwrap() + step > 2 * n);
    }
}
