use proptest::prelude::*;

use skillmix::allocation::{
    metric_discreteness, metric_sparsity, metric_usage, normalize_matrix, BinaryAllocation,
};
use skillmix::autodiff::{Tape, Var};
use skillmix::hierarchy::export_hierarchy;
use skillmix::ibp::ibp_log_prob;
use skillmix::recovery::{skill_recovery_score_with, RecoveryMethod};
use skillmix::skills::{
    compose_dense, lora_forward, lora_forward_materialized, select_sparse_mask, DenseSkills, LowRankSkills,
    TaskWeights,
};
use skillmix::tensor::Tensor;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_vec(shape, data).unwrap()
}

/// `(rows, cols, values)` with values drawn from `range`.
fn matrix(max_r: usize, max_c: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = Tensor> {
    (1..=max_r, 1..=max_c).prop_flat_map(move |(r, c)| {
        prop::collection::vec(range.clone(), r * c).prop_map(move |v| tensor(&[r, c], v))
    })
}

fn binary(max_r: usize, max_c: usize) -> impl Strategy<Value = BinaryAllocation> {
    (1..=max_r, 1..=max_c).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::collection::vec(0u8..=1, c), r)
            .prop_map(|rows| BinaryAllocation::from_rows(&rows).unwrap())
    })
}

/// A random permutation of `0..n`.
fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<usize>>()).prop_shuffle()
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn permute_tensor_columns(m: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = m.to_rows().iter().map(|r| perm.iter().map(|&p| r[p]).collect()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn permute_rows(z: &BinaryAllocation, perm: &[usize]) -> BinaryAllocation {
    let rows = z.to_rows();
    BinaryAllocation::from_rows(&perm.iter().map(|&p| rows[p].clone()).collect::<Vec<_>>()).unwrap()
}

/// `Σ sigmoid(x) ⊙ x`
fn f_loss(tape: &mut Tape, x: Var) -> Var {
    let s = tape.sigmoid(x).unwrap();
    let p = tape.mul(s, x).unwrap();
    tape.sum(p).unwrap()
}

/// `Σ (x xᵀ)²`
fn g_loss(tape: &mut Tape, x: Var) -> Var {
    let xt = tape.transpose(x).unwrap();
    let m = tape.matmul(x, xt).unwrap();
    let sq = tape.unary(skillmix::autodiff::UnaryOp::Square, m).unwrap();
    tape.sum(sq).unwrap()
}

fn grad_of(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.param(x);
    let y = build(&mut tape, v);
    tape.backward(y).unwrap();
    tape.grad(v).unwrap().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn backward_is_linear(x in matrix(4, 4, -2.0..2.0), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let gf = grad_of(&x, f_loss);
        let gg = grad_of(&x, g_loss);
        let gc = grad_of(&x, |t, v| {
            let f = f_loss(t, v);
            let g = g_loss(t, v);
            let fa = t.scale(f, a);
            let gb = t.scale(g, b);
            t.add(fa, gb).unwrap()
        });
        for i in 0..gc.len() {
            let want = a * gf[i] + b * gg[i];
            prop_assert!((gc[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn normalised_rows_sum_to_one_and_ignore_scale(m in matrix(6, 6, 0.01..1.0), k in 0.1f64..10.0, row in 0usize..6) {
        let n = normalize_matrix(&m).unwrap();
        for r in n.to_rows() {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let row = row % m.rows();
        let mut scaled = m.clone();
        let c = m.cols();
        for v in &mut scaled.data_mut()[row * c..(row + 1) * c] {
            *v *= k;
        }
        let ns = normalize_matrix(&scaled).unwrap();
        for (a, b) in n.row(row).iter().zip(ns.row(row)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_are_bounded(m in matrix(8, 8, 0.0..1.0)) {
        let d = metric_discreteness(&m).unwrap();
        let s = metric_sparsity(&m).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&s));
        if let Ok(u) = metric_usage(&m) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&u));
        }
    }

    #[test]
    fn metrics_ignore_column_order(
        (m, perm) in matrix(6, 6, 0.0..1.0).prop_flat_map(|m| { let c = m.cols(); (Just(m), permutation(c)) })
    ) {
        let p = permute_tensor_columns(&m, &perm);
        prop_assert!((metric_discreteness(&m).unwrap() - metric_discreteness(&p).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(metric_sparsity(&m).unwrap(), metric_sparsity(&p).unwrap());
        if let (Ok(a), Ok(b)) = (metric_usage(&m), metric_usage(&p)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sparsity_ignores_any_cell_order(v in prop::collection::vec(0.0f64..=1.0, 12).prop_shuffle(), r in 1usize..=3) {
        let (rows, cols) = if 12 % r == 0 { (r, 12 / r) } else { (1, 12) };
        let a = tensor(&[rows, cols], v.clone());
        let mut sorted = v;
        sorted.sort_by(f64::total_cmp);
        let b = tensor(&[cols, rows], sorted);
        prop_assert_eq!(metric_sparsity(&a).unwrap(), metric_sparsity(&b).unwrap());
    }

    #[test]
    fn composition_is_affine_in_weights(
        phi in prop::collection::vec(-1.0f64..1.0, 3 * 5),
        base in prop::collection::vec(-1.0f64..1.0, 5),
        w1 in simplex(3),
        w2 in simplex(3),
        alpha in 0.0f64..1.0,
    ) {
        let skills = DenseSkills { phi: tensor(&[3, 5], phi), base: tensor(&[5], base.clone()) };
        let beta = 1.0 - alpha;
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| alpha * a + beta * b).collect();
        let c1 = compose_dense(&skills, &TaskWeights::new(w1).unwrap()).unwrap();
        let c2 = compose_dense(&skills, &TaskWeights::new(mix).unwrap()).unwrap();
        let c3 = compose_dense(&skills, &TaskWeights::new(w2).unwrap()).unwrap();
        for k in 0..5 {
            let want = alpha * c1.data()[k] + beta * c3.data()[k] - (alpha + beta - 1.0) * base[k];
            prop_assert!((c2.data()[k] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn composed_delta_is_no_larger_than_the_largest_skill(
        phi in prop::collection::vec(-5.0f64..5.0, 4 * 6),
        base in prop::collection::vec(-1.0f64..1.0, 6),
        w in simplex(4),
    ) {
        let skills = DenseSkills { phi: tensor(&[4, 6], phi), base: tensor(&[6], base.clone()) };
        let theta = compose_dense(&skills, &TaskWeights::new(w).unwrap()).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let delta: Vec<f64> = theta.data().iter().zip(&base).map(|(t, b)| t - b).collect();
        let largest = (0..4).map(|j| norm(skills.phi.row(j))).fold(0.0, f64::max);
        prop_assert!(norm(&delta) <= largest + 1e-12);
    }

    #[test]
    fn masked_entries_get_no_gradient(
        phi in prop::collection::vec(-1.0f64..1.0, 3 * 10),
        before in prop::collection::vec(-1.0f64..1.0, 3 * 10),
        w in simplex(3),
        k in 1usize..=10,
    ) {
        let phi = tensor(&[3, 10], phi);
        let mask = select_sparse_mask(&tensor(&[3, 10], before), &phi, k).unwrap();
        for r in mask.to_rows() {
            prop_assert_eq!(r.iter().filter(|&&m| m == 1.0).count(), k);
        }
        let mut tape = Tape::new();
        let p = tape.param(&phi);
        let m = tape.leaf(&mask);
        let masked = tape.mul(p, m).unwrap();
        let base = tape.leaf(&Tensor::from_vec(&[10], vec![0.5; 10]).unwrap());
        let wv = tape.constant(&[3], w).unwrap();
        let theta = skillmix::skills::compose_on_tape(&mut tape, base, masked, wv).unwrap();
        let sq = tape.unary(skillmix::autodiff::UnaryOp::Square, theta).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();
        for (gi, mi) in g.iter().zip(mask.data()) {
            if *mi == 0.0 {
                prop_assert_eq!(*gi, 0.0);
            }
        }
    }

    #[test]
    fn factored_lora_equals_materialised(
        (s, o, r, i) in (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(s, o, i)| (Just(s), Just(o), 1..=o.min(i), Just(i))),
        seed in any::<u64>(),
    ) {
        use skillmix::tensor::Fill;
        let u = |shape: &[usize], k: u64| Tensor::new(shape, Fill::Uniform { low: -1.0, high: 1.0, seed: seed.wrapping_add(k) }).unwrap();
        let skills = LowRankSkills { a: u(&[s, o, r], 1), b: u(&[s, r, i], 2), w0: u(&[o, i], 3), b0: u(&[o], 4) };
        let raw = u(&[s], 5);
        let total: f64 = raw.data().iter().map(|v| v.abs() + 0.1).sum();
        let w = TaskWeights::new(raw.data().iter().map(|v| (v.abs() + 0.1) / total).collect()).unwrap();
        let x = u(&[i], 6);
        let a = lora_forward(&x, &skills, &w).unwrap();
        let b = lora_forward_materialized(&x, &skills, &w).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn ibp_ignores_column_order(
        (z, perm) in binary(6, 5).prop_flat_map(|z| { let c = z.num_skills(); (Just(z), permutation(c)) }),
        alpha in 0.1f64..10.0,
    ) {
        prop_assert_eq!(ibp_log_prob(&z, alpha).unwrap(), ibp_log_prob(&z.permute_columns(&perm), alpha).unwrap());
    }

    #[test]
    fn ibp_decreases_as_a_pattern_repeats(row in prop::collection::vec(0u8..=1, 1..5), reps in 1usize..6, alpha in 0.1f64..10.0) {
        let z = |n: usize| BinaryAllocation::from_rows(&vec![row.clone(); n]).unwrap();
        prop_assert!(ibp_log_prob(&z(reps + 1), alpha).unwrap() < ibp_log_prob(&z(reps), alpha).unwrap());
    }

    #[test]
    fn recovery_ignores_relabelling_and_task_order(
        (truth, learned, cperm, rperm) in (2usize..8, 1usize..4).prop_flat_map(|(t, k)| {
            let grid = |c: usize| prop::collection::vec(prop::collection::vec(0u8..=1, c), t)
                .prop_map(|rows| BinaryAllocation::from_rows(&rows).unwrap());
            (grid(k), grid(k + 1), permutation(k + 1), permutation(t))
        }),
    ) {
        for method in [RecoveryMethod::Exact, RecoveryMethod::Hungarian] {
            let base = skill_recovery_score_with(&learned, &truth, method).unwrap().cell_accuracy;
            let relabelled = skill_recovery_score_with(&learned.permute_columns(&cperm), &truth, method).unwrap();
            prop_assert_eq!(base, relabelled.cell_accuracy);
            let reordered = skill_recovery_score_with(&permute_rows(&learned, &rperm), &permute_rows(&truth, &rperm), method).unwrap();
            prop_assert_eq!(base, reordered.cell_accuracy);
            prop_assert!((0.0..=1.0).contains(&base));
        }
        let exact = skill_recovery_score_with(&learned, &truth, RecoveryMethod::Exact).unwrap().cell_accuracy;
        let hung = skill_recovery_score_with(&learned, &truth, RecoveryMethod::Hungarian).unwrap().cell_accuracy;
        prop_assert_eq!(exact, hung);
    }

    #[test]
    fn hierarchy_partitions_tasks(z in binary(10, 4)) {
        let names: Vec<String> = (0..z.num_tasks()).map(|i| format!("t{i}")).collect();
        let h = export_hierarchy(&z, &names).unwrap();
        let mut seen: Vec<String> = h.groups.iter().flat_map(|g| g.tasks.clone()).collect();
        seen.sort();
        let mut want = names.clone();
        want.sort();
        prop_assert_eq!(seen, want);
        for g in &h.groups {
            for t in &g.tasks {
                let i: usize = t[1..].parse().unwrap();
                let subset: Vec<usize> = (0..z.num_skills()).filter(|&j| z.get(i, j)).collect();
                prop_assert_eq!(&subset, &g.subset);
            }
        }
    }
}
