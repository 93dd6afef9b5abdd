//! Property tests for the alignment losses.

use proptest::prelude::*;
use srepa_core::align::{
    gram_from_full, gram_offdiag, pointwise_loss, relational_softmax, struc_kl_loss,
    struc_mse_loss, total_alignment_loss, FeatureKind, FeatureMap, LossWeights, Source,
    SimilarityMatrix,
};
use srepa_core::{Tape, Tensor};

/// `(n, d, teacher, student)` with row norms kept away from zero.
fn feature_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (2usize..=5, 2usize..=4).prop_flat_map(|(n, d)| {
        let row = prop::collection::vec(-1.0f64..1.0, d)
            .prop_filter("row norm", |r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2);
        (
            Just(n),
            Just(d),
            prop::collection::vec(row.clone(), n).prop_map(|r| r.concat()),
            prop::collection::vec(row, n).prop_map(|r| r.concat()),
        )
    })
}

struct Losses {
    proj: f64,
    mse: f64,
    kl: f64,
}

fn losses(n: usize, d: usize, teacher: &[f64], student: &[f64], tau_t: f64, tau_s: f64) -> Losses {
    let mut tape = Tape::<f64>::new();
    let tv = tape.constant(Tensor::new(&[1, n, d], teacher.to_vec()).unwrap());
    let sv = tape.leaf(Tensor::new(&[1, n, d], student.to_vec()).unwrap());
    let zt = FeatureMap::new(&mut tape, tv, FeatureKind::TeacherRaw).unwrap().normalize(&mut tape);
    let zs = FeatureMap::new(&mut tape, sv, FeatureKind::StudentRaw).unwrap().normalize(&mut tape);
    let proj = pointwise_loss(&mut tape, &zt, &zs).unwrap();
    let st = gram_offdiag(&mut tape, &zt).unwrap();
    let ss = gram_offdiag(&mut tape, &zs).unwrap();
    let mse = struc_mse_loss(&mut tape, &st, &ss).unwrap();
    let pt = relational_softmax(&mut tape, &st, tau_t).unwrap();
    let ps = relational_softmax(&mut tape, &ss, tau_s).unwrap();
    let kl = struc_kl_loss(&mut tape, &pt, &ps).unwrap();
    Losses {
        proj: tape.scalar_value(proj),
        mse: tape.scalar_value(mse),
        kl: tape.scalar_value(kl),
    }
}

fn offdiag_const(tape: &mut Tape<f64>, n: usize, values: Vec<f64>, source: Source) -> SimilarityMatrix {
    SimilarityMatrix {
        offdiag: tape.constant(Tensor::new(&[1, n, n - 1], values).unwrap()),
        source,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn positive_row_rescaling_leaves_losses_unchanged(
        (n, d, teacher, student) in feature_case(),
        scales in prop::collection::vec(0.05f64..20.0, 10),
        tau in 0.1f64..1.0,
    ) {
        let base = losses(n, d, &teacher, &student, tau, tau);
        let rescale = |x: &[f64], offset: usize| -> Vec<f64> {
            x.chunks(d)
                .enumerate()
                .flat_map(|(i, r)| {
                    let c = scales[(i + offset) % scales.len()];
                    r.iter().map(move |v| v * c)
                })
                .collect()
        };
        let moved = losses(n, d, &rescale(&teacher, 0), &rescale(&student, 5), tau, tau);
        prop_assert!((base.proj - moved.proj).abs() < 1e-5);
        prop_assert!((base.mse - moved.mse).abs() < 1e-5);
        prop_assert!((base.kl - moved.kl).abs() < 1e-5);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_two_tokens(
        (n, d, teacher, student) in feature_case(),
        tau_t in 0.05f64..2.0,
        tau_s in 0.05f64..2.0,
    ) {
        let l = losses(n, d, &teacher, &student, tau_t, tau_s);
        prop_assert!(l.kl >= 0.0);
        prop_assert!(l.proj >= 0.0 && l.proj <= 2.0 + 1e-12);
        if n == 2 {
            prop_assert_eq!(l.kl, 0.0);
        }
    }

    #[test]
    fn kl_of_identical_distributions_vanishes(
        (n, d, teacher, _s) in feature_case(),
        tau in 0.05f64..2.0,
    ) {
        let l = losses(n, d, &teacher, &teacher, tau, tau);
        prop_assert!(l.kl.abs() < 1e-8);
        prop_assert!(l.mse.abs() < 1e-12);
        prop_assert!(l.proj.abs() < 1e-12);
    }

    #[test]
    fn mse_swap_symmetry_is_bitwise(
        n in 2usize..=6,
        seed_vals in prop::collection::vec(-1.0f64..1.0, 60),
    ) {
        let m = n * (n - 1);
        let a = seed_vals[..m].to_vec();
        let b = seed_vals[30..30 + m].to_vec();
        let mut tape = Tape::<f64>::new();
        let sa = offdiag_const(&mut tape, n, a, Source::Teacher);
        let sb = offdiag_const(&mut tape, n, b, Source::Student);
        let ab = struc_mse_loss(&mut tape, &sa, &sb).unwrap();
        let ba = struc_mse_loss(&mut tape, &sb, &sa).unwrap();
        prop_assert_eq!(tape.scalar_value(ab).to_bits(), tape.scalar_value(ba).to_bits());
    }

    #[test]
    fn softmax_rows_sum_to_one(
        n in 2usize..=6,
        vals in prop::collection::vec(-1.0f64..1.0, 30),
        tau in 1e-2f64..1e2,
    ) {
        let m = n * (n - 1);
        let mut tape = Tape::<f64>::new();
        let s = offdiag_const(&mut tape, n, vals[..m].to_vec(), Source::Student);
        let p = relational_softmax(&mut tape, &s, tau).unwrap();
        for row in tape.value(p.probs).data().chunks(n - 1) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_vanishes_under_per_row_shift(
        n in 3usize..=6,
        vals in prop::collection::vec(-1.0f64..1.0, 30),
        shifts in prop::collection::vec(-0.5f64..0.5, 6),
        tau in 0.1f64..1.0,
    ) {
        let m = n * (n - 1);
        let a = vals[..m].to_vec();
        let b: Vec<f64> = a
            .chunks(n - 1)
            .enumerate()
            .flat_map(|(i, r)| {
                let c = shifts[i];
                r.iter().map(move |v| v + c)
            })
            .collect();
        let mut tape = Tape::<f64>::new();
        let sa = offdiag_const(&mut tape, n, a, Source::Teacher);
        let sb = offdiag_const(&mut tape, n, b, Source::Student);
        let pa = relational_softmax(&mut tape, &sa, tau).unwrap();
        let pb = relational_softmax(&mut tape, &sb, tau).unwrap();
        let kl = struc_kl_loss(&mut tape, &pa, &pb).unwrap();
        prop_assert!(tape.scalar_value(kl).abs() < 1e-8);
    }

    #[test]
    fn teacher_gradients_are_identically_zero(
        (n, d, teacher, student) in feature_case(),
        kl in any::<bool>(),
    ) {
        let w = if kl { LossWeights::kl_default() } else { LossWeights::mse_default() };
        let mut tape = Tape::<f64>::new();
        let tv = tape.leaf(Tensor::new(&[1, n, d], teacher).unwrap());
        let sv = tape.leaf(Tensor::new(&[1, n, d], student).unwrap());
        let ht = FeatureMap::new(&mut tape, tv, FeatureKind::TeacherRaw).unwrap();
        let hs = FeatureMap::new(&mut tape, sv, FeatureKind::StudentRaw).unwrap();
        let out = total_alignment_loss(&mut tape, &ht, &hs, &w).unwrap();
        let grads = tape.backward(out.combined).unwrap();
        let gt = grads.wrt(&tape, tv);
        prop_assert!(gt.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn diagonal_perturbation_cannot_change_losses(
        (n, d, teacher, student) in feature_case(),
        junk in prop::collection::vec(-100.0f64..100.0, 5),
    ) {
        let eval = |perturb: bool| -> (f64, f64) {
            let mut tape = Tape::<f64>::new();
            let mut grams = Vec::new();
            for (x, kind) in [(&teacher, FeatureKind::TeacherRaw), (&student, FeatureKind::StudentRaw)] {
                let v = tape.constant(Tensor::new(&[1, n, d], x.clone()).unwrap());
                let z = FeatureMap::new(&mut tape, v, kind).unwrap().normalize(&mut tape);
                let full = tape.batched_matmul(z.values, z.values, true).unwrap();
                let full = if perturb {
                    let mut diag = vec![0.0; n * n];
                    for i in 0..n {
                        diag[i * n + i] = junk[i];
                    }
                    let c = tape.constant(Tensor::new(&[1, n, n], diag).unwrap());
                    tape.add(full, c).unwrap()
                } else {
                    full
                };
                grams.push(gram_from_full(&mut tape, full, kind.is_teacher()).unwrap());
            }
            let mse = struc_mse_loss(&mut tape, &grams[0], &grams[1]).unwrap();
            let pt = relational_softmax(&mut tape, &grams[0], 0.2).unwrap();
            let ps = relational_softmax(&mut tape, &grams[1], 0.2).unwrap();
            let kl = struc_kl_loss(&mut tape, &pt, &ps).unwrap();
            (tape.scalar_value(mse), tape.scalar_value(kl))
        };
        prop_assert_eq!(eval(false), eval(true));
    }

    #[test]
    fn combined_is_weighted_sum(
        (n, d, teacher, student) in feature_case(),
        lp in 0.0f64..3.0,
        ls in 0.0f64..3.0,
        kl in any::<bool>(),
    ) {
        let base = if kl { LossWeights::kl_default() } else { LossWeights::mse_default() };
        let w = LossWeights { lambda_proj: lp, lambda_struc: ls, ..base };
        let mut tape = Tape::<f64>::new();
        let tv = tape.constant(Tensor::new(&[1, n, d], teacher).unwrap());
        let sv = tape.leaf(Tensor::new(&[1, n, d], student).unwrap());
        let ht = FeatureMap::new(&mut tape, tv, FeatureKind::TeacherRaw).unwrap();
        let hs = FeatureMap::new(&mut tape, sv, FeatureKind::StudentRaw).unwrap();
        let (p, s, c) = total_alignment_loss(&mut tape, &ht, &hs, &w).unwrap().values(&tape);
        prop_assert!((c - (lp * p + ls * s)).abs() < 1e-6);
    }
}
