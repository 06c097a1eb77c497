use hmoe::autodiff::Tape;
use hmoe::gating::{entropy_loss, gamma_en, gate_values, kl_balance, lambda_grl, ImportanceVector};
use hmoe::training::plan_mixup;
use hmoe::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0..5.0f64, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn gate_case() -> impl Strategy<Value = (Tensor, Tensor, f64)> {
    (1usize..5, 1usize..7, 1usize..5, -10.0..-2.0f64).prop_flat_map(|(rows, k, d, log_eps)| {
        (matrix(rows, d), matrix(k, d), Just(10f64.powf(log_eps)))
    })
}

proptest! {
    #[test]
    fn gate_rows_are_distributions((v, e, eps) in gate_case()) {
        let mut tape = Tape::new();
        let (v, e) = (tape.constant(v), tape.constant(e));
        let gate = gate_values(&mut tape, v, e, eps).unwrap();
        let p = tape.value(gate.p).clone();
        let (rows, k) = p.dims2().unwrap();
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let dist = gate.d.row(r);
            for i in 0..k {
                for j in 0..k {
                    if dist[i] < dist[j] {
                        prop_assert!(row[i] > row[j]);
                    }
                }
            }
        }
        let h = entropy_loss(&mut tape, gate.p).unwrap();
        let kl = kl_balance(&mut tape, gate.p).unwrap();
        let (h, kl) = (tape.value(h).data()[0], tape.value(kl).data()[0]);
        let ln_k = (k as f64).ln();
        prop_assert!(h >= -1e-12 && h <= ln_k + 1e-12);
        prop_assert!(kl >= -1e-12 && kl <= ln_k + 1e-12);
        let imp = ImportanceVector::from_probs(&p).unwrap();
        prop_assert!((imp.share.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((imp.importance.iter().sum::<f64>() - rows as f64).abs() < 1e-9);
    }

    #[test]
    fn schedules_are_monotone_and_bounded(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(gamma_en(lo).unwrap() <= gamma_en(hi).unwrap());
        prop_assert!(lambda_grl(lo).unwrap() <= lambda_grl(hi).unwrap());
        prop_assert!((0.0..1.0).contains(&lambda_grl(hi).unwrap()));
        prop_assert!((0.0..=1.0).contains(&gamma_en(hi).unwrap()));
    }

    #[test]
    fn mixup_partners_stay_in_their_group(groups in prop::collection::vec(0usize..4, 1..40), seed in any::<u64>()) {
        let plan = plan_mixup(&groups, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut covered = vec![false; groups.len()];
        for part in &plan.parts {
            prop_assert_eq!(part.rows.len(), part.partners.len());
            let g = groups[part.rows[0]];
            for (&i, &j) in part.rows.iter().zip(&part.partners) {
                prop_assert_eq!(groups[i], g);
                prop_assert_eq!(groups[j], g);
                covered[i] = true;
            }
            prop_assert!((0.0..=1.0).contains(&part.beta));
        }
        prop_assert!(covered.into_iter().all(|c| c));
    }
}

#[test]
fn schedule_values() {
    assert_eq!(gamma_en(0.0).unwrap(), 0.0);
    assert_eq!(gamma_en(0.5).unwrap(), 1.0);
    assert_eq!(gamma_en(0.75).unwrap(), 1.0);
    assert_eq!(lambda_grl(0.0).unwrap(), 0.0);
    assert!((lambda_grl(1.0).unwrap() - 0.99991).abs() < 1e-5);
    assert!(gamma_en(1.5).is_err());
    assert!(lambda_grl(-0.1).is_err());
}
