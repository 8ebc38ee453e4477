use mcl_core::mcl::assign;
use mcl_core::numerics::{Matrix, Rng};
use mcl_core::selection::{evaluate_windows, FeatureLayers, Strategy};
use mcl_core::seq2seq::{forward_eval, sample_losses, Architecture, Seq2SeqModel, SequenceBatch, SequenceSpec};
use proptest::prelude::*;

fn model(seed: u64, spec: SequenceSpec, hidden: usize, layers: usize, scale: f64) -> Seq2SeqModel<f64> {
    let arch = Architecture {
        hidden,
        layers,
        ..Architecture::default()
    };
    let mut m = Seq2SeqModel::init(&mut Rng::new(seed), spec, arch);
    for t in mcl_core::params::Params::tensors_mut(&mut m) {
        t.iter_mut().for_each(|v| *v *= scale);
    }
    m
}

fn windows(seed: u64, count: usize, len: usize) -> Vec<Vec<f32>> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn assignments_are_one_hot_and_pick_the_minimum(
        losses in proptest::collection::vec(0.0f64..10.0, 1..40),
        members in 1usize..5,
    ) {
        let rows = losses.len() / members;
        prop_assume!(rows > 0);
        let data = losses[..rows * members].to_vec();
        let m = Matrix::from_vec(rows, members, data).unwrap();
        let a = assign(&m).unwrap();
        for (i, row) in a.to_dense().iter().enumerate() {
            prop_assert_eq!(row.iter().map(|&v| v as usize).sum::<usize>(), 1);
            let w = a.winner(i);
            prop_assert_eq!(row[w], 1);
            for j in 0..members {
                prop_assert!(m.get(i, w) <= m.get(i, j));
            }
        }
        prop_assert_eq!(a.counts().iter().sum::<usize>(), rows);
    }

    #[test]
    fn hidden_outputs_stay_inside_the_unit_interval(
        seed in any::<u64>(),
        hidden in 1usize..6,
        layers in 1usize..4,
        scale in 0.5f64..4.0,
    ) {
        let spec = SequenceSpec::new(5, 2, 3).unwrap();
        let m = model(seed, spec, hidden, layers, scale);
        let w = windows(seed ^ 1, 3, 15);
        let batch = SequenceBatch::<f64>::from_windows(&spec, w.iter().map(|v| v.as_slice())).unwrap();
        let out = forward_eval(&m, &batch).unwrap();
        for stack in [&out.encoder, &out.decoder, &out.predictor] {
            for l in 0..layers {
                for h in stack.layer_outputs(l) {
                    prop_assert!(h.data().iter().all(|v| v.abs() < 1.0));
                }
            }
        }
        for l in sample_losses(&m, &batch, &out).unwrap() {
            prop_assert!(l.total >= 0.0 && l.recon >= 0.0 && l.pred >= 0.0);
        }
    }

    #[test]
    fn oracle_choice_is_never_worse_than_recon_choice(seed in any::<u64>(), members in 1usize..4) {
        let spec = SequenceSpec::new(6, 3, 2).unwrap();
        let ens: Vec<_> = (0..members).map(|m| model(seed.wrapping_add(m as u64), spec, 3, 1, 1.0)).collect();
        let w = windows(seed ^ 7, 5, 12);
        let refs: Vec<&[f32]> = w.iter().map(|v| v.as_slice()).collect();
        let eval = evaluate_windows(&ens, &refs, FeatureLayers::Top).unwrap();
        let oracle = eval.choices(Strategy::Oracle, None).unwrap().unwrap();
        let recon = eval.choices(Strategy::Reconstruction, None).unwrap().unwrap();
        for i in 0..eval.len() {
            prop_assert!(oracle[i] < members && recon[i] < members);
            for m in 0..members {
                prop_assert!(eval.pred_mse(i, oracle[i]) <= eval.pred_mse(i, m));
            }
        }
        let again = evaluate_windows(&ens, &refs, FeatureLayers::Top).unwrap();
        prop_assert_eq!(again.choices(Strategy::Reconstruction, None).unwrap().unwrap(), recon);
    }
}
