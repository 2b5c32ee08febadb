// Routing-by-agreement and margin-loss behavior, checked against hand
// executions of the published update rule.

use ctcaps::capsule::{
    capsule_layer, inverse_frequency_weights, margin_loss, primary_caps, routing, squash,
    MarginLossConfig,
};
use ctcaps::tensor::{Graph, Tensor};
use ctcaps::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn squash_vec(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|v| v * v).sum();
    let n = n2.sqrt();
    let f = if n > 0.0 { (n2 / (1.0 + n2)) / n } else { 0.0 };
    s.iter().map(|v| f * v).collect()
}

/// Reference routing: returns (outputs [no*dout], couplings per iteration).
fn routing_ref(preds: &[f64], ni: usize, no: usize, dout: usize, iters: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut b = vec![0.0; ni * no];
    let mut history = Vec::new();
    let mut out = vec![0.0; no * dout];
    for it in 0..iters {
        let mut c = vec![0.0; ni * no];
        for i in 0..ni {
            let row = &b[i * no..(i + 1) * no];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..no {
                c[i * no + j] = (row[j] - max).exp();
                total += c[i * no + j];
            }
            for j in 0..no {
                c[i * no + j] /= total;
            }
        }
        history.push(c.clone());
        let mut s = vec![0.0; no * dout];
        for i in 0..ni {
            for j in 0..no {
                for a in 0..dout {
                    s[j * dout + a] += c[i * no + j] * preds[(i * no + j) * dout + a];
                }
            }
        }
        let mut v = vec![0.0; no * dout];
        for j in 0..no {
            let sq = squash_vec(&s[j * dout..(j + 1) * dout]);
            v[j * dout..(j + 1) * dout].copy_from_slice(&sq);
        }
        if it + 1 == iters {
            out = v;
        } else {
            for i in 0..ni {
                for j in 0..no {
                    let mut agree = 0.0;
                    for a in 0..dout {
                        agree += preds[(i * no + j) * dout + a] * v[j * dout + a];
                    }
                    b[i * no + j] += agree;
                }
            }
        }
    }
    (out, history)
}

#[test]
fn squash_tensor_matches_reference() {
    let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
    let s = squash(&t).unwrap();
    let want = squash_vec(&[1.0, 2.0, 2.0]);
    for (a, b) in s.data()[..3].iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(&s.data()[3..], &[0.0, 0.0, 0.0]);
}

#[test]
fn routing_matches_hand_execution_over_three_iterations() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for &(ni, no, dout, iters) in
        &[(2usize, 2usize, 2usize, 3usize), (4, 3, 2, 3), (3, 1, 4, 2), (5, 2, 3, 5)]
    {
        let preds: Vec<f64> = (0..ni * no * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (want_out, want_hist) = routing_ref(&preds, ni, no, dout, iters);

        let mut g = Graph::new();
        let p = g.constant(vec![ni, no, dout], preds).unwrap();
        let (out, state) = routing(&mut g, p, iters).unwrap();

        assert_eq!(state.iterations, iters);
        assert_eq!(state.couplings.len(), iters);
        for (got, want) in state.couplings.iter().zip(&want_hist) {
            for (a, b) in got.data().iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (a, b) in g.value(out).iter().zip(&want_out) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_iteration_equals_uniform_aggregation_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (ni, no, dout) = (6, 3, 4);
    let preds: Vec<f64> = (0..ni * no * dout).map(|_| rng.gen_range(-2.0..2.0)).collect();

    let mut g = Graph::new();
    let p = g.constant(vec![ni, no, dout], preds.clone()).unwrap();
    let (out, state) = routing(&mut g, p, 1).unwrap();

    // Uniform aggregation: every coupling is exactly 1/ni... per row 1/no.
    let uniform = 1.0 / no as f64;
    assert!(state.couplings[0].data().iter().all(|c| *c == uniform));

    let mut g2 = Graph::new();
    let p2 = g2.constant(vec![ni, no, dout], preds).unwrap();
    let s = g2.coupled_sum(p2, &vec![uniform; ni * no]).unwrap();
    let v = g2.squash_rows(s).unwrap();
    assert_eq!(g.value(out), g2.value(v));
}

#[test]
fn two_inputs_one_output_single_pass_hand_example() {
    // One output capsule: softmax over a single logit gives c = 1, so the
    // output is squash(u_hat_0 + u_hat_1).
    let preds = vec![0.3, -0.2, 0.5, 0.4];
    let mut g = Graph::new();
    let p = g.constant(vec![2, 1, 2], preds).unwrap();
    let (out, state) = routing(&mut g, p, 1).unwrap();
    assert!(state.couplings[0].data().iter().all(|c| *c == 1.0));
    let want = squash_vec(&[0.8, 0.2]);
    for (a, b) in g.value(out).iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn routing_rejects_zero_iterations_and_bad_rank() {
    let mut g = Graph::new();
    let p = g.constant(vec![2, 1, 2], vec![0.1; 4]).unwrap();
    assert!(matches!(routing(&mut g, p, 0), Err(Error::Config(_))));
    let flat = g.constant(vec![4], vec![0.1; 4]).unwrap();
    assert!(matches!(routing(&mut g, flat, 3), Err(Error::Dim { .. })));
}

#[test]
fn capsule_layer_combines_predictions_and_routing() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (ni, no, dout, din) = (3, 2, 2, 4);
    let w: Vec<f64> = (0..ni * no * dout * din).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let u: Vec<f64> = (0..ni * din).map(|_| rng.gen_range(-0.5..0.5)).collect();

    // Reference: predictions by hand, then reference routing.
    let mut preds = vec![0.0; ni * no * dout];
    for i in 0..ni {
        for j in 0..no {
            for a in 0..dout {
                for b in 0..din {
                    preds[(i * no + j) * dout + a] +=
                        w[(((i * no + j) * dout) + a) * din + b] * u[i * din + b];
                }
            }
        }
    }
    let (want, _) = routing_ref(&preds, ni, no, dout, 3);

    let mut g = Graph::new();
    let wv = g.constant(vec![ni, no, dout, din], w).unwrap();
    let uv = g.constant(vec![ni, din], u).unwrap();
    let (out, _) = capsule_layer(&mut g, uv, wv, 3).unwrap();
    for (a, b) in g.value(out).iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn primary_caps_squashes_every_position() {
    let mut g = Graph::new();
    let fmap = g
        .constant(vec![4, 1, 2], vec![1.0, 0.0, 2.0, 0.0, 3.0, 5.0, 4.0, 0.0])
        .unwrap();
    let caps = primary_caps(&mut g, fmap, 2).unwrap();
    assert_eq!(g.shape(caps), &[4, 2]);
    // Position 0 of group 0 collects channels (0,1) at that position: (1,2).
    let want0 = squash_vec(&[1.0, 2.0]);
    assert!((g.value(caps)[0] - want0[0]).abs() < 1e-15);
    assert!((g.value(caps)[1] - want0[1]).abs() < 1e-15);
}

#[test]
fn margin_loss_matches_hand_computation() {
    let cfg = MarginLossConfig::default();
    let mut g = Graph::new();
    let norms = g.constant(vec![3], vec![0.8, 0.3, 0.05]).unwrap();
    let w = [1.2, 0.9, 0.9];
    let loss = margin_loss(&mut g, norms, 0, &w, &cfg).unwrap();
    // Target 0: 1.2 * (0.9-0.8)^2; absent 1: 0.5*0.9*(0.3-0.1)^2; absent 2: 0.
    let want = 1.2 * 0.01 + 0.5 * 0.9 * 0.04;
    assert!((g.value(loss)[0] - want).abs() < 1e-12);

    // A perfect prediction under the margins has zero loss.
    let mut g = Graph::new();
    let norms = g.constant(vec![3], vec![0.95, 0.05, 0.0]).unwrap();
    let loss = margin_loss(&mut g, norms, 0, &[1.0; 3], &cfg).unwrap();
    assert_eq!(g.value(loss)[0], 0.0);
}

#[test]
fn margin_loss_rejects_bad_inputs() {
    let cfg = MarginLossConfig::default();
    let mut g = Graph::new();
    let norms = g.constant(vec![3], vec![0.5, 1.0, 0.2]).unwrap();
    // Norm exactly 1 is outside the squashed range.
    assert!(matches!(
        margin_loss(&mut g, norms, 0, &[1.0; 3], &cfg),
        Err(Error::Contract(_))
    ));
    let ok = g.constant(vec![3], vec![0.5, 0.4, 0.2]).unwrap();
    assert!(margin_loss(&mut g, ok, 3, &[1.0; 3], &cfg).is_err());
    assert!(margin_loss(&mut g, ok, 0, &[1.0, 1.0], &cfg).is_err());
    assert!(matches!(
        margin_loss(&mut g, ok, 0, &[1.0, -1.0, 1.0], &cfg),
        Err(Error::Contract(_))
    ));

    let bad = MarginLossConfig {
        m_plus: 0.1,
        m_minus: 0.9,
        lambda: 0.5,
    };
    assert!(matches!(
        margin_loss(&mut g, ok, 0, &[1.0; 3], &bad),
        Err(Error::Config(_))
    ));
}

#[test]
fn inverse_frequency_weights_match_hand_values() {
    // Counts 10 and 30: raw weights 1/10 and 1/30, normalized to mean 1.
    let w = inverse_frequency_weights(&[10, 30]).unwrap();
    assert!((w[0] - 1.5).abs() < 1e-12);
    assert!((w[1] - 0.5).abs() < 1e-12);
    let mean: f64 = w.iter().sum::<f64>() / 2.0;
    assert!((mean - 1.0).abs() < 1e-12);

    // Balanced counts give unit weights.
    let w = inverse_frequency_weights(&[7, 7, 7]).unwrap();
    assert!(w.iter().all(|x| (x - 1.0).abs() < 1e-12));

    assert!(inverse_frequency_weights(&[]).is_err());
    assert!(inverse_frequency_weights(&[3, 0]).is_err());
}

proptest! {
    #[test]
    fn couplings_sum_to_one_per_input_after_every_iteration(
        ni in 1usize..7,
        no in 1usize..5,
        dout in 1usize..5,
        iters in 1usize..6,
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<f64> = (0..ni * no * dout).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let p = g.constant(vec![ni, no, dout], preds).unwrap();
        let (_, state) = routing(&mut g, p, iters).unwrap();
        for c in &state.couplings {
            for i in 0..ni {
                let row_sum: f64 = c.data()[i * no..(i + 1) * no].iter().sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-6);
                prop_assert!(c.data()[i * no..(i + 1) * no].iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn inverse_frequency_weights_always_average_one(
        counts in proptest::collection::vec(1usize..500, 1..6),
    ) {
        let w = inverse_frequency_weights(&counts).unwrap();
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        // Rarer classes never weigh less than commoner ones.
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }
}
