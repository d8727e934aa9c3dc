//! Randomised invariants of the numerical building blocks, 1000 cases each.

use proptest::collection::vec;
use proptest::prelude::*;

use dualedit::checkpoint;
use dualedit::editor::{adapter_apply, gate_similarity, AdapterModes, AdapterParams, CombineMode, ScaleMode};
use dualedit::optim::Adam;
use dualedit::tensor::{Tape, Tensor};

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(1000)
}

/// A `rows × cols` matrix with entries in `[-lim, lim]`.
fn matrix(rows: std::ops::RangeInclusive<usize>, cols: usize, lim: f64) -> impl Strategy<Value = Tensor<f64>> {
    rows.prop_flat_map(move |r| vec(-lim..lim, r * cols).prop_map(move |d| Tensor::new(vec![r, cols], d).unwrap()))
}

fn softmax(t: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.borrowed(t, false);
    let p = tape.softmax_lastdim(v).unwrap();
    tape.value(p).clone()
}

fn kl(p: &Tensor<f64>, q: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let (a, b) = (tape.borrowed(p, false), tape.borrowed(q, false));
    let k = tape.kl_divergence(a, b).unwrap();
    tape.value(k).item()
}

fn modes() -> impl Strategy<Value = AdapterModes> {
    prop_oneof![Just(ScaleMode::Literal), Just(ScaleMode::Scaled)]
        .prop_map(|scale| AdapterModes { combine: CombineMode::Replace, scale })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn softmax_rows_are_distributions(
        (t, shift) in (1usize..6).prop_flat_map(|c| (matrix(1..=4, c, 30.0), -50.0..50.0f64))
    ) {
        let p = softmax(&t);
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shifted = softmax(&t.map(|x| x + shift));
        prop_assert!(p.max_abs_diff(&shifted) <= 1e-12);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself(
        (a, b) in (1usize..8).prop_flat_map(|c| (matrix(1..=3, c, 8.0), matrix(1..=1, c, 8.0)))
    ) {
        let p = softmax(&a);
        let q = softmax(&Tensor::new(p.shape().to_vec(), b.row(0).iter().copied().cycle().take(p.numel()).collect()).unwrap());
        prop_assert!(kl(&p, &q) >= -1e-12);
        prop_assert_eq!(kl(&p, &p), 0.0);
    }

    #[test]
    fn cosine_is_bounded_symmetric_and_scale_free(
        (a, b) in (1usize..10).prop_flat_map(|n| (vec(-5.0..5.0f64, n), vec(-5.0..5.0f64, n))),
        scale in 0.01..100.0f64,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let s = gate_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s, gate_similarity(&b, &a).unwrap());
        let scaled: Vec<f64> = a.iter().map(|x| x * scale).collect();
        prop_assert!((gate_similarity(&scaled, &b).unwrap() - s).abs() <= 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        prop_assert!((gate_similarity(&neg, &b).unwrap() + s).abs() <= 1e-12);
        prop_assert!((gate_similarity(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn replace_adapter_rows_are_convex_combinations(
        (h, e, w1, w2, m) in (1usize..6).prop_flat_map(|d| (
            matrix(1..=5, d, 3.0),
            matrix(1..=5, d, 3.0),
            matrix(d..=d, d, 2.0),
            matrix(d..=d, d, 2.0),
            modes(),
        ))
    ) {
        let d = h.cols();
        let eye = Tensor::eye(d);
        let out = adapter_apply(&h, &e, [&w1, &w2, &eye], m).unwrap();
        prop_assert_eq!(out.shape(), h.shape());
        for c in 0..d {
            let col: Vec<f64> = (0..e.rows()).map(|r| e.get(r, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..out.rows() {
                let v = out.get(r, c);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{} outside [{}, {}]", v, lo, hi);
            }
        }
        // The residual form adds the same combination to the span.
        let res = AdapterModes { combine: CombineMode::ResidualAdd, ..m };
        let added = adapter_apply(&h, &e, [&w1, &w2, &eye], res).unwrap();
        for (k, (&a, &o)) in added.data().iter().zip(out.data()).enumerate() {
            prop_assert!((a - (h.data()[k] + o)).abs() <= 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact(
        tensors in vec((1usize..4, 1usize..5).prop_flat_map(|(r, c)| matrix(r..=r, c, 1e6)), 1..5),
        note in "[a-z]{0,12}",
    ) {
        let names: Vec<String> = (0..tensors.len()).map(|k| format!("t{k}")).collect();
        let named: Vec<(&str, &Tensor<f64>)> = names.iter().map(|n| n.as_str()).zip(&tensors).collect();
        let meta = serde_json::json!({ "note": note });
        let ck = checkpoint::decode(&checkpoint::encode(&named, meta.clone()).unwrap()).unwrap();
        prop_assert_eq!(&ck.meta, &meta);
        prop_assert_eq!(ck.tensors.len(), tensors.len());
        for ((n, t), (m, u)) in ck.tensors.iter().zip(names.iter().zip(&tensors)) {
            prop_assert_eq!(n, m);
            prop_assert_eq!(t.shape(), u.shape());
            let bits = |x: &Tensor<f64>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(t), bits(u));
        }
    }

    #[test]
    fn adapter_checkpoint_round_trip(
        d in 1usize..6,
        seed in any::<u64>(),
        step in 0u64..10_000,
        layers in (prop::option::of(0usize..8), prop::option::of(0usize..8)),
        residual in any::<bool>(),
    ) {
        let combine = if residual { CombineMode::ResidualAdd } else { CombineMode::Replace };
        let modes = AdapterModes { combine, scale: ScaleMode::Literal };
        let params = AdapterParams::<f64>::init(d, layers.0, layers.1, modes, seed);
        let mut adam = Adam::new(Default::default(), &[&[d, d][..]; 6]);
        adam.step = step;
        for (k, m) in adam.m.iter_mut().enumerate() {
            *m = m.map(|_| k as f64 * 0.5 + step as f64);
        }
        let ck = checkpoint::decode(&params.encode(Some(&adam)).unwrap()).unwrap();
        let (back, back_adam) = AdapterParams::<f64>::from_checkpoint(&ck).unwrap();
        prop_assert_eq!(&back, &params);
        let back_adam = back_adam.unwrap();
        prop_assert_eq!(back_adam.step, step);
        prop_assert_eq!(&back_adam.m, &adam.m);
        prop_assert_eq!(&back_adam.v, &adam.v);
        let ck = checkpoint::decode(&params.encode(None).unwrap()).unwrap();
        prop_assert!(AdapterParams::<f64>::from_checkpoint(&ck).unwrap().1.is_none());
    }
}
