use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

type T64 = super::Tensor<f64>;

fn triple_loop(a: &T64, b: &T64) -> T64 {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(i, p) * b.get(p, j);
            }
            out[i * n + j] = s;
        }
    }
    T64::new(vec![m, n], out).unwrap()
}

fn eval1(f: impl FnOnce(&mut Tape<'_, f64>) -> Var) -> T64 {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

#[test]
fn matmul_identity_and_selector() {
    let a = T64::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    let out = eval1(|t| {
        let i = t.constant(T64::eye(2));
        let a = t.constant(a.clone());
        t.matmul(i, a).unwrap()
    });
    assert_eq!(out, a);
    let out = eval1(|t| {
        let r = t.constant(T64::from_rows(&[&[1.0, 0.0]]).unwrap());
        let c = t.constant(T64::from_rows(&[&[2.0], &[5.0]]).unwrap());
        t.matmul(r, c).unwrap()
    });
    assert_eq!(out.data(), &[2.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = T64::randn(&[3, 4], 1.0, &mut rng);
    let b = T64::randn(&[4, 2], 1.0, &mut rng);
    let got = a.matmul(&b).unwrap();
    assert!(got.max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let bt = tape.transpose(vb).unwrap();
    let nt = tape.matmul_nt(va, bt).unwrap();
    assert!(tape.value(nt).max_abs_diff(&got) <= 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(T64::zeros(&[2, 3]));
    let b = tape.constant(T64::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
}

#[test]
fn softmax_examples() {
    let sm = |xs: &[f64]| {
        eval1(|t| {
            let x = t.constant(T64::from_f64(&[xs.len()], xs).unwrap());
            t.softmax_lastdim(x).unwrap()
        })
    };
    assert_eq!(sm(&[0.0, 0.0]).data(), &[0.5, 0.5]);
    assert_eq!(sm(&[1000.0, 1000.0]).data(), &[0.5, 0.5]);
    let p = sm(&[1.0, 2.0, 3.0]);
    // exp(k) / (e + e² + e³)
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
    for (g, e) in p.data().iter().zip(expect) {
        assert!((g - e).abs() < 1e-12);
    }
    for (g, e) in p.data().iter().zip([0.090031, 0.244728, 0.665241]) {
        assert!((g - e).abs() < 1e-6);
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(T64::from_f64(&[2], &[f64::NAN, 0.0]).unwrap());
    assert!(matches!(tape.softmax_lastdim(x), Err(Error::NonFinite(_))));
}

#[test]
fn causal_softmax_masks_future() {
    let out = eval1(|t| {
        let x = t.constant(T64::zeros(&[3, 3]));
        t.causal_softmax(x, 0).unwrap()
    });
    assert_eq!(out.row(0), &[1.0, 0.0, 0.0]);
    assert_eq!(out.row(1), &[0.5, 0.5, 0.0]);
    assert!((out.row(2).iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vp = tape.constant(T64::from_f64(&[p.len()], p).unwrap());
    let vq = tape.constant(T64::from_f64(&[q.len()], q).unwrap());
    let k = tape.kl_divergence(vp, vq)?;
    Ok(tape.value(k).item())
}

#[test]
fn kl_examples() {
    assert_eq!(kl(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
    let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    let got = kl(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
    assert!((got - expect).abs() < 1e-12);
    assert!((got - 0.143841).abs() < 1e-6);
    let got = kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
    assert!((got - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn kl_errors() {
    assert!(matches!(kl(&[0.5, 0.5], &[1.0]), Err(Error::Shape { .. })));
    assert!(matches!(kl(&[1.5, -0.5], &[0.5, 0.5]), Err(Error::NegativeProbability(_))));
    assert!(matches!(kl(&[0.7, 0.7], &[0.5, 0.5]), Err(Error::NotNormalized { .. })));
}

fn ce(logits: &T64, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(logits.clone());
    let c = tape.cross_entropy(l, targets, mask)?;
    Ok(tape.value(c).item())
}

#[test]
fn cross_entropy_examples() {
    let sure = T64::from_rows(&[&[0.0, 800.0, 0.0]]).unwrap();
    assert_eq!(ce(&sure, &[1], &[true]).unwrap(), 0.0);
    let uniform = T64::zeros(&[1, 4]);
    assert!((ce(&uniform, &[2], &[true]).unwrap() - 4f64.ln()).abs() < 1e-12);

    let logits = T64::from_rows(&[&[1.0, 2.0, 0.5], &[0.0, -1.0, 3.0], &[9.0, 9.0, 9.0]]).unwrap();
    let nll = |row: &[f64], y: usize| {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        -(row[y].exp() / z).ln()
    };
    let expect = 0.5 * (nll(&[1.0, 2.0, 0.5], 0) + nll(&[0.0, -1.0, 3.0], 2));
    let got = ce(&logits, &[0, 2, 1], &[true, true, false]).unwrap();
    assert!((got - expect).abs() < 1e-12);
}

#[test]
fn cross_entropy_all_masked_is_degenerate() {
    let err = ce(&T64::zeros(&[2, 3]), &[0, 1], &[false, false]).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)));
}

#[test]
fn backward_trivial_cases() {
    let w = T64::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
    let mut tape = Tape::new();
    let vw = tape.leaf(w.clone(), true);
    let s = tape.sum(vw);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(vw).unwrap().data(), &[1.0; 4]);

    let mut tape = Tape::new();
    let vw = tape.leaf(w.clone(), true);
    let frozen = tape.leaf(w.clone(), false);
    let sq = tape.mul(vw, vw).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    let other = tape.mul(frozen, vw).unwrap();
    let _ = other;
    let g = tape.backward(half).unwrap();
    assert_eq!(g.get(vw).unwrap(), &w);
    assert!(g.get(frozen).is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(T64::zeros(&[2, 2]), true);
    assert!(matches!(tape.backward(w), Err(Error::NotScalar(_))));
}

#[test]
fn grad_check_quadratic_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = T64::randn(&[3, 3], 1.0, &mut rng);
    let r = grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.sum(sq);
            Ok(t.scale(s, 0.5))
        },
        &[p],
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-9, "{r:?}");
    assert_eq!(r.coords_checked, 9);
}

#[test]
fn grad_check_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = T64::randn(&[4, 6], 2.0, &mut rng);
    let r = grad_check(
        |t, v| t.cross_entropy(v[0], &[1, 5, 0, 3], &[true, true, false, true]),
        &[logits],
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn grad_check_detects_nondeterminism() {
    use std::sync::atomic::{AtomicU64, Ordering};
    let calls = AtomicU64::new(0);
    let err = grad_check(
        |t, v| {
            let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
            let s = t.sum(v[0]);
            Ok(t.scale(s, 1.0 + k))
        },
        &[T64::full(&[2], 1.0)],
        1e-5,
        None,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonDeterministic { .. }));
}

/// Every differentiable op, composed into one scalar, checked against
/// central differences.
#[test]
fn grad_check_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![
        T64::randn(&[3, 4], 1.0, &mut rng), // x
        T64::randn(&[4, 4], 0.5, &mut rng), // w
        T64::randn(&[4], 1.0, &mut rng),    // gamma
        T64::randn(&[4], 1.0, &mut rng),    // beta
        T64::randn(&[5, 4], 1.0, &mut rng), // table
        T64::randn(&[3, 4], 1.0, &mut rng), // y
    ];
    let target = {
        let mut t = vec![0.05; 8];
        t[3] = 0.65;
        T64::from_f64(&[2, 4], &[0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25]).unwrap()
    };
    let r = grad_check(
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.layer_norm(h, v[2], v[3])?;
            let h = t.gelu(h);
            let e = t.embedding_gather(v[4], &[4, 0, 2])?;
            let h = t.add(h, e)?;
            let h = t.sub(h, v[5])?;
            let h = t.mul(h, v[5])?;
            let h = t.add_row(h, v[3])?;
            let ht = t.transpose(h)?;
            let sq = t.matmul_nt(ht, ht)?; // 4×4
            let sq = t.scale(sq, 0.3);
            let a = t.slice_rows(sq, 0, 2)?;
            let b = t.slice_cols(sq, 1, 3)?;
            let b = t.slice_rows(b, 2, 4)?;
            let b = t.concat_cols(&[b, b])?;
            let c = t.concat_rows(&[a, b])?; // 4×4
            let p = t.causal_softmax(c, 0)?;
            let q = t.softmax_lastdim(c)?;
            let pq = t.mul(p, q)?;
            let s1 = t.sum(pq);
            let qa = t.slice_rows(q, 0, 2)?;
            let tgt = t.constant(target.clone());
            let k = t.kl_divergence(tgt, qa)?;
            let xent = t.cross_entropy(c, &[0, 3, 1, 2], &[true, false, true, true])?;
            let m = t.mean(h);
            t.add_all(&[s1, k, xent, m])
        },
        &params,
        1e-5,
        None,
        0,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn kl_gradient_wrt_both_arguments() {
    let p = T64::from_f64(&[2, 3], &[0.2, 0.3, 0.5, 0.6, 0.3, 0.1]).unwrap();
    let q = T64::from_f64(&[2, 3], &[0.4, 0.4, 0.2, 0.1, 0.1, 0.8]).unwrap();
    let mut tape = Tape::new();
    let (vp, vq) = (tape.leaf(p.clone(), true), tape.leaf(q.clone(), true));
    let k = tape.kl_divergence(vp, vq).unwrap();
    let g = tape.backward(k).unwrap();
    let gq = g.get(vq).unwrap();
    let gp = g.get(vp).unwrap();
    for i in 0..6 {
        assert!((gq.data()[i] + p.data()[i] / q.data()[i] / 2.0).abs() < 1e-12);
        let expect = ((p.data()[i] / q.data()[i]).ln() + 1.0) / 2.0;
        assert!((gp.data()[i] - expect).abs() < 1e-12);
    }
}
