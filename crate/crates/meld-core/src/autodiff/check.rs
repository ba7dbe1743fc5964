//! Central finite-difference gradient checking.

use ndarray::ArrayD;
use rand::Rng;

use super::{Tape, Var};

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (param index, flat coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compare analytic gradients of `f` against central finite differences.
///
/// `f` must be a deterministic pure function of the parameter values (any
/// internal randomness must be derived from a fixed seed inside `f`). At
/// most `max_coords` coordinates are probed, sampled reproducibly from
/// `seed` when the parameter count is larger.
pub fn fd_check<F>(params: &[ArrayD<f64>], f: F, step: f64, max_coords: usize, seed: u64) -> FdReport
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let eval = |values: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = f(&tape, &vars);
        tape.scalar_value(loss)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&tape, &vars);
    tape.backward(loss).expect("backward in fd_check");
    // Gradients can come back in non-standard layout (ndarray's dot returns
    // column-major output for unit trailing dims); normalize for as_slice.
    let grads: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(v, p)| {
            tape.grad(*v)
                .map(|g| g.as_standard_layout().to_owned())
                .unwrap_or_else(|| ArrayD::zeros(p.raw_dim()))
        })
        .collect();

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.len() {
            coords.push((pi, ci));
        }
    }
    if coords.len() > max_coords {
        let mut rng = crate::rng::stream(seed, "fd-coords", 0);
        let mut picked = Vec::with_capacity(max_coords);
        for _ in 0..max_coords {
            picked.push(coords[rng.random_range(0..coords.len())]);
        }
        coords = picked;
    }

    let mut report = FdReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<ArrayD<f64>> = params
        .iter()
        .map(|p| p.as_standard_layout().to_owned())
        .collect();
    for (pi, ci) in coords {
        let orig = work[pi].as_slice_mut().unwrap()[ci];
        work[pi].as_slice_mut().unwrap()[ci] = orig + step;
        let plus = eval(&work);
        work[pi].as_slice_mut().unwrap()[ci] = orig - step;
        let minus = eval(&work);
        work[pi].as_slice_mut().unwrap()[ci] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads[pi].as_slice().unwrap()[ci];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((pi, ci, analytic, numeric));
        }
    }
    report
}

// ---------------------------------------------------------------------------
// tests: every primitive against finite differences
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;
    const STEP: f64 = 1e-5;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Random linear functional of the output, so dLoss/dOut is dense.
    fn probe(tape: &Tape, out: Var, seed: u64) -> Var {
        let shape = tape.shape(out);
        let mut rng = crate::rng::stream(seed, "probe", 0);
        let w = tape.constant(ArrayD::from_shape_fn(IxDyn(&shape), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        }));
        let prod = tape.mul(out, w);
        tape.sum_all(prod)
    }

    fn assert_fd<F>(params: &[ArrayD<f64>], f: F, label: &str)
    where
        F: Fn(&Tape, &[Var]) -> Var,
    {
        let report = fd_check(params, f, STEP, 400, 99);
        assert!(
            report.max_rel_err < TOL,
            "{label}: rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn matmul_identity_and_gradient() {
        let tape = Tape::new();
        let eye = tape.constant(ArrayD::from_shape_fn(IxDyn(&[3, 3]), |ix| {
            if ix[0] == ix[1] {
                1.0
            } else {
                0.0
            }
        }));
        let mut rng = crate::rng::stream(0, "mm", 0);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let av = tape.leaf(a.clone(), false);
        let out = tape.matmul(eye, av);
        assert_eq!(tape.value(out), a);
    }

    #[test]
    fn sum_matmul_gradient_is_column_sums() {
        // d sum(A B) / dA = row-broadcast of B's column sums.
        let tape = Tape::new();
        let mut rng = crate::rng::stream(1, "mmgrad", 0);
        let a = tape.leaf(rand_tensor(&mut rng, &[2, 3]), true);
        let b_arr = rand_tensor(&mut rng, &[3, 4]);
        let b = tape.constant(b_arr.clone());
        let out = tape.matmul(a, b);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        let ga = tape.grad(a).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let expect: f64 = (0..4).map(|j| b_arr[[c, j]]).sum();
                assert!((ga[[r, c]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[]), 3.0), true);
        let sq = tape.mul(x, x);
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap()[[]], 6.0);
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[2, 5]), 3.7));
        let y = tape.softmax_last(x);
        for v in tape.value(y).iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_finite_for_huge_inputs() {
        let tape = Tape::new();
        let x = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![1e4, -1e4, 0.0]).unwrap());
        let y = tape.log_softmax_last(x);
        assert!(tape.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_twice_errors() {
        let tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[]), 1.0), true);
        let y = tape.mul(x, x);
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn fd_matmul() {
        let mut rng = crate::rng::stream(10, "shapes", 0);
        for case in 0..20 {
            let (m, k, n) = (
                1 + rng.random_range(0..4),
                1 + rng.random_range(0..4),
                1 + rng.random_range(0..4),
            );
            let params = vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n])];
            assert_fd(
                &params,
                |t, vs| {
                    let out = t.matmul(vs[0], vs[1]);
                    probe(t, out, case)
                },
                "matmul",
            );
        }
    }

    #[test]
    fn fd_bmm() {
        let mut rng = crate::rng::stream(11, "shapes", 0);
        for case in 0..20 {
            let (b, m, k, n) = (
                1 + rng.random_range(0..3),
                1 + rng.random_range(0..3),
                1 + rng.random_range(0..3),
                1 + rng.random_range(0..3),
            );
            let params = vec![
                rand_tensor(&mut rng, &[b, m, k]),
                rand_tensor(&mut rng, &[b, k, n]),
            ];
            assert_fd(
                &params,
                |t, vs| {
                    let out = t.bmm(vs[0], vs[1]);
                    probe(t, out, case)
                },
                "bmm",
            );
        }
    }

    #[test]
    fn fd_add_mul_broadcast() {
        let mut rng = crate::rng::stream(12, "shapes", 0);
        let shapes: [(&[usize], &[usize]); 5] = [
            (&[3, 4], &[3, 4]),
            (&[3, 4], &[4]),
            (&[3, 4], &[3, 1]),
            (&[2, 3, 4], &[1, 4]),
            (&[5], &[]),
        ];
        for case in 0..20 {
            let (sa, sb) = shapes[case % shapes.len()];
            let params = vec![rand_tensor(&mut rng, sa), rand_tensor(&mut rng, sb)];
            assert_fd(
                &params,
                |t, vs| {
                    let s = t.add(vs[0], vs[1]);
                    let m = t.mul(s, vs[1]);
                    probe(t, m, case as u64 + 100)
                },
                "add/mul broadcast",
            );
        }
    }

    #[test]
    fn fd_softmax_and_log_softmax() {
        let mut rng = crate::rng::stream(13, "shapes", 0);
        for case in 0..20 {
            let rows = 1 + rng.random_range(0..4);
            let cols = 2 + rng.random_range(0..5);
            let params = vec![rand_tensor(&mut rng, &[rows, cols])];
            assert_fd(
                &params,
                |t, vs| {
                    let s = t.softmax_last(vs[0]);
                    probe(t, s, case)
                },
                "softmax",
            );
            let params = vec![rand_tensor(&mut rng, &[rows, cols])];
            assert_fd(
                &params,
                |t, vs| {
                    let s = t.log_softmax_last(vs[0]);
                    probe(t, s, case + 50)
                },
                "log_softmax",
            );
        }
    }

    #[test]
    fn fd_layer_norm() {
        let mut rng = crate::rng::stream(14, "shapes", 0);
        for case in 0..20 {
            let rows = 1 + rng.random_range(0..4);
            let d = 2 + rng.random_range(0..6);
            let params = vec![
                rand_tensor(&mut rng, &[rows, d]),
                rand_tensor(&mut rng, &[d]),
                rand_tensor(&mut rng, &[d]),
            ];
            assert_fd(
                &params,
                |t, vs| {
                    let y = t.layer_norm(vs[0], vs[1], vs[2], 1e-5);
                    probe(t, y, case)
                },
                "layer_norm",
            );
        }
    }

    #[test]
    fn fd_gelu_tanh() {
        let mut rng = crate::rng::stream(15, "shapes", 0);
        for case in 0..20 {
            let n = 1 + rng.random_range(0..6);
            let params = vec![rand_tensor(&mut rng, &[n, 3])];
            assert_fd(
                &params,
                |t, vs| {
                    let g = t.gelu(vs[0]);
                    let h = t.tanh(g);
                    probe(t, h, case)
                },
                "gelu/tanh",
            );
        }
    }

    #[test]
    fn fd_dropout_fixed_mask() {
        // Dropout with a fixed seed is a fixed linear map, so FD applies.
        let mut rng = crate::rng::stream(16, "shapes", 0);
        for case in 0..20 {
            let n = 2 + rng.random_range(0..5);
            let params = vec![rand_tensor(&mut rng, &[n, 4])];
            assert_fd(
                &params,
                |t, vs| {
                    let mut drop_rng = crate::rng::stream(500 + case, "mask", 0);
                    let y = t.dropout(vs[0], 0.4, true, &mut drop_rng);
                    probe(t, y, case)
                },
                "dropout",
            );
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_bad_rate_panics() {
        let tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[4]), 2.0), true);
        let mut rng = crate::rng::stream(0, "d", 0);
        let y = tape.dropout(x, 0.9, false, &mut rng);
        assert_eq!(x, y);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let tape = Tape::new();
            let x = tape.leaf(ArrayD::from_elem(IxDyn(&[4]), 2.0), true);
            let mut rng = crate::rng::stream(0, "d", 0);
            tape.dropout(x, 1.0, true, &mut rng)
        }));
        assert!(result.is_err());
    }

    #[test]
    fn dropout_train_scales_by_keep() {
        let tape = Tape::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[10_000]), 1.0), true);
        let mut rng = crate::rng::stream(7, "d", 0);
        let y = tape.dropout(x, 0.25, true, &mut rng);
        let v = tape.value(y);
        let kept = v.iter().filter(|&&e| e != 0.0).count();
        for &e in v.iter() {
            assert!(e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-12);
        }
        let frac = kept as f64 / 10_000.0;
        assert!((frac - 0.75).abs() < 0.02, "kept fraction {frac}");
    }

    #[test]
    fn fd_embedding() {
        let mut rng = crate::rng::stream(17, "shapes", 0);
        for case in 0..20 {
            let v = 3 + rng.random_range(0..5);
            let d = 2 + rng.random_range(0..4);
            let n = 1 + rng.random_range(0..6);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
            let params = vec![rand_tensor(&mut rng, &[v, d])];
            let ids2 = ids.clone();
            assert_fd(
                &params,
                move |t, vs| {
                    let e = t.embedding(vs[0], &ids2);
                    probe(t, e, case)
                },
                "embedding",
            );
        }
    }

    #[test]
    fn fd_conv1d() {
        let mut rng = crate::rng::stream(18, "shapes", 0);
        for case in 0..20 {
            let t_len = 2 + rng.random_range(0..5);
            let c_in = 1 + rng.random_range(0..3);
            let c_out = 1 + rng.random_range(0..3);
            let width = [1, 3, 5][rng.random_range(0..3)];
            let params = vec![
                rand_tensor(&mut rng, &[t_len, c_in]),
                rand_tensor(&mut rng, &[c_out, c_in, width]),
                rand_tensor(&mut rng, &[c_out]),
            ];
            assert_fd(
                &params,
                |t, vs| {
                    let y = t.conv1d(vs[0], vs[1], vs[2]);
                    probe(t, y, case)
                },
                "conv1d",
            );
        }
    }

    #[test]
    fn fd_batch_norm_train_and_eval() {
        let mut rng = crate::rng::stream(19, "shapes", 0);
        for case in 0..20 {
            let t_len = 2 + rng.random_range(0..5);
            let c = 1 + rng.random_range(0..4);
            let params = vec![
                rand_tensor(&mut rng, &[t_len, c]),
                rand_tensor(&mut rng, &[c]),
                rand_tensor(&mut rng, &[c]),
            ];
            let rm = vec![0.1; c];
            let rv = vec![0.9; c];
            for train in [true, false] {
                let (rm, rv) = (rm.clone(), rv.clone());
                assert_fd(
                    &params,
                    move |t, vs| {
                        let (y, _) =
                            t.batch_norm_1d(vs[0], vs[1], vs[2], &rm, &rv, 0.1, 1e-5, train);
                        probe(t, y, case)
                    },
                    "batch_norm",
                );
            }
        }
    }

    #[test]
    fn batch_norm_running_stats_update() {
        let tape = Tape::new();
        let x = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[4, 1]), vec![1.0, 3.0, 5.0, 7.0]).unwrap(),
            true,
        );
        let gamma = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 1.0), true);
        let beta = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.0), true);
        let (_, upd) = tape.batch_norm_1d(x, gamma, beta, &[0.0], &[1.0], 0.1, 1e-5, true);
        let (rm, rv) = upd.unwrap();
        // batch mean 4, population var 5.
        assert!((rm[0] - 0.4).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
        let tape2 = Tape::new();
        let x2 = tape2.leaf(ArrayD::from_elem(IxDyn(&[2, 1]), 2.0), false);
        let g2 = tape2.leaf(ArrayD::from_elem(IxDyn(&[1]), 1.0), false);
        let b2 = tape2.leaf(ArrayD::from_elem(IxDyn(&[1]), 0.0), false);
        let (y, upd2) = tape2.batch_norm_1d(x2, g2, b2, &[2.0], &[4.0], 0.1, 0.0, false);
        assert!(upd2.is_none());
        for v in tape2.value(y).iter() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn fd_masked_fill_and_exact_zero_grads() {
        let mut rng = crate::rng::stream(20, "shapes", 0);
        for case in 0..20 {
            let r = 2 + rng.random_range(0..4);
            let c = 2 + rng.random_range(0..4);
            let mask = ArrayD::from_shape_fn(IxDyn(&[r, c]), |_| rng.random::<f64>() < 0.4);
            let params = vec![rand_tensor(&mut rng, &[r, c])];
            let m2 = mask.clone();
            assert_fd(
                &params,
                move |t, vs| {
                    let y = t.masked_fill(vs[0], &m2, -1e30);
                    let s = t.softmax_last(y);
                    probe(t, s, case)
                },
                "masked_fill+softmax",
            );
            // Masked coordinates receive exactly zero gradient.
            let tape = Tape::new();
            let x = tape.leaf(params[0].clone(), true);
            let y = tape.masked_fill(x, &mask, -1e30);
            let s = tape.softmax_last(y);
            let loss = probe(&tape, s, case);
            tape.backward(loss).unwrap();
            let g = tape.grad(x).unwrap();
            for (gv, mv) in g.iter().zip(mask.iter()) {
                if *mv {
                    assert_eq!(*gv, 0.0);
                }
            }
        }
    }

    #[test]
    fn fd_concat_slice_reshape_permute() {
        let mut rng = crate::rng::stream(21, "shapes", 0);
        for case in 0..20 {
            let r = 2 + rng.random_range(0..3);
            let c = 2 + rng.random_range(0..3);
            let params = vec![rand_tensor(&mut rng, &[r, c]), rand_tensor(&mut rng, &[r, c])];
            assert_fd(
                &params,
                |t, vs| {
                    let cat = t.concat(&[vs[0], vs[1]], 0);
                    let sl = t.slice(cat, 0, 1, 2 * t.shape(vs[0])[0] - 1);
                    let flat_len: usize = t.shape(sl).iter().product();
                    let rs = t.reshape(sl, &[flat_len, 1]);
                    let pm = t.permute(rs, &[1, 0]);
                    probe(t, pm, case)
                },
                "concat/slice/reshape/permute",
            );
        }
    }

    #[test]
    fn fd_pick_sum_mean() {
        let mut rng = crate::rng::stream(22, "shapes", 0);
        for case in 0..20 {
            let n = 2 + rng.random_range(0..4);
            let v = 3 + rng.random_range(0..4);
            let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
            let params = vec![rand_tensor(&mut rng, &[n, v])];
            let ids2 = ids.clone();
            assert_fd(
                &params,
                move |t, vs| {
                    let picked = t.pick_last(vs[0], &ids2);
                    let m = t.mean_all(picked);
                    let s = t.sum_all(vs[0]);
                    let sc = t.scale(s, 0.3);
                    t.add(m, sc)
                },
                "pick/sum/mean",
            );
            let _ = case;
        }
    }

    #[test]
    fn fd_composite_two_layer_model() {
        // A small end-to-end network: linear -> gelu -> layer_norm ->
        // linear -> log_softmax -> NLL, checked in one pass.
        let mut rng = crate::rng::stream(23, "composite", 0);
        let params = vec![
            rand_tensor(&mut rng, &[5, 6]),  // x
            rand_tensor(&mut rng, &[6, 7]),  // w1
            rand_tensor(&mut rng, &[7]),     // b1
            rand_tensor(&mut rng, &[7]),     // gamma
            rand_tensor(&mut rng, &[7]),     // beta
            rand_tensor(&mut rng, &[7, 4]),  // w2
            rand_tensor(&mut rng, &[4]),     // b2
        ];
        let ids = vec![0usize, 3, 1, 2, 3];
        assert_fd(
            &params,
            move |t, vs| {
                let h = t.linear(vs[0], vs[1], vs[2]);
                let h = t.gelu(h);
                let h = t.layer_norm(h, vs[3], vs[4], 1e-5);
                let logits = t.linear(h, vs[5], vs[6]);
                let logp = t.log_softmax_last(logits);
                let picked = t.pick_last(logp, &ids);
                let m = t.mean_all(picked);
                t.scale(m, -1.0)
            },
            "composite",
        );
    }
}
