use proptest::prelude::*;
use stfm_core::blocks::{mab, MabParams, LAYERNORM_EPS};
use stfm_core::harness::check::{run_suite, Suite, LEMMA_TOL, PERMUTATIONS_PER_ARCH, PERM_TOL, RANDOM_ARCHITECTURES};
use stfm_core::train::presets;
use stfm_core::{ParamStore, Rng, SetModel, Tape, Tensor};

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

fn layernorm(rows: &[Vec<f64>], gain: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + LAYERNORM_EPS).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

/// Loop-by-loop multihead attention block for one set, written from the
/// block definition without any tape ops.
fn naive_mab(store: &ParamStore, p: &MabParams, x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = |id| mat(&store.get(id).value);
    let mh = &p.multihead;
    let (q, k, v) = (mm(x, &w(mh.wq)), mm(y, &w(mh.wk)), mm(y, &w(mh.wv)));
    let d = mh.dim;
    let dh = d / mh.heads;
    let scale = (d as f64).sqrt();
    let mut heads_out = vec![vec![0.0; d]; x.len()];
    for h in 0..mh.heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / scale)
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                heads_out[i][c] = e.iter().zip(&v).map(|(ej, vj)| ej / z * vj[c]).sum();
            }
        }
    }
    let att = mm(&heads_out, &w(mh.wo));
    let res = match &p.residual {
        None => x.to_vec(),
        Some(lin) => {
            let b = store.get(lin.bias.unwrap()).value.row(0).to_vec();
            mm(x, &w(lin.weight)).into_iter().map(|r| r.iter().zip(&b).map(|(a, c)| a + c).collect()).collect()
        }
    };
    let pre: Vec<Vec<f64>> = res.iter().zip(&att).map(|(a, b)| a.iter().zip(b).map(|(s, t)| s + t).collect()).collect();
    let row = |id| store.get(id).value.row(0).to_vec();
    let h = layernorm(&pre, &row(p.ln1.gain), &row(p.ln1.bias));
    let ffb = row(p.ff.bias.unwrap());
    let ff: Vec<Vec<f64>> = mm(&h, &w(p.ff.weight))
        .into_iter()
        .map(|r| r.iter().zip(&ffb).map(|(a, b)| (a + b).max(0.0)).collect())
        .collect();
    let out: Vec<Vec<f64>> = h.iter().zip(&ff).map(|(a, b)| a.iter().zip(b).map(|(s, t)| s + t).collect()).collect();
    layernorm(&out, &row(p.ln2.gain), &row(p.ln2.bias))
}

fn perturb(store: &mut ParamStore, rng: &mut Rng) {
    // move gains and biases off their initial constants
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.normal());
    }
}

#[test]
fn mab_matches_loop_oracle_over_stacked_sets() {
    for (dx, d, heads) in [(8, 8, 2), (3, 8, 4), (1, 6, 3)] {
        let mut rng = Rng::new(dx as u64 * 31 + heads as u64);
        let mut store = ParamStore::new();
        let p = MabParams::new(&mut store, "mab", dx, 5, d, heads, &mut rng).unwrap();
        perturb(&mut store, &mut rng);
        let (nx, ny, groups) = (4, 6, 3);
        let x = Tensor::from_fn(groups * nx, dx, |_, _| rng.normal());
        let y = Tensor::from_fn(groups * ny, 5, |_, _| rng.normal());

        let mut tape = Tape::inference();
        let bound = store.bind(&mut tape);
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let out = mab(&mut tape, &bound, &xv, &yv, &p, groups).unwrap();

        for g in 0..groups {
            let want = naive_mab(&store, &p, &mat(&x.row_block(g * nx, nx)), &mat(&y.row_block(g * ny, ny)));
            for (i, row) in want.iter().enumerate() {
                for (j, w) in row.iter().enumerate() {
                    let got = out.value().get(g * nx + i, j);
                    assert!((got - w).abs() <= 1e-12 * w.abs().max(1.0), "dx {dx} set {g} ({i},{j}): {got} vs {w}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(rows, cols, |_, _| 10.0 * rng.normal());
        let mut tape = Tape::inference();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v + shift));
        let sa = tape.softmax_rows(&a, 1.0).unwrap();
        let sb = tape.softmax_rows(&b, 1.0).unwrap();
        for r in 0..rows {
            let row = sa.value().row(r);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, q) in row.iter().zip(sb.value().row(r)) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_rows_are_standardised(rows in 1usize..6, cols in 2usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(rows, cols, |_, _| 1.0 + 5.0 * rng.normal());
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let gain = tape.constant(Tensor::ones(1, cols));
        let bias = tape.constant(Tensor::zeros(1, cols));
        let y = tape.layernorm_rows(&xv, &gain, &bias, LAYERNORM_EPS).unwrap();
        for r in 0..rows {
            let row = y.value().row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let src = x.row(r);
            let m = src.iter().sum::<f64>() / cols as f64;
            let v = src.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-12);
            // eps shrinks the variance to v / (v + eps)
            prop_assert!((var - v / (v + LAYERNORM_EPS)).abs() < 1e-12, "var {var}");
        }
    }
}

#[test]
fn models_are_permutation_invariant_and_blocks_equivariant() {
    let report = run_suite(Suite::Perm, 7).unwrap();
    assert!(report.passed(), "{:#?}", report.failures().collect::<Vec<_>>());
    let models = report.cases.iter().filter(|c| c.name.contains("model")).count();
    assert_eq!(models, RANDOM_ARCHITECTURES);
    assert!(PERMUTATIONS_PER_ARCH >= 100);
    for block in ["sab equivariance", "isab equivariance", "mab invariance in Y"] {
        assert!(report.cases.iter().any(|c| c.name == block && c.worst <= PERM_TOL));
    }
}

#[test]
fn mean_and_sum_constructions_hold() {
    let report = run_suite(Suite::Lemma, 2).unwrap();
    assert_eq!(report.cases.len(), 3);
    for c in &report.cases {
        assert!(c.worst <= LEMMA_TOL, "{c}");
    }
}

#[test]
fn every_preset_parameter_receives_gradient() {
    for name in presets::NAMES {
        let cfg = presets::by_name(name).unwrap();
        let mut rng = Rng::new(4);
        let model = SetModel::new(cfg.model.clone(), &mut rng).unwrap();
        let (groups, n) = (2, 6);
        let x = Tensor::from_fn(groups * n, cfg.model.encoder.input_dim, |_, _| rng.normal());
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &bound, &xv, groups).unwrap();
        let c = tape.constant(Tensor::from_fn(out.rows(), out.cols(), |_, _| rng.normal()));
        let weighted = tape.mul(&out, &c).unwrap();
        let loss = tape.sum_all(&weighted);
        let grads = tape.backward(&loss).unwrap();
        for id in model.params().ids() {
            let p = model.params().get(id);
            let g = grads.param(id).unwrap_or_else(|| panic!("{name}: no gradient for {}", p.name));
            assert!(g.max_abs() > 0.0, "{name}: zero gradient for {}", p.name);
        }
    }
}
