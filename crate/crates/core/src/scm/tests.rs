use super::*;
use crate::sampler::Scramble;
use ndarray::arr2;

fn chain2() -> Scm<f64> {
    let g = CausalGraph::new(&["X1", "X2"], &[("X1", "X2")]).unwrap();
    Scm::linear(g, &[((0, 1), 1.0)], NoiseSpec::standard_normal(2)).unwrap()
}

fn sobol(seed: u64) -> PointSource {
    PointSource::Sobol {
        scramble: Scramble::Owen,
        seed,
    }
}

#[test]
fn chain_sample_variance() {
    let (_, x) = chain2().sample(100_000, &PointSource::Pseudo { seed: 1 }).unwrap();
    let col: Vec<f64> = x.column(1).to_vec();
    let v = crate::scalar::variance(&col);
    assert!((v - 2.0).abs() < 0.05, "{v}");
}

#[test]
fn zero_noise_rejected() {
    assert!(NoiseDist::gaussian(0.0, 0.0).is_err());
    assert!(NoiseDist::uniform(1.0, 1.0).is_err());
    assert!(NoiseDist::<f64>::empirical(vec![]).is_err());
}

#[test]
fn single_node_identity() {
    let g = CausalGraph::empty(vec!["X1".into()]).unwrap();
    let scm = Scm::<f64>::linear(g, &[], NoiseSpec::standard_normal(1)).unwrap();
    let (u, x) = scm.sample(64, &sobol(3)).unwrap();
    assert_eq!(u, x);
}

#[test]
fn abduct_subtraction() {
    assert_eq!(chain2().abduct(&[1.0, 3.0]).unwrap(), vec![1.0, 2.0]);
}

#[test]
fn abduct_reference_linear() {
    let scm = Scm::<f64>::reference_linear();
    let u = [0.1, -0.2, 0.3];
    // W = 0.1; Z = 0.08 - 0.2 = -0.12; X = 0.05 - 0.084 + 0.3 = 0.266
    let mut x = [0.0; 3];
    scm.forward_row(&u, &mut x).unwrap();
    let expected = [0.1, 0.8 * 0.1 - 0.2, 0.5 * 0.1 + 0.7 * (0.8 * 0.1 - 0.2) + 0.3];
    for (a, b) in x.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((x[2] - 0.266).abs() < 1e-12);
    let back = scm.abduct(&x).unwrap();
    for (a, b) in back.iter().zip(u) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn push_forward_examples() {
    let scm = Scm::<f64>::reference_linear();
    let x = scm.push_forward(Array2::zeros((2, 3)).view()).unwrap();
    assert!(x.iter().all(|&v| v == 0.0));
    let (u, x) = scm.sample(32, &sobol(5)).unwrap();
    assert_eq!(scm.push_forward(u.view()).unwrap(), x);
    let row = scm.push_forward(arr2(&[[0.1, -0.2, 0.3]]).view()).unwrap();
    assert!((row[[0, 2]] - 0.266).abs() < 1e-12);
    assert!(scm.push_forward(Array2::zeros((2, 2)).view()).is_err());
}

#[test]
fn round_trip_many_cases() {
    let scm = Scm::<f64>::reference_linear();
    let (u, x) = scm.sample(1000, &PointSource::Pseudo { seed: 9 }).unwrap();
    let u2 = scm.abduct_matrix(x.view()).unwrap();
    let x2 = scm.push_forward(u2.view()).unwrap();
    for (a, b) in u.iter().zip(u2.iter()) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
    for (a, b) in x.iter().zip(x2.iter()) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

#[test]
fn expression_mechanism_and_inverse() {
    let g = CausalGraph::new(&["A", "B"], &[("A", "B")]).unwrap();
    let mechs: Vec<Mechanism<f64>> = vec![
        Mechanism::expression(&[], "u", Some("x")).unwrap(),
        Mechanism::expression(&["A"], "tanh(A) + exp(u)", Some("ln(x - tanh(A))")).unwrap(),
    ];
    let scm = Scm::new(g.clone(), mechs, NoiseSpec::standard_normal(2)).unwrap();
    let (u, x) = scm.sample(200, &PointSource::Pseudo { seed: 2 }).unwrap();
    let back = scm.abduct_matrix(x.view()).unwrap();
    for (a, b) in u.iter().zip(back.iter()) {
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    let no_inv = vec![
        Mechanism::Linear {
            coefficients: vec![],
            intercept: 0.0,
        },
        Mechanism::expression(&["A"], "A + u^3", None).unwrap(),
    ];
    let scm = Scm::new(g, no_inv, NoiseSpec::standard_normal(2)).unwrap();
    assert!(matches!(scm.abduct(&[0.0, 1.0]), Err(ScmError::NotInvertible(n)) if n == "B"));
}

#[test]
fn non_finite_mechanism_reported() {
    let g = CausalGraph::new(&["A", "B"], &[("A", "B")]).unwrap();
    let mechs: Vec<Mechanism<f64>> = vec![
        Mechanism::expression(&[], "u", None).unwrap(),
        Mechanism::expression(&["A"], "ln(A - 100) + u", None).unwrap(),
    ];
    let scm = Scm::new(g, mechs, NoiseSpec::standard_normal(2)).unwrap();
    assert!(matches!(
        scm.sample(4, &PointSource::Pseudo { seed: 0 }),
        Err(ScmError::NonFiniteValue(n)) if n == "B"
    ));
}

#[test]
fn triangularity_under_perturbation() {
    let g = CausalGraph::new(&["a", "b", "c", "d"], &[("a", "b"), ("b", "c")]).unwrap();
    let scm = Scm::linear(g.clone(), &[((0, 1), 1.5), ((1, 2), -0.7)], NoiseSpec::standard_normal(4)).unwrap();
    let u = [0.3, -1.1, 0.4, 2.0];
    let mut base = [0.0; 4];
    scm.forward_row(&u, &mut base).unwrap();
    for k in 0..4 {
        let mut up = u;
        up[k] += 0.5;
        let mut x = [0.0; 4];
        scm.forward_row(&up, &mut x).unwrap();
        for j in 0..4 {
            let depends = j == k || g.ancestors(j).contains(k);
            assert_eq!(x[j] != base[j], depends, "u{k} -> x{j}");
        }
    }
}

#[test]
fn intervention_substitutes_constant() {
    let scm = chain2().intervene(&[(0, 0.0)]).unwrap();
    assert!(scm.graph().parents(1).is_empty() || scm.graph().parents(1) == [0]);
    let (u, x) = scm.sample(100, &PointSource::Pseudo { seed: 3 }).unwrap();
    for i in 0..100 {
        assert_eq!(x[[i, 0]], 0.0);
        assert_eq!(x[[i, 1]], u[[i, 1]]);
    }

    let all = Scm::<f64>::reference_linear()
        .intervene(&[(0, 1.0), (1, 2.0), (2, 3.0)])
        .unwrap();
    let (_, x) = all.sample(10, &PointSource::Pseudo { seed: 3 }).unwrap();
    for row in x.rows() {
        assert_eq!(row.to_vec(), vec![1.0, 2.0, 3.0]);
    }
}

#[test]
fn intervention_mean_matches_mutilated_simulation() {
    // E[Z | do(W=1)] = 0.8, E[X | do(W=1)] = 0.5 + 0.7 * 0.8
    let scm = Scm::<f64>::reference_linear().intervene(&[(0, 1.0)]).unwrap();
    assert!(scm.graph().parents(0).is_empty());
    let (_, x) = scm.sample(1 << 14, &sobol(1)).unwrap();
    let mz = crate::scalar::mean(&x.column(1).to_vec());
    let mx = crate::scalar::mean(&x.column(2).to_vec());
    // brute-force simulation of the mutilated equations with independent draws
    let (u, _) = Scm::<f64>::reference_linear().sample(1 << 14, &PointSource::Pseudo { seed: 77 }).unwrap();
    let sim_z: Vec<f64> = u.rows().into_iter().map(|r| 0.8 + r[1]).collect();
    let sim_x: Vec<f64> = u.rows().into_iter().zip(&sim_z).map(|(r, z)| 0.5 + 0.7 * z + r[2]).collect();
    // 4 standard errors of the pseudorandom simulation (sd 1 and ~1.22)
    assert!((mz - crate::scalar::mean(&sim_z)).abs() < 4.0 / 128.0);
    assert!((mx - crate::scalar::mean(&sim_x)).abs() < 4.0 * 1.25 / 128.0);
    assert!((mz - 0.8).abs() < 1e-3);
    assert!((mx - 1.06).abs() < 1e-3);
}

#[test]
fn interventional_matches_abduction_conditioning() {
    // ancestor-closed T = {W, Z}; Y_hat = X. do(W=w, Z=z) vs conditioning via abduction.
    let scm = Scm::<f64>::reference_linear();
    let (w, z) = (0.7, -0.4);
    let n = 1 << 14;
    let (_, xd) = scm.intervene(&[(0, w), (1, z)]).unwrap().sample(n, &sobol(2)).unwrap();
    let do_mean = crate::scalar::mean(&xd.column(2).to_vec());

    // abduct u_W, u_Z from the observed (w, z); the X entry is irrelevant to them
    let ut = scm.abduct(&[w, z, 0.0]).unwrap();
    let (u, _) = scm.sample(n, &PointSource::Pseudo { seed: 12 }).unwrap();
    let mut uc = u.clone();
    uc.column_mut(0).fill(ut[0]);
    uc.column_mut(1).fill(ut[1]);
    let xc = scm.push_forward(uc.view()).unwrap();
    let cond = xc.column(2).to_vec();
    let cond_mean = crate::scalar::mean(&cond);
    let se = (crate::scalar::variance(&cond) / n as f64).sqrt();
    assert!((do_mean - cond_mean).abs() < 3.0 * se, "{do_mean} {cond_mean} {se}");
}

#[test]
fn dequantize_contract() {
    let col = [2.0f64, 2.0, 5.0];
    let out = dequantize(&col, 4).unwrap();
    assert_eq!(out.iter().map(|v| v.floor()).collect::<Vec<_>>(), col.to_vec());
    assert_eq!(out, dequantize(&col, 4).unwrap());
    assert!(matches!(dequantize(&[1.0, 2.5], 0), Err(ScmError::NonIntegral { index: 1, .. })));
    let big = dequantize(&[9.007_199_254_740_99e15f64], 1).unwrap();
    assert_eq!(big[0].floor(), 9.007_199_254_740_99e15f64);
}

#[test]
fn dequantize_counts() {
    let mut rng = rng_from_seed(3);
    let n = 100_000;
    let col: Vec<f64> = (0..n).map(|_| [0.0, 1.0, 1.0, 3.0][rng.gen_range(0..4)]).collect();
    let out = dequantize(&col, 8).unwrap();
    for k in [0.0, 1.0, 2.0, 3.0] {
        let src = col.iter().filter(|&&v| v == k).count() as f64 / n as f64;
        let dst = out.iter().filter(|&&v| v >= k && v < k + 1.0).count() as f64 / n as f64;
        assert!((src - dst).abs() < 0.01);
    }
    // within each cell the offsets are uniform
    let frac: Vec<f64> = out.iter().map(|v| v.fract()).collect();
    assert!((crate::scalar::mean(&frac) - 0.5).abs() < 0.01);
}

#[test]
fn empirical_quantile_interpolates() {
    let d = NoiseDist::empirical(vec![3.0, 1.0, 2.0]).unwrap();
    assert_eq!(d.quantile(0.0), 1.0);
    assert_eq!(d.quantile(0.25), 1.5);
    assert_eq!(d.quantile(0.5), 2.0);
    assert_eq!(d.quantile(1.0), 3.0);
    let t = NoiseDist::transformed(NoiseDist::standard_normal(), "u^3").unwrap();
    assert!((t.quantile(0.975) - 1.959_963_984_540_054f64.powi(3)).abs() < 1e-9);
}

#[test]
fn parent_mismatch_rejected() {
    let g = CausalGraph::new(&["A", "B"], &[("A", "B")]).unwrap();
    let mechs = vec![
        Mechanism::Linear {
            coefficients: vec![],
            intercept: 0.0,
        },
        Mechanism::Linear {
            coefficients: vec![1.0, 2.0],
            intercept: 0.0,
        },
    ];
    assert!(matches!(
        Scm::new(g, mechs, NoiseSpec::standard_normal(2)),
        Err(ScmError::BadAssignment { .. })
    ));
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scm.json");
    let g = CausalGraph::new(&["A", "B", "C"], &[("A", "B"), ("A", "C"), ("B", "C")]).unwrap();
    let scm = Scm::new(
        g,
        vec![
            Mechanism::Linear {
                coefficients: vec![],
                intercept: 0.5,
            },
            Mechanism::Additive(Regressor::Polynomial {
                degree: 2,
                weights: vec![0.1, 0.2, 0.3],
            }),
            Mechanism::expression(&["A", "B"], "A * B + u", Some("x - A * B")).unwrap(),
        ],
        NoiseSpec::new(vec![
            NoiseDist::gaussian(0.0, 2.0).unwrap(),
            NoiseDist::empirical(vec![-1.0, 0.0, 1.0]).unwrap(),
            NoiseDist::transformed(NoiseDist::uniform(0.0, 1.0).unwrap(), "probit(u)").unwrap(),
        ]),
    )
    .unwrap();
    scm.save(&path).unwrap();
    let back = Scm::<f64>::load(&path).unwrap();
    assert_eq!(back, scm);
}

#[test]
fn file_linear_coefficients_follow_listed_parents() {
    let json = r#"{
        "graph": {"nodes": ["A", "B", "C"], "edges": [["A", "C"], ["B", "C"]]},
        "noise": [
            {"node": "A", "kind": "gaussian", "mean": 0, "std": 1},
            {"node": "B", "kind": "uniform", "lo": -1, "hi": 1},
            {"node": "C", "kind": "empirical", "csv": "res.csv", "column": "r"}
        ],
        "assignments": [
            {"node": "A", "parents": [], "kind": "linear", "coefficients": [], "intercept": 0},
            {"node": "B", "parents": [], "kind": "linear", "coefficients": [], "intercept": 0},
            {"node": "C", "parents": ["B", "A"], "kind": "linear", "coefficients": [2.0, 3.0], "intercept": 1}
        ]
    }"#;
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("res.csv"), "r\n0.5\n-0.5\n").unwrap();
    std::fs::write(dir.path().join("scm.json"), json).unwrap();
    let scm = Scm::<f64>::load(&dir.path().join("scm.json")).unwrap();
    let mut x = [0.0; 3];
    scm.forward_row(&[1.0, 10.0, 0.0], &mut x).unwrap();
    assert_eq!(x[2], 1.0 + 3.0 * 1.0 + 2.0 * 10.0);
    assert_eq!(scm.noise().get(2).quantile(1.0), 0.5);

    let bad = json.replace(r#""parents": ["B", "A"]"#, r#""parents": ["A"]"#);
    std::fs::write(dir.path().join("bad.json"), bad).unwrap();
    assert!(Scm::<f64>::load(&dir.path().join("bad.json")).is_err());
}

#[test]
fn generic_over_f32() {
    let scm = Scm::<f32>::reference_linear();
    let (u, x) = scm.sample(16, &sobol(1)).unwrap();
    let back = scm.abduct_matrix(x.view()).unwrap();
    for (a, b) in u.iter().zip(back.iter()) {
        assert!((a - b).abs() < 1e-5);
    }
}
