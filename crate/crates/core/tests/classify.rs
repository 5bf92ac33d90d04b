use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use structgp::additive::VarianceMode;
use structgp::classify::{
    classify_fit, classify_predict, coordinate_search, log_likelihood, logistic_gaussian_integral,
    newton_map, ClassifyOptions, NewtonOptions,
};
use structgp::io::gen_classification;
use structgp::oracle::{full_gp_laplace, DenseKernel};
use structgp::{Kernel, MaternOrder};

fn small_problem(seed: u64, n: usize, d: usize) -> (DMatrix<f64>, Vec<f64>, Vec<Kernel>) {
    let ks: Vec<Kernel> = (0..d)
        .map(|j| Kernel::new(MaternOrder::FiveHalves, 0.3 + 0.1 * j as f64, 2.0).unwrap())
        .collect();
    let ds = gen_classification(n, &ks, seed).unwrap();
    (ds.x, ds.y, ks)
}

fn sd_logdet(m: &DMatrix<f64>) -> f64 {
    2.0 * m
        .clone()
        .cholesky()
        .unwrap()
        .l()
        .diagonal()
        .iter()
        .map(|v| v.ln())
        .sum::<f64>()
}

#[test]
fn map_matches_the_dense_newton_iteration() {
    let (x, y, ks) = small_problem(1, 60, 2);
    let fit = newton_map(&x, &y, &ks, &NewtonOptions::default()).unwrap();
    let dense = full_gp_laplace(&x, &y, &ks, 1e-10, 100).unwrap();
    for i in 0..60 {
        assert!(
            (fit.f[i] - dense.f[i]).abs() < 1e-5,
            "{} vs {}",
            fit.f[i],
            dense.f[i]
        );
        let s: f64 = fit.components.iter().map(|c| c[i]).sum();
        assert!((s - fit.f[i]).abs() < 1e-8);
        assert!(fit.w[i] > 0.0);
    }
    assert!(fit.gradient_norm() < 1e-6, "{}", fit.gradient_norm());
    assert!(fit.newton_iterations <= 10);
    for w in fit.objective_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-12 * w[0].abs());
    }
}

#[test]
fn one_exact_newton_step_is_the_dense_update() {
    let (x, y, ks) = small_problem(2, 80, 3);
    let opts = NewtonOptions {
        tol: f64::INFINITY,
        ..Default::default()
    };
    let fit = newton_map(&x, &y, &ks, &opts).unwrap();
    assert_eq!(fit.newton_iterations, 1);
    // from f = 0: W = 1/4 and the pseudo-targets are 4(y − ½)
    let k = DenseKernel::Additive(&ks).matrix(&x, &x);
    let z = DVector::from_iterator(80, y.iter().map(|v| 4.0 * (v - 0.5)));
    let mut c = k.clone();
    for i in 0..80 {
        c[(i, i)] += 4.0;
    }
    let f = &k * c.cholesky().unwrap().solve(&z);
    for i in 0..80 {
        assert!((fit.f[i] - f[i]).abs() < 1e-6);
    }
}

#[test]
fn scalar_evidence_is_the_standard_laplace_evidence() {
    let (x, y, ks) = small_problem(3, 70, 1);
    let fit = newton_map(&x, &y, &ks, &NewtonOptions::default()).unwrap();
    let dense = full_gp_laplace(&x, &y, &ks, 1e-10, 100).unwrap();
    assert!(
        (fit.evidence - dense.log_evidence).abs() < 1e-6,
        "{} vs {}",
        fit.evidence,
        dense.log_evidence
    );
}

#[test]
fn additive_evidence_matches_the_dense_block_expression() {
    let (x, y, ks) = small_problem(4, 60, 2);
    let fit = newton_map(&x, &y, &ks, &NewtonOptions::default()).unwrap();
    let dense = full_gp_laplace(&x, &y, &ks, 1e-10, 100).unwrap();
    let (n, d) = (60, 2);
    // Ω(F̂) − ½ logdet(W̃ + K̃⁻¹) + (ND/2) log 2π with block-diagonal K̃ and W̃
    let mut kt = DMatrix::zeros(n * d, n * d);
    let mut wt = DMatrix::zeros(n * d, n * d);
    let mut ft = DVector::zeros(n * d);
    for j in 0..d {
        let col: Vec<f64> = x.column(j).iter().copied().collect();
        let kd = ks[j].matrix(&col, &col);
        let fd = &kd * &dense.a;
        kt.view_mut((j * n, j * n), (n, n)).copy_from(&kd);
        ft.rows_mut(j * n, n).copy_from(&fd);
        for i in 0..n {
            wt[(j * n + i, j * n + i)] = dense.w[i];
        }
    }
    // K̃⁻¹F̂ is the stacked copy of a, so the quadratic form needs no inverse
    let at = DVector::from_fn(n * d, |i, _| dense.a[i % n]);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let fsum: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|j| ft[j * n + i]).sum())
        .collect();
    let omega = log_likelihood(&y, &fsum)
        - 0.5 * ft.dot(&at)
        - 0.5 * sd_logdet(&kt)
        - 0.5 * (n * d) as f64 * ln2pi;
    // logdet(W̃ + K̃⁻¹) = logdet(K̃⁻¹) + logdet(I + K̃W̃), the latter through its symmetric form
    let sw = wt.map(f64::sqrt);
    let b = DMatrix::identity(n * d, n * d) + &sw * &kt * &sw;
    let expected = omega - 0.5 * (sd_logdet(&b) - sd_logdet(&kt)) + 0.5 * (n * d) as f64 * ln2pi;
    assert!(
        (fit.evidence - expected).abs() < 1e-6,
        "{} vs {expected}",
        fit.evidence
    );
}

#[test]
fn predictions_match_dense_laplace() {
    let (x, y, ks) = small_problem(5, 60, 2);
    let fit = newton_map(&x, &y, &ks, &NewtonOptions::default()).unwrap();
    let dense = full_gp_laplace(&x, &y, &ks, 1e-10, 100).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let xt = DMatrix::from_fn(25, 2, |_, _| rng.random::<f64>());
    let p = classify_predict(&fit, &xt, VarianceMode::Exact).unwrap();
    let (m, v) = dense.predict_latent(&xt, &ks).unwrap();
    for i in 0..25 {
        let q = logistic_gaussian_integral(m[i], v[i]);
        assert!((p[i] - q).abs() < 1e-4, "{} vs {q}", p[i]);
    }
    let pf = classify_predict(&fit, &xt, VarianceMode::Factorized).unwrap();
    assert!(pf.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn swapping_labels_negates_the_map() {
    let (x, y, ks) = small_problem(6, 50, 2);
    let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let a = newton_map(&x, &y, &ks, &NewtonOptions::default()).unwrap();
    let b = newton_map(&x, &flipped, &ks, &NewtonOptions::default()).unwrap();
    for i in 0..50 {
        assert!((a.f[i] + b.f[i]).abs() < 1e-7);
    }
    assert!((a.evidence - b.evidence).abs() < 1e-8);
}

#[test]
fn separable_labels_keep_a_finite_evidence() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let x = DMatrix::from_fn(40, 2, |_, _| rng.random::<f64>());
    let y = vec![1.0; 40];
    let ks = vec![Kernel::new(MaternOrder::ThreeHalves, 1.0, 400.0).unwrap(); 2];
    let fit = newton_map(&x, &y, &ks, &NewtonOptions::default()).unwrap();
    assert!(fit.evidence.is_finite());
    assert!(fit.f.iter().all(|v| *v > 3.0));
}

#[test]
fn very_long_lengthscales_predict_the_base_rate() {
    let (x, y, _) = small_problem(8, 400, 2);
    let ks = vec![Kernel::new(MaternOrder::ThreeHalves, 1e5, 50.0).unwrap(); 2];
    let fit = newton_map(&x, &y, &ks, &NewtonOptions::default()).unwrap();
    let base = y.iter().sum::<f64>() / 400.0;
    let xt = DMatrix::from_fn(5, 2, |i, j| (i + j) as f64 / 6.0);
    let p = classify_predict(&fit, &xt, VarianceMode::Factorized).unwrap();
    for v in p {
        assert!((v - base).abs() < 0.01, "{v} vs {base}");
    }
}

#[test]
fn coordinate_search_finds_a_quadratic_maximum() {
    let obj = |t: &[f64]| Ok(-(t[0] - 0.7).powi(2) - 2.0 * (t[1] + 0.4).powi(2));
    let (t, trace) = coordinate_search(obj, &[0.0, 0.0], 5, 2.0, 1e-8).unwrap();
    assert!((t[0] - 0.7).abs() < 1e-6 && (t[1] + 0.4).abs() < 1e-6);
    for w in trace.windows(2) {
        assert!(w[1] >= w[0]);
    }
}

#[test]
fn learnt_hyperparameters_approach_the_bayes_error() {
    let truth = vec![Kernel::new(MaternOrder::FiveHalves, 0.25, 4.0).unwrap(); 3];
    let ds = gen_classification(700, &truth, 9).unwrap();
    let (n, nt) = (400, 300);
    let xtr = ds.x.rows(0, n).into_owned();
    let xte = ds.x.rows(n, nt).into_owned();
    let (ytr, yte) = (&ds.y[..n], &ds.y[n..]);
    let init = vec![Kernel::new(MaternOrder::FiveHalves, 1.0, 1.0).unwrap(); 3];
    let opts = ClassifyOptions {
        outer_iters: 2,
        ..Default::default()
    };
    let res = classify_fit(&xtr, ytr, &init, &opts).unwrap();
    for w in res.evidence_trace.windows(2) {
        assert!(w[1] >= w[0]);
    }
    let init_fit = newton_map(&xtr, ytr, &init, &opts.newton).unwrap();
    assert!(res.fit.evidence >= init_fit.evidence);
    let p = classify_predict(&res.fit, &xte, VarianceMode::Factorized).unwrap();
    let err = p
        .iter()
        .zip(yte)
        .filter(|(p, y)| (**p > 0.5) != (**y > 0.5))
        .count() as f64
        / nt as f64;
    let latent = ds.latent.as_ref().unwrap();
    let bayes = latent[n..]
        .iter()
        .zip(yte)
        .filter(|(f, y)| (**f > 0.0) != (**y > 0.5))
        .count() as f64
        / nt as f64;
    assert!(err <= bayes + 0.06, "error {err} vs Bayes-rule {bayes}");
}
