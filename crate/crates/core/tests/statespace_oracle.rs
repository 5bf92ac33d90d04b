use approx::assert_relative_eq;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use structgp::oracle::{full_gp, DenseKernel};
use structgp::statespace::{
    ffbs_sample, kalman_filter, log_z_gradient_projected, predict_1d, rts_smooth, SortedSeries,
};
use structgp::{Kernel, MaternOrder};

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn filter_and_smoother_match_dense_gp() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for inst in 0..20 {
        let order = MaternOrder::ALL[inst % 4];
        let n = rng.random_range(50..=200);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let kernel = Kernel::new(
            order,
            rng.random_range(0.3..2.0),
            rng.random_range(0.5..2.0),
        )
        .unwrap();
        let noise = rng.random_range(0.01..0.5);

        let series = SortedSeries::new(&x, &y, noise).unwrap();
        let filt = kalman_filter(&series, &kernel.to_state_space()).unwrap();
        let sm = rts_smooth(&filt).unwrap();
        let mean = series.to_original(&sm.f_mean());
        let var = series.to_original(&sm.f_var());

        let xm = DMatrix::from_column_slice(n, 1, &x);
        let dense = full_gp(&xm, &y, &xm, DenseKernel::Isotropic(&kernel), noise).unwrap();
        assert!(
            rel_close(filt.log_z(), dense.log_z, 1e-8),
            "{} vs {}",
            filt.log_z(),
            dense.log_z
        );
        for i in 0..n {
            assert!(
                rel_close(mean[i], dense.mean[i], 1e-8),
                "mean {i}: {} vs {}",
                mean[i],
                dense.mean[i]
            );
            assert!(
                rel_close(var[i], dense.cov[(i, i)], 1e-8),
                "var {i}: {} vs {}",
                var[i],
                dense.cov[(i, i)]
            );
        }
    }
}

#[test]
fn duplicate_inputs_match_dense_gp() {
    let x = [0.0, 0.5, 0.5, 0.5, 1.2, 2.0, 2.0, 3.1];
    let y = [0.1, 0.4, 0.6, 0.5, -0.2, 0.3, 0.2, 0.9];
    for order in MaternOrder::ALL {
        let kernel = Kernel::new(order, 0.8, 1.0).unwrap();
        let series = SortedSeries::new(&x, &y, 0.05).unwrap();
        let sm = rts_smooth(&kalman_filter(&series, &kernel.to_state_space()).unwrap()).unwrap();
        let mean = series.to_original(&sm.f_mean());
        let xm = DMatrix::from_column_slice(8, 1, &x);
        let dense = full_gp(&xm, &y, &xm, DenseKernel::Isotropic(&kernel), 0.05).unwrap();
        assert!(rel_close(sm.log_z, dense.log_z, 1e-9));
        for i in 0..8 {
            assert!(rel_close(mean[i], dense.mean[i], 1e-9));
        }
    }
}

#[test]
fn test_point_prediction_matches_dense_gp() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..80).map(|_| rng.random::<f64>() * 6.0).collect();
    let y: Vec<f64> = x.iter().map(|v| (2.0 * v).cos()).collect();
    let xt: Vec<f64> = (0..10).map(|i| -0.5 + 0.7 * i as f64).collect();
    for order in MaternOrder::ALL {
        let kernel = Kernel::new(order, 0.6, 1.4).unwrap();
        let series = SortedSeries::new(&x, &y, 0.02).unwrap();
        let (mu, var) = predict_1d(&series, &kernel.to_state_space(), &xt).unwrap();
        let dense = full_gp(
            &DMatrix::from_column_slice(80, 1, &x),
            &y,
            &DMatrix::from_column_slice(10, 1, &xt),
            DenseKernel::Isotropic(&kernel),
            0.02,
        )
        .unwrap();
        for i in 0..10 {
            assert!(rel_close(mu[i], dense.mean[i], 1e-8));
            assert!(rel_close(var[i], dense.cov[(i, i)], 1e-8));
        }
    }
}

#[test]
fn ffbs_moments_match_posterior() {
    let x = [0.0, 0.3, 0.7, 1.0, 1.6];
    let y = [0.5, 0.2, -0.1, 0.3, 0.8];
    let kernel = Kernel::new(MaternOrder::FiveHalves, 0.7, 1.0).unwrap();
    let series = SortedSeries::new(&x, &y, 0.1).unwrap();
    let filt = kalman_filter(&series, &kernel.to_state_space()).unwrap();
    let xm = DMatrix::from_column_slice(5, 1, &x);
    let dense = full_gp(&xm, &y, &xm, DenseKernel::Isotropic(&kernel), 0.1).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let draws = 5000;
    let mut sum = [0.0; 5];
    let mut sum_prod = [[0.0; 5]; 5];
    for _ in 0..draws {
        let z = ffbs_sample(&filt, &mut rng).unwrap();
        let f = series.to_original(&z.iter().map(|v| v[0]).collect::<Vec<_>>());
        for i in 0..5 {
            sum[i] += f[i];
            for j in 0..5 {
                sum_prod[i][j] += f[i] * f[j];
            }
        }
    }
    let nd = draws as f64;
    for i in 0..5 {
        let mean = sum[i] / nd;
        let se = (dense.cov[(i, i)] / nd).sqrt();
        assert!((mean - dense.mean[i]).abs() <= 3.0 * se, "mean {i}");
        for j in 0..5 {
            let cov = sum_prod[i][j] / nd - mean * sum[j] / nd;
            let expected = dense.cov[(i, j)];
            // standard error of a sample covariance of Gaussians
            let se = ((dense.cov[(i, i)] * dense.cov[(j, j)] + expected * expected) / nd).sqrt();
            assert!(
                (cov - expected).abs() <= 4.0 * se,
                "cov {i},{j}: {cov} vs {expected}"
            );
        }
    }
}

#[test]
fn projected_gradient_matches_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(21);
    for inst in 0..10 {
        let (n, d) = (60, 3);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let y: Vec<f64> = (0..n)
            .map(|i| (x[(i, 0)] + 0.5 * x[(i, 1)]).sin() + 0.1 * rng.random::<f64>())
            .collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.3).collect();
        let order = MaternOrder::ALL[inst % 4];
        let kernel = Kernel::new(order, 0.8, 1.1).unwrap();
        let noise = 0.05;
        let (_, g) = log_z_gradient_projected(&x, &w, &y, &kernel, noise).unwrap();
        let eval = |p: &[f64]| {
            let k = Kernel::new(order, p[0].exp(), p[1].exp()).unwrap();
            log_z_gradient_projected(&x, &p[3..], &y, &k, p[2].exp())
                .unwrap()
                .0
        };
        let mut base = vec![0.8f64.ln(), 1.1f64.ln(), noise.ln()];
        base.extend_from_slice(&w);
        for p in 0..base.len() {
            let h = 1e-6;
            let mut up = base.clone();
            let mut dn = base.clone();
            up[p] += h;
            dn[p] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            assert_relative_eq!(g[p], fd, max_relative = 1e-4, epsilon = 1e-6);
        }
    }
}
