mod common;

use common::{fd_gradient, flat, rel_err, RandomProblem};
use mbmpo::diffcore::{grad, hvp_fd, hvp_fd_scaled, value, Matrix, ParameterVector, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn reverse_mode_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..10 {
        let p = RandomProblem::sample(&mut rng, 200);
        let (_, g) = grad(&p.params, |t| p.record(t)).unwrap();
        let f = |x: &[f64]| value(&p.params.with_values(x.to_vec()).unwrap(), |t| p.record(t)).unwrap();
        let fd = fd_gradient(f, p.params.values(), 1e-6);
        assert!(rel_err(g.values(), &fd, 1e-8) < 1e-6);
    }
}

/// `f(θ) = ‖Bθ‖² + Σ exp(θ_i)`, Hessian `2BᵀB + diag(exp θ)`.
fn record(tape: &mut Tape<'_>, b: &Matrix) -> mbmpo::Result<Var> {
    let theta = tape.param_block("theta")?;
    let bm = tape.constant(b.clone());
    let prod = tape.matmul_t(theta, bm)?;
    let sq = tape.square(prod);
    let quad = tape.sum(sq);
    let e = tape.exp(theta);
    let e = tape.sum(e);
    tape.add(quad, e)
}

fn dense_hessian(b: &Matrix, theta: &[f64]) -> Vec<Vec<f64>> {
    let n = theta.len();
    let mut h = vec![vec![0.0; n]; n];
    for (i, row) in h.iter_mut().enumerate() {
        for (j, hij) in row.iter_mut().enumerate() {
            *hij = 2.0 * (0..b.rows()).map(|r| b.get(r, i) * b.get(r, j)).sum::<f64>();
        }
        row[i] += theta[i].exp();
    }
    h
}

#[test]
fn curvature_products_match_a_dense_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for n in [1, 3, 7] {
        let b = Matrix::from_vec(4, n, (0..4 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let theta = flat((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let grad_fn = |p: &ParameterVector| grad(p, |t| record(t, &b)).map(|(_, g)| g);
        let h = dense_hessian(&b, theta.values());
        for scale in [1e-4, 1.0, 1e3] {
            let v = theta.with_values((0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let expected: Vec<f64> = h.iter().map(|row| row.iter().zip(v.values()).map(|(a, x)| a * x).sum()).collect();
            let got = hvp_fd_scaled(grad_fn, &theta, &v).unwrap();
            assert!(rel_err(got.values(), &expected, 1e-300) < 1e-7, "n={n} scale={scale}");
        }
        let v = theta.with_values(vec![1.0; n]).unwrap();
        let raw = hvp_fd(grad_fn, &theta, &v, 1e-5).unwrap();
        let expected: Vec<f64> = h.iter().map(|row| row.iter().sum()).collect();
        assert!(rel_err(raw.values(), &expected, 1e-12) < 1e-7);
    }
}

#[test]
fn zero_direction_gives_zero_product() {
    let b = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
    let theta = flat(vec![0.1, 0.2]);
    let v = flat(vec![0.0, 0.0]);
    let hv = hvp_fd_scaled(|p| grad(p, |t| record(t, &b)).map(|(_, g)| g), &theta, &v).unwrap();
    assert_eq!(hv.values(), &[0.0, 0.0]);
}
