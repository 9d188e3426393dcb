//! Independent reference computations for the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use mbmpo::diffcore::{Layout, ParamBlock, ParameterVector};

pub fn flat(values: Vec<f64>) -> ParameterVector {
    let layout = Arc::new(Layout::new(vec![ParamBlock::new("theta", &[values.len()])]).unwrap());
    ParameterVector::new(layout, values).unwrap()
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

/// Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}

/// `Σ_{j≥t} γ^{j−t} r_j` by direct summation.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| rewards[t..].iter().enumerate().map(|(j, r)| gamma.powi(j as i32) * r).sum())
        .collect()
}

/// Spearman's ρ with ranks from pairwise counting.
pub fn spearman_bruteforce(x: &[f64], y: &[f64]) -> Option<f64> {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

use mbmpo::diffcore::{mlp_tape, Activation, Matrix, MlpSpec, Tape, Var};
use rand::Rng;

/// A random network, input batch and scalar head.
pub struct RandomProblem {
    pub spec: MlpSpec,
    pub params: ParameterVector,
    pub input: Matrix,
    pub weights: Matrix,
    pub head: usize,
}

pub const N_HEADS: usize = 5;

impl RandomProblem {
    pub fn sample<R: Rng>(rng: &mut R, max_params: usize) -> Self {
        loop {
            let input_dim = rng.gen_range(1..=4);
            let depth = rng.gen_range(0..=2);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=12)).collect();
            let output_dim = rng.gen_range(1..=3);
            let activation = if rng.gen_bool(0.5) { Activation::Tanh } else { Activation::Relu };
            let spec = MlpSpec::new(input_dim, &hidden, output_dim, activation, rng.gen_bool(0.5)).unwrap();
            if spec.param_count() > max_params {
                continue;
            }
            let mut params = spec.init(rng);
            // random biases so that relu kinks are not all at the origin
            let values: Vec<f64> = params.values().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
            params = params.with_values(values).unwrap();
            let rows = rng.gen_range(1..=6);
            let input = Matrix::from_vec(rows, input_dim, (0..rows * input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
            let weights =
                Matrix::from_vec(rows, output_dim, (0..rows * output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            return Self {
                spec,
                params,
                input,
                weights,
                head: rng.gen_range(0..N_HEADS),
            };
        }
    }

    pub fn record(&self, tape: &mut Tape<'_>) -> mbmpo::Result<Var> {
        let x = tape.constant(self.input.clone());
        let out = mlp_tape(tape, &self.spec, x)?;
        let w = tape.constant(self.weights.clone());
        match self.head {
            0 => {
                let p = tape.mul(out, w)?;
                Ok(tape.sum(p))
            }
            1 => {
                let sq = tape.square(out);
                tape.mean(sq)
            }
            2 => {
                let t = tape.tanh(out);
                let p = tape.mul(t, w)?;
                Ok(tape.sum(p))
            }
            3 => {
                let sq = tape.square(out);
                let l = tape.shift(sq, 1.0);
                let l = tape.log(l);
                Ok(tape.sum(l))
            }
            _ => {
                let s = tape.scale(out, 0.3);
                let e = tape.exp(s);
                let p = tape.mul(e, w)?;
                let r = tape.sum_rows(p);
                tape.mean(r)
            }
        }
    }
}
