//! Reverse-mode differentiation over batched matrix values.
//!
//! Every node is evaluated eagerly when it is recorded, so a tape doubles as a
//! plain forward evaluator. Gradients flow only into `Param` nodes, which are
//! views into one flat parameter slice.

use crate::diffcore::matrix::{gemm_ab, gemm_abt, gemm_atb, Matrix};
use crate::diffcore::params::{Layout, ParameterVector};
use crate::error::{check_dim, Error, Result};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param { offset: usize },
    /// `x · wᵀ`
    MatMulT { x: Var, w: Var },
    /// `x + 1·b` with `b` a single row
    AddRow { x: Var, b: Var },
    /// rows `g_i · v_i / ‖v_i‖`
    WeightNorm { v: Var, g: Var },
    RepeatRows { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Shift { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Square { x: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    SumRows { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Opaque { x: Var, name: &'static str },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    // depends on at least one parameter
    live: bool,
}

/// Recording context for one objective evaluation.
pub struct Tape<'p> {
    params: &'p [f64],
    layout: Option<&'p Layout>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            layout: None,
            nodes: Vec::new(),
        }
    }

    pub fn for_params(params: &'p ParameterVector) -> Self {
        Self {
            params: params.values(),
            layout: Some(params.layout()),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let live = match op {
            Op::Constant => false,
            Op::Opaque { x, .. } => self.nodes[x.0].live,
            Op::Param { .. } => true,
            Op::MatMulT { x: a, w: b }
            | Op::AddRow { x: a, b }
            | Op::WeightNorm { v: a, g: b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => self.nodes[a.0].live || self.nodes[b.0].live,
            Op::RepeatRows { x }
            | Op::Scale { x, .. }
            | Op::Shift { x }
            | Op::Tanh { x }
            | Op::Relu { x }
            | Op::Exp { x }
            | Op::Log { x }
            | Op::Square { x }
            | Op::Clamp { x, .. }
            | Op::SumRows { x }
            | Op::Sum { x }
            | Op::Mean { x } => self.nodes[x.0].live,
        };
        self.nodes.push(Node { value, op, live });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(Error::Dimension {
                what: "scalar node",
                expected: 1,
                got: m.rows() * m.cols(),
            });
        }
        Ok(m.as_slice()[0])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    /// A `rows × cols` view of the parameters starting at `offset`.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let end = offset + rows * cols;
        if end > self.params.len() {
            return Err(Error::Dimension {
                what: "parameter view",
                expected: self.params.len(),
                got: end,
            });
        }
        let m = Matrix::from_vec(rows, cols, self.params[offset..end].to_vec())?;
        Ok(self.push(m, Op::Param { offset }))
    }

    /// Named block of the attached layout; 1-D blocks become a single row.
    pub fn param_block(&mut self, name: &str) -> Result<Var> {
        let layout = self
            .layout
            .ok_or_else(|| Error::Config("tape has no parameter layout".into()))?;
        let (off, b) = layout
            .locate(name)
            .ok_or_else(|| Error::Config(format!("no parameter block `{name}`")))?;
        let (rows, cols) = match b.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Unsupported(format!(
                    "parameter block `{name}` has rank {}",
                    other.len()
                )))
            }
        };
        self.param(off, rows, cols)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        check_dim("matmul inner dimension", wv.cols(), xv.cols())?;
        let mut out = Matrix::zeros(xv.rows(), wv.rows());
        gemm_abt(1.0, xv, wv, 0.0, &mut out);
        Ok(self.push(out, Op::MatMulT { x, w }))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        check_dim("bias rows", 1, bv.rows())?;
        check_dim("bias width", xv.cols(), bv.cols())?;
        let mut out = xv.clone();
        let bias = bv.as_slice();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, b }))
    }

    /// Weight-normalized matrix: row `i` is `g_i · v_i / ‖v_i‖`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let (vv, gv) = (self.value(v), self.value(g));
        check_dim("weight-norm scale", vv.rows(), gv.rows() * gv.cols())?;
        let mut out = vv.clone();
        let scales = gv.as_slice();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let f = scales[r] / norm;
            for x in row.iter_mut() {
                *x *= f;
            }
        }
        Ok(self.push(out, Op::WeightNorm { v, g }))
    }

    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        check_dim("repeated row count", 1, xv.rows())?;
        let cols = xv.cols();
        let mut data = Vec::with_capacity(n * cols);
        for _ in 0..n {
            data.extend_from_slice(xv.as_slice());
        }
        let m = Matrix::from_vec(n, cols, data)?;
        Ok(self.push(m, Op::RepeatRows { x }))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        check_dim("elementwise rows", av.rows(), bv.rows())?;
        check_dim("elementwise cols", av.cols(), bv.cols())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Shift { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square { x })
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Per-row sums, giving an `n × 1` column.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let sums: Vec<f64> = xv.iter_rows().map(|r| r.iter().sum()).collect();
        let out = Matrix::column(&sums);
        self.push(out, Op::SumRows { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows() * xv.cols();
        if n == 0 {
            return Err(Error::Precondition("mean of an empty node".into()));
        }
        let s = xv.sum() / n as f64;
        Ok(self.push(Matrix::filled(1, 1, s), Op::Mean { x }))
    }

    /// Elementwise map outside the differentiable primitive set. Forward
    /// evaluation works; differentiating through it is an error.
    pub fn opaque(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(x).map(f);
        self.push(out, Op::Opaque { x, name })
    }

    /// Gradient of the scalar node `out` with respect to the parameter slice.
    pub fn backward(&self, out: Var) -> Result<Vec<f64>> {
        self.scalar(out)?;
        let mut adj: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        adj[out.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut grad = vec![0.0; self.params.len()];

        for i in (0..=out.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.live {
                continue;
            }
            match node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (g, x) in grad[offset..offset + d.as_slice().len()]
                        .iter_mut()
                        .zip(d.as_slice())
                    {
                        *g += x;
                    }
                }
                Op::MatMulT { x, w } => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    if self.nodes[x.0].live {
                        let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                        gemm_ab(1.0, &d, wv, 0.0, &mut dx);
                        accumulate(&mut adj, x, dx);
                    }
                    if self.nodes[w.0].live {
                        let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                        gemm_atb(1.0, &d, xv, 0.0, &mut dw);
                        accumulate(&mut adj, w, dw);
                    }
                }
                Op::AddRow { x, b } => {
                    let db = Matrix::row_vector(&column_sums(&d));
                    accumulate(&mut adj, x, d);
                    accumulate(&mut adj, b, db);
                }
                Op::WeightNorm { v, g } => {
                    let vv = self.value(v);
                    let gv = self.value(g);
                    let mut dv = Matrix::zeros(vv.rows(), vv.cols());
                    let mut dg = vec![0.0; vv.rows()];
                    for r in 0..vv.rows() {
                        let row = vv.row(r);
                        let drow = d.row(r);
                        let norm2: f64 = row.iter().map(|x| x * x).sum();
                        let norm = norm2.sqrt();
                        let proj: f64 = row.iter().zip(drow).map(|(a, b)| a * b).sum();
                        dg[r] = proj / norm;
                        let scale = gv.as_slice()[r] / norm;
                        for ((o, &dw), &x) in dv.row_mut(r).iter_mut().zip(drow).zip(row) {
                            *o = scale * (dw - proj / norm2 * x);
                        }
                    }
                    let dg = Matrix::from_vec(gv.rows(), gv.cols(), dg)?;
                    accumulate(&mut adj, v, dv);
                    accumulate(&mut adj, g, dg);
                }
                Op::RepeatRows { x } => {
                    accumulate(&mut adj, x, Matrix::row_vector(&column_sums(&d)));
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, a, d.clone());
                    accumulate(&mut adj, b, d);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut adj, b, d.map(|x| -x));
                    accumulate(&mut adj, a, d);
                }
                Op::Mul { a, b } => {
                    let da = d.zip_map(self.value(b), |g, y| g * y);
                    let db = d.zip_map(self.value(a), |g, x| g * x);
                    accumulate(&mut adj, a, da);
                    accumulate(&mut adj, b, db);
                }
                Op::Scale { x, c } => accumulate(&mut adj, x, d.map(|g| g * c)),
                Op::Shift { x } => accumulate(&mut adj, x, d),
                Op::Tanh { x } => {
                    let dx = d.zip_map(&node.value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut adj, x, dx);
                }
                Op::Relu { x } => {
                    let dx = d.zip_map(self.value(x), |g, v| if v > 0.0 { g } else { 0.0 });
                    accumulate(&mut adj, x, dx);
                }
                Op::Exp { x } => {
                    let dx = d.zip_map(&node.value, |g, y| g * y);
                    accumulate(&mut adj, x, dx);
                }
                Op::Log { x } => {
                    let dx = d.zip_map(self.value(x), |g, v| g / v);
                    accumulate(&mut adj, x, dx);
                }
                Op::Square { x } => {
                    let dx = d.zip_map(self.value(x), |g, v| 2.0 * g * v);
                    accumulate(&mut adj, x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let dx = d.zip_map(self.value(x), |g, v| {
                        if (lo..=hi).contains(&v) {
                            g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, x, dx);
                }
                Op::SumRows { x } => {
                    let xv = self.value(x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let g = d.as_slice()[r];
                        dx.row_mut(r).iter_mut().for_each(|o| *o = g);
                    }
                    accumulate(&mut adj, x, dx);
                }
                Op::Sum { x } => {
                    let (r, c) = self.value(x).shape();
                    accumulate(&mut adj, x, Matrix::filled(r, c, d.as_slice()[0]));
                }
                Op::Mean { x } => {
                    let (r, c) = self.value(x).shape();
                    let g = d.as_slice()[0] / (r * c) as f64;
                    accumulate(&mut adj, x, Matrix::filled(r, c, g));
                }
                Op::Opaque { name, x: _ } => {
                    return Err(Error::Unsupported(format!(
                        "cannot differentiate through `{name}`"
                    )));
                }
            }
        }
        Ok(grad)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

/// Evaluates a scalar objective and its exact gradient.
pub fn grad<F>(params: &ParameterVector, objective: F) -> Result<(f64, ParameterVector)>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::for_params(params);
    let out = objective(&mut tape)?;
    let value = tape.scalar(out)?;
    let g = tape.backward(out)?;
    if !value.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite objective or gradient".into()));
    }
    Ok((value, params.with_values(g)?))
}

/// Evaluates a scalar objective without differentiating it.
pub fn value<F>(params: &ParameterVector, objective: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::for_params(params);
    let out = objective(&mut tape)?;
    tape.scalar(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::diffcore::params::ParamBlock;

    fn pv(values: Vec<f64>) -> ParameterVector {
        let layout = Arc::new(Layout::new(vec![ParamBlock::new("theta", &[values.len()])]).unwrap());
        ParameterVector::new(layout, values).unwrap()
    }

    #[test]
    fn squared_norm_gradient_is_twice_theta() {
        let p = pv(vec![1.5, -2.0, 0.25]);
        let (v, g) = grad(&p, |t| {
            let th = t.param_block("theta")?;
            let sq = t.square(th);
            Ok(t.sum(sq))
        })
        .unwrap();
        assert_eq!(v, 1.5 * 1.5 + 4.0 + 0.0625);
        assert_eq!(g.values(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn linear_gradient_is_coefficients() {
        let p = pv(vec![0.3, -0.1, 7.0]);
        let c = [2.0, -1.0, 0.5];
        let (_, g) = grad(&p, |t| {
            let th = t.param_block("theta")?;
            let cv = t.constant(Matrix::row_vector(&c));
            let m = t.mul(th, cv)?;
            Ok(t.sum(m))
        })
        .unwrap();
        assert_eq!(g.values(), &c);
    }

    #[test]
    fn opaque_op_is_unsupported_for_gradients() {
        let p = pv(vec![0.3]);
        let f = |t: &mut Tape<'_>| {
            let th = t.param_block("theta")?;
            let s = t.opaque("sin", th, f64::sin);
            Ok(t.sum(s))
        };
        assert!((value(&p, f).unwrap() - 0.3f64.sin()).abs() < 1e-15);
        let err = grad(&p, f).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = pv(vec![1.0, 2.0]);
        let err = value(&p, |t| {
            let th = t.param_block("theta")?;
            let c = t.constant(Matrix::row_vector(&[1.0, 2.0, 3.0]));
            let s = t.add(th, c)?;
            Ok(t.sum(s))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let p = pv(vec![-30.0, 0.5, 5.0]);
        let (_, g) = grad(&p, |t| {
            let th = t.param_block("theta")?;
            let c = t.clamp(th, -20.0, 2.0);
            Ok(t.sum(c))
        })
        .unwrap();
        assert_eq!(g.values(), &[0.0, 1.0, 0.0]);
    }
}
