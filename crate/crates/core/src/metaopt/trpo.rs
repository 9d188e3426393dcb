use serde::{Deserialize, Serialize};

use crate::diffcore::{hvp_fd_scaled, ParameterVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrpoConfig {
    pub kl_bound: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        Self {
            kl_bound: 0.01,
            cg_iters: 10,
            cg_damping: 1e-2,
            backtrack_ratio: 0.8,
            max_backtracks: 15,
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_bound > 0.0) {
            return Err(Error::Config("kl_bound must be positive".into()));
        }
        if self.cg_iters == 0 || self.max_backtracks == 0 {
            return Err(Error::Config("cg_iters and max_backtracks must be positive".into()));
        }
        if !(self.cg_damping >= 0.0) {
            return Err(Error::Config("cg_damping must be non-negative".into()));
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return Err(Error::Config("backtrack_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Relative slack on the KL bound that absorbs rounding when the first
/// candidate lands exactly on it.
const KL_ROUNDING: f64 = 1e-9;

/// What the outer step needs from an objective.
pub trait TrustRegionProblem {
    /// Surrogate value and mean KL from the sampling-time policies.
    fn evaluate(&self, theta: &ParameterVector) -> Result<(f64, f64)>;
    /// Gradient of the mean KL.
    fn kl_grad(&self, theta: &ParameterVector) -> Result<ParameterVector>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrpoOutcome {
    pub theta: ParameterVector,
    pub accepted: bool,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    /// Measured KL at the returned parameters.
    pub kl: f64,
    pub backtracks: usize,
}

/// Approximately solves `A x = b` for symmetric positive definite `A`.
pub fn conjugate_gradient<F>(mut apply: F, b: &ParameterVector, iters: usize) -> Result<ParameterVector>
where
    F: FnMut(&ParameterVector) -> Result<ParameterVector>,
{
    const RESIDUAL_TOL: f64 = 1e-20;
    let mut x = b.scale(0.0);
    let mut r = b.clone();
    let mut p = b.clone();
    let mut rr = r.dot(&r);
    let rr0 = rr;
    for _ in 0..iters {
        if rr <= RESIDUAL_TOL * rr0 {
            break;
        }
        let ap = apply(&p)?;
        let pap = p.dot(&ap);
        if !(pap.is_finite() && pap > 0.0) {
            return Err(Error::Numeric(format!("conjugate gradient breakdown (pᵀAp = {pap})")));
        }
        let step = rr / pap;
        x = x.axpy(step, &p)?;
        r = r.axpy(-step, &ap)?;
        let rr_new = r.dot(&r);
        if !rr_new.is_finite() {
            return Err(Error::Numeric("non-finite conjugate gradient residual".into()));
        }
        p = r.axpy(rr_new / rr, &p)?;
        rr = rr_new;
    }
    Ok(x)
}

/// One constrained ascent step on the surrogate. The Fisher-vector product is
/// a finite difference of the KL gradient; the natural direction is scaled so
/// that the quadratic KL model equals the bound, then shrunk until the
/// surrogate improves and the measured KL respects the bound.
pub fn trpo_step<P: TrustRegionProblem + ?Sized>(
    theta: &ParameterVector,
    meta_grad: &ParameterVector,
    problem: &P,
    cfg: &TrpoConfig,
) -> Result<TrpoOutcome> {
    cfg.validate()?;
    let (surr0, kl0) = problem.evaluate(theta)?;
    let unchanged = |backtracks| TrpoOutcome {
        theta: theta.clone(),
        accepted: false,
        surrogate_before: surr0,
        surrogate_after: surr0,
        kl: kl0,
        backtracks,
    };
    if meta_grad.norm_inf() == 0.0 {
        return Ok(unchanged(0));
    }
    let fvp = |v: &ParameterVector| hvp_fd_scaled(|p| problem.kl_grad(p), theta, v);
    let dir = conjugate_gradient(|v| fvp(v)?.axpy(cfg.cg_damping, v), meta_grad, cfg.cg_iters)?;
    let shs = dir.dot(&fvp(&dir)?);
    if !(shs.is_finite() && shs > 0.0) {
        return Ok(unchanged(0));
    }
    let step = (2.0 * cfg.kl_bound / shs).sqrt();
    let mut scale = 1.0;
    for backtrack in 0..=cfg.max_backtracks {
        let candidate = theta.axpy(step * scale, &dir)?;
        match problem.evaluate(&candidate) {
            Ok((surr, kl)) if surr.is_finite() && surr > surr0 && kl <= cfg.kl_bound * (1.0 + KL_ROUNDING) => {
                return Ok(TrpoOutcome {
                    theta: candidate,
                    accepted: true,
                    surrogate_before: surr0,
                    surrogate_after: surr,
                    kl,
                    backtracks: backtrack,
                });
            }
            Ok(_) | Err(Error::Numeric(_)) => {}
            Err(e) => return Err(e),
        }
        scale *= cfg.backtrack_ratio;
    }
    Ok(unchanged(cfg.max_backtracks))
}
