//! Dense convex QP solver based on ADMM operator splitting.
//!
//! Solves
//!
//! ```text
//! minimize ½ xᵀP x + qᵀx   subject to   l ≤ A x ≤ u
//! ```
//!
//! with the splitting used by OSQP: a regularized KKT system is factored once
//! per penalty value, iterates are over-relaxed, the penalty adapts to the
//! residual balance, and a final active-set solve polishes the solution.
//! Problems are small (a few hundred variables), so everything is dense.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub max_iterations: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Iterations between penalty updates; 0 keeps `rho` fixed.
    pub adaptive_rho_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            eps_infeasible: 1e-8,
            max_iterations: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho_interval: 25,
            polish: true,
        }
    }
}

impl QpSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_abs >= 0.0 && self.eps_rel >= 0.0 && self.eps_abs + self.eps_rel > 0.0) {
            return Err(Error::config("eps_abs", "tolerances must be non-negative and not both zero"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations", "must be positive"));
        }
        if !(self.rho > 0.0 && self.sigma > 0.0) {
            return Err(Error::config("rho", "penalties must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::config("alpha", "must be in (0, 2)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    /// Problem with only box constraints `lower ≤ x ≤ upper`.
    pub fn boxed(p: DMatrix<f64>, q: DVector<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        let n = q.len();
        QpProblem {
            p,
            q,
            a: DMatrix::identity(n, n),
            l: lower,
            u: upper,
        }
    }

    pub fn variables(&self) -> usize {
        self.q.len()
    }

    pub fn constraints(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.variables();
        check_dim("QP cost rows", n, self.p.nrows())?;
        check_dim("QP cost columns", n, self.p.ncols())?;
        check_dim("QP constraint columns", n, self.a.ncols())?;
        check_dim("QP lower bound", self.a.nrows(), self.l.len())?;
        check_dim("QP upper bound", self.a.nrows(), self.u.len())?;
        check_finite("QP cost", self.p.as_slice())?;
        check_finite("QP linear cost", self.q.as_slice())?;
        check_finite("QP constraint matrix", self.a.as_slice())?;
        if self.l.iter().chain(self.u.iter()).any(|v| v.is_nan()) {
            return Err(Error::NonFinite("QP bounds"));
        }
        if let Some(i) = (0..self.constraints()).find(|&i| self.l[i] > self.u[i]) {
            return Err(Error::config(
                format!("bounds[{i}]"),
                format!("lower {} exceeds upper {}", self.l[i], self.u[i]),
            ));
        }
        let asym = (&self.p - self.p.transpose()).amax();
        if asym > 1e-9 * self.p.amax().max(1.0) {
            return Err(Error::config("P", "must be symmetric"));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// KKT residuals of the primal–dual pair `(x, y)`.
    pub fn kkt_residuals(&self, x: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
        let ax = &self.a * x;
        let stationarity = (&self.p * x + &self.q + self.a.transpose() * y).amax();
        let mut primal: f64 = 0.0;
        let mut complementarity: f64 = 0.0;
        for i in 0..self.constraints() {
            primal = primal.max(ax[i] - self.u[i]).max(self.l[i] - ax[i]);
            // y > 0 only at the upper bound, y < 0 only at the lower bound
            let c = if y[i] > 0.0 {
                y[i].min(self.u[i] - ax[i])
            } else if y[i] < 0.0 {
                (-y[i]).min(ax[i] - self.l[i])
            } else {
                0.0
            };
            complementarity = complementarity.max(c.abs());
        }
        KktResiduals {
            stationarity,
            primal,
            complementarity,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// ‖Px + q + Aᵀy‖∞
    pub stationarity: f64,
    /// Largest bound violation of `Ax`.
    pub primal: f64,
    /// Largest multiplier sign or complementary-slackness violation.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    /// Iteration limit reached; the last iterate is returned.
    Inaccurate,
    PrimalInfeasible,
    DualInfeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: DVector<f64>,
    /// Constraint multipliers; positive at active upper bounds.
    pub y: DVector<f64>,
    pub iterations: usize,
    pub objective: f64,
    pub residuals: KktResiduals,
    pub polished: bool,
    /// Objective of the primal iterate after each ADMM iteration.
    pub objective_history: Vec<f64>,
    /// Fixed-point residual `√(σ‖Δx‖² + Σ ρᵢ Δvᵢ²)` of the scaled iterates,
    /// `v = z + y/ρ`, after each iteration. Non-increasing while `ρ` is fixed.
    pub fixed_point_residual: Vec<f64>,
}

/// Starting point for a solve.
#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    pub x: Option<DVector<f64>>,
    pub y: Option<DVector<f64>>,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

fn factor(p: &DMatrix<f64>, a: &DMatrix<f64>, rho: &DVector<f64>, sigma: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = p.nrows();
    let mut kkt = p + DMatrix::identity(n, n) * sigma;
    // Aᵀ diag(ρ) A
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * rho[i]);
    kkt += a.transpose() * scaled;
    Cholesky::new(kkt).ok_or_else(|| Error::NotPositiveDefinite(vec![]))
}

/// Equality-like rows (`l = u`) get a larger penalty, as in OSQP.
fn rho_vector(problem: &QpProblem, rho: f64) -> DVector<f64> {
    DVector::from_fn(problem.constraints(), |i, _| {
        if problem.l[i] == f64::NEG_INFINITY && problem.u[i] == f64::INFINITY {
            RHO_MIN
        } else if problem.u[i] - problem.l[i] < 1e-12 {
            1e3 * rho
        } else {
            rho
        }
    })
}

/// Diagonal Ruiz scaling: the solver works on `P̄ = c D P D`, `q̄ = c D q`,
/// `Ā = E A D`, `l̄ = E l`, `ū = E u`.
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn equilibrate(problem: &QpProblem) -> (QpProblem, Scaling) {
    const PASSES: usize = 15;
    let guard = |norm: f64| if norm < 1e-4 { 1.0 } else { (1.0 / norm.sqrt()).clamp(1e-4, 1e4) };
    let (n, m) = (problem.variables(), problem.constraints());
    let mut p = problem.p.clone();
    let mut a = problem.a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    for _ in 0..PASSES {
        let delta = DVector::from_fn(n, |j, _| guard(p.column(j).amax().max(a.column(j).amax())));
        let eps = DVector::from_fn(m, |i, _| guard(a.row(i).amax()));
        p = DMatrix::from_fn(n, n, |i, j| p[(i, j)] * delta[i] * delta[j]);
        a = DMatrix::from_fn(m, n, |i, j| a[(i, j)] * eps[i] * delta[j]);
        d.component_mul_assign(&delta);
        e.component_mul_assign(&eps);
    }
    let q = problem.q.component_mul(&d);
    let mean_col = (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n.max(1) as f64;
    let c = {
        let s = mean_col.max(q.amax());
        if s < 1e-4 { 1.0 } else { (1.0 / s).clamp(1e-4, 1e4) }
    };
    let scaled = QpProblem {
        p: p * c,
        q: q * c,
        a,
        l: problem.l.component_mul(&e),
        u: problem.u.component_mul(&e),
    };
    (scaled, Scaling { d, e, c })
}

fn project(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(l[i], u[i]))
}

/// Solves `problem`. Deterministic for a given problem, settings and warm start.
pub fn solve_qp(problem: &QpProblem, settings: &QpSettings, warm: &WarmStart) -> Result<QpSolution> {
    problem.validate()?;
    settings.validate()?;
    let n = problem.variables();
    let m = problem.constraints();
    let (p, q, a, l, u) = (&problem.p, &problem.q, &problem.a, &problem.l, &problem.u);
    let at = a.transpose();
    let (scaled, scaling) = equilibrate(problem);
    let sat = scaled.a.transpose();

    let x0 = match &warm.x {
        Some(x0) if x0.len() == n && x0.iter().all(|v| v.is_finite()) => x0.clone(),
        _ => DVector::zeros(n),
    };
    let y0 = match &warm.y {
        Some(y0) if y0.len() == m && y0.iter().all(|v| v.is_finite()) => y0.clone(),
        _ => DVector::zeros(m),
    };
    // iterates live in the scaled space; x, y, z below are their unscaled images
    let mut xs = x0.component_div(&scaling.d);
    let mut ys = y0.component_div(&scaling.e) * scaling.c;
    let mut zs = project(&(&scaled.a * &xs), &scaled.l, &scaled.u);
    let (mut x, mut y, mut z) = (x0, y0, zs.component_div(&scaling.e));
    let mut rho = settings.rho;
    let mut rho_vec = rho_vector(&scaled, rho);
    let mut chol = factor(&scaled.p, &scaled.a, &rho_vec, settings.sigma)?;
    let alpha = settings.alpha;
    let mut status = QpStatus::Inaccurate;
    let mut history = Vec::new();
    let mut fpr_history = Vec::new();
    let mut iterations = 0;

    for iter in 1..=settings.max_iterations {
        iterations = iter;
        let x_prev = x.clone();
        let y_prev = y.clone();
        let xs_prev = xs.clone();
        let v_prev = &zs + ys.component_div(&rho_vec);
        let rhs = &xs * settings.sigma - &scaled.q + &sat * (rho_vec.component_mul(&zs) - &ys);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &scaled.a * &x_tilde;
        xs = &x_tilde * alpha + &xs * (1.0 - alpha);
        let z_relaxed = &z_tilde * alpha + &zs * (1.0 - alpha);
        let z_next = project(&(&z_relaxed + ys.component_div(&rho_vec)), &scaled.l, &scaled.u);
        ys += rho_vec.component_mul(&(&z_relaxed - &z_next));
        zs = z_next;
        x = xs.component_mul(&scaling.d);
        y = ys.component_mul(&scaling.e) / scaling.c;
        z = zs.component_div(&scaling.e);
        history.push(problem.objective(&x));
        let dv = &zs + ys.component_div(&rho_vec) - v_prev;
        let fpr = settings.sigma * (&xs - xs_prev).norm_squared() + dv.component_mul(&dv).dot(&rho_vec);
        fpr_history.push(fpr.sqrt());

        let ax = a * &x;
        let px = p * &x;
        let aty = &at * &y;
        let r_prim = (&ax - &z).amax();
        let r_dual = (&px + q + &aty).amax();
        let eps_prim = settings.eps_abs + settings.eps_rel * ax.amax().max(z.amax());
        let eps_dual = settings.eps_abs + settings.eps_rel * px.amax().max(aty.amax()).max(q.amax());
        if r_prim <= eps_prim && r_dual <= eps_dual {
            status = QpStatus::Solved;
            break;
        }

        let dy = &y - &y_prev;
        if primal_infeasible(&dy, &at, l, u, settings.eps_infeasible) {
            status = QpStatus::PrimalInfeasible;
            break;
        }
        let dx = &x - &x_prev;
        if dual_infeasible(&dx, p, q, a, l, u, settings.eps_infeasible) {
            status = QpStatus::DualInfeasible;
            break;
        }

        if settings.adaptive_rho_interval > 0 && iter % settings.adaptive_rho_interval == 0 {
            let sax = &scaled.a * &xs;
            let spx = &scaled.p * &xs;
            let saty = &sat * &ys;
            let sr_prim = (&sax - &zs).amax();
            let sr_dual = (&spx + &scaled.q + &saty).amax();
            let prim_scale = sax.amax().max(zs.amax()).max(1e-30);
            let dual_scale = spx.amax().max(saty.amax()).max(scaled.q.amax()).max(1e-30);
            let ratio = ((sr_prim / prim_scale) / (sr_dual / dual_scale).max(1e-30)).sqrt();
            let new_rho = (rho * ratio).clamp(RHO_MIN, RHO_MAX);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                rho = new_rho;
                rho_vec = rho_vector(&scaled, rho);
                chol = factor(&scaled.p, &scaled.a, &rho_vec, settings.sigma)?;
            }
        }
    }

    if matches!(status, QpStatus::PrimalInfeasible | QpStatus::DualInfeasible) {
        return Ok(QpSolution {
            status,
            objective: problem.objective(&x),
            residuals: problem.kkt_residuals(&x, &y),
            x,
            y,
            iterations,
            polished: false,
            objective_history: history,
            fixed_point_residual: fpr_history,
        });
    }

    let mut residuals = problem.kkt_residuals(&x, &y);
    let mut polished = false;
    if settings.polish {
        if let Some((xp, yp)) = polish(problem, &z, &y) {
            let pr = problem.kkt_residuals(&xp, &yp);
            if pr.max() <= residuals.max() {
                x = xp;
                y = yp;
                residuals = pr;
                polished = true;
            }
        }
    }
    if status == QpStatus::Inaccurate && residuals.max() <= settings.eps_abs.max(1e-9) {
        status = QpStatus::Solved;
    }
    // Rows of the identity (box constraints) hold exactly after clamping.
    clamp_box_rows(problem, &mut x);
    Ok(QpSolution {
        status,
        objective: problem.objective(&x),
        residuals,
        x,
        y,
        iterations,
        polished,
        objective_history: history,
        fixed_point_residual: fpr_history,
    })
}

fn clamp_box_rows(problem: &QpProblem, x: &mut DVector<f64>) {
    for i in 0..problem.constraints() {
        let row = problem.a.row(i);
        let mut single = None;
        for (j, v) in row.iter().enumerate() {
            if *v != 0.0 {
                if single.is_some() || *v != 1.0 {
                    single = None;
                    break;
                }
                single = Some(j);
            }
        }
        if let Some(j) = single {
            x[j] = x[j].clamp(problem.l[i], problem.u[i]);
        }
    }
}

fn primal_infeasible(dy: &DVector<f64>, at: &DMatrix<f64>, l: &DVector<f64>, u: &DVector<f64>, eps: f64) -> bool {
    let norm = dy.amax();
    if norm <= 1e-30 {
        return false;
    }
    if (at * dy).amax() > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        if dy[i] > 0.0 {
            if u[i].is_infinite() {
                if dy[i] > eps * norm {
                    return false;
                }
            } else {
                support += u[i] * dy[i];
            }
        } else if dy[i] < 0.0 {
            if l[i].is_infinite() {
                if -dy[i] > eps * norm {
                    return false;
                }
            } else {
                support += l[i] * dy[i];
            }
        }
    }
    support < -eps * norm
}

fn dual_infeasible(
    dx: &DVector<f64>,
    p: &DMatrix<f64>,
    q: &DVector<f64>,
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    eps: f64,
) -> bool {
    let norm = dx.amax();
    if norm <= 1e-30 {
        return false;
    }
    if (p * dx).amax() > eps * norm || q.dot(dx) > -eps * norm {
        return false;
    }
    let adx = a * dx;
    (0..adx.len()).all(|i| {
        let upper_ok = u[i].is_infinite() || adx[i] <= eps * norm;
        let lower_ok = l[i].is_infinite() || adx[i] >= -eps * norm;
        upper_ok && lower_ok
    })
}

/// Solves the equality-constrained problem on the guessed active set.
fn polish(
    problem: &QpProblem,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = problem.variables();
    let (l, u) = (&problem.l, &problem.u);
    let active: Vec<(usize, f64)> = (0..problem.constraints())
        .filter_map(|i| {
            if z[i] - l[i] < -y[i] {
                Some((i, l[i]))
            } else if u[i] - z[i] < y[i] {
                Some((i, u[i]))
            } else {
                None
            }
        })
        .collect();
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&problem.p);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&problem.q));
    for (r, &(i, bound)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = problem.a[(i, j)];
            kkt[(j, n + r)] = problem.a[(i, j)];
        }
        rhs[n + r] = bound;
    }
    // tiny regularization keeps the saddle system solvable for degenerate P
    let delta = 1e-12;
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for i in n..n + k {
        kkt[(i, i)] -= delta;
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..3 {
        let residual = &rhs - &kkt * &sol;
        sol += lu.solve(&residual)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let xp = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(problem.constraints());
    for (r, &(i, _)) in active.iter().enumerate() {
        yp[i] = sol[n + r];
    }
    Some((xp, yp))
}
