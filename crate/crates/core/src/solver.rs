//! Weighted estimation engines.
//!
//! The second-step model is bilinear: for a fixed persistence parameter
//! `rho1` the residual
//!
//! ```text
//! r = y − rho1·ν − (a − rho1·b)·β − e·γ
//! ```
//!
//! is linear in `(β, γ)`. [`fit_profiled_nls`] exploits this by profiling the
//! weighted RSS over `rho1` and solving the inner problem by QR. Because the
//! residual is linear in the packed columns `Z = [a, b, e, y, ν]`, any
//! weighted system can be compressed to the triangular factor of `√W·Z`
//! without changing the objective; [`BilinearSystem`] holds that factor so
//! per-site factors can be re-weighted and stacked cheaply.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative diagonal threshold below which a triangular factor is singular.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub estimate: Vec<f64>,
    pub weighted_rss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Infinity norm of the objective gradient at `estimate`.
    pub gradient_norm: f64,
    /// Ratio of extreme diagonal magnitudes of the final triangular factor.
    pub condition: f64,
    pub message: Option<String>,
}

pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: values.len(),
            found: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::ZeroWeight);
    }
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: Vec<f64>,
    pub weighted_rss: f64,
    pub condition: f64,
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    Ok(())
}

fn diag_condition(r: &DMatrix<f64>) -> (f64, f64) {
    let n = r.nrows().min(r.ncols());
    let mut max = 0.0f64;
    let mut min = f64::INFINITY;
    for i in 0..n {
        let d = r[(i, i)].abs();
        max = max.max(d);
        min = min.min(d);
    }
    (min, max)
}

/// Least squares on an unweighted system by Householder QR.
fn qr_least_squares(x: DMatrix<f64>, y: DVector<f64>) -> Result<LinearFit> {
    let (n, p) = x.shape();
    if n < p {
        return Err(Error::Singular {
            condition: f64::INFINITY,
        });
    }
    let qr = x.qr();
    let r = qr.r();
    let (min, max) = diag_condition(&r);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if max == 0.0 || !(min > RANK_TOL * max) {
        return Err(Error::Singular { condition });
    }
    let mut qty = y;
    qr.q_tr_mul(&mut qty);
    let head = qty.rows(0, p).into_owned();
    let coef = r
        .solve_upper_triangular(&head)
        .ok_or(Error::Singular { condition })?;
    let rss: f64 = qty.rows(p, n - p).iter().map(|v| v * v).sum();
    if !rss.is_finite() || coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("least-squares solution".into()));
    }
    Ok(LinearFit {
        coefficients: coef.iter().copied().collect(),
        weighted_rss: rss,
        condition,
    })
}

/// Minimize Σ wᵢ (yᵢ − xᵢ·β)² by QR of the √w-scaled system.
pub fn solve_weighted_linear(design: &DMatrix<f64>, response: &[f64], weights: &[f64]) -> Result<LinearFit> {
    let (n, _) = design.shape();
    if response.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: response.len(),
        });
    }
    check_weights(weights, n)?;
    let mut x = design.clone();
    let mut y = DVector::from_column_slice(response);
    for i in 0..n {
        let s = weights[i].sqrt();
        x.row_mut(i).scale_mut(s);
        y[i] *= s;
    }
    qr_least_squares(x, y)
}

/// Raw rows of the bilinear second-step model.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearRows {
    /// Technology terms at t (n × p).
    pub current: DMatrix<f64>,
    /// The same terms at t−1 (n × p).
    pub lagged: DMatrix<f64>,
    /// Terms entering linearly only: intercept and controls (n × q).
    pub exog: DMatrix<f64>,
    pub response: Vec<f64>,
    /// Proxy for lagged productivity before subtracting lagged technology.
    pub proxy: Vec<f64>,
}

impl BilinearRows {
    pub fn new(
        current: DMatrix<f64>,
        lagged: DMatrix<f64>,
        exog: DMatrix<f64>,
        response: Vec<f64>,
        proxy: Vec<f64>,
    ) -> Result<Self> {
        let n = current.nrows();
        if lagged.shape() != current.shape() {
            return Err(Error::DimensionMismatch {
                expected: current.ncols(),
                found: lagged.ncols(),
            });
        }
        for len in [exog.nrows(), lagged.nrows(), response.len(), proxy.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, found: len });
            }
        }
        Ok(BilinearRows {
            current,
            lagged,
            exog,
            response,
            proxy,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.current.nrows()
    }

    pub fn n_tech(&self) -> usize {
        self.current.ncols()
    }

    pub fn n_exog(&self) -> usize {
        self.exog.ncols()
    }

    /// Parameter count: technology terms, linear terms and `rho1`.
    pub fn n_params(&self) -> usize {
        self.n_tech() + self.n_exog() + 1
    }

    /// Residual at θ = [β, γ, rho1].
    pub fn residual(&self, theta: &[f64], row: usize) -> f64 {
        let p = self.n_tech();
        let q = self.n_exog();
        let rho1 = theta[p + q];
        let mut r = self.response[row] - rho1 * self.proxy[row];
        for j in 0..p {
            r -= (self.current[(row, j)] - rho1 * self.lagged[(row, j)]) * theta[j];
        }
        for j in 0..q {
            r -= self.exog[(row, j)] * theta[p + j];
        }
        r
    }

    /// Rows restricted to the given indices.
    pub fn select(&self, idx: &[usize]) -> BilinearRows {
        BilinearRows {
            current: self.current.select_rows(idx),
            lagged: self.lagged.select_rows(idx),
            exog: self.exog.select_rows(idx),
            response: idx.iter().map(|&i| self.response[i]).collect(),
            proxy: idx.iter().map(|&i| self.proxy[i]).collect(),
        }
    }

    fn packed_row(&self, i: usize, out: &mut [f64]) {
        let p = self.n_tech();
        let q = self.n_exog();
        for j in 0..p {
            out[j] = self.current[(i, j)];
            out[p + j] = self.lagged[(i, j)];
        }
        for j in 0..q {
            out[2 * p + j] = self.exog[(i, j)];
        }
        out[2 * p + q] = self.response[i];
        out[2 * p + q + 1] = self.proxy[i];
    }
}

impl ResidualModel for BilinearRows {
    fn n_params(&self) -> usize {
        BilinearRows::n_params(self)
    }

    fn n_rows(&self) -> usize {
        BilinearRows::n_rows(self)
    }

    fn residual(&self, theta: &[f64], row: usize) -> f64 {
        BilinearRows::residual(self, theta, row)
    }

    fn jacobian(&self, theta: &[f64], row: usize, out: &mut [f64]) {
        let p = self.n_tech();
        let q = self.n_exog();
        let rho1 = theta[p + q];
        let mut d_rho = -self.proxy[row];
        for j in 0..p {
            out[j] = -(self.current[(row, j)] - rho1 * self.lagged[(row, j)]);
            d_rho += self.lagged[(row, j)] * theta[j];
        }
        for j in 0..q {
            out[p + j] = -self.exog[(row, j)];
        }
        out[p + q] = d_rho;
    }
}

/// Triangular factor `R` of a weighted bilinear system with `RᵀR = ZᵀWZ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearSystem {
    factor: DMatrix<f64>,
    n_tech: usize,
    n_exog: usize,
    /// Number of raw rows carrying positive weight.
    support: usize,
}

impl BilinearSystem {
    fn width(n_tech: usize, n_exog: usize) -> usize {
        2 * n_tech + n_exog + 2
    }

    pub fn from_rows(rows: &BilinearRows, weights: &[f64]) -> Result<Self> {
        let n = rows.n_rows();
        check_weights(weights, n)?;
        let width = Self::width(rows.n_tech(), rows.n_exog());
        let mut z = DMatrix::zeros(n, width);
        let mut buf = vec![0.0; width];
        for i in 0..n {
            rows.packed_row(i, &mut buf);
            let s = weights[i].sqrt();
            for j in 0..width {
                z[(i, j)] = buf[j] * s;
            }
        }
        Ok(BilinearSystem {
            factor: compress(z),
            n_tech: rows.n_tech(),
            n_exog: rows.n_exog(),
            support: weights.iter().filter(|w| **w > 0.0).count(),
        })
    }

    /// Weighted sum of independent systems: Σ wₖ ZₖᵀZₖ.
    pub fn stack<'a>(parts: impl IntoIterator<Item = (&'a BilinearSystem, f64)>) -> Result<Self> {
        let parts: Vec<(&BilinearSystem, f64)> = parts.into_iter().filter(|(_, w)| *w > 0.0).collect();
        let Some((first, _)) = parts.first() else {
            return Err(Error::ZeroWeight);
        };
        let (p, q) = (first.n_tech, first.n_exog);
        let width = Self::width(p, q);
        let total_rows: usize = parts.iter().map(|(s, _)| s.factor.nrows()).sum();
        let mut z = DMatrix::zeros(total_rows, width);
        let mut at = 0;
        let mut support = 0;
        for (sys, w) in &parts {
            if sys.n_tech != p || sys.n_exog != q {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    found: Self::width(sys.n_tech, sys.n_exog),
                });
            }
            if !w.is_finite() {
                return Err(Error::InvalidArgument("non-finite stacking weight".into()));
            }
            let s = w.sqrt();
            let k = sys.factor.nrows();
            z.view_mut((at, 0), (k, width)).copy_from(&(&sys.factor * s));
            at += k;
            support += sys.support;
        }
        Ok(BilinearSystem {
            factor: compress(z),
            n_tech: p,
            n_exog: q,
            support,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_tech + self.n_exog + 1
    }

    pub fn support(&self) -> usize {
        self.support
    }

    /// Inner linear problem at fixed `rho1`: (β, γ) and the profile RSS.
    fn inner(&self, rho1: f64) -> Result<LinearFit> {
        let (p, q) = (self.n_tech, self.n_exog);
        let r = &self.factor;
        let m = r.nrows();
        let mut x = DMatrix::zeros(m, p + q);
        let mut y = DVector::zeros(m);
        for i in 0..m {
            for j in 0..p {
                x[(i, j)] = r[(i, j)] - rho1 * r[(i, p + j)];
            }
            for j in 0..q {
                x[(i, p + j)] = r[(i, 2 * p + j)];
            }
            y[i] = r[(i, 2 * p + q)] - rho1 * r[(i, 2 * p + q + 1)];
        }
        qr_least_squares(x, y)
    }

    /// Weighted RSS at θ = [β, γ, rho1].
    pub fn rss(&self, theta: &[f64]) -> f64 {
        let c = self.combination(theta);
        let rc = &self.factor * c;
        rc.norm_squared()
    }

    /// Gradient of the weighted RSS at θ.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let (p, q) = (self.n_tech, self.n_exog);
        let rc = &self.factor * self.combination(theta);
        let rho1 = theta[p + q];
        let col = |j: usize| self.factor.column(j);
        let mut g = vec![0.0; p + q + 1];
        for j in 0..p {
            g[j] = -2.0 * (col(j) - col(p + j) * rho1).dot(&rc);
        }
        for j in 0..q {
            g[p + j] = -2.0 * col(2 * p + j).dot(&rc);
        }
        let mut d_rho = -col(2 * p + q + 1).into_owned();
        for j in 0..p {
            d_rho += col(p + j) * theta[j];
        }
        g[p + q] = 2.0 * d_rho.dot(&rc);
        g
    }

    /// Packed-column coefficients c with residual = Z·c.
    fn combination(&self, theta: &[f64]) -> DVector<f64> {
        let (p, q) = (self.n_tech, self.n_exog);
        let rho1 = theta[p + q];
        let mut c = DVector::zeros(Self::width(p, q));
        for j in 0..p {
            c[j] = -theta[j];
            c[p + j] = rho1 * theta[j];
        }
        for j in 0..q {
            c[2 * p + j] = -theta[p + j];
        }
        c[2 * p + q] = 1.0;
        c[2 * p + q + 1] = -rho1;
        c
    }
}

fn compress(z: DMatrix<f64>) -> DMatrix<f64> {
    if z.nrows() == 0 {
        return z;
    }
    // Row compression through R keeps ZᵀZ intact; rows beyond the width
    // carry no information.
    z.qr().r()
}

/// Search bracket and tolerances for the profiled solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileOptions {
    pub lower: f64,
    pub upper: f64,
    /// Coarse grid points scanned before golden-section refinement.
    pub grid_points: usize,
    pub x_tol: f64,
    pub grad_tol: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            lower: -0.2,
            upper: 1.2,
            grid_points: 57,
            x_tol: 1e-10,
            grad_tol: 1e-8,
        }
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Profiled weighted NLS for the bilinear model. The estimate is ordered
/// `[β, γ, rho1]`.
pub fn fit_profiled_nls(system: &BilinearSystem, opts: ProfileOptions) -> Result<SolverReport> {
    if system.support < system.n_params() {
        return Err(Error::Singular {
            condition: f64::INFINITY,
        });
    }
    let profile = |rho1: f64| -> f64 {
        match system.inner(rho1) {
            Ok(fit) => fit.weighted_rss,
            Err(_) => f64::INFINITY,
        }
    };
    let mut evals = 0usize;
    let n_grid = opts.grid_points.max(3);
    let step = (opts.upper - opts.lower) / (n_grid - 1) as f64;
    let mut best = (0usize, f64::INFINITY);
    for i in 0..n_grid {
        let f = profile(opts.lower + step * i as f64);
        evals += 1;
        if f < best.1 {
            best = (i, f);
        }
    }
    if !best.1.is_finite() {
        // Singular at every grid point: report the inner failure directly.
        return system.inner(opts.lower + step * best.0 as f64).and(Err(Error::Singular {
            condition: f64::INFINITY,
        }));
    }

    let mut a = opts.lower + step * best.0.saturating_sub(1) as f64;
    let mut b = (opts.lower + step * (best.0 + 1) as f64).min(opts.upper);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = profile(x1);
    let mut f2 = profile(x2);
    evals += 2;
    while (b - a) > opts.x_tol * (1.0 + a.abs().max(b.abs())) {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = profile(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = profile(x2);
        }
        evals += 1;
    }
    let mut rho1 = if f1 <= f2 { x1 } else { x2 };

    let assemble = |rho1: f64| -> Result<(Vec<f64>, LinearFit)> {
        let fit = system.inner(rho1)?;
        let mut theta = fit.coefficients.clone();
        theta.push(rho1);
        Ok((theta, fit))
    };
    let (mut theta, mut fit) = assemble(rho1)?;

    // Secant polish on the profile derivative; golden section alone stalls
    // near sqrt(eps) because the profile is flat at its minimum.
    let k = system.n_params() - 1;
    let dprofile = |theta: &[f64]| system.gradient(theta)[k];
    let mut g = dprofile(&theta);
    let mut prev = (rho1 + 1e-7, {
        let (t, _) = assemble(rho1 + 1e-7)?;
        dprofile(&t)
    });
    for _ in 0..8 {
        if g == 0.0 || (prev.1 - g) == 0.0 {
            break;
        }
        let next = rho1 - g * (prev.0 - rho1) / (prev.1 - g);
        if !next.is_finite() || next < opts.lower || next > opts.upper {
            break;
        }
        let Ok((t2, fit2)) = assemble(next) else { break };
        evals += 1;
        if fit2.weighted_rss > fit.weighted_rss * (1.0 + 1e-12) + 1e-300 {
            break;
        }
        let g2 = dprofile(&t2);
        prev = (rho1, g);
        rho1 = next;
        theta = t2;
        fit = fit2;
        g = g2;
        if g.abs() <= 1e-14 * (1.0 + fit.weighted_rss) {
            break;
        }
    }

    let grad = system.gradient(&theta);
    let gradient_norm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let weighted_rss = system.rss(&theta);
    let edge = (rho1 - opts.lower).abs() < 1e3 * opts.x_tol || (opts.upper - rho1).abs() < 1e3 * opts.x_tol;
    let grad_ok = gradient_norm <= opts.grad_tol * (1.0 + weighted_rss);
    let message = if edge {
        Some(format!("rho1 search hit the bracket edge at {rho1:.6}"))
    } else if !grad_ok {
        Some(format!("profile gradient {gradient_norm:.3e} above tolerance"))
    } else {
        None
    };
    Ok(SolverReport {
        estimate: theta,
        weighted_rss,
        iterations: evals,
        converged: !edge && grad_ok,
        gradient_norm,
        condition: fit.condition,
        message,
    })
}

/// Convenience wrapper: compress raw rows with weights, then profile.
pub fn fit_profiled_rows(rows: &BilinearRows, weights: &[f64], opts: ProfileOptions) -> Result<SolverReport> {
    fit_profiled_nls(&BilinearSystem::from_rows(rows, weights)?, opts)
}

/// Residual function with an analytic Jacobian, evaluated row by row.
pub trait ResidualModel: Sync {
    fn n_params(&self) -> usize;
    fn n_rows(&self) -> usize;
    fn residual(&self, theta: &[f64], row: usize) -> f64;
    /// ∂r/∂θ for one row.
    fn jacobian(&self, theta: &[f64], row: usize, out: &mut [f64]);
}

/// Central finite-difference Jacobian row with relative step `rel_step`.
pub fn finite_difference_jacobian<M: ResidualModel + ?Sized>(
    model: &M,
    theta: &[f64],
    row: usize,
    rel_step: f64,
) -> Vec<f64> {
    let mut t = theta.to_vec();
    (0..theta.len())
        .map(|j| {
            let h = rel_step * theta[j].abs().max(1.0);
            t[j] = theta[j] + h;
            let up = model.residual(&t, row);
            t[j] = theta[j] - h;
            let down = model.residual(&t, row);
            t[j] = theta[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonOptions {
    pub max_iter: usize,
    /// Relative RSS change treated as convergence.
    pub rss_tol: f64,
    /// Gradient infinity norm, relative to 1 + RSS.
    pub grad_tol: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        GaussNewtonOptions {
            max_iter: 200,
            rss_tol: 1e-10,
            grad_tol: 1e-8,
        }
    }
}

struct Linearization {
    rss: f64,
    jtj_diag: Vec<f64>,
    sqrt_w_j: DMatrix<f64>,
    sqrt_w_r: DVector<f64>,
    gradient: Vec<f64>,
}

fn linearize<M: ResidualModel + ?Sized>(model: &M, theta: &[f64], weights: &[f64]) -> Option<Linearization> {
    let n = model.n_rows();
    let p = model.n_params();
    let mut j = DMatrix::zeros(n, p);
    let mut r = DVector::zeros(n);
    let mut row = vec![0.0; p];
    for i in 0..n {
        let s = weights[i].sqrt();
        let ri = model.residual(theta, i);
        if !ri.is_finite() {
            return None;
        }
        r[i] = s * ri;
        model.jacobian(theta, i, &mut row);
        for c in 0..p {
            j[(i, c)] = s * row[c];
        }
    }
    let gradient: Vec<f64> = (0..p).map(|c| 2.0 * j.column(c).dot(&r)).collect();
    let jtj_diag = (0..p).map(|c| j.column(c).norm_squared()).collect();
    Some(Linearization {
        rss: r.norm_squared(),
        jtj_diag,
        sqrt_w_j: j,
        sqrt_w_r: r,
        gradient,
    })
}

fn weighted_rss<M: ResidualModel + ?Sized>(model: &M, theta: &[f64], weights: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..model.n_rows() {
        let r = model.residual(theta, i);
        s += weights[i] * r * r;
    }
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Levenberg-damped Gauss-Newton on weighted residuals.
pub fn fit_gauss_newton<M: ResidualModel + ?Sized>(
    model: &M,
    init: &[f64],
    weights: &[f64],
    opts: GaussNewtonOptions,
) -> Result<SolverReport> {
    let p = model.n_params();
    if init.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: init.len(),
        });
    }
    check_weights(weights, model.n_rows())?;
    let mut theta = init.to_vec();
    let mut lin = linearize(model, &theta, weights)
        .ok_or_else(|| Error::NonFinite("residual at initial point".into()))?;
    let mut lambda = 1e-4;
    let mut iterations = 0;
    let mut converged = false;
    let mut message = None;

    let grad_small = |lin: &Linearization| {
        lin.gradient.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= opts.grad_tol * (1.0 + lin.rss)
    };

    while iterations < opts.max_iter {
        if grad_small(&lin) {
            converged = true;
            break;
        }
        iterations += 1;
        // Augmented system [√W J; √λ D] δ = [−√W r; 0].
        let n = lin.sqrt_w_j.nrows();
        let mut a = DMatrix::zeros(n + p, p);
        a.view_mut((0, 0), (n, p)).copy_from(&lin.sqrt_w_j);
        let mut rhs = DVector::zeros(n + p);
        rhs.rows_mut(0, n).copy_from(&(-&lin.sqrt_w_r));
        for c in 0..p {
            a[(n + c, c)] = (lambda * lin.jtj_diag[c].max(1e-12)).sqrt();
        }
        let step = match qr_least_squares(a, rhs) {
            Ok(fit) => fit.coefficients,
            Err(_) => {
                lambda *= 10.0;
                if lambda > 1e16 {
                    message = Some("damping exhausted".to_string());
                    break;
                }
                continue;
            }
        };
        let trial: Vec<f64> = theta.iter().zip(&step).map(|(t, d)| t + d).collect();
        let f_new = weighted_rss(model, &trial, weights);
        if f_new <= lin.rss {
            let rel = (lin.rss - f_new) / lin.rss.max(f64::MIN_POSITIVE);
            theta = trial;
            lin = linearize(model, &theta, weights)
                .ok_or_else(|| Error::NonFinite("residual after accepted step".into()))?;
            lambda = (lambda / 3.0).max(1e-15);
            if rel < opts.rss_tol {
                converged = true;
                break;
            }
        } else {
            lambda *= 4.0;
            if lambda > 1e16 {
                message = Some("damping exhausted without improvement".to_string());
                converged = grad_small(&lin);
                break;
            }
        }
    }
    if !converged && message.is_none() {
        message = Some(format!("no convergence after {iterations} iterations"));
    }
    let gradient_norm = lin.gradient.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let r = lin.sqrt_w_j.clone().qr().r();
    let (min, max) = diag_condition(&r);
    Ok(SolverReport {
        estimate: theta,
        weighted_rss: lin.rss,
        iterations,
        converged,
        gradient_norm,
        condition: if min > 0.0 { max / min } else { f64::INFINITY },
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weighted_mean_examples() {
        assert_eq!(weighted_mean(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(weighted_mean(&[1.0, 7.0, 3.0], &[0.0, 1.0, 0.0]).unwrap(), 7.0);
        assert_eq!(weighted_mean(&[1.0, 2.0, 4.0], &[1.0, 1.0, 2.0]).unwrap(), 2.75);
        assert!(matches!(weighted_mean(&[1.0], &[0.0]), Err(Error::ZeroWeight)));
    }

    #[test]
    fn exact_linear_data_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 30;
        let x = DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { (i as f64).powi(j as i32) * 0.1 });
        let beta = [0.5, -1.25, 0.03];
        let y: Vec<f64> = (0..n).map(|i| (0..3).map(|j| x[(i, j)] * beta[j]).sum()).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let fit = solve_weighted_linear(&x, &y, &w).unwrap();
        for (a, b) in fit.coefficients.iter().zip(beta) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicated_column_is_singular() {
        let x = DMatrix::from_fn(10, 3, |i, j| if j == 2 { i as f64 } else if j == 1 { i as f64 } else { 1.0 });
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        match solve_weighted_linear(&x, &y, &[1.0; 10]) {
            Err(Error::Singular { condition }) => assert!(condition > 1e10),
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn linear_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = 40;
            let x = DMatrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let wm = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
            let xtwx = x.transpose() * &wm * &x;
            let xtwy = x.transpose() * &wm * DVector::from_vec(y.clone());
            let oracle = xtwx.lu().solve(&xtwy).unwrap();
            let fit = solve_weighted_linear(&x, &y, &w).unwrap();
            for (a, b) in fit.coefficients.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    /// Rows generated exactly from the bilinear model.
    fn exact_rows(rng: &mut ChaCha8Rng, n: usize, theta: &[f64], with_control: bool) -> BilinearRows {
        let p = 2;
        let q = if with_control { 2 } else { 1 };
        let current = DMatrix::from_fn(n, p, |_, _| rng.random_range(0.0..3.0));
        let lagged = DMatrix::from_fn(n, p, |_, _| rng.random_range(0.0..3.0));
        let exog = DMatrix::from_fn(n, q, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
        let proxy: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let mut rows = BilinearRows::new(current, lagged, exog, vec![0.0; n], proxy).unwrap();
        for i in 0..n {
            // residual with response 0 is −fitted
            rows.response[i] = -rows.residual(theta, i);
        }
        rows
    }

    #[test]
    fn profiled_recovers_exact_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = [0.3, 0.25, 0.6, -0.2, 0.7];
        let rows = exact_rows(&mut rng, 50, &theta, true);
        let w: Vec<f64> = (0..50).map(|_| rng.random_range(0.1..1.0)).collect();
        let rep = fit_profiled_rows(&rows, &w, ProfileOptions::default()).unwrap();
        for (a, b) in rep.estimate.iter().zip(theta) {
            assert!((a - b).abs() < 1e-6, "{:?}", rep.estimate);
        }
        assert!(rep.weighted_rss < 1e-12);
    }

    #[test]
    fn zero_rho_matches_linear_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 60;
        let theta = [0.3, 0.25, 0.6, 0.0];
        let mut rows = exact_rows(&mut rng, n, &theta, false);
        for i in 0..n {
            rows.response[i] += rng.random_range(-0.01..0.01);
        }
        let w = vec![1.0; n];
        let x = DMatrix::from_fn(n, 3, |i, j| if j < 2 { rows.current[(i, j)] } else { 1.0 });
        let lin = solve_weighted_linear(&x, &rows.response, &w).unwrap();
        let rep = fit_profiled_rows(&rows, &w, ProfileOptions::default()).unwrap();
        // profiling can only do better than the nested rho1 = 0 model
        assert!(rep.weighted_rss <= lin.weighted_rss + 1e-12);
        let mut at_zero = lin.coefficients.clone();
        at_zero.push(0.0);
        let sys = BilinearSystem::from_rows(&rows, &w).unwrap();
        assert!((sys.rss(&at_zero) - lin.weighted_rss).abs() < 1e-10);
    }

    #[test]
    fn stacking_equals_direct_weighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = exact_rows(&mut rng, 40, &[0.2, 0.1, 0.5, 0.3, 0.6], true);
        let a: Vec<usize> = (0..20).collect();
        let b: Vec<usize> = (20..40).collect();
        let (wa, wb) = (0.3, 1.7);
        let sa = BilinearSystem::from_rows(&rows.select(&a), &[1.0; 20]).unwrap();
        let sb = BilinearSystem::from_rows(&rows.select(&b), &[1.0; 20]).unwrap();
        let stacked = BilinearSystem::stack([(&sa, wa), (&sb, wb)]).unwrap();
        let w: Vec<f64> = (0..40).map(|i| if i < 20 { wa } else { wb }).collect();
        let direct = BilinearSystem::from_rows(&rows, &w).unwrap();
        let theta = [0.1, 0.4, 0.2, -0.3, 0.5];
        let raw: f64 = (0..40).map(|i| w[i] * rows.residual(&theta, i).powi(2)).sum();
        assert!((stacked.rss(&theta) - raw).abs() < 1e-10 * raw.max(1.0));
        assert!((direct.rss(&theta) - raw).abs() < 1e-10 * raw.max(1.0));
    }

    #[test]
    fn quadratic_toy_converges_fast() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = [0.3, 0.25, 0.6, 0.0];
        let mut rows = exact_rows(&mut rng, 30, &theta, false);
        // freeze rho1 by zeroing the lagged and proxy columns: residual linear
        rows.lagged.fill(0.0);
        rows.proxy.iter_mut().for_each(|p| *p = 0.0);
        struct Linear(BilinearRows);
        impl ResidualModel for Linear {
            fn n_params(&self) -> usize {
                3
            }
            fn n_rows(&self) -> usize {
                self.0.n_rows()
            }
            fn residual(&self, t: &[f64], row: usize) -> f64 {
                self.0.residual(&[t[0], t[1], t[2], 0.0], row)
            }
            fn jacobian(&self, t: &[f64], row: usize, out: &mut [f64]) {
                let mut full = [0.0; 4];
                self.0.jacobian(&[t[0], t[1], t[2], 0.0], row, &mut full);
                out.copy_from_slice(&full[..3]);
            }
        }
        rows.response.iter_mut().for_each(|r| *r = 0.0);
        for i in 0..30 {
            rows.response[i] = -rows.residual(&theta, i);
        }
        let model = Linear(rows);
        let rep = fit_gauss_newton(&model, &[0.0, 0.0, 0.0], &[1.0; 30], GaussNewtonOptions::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 3, "iterations {}", rep.iterations);
        for (a, b) in rep.estimate.iter().zip(&theta[..3]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    fn noisy_rows(seed: u64, n: usize) -> (BilinearRows, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = exact_rows(&mut rng, n, &[0.3, 0.2, 0.5, 0.1, 0.6], true);
        for r in rows.response.iter_mut() {
            *r += rng.random_range(-0.1..0.1);
        }
        let w = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        (rows, w)
    }

    #[test]
    fn profiled_matches_dense_grid_oracle() {
        for seed in 0..3 {
            let (rows, w) = noisy_rows(100 + seed, 50);
            let rep = fit_profiled_rows(&rows, &w, ProfileOptions::default()).unwrap();
            let mut best = f64::INFINITY;
            for i in 0..=14_000 {
                let rho1 = -0.2 + 1e-4 * i as f64;
                let x = DMatrix::from_fn(50, 4, |r, j| match j {
                    0 | 1 => rows.current[(r, j)] - rho1 * rows.lagged[(r, j)],
                    _ => rows.exog[(r, j - 2)],
                });
                let y: Vec<f64> = (0..50).map(|r| rows.response[r] - rho1 * rows.proxy[r]).collect();
                best = best.min(solve_weighted_linear(&x, &y, &w).unwrap().weighted_rss);
            }
            assert!(rep.weighted_rss <= best + 1e-12);
            assert!((rep.weighted_rss - best).abs() < 1e-6);
        }
    }

    #[test]
    fn gauss_newton_agrees_with_profiling() {
        for seed in 0..5 {
            let (rows, w) = noisy_rows(200 + seed, 60);
            let prof = fit_profiled_rows(&rows, &w, ProfileOptions::default()).unwrap();
            assert!(prof.converged, "{:?}", prof.message);
            let gn = fit_gauss_newton(&rows, &[0.0, 0.0, 0.0, 0.0, 0.5], &w, GaussNewtonOptions::default()).unwrap();
            assert!(gn.converged);
            assert!((gn.weighted_rss - prof.weighted_rss).abs() < 1e-8, "{} {}", gn.weighted_rss, prof.weighted_rss);
        }
    }

    proptest! {
        #[test]
        fn bilinear_jacobian_matches_finite_differences(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rows = exact_rows(&mut rng, 5, &[0.1, 0.2, 0.3, 0.4, 0.5], true);
            let mut analytic = vec![0.0; 5];
            for row in 0..5 {
                rows.jacobian(&theta, row, &mut analytic);
                let fd = finite_difference_jacobian(&rows, &theta, row, 1e-6);
                for (a, f) in analytic.iter().zip(&fd) {
                    prop_assert!((a - f).abs() <= 1e-5 * a.abs().max(1.0));
                }
            }
        }

        #[test]
        fn weight_scale_invariance(seed in 0u64..200, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = exact_rows(&mut rng, 40, &[0.3, 0.2, 0.5, 0.1, 0.6], true);
            for r in rows.response.iter_mut() {
                *r += rng.random_range(-0.05..0.05);
            }
            let w: Vec<f64> = (0..40).map(|_| rng.random_range(0.1..1.0)).collect();
            let wc: Vec<f64> = w.iter().map(|x| x * c).collect();
            let a = fit_profiled_rows(&rows, &w, ProfileOptions::default()).unwrap();
            let b = fit_profiled_rows(&rows, &wc, ProfileOptions::default()).unwrap();
            for (x, y) in a.estimate.iter().zip(&b.estimate) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
