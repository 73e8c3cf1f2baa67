//! Convex QP solver: operator-splitting (ADMM) with Ruiz equilibration,
//! over-relaxation, residual-balancing step-size adaptation, and a final
//! active-set polish that snaps the iterate onto the optimal face.
//!
//! The working form is `min ½x'Px + q'x  s.t.  l ≤ Ax ≤ u`, where `A`
//! stacks the problem rows and one identity row per variable bound. Each
//! iteration solves one quasi-definite KKT system with a factorization
//! that is reused across iterations; [`PreparedQp`] keeps that
//! factorization (and the last iterate) alive so families of QPs differing
//! only in linear cost or bounds solve in a handful of warm iterations.

use nalgebra::{DMatrix, DVector};

use super::{QuadraticProgram, Solution, SolveStatus, SolverError, FEAS_TOL};

/// Knobs for [`solve_qp_opts`].
#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    /// KKT residual tolerance at the returned point.
    pub tol: f64,
    /// Hard cap on ADMM iterations.
    pub max_iters: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tol: FEAS_TOL, max_iters: 200_000 }
    }
}

/// Solve with default iteration limit; see [`solve_qp_opts`].
pub fn solve_qp(qp: &QuadraticProgram, tol: f64) -> Result<Solution, SolverError> {
    solve_qp_opts(qp, &QpOptions { tol, ..QpOptions::default() })
}

/// Solve a convex QP from a cold start.
pub fn solve_qp_opts(qp: &QuadraticProgram, opts: &QpOptions) -> Result<Solution, SolverError> {
    Ok(PreparedQp::new(qp.clone(), *opts)?.solve())
}

const ALPHA: f64 = 1.6; // over-relaxation
const SIGMA: f64 = 1e-6; // primal regularization
const RHO_EQ_SCALE: f64 = 1e3; // stiffer step on equality rows
const CHECK_EVERY: usize = 25;
const ADAPT_EVERY: usize = 100;

/// A factored QP ready to solve repeatedly. Linear cost and row bounds can
/// be updated in place without refactorization, and every solve warm-starts
/// from the previous iterate.
pub struct PreparedQp {
    qp: QuadraticProgram,
    opts: QpOptions,
    n: usize,
    /// Original row count; identity rows for variable bounds follow.
    m_orig: usize,
    m: usize,
    // Scaled data: pbar = c D P D, abar = E A D, qbar = c D q.
    pbar: DMatrix<f64>,
    abar: DMatrix<f64>,
    qbar: DVector<f64>,
    lbar: DVector<f64>,
    ubar: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    cost_scale: f64,
    rho: DVector<f64>,
    kkt: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    // Iterate (scaled space).
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
}

impl PreparedQp {
    pub fn new(qp: QuadraticProgram, opts: QpOptions) -> Result<Self, SolverError> {
        qp.validate()?;
        let n = qp.lp.n_vars();
        let m_orig = qp.lp.n_rows();
        let m = m_orig + n;

        let p = qp.dense_q();
        let mut a = DMatrix::zeros(m, n);
        for &(r, c, v) in &qp.lp.entries {
            a[(r, c)] += v;
        }
        for j in 0..n {
            a[(m_orig + j, j)] = 1.0;
        }
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for (i, b) in qp.lp.row_bounds.iter().chain(qp.lp.var_bounds.iter()).enumerate() {
            l[i] = b.lower;
            u[i] = b.upper;
        }
        let q = DVector::from_column_slice(&qp.lp.cost);

        // Ruiz equilibration on [P A'; A 0], then cost normalization.
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        let mut pbar = p.clone();
        let mut abar = a.clone();
        for _ in 0..10 {
            let mut dv = DVector::from_element(n, 1.0);
            let mut ev = DVector::from_element(m, 1.0);
            for j in 0..n {
                let col_norm = pbar
                    .column(j)
                    .amax()
                    .max(abar.column(j).amax());
                if col_norm > 1e-12 {
                    dv[j] = 1.0 / col_norm.sqrt();
                }
            }
            for i in 0..m {
                let row_norm = abar.row(i).amax();
                if row_norm > 1e-12 {
                    ev[i] = 1.0 / row_norm.sqrt();
                }
            }
            for j in 0..n {
                for i in 0..n {
                    pbar[(i, j)] *= dv[i] * dv[j];
                }
            }
            for i in 0..m {
                for j in 0..n {
                    abar[(i, j)] *= ev[i] * dv[j];
                }
            }
            d.component_mul_assign(&dv);
            e.component_mul_assign(&ev);
        }
        let mut qbar = q.component_mul(&d);
        let p_col_mean = if n > 0 {
            (0..n).map(|j| pbar.column(j).amax()).sum::<f64>() / n as f64
        } else {
            0.0
        };
        let denom = p_col_mean.max(qbar.amax()).max(1e-6);
        let cost_scale = 1.0 / denom;
        pbar *= cost_scale;
        qbar *= cost_scale;
        let lbar = l.component_mul(&e);
        let ubar = u.component_mul(&e);

        let rho0 = 0.1;
        let rho = DVector::from_iterator(
            m,
            (0..m).map(|i| {
                if lbar[i] == ubar[i] && lbar[i].is_finite() {
                    rho0 * RHO_EQ_SCALE
                } else {
                    rho0
                }
            }),
        );

        let kkt = factor_kkt(&pbar, &abar, &rho);
        let x = DVector::zeros(n);
        let y = DVector::zeros(m);
        let z = DVector::zeros(m).zip_map(&lbar, |v: f64, lo| v.max(lo)).zip_map(&ubar, f64::min);

        Ok(Self {
            qp,
            opts,
            n,
            m_orig,
            m,
            pbar,
            abar,
            qbar,
            lbar,
            ubar,
            d,
            e,
            cost_scale,
            rho,
            kkt,
            x,
            y,
            z,
        })
    }

    /// Replace the linear cost (original, unscaled space). Cheap: no
    /// refactorization.
    pub fn set_cost(&mut self, cost: &[f64]) {
        assert_eq!(cost.len(), self.n);
        self.qp.lp.cost = cost.to_vec();
        let q = DVector::from_column_slice(cost);
        self.qbar = q.component_mul(&self.d) * self.cost_scale;
    }

    /// Replace one original row's bounds (unscaled). Cheap: no
    /// refactorization; the equality/inequality split of `rho` is kept.
    pub fn set_row_bounds(&mut self, row: usize, bounds: super::Bound) {
        assert!(row < self.m_orig);
        self.qp.lp.row_bounds[row] = bounds;
        self.lbar[row] = bounds.lower * self.e[row];
        self.ubar[row] = bounds.upper * self.e[row];
    }

    /// Run ADMM (warm-started) followed by an active-set polish.
    pub fn solve(&mut self) -> Solution {
        let tol = self.opts.tol;
        let mut y_prev = self.y.clone();
        let mut x_prev = self.x.clone();

        for it in 1..=self.opts.max_iters {
            // KKT solve for (x̃, ν), then split step.
            let mut rhs = DVector::zeros(self.n + self.m);
            for j in 0..self.n {
                rhs[j] = SIGMA * self.x[j] - self.qbar[j];
            }
            for i in 0..self.m {
                rhs[self.n + i] = self.z[i] - self.y[i] / self.rho[i];
            }
            let sol = self.kkt.solve(&rhs).expect("quasi-definite KKT is nonsingular");
            let xt = sol.rows(0, self.n).clone_owned();
            let nu = sol.rows(self.n, self.m).clone_owned();

            let mut zt = self.z.clone();
            for i in 0..self.m {
                zt[i] += (nu[i] - self.y[i]) / self.rho[i];
            }

            let x_next = &xt * ALPHA + &self.x * (1.0 - ALPHA);
            let mut z_pre = DVector::zeros(self.m);
            for i in 0..self.m {
                z_pre[i] = ALPHA * zt[i] + (1.0 - ALPHA) * self.z[i] + self.y[i] / self.rho[i];
            }
            let z_next = z_pre.zip_map(&self.lbar, f64::max).zip_map(&self.ubar, f64::min);
            let mut y_next = self.y.clone();
            for i in 0..self.m {
                y_next[i] += self.rho[i] * (z_pre[i] - self.y[i] / self.rho[i] - z_next[i]);
            }

            self.x = x_next;
            self.z = z_next;
            self.y = y_next;

            if it % CHECK_EVERY == 0 {
                let (rp, rd, tol_p, tol_d) = self.residuals(tol);
                if rp <= tol_p && rd <= tol_d {
                    return self.extract(true);
                }
                // Near convergence, try to finish exactly via polish.
                if rp <= tol_p * 1e3 && rd <= tol_d * 1e3 {
                    if let Some(sol) = self.try_polish() {
                        return sol;
                    }
                }
                let dy = &self.y - &y_prev;
                if let Some(status) = self.infeasibility_certificates(&dy, &(&self.x - &x_prev)) {
                    return Solution::of_status(status);
                }
                y_prev = self.y.clone();
                x_prev = self.x.clone();
            }

            if it % ADAPT_EVERY == 0 {
                self.adapt_rho(tol);
            }
        }

        let mut sol = self.extract(false);
        sol.status = SolveStatus::IterationLimit;
        sol
    }

    /// Unscaled residuals and their OSQP-style mixed tolerances.
    fn residuals(&self, tol: f64) -> (f64, f64, f64, f64) {
        let (x, y, z) = self.unscaled();
        let ax = self.unscaled_activity(&x);
        let px = self.dense_p_times(&x);
        let aty = self.a_transpose_times(&y);
        let q = DVector::from_column_slice(&self.qp.lp.cost);

        let rp = (&ax - &z).amax();
        let rd = (&px + &q + &aty).amax();
        let tol_p = tol * (1.0 + ax.amax().max(z.amax()));
        let tol_d = tol * (1.0 + px.amax().max(aty.amax()).max(q.amax()));
        (rp, rd, tol_p, tol_d)
    }

    fn unscaled(&self) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let x = self.x.component_mul(&self.d);
        let y = self.y.component_mul(&self.e) / self.cost_scale;
        let z = self.z.component_div(&self.e);
        (x, y, z)
    }

    /// Full (rows + variable-bound) activity in unscaled space.
    fn unscaled_activity(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut ax = DVector::zeros(self.m);
        for &(r, c, v) in &self.qp.lp.entries {
            ax[r] += v * x[c];
        }
        for j in 0..self.n {
            ax[self.m_orig + j] = x[j];
        }
        ax
    }

    fn dense_p_times(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut px = DVector::zeros(self.n);
        for &(r, c, v) in &self.qp.q_entries {
            px[r] += v * x[c];
        }
        px
    }

    fn a_transpose_times(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut aty = DVector::zeros(self.n);
        for &(r, c, v) in &self.qp.lp.entries {
            aty[c] += v * y[r];
        }
        for j in 0..self.n {
            aty[j] += y[self.m_orig + j];
        }
        aty
    }

    fn adapt_rho(&mut self, tol: f64) {
        let (rp, rd, tol_p, tol_d) = self.residuals(tol);
        let num = rp / tol_p.max(1e-300);
        let den = rd / tol_d.max(1e-300);
        if den <= 0.0 || num <= 0.0 {
            return;
        }
        let ratio = (num / den).sqrt();
        if !(0.2..=5.0).contains(&ratio) {
            let factor = ratio.clamp(1e-3, 1e3);
            for i in 0..self.m {
                self.rho[i] = (self.rho[i] * factor).clamp(1e-8, 1e8);
            }
            self.kkt = factor_kkt(&self.pbar, &self.abar, &self.rho);
        }
    }

    /// OSQP-style divergence certificates on the iterate deltas.
    fn infeasibility_certificates(
        &self,
        dy: &DVector<f64>,
        dx: &DVector<f64>,
    ) -> Option<SolveStatus> {
        let eps = 1e-9;
        // Primal infeasibility: A'δy ≈ 0 with negative support from the
        // bounds.
        let dy_norm = dy.amax();
        if dy_norm > 1e-12 {
            let aty = self.abar.transpose() * dy;
            if aty.amax() <= eps * dy_norm {
                let mut support = 0.0;
                let mut certificate = true;
                for i in 0..self.m {
                    let v = dy[i];
                    if v > 0.0 {
                        if self.ubar[i].is_finite() {
                            support += self.ubar[i] * v;
                        } else if v > eps * dy_norm {
                            certificate = false;
                            break;
                        }
                    } else if v < 0.0 {
                        if self.lbar[i].is_finite() {
                            support += self.lbar[i] * v;
                        } else if v < -eps * dy_norm {
                            certificate = false;
                            break;
                        }
                    }
                }
                if certificate && support < -eps * dy_norm {
                    return Some(SolveStatus::Infeasible);
                }
            }
        }
        // Dual infeasibility: a ray δx with Pδx ≈ 0, q'δx < 0, feasible
        // direction for every finite bound.
        let dx_norm = dx.amax();
        if dx_norm > 1e-12 {
            let pdx = &self.pbar * dx;
            let qdx = self.qbar.dot(dx);
            if pdx.amax() <= eps * dx_norm && qdx < -eps * dx_norm {
                let adx = &self.abar * dx;
                let ok = (0..self.m).all(|i| {
                    (!self.ubar[i].is_finite() || adx[i] <= eps * dx_norm)
                        && (!self.lbar[i].is_finite() || adx[i] >= -eps * dx_norm)
                });
                if ok {
                    return Some(SolveStatus::Unbounded);
                }
            }
        }
        None
    }

    /// Equality-KKT solve on the active set implied by the dual signs.
    /// Returns a solution only if it verifies to full tolerance.
    fn try_polish(&self) -> Option<Solution> {
        let tol = self.opts.tol;
        let (_, y, _) = self.unscaled();
        let mut active: Vec<(usize, f64)> = Vec::new(); // (row, rhs)
        let (l, u) = self.unscaled_bounds();
        for i in 0..self.m {
            if l[i] == u[i] && l[i].is_finite() {
                active.push((i, l[i]));
            } else if y[i] < -1e-10 && l[i].is_finite() {
                active.push((i, l[i]));
            } else if y[i] > 1e-10 && u[i].is_finite() {
                active.push((i, u[i]));
            }
        }
        let na = active.len();
        let dim = self.n + na;
        let mut kkt = DMatrix::zeros(dim, dim);
        for &(r, c, v) in &self.qp.q_entries {
            kkt[(r, c)] += v;
        }
        let full_a = self.full_a_unscaled();
        for (k, &(i, _)) in active.iter().enumerate() {
            for j in 0..self.n {
                let v = full_a[(i, j)];
                kkt[(self.n + k, j)] = v;
                kkt[(j, self.n + k)] = v;
            }
        }
        // Light diagonal regularization plus iterative refinement keeps
        // degenerate active sets solvable without biasing the result.
        let reg = 1e-9;
        let mut kkt_reg = kkt.clone();
        for j in 0..self.n {
            kkt_reg[(j, j)] += reg;
        }
        for k in 0..na {
            kkt_reg[(self.n + k, self.n + k)] -= reg;
        }
        let lu = kkt_reg.lu();
        let mut rhs = DVector::zeros(dim);
        for j in 0..self.n {
            rhs[j] = -self.qp.lp.cost[j];
        }
        for (k, &(_, b)) in active.iter().enumerate() {
            rhs[self.n + k] = b;
        }
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..3 {
            let resid = &rhs - &kkt * &sol;
            let corr = lu.solve(&resid)?;
            sol += corr;
        }

        let x: Vec<f64> = sol.rows(0, self.n).iter().copied().collect();
        let mut y_full = vec![0.0; self.m];
        for (k, &(i, _)) in active.iter().enumerate() {
            y_full[i] = sol[self.n + k];
        }

        // Verify: primal feasibility, stationarity, dual signs.
        let xv = DVector::from_column_slice(&x);
        let ax = self.unscaled_activity(&xv);
        let scale_p = 1.0 + ax.amax();
        for i in 0..self.m {
            if ax[i] < l[i] - tol * scale_p || ax[i] > u[i] + tol * scale_p {
                return None;
            }
        }
        let px = self.dense_p_times(&xv);
        let q = DVector::from_column_slice(&self.qp.lp.cost);
        let yv = DVector::from_column_slice(&y_full);
        let stat = (&px + &q + &self.a_transpose_times(&yv)).amax();
        let scale_d = 1.0 + px.amax().max(q.amax());
        if stat > tol * scale_d {
            return None;
        }
        for i in 0..self.m {
            if l[i] == u[i] {
                continue;
            }
            let interior = ax[i] > l[i] + tol * scale_p && ax[i] < u[i] - tol * scale_p;
            if interior && y_full[i].abs() > tol * scale_d {
                return None;
            }
            if y_full[i] > tol * scale_d && !u[i].is_finite() {
                return None;
            }
            if y_full[i] < -tol * scale_d && !l[i].is_finite() {
                return None;
            }
        }

        let objective = self.qp.objective_value(&x);
        Some(Solution {
            status: SolveStatus::Optimal,
            objective,
            best_bound: objective,
            rel_gap: 0.0,
            row_duals: y_full[..self.m_orig].to_vec(),
            x,
        })
    }

    fn unscaled_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (self.lbar.component_div(&self.e), self.ubar.component_div(&self.e))
    }

    fn full_a_unscaled(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.m, self.n);
        for &(r, c, v) in &self.qp.lp.entries {
            a[(r, c)] += v;
        }
        for j in 0..self.n {
            a[(self.m_orig + j, j)] = 1.0;
        }
        a
    }

    fn extract(&self, converged: bool) -> Solution {
        if converged {
            if let Some(sol) = self.try_polish() {
                return sol;
            }
        }
        let (x, y, _) = self.unscaled();
        let x: Vec<f64> = x.iter().copied().collect();
        let objective = self.qp.objective_value(&x);
        Solution {
            status: SolveStatus::Optimal,
            objective,
            best_bound: objective,
            rel_gap: 0.0,
            row_duals: y.rows(0, self.m_orig).iter().copied().collect(),
            x,
        }
    }
}

fn factor_kkt(
    pbar: &DMatrix<f64>,
    abar: &DMatrix<f64>,
    rho: &DVector<f64>,
) -> nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> {
    let n = pbar.nrows();
    let m = abar.nrows();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(pbar);
    for j in 0..n {
        kkt[(j, j)] += SIGMA;
    }
    kkt.view_mut((n, 0), (m, n)).copy_from(abar);
    kkt.view_mut((0, n), (n, m)).copy_from(&abar.transpose());
    for i in 0..m {
        kkt[(n + i, n + i)] = -1.0 / rho[i];
    }
    kkt.lu()
}
