//! Convex QP solver: Mehrotra predictor-corrector primal-dual interior point.
//!
//! Problem form:
//!
//! ```text
//! minimize    1/2 x^T P x + c^T x
//! subject to  row_lower <= A x <= row_upper
//!             lower <= x <= upper
//! ```
//!
//! Inequality rows get an auxiliary variable `z = a^T x` carrying the row
//! bounds, so the Newton system only ever sees equality rows plus box bounds.
//! With a diagonal `P` the primal block stays diagonal and the reduced system
//! `E D^-1 E^T` is assembled sparsely column by column.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Hessian {
    Diagonal(Vec<f64>),
    Dense(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub label: String,
    pub coefficients: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QpProblem {
    pub labels: Vec<String>,
    pub hessian: Hessian,
    pub linear: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Row>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of the rows: stationarity reads `P x + c - A^T y - zl + zu = 0`.
    pub row_duals: Vec<f64>,
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpSettings {
    pub max_iterations: usize,
    pub feasibility_tolerance: f64,
    pub gap_tolerance: f64,
    /// Scaled residual level at which the best iterate is still accepted when the
    /// strict tolerances are not reached (stall, breakdown or iteration cap).
    pub acceptable_tolerance: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            feasibility_tolerance: 1e-10,
            gap_tolerance: 1e-11,
            acceptable_tolerance: 1e-7,
        }
    }
}

impl QpProblem {
    pub fn new(n: usize) -> Self {
        Self {
            labels: (0..n).map(|i| format!("x{i}")).collect(),
            hessian: Hessian::Diagonal(vec![0.0; n]),
            linear: vec![0.0; n],
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            rows: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let quad = match &self.hessian {
            Hessian::Diagonal(d) => d.iter().zip(x).map(|(p, v)| p * v * v).sum::<f64>(),
            Hessian::Dense(m) => {
                let mut acc = 0.0;
                for (i, row) in m.iter().enumerate() {
                    for (j, p) in row.iter().enumerate() {
                        acc += x[i] * p * x[j];
                    }
                }
                acc
            }
        };
        0.5 * quad + self.linear.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn row_value(&self, r: usize, x: &[f64]) -> f64 {
        self.rows[r].coefficients.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Largest violation of any row or variable bound.
    pub fn primal_residual(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[i] - v).max(v - self.upper[i]);
        }
        for (r, row) in self.rows.iter().enumerate() {
            let v = self.row_value(r, x);
            worst = worst.max(row.lower - v).max(v - row.upper);
        }
        worst
    }

    fn hessian_times(&self, x: &[f64]) -> Vec<f64> {
        match &self.hessian {
            Hessian::Diagonal(d) => d.iter().zip(x).map(|(p, v)| p * v).collect(),
            Hessian::Dense(m) => m.iter().map(|row| row.iter().zip(x).map(|(p, v)| p * v).sum()).collect(),
        }
    }

    /// Stationarity residual `|P x + c - A^T y - zl + zu|_inf` of a solution.
    pub fn stationarity_residual(&self, s: &QpSolution) -> f64 {
        let mut g = self.hessian_times(&s.x);
        for (gi, c) in g.iter_mut().zip(&self.linear) {
            *gi += c;
        }
        for (row, y) in self.rows.iter().zip(&s.row_duals) {
            for &(j, a) in &row.coefficients {
                g[j] -= a * y;
            }
        }
        for j in 0..g.len() {
            g[j] += -s.lower_duals[j] + s.upper_duals[j];
        }
        g.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest complementarity product or dual sign violation.
    pub fn complementarity_residual(&self, s: &QpSolution) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.n() {
            let (zl, zu) = (s.lower_duals[j], s.upper_duals[j]);
            worst = worst.max(-zl).max(-zu);
            if self.lower[j].is_finite() {
                worst = worst.max((zl * (s.x[j] - self.lower[j])).abs());
            }
            if self.upper[j].is_finite() {
                worst = worst.max((zu * (self.upper[j] - s.x[j])).abs());
            }
        }
        for (r, row) in self.rows.iter().enumerate() {
            let y = s.row_duals[r];
            let v = self.row_value(r, &s.x);
            if row.lower == row.upper {
                continue;
            }
            // y > 0 pushes against the lower bound, y < 0 against the upper one.
            if y > 0.0 {
                worst = worst.max(if row.lower.is_finite() { (y * (v - row.lower)).abs() } else { y });
            } else if y < 0.0 {
                worst = worst.max(if row.upper.is_finite() { (y * (row.upper - v)).abs() } else { -y });
            }
        }
        worst
    }
}

/// Internal standard form: equality rows over `x` extended with one `z` per inequality row.
struct Standard {
    n: usize,
    nt: usize,
    diag: Option<Vec<f64>>,
    dense: Option<DMatrix<f64>>,
    c: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Column lists of the equality matrix E.
    cols: Vec<Vec<(usize, f64)>>,
    rhs: Vec<f64>,
    /// For each original row: its standard row, or `None` if dropped.
    row_map: Vec<Option<usize>>,
    /// Standard rows that pin a fixed variable, with the variable index.
    fixed_rows: Vec<(usize, usize)>,
}

fn standardize(p: &QpProblem) -> Standard {
    let n = p.n();
    let mut lo = p.lower.clone();
    let mut hi = p.upper.clone();
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut rhs = Vec::new();
    let mut row_map = Vec::with_capacity(p.rows.len());
    let mut extra_lo = Vec::new();
    let mut extra_hi = Vec::new();
    for row in &p.rows {
        if !row.lower.is_finite() && !row.upper.is_finite() {
            row_map.push(None);
            continue;
        }
        let r = rhs.len();
        for &(j, a) in &row.coefficients {
            if a != 0.0 {
                cols[j].push((r, a));
            }
        }
        if row.lower == row.upper {
            rhs.push(row.lower);
        } else {
            rhs.push(0.0);
            let z = n + extra_lo.len();
            cols.push(vec![(r, -1.0)]);
            extra_lo.push(row.lower);
            extra_hi.push(row.upper);
            debug_assert_eq!(cols.len(), z + 1);
        }
        row_map.push(Some(r));
    }
    let mut fixed_rows = Vec::new();
    for j in 0..n {
        if lo[j] == hi[j] {
            let r = rhs.len();
            cols[j].push((r, 1.0));
            rhs.push(lo[j]);
            lo[j] = f64::NEG_INFINITY;
            hi[j] = f64::INFINITY;
            fixed_rows.push((r, j));
        }
    }
    lo.extend(extra_lo);
    hi.extend(extra_hi);
    let nt = lo.len();
    let mut c = p.linear.clone();
    c.resize(nt, 0.0);
    let (diag, dense) = match &p.hessian {
        Hessian::Diagonal(d) => {
            let mut d = d.clone();
            d.resize(nt, 0.0);
            (Some(d), None)
        }
        Hessian::Dense(m) => {
            let mut big = DMatrix::zeros(nt, nt);
            for (i, row) in m.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    big[(i, j)] = *v;
                }
            }
            (None, Some(big))
        }
    };
    Standard {
        n,
        nt,
        diag,
        dense,
        c,
        lo,
        hi,
        cols,
        rhs,
        row_map,
        fixed_rows,
    }
}

const PRIMAL_REGULARISATION: f64 = 1e-10;

/// Score, x, row duals, lower and upper bound duals.
type Iterate = (f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m: f64, x| if m.is_nan() || x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Largest step in (0, 1] keeping `s + a ds > 0` for all entries.
fn max_step(s: &[f64], ds: &[f64], mask: &[bool]) -> f64 {
    let mut a: f64 = 1.0;
    for i in 0..s.len() {
        if mask[i] && ds[i] < 0.0 {
            a = a.min(-s[i] / ds[i]);
        }
    }
    a
}

struct Newton {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dzl: Vec<f64>,
    dzu: Vec<f64>,
}

enum Factor {
    Diagonal(Vec<f64>),
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
}

pub fn solve(p: &QpProblem, settings: &QpSettings) -> QpSolution {
    let st = standardize(p);
    let (nt, m) = (st.nt, st.rhs.len());
    let has_l: Vec<bool> = st.lo.iter().map(|v| v.is_finite()).collect();
    let has_u: Vec<bool> = st.hi.iter().map(|v| v.is_finite()).collect();
    let n_bounds = has_l.iter().chain(&has_u).filter(|b| **b).count();

    let mut x = vec![0.0; nt];
    for j in 0..nt {
        x[j] = match (has_l[j], has_u[j]) {
            (true, true) => 0.5 * (st.lo[j] + st.hi[j]),
            (true, false) => st.lo[j].max(0.0) + 1.0,
            (false, true) => st.hi[j].min(0.0) - 1.0,
            (false, false) => 0.0,
        };
    }
    let mut y = vec![0.0; m];
    let mut zl: Vec<f64> = has_l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut zu: Vec<f64> = has_u.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();

    let b_scale = 1.0 + inf_norm(&st.rhs);
    let c_scale = 1.0 + inf_norm(&st.c);
    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    let mut best: Option<Iterate> = None;

    let hess_times = |x: &[f64]| -> Vec<f64> {
        match (&st.diag, &st.dense) {
            (Some(d), _) => d.iter().zip(x).map(|(p, v)| p * v).collect(),
            (None, Some(h)) => (h * DVector::from_column_slice(x)).as_slice().to_vec(),
            _ => unreachable!(),
        }
    };

    for it in 0..settings.max_iterations {
        iterations = it;
        let sl: Vec<f64> = (0..nt).map(|j| if has_l[j] { x[j] - st.lo[j] } else { 1.0 }).collect();
        let su: Vec<f64> = (0..nt).map(|j| if has_u[j] { st.hi[j] - x[j] } else { 1.0 }).collect();
        // Residuals.
        let mut rd = hess_times(&x);
        for j in 0..nt {
            rd[j] += st.c[j] - zl[j] + zu[j];
            for &(r, a) in &st.cols[j] {
                rd[j] -= a * y[r];
            }
        }
        let mut rp: Vec<f64> = st.rhs.iter().map(|b| -b).collect();
        for j in 0..nt {
            for &(r, a) in &st.cols[j] {
                rp[r] += a * x[j];
            }
        }
        let mu = if n_bounds > 0 {
            (0..nt)
                .map(|j| (if has_l[j] { sl[j] * zl[j] } else { 0.0 }) + (if has_u[j] { su[j] * zu[j] } else { 0.0 }))
                .sum::<f64>()
                / n_bounds as f64
        } else {
            0.0
        };
        let (pres, dres) = (inf_norm(&rp), inf_norm(&rd));
        if pres <= settings.feasibility_tolerance * b_scale && dres <= settings.feasibility_tolerance * c_scale && mu <= settings.gap_tolerance {
            status = QpStatus::Optimal;
            best = None;
            break;
        }
        let score = (pres / b_scale).max(dres / c_scale).max(mu);
        if score.is_finite() && best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, x.clone(), y.clone(), zl.clone(), zu.clone()));
        }
        let dual_size = inf_norm(&y).max(inf_norm(&zl)).max(inf_norm(&zu));
        if dual_size > 1e13 && pres > 1e-6 * b_scale {
            status = QpStatus::Infeasible;
            break;
        }

        if !(pres.is_finite() && dres.is_finite() && mu.is_finite()) {
            status = QpStatus::MaxIterations;
            break;
        }

        // Primal block D = P + Zl/Sl + Zu/Su + reg. The proximal term keeps columns with zero
        // curvature and inactive bounds from swamping the Schur complement; it leaves E dx = -rp intact.
        let sigma_b: Vec<f64> = (0..nt)
            .map(|j| (if has_l[j] { zl[j] / sl[j] } else { 0.0 }) + (if has_u[j] { zu[j] / su[j] } else { 0.0 }))
            .collect();
        let reg = PRIMAL_REGULARISATION;
        let factor = match (&st.diag, &st.dense) {
            (Some(d), _) => Factor::Diagonal((0..nt).map(|j| d[j] + sigma_b[j] + reg).collect()),
            (None, Some(h)) => {
                let mut dm = h.clone();
                for j in 0..nt {
                    dm[(j, j)] += sigma_b[j] + reg;
                }
                match dm.cholesky() {
                    Some(c) => Factor::Dense(c),
                    None => {
                        status = QpStatus::Infeasible;
                        break;
                    }
                }
            }
            _ => unreachable!(),
        };
        let solve_d = |v: &[f64]| -> Vec<f64> {
            match &factor {
                Factor::Diagonal(d) => v.iter().zip(d).map(|(a, b)| a / b).collect(),
                Factor::Dense(c) => c.solve(&DVector::from_column_slice(v)).as_slice().to_vec(),
            }
        };
        // Schur complement S = E D^-1 E^T.
        let mut s = DMatrix::<f64>::zeros(m, m);
        match &factor {
            Factor::Diagonal(d) => {
                for j in 0..nt {
                    let col = &st.cols[j];
                    let inv = 1.0 / d[j];
                    for &(r1, a1) in col {
                        for &(r2, a2) in col {
                            s[(r1, r2)] += a1 * a2 * inv;
                        }
                    }
                }
            }
            Factor::Dense(c) => {
                let mut e = DMatrix::<f64>::zeros(nt, m);
                for j in 0..nt {
                    for &(r, a) in &st.cols[j] {
                        e[(j, r)] = a;
                    }
                }
                let dinv_e = c.solve(&e);
                s = e.transpose() * dinv_e;
            }
        }
        let s_scale = (0..m).fold(0.0f64, |acc, i| acc.max(s[(i, i)]));
        let mut chol = None;
        let mut delta = 1e-14 * s_scale.max(1.0);
        for _ in 0..8 {
            let mut sr = s.clone();
            for i in 0..m {
                sr[(i, i)] += delta;
            }
            if let Some(c) = sr.cholesky() {
                chol = Some(c);
                break;
            }
            delta *= 100.0;
        }
        let Some(chol) = chol else {
            status = QpStatus::Infeasible;
            break;
        };

        let newton = |rl_c: &[f64], ru_c: &[f64]| -> Newton {
            let r1: Vec<f64> = (0..nt)
                .map(|j| {
                    -rd[j] + (if has_l[j] { rl_c[j] / sl[j] } else { 0.0 }) - (if has_u[j] { ru_c[j] / su[j] } else { 0.0 })
                })
                .collect();
            let dinv_r1 = solve_d(&r1);
            let mut rhs_y: Vec<f64> = rp.iter().map(|v| -v).collect();
            for j in 0..nt {
                for &(r, a) in &st.cols[j] {
                    rhs_y[r] -= a * dinv_r1[j];
                }
            }
            let dy = if m > 0 {
                chol.solve(&DVector::from_column_slice(&rhs_y)).as_slice().to_vec()
            } else {
                Vec::new()
            };
            let mut et_dy = vec![0.0; nt];
            for j in 0..nt {
                for &(r, a) in &st.cols[j] {
                    et_dy[j] += a * dy[r];
                }
            }
            let rhs_x: Vec<f64> = r1.iter().zip(&et_dy).map(|(a, b)| a + b).collect();
            let dx = solve_d(&rhs_x);
            let dzl = (0..nt)
                .map(|j| if has_l[j] { (rl_c[j] - zl[j] * dx[j]) / sl[j] } else { 0.0 })
                .collect();
            let dzu = (0..nt)
                .map(|j| if has_u[j] { (ru_c[j] + zu[j] * dx[j]) / su[j] } else { 0.0 })
                .collect();
            Newton { dx, dy, dzl, dzu }
        };

        let step_len = |d: &Newton| -> f64 {
            let neg_dx: Vec<f64> = d.dx.iter().map(|v| -v).collect();
            max_step(&sl, &d.dx, &has_l)
                .min(max_step(&su, &neg_dx, &has_u))
                .min(max_step(&zl, &d.dzl, &has_l))
                .min(max_step(&zu, &d.dzu, &has_u))
        };

        // Predictor.
        let rl_aff: Vec<f64> = (0..nt).map(|j| -sl[j] * zl[j]).collect();
        let ru_aff: Vec<f64> = (0..nt).map(|j| -su[j] * zu[j]).collect();
        let aff = newton(&rl_aff, &ru_aff);
        let a_aff = step_len(&aff);
        let mu_aff = if n_bounds > 0 {
            (0..nt)
                .map(|j| {
                    let l = if has_l[j] {
                        (sl[j] + a_aff * aff.dx[j]) * (zl[j] + a_aff * aff.dzl[j])
                    } else {
                        0.0
                    };
                    let u = if has_u[j] {
                        (su[j] - a_aff * aff.dx[j]) * (zu[j] + a_aff * aff.dzu[j])
                    } else {
                        0.0
                    };
                    l + u
                })
                .sum::<f64>()
                / n_bounds as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).clamp(0.0, 1.0).powi(3) } else { 0.0 };
        // Corrector.
        let rl_c: Vec<f64> = (0..nt)
            .map(|j| if has_l[j] { sigma * mu - sl[j] * zl[j] - aff.dx[j] * aff.dzl[j] } else { 0.0 })
            .collect();
        let ru_c: Vec<f64> = (0..nt)
            .map(|j| if has_u[j] { sigma * mu - su[j] * zu[j] + aff.dx[j] * aff.dzu[j] } else { 0.0 })
            .collect();
        let d = newton(&rl_c, &ru_c);
        let alpha = (0.995 * step_len(&d)).min(1.0);
        log::trace!("ipm {it}: primal {pres:.2e} dual {dres:.2e} mu {mu:.2e} step {alpha:.3}");
        for j in 0..nt {
            x[j] += alpha * d.dx[j];
            zl[j] += alpha * d.dzl[j];
            zu[j] += alpha * d.dzu[j];
        }
        for r in 0..m {
            y[r] += alpha * d.dy[r];
        }
        iterations = it + 1;
    }

    if status != QpStatus::Infeasible {
        if let Some((score, bx, by, bzl, bzu)) = best.take() {
            if score <= settings.acceptable_tolerance {
                log::debug!("ipm: accepting best iterate at scaled residual {score:.2e}");
                (x, y, zl, zu) = (bx, by, bzl, bzu);
                status = QpStatus::Optimal;
            }
        }
    }

    // Map back to the user's variables and rows.
    let mut lower_duals = zl[..st.n].to_vec();
    let mut upper_duals = zu[..st.n].to_vec();
    for &(r, j) in &st.fixed_rows {
        // A pinned variable's multiplier is its bound dual.
        if y[r] >= 0.0 {
            lower_duals[j] += y[r];
        } else {
            upper_duals[j] -= y[r];
        }
    }
    let row_duals = st.row_map.iter().map(|r| r.map(|r| y[r]).unwrap_or(0.0)).collect();
    let mut xs = x[..st.n].to_vec();
    for &(_, j) in &st.fixed_rows {
        xs[j] = p.lower[j];
    }
    QpSolution {
        objective: p.objective(&xs),
        x: xs,
        row_duals,
        lower_duals,
        upper_duals,
        status,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_diagonal_is_zero() {
        let mut p = QpProblem::new(3);
        p.hessian = Hessian::Diagonal(vec![1.0, 2.0, 3.0]);
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(s.x.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bound_constrained_scalar() {
        let mut p = QpProblem::new(1);
        p.hessian = Hessian::Diagonal(vec![2.0]);
        p.rows.push(Row {
            label: "x >= 1".into(),
            coefficients: vec![(0, 1.0)],
            lower: 1.0,
            upper: f64::INFINITY,
        });
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-9);
        assert!((s.row_duals[0] - 2.0).abs() < 1e-6);
        assert!(p.stationarity_residual(&s) < 1e-8);
        let mut q = QpProblem::new(1);
        q.hessian = Hessian::Diagonal(vec![2.0]);
        q.lower[0] = 1.0;
        let s = solve(&q, &QpSettings::default());
        assert!((s.x[0] - 1.0).abs() < 1e-9);
        assert!((s.lower_duals[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn equality_and_fixed_variables() {
        // min x^2 + y^2 s.t. x + y = 2, z fixed at 3.
        let mut p = QpProblem::new(3);
        p.hessian = Hessian::Diagonal(vec![2.0, 2.0, 1.0]);
        p.lower[2] = 3.0;
        p.upper[2] = 3.0;
        p.rows.push(Row {
            label: "sum".into(),
            coefficients: vec![(0, 1.0), (1, 1.0)],
            lower: 2.0,
            upper: 2.0,
        });
        let s = solve(&p, &QpSettings::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-9 && (s.x[1] - 1.0).abs() < 1e-9);
        assert!((s.x[2] - 3.0).abs() < 1e-12);
        assert!(p.stationarity_residual(&s) < 1e-8);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let mut p = QpProblem::new(1);
        p.hessian = Hessian::Diagonal(vec![1.0]);
        for (lo, hi) in [(1.0, 1.0), (-1.0, -1.0)] {
            p.rows.push(Row {
                label: String::new(),
                coefficients: vec![(0, 1.0)],
                lower: lo,
                upper: hi,
            });
        }
        let s = solve(&p, &QpSettings::default());
        assert_ne!(s.status, QpStatus::Optimal);
    }
}
