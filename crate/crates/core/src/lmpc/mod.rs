//! Jerk-bounded linear MPC over joint velocities.
//!
//! Decision variables per DOF are the velocities of steps `0..N-2` and the
//! jerks of steps `0..N`, plus slacks for the task rows. Accelerations are
//! eliminated: the system-model rows tie each jerk to a second difference of
//! the velocity sequence, starting from the measured velocity and
//! acceleration and ending with two zero-velocity steps.

pub mod qp;

use std::collections::HashMap;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;
use web_time::Instant;

use crate::taskfn::{RowBounds, TaskRow};
use crate::world::{DofId, JerkLimit, WorldModel};
pub use qp::{Hessian, QpProblem, QpSettings, QpSolution, QpStatus, Row};

/// Lower floor on derived jerk limits, keeping zero-velocity DOFs solvable.
pub const JERK_LIMIT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmpcError {
    #[error("horizon {0} is too short: at least 4 steps are needed for the terminal rows")]
    HorizonTooShort(usize),
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("velocity limit must be finite and non-negative, got {0}")]
    InvalidVelocityLimit(f64),
    #[error("task row {0} has a non-finite Jacobian or bound")]
    NonFinite(usize),
    #[error("task row {row} has {got} Jacobian entries, the world has {expected} DOFs")]
    JacobianShape { row: usize, got: usize, expected: usize },
    #[error("jerk-limit program failed: {0}")]
    JerkProgram(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmpcConfig {
    pub dt: f64,
    pub horizon: usize,
    pub velocity_weight_start: f64,
    pub velocity_weight_end: f64,
    pub slack_weight_base: f64,
    pub kkt_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LmpcConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            horizon: 7,
            velocity_weight_start: 0.001,
            velocity_weight_end: 0.01,
            slack_weight_base: 1.0,
            kkt_tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

impl LmpcConfig {
    pub fn validate(&self) -> Result<(), LmpcError> {
        if self.horizon < 4 {
            return Err(LmpcError::HorizonTooShort(self.horizon));
        }
        if !(self.dt > 0.0) {
            return Err(LmpcError::InvalidTimeStep(self.dt));
        }
        if self.horizon as f64 * self.dt > 0.25 + 1e-12 {
            log::warn!(
                "horizon {} x dt {} = {:.3} s exceeds the 0.25 s envelope",
                self.horizon,
                self.dt,
                self.horizon as f64 * self.dt
            );
        }
        Ok(())
    }

    /// Velocity weight of step `k`, ramping linearly over the velocity steps.
    pub fn velocity_weight(&self, k: usize) -> f64 {
        let steps = self.horizon - 2;
        if steps <= 1 {
            return self.velocity_weight_start;
        }
        let f = k as f64 / (steps - 1) as f64;
        self.velocity_weight_start + (self.velocity_weight_end - self.velocity_weight_start) * f
    }
}

/// Index arithmetic for the decision vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub n_dofs: usize,
    pub horizon: usize,
    /// `(first slack index, slack count)` per task row.
    pub slacks: Vec<(usize, usize)>,
    pub n_vars: usize,
}

impl Layout {
    pub fn velocity_steps(&self) -> usize {
        self.horizon - 2
    }

    pub fn velocity(&self, dof: usize, k: usize) -> usize {
        dof * (self.horizon - 2) + k
    }

    pub fn jerk(&self, dof: usize, k: usize) -> usize {
        self.n_dofs * (self.horizon - 2) + dof * self.horizon + k
    }
}

/// One system-model row: `sum(c_i v_i) + jerk_coeff * jerk_k = rhs`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemRow {
    pub velocities: Vec<(usize, f64)>,
    pub jerk: usize,
    pub jerk_coeff: f64,
    pub rhs: f64,
}

/// The `N` system-model rows of one DOF (semi-implicit Euler with accelerations eliminated).
pub fn system_rows(horizon: usize, dt: f64, v_curr: f64, a_curr: f64) -> Vec<SystemRow> {
    let n = horizon;
    let dt2 = dt * dt;
    let mut rows = Vec::with_capacity(n);
    rows.push(SystemRow {
        velocities: vec![(0, 1.0)],
        jerk: 0,
        jerk_coeff: -dt2,
        rhs: v_curr + a_curr * dt,
    });
    rows.push(SystemRow {
        velocities: vec![(1, 1.0), (0, -2.0)],
        jerk: 1,
        jerk_coeff: -dt2,
        rhs: -v_curr,
    });
    for k in 2..=n - 3 {
        rows.push(SystemRow {
            velocities: vec![(k, 1.0), (k - 1, -2.0), (k - 2, 1.0)],
            jerk: k,
            jerk_coeff: -dt2,
            rhs: 0.0,
        });
    }
    rows.push(SystemRow {
        velocities: vec![(n - 3, 2.0), (n - 4, -1.0)],
        jerk: n - 2,
        jerk_coeff: dt2,
        rhs: 0.0,
    });
    rows.push(SystemRow {
        velocities: vec![(n - 3, -1.0)],
        jerk: n - 1,
        jerk_coeff: dt2,
        rhs: 0.0,
    });
    rows
}

/// Smallest jerk bound that lets one DOF decelerate from `v_max` (zero acceleration)
/// to the terminal zero-velocity steps, without the floor applied.
pub fn min_max_jerk(v_max: f64, dt: f64, horizon: usize) -> Result<f64, LmpcError> {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};
    if horizon < 4 {
        return Err(LmpcError::HorizonTooShort(horizon));
    }
    if !(dt > 0.0) {
        return Err(LmpcError::InvalidTimeStep(dt));
    }
    if !(v_max.is_finite() && v_max >= 0.0) {
        return Err(LmpcError::InvalidVelocityLimit(v_max));
    }
    if v_max == 0.0 {
        return Ok(0.0);
    }
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let free = (f64::NEG_INFINITY, f64::INFINITY);
    let v: Vec<_> = (0..horizon - 2).map(|_| lp.add_var(0.0, free)).collect();
    let j: Vec<_> = (0..horizon).map(|_| lp.add_var(0.0, free)).collect();
    let bound = lp.add_var(1.0, (0.0, f64::INFINITY));
    for row in system_rows(horizon, dt, v_max, 0.0) {
        let mut expr: Vec<_> = row.velocities.iter().map(|&(k, c)| (v[k], c)).collect();
        expr.push((j[row.jerk], row.jerk_coeff));
        lp.add_constraint(expr.as_slice(), ComparisonOp::Eq, row.rhs);
    }
    for &jk in &j {
        lp.add_constraint(&[(jk, 1.0), (bound, -1.0)][..], ComparisonOp::Le, 0.0);
        lp.add_constraint(&[(jk, 1.0), (bound, 1.0)][..], ComparisonOp::Ge, 0.0);
    }
    let outcome = lp.solve().map_err(|e| LmpcError::JerkProgram(format!("{e:?}")))?;
    let solution = outcome
        .into_solution()
        .map_err(|e| LmpcError::JerkProgram(format!("{:?}", e.termination_reason())))?;
    Ok(solution.var_value(bound))
}

/// Per-DOF jerk limits derived from velocity limits, with the floor applied.
pub fn derive_jerk_limits(v_max: &[f64], dt: f64, horizon: usize) -> Result<Vec<f64>, LmpcError> {
    v_max
        .iter()
        .map(|&v| min_max_jerk(v, dt, horizon).map(|j| j.max(JERK_LIMIT_FLOOR)))
        .collect()
}

/// Velocity bounds at horizon step `k` so that constant-velocity motion cannot cross a limit.
///
/// Zero always stays admissible; past a limit only motion back toward the range is allowed.
pub fn position_to_velocity_bounds(q: f64, limits: Option<(f64, f64)>, v_max: f64, dt: f64, k: usize) -> (f64, f64) {
    let Some((q_lb, q_ub)) = limits else {
        return (-v_max, v_max);
    };
    let t = (k + 1) as f64 * dt;
    let ub = ((q_ub - q) / t).max(0.0).min(v_max);
    let lb = ((q_lb - q) / t).min(0.0).max(-v_max);
    (lb, ub)
}

/// How strictly bounds are imposed; looser modes are fallbacks for infeasible cycles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BoundMode {
    Nominal,
    /// Position-derived velocity bounds only on the first step.
    RelaxedVelocity,
    /// As above, with jerk bounds widened a thousandfold.
    RelaxedJerk,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmpcSolution {
    pub velocities: Vec<Vec<f64>>,
    pub jerks: Vec<Vec<f64>>,
    pub slacks: Vec<Vec<f64>>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Command {
    pub velocity: Vec<f64>,
    pub acceleration: Vec<f64>,
    pub jerk: Vec<f64>,
    /// Set when the solution was not optimal and the command is a zero stop.
    pub stopped: bool,
}

/// Next velocity command `v + (a + j_0 dt) dt` and the propagated acceleration.
pub fn extract_command(sol: &LmpcSolution, velocities: &[f64], accelerations: &[f64], dt: f64) -> Command {
    let n = velocities.len();
    if sol.status != QpStatus::Optimal {
        return Command {
            velocity: vec![0.0; n],
            acceleration: vec![0.0; n],
            jerk: vec![0.0; n],
            stopped: true,
        };
    }
    let mut cmd = Command {
        velocity: Vec::with_capacity(n),
        acceleration: Vec::with_capacity(n),
        jerk: Vec::with_capacity(n),
        stopped: false,
    };
    for d in 0..n {
        let j0 = sol.jerks[d][0];
        let a = accelerations[d] + j0 * dt;
        cmd.velocity.push(velocities[d] + a * dt);
        cmd.acceleration.push(a);
        cmd.jerk.push(j0);
    }
    cmd
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub solution: LmpcSolution,
    pub command: Command,
    pub mode: BoundMode,
    pub solve_time: Duration,
    /// The problem of the last attempt, kept when no attempt was optimal.
    pub failed_problem: Option<QpProblem>,
}

/// Controller state: configuration plus the jerk-limit cache.
#[derive(Clone, Debug)]
pub struct Lmpc {
    pub config: LmpcConfig,
    jerk_cache: HashMap<(u64, u64, usize), f64>,
}

impl Lmpc {
    pub fn new(config: LmpcConfig) -> Result<Self, LmpcError> {
        config.validate()?;
        Ok(Self {
            config,
            jerk_cache: HashMap::new(),
        })
    }

    pub fn jerk_limit(&mut self, v_max: f64) -> Result<f64, LmpcError> {
        let key = (v_max.to_bits(), self.config.dt.to_bits(), self.config.horizon);
        if let Some(j) = self.jerk_cache.get(&key) {
            return Ok(*j);
        }
        let j = min_max_jerk(v_max, self.config.dt, self.config.horizon)?.max(JERK_LIMIT_FLOOR);
        self.jerk_cache.insert(key, j);
        Ok(j)
    }

    /// Effective jerk limit of every DOF.
    pub fn jerk_limits(&mut self, world: &WorldModel) -> Result<Vec<f64>, LmpcError> {
        world
            .dofs()
            .iter()
            .map(|d| match d.jerk_limit {
                JerkLimit::Fixed(j) => Ok(j),
                JerkLimit::Derived => self.jerk_limit(d.velocity_limit),
            })
            .collect()
    }

    pub fn build_qp(&mut self, world: &WorldModel, rows: &[TaskRow]) -> Result<(QpProblem, Layout), LmpcError> {
        self.build_qp_with(world, rows, BoundMode::Nominal)
    }

    pub fn build_qp_with(&mut self, world: &WorldModel, rows: &[TaskRow], mode: BoundMode) -> Result<(QpProblem, Layout), LmpcError> {
        let cfg = self.config.clone();
        let (n, dt) = (cfg.horizon, cfg.dt);
        let nd = world.dofs().len();
        let nv = n - 2;
        for (i, r) in rows.iter().enumerate() {
            if r.jacobian.len() != nd {
                return Err(LmpcError::JacobianShape {
                    row: i,
                    got: r.jacobian.len(),
                    expected: nd,
                });
            }
            let finite_bounds = match r.bounds {
                RowBounds::Equality(e) => e.is_finite(),
                RowBounds::Inequality(l, u) | RowBounds::Velocity(l, u) => !l.is_nan() && !u.is_nan(),
            };
            if !finite_bounds || r.jacobian.iter().any(|j| !j.is_finite()) {
                return Err(LmpcError::NonFinite(i));
            }
        }
        let mut slacks = Vec::with_capacity(rows.len());
        let mut next = nd * nv + nd * n;
        for r in rows {
            let count = if matches!(r.bounds, RowBounds::Velocity(..)) { nv } else { 1 };
            slacks.push((next, count));
            next += count;
        }
        let layout = Layout {
            n_dofs: nd,
            horizon: n,
            slacks,
            n_vars: next,
        };
        let mut p = QpProblem::new(layout.n_vars);
        let mut hess = vec![0.0; layout.n_vars];
        let jerk_limits = self.jerk_limits(world)?;
        let zero_velocity = world.zero_velocity_dofs();

        for (d, dof) in world.dofs().iter().enumerate() {
            let id = DofId(d);
            let (q, v, a) = (world.position(id), world.velocity(id), world.acceleration(id));
            for k in 0..nv {
                let i = layout.velocity(d, k);
                p.labels[i] = format!("{}.velocity[{k}]", dof.name);
                hess[i] = 2.0 * cfg.velocity_weight(k);
                let (mut lb, mut ub) = position_to_velocity_bounds(q, dof.position_limits, dof.velocity_limit, dt, k);
                if mode >= BoundMode::RelaxedVelocity && k > 0 {
                    let wide = dof.velocity_limit.max(v.abs());
                    lb = -wide;
                    ub = wide;
                }
                if zero_velocity.contains(&id) {
                    // Nonholonomic constraint: hard, not a task.
                    lb = 0.0;
                    ub = 0.0;
                }
                p.lower[i] = lb;
                p.upper[i] = ub;
            }
            let jmax = if mode == BoundMode::RelaxedJerk { jerk_limits[d] * 1e3 } else { jerk_limits[d] };
            for k in 0..n {
                let i = layout.jerk(d, k);
                p.labels[i] = format!("{}.jerk[{k}]", dof.name);
                p.lower[i] = -jmax;
                p.upper[i] = jmax;
            }
            for (k, row) in system_rows(n, dt, v, a).into_iter().enumerate() {
                let mut coefficients: Vec<(usize, f64)> = row.velocities.iter().map(|&(s, c)| (layout.velocity(d, s), c)).collect();
                coefficients.push((layout.jerk(d, row.jerk), row.jerk_coeff));
                p.rows.push(Row {
                    label: format!("{}.system[{k}]", dof.name),
                    coefficients,
                    lower: row.rhs,
                    upper: row.rhs,
                });
            }
        }

        for (t, r) in rows.iter().enumerate() {
            let (s0, count) = layout.slacks[t];
            let w_slack = r.slack_weight * cfg.slack_weight_base / (r.max_velocity * r.max_velocity);
            for s in s0..s0 + count {
                hess[s] = 2.0 * w_slack;
                p.labels[s] = format!("task[{t}].slack[{}]", s - s0);
            }
            let clamp = r.max_velocity * nv as f64 * dt;
            let nz: Vec<(usize, f64)> = r.jacobian.iter().copied().enumerate().filter(|(_, j)| *j != 0.0).collect();
            match r.bounds {
                RowBounds::Equality(_) | RowBounds::Inequality(..) => {
                    let mut coefficients = Vec::with_capacity(nz.len() * nv + 1);
                    for &(d, j) in &nz {
                        for k in 0..nv {
                            coefficients.push((layout.velocity(d, k), dt * j));
                        }
                    }
                    coefficients.push((s0, dt));
                    let (lower, upper) = match r.bounds {
                        RowBounds::Equality(e) => {
                            let e = e.clamp(-clamp, clamp);
                            (e, e)
                        }
                        RowBounds::Inequality(l, u) => (clamp_finite(l, clamp), clamp_finite(u, clamp)),
                        RowBounds::Velocity(..) => unreachable!(),
                    };
                    p.rows.push(Row {
                        label: format!("task[{t}]"),
                        coefficients,
                        lower,
                        upper,
                    });
                }
                RowBounds::Velocity(lo, hi) => {
                    for k in 0..nv {
                        let mut coefficients: Vec<(usize, f64)> = nz.iter().map(|&(d, j)| (layout.velocity(d, k), j)).collect();
                        coefficients.push((s0 + k, 1.0));
                        p.rows.push(Row {
                            label: format!("task[{t}].step[{k}]"),
                            coefficients,
                            lower: lo,
                            upper: hi,
                        });
                    }
                }
            }
        }
        p.hessian = Hessian::Diagonal(hess);
        Ok((p, layout))
    }

    pub fn settings(&self) -> QpSettings {
        QpSettings {
            max_iterations: self.config.max_iterations,
            ..QpSettings::default()
        }
    }

    pub fn solve(&self, p: &QpProblem, layout: &Layout) -> LmpcSolution {
        let s = qp::solve(p, &self.settings());
        self.unpack(&s, layout)
    }

    fn unpack(&self, s: &QpSolution, layout: &Layout) -> LmpcSolution {
        let nv = layout.velocity_steps();
        let n = layout.horizon;
        LmpcSolution {
            velocities: (0..layout.n_dofs)
                .map(|d| (0..nv).map(|k| s.x[layout.velocity(d, k)]).collect())
                .collect(),
            jerks: (0..layout.n_dofs)
                .map(|d| (0..n).map(|k| s.x[layout.jerk(d, k)]).collect())
                .collect(),
            slacks: layout.slacks.iter().map(|&(s0, c)| s.x[s0..s0 + c].to_vec()).collect(),
            objective: s.objective,
            status: s.status,
            iterations: s.iterations,
        }
    }

    /// Builds, solves and extracts the next command, falling back to looser bounds
    /// when a cycle is infeasible under the nominal ones.
    pub fn step(&mut self, world: &WorldModel, rows: &[TaskRow]) -> Result<StepResult, LmpcError> {
        let started = Instant::now();
        let velocities: Vec<f64> = (0..world.dofs().len()).map(|d| world.velocity(DofId(d))).collect();
        let accelerations: Vec<f64> = (0..world.dofs().len()).map(|d| world.acceleration(DofId(d))).collect();
        let mut last = None;
        for mode in [BoundMode::Nominal, BoundMode::RelaxedVelocity, BoundMode::RelaxedJerk] {
            let (p, layout) = self.build_qp_with(world, rows, mode)?;
            let sol = self.solve(&p, &layout);
            if sol.status == QpStatus::Optimal {
                if mode != BoundMode::Nominal {
                    log::warn!("QP infeasible under nominal bounds, solved with {mode:?}");
                }
                let command = extract_command(&sol, &velocities, &accelerations, self.config.dt);
                return Ok(StepResult {
                    solution: sol,
                    command,
                    mode,
                    solve_time: started.elapsed(),
                    failed_problem: None,
                });
            }
            log::debug!("{mode:?}: {:?} after {} iterations", sol.status, sol.iterations);
            last = Some((sol, p, mode));
        }
        let (sol, p, mode) = last.expect("at least one attempt");
        log::error!("QP not solved ({:?}); sending a zero command", sol.status);
        let command = extract_command(&sol, &velocities, &accelerations, self.config.dt);
        Ok(StepResult {
            solution: sol,
            command,
            mode,
            solve_time: started.elapsed(),
            failed_problem: Some(p),
        })
    }
}

fn clamp_finite(v: f64, c: f64) -> f64 {
    if v.is_finite() {
        v.clamp(-c, c)
    } else {
        v
    }
}

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v > 0.0 {
        json!("inf")
    } else if v < 0.0 {
        json!("-inf")
    } else {
        json!("nan")
    }
}

/// Debug dump of a QP: variable layout, objective, rows and bounds.
///
/// Objective is `1/2 x^T H x + c^T x`; infinite bounds are the strings `"inf"`/`"-inf"`.
pub fn qp_to_json(p: &QpProblem) -> Value {
    let hess_diag: Vec<f64> = match &p.hessian {
        Hessian::Diagonal(d) => d.clone(),
        Hessian::Dense(m) => (0..m.len()).map(|i| m[i][i]).collect(),
    };
    let variables: Vec<Value> = (0..p.n())
        .map(|i| {
            json!({
                "index": i,
                "label": p.labels[i],
                "lower": num(p.lower[i]),
                "upper": num(p.upper[i]),
                "hessian": hess_diag[i],
                "linear": p.linear[i],
            })
        })
        .collect();
    let rows: Vec<Value> = p
        .rows
        .iter()
        .map(|r| {
            json!({
                "label": r.label,
                "lower": num(r.lower),
                "upper": num(r.upper),
                "coefficients": r.coefficients.iter().map(|(i, a)| json!([i, a])).collect::<Vec<_>>(),
            })
        })
        .collect();
    let mut out = json!({ "variables": variables, "rows": rows });
    if let Hessian::Dense(m) = &p.hessian {
        out["hessian_dense"] = json!(m);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskfn::RowBounds;
    use crate::world::{DofLimits, JointSpec};
    use nalgebra::Matrix4;

    fn one_dof(limits: Option<(f64, f64)>) -> WorldModel {
        let mut w = WorldModel::new("map");
        let root = w.root();
        let l = w.add_link("l").unwrap();
        w.add_joint(
            "q",
            root,
            l,
            JointSpec::Prismatic {
                axis: [1.0, 0.0, 0.0],
                origin: Matrix4::identity(),
                limits: DofLimits::new(limits, 1.0),
            },
        )
        .unwrap();
        w
    }

    fn eq_row(e: f64) -> TaskRow {
        TaskRow {
            value: 0.0,
            jacobian: vec![1.0],
            bounds: RowBounds::Equality(e),
            max_velocity: 1.0,
            slack_weight: 1.0,
            satisfied: false,
        }
    }

    #[test]
    fn worked_jerk_limit() {
        let j = min_max_jerk(1.0, 0.05, 9).unwrap();
        assert!((j - 20.0).abs() < 1e-9, "{j}");
        assert_eq!(derive_jerk_limits(&[0.0], 0.02, 7).unwrap(), vec![JERK_LIMIT_FLOOR]);
        assert!(matches!(min_max_jerk(1.0, 0.02, 3), Err(LmpcError::HorizonTooShort(3))));
    }

    #[test]
    fn velocity_bounds_from_limits() {
        assert_eq!(position_to_velocity_bounds(0.0, Some((-1.0, 1.0)), 0.5, 0.02, 0), (-0.5, 0.5));
        for k in 0..5 {
            assert_eq!(position_to_velocity_bounds(1.0, Some((-1.0, 1.0)), 0.5, 0.02, k).1, 0.0);
        }
        let (_, ub) = position_to_velocity_bounds(1.0 - 0.5 * 0.02 / 2.0, Some((-1.0, 1.0)), 0.5, 0.02, 0);
        assert!((ub - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rest_without_tasks_is_zero_plan() {
        let w = one_dof(None);
        let mut c = Lmpc::new(LmpcConfig::default()).unwrap();
        let (p, layout) = c.build_qp(&w, &[]).unwrap();
        assert_eq!(p.rows.len(), 7);
        let s = c.solve(&p, &layout);
        assert_eq!(s.status, QpStatus::Optimal);
        assert!(s.objective.abs() < 1e-18);
        assert!(s.velocities[0].iter().chain(&s.jerks[0]).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_task_row_is_satisfied() {
        let w = one_dof(None);
        let mut c = Lmpc::new(LmpcConfig::default()).unwrap();
        let rows = [eq_row(0.01)];
        let (p, layout) = c.build_qp(&w, &rows).unwrap();
        let s = c.solve(&p, &layout);
        assert_eq!(s.status, QpStatus::Optimal);
        let dt = c.config.dt;
        let lhs: f64 = s.velocities[0].iter().map(|v| v * dt).sum::<f64>() + s.slacks[0][0] * dt;
        assert!((lhs - 0.01).abs() < 1e-8);
        let j = c.jerk_limit(1.0).unwrap();
        assert!(s.jerks[0].iter().all(|x| x.abs() <= j + 1e-6));
    }

    #[test]
    fn command_arithmetic() {
        let sol = LmpcSolution {
            velocities: vec![vec![0.0; 5]],
            jerks: vec![vec![10.0; 7]],
            slacks: vec![],
            objective: 0.0,
            status: QpStatus::Optimal,
            iterations: 0,
        };
        let c = extract_command(&sol, &[0.0], &[0.0], 0.02);
        assert!((c.velocity[0] - 0.004).abs() < 1e-15);
        let stopped = extract_command(
            &LmpcSolution {
                status: QpStatus::Infeasible,
                ..sol
            },
            &[0.3],
            &[0.0],
            0.02,
        );
        assert!(stopped.stopped && stopped.velocity == vec![0.0]);
    }

    #[test]
    fn dump_has_stable_fields() {
        let w = one_dof(Some((-1.0, 1.0)));
        let mut c = Lmpc::new(LmpcConfig::default()).unwrap();
        let (p, _) = c.build_qp(&w, &[eq_row(0.1)]).unwrap();
        let v = qp_to_json(&p);
        assert_eq!(v["variables"].as_array().unwrap().len(), p.n());
        assert_eq!(v["variables"][0]["label"], "q.velocity[0]");
        assert_eq!(v["rows"].as_array().unwrap().len(), 8);
    }
}
