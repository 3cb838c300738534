//! Task spaces and task functions over the world model.
//!
//! A task space is a scalar function of the world state with at least one
//! structurally nonzero partial derivative with respect to a DOF. A task
//! function constrains it with an equality (error `bE`) or an inequality
//! (bounds `lb`, `ub` on the admissible displacement).
//!
//! Cartesian orientation rows are the exception: their value is the rotation
//! vector of the relative rotation, evaluated numerically, and the Jacobian
//! row is the corresponding component of the angular-velocity Jacobian.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

use crate::expr::{compile, CompiledFn, Expr, ExprError, ExprMatrix, Symbol};
use crate::world::{rotation_vector, DofId, LinkId, WorldError, WorldModel};

pub const DEFAULT_LINEAR_VELOCITY: f64 = 0.2;
pub const DEFAULT_ANGULAR_VELOCITY: f64 = 0.5;
pub const DEFAULT_GENERIC_VELOCITY: f64 = 1.0;
/// |bE| at or below this counts as satisfied; inequalities get the same margin.
pub const SATISFACTION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("task space `{0}` has no nonzero partial derivative with respect to any DOF")]
    NotControllable(String),
    #[error("task `{0}`: max velocity must be > 0")]
    InvalidVelocity(String),
    #[error("band task `{name}`: lower bound {lo} exceeds upper bound {hi}")]
    InvalidBand { name: String, lo: f64, hi: f64 },
    #[error("task `{name}`: lower bound {lb} exceeds upper bound {ub} at the current state")]
    CrossedBounds { name: String, lb: f64, ub: f64 },
    #[error("task `{0}`: non-finite value or Jacobian")]
    NotFinite(String),
    #[error("task `{0}`: zero-length vector")]
    DegenerateVector(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Clone, Debug)]
pub enum SpaceValue {
    Scalar(Expr),
    /// Component `axis` of the rotation vector of `goal * R^T`, with `R` the 9 row-major entries.
    Rotation {
        rotation: Vec<Expr>,
        goal: Matrix3<f64>,
        axis: usize,
    },
}

#[derive(Clone, Debug)]
pub struct TaskSpace {
    pub name: String,
    pub value: SpaceValue,
    pub max_velocity: f64,
}

impl TaskSpace {
    /// Builds a scalar task space, rejecting expressions no DOF can influence.
    pub fn new(name: &str, expr: Expr, max_velocity: f64, world: &WorldModel) -> Result<Self, TaskError> {
        if !(max_velocity > 0.0) {
            return Err(TaskError::InvalidVelocity(name.to_string()));
        }
        let controllable = world
            .dofs()
            .iter()
            .any(|d| expr.depends_on(&d.symbols.position) && expr.diff(&d.symbols.position).as_constant() != Some(0.0));
        if !controllable {
            return Err(TaskError::NotControllable(name.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            value: SpaceValue::Scalar(expr),
            max_velocity,
        })
    }

    pub fn expr(&self) -> Option<&Expr> {
        match &self.value {
            SpaceValue::Scalar(e) => Some(e),
            SpaceValue::Rotation { .. } => None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum TaskKind {
    /// `error` is the target displacement `bE`.
    Equality { error: Expr },
    Inequality { lower: Expr, upper: Expr },
    /// Equality whose error is the rotation vector component.
    RotationEquality,
    /// Per-step velocity constraint `lower <= J v_k <= upper`, applied to every horizon step.
    Velocity { lower: f64, upper: f64 },
}

#[derive(Clone, Debug)]
pub struct TaskFunction {
    pub name: String,
    pub space: TaskSpace,
    pub kind: TaskKind,
    /// Multiplier on the normalized slack weight.
    pub slack_weight: f64,
}

impl TaskFunction {
    pub fn equality(space: TaskSpace, error: Expr) -> Self {
        Self {
            name: space.name.clone(),
            space,
            kind: TaskKind::Equality { error },
            slack_weight: 1.0,
        }
    }

    pub fn inequality(space: TaskSpace, lower: Expr, upper: Expr) -> Self {
        Self {
            name: space.name.clone(),
            space,
            kind: TaskKind::Inequality { lower, upper },
            slack_weight: 1.0,
        }
    }

    pub fn velocity(space: TaskSpace, lower: f64, upper: f64) -> Self {
        Self {
            name: space.name.clone(),
            space,
            kind: TaskKind::Velocity { lower, upper },
            slack_weight: 1.0,
        }
    }

    pub fn with_slack_weight(mut self, w: f64) -> Self {
        self.slack_weight = w;
        self
    }

    pub fn is_velocity_task(&self) -> bool {
        matches!(self.kind, TaskKind::Velocity { .. })
    }
}

// --- geometric primitives -------------------------------------------------------------

/// A point with coordinates given in `frame`.
#[derive(Clone, Debug)]
pub struct Point {
    pub frame: LinkId,
    pub position: ExprMatrix,
}

#[derive(Clone, Debug)]
pub struct Line {
    pub frame: LinkId,
    pub point: ExprMatrix,
    pub direction: ExprMatrix,
}

#[derive(Clone, Debug)]
pub struct Plane {
    pub frame: LinkId,
    pub point: ExprMatrix,
    pub normal: ExprMatrix,
}

/// A free vector with components given in `frame`.
#[derive(Clone, Debug)]
pub struct Vector {
    pub frame: LinkId,
    pub components: ExprMatrix,
}

fn vec3(v: [f64; 3]) -> ExprMatrix {
    ExprMatrix::from_constants(3, 1, &v)
}

fn unit3(v: [f64; 3]) -> ExprMatrix {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    vec3([v[0] / n, v[1] / n, v[2] / n])
}

impl Point {
    pub fn new(frame: LinkId, p: [f64; 3]) -> Self {
        Self {
            frame,
            position: vec3(p),
        }
    }

    pub fn expressed_in(&self, world: &WorldModel, frame: LinkId) -> ExprMatrix {
        world.fk_expr(frame, self.frame).transform_point(&self.position)
    }
}

impl Line {
    /// Constant line; the direction is normalized.
    pub fn new(frame: LinkId, point: [f64; 3], direction: [f64; 3]) -> Self {
        Self {
            frame,
            point: vec3(point),
            direction: unit3(direction),
        }
    }
}

impl Plane {
    pub fn new(frame: LinkId, point: [f64; 3], normal: [f64; 3]) -> Self {
        Self {
            frame,
            point: vec3(point),
            normal: unit3(normal),
        }
    }
}

impl Vector {
    pub fn new(frame: LinkId, v: [f64; 3]) -> Self {
        Self {
            frame,
            components: vec3(v),
        }
    }

    pub fn expressed_in(&self, world: &WorldModel, frame: LinkId) -> ExprMatrix {
        world.fk_expr(frame, self.frame).transform_vector(&self.components)
    }
}

// --- task-space constructors ----------------------------------------------------------

/// `|(p - a) - ((p - a) . d) d|` with everything expressed in `frame`.
pub fn point_line_distance(
    name: &str,
    world: &WorldModel,
    p: &Point,
    l: &Line,
    frame: LinkId,
    max_velocity: f64,
) -> Result<TaskSpace, TaskError> {
    let fp = p.expressed_in(world, frame);
    let t = world.fk_expr(frame, l.frame);
    let a = t.transform_point(&l.point);
    let d = t.transform_vector(&l.direction);
    let diff = fp.sub(&a);
    let along = diff.dot(&d);
    let perp = diff.sub(&d.scale(&along));
    TaskSpace::new(name, perp.norm(), max_velocity, world)
}

/// Signed distance `(p - a) . n`.
pub fn point_plane_distance(
    name: &str,
    world: &WorldModel,
    p: &Point,
    pl: &Plane,
    frame: LinkId,
    max_velocity: f64,
) -> Result<TaskSpace, TaskError> {
    let fp = p.expressed_in(world, frame);
    let t = world.fk_expr(frame, pl.frame);
    let a = t.transform_point(&pl.point);
    let n = t.transform_vector(&pl.normal);
    TaskSpace::new(name, fp.sub(&a).dot(&n), max_velocity, world)
}

/// Angle in `[0, pi]` between two vectors expressed in a common frame.
pub fn angle_between(
    name: &str,
    world: &WorldModel,
    u: &Vector,
    v: &Vector,
    frame: LinkId,
    max_velocity: f64,
) -> Result<TaskSpace, TaskError> {
    let fu = u.expressed_in(world, frame);
    let fv = v.expressed_in(world, frame);
    let cos = fu.dot(&fv) / (fu.norm() * fv.norm());
    TaskSpace::new(name, cos.acos(), max_velocity, world)
}

/// Coordinate `axis` (0..3) of `tip`'s origin in `root`.
pub fn position_coordinate(world: &WorldModel, root: LinkId, tip: LinkId, axis: usize) -> Expr {
    world.fk_expr(root, tip).get(axis, 3).clone()
}

// --- task-function constructors -------------------------------------------------------

fn inf() -> Expr {
    Expr::constant(f64::INFINITY)
}

/// Keeps `f >= threshold`: `lb = threshold - f`, `ub = +inf`.
pub fn above_inequality(space: TaskSpace, threshold: f64) -> TaskFunction {
    let f = space.expr().expect("scalar task space").clone();
    TaskFunction::inequality(space, threshold - f, inf())
}

/// Keeps `f <= threshold`: `lb = -inf`, `ub = threshold - f`.
pub fn below_inequality(space: TaskSpace, threshold: f64) -> TaskFunction {
    let f = space.expr().expect("scalar task space").clone();
    TaskFunction::inequality(space, -inf(), threshold - f)
}

/// Keeps `lo <= f <= hi`.
pub fn band_inequality(space: TaskSpace, lo: f64, hi: f64) -> Result<TaskFunction, TaskError> {
    if lo > hi {
        return Err(TaskError::InvalidBand {
            name: space.name.clone(),
            lo,
            hi,
        });
    }
    let f = space.expr().expect("scalar task space").clone();
    Ok(TaskFunction::inequality(space, lo - &f, hi - f))
}

/// Drives `f` to `target`.
pub fn goal_equality(space: TaskSpace, target: f64) -> TaskFunction {
    let f = space.expr().expect("scalar task space").clone();
    TaskFunction::equality(space, target - f)
}

/// Joint-space goal. Continuous revolute DOFs take the shortest way around.
pub fn joint_goal_task(world: &WorldModel, dof: DofId, target: f64, max_velocity: f64) -> Result<TaskFunction, TaskError> {
    let d = world.dof(dof);
    let q = Expr::symbol(&d.symbols.position);
    let mut target = target;
    if let Some((lb, ub)) = d.position_limits {
        if target < lb || target > ub {
            log::warn!("joint goal {target} for `{}` outside [{lb}, {ub}], clamped", d.name);
            target = target.clamp(lb, ub);
        }
    }
    let space = TaskSpace::new(&d.name, q.clone(), max_velocity, world)?;
    let error = if d.continuous {
        let delta = target - &q;
        delta.sin().atan2(&delta.cos())
    } else {
        target - q
    };
    Ok(TaskFunction {
        name: format!("{} goal", d.name),
        space,
        kind: TaskKind::Equality { error },
        slack_weight: 1.0,
    })
}

/// Three position equalities driving `tip`'s origin to `goal` (in `root`).
pub fn point_goal_task(
    world: &WorldModel,
    name: &str,
    root: LinkId,
    tip: LinkId,
    goal: [f64; 3],
    max_linear_velocity: f64,
) -> Result<Vec<TaskFunction>, TaskError> {
    let fk = world.fk_expr(root, tip);
    let mut out = Vec::with_capacity(3);
    for (i, axis) in ["x", "y", "z"].iter().enumerate() {
        let f = fk.get(i, 3).clone();
        // An axis the chain cannot move (e.g. height of a planar arm) is skipped.
        let space = match TaskSpace::new(&format!("{name}/{axis}"), f.clone(), max_linear_velocity, world) {
            Ok(s) => s,
            Err(TaskError::NotControllable(_)) => continue,
            Err(e) => return Err(e),
        };
        out.push(TaskFunction::equality(space, goal[i] - f));
    }
    if out.is_empty() {
        return Err(TaskError::NotControllable(name.to_string()));
    }
    Ok(out)
}

/// Up to six equalities driving `tip` to `goal` (pose in `root`): position axes the chain
/// can move, then three rotation rows.
pub fn cartesian_pose_task(
    world: &WorldModel,
    name: &str,
    root: LinkId,
    tip: LinkId,
    goal: &Matrix4<f64>,
    max_linear_velocity: f64,
    max_angular_velocity: f64,
) -> Result<Vec<TaskFunction>, TaskError> {
    if !(max_angular_velocity > 0.0) {
        return Err(TaskError::InvalidVelocity(name.to_string()));
    }
    let fk = world.fk_expr(root, tip);
    let mut out = Vec::with_capacity(6);
    for (i, axis) in ["x", "y", "z"].iter().enumerate() {
        let f = fk.get(i, 3).clone();
        let space = match TaskSpace::new(&format!("{name}/{axis}"), f.clone(), max_linear_velocity, world) {
            Ok(s) => s,
            Err(TaskError::NotControllable(_)) => continue,
            Err(e) => return Err(e),
        };
        out.push(TaskFunction::equality(space, goal[(i, 3)] - f));
    }
    let rotation: Vec<Expr> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| fk.get(r, c).clone()).collect();
    let any_dof = world
        .dofs()
        .iter()
        .any(|d| rotation.iter().any(|e| e.diff(&d.symbols.position).as_constant() != Some(0.0)));
    if !any_dof {
        return Err(TaskError::NotControllable(format!("{name}/rotation")));
    }
    let goal_rot = goal.fixed_view::<3, 3>(0, 0).into_owned();
    for (i, axis) in ["rx", "ry", "rz"].iter().enumerate() {
        let space = TaskSpace {
            name: format!("{name}/{axis}"),
            value: SpaceValue::Rotation {
                rotation: rotation.clone(),
                goal: goal_rot,
                axis: i,
            },
            max_velocity: max_angular_velocity,
        };
        out.push(TaskFunction {
            name: space.name.clone(),
            space,
            kind: TaskKind::RotationEquality,
            slack_weight: 1.0,
        });
    }
    Ok(out)
}

/// Shortest signed angle from `from` to `to`.
pub fn wrap_angle(delta: f64) -> f64 {
    let mut d = (delta + PI).rem_euclid(2.0 * PI) - PI;
    if d <= -PI {
        d += 2.0 * PI;
    }
    d
}

// --- compiled evaluation --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RowBounds {
    Equality(f64),
    Inequality(f64, f64),
    Velocity(f64, f64),
}

/// One evaluated task row at the current state.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRow {
    pub value: f64,
    /// Partial derivatives per DOF index, dense over the world's DOFs.
    pub jacobian: Vec<f64>,
    pub bounds: RowBounds,
    pub max_velocity: f64,
    pub slack_weight: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug)]
enum RowLayout {
    Scalar {
        value: usize,
        bound_a: Option<usize>,
        bound_b: Option<usize>,
        jac: Vec<(usize, usize)>,
    },
    Rotation {
        r: usize,
        dr: Vec<(usize, usize)>,
        goal: Matrix3<f64>,
        axis: usize,
    },
}

/// A set of task functions compiled into a single tape over the world's inputs.
#[derive(Clone, Debug)]
pub struct CompiledTasks {
    tasks: Vec<TaskFunction>,
    layout: Vec<RowLayout>,
    program: CompiledFn,
    input_ids: Vec<usize>,
    n_dofs: usize,
    revision: u64,
}

impl CompiledTasks {
    pub fn new(world: &WorldModel, tasks: Vec<TaskFunction>) -> Result<Self, TaskError> {
        let inputs: Vec<Symbol> = world.input_symbols();
        let dof_syms: Vec<(usize, Symbol)> = world
            .dofs()
            .iter()
            .enumerate()
            .map(|(i, d)| (i, d.symbols.position.clone()))
            .collect();
        let mut exprs: Vec<Expr> = Vec::new();
        let push = |e: Expr, exprs: &mut Vec<Expr>| {
            exprs.push(e);
            exprs.len() - 1
        };
        let derivs = |e: &Expr, exprs: &mut Vec<Expr>| -> Vec<(usize, usize)> {
            let mut out = Vec::new();
            for (i, s) in &dof_syms {
                if !e.depends_on(s) {
                    continue;
                }
                let d = e.diff(s);
                if d.as_constant() == Some(0.0) {
                    continue;
                }
                exprs.push(d);
                out.push((*i, exprs.len() - 1));
            }
            out
        };
        let mut layout = Vec::with_capacity(tasks.len());
        for t in &tasks {
            match (&t.space.value, &t.kind) {
                (SpaceValue::Scalar(f), kind) => {
                    let value = push(f.clone(), &mut exprs);
                    let jac = derivs(f, &mut exprs);
                    let (bound_a, bound_b) = match kind {
                        TaskKind::Equality { error } => (Some(push(error.clone(), &mut exprs)), None),
                        TaskKind::Inequality { lower, upper } => (
                            Some(push(lower.clone(), &mut exprs)),
                            Some(push(upper.clone(), &mut exprs)),
                        ),
                        TaskKind::Velocity { .. } => (None, None),
                        TaskKind::RotationEquality => unreachable!("rotation rows use a rotation space"),
                    };
                    layout.push(RowLayout::Scalar {
                        value,
                        bound_a,
                        bound_b,
                        jac,
                    });
                }
                (SpaceValue::Rotation { rotation, goal, axis }, _) => {
                    let r = exprs.len();
                    exprs.extend(rotation.iter().cloned());
                    let mut dr = Vec::new();
                    for (i, s) in &dof_syms {
                        if !rotation.iter().any(|e| e.depends_on(s)) {
                            continue;
                        }
                        let start = exprs.len();
                        exprs.extend(rotation.iter().map(|e| e.diff(s)));
                        dr.push((*i, start));
                    }
                    layout.push(RowLayout::Rotation {
                        r,
                        dr,
                        goal: *goal,
                        axis: *axis,
                    });
                }
            }
        }
        let program = compile(&exprs, &inputs)?;
        Ok(Self {
            tasks,
            layout,
            program,
            input_ids: inputs.iter().map(|s| s.id() as usize).collect(),
            n_dofs: world.dofs().len(),
            revision: world.revision(),
        })
    }

    pub fn tasks(&self) -> &[TaskFunction] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// World revision the tasks were compiled against.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Raw outputs of the compiled tape for a full symbol value table.
    pub fn raw_outputs(&self, values: &[f64]) -> Vec<f64> {
        let inputs: Vec<f64> = self.input_ids.iter().map(|&i| values[i]).collect();
        self.program.eval_slice(&inputs)
    }

    /// Rotation matrix of a rotation row, if the row is one.
    pub fn rotation_of(&self, row: usize, values: &[f64]) -> Option<Matrix3<f64>> {
        match &self.layout[row] {
            RowLayout::Rotation { r, .. } => {
                let out = self.raw_outputs(values);
                Some(Matrix3::from_row_slice(&out[*r..*r + 9]))
            }
            RowLayout::Scalar { .. } => None,
        }
    }

    pub fn evaluate(&self, world: &WorldModel) -> Result<Vec<TaskRow>, TaskError> {
        let values = world.values();
        let out = self.raw_outputs(values);
        let velocities: Vec<f64> = (0..self.n_dofs).map(|i| world.velocity(DofId(i))).collect();
        let mut rows = Vec::with_capacity(self.tasks.len());
        for (task, layout) in self.tasks.iter().zip(&self.layout) {
            let mut jacobian = vec![0.0; self.n_dofs];
            let (value, bounds) = match layout {
                RowLayout::Scalar {
                    value,
                    bound_a,
                    bound_b,
                    jac,
                } => {
                    for &(dof, slot) in jac {
                        jacobian[dof] = out[slot];
                    }
                    let bounds = match task.kind {
                        TaskKind::Equality { .. } => RowBounds::Equality(out[bound_a.unwrap()]),
                        TaskKind::Inequality { .. } => {
                            let (lb, ub) = (out[bound_a.unwrap()], out[bound_b.unwrap()]);
                            if lb > ub {
                                return Err(TaskError::CrossedBounds {
                                    name: task.name.clone(),
                                    lb,
                                    ub,
                                });
                            }
                            RowBounds::Inequality(lb, ub)
                        }
                        TaskKind::Velocity { lower, upper } => RowBounds::Velocity(lower, upper),
                        TaskKind::RotationEquality => unreachable!(),
                    };
                    (out[*value], bounds)
                }
                RowLayout::Rotation { r, dr, goal, axis } => {
                    let rot = Matrix3::from_row_slice(&out[*r..*r + 9]);
                    for &(dof, start) in dr {
                        let d = Matrix3::from_row_slice(&out[start..start + 9]);
                        let w = d * rot.transpose();
                        let omega = Vector3::new(w[(2, 1)] - w[(1, 2)], w[(0, 2)] - w[(2, 0)], w[(1, 0)] - w[(0, 1)]) * 0.5;
                        jacobian[dof] = omega[*axis];
                    }
                    let err = rotation_vector(&(goal * rot.transpose()));
                    let own = rotation_vector(&rot);
                    (own[*axis], RowBounds::Equality(err[*axis]))
                }
            };
            if !value.is_finite() || jacobian.iter().any(|j| !j.is_finite()) {
                // Infinite bounds are fine, non-finite values and derivatives are not.
                return Err(TaskError::NotFinite(task.name.clone()));
            }
            let satisfied = match bounds {
                RowBounds::Equality(e) => e.abs() <= SATISFACTION_TOLERANCE,
                RowBounds::Inequality(lb, ub) => lb <= SATISFACTION_TOLERANCE && ub >= -SATISFACTION_TOLERANCE,
                RowBounds::Velocity(lo, hi) => {
                    let jv: f64 = jacobian.iter().zip(&velocities).map(|(j, v)| j * v).sum();
                    jv >= lo - SATISFACTION_TOLERANCE && jv <= hi + SATISFACTION_TOLERANCE
                }
            };
            rows.push(TaskRow {
                value,
                jacobian,
                bounds,
                max_velocity: task.space.max_velocity,
                slack_weight: task.slack_weight,
                satisfied,
            });
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{pose, DofLimits, JointSpec};
    use crate::SymbolKind;

    fn arm() -> WorldModel {
        let mut w = WorldModel::new("map");
        let root = w.root();
        let mut prev = root;
        for (i, axis) in [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]].iter().enumerate() {
            let link = w.add_link(&format!("l{i}")).unwrap();
            w.add_joint(
                &format!("j{i}"),
                prev,
                link,
                JointSpec::Revolute {
                    axis: *axis,
                    origin: pose([0.0, 0.0, 0.3], [0.0, 0.0, 0.0]),
                    limits: DofLimits::new(Some((-2.0, 2.0)), 1.0),
                },
            )
            .unwrap();
            prev = link;
        }
        let tool = w.add_link("tool").unwrap();
        w.add_joint("tool_fixed", prev, tool, JointSpec::Fixed { origin: pose([0.2, 0.0, 0.0], [0.0, 0.0, 0.0]) })
            .unwrap();
        w
    }

    #[test]
    fn cartesian_goal_at_current_pose_has_zero_error() {
        let mut w = arm();
        w.set_named("j1", SymbolKind::DofPosition, 0.4).unwrap();
        let (root, tool) = (w.root(), w.link("tool").unwrap());
        let goal = w.fk(root, tool);
        let tasks = cartesian_pose_task(&w, "pose", root, tool, &goal, 0.2, 0.5).unwrap();
        let rows = CompiledTasks::new(&w, tasks).unwrap().evaluate(&w).unwrap();
        assert_eq!(rows.len(), 6);
        for r in rows {
            match r.bounds {
                RowBounds::Equality(e) => assert!(e.abs() < 1e-12),
                _ => panic!(),
            }
        }
    }

    #[test]
    fn cartesian_goal_offsets() {
        let w = arm();
        let (root, tool) = (w.root(), w.link("tool").unwrap());
        let current = w.fk(root, tool);
        let mut shifted = current;
        shifted[(0, 3)] += 0.1;
        let rows = CompiledTasks::new(&w, cartesian_pose_task(&w, "p", root, tool, &shifted, 0.2, 0.5).unwrap())
            .unwrap()
            .evaluate(&w)
            .unwrap();
        let errors: Vec<f64> = rows
            .iter()
            .map(|r| match r.bounds {
                RowBounds::Equality(e) => e,
                _ => f64::NAN,
            })
            .collect();
        assert!((errors[0] - 0.1).abs() < 1e-12);
        for e in &errors[1..] {
            assert!(e.abs() < 1e-12);
        }
        let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), PI / 2.0).to_homogeneous();
        let mut rotated = rz * current;
        rotated[(0, 3)] = current[(0, 3)];
        rotated[(1, 3)] = current[(1, 3)];
        rotated[(2, 3)] = current[(2, 3)];
        let rows = CompiledTasks::new(&w, cartesian_pose_task(&w, "p", root, tool, &rotated, 0.2, 0.5).unwrap())
            .unwrap()
            .evaluate(&w)
            .unwrap();
        let rot: Vec<f64> = rows[3..]
            .iter()
            .map(|r| match r.bounds {
                RowBounds::Equality(e) => e,
                _ => f64::NAN,
            })
            .collect();
        assert!(rot[0].abs() < 1e-9 && rot[1].abs() < 1e-9);
        assert!((rot[2] - PI / 2.0).abs() < 1e-9);
    }

    #[test]
    fn joint_goal_wrapping_and_clamping() {
        let mut w = WorldModel::new("map");
        let root = w.root();
        let a = w.add_link("a").unwrap();
        let b = w.add_link("b").unwrap();
        w.add_joint(
            "wheel",
            root,
            a,
            JointSpec::Revolute {
                axis: [0.0, 0.0, 1.0],
                origin: Matrix4::identity(),
                limits: DofLimits::new(None, 1.0),
            },
        )
        .unwrap();
        w.add_joint(
            "elbow",
            a,
            b,
            JointSpec::Revolute {
                axis: [0.0, 0.0, 1.0],
                origin: Matrix4::identity(),
                limits: DofLimits::new(Some((-0.8, 0.8)), 1.0),
            },
        )
        .unwrap();
        w.set_named("wheel", SymbolKind::DofPosition, 3.1).unwrap();
        w.set_named("elbow", SymbolKind::DofPosition, 0.2).unwrap();
        let wheel = w.dof_id("wheel").unwrap();
        let elbow = w.dof_id("elbow").unwrap();
        let tasks = vec![
            joint_goal_task(&w, wheel, -3.1, 1.0).unwrap(),
            joint_goal_task(&w, elbow, 0.2, 1.0).unwrap(),
            joint_goal_task(&w, elbow, 1.0, 1.0).unwrap(),
        ];
        let rows = CompiledTasks::new(&w, tasks).unwrap().evaluate(&w).unwrap();
        let e: Vec<f64> = rows
            .iter()
            .map(|r| match r.bounds {
                RowBounds::Equality(e) => e,
                _ => f64::NAN,
            })
            .collect();
        let oracle = 2.0 * PI - 6.2;
        assert!((e[0] - oracle).abs() < 1e-12);
        assert_eq!(e[1], 0.0);
        assert!((e[2] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn feature_functions() {
        let mut w = WorldModel::new("map");
        let root = w.root();
        let l = w.add_link("slider").unwrap();
        w.add_joint(
            "s",
            root,
            l,
            JointSpec::Prismatic {
                axis: [1.0, 0.0, 0.0],
                origin: Matrix4::identity(),
                limits: DofLimits::new(None, 1.0),
            },
        )
        .unwrap();
        w.set_named("s", SymbolKind::DofPosition, 3.0).unwrap();
        let p = Point::new(l, [0.0, 4.0, 7.0]);
        let line = Line::new(root, [0.0, 0.0, 0.0], [0.0, 0.0, 2.0]);
        let s = point_line_distance("d", &w, &p, &line, root, 0.1).unwrap();
        assert!((w.eval(s.expr().unwrap()) - 5.0).abs() < 1e-12);
        let plane = Plane::new(root, [0.0, 0.0, 9.0], [0.0, 0.0, 1.0]);
        let s = point_plane_distance("h", &w, &p, &plane, root, 0.1);
        // The slider cannot change the height above this plane.
        assert!(matches!(s, Err(TaskError::NotControllable(_))));
        let plane = Plane::new(root, [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]);
        let s = point_plane_distance("h", &w, &p, &plane, root, 0.1).unwrap();
        assert!((w.eval(s.expr().unwrap()) + 2.0).abs() < 1e-12);
        let u = Vector::new(l, [1.0, 1.0, 0.0]);
        let v = Vector::new(root, [1.0, 0.0, 0.0]);
        let err = angle_between("a", &w, &u, &v, root, 0.1);
        // Pure translation never changes an angle.
        assert!(matches!(err, Err(TaskError::NotControllable(_))));
    }

    #[test]
    fn inequality_bounds() {
        let mut w = WorldModel::new("map");
        let root = w.root();
        let l = w.add_link("slider").unwrap();
        w.add_joint(
            "s",
            root,
            l,
            JointSpec::Prismatic {
                axis: [1.0, 0.0, 0.0],
                origin: Matrix4::identity(),
                limits: DofLimits::new(None, 1.0),
            },
        )
        .unwrap();
        let q = Expr::symbol(&w.dof_by_name("s").unwrap().symbols.position);
        let space = TaskSpace::new("f", q, 1.0, &w).unwrap();
        let tasks = vec![
            above_inequality(space.clone(), 0.2),
            below_inequality(space.clone(), 0.2),
            band_inequality(space.clone(), 0.0, 0.0).unwrap(),
        ];
        assert!(band_inequality(space, 1.0, 0.0).is_err());
        let compiled = CompiledTasks::new(&w, tasks).unwrap();
        w.set_named("s", SymbolKind::DofPosition, 0.5).unwrap();
        let rows = compiled.evaluate(&w).unwrap();
        match rows[0].bounds {
            RowBounds::Inequality(lb, ub) => assert!((lb + 0.3).abs() < 1e-12 && ub == f64::INFINITY),
            _ => panic!(),
        }
        assert!(rows[0].satisfied && !rows[1].satisfied);
        w.set_named("s", SymbolKind::DofPosition, 0.1).unwrap();
        let rows = compiled.evaluate(&w).unwrap();
        match rows[0].bounds {
            RowBounds::Inequality(lb, ub) => {
                assert!((lb - 0.1).abs() < 1e-12);
                assert_eq!(ub, f64::INFINITY);
            }
            _ => panic!(),
        }
        assert_eq!(rows[2].bounds, RowBounds::Inequality(-0.1, -0.1));
    }

    #[test]
    fn wrap_is_shortest() {
        assert!((wrap_angle(-6.2) - (2.0 * PI - 6.2)).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
        assert!((wrap_angle(PI) - PI).abs() < 1e-12);
    }
}
