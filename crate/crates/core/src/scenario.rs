//! Declarative scenario files: world, chart, configuration and scripted events
//! in one JSON document, plus the bundled scenarios and output serialisation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix4, Rotation3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executive::{
    builtin_robot, Effect, MonitorSpec, MotionSpec, Predicate, Program, RunConfig, RunReport, ScenarioEvent, SensorValue, Sensors,
    Trajectory, Trigger, WorldAction,
};
use crate::expr::{Expr, SymbolKind};
use crate::lmpc::LmpcConfig;
use crate::statechart::{parse_condition, Condition, GanttRecord, LifeCycle, NodeSpec, Statechart};
use crate::taskfn::{
    above_inequality, angle_between, band_inequality, below_inequality, cartesian_pose_task, goal_equality, joint_goal_task,
    point_goal_task, point_line_distance, point_plane_distance, position_coordinate, Line, Plane, Point, TaskError, TaskFunction,
    TaskSpace, Vector, DEFAULT_ANGULAR_VELOCITY, DEFAULT_GENERIC_VELOCITY, DEFAULT_LINEAR_VELOCITY,
};
use crate::world::{pose, DofLimits, JointSpec, WorldError, WorldModel};

pub const BUNDLED: [(&str, &str); 5] = [
    ("cutting", include_str!("../scenarios/cutting.json")),
    ("peg_in_hole", include_str!("../scenarios/peg_in_hole.json")),
    ("fridge_door", include_str!("../scenarios/fridge_door.json")),
    ("diff_drive_nav", include_str!("../scenarios/diff_drive_nav.json")),
    ("conflicting_tasks", include_str!("../scenarios/conflicting_tasks.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("schema error at line {line}, column {column}: {message}")]
    Schema { line: usize, column: usize, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl ToString) -> ScenarioError {
    ScenarioError::Invalid {
        path: path.into(),
        message: message.to_string(),
    }
}

// --- file schema ----------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub world: WorldFile,
    pub chart: Vec<NodeFile>,
    #[serde(default)]
    pub config: ConfigFile,
    #[serde(default)]
    pub sensors: BTreeMap<String, SensorValue>,
    #[serde(default)]
    pub events: Vec<EventFile>,
    /// Free-form provenance of tuned constants.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    /// Built-in robot to start from.
    pub robot: Option<String>,
    /// Root link name when no robot is given.
    pub root: Option<String>,
    #[serde(default)]
    pub links: Vec<LinkFile>,
    #[serde(default)]
    pub initial_state: BTreeMap<String, f64>,
    /// Measured map pose `[x, y, yaw]` per planar-base joint.
    #[serde(default)]
    pub base_pose: BTreeMap<String, [f64; 3]>,
    /// DOFs held at zero velocity.
    #[serde(default)]
    pub zero_velocity: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkFile {
    pub name: String,
    pub parent: String,
    pub joint: JointFile,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OriginFile {
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl OriginFile {
    fn matrix(&self) -> Matrix4<f64> {
        pose(self.xyz, self.rpy)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum JointFile {
    Fixed {
        #[serde(default)]
        origin: OriginFile,
    },
    Revolute {
        /// Joint and DOF name; defaults to the link name.
        name: Option<String>,
        axis: [f64; 3],
        #[serde(default)]
        origin: OriginFile,
        position_limits: Option<[f64; 2]>,
        velocity_limit: f64,
    },
    Prismatic {
        name: Option<String>,
        axis: [f64; 3],
        #[serde(default)]
        origin: OriginFile,
        position_limits: Option<[f64; 2]>,
        velocity_limit: f64,
    },
    OmniBase {
        name: Option<String>,
        max_linear_velocity: f64,
        max_angular_velocity: f64,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dt: Option<f64>,
    pub horizon: Option<usize>,
    pub timeout: Option<f64>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
    pub velocity_weight_start: Option<f64>,
    pub velocity_weight_end: Option<f64>,
    pub slack_weight_base: Option<f64>,
    pub max_iterations: Option<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NodeKindFile {
    Motion,
    Monitor,
    Sequential,
    Parallel,
    End,
    Cancel,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeFile {
    pub name: String,
    pub kind: NodeKindFile,
    pub start: Option<String>,
    pub pause: Option<String>,
    pub end: Option<String>,
    pub reset: Option<String>,
    #[serde(default)]
    pub tasks: Vec<TaskFile>,
    pub monitor: Option<MonitorFile>,
    #[serde(default)]
    pub children: Vec<NodeFile>,
    /// Success count of a parallel template; defaults to all children.
    pub success: Option<usize>,
    #[serde(default)]
    pub on_start: Vec<ActionFile>,
    #[serde(default)]
    pub on_end: Vec<ActionFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionFile {
    Attach { link: String, parent: String },
    Detach { link: String },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointFile {
    pub frame: String,
    #[serde(default)]
    pub xyz: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineFile {
    pub frame: String,
    #[serde(default)]
    pub point: [f64; 3],
    pub direction: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneFile {
    pub frame: String,
    #[serde(default)]
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorFile {
    pub frame: String,
    pub xyz: [f64; 3],
}

/// A scalar feature over the world state.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "feature", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceFile {
    PointLineDistance {
        point: PointFile,
        line: LineFile,
        frame: String,
        max_velocity: Option<f64>,
    },
    PointPlaneDistance {
        point: PointFile,
        plane: PlaneFile,
        frame: String,
        max_velocity: Option<f64>,
    },
    AngleBetween {
        u: VectorFile,
        v: VectorFile,
        frame: String,
        max_velocity: Option<f64>,
    },
    /// Coordinate of `tip`'s origin in `root`.
    Coordinate {
        root: String,
        tip: String,
        axis: Axis,
        max_velocity: Option<f64>,
    },
    /// Yaw of `tip` in `root`, `atan2(R10, R00)`.
    Heading {
        root: String,
        tip: String,
        max_velocity: Option<f64>,
    },
    Joint {
        dof: String,
        max_velocity: Option<f64>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskFile {
    JointGoal {
        dof: String,
        target: f64,
        /// Target is an offset from the position at activation.
        #[serde(default)]
        relative: bool,
        max_velocity: Option<f64>,
    },
    /// Position (absolute, or current plus `offset`) and orientation (`rpy`, or current).
    CartesianPose {
        root: String,
        tip: String,
        position: Option<[f64; 3]>,
        offset: Option<[f64; 3]>,
        rpy: Option<[f64; 3]>,
        max_linear_velocity: Option<f64>,
        max_angular_velocity: Option<f64>,
    },
    PointGoal {
        root: String,
        tip: String,
        position: Option<[f64; 3]>,
        offset: Option<[f64; 3]>,
        max_velocity: Option<f64>,
    },
    PointLineDistance {
        point: PointFile,
        line: LineFile,
        frame: String,
        #[serde(default)]
        target: f64,
        max_velocity: Option<f64>,
    },
    PointPlaneDistance {
        point: PointFile,
        plane: PlaneFile,
        frame: String,
        #[serde(default)]
        target: f64,
        max_velocity: Option<f64>,
    },
    AngleBetween {
        u: VectorFile,
        v: VectorFile,
        frame: String,
        #[serde(default)]
        target: f64,
        max_velocity: Option<f64>,
    },
    /// Equality on a feature: `target`, or the value at activation plus `offset`.
    Goal {
        space: SpaceFile,
        target: Option<f64>,
        offset: Option<f64>,
    },
    Above {
        space: SpaceFile,
        threshold: f64,
    },
    Below {
        space: SpaceFile,
        threshold: f64,
    },
    Band {
        space: SpaceFile,
        lower: f64,
        upper: f64,
    },
    /// Per-step bound on the feature's rate.
    Velocity {
        space: SpaceFile,
        lower: f64,
        upper: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum MonitorFile {
    Sensor {
        channel: String,
        predicate: Option<Predicate>,
    },
    Feature {
        space: SpaceFile,
        predicate: Predicate,
    },
    Timer {
        duration: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TriggerFile {
    At(f64),
    Feature { space: SpaceFile, predicate: Predicate },
    Node { path: String, lifecycle: LifeCycle },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EffectFile {
    SetSensor { channel: String, value: SensorValue },
    SetVirtual { symbol: String, value: f64 },
    Perturb { dof: String, delta: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventFile {
    pub trigger: TriggerFile,
    pub effects: Vec<EffectFile>,
}

// --- task and feature construction ------------------------------------------------

fn space_name(s: &SpaceFile) -> String {
    match s {
        SpaceFile::PointLineDistance { frame, .. } => format!("point_line_distance@{frame}"),
        SpaceFile::PointPlaneDistance { frame, .. } => format!("point_plane_distance@{frame}"),
        SpaceFile::AngleBetween { frame, .. } => format!("angle_between@{frame}"),
        SpaceFile::Coordinate { root, tip, axis, .. } => format!("{tip}.{axis:?}@{root}").to_lowercase(),
        SpaceFile::Heading { root, tip, .. } => format!("{tip}.heading@{root}"),
        SpaceFile::Joint { dof, .. } => dof.clone(),
    }
}

fn point(world: &WorldModel, p: &PointFile) -> Result<Point, TaskError> {
    Ok(Point::new(world.link(&p.frame)?, p.xyz))
}

/// Builds a feature as an expression plus its expected rate.
fn feature(world: &WorldModel, s: &SpaceFile) -> Result<(Expr, f64), TaskError> {
    let name = space_name(s);
    let space = |e: Expr, v: f64| -> Result<(Expr, f64), TaskError> { Ok((e, v)) };
    match s {
        SpaceFile::PointLineDistance {
            point: p,
            line,
            frame,
            max_velocity,
        } => {
            let l = Line::new(world.link(&line.frame)?, line.point, line.direction);
            let t = point_line_distance(
                &name,
                world,
                &point(world, p)?,
                &l,
                world.link(frame)?,
                max_velocity.unwrap_or(DEFAULT_LINEAR_VELOCITY),
            )?;
            space(t.expr().expect("scalar").clone(), t.max_velocity)
        }
        SpaceFile::PointPlaneDistance {
            point: p,
            plane,
            frame,
            max_velocity,
        } => {
            let pl = Plane::new(world.link(&plane.frame)?, plane.point, plane.normal);
            let t = point_plane_distance(
                &name,
                world,
                &point(world, p)?,
                &pl,
                world.link(frame)?,
                max_velocity.unwrap_or(DEFAULT_LINEAR_VELOCITY),
            )?;
            space(t.expr().expect("scalar").clone(), t.max_velocity)
        }
        SpaceFile::AngleBetween { u, v, frame, max_velocity } => {
            let a = Vector::new(world.link(&u.frame)?, u.xyz);
            let b = Vector::new(world.link(&v.frame)?, v.xyz);
            let t = angle_between(&name, world, &a, &b, world.link(frame)?, max_velocity.unwrap_or(DEFAULT_ANGULAR_VELOCITY))?;
            space(t.expr().expect("scalar").clone(), t.max_velocity)
        }
        SpaceFile::Coordinate {
            root,
            tip,
            axis,
            max_velocity,
        } => space(
            position_coordinate(world, world.link(root)?, world.link(tip)?, axis.index()),
            max_velocity.unwrap_or(DEFAULT_LINEAR_VELOCITY),
        ),
        SpaceFile::Heading { root, tip, max_velocity } => {
            let fk = world.fk_expr(world.link(root)?, world.link(tip)?);
            space(fk.get(1, 0).atan2(fk.get(0, 0)), max_velocity.unwrap_or(DEFAULT_ANGULAR_VELOCITY))
        }
        SpaceFile::Joint { dof, max_velocity } => {
            let d = world.dof_by_name(dof)?;
            space(Expr::symbol(&d.symbols.position), max_velocity.unwrap_or(DEFAULT_GENERIC_VELOCITY))
        }
    }
}

fn task_space(world: &WorldModel, s: &SpaceFile) -> Result<TaskSpace, TaskError> {
    let (e, v) = feature(world, s)?;
    TaskSpace::new(&space_name(s), e, v, world)
}

fn wrapped(s: &SpaceFile) -> bool {
    matches!(s, SpaceFile::Heading { .. })
}

fn goal_task(world: &WorldModel, s: &SpaceFile, target: Option<f64>, offset: Option<f64>) -> Result<TaskFunction, TaskError> {
    let space = task_space(world, s)?;
    let f = space.expr().expect("scalar").clone();
    let target = target.unwrap_or_else(|| world.eval(&f)) + offset.unwrap_or(0.0);
    if wrapped(s) {
        let delta = target - f;
        let error = delta.sin().atan2(&delta.cos());
        return Ok(TaskFunction::equality(space, error));
    }
    Ok(goal_equality(space, target))
}

fn goal_pose(world: &WorldModel, root: &str, tip: &str, position: Option<[f64; 3]>, offset: Option<[f64; 3]>, rpy: Option<[f64; 3]>) -> Result<Matrix4<f64>, TaskError> {
    let current = world.fk(world.link(root)?, world.link(tip)?);
    let mut goal = current;
    if let Some(rpy) = rpy {
        let r = Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]);
        goal.fixed_view_mut::<3, 3>(0, 0).copy_from(r.matrix());
    }
    for i in 0..3 {
        let base = position.map(|p| p[i]).unwrap_or(current[(i, 3)]);
        goal[(i, 3)] = base + offset.map(|o| o[i]).unwrap_or(0.0);
    }
    Ok(goal)
}

/// Task functions of one task entry against the current world state.
pub fn build_task(world: &WorldModel, t: &TaskFile) -> Result<Vec<TaskFunction>, TaskError> {
    Ok(match t {
        TaskFile::JointGoal {
            dof,
            target,
            relative,
            max_velocity,
        } => {
            let id = world.dof_id(dof)?;
            let target = if *relative { world.position(id) + target } else { *target };
            vec![joint_goal_task(world, id, target, max_velocity.unwrap_or(DEFAULT_GENERIC_VELOCITY))?]
        }
        TaskFile::CartesianPose {
            root,
            tip,
            position,
            offset,
            rpy,
            max_linear_velocity,
            max_angular_velocity,
        } => {
            let goal = goal_pose(world, root, tip, *position, *offset, *rpy)?;
            cartesian_pose_task(
                world,
                &format!("{tip} pose"),
                world.link(root)?,
                world.link(tip)?,
                &goal,
                max_linear_velocity.unwrap_or(DEFAULT_LINEAR_VELOCITY),
                max_angular_velocity.unwrap_or(DEFAULT_ANGULAR_VELOCITY),
            )?
        }
        TaskFile::PointGoal {
            root,
            tip,
            position,
            offset,
            max_velocity,
        } => {
            let goal = goal_pose(world, root, tip, *position, *offset, None)?;
            point_goal_task(
                world,
                &format!("{tip} position"),
                world.link(root)?,
                world.link(tip)?,
                [goal[(0, 3)], goal[(1, 3)], goal[(2, 3)]],
                max_velocity.unwrap_or(DEFAULT_LINEAR_VELOCITY),
            )?
        }
        TaskFile::PointLineDistance {
            point,
            line,
            frame,
            target,
            max_velocity,
        } => {
            let s = SpaceFile::PointLineDistance {
                point: point.clone(),
                line: line.clone(),
                frame: frame.clone(),
                max_velocity: *max_velocity,
            };
            vec![goal_task(world, &s, Some(*target), None)?]
        }
        TaskFile::PointPlaneDistance {
            point,
            plane,
            frame,
            target,
            max_velocity,
        } => {
            let s = SpaceFile::PointPlaneDistance {
                point: point.clone(),
                plane: plane.clone(),
                frame: frame.clone(),
                max_velocity: *max_velocity,
            };
            vec![goal_task(world, &s, Some(*target), None)?]
        }
        TaskFile::AngleBetween {
            u,
            v,
            frame,
            target,
            max_velocity,
        } => {
            let s = SpaceFile::AngleBetween {
                u: u.clone(),
                v: v.clone(),
                frame: frame.clone(),
                max_velocity: *max_velocity,
            };
            vec![goal_task(world, &s, Some(*target), None)?]
        }
        TaskFile::Goal { space, target, offset } => vec![goal_task(world, space, *target, *offset)?],
        TaskFile::Above { space, threshold } => vec![above_inequality(task_space(world, space)?, *threshold)],
        TaskFile::Below { space, threshold } => vec![below_inequality(task_space(world, space)?, *threshold)],
        TaskFile::Band { space, lower, upper } => vec![band_inequality(task_space(world, space)?, *lower, *upper)?],
        TaskFile::Velocity { space, lower, upper } => vec![TaskFunction::velocity(task_space(world, space)?, *lower, *upper)],
    })
}

pub fn build_tasks(world: &WorldModel, tasks: &[TaskFile]) -> Result<Vec<TaskFunction>, TaskError> {
    let mut out = Vec::new();
    for t in tasks {
        out.extend(build_task(world, t)?);
    }
    Ok(out)
}

// --- loading ---------------------------------------------------------------------------

/// A scenario resolved into runnable parts.
pub struct Scenario {
    pub file: ScenarioFile,
    pub world: WorldModel,
    pub program: Program,
    pub events: Vec<ScenarioEvent>,
    pub sensors: Sensors,
    pub config: RunConfig,
}

/// Command-line overrides of the file configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub dt: Option<f64>,
    pub horizon: Option<usize>,
    pub timeout: Option<f64>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
}

pub fn parse(src: &str) -> Result<ScenarioFile, ScenarioError> {
    serde_json::from_str(src).map_err(|e| ScenarioError::Schema {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Parses, resolves and validates a scenario. Every motion and monitor is built once
/// against the initial state so unknown links, DOFs and uncontrollable tasks surface here.
pub fn load(src: &str, overrides: &Overrides) -> Result<Scenario, ScenarioError> {
    let file = parse(src)?;
    let world = build_world(&file.world)?;
    let config = build_config(&file.config, overrides)?;
    let mut motions = Vec::new();
    let mut monitors = Vec::new();
    let specs = build_level(&file.chart, "", &world, &mut motions, &mut monitors)?;
    let chart = Statechart::new(specs).map_err(|e| invalid("chart", e))?;
    let program = Program { chart, motions, monitors };
    program.validate().map_err(|e| invalid("chart", e))?;
    let mut events = Vec::new();
    for (i, e) in file.events.iter().enumerate() {
        events.push(build_event(e, &world, &program.chart, &format!("events[{i}]"))?);
    }
    Ok(Scenario {
        sensors: file.sensors.clone(),
        file,
        world,
        program,
        events,
        config,
    })
}

fn build_config(c: &ConfigFile, o: &Overrides) -> Result<RunConfig, ScenarioError> {
    let d = RunConfig::default();
    let l = LmpcConfig::default();
    let lmpc = LmpcConfig {
        dt: o.dt.or(c.dt).unwrap_or(l.dt),
        horizon: o.horizon.or(c.horizon).unwrap_or(l.horizon),
        velocity_weight_start: c.velocity_weight_start.unwrap_or(l.velocity_weight_start),
        velocity_weight_end: c.velocity_weight_end.unwrap_or(l.velocity_weight_end),
        slack_weight_base: c.slack_weight_base.unwrap_or(l.slack_weight_base),
        kkt_tolerance: l.kkt_tolerance,
        max_iterations: c.max_iterations.unwrap_or(l.max_iterations),
    };
    lmpc.validate().map_err(|e| invalid("config", e))?;
    let cfg = RunConfig {
        lmpc,
        timeout: o.timeout.or(c.timeout).unwrap_or(d.timeout),
        noise: o.noise.or(c.noise).unwrap_or(d.noise),
        seed: o.seed.or(c.seed).unwrap_or(d.seed),
    };
    if !(cfg.timeout > 0.0) {
        return Err(invalid("config.timeout", "must be positive"));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0) {
        return Err(invalid("config.noise", "must be finite and non-negative"));
    }
    Ok(cfg)
}

fn limits(path: &str, pl: Option<[f64; 2]>, v: f64) -> Result<DofLimits, ScenarioError> {
    if let Some([lb, ub]) = pl {
        if !(lb < ub) {
            return Err(invalid(path, format!("position limits [{lb}, {ub}] are empty")));
        }
    }
    Ok(DofLimits::new(pl.map(|[a, b]| (a, b)), v))
}

pub fn build_world(w: &WorldFile) -> Result<WorldModel, ScenarioError> {
    let mut world = match (&w.robot, &w.root) {
        (Some(r), None) => builtin_robot(r).ok_or_else(|| invalid("world.robot", format!("unknown built-in robot `{r}`")))?,
        (None, root) => WorldModel::new(root.as_deref().unwrap_or("map")),
        (Some(_), Some(_)) => return Err(invalid("world", "`robot` and `root` are mutually exclusive")),
    };
    for (i, l) in w.links.iter().enumerate() {
        let path = format!("world.links[{i}] ({})", l.name);
        let wrap = |e: WorldError| invalid(path.clone(), e);
        let parent = world.link(&l.parent).map_err(wrap)?;
        let child = world.add_link(&l.name).map_err(wrap)?;
        let (name, spec) = match &l.joint {
            JointFile::Fixed { origin } => (format!("{}_mount", l.name), JointSpec::Fixed { origin: origin.matrix() }),
            JointFile::Revolute {
                name,
                axis,
                origin,
                position_limits,
                velocity_limit,
            } => (
                name.clone().unwrap_or_else(|| l.name.clone()),
                JointSpec::Revolute {
                    axis: *axis,
                    origin: origin.matrix(),
                    limits: limits(&path, *position_limits, *velocity_limit)?,
                },
            ),
            JointFile::Prismatic {
                name,
                axis,
                origin,
                position_limits,
                velocity_limit,
            } => (
                name.clone().unwrap_or_else(|| l.name.clone()),
                JointSpec::Prismatic {
                    axis: *axis,
                    origin: origin.matrix(),
                    limits: limits(&path, *position_limits, *velocity_limit)?,
                },
            ),
            JointFile::OmniBase {
                name,
                max_linear_velocity,
                max_angular_velocity,
            } => (
                name.clone().unwrap_or_else(|| l.name.clone()),
                JointSpec::OmniBase {
                    max_linear_velocity: *max_linear_velocity,
                    max_angular_velocity: *max_angular_velocity,
                },
            ),
        };
        world.add_joint(&name, parent, child, spec).map_err(wrap)?;
    }
    for d in &w.zero_velocity {
        let id = world.dof_id(d).map_err(|e| invalid("world.zero_velocity", e))?;
        world.add_zero_velocity_constraint(id);
    }
    for (dof, v) in &w.initial_state {
        let report = world
            .set_named(dof, SymbolKind::DofPosition, *v)
            .map_err(|e| invalid(format!("world.initial_state.{dof}"), e))?;
        if !report.limit_violations.is_empty() {
            return Err(invalid(format!("world.initial_state.{dof}"), "outside the position limits"));
        }
    }
    for (joint, [x, y, yaw]) in &w.base_pose {
        world
            .set_base_pose(joint, *x, *y, *yaw)
            .map_err(|e| invalid(format!("world.base_pose.{joint}"), e))?;
    }
    Ok(world)
}

fn condition(path: &str, field: &str, src: &Option<String>) -> Result<Option<Condition>, ScenarioError> {
    src.as_ref()
        .map(|s| parse_condition(s).map_err(|e| invalid(format!("{path}.{field}"), format!("node `{}`: {e}", path.rsplit('/').next().unwrap_or(path)))))
        .transpose()
}

fn actions(a: &[ActionFile]) -> Vec<WorldAction> {
    a.iter()
        .map(|a| match a {
            ActionFile::Attach { link, parent } => WorldAction::Attach {
                link: link.clone(),
                parent: parent.clone(),
            },
            ActionFile::Detach { link } => WorldAction::Detach { link: link.clone() },
        })
        .collect()
}

fn build_level(
    nodes: &[NodeFile],
    prefix: &str,
    world: &WorldModel,
    motions: &mut Vec<MotionSpec>,
    monitors: &mut Vec<MonitorSpec>,
) -> Result<Vec<NodeSpec>, ScenarioError> {
    let mut out = Vec::new();
    for n in nodes {
        let path = if prefix.is_empty() {
            format!("chart/{}", n.name)
        } else {
            format!("{prefix}/{}", n.name)
        };
        let is_template = matches!(n.kind, NodeKindFile::Sequential | NodeKindFile::Parallel);
        if !n.tasks.is_empty() && n.kind != NodeKindFile::Motion {
            return Err(invalid(&path, "only motion nodes take tasks"));
        }
        if n.monitor.is_some() && n.kind != NodeKindFile::Monitor {
            return Err(invalid(&path, "only monitor nodes take a monitor"));
        }
        if !n.children.is_empty() && !is_template {
            return Err(invalid(&path, "only templates take children"));
        }
        if (!n.on_start.is_empty() || !n.on_end.is_empty()) && n.kind != NodeKindFile::Motion {
            return Err(invalid(&path, "only motion nodes take on_start/on_end actions"));
        }
        let mut spec = match n.kind {
            NodeKindFile::Motion => {
                if n.tasks.is_empty() {
                    return Err(invalid(&path, "motion without tasks"));
                }
                build_tasks(world, &n.tasks).map_err(|e| invalid(&path, e))?;
                let tasks = n.tasks.clone();
                motions.push(MotionSpec {
                    build: Arc::new(move |w: &WorldModel| build_tasks(w, &tasks)),
                    on_start: actions(&n.on_start),
                    on_end: actions(&n.on_end),
                });
                NodeSpec::motion(&n.name, motions.len() - 1)
            }
            NodeKindFile::Monitor => {
                let m = n.monitor.as_ref().ok_or_else(|| invalid(&path, "monitor node without `monitor`"))?;
                monitors.push(build_monitor(m, world, &path)?);
                NodeSpec::monitor(&n.name, monitors.len() - 1)
            }
            NodeKindFile::Sequential | NodeKindFile::Parallel => {
                let kids = build_level(&n.children, &path, world, motions, monitors)?;
                if n.kind == NodeKindFile::Sequential {
                    if n.success.is_some() {
                        return Err(invalid(&path, "`success` applies to parallel templates only"));
                    }
                    NodeSpec::sequential(&n.name, kids)
                } else {
                    let m = kids.len();
                    NodeSpec::parallel(&n.name, kids, n.success.unwrap_or(m))
                }
            }
            NodeKindFile::End => NodeSpec::end(&n.name),
            NodeKindFile::Cancel => NodeSpec::cancel(&n.name),
        };
        spec.start = condition(&path, "start", &n.start)?;
        spec.pause = condition(&path, "pause", &n.pause)?;
        spec.end = condition(&path, "end", &n.end)?;
        spec.reset = condition(&path, "reset", &n.reset)?;
        out.push(spec);
    }
    Ok(out)
}

fn feature_builder(space: &SpaceFile, world: &WorldModel, path: &str) -> Result<crate::executive::ExprBuilder, ScenarioError> {
    feature(world, space).map_err(|e| invalid(path, e))?;
    let s = space.clone();
    Ok(Arc::new(move |w: &WorldModel| feature(w, &s).map(|(e, _)| e)))
}

fn build_monitor(m: &MonitorFile, world: &WorldModel, path: &str) -> Result<MonitorSpec, ScenarioError> {
    Ok(match m {
        MonitorFile::Sensor { channel, predicate } => MonitorSpec::Sensor {
            channel: channel.clone(),
            predicate: *predicate,
        },
        MonitorFile::Feature { space, predicate } => MonitorSpec::Expression {
            build: feature_builder(space, world, path)?,
            predicate: *predicate,
        },
        MonitorFile::Timer { duration } => {
            if !(*duration >= 0.0) {
                return Err(invalid(path, "timer duration must be non-negative"));
            }
            MonitorSpec::Timer { duration: *duration }
        }
    })
}

fn build_event(e: &EventFile, world: &WorldModel, chart: &Statechart, path: &str) -> Result<ScenarioEvent, ScenarioError> {
    let trigger = match &e.trigger {
        TriggerFile::At(t) => Trigger::At(*t),
        TriggerFile::Feature { space, predicate } => Trigger::Expression {
            build: feature_builder(space, world, path)?,
            predicate: *predicate,
        },
        TriggerFile::Node { path: node, lifecycle } => {
            chart.find(node).ok_or_else(|| invalid(path, format!("unknown node `{node}`")))?;
            Trigger::Node {
                path: node.clone(),
                lifecycle: *lifecycle,
            }
        }
    };
    let mut effects = Vec::new();
    for eff in &e.effects {
        effects.push(match eff {
            EffectFile::SetSensor { channel, value } => Effect::SetSensor {
                channel: channel.clone(),
                value: *value,
            },
            EffectFile::SetVirtual { symbol, value } => {
                world
                    .get_named(symbol, SymbolKind::Virtual)
                    .map_err(|e| invalid(path, e))?;
                Effect::SetVirtual {
                    symbol: symbol.clone(),
                    value: *value,
                }
            }
            EffectFile::Perturb { dof, delta } => {
                world.dof_id(dof).map_err(|e| invalid(path, e))?;
                Effect::Perturb {
                    dof: dof.clone(),
                    delta: *delta,
                }
            }
        });
    }
    Ok(ScenarioEvent { trigger, effects })
}

// --- outputs ---------------------------------------------------------------------------

/// `time` then `<dof>.position,<dof>.velocity,<dof>.command,<dof>.jerk` per DOF in declaration order.
///
/// Time has six decimals; other values use the shortest representation that round-trips.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = String::from("time");
    for d in &traj.dof_names {
        write!(s, ",{d}.position,{d}.velocity,{d}.command,{d}.jerk").unwrap();
    }
    s.push('\n');
    for (c, snap) in traj.snapshots.iter().enumerate() {
        write!(s, "{:.6}", snap.t).unwrap();
        for d in 0..traj.dof_names.len() {
            write!(s, ",{:?},{:?},{:?},{:?}", snap.q[d], snap.qd[d], traj.commands[c][d], traj.jerks[c][d]).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn gantt_json(records: &[GanttRecord]) -> String {
    serde_json::to_string_pretty(records).expect("serialisable records")
}

pub fn parse_gantt(src: &str) -> Result<Vec<GanttRecord>, ScenarioError> {
    serde_json::from_str(src).map_err(|e| ScenarioError::Schema {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn report_json(scenario: &str, report: &RunReport, qp_dump: Option<&serde_json::Value>) -> String {
    let mut v = serde_json::json!({ "scenario": scenario });
    let r = serde_json::to_value(report).expect("serialisable report");
    if let (Some(obj), serde_json::Value::Object(fields)) = (v.as_object_mut(), r) {
        obj.extend(fields);
        if let Some(d) = qp_dump {
            obj.insert("qp_dump".into(), d.clone());
        }
    }
    serde_json::to_string_pretty(&v).expect("serialisable report")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "minimal",
        "world": { "robot": "planar_3dof_arm" },
        "chart": [
            { "name": "Go", "kind": "motion", "tasks": [ { "type": "joint_goal", "dof": "joint_1", "target": 0.2 } ] },
            { "name": "Stop", "kind": "end", "start": "Go" }
        ]
    }"#;

    #[test]
    fn minimal_scenario_loads() {
        let s = load(MINIMAL, &Overrides::default()).unwrap();
        assert_eq!(s.program.motions.len(), 1);
        assert_eq!(s.config.lmpc.horizon, 7);
        let s = load(
            MINIMAL,
            &Overrides {
                horizon: Some(9),
                ..Overrides::default()
            },
        )
        .unwrap();
        assert_eq!(s.config.lmpc.horizon, 9);
    }

    #[test]
    fn diagnostics_name_the_problem() {
        let bad_cond = MINIMAL.replace(r#""start": "Go""#, r#""start": "Go and (""#);
        let e = load(&bad_cond, &Overrides::default()).err().unwrap().to_string();
        assert!(e.contains("Stop"), "{e}");
        let bad_ref = MINIMAL.replace(r#""start": "Go""#, r#""start": "Gone""#);
        let e = load(&bad_ref, &Overrides::default()).err().unwrap().to_string();
        assert!(e.contains("Gone"), "{e}");
        let bad_dof = MINIMAL.replace("joint_1", "joint_9");
        let e = load(&bad_dof, &Overrides::default()).err().unwrap().to_string();
        assert!(e.contains("joint_9") && e.contains("chart/Go"), "{e}");
        let bad_field = MINIMAL.replace(r#""kind": "end""#, r#""kind": "end", "colour": 1"#);
        let e = load(&bad_field, &Overrides::default()).err().unwrap();
        assert!(matches!(e, ScenarioError::Schema { line: 6, .. }), "{e}");
    }

    #[test]
    fn bundled_scenarios_validate() {
        for (name, src) in BUNDLED {
            load(src, &Overrides::default()).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
