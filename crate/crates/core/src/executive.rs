//! Closed control loop over a kinematic simulation.
//!
//! Every cycle applies due scenario events, ticks the chart, builds and solves
//! the QP from the tasks of the effectively active motions, and integrates the
//! command with semi-implicit Euler. Monitors read scripted sensor channels,
//! geometric expressions, or timers.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::expr::{Expr, SymbolKind};
use crate::lmpc::{qp_to_json, BoundMode, Lmpc, LmpcConfig, LmpcError};
use crate::statechart::{GanttRecord, GanttRecorder, LifeCycle, Node, NodeId, NodeKind, Statechart, Terminal, Ternary, TickHooks};
use crate::taskfn::{CompiledTasks, TaskError, TaskFunction, TaskRow};
use crate::world::{pose, DofId, DofLimits, JointKind, JointSpec, LinkId, WorldError, WorldModel};

pub const SMOOTHNESS_SOLVER_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("motion `{node}`: {source}")]
    Task { node: String, source: TaskError },
    #[error("monitor `{node}`: {source}")]
    Monitor { node: String, source: TaskError },
    #[error(transparent)]
    Lmpc(#[from] LmpcError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("node `{node}` refers to missing {what} payload {index}")]
    MissingPayload { node: String, what: &'static str, index: usize },
    #[error("event refers to unknown node `{0}`")]
    UnknownNode(String),
    #[error("timeout must be positive, got {0}")]
    InvalidTimeout(f64),
    #[error("noise amplitude must be finite and non-negative, got {0}")]
    InvalidNoise(f64),
}

/// Value of a scripted sensor channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SensorValue {
    Real(f64),
    Ternary(Ternary),
}

pub type Sensors = BTreeMap<String, SensorValue>;

/// Threshold test on a real value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predicate {
    Above(f64),
    Below(f64),
    Band(f64, f64),
    Near { target: f64, tolerance: f64 },
}

impl Predicate {
    pub fn holds(&self, v: f64) -> bool {
        match *self {
            Predicate::Above(t) => v >= t,
            Predicate::Below(t) => v <= t,
            Predicate::Band(lo, hi) => lo <= v && v <= hi,
            Predicate::Near { target, tolerance } => (v - target).abs() <= tolerance,
        }
    }
}

/// Builds a motion's task functions against the world state at activation.
pub type TaskBuilder = Arc<dyn Fn(&WorldModel) -> Result<Vec<TaskFunction>, TaskError> + Send + Sync>;
/// Builds a scalar expression against the world state at activation.
pub type ExprBuilder = Arc<dyn Fn(&WorldModel) -> Result<Expr, TaskError> + Send + Sync>;

#[derive(Clone, Debug, PartialEq)]
pub enum WorldAction {
    /// Re-parents `link` below `parent`, keeping its current pose.
    Attach { link: String, parent: String },
    /// Re-parents `link` below the root, keeping its current pose.
    Detach { link: String },
}

#[derive(Clone)]
pub struct MotionSpec {
    pub build: TaskBuilder,
    pub on_start: Vec<WorldAction>,
    pub on_end: Vec<WorldAction>,
}

impl MotionSpec {
    pub fn new(build: TaskBuilder) -> Self {
        Self {
            build,
            on_start: Vec::new(),
            on_end: Vec::new(),
        }
    }
}

#[derive(Clone)]
pub enum MonitorSpec {
    /// Ternary channels are read as is; real channels go through the predicate.
    Sensor { channel: String, predicate: Option<Predicate> },
    Expression { build: ExprBuilder, predicate: Predicate },
    /// True once the node has been active for `duration` seconds.
    Timer { duration: f64 },
}

#[derive(Clone)]
pub enum Trigger {
    At(f64),
    Expression { build: ExprBuilder, predicate: Predicate },
    /// Fires once the node (by path) is in the given life-cycle state.
    Node { path: String, lifecycle: LifeCycle },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    SetSensor { channel: String, value: SensorValue },
    SetVirtual { symbol: String, value: f64 },
    /// Adds `delta` to a DOF position.
    Perturb { dof: String, delta: f64 },
}

/// Fires once, before the chart tick of the cycle in which its trigger holds.
#[derive(Clone)]
pub struct ScenarioEvent {
    pub trigger: Trigger,
    pub effects: Vec<Effect>,
}

/// A chart with the payloads its motion and monitor nodes index into.
#[derive(Clone)]
pub struct Program {
    pub chart: Statechart,
    pub motions: Vec<MotionSpec>,
    pub monitors: Vec<MonitorSpec>,
}

impl Program {
    pub fn validate(&self) -> Result<(), ExecError> {
        for n in self.chart.nodes() {
            let (what, index, len) = match n.kind {
                NodeKind::Motion { payload } => ("motion", payload, self.motions.len()),
                NodeKind::Monitor { payload } => ("monitor", payload, self.monitors.len()),
                _ => continue,
            };
            if index >= len {
                return Err(ExecError::MissingPayload {
                    node: self.chart.path(n.id),
                    what,
                    index,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub lmpc: LmpcConfig,
    pub timeout: f64,
    /// Amplitude of zero-mean uniform noise on velocity readback.
    pub noise: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lmpc: LmpcConfig::default(),
            timeout: 30.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    End,
    Cancel,
    Timeout,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SystemSnapshot {
    pub t: f64,
    /// Per DOF; planar-base DOFs hold the measured map pose instead of the zeroed displacement.
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
    pub virtuals: Vec<f64>,
    pub sensors: Sensors,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub dt: f64,
    pub dof_names: Vec<String>,
    pub virtual_names: Vec<String>,
    /// `(x, y, yaw)` DOF indices of each planar base.
    pub planar_bases: Vec<[usize; 3]>,
    /// State at the start of each cycle.
    pub snapshots: Vec<SystemSnapshot>,
    pub commands: Vec<Vec<f64>>,
    pub jerks: Vec<Vec<f64>>,
    /// State after the last cycle.
    pub final_state: SystemSnapshot,
}

impl Trajectory {
    pub fn cycles(&self) -> usize {
        self.commands.len()
    }

    /// Velocity sequence of one DOF: the initial readback followed by every command.
    pub fn velocity_series(&self, dof: usize) -> Vec<f64> {
        let first = self.snapshots.first().unwrap_or(&self.final_state);
        std::iter::once(first.qd[dof]).chain(self.commands.iter().map(|c| c[dof])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DofSmoothness {
    pub dof: String,
    pub max_second_difference: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoothnessViolation {
    pub cycle: usize,
    pub dof: String,
    pub second_difference: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoothnessReport {
    pub per_dof: Vec<DofSmoothness>,
    pub violations: Vec<SmoothnessViolation>,
}

/// Second differences of the velocity series against `j_max * dt^2` plus solver tolerance.
///
/// Index `k` of a violation is the cycle whose command completes the offending triple.
pub fn smoothness_report(traj: &Trajectory, j_max: &[f64], dt: f64) -> SmoothnessReport {
    let mut per_dof = Vec::new();
    let mut violations = Vec::new();
    for (d, name) in traj.dof_names.iter().enumerate() {
        let v = traj.velocity_series(d);
        let bound = j_max[d] * dt * dt;
        let mut max = 0.0f64;
        for k in 1..v.len().saturating_sub(1) {
            let dd = (v[k + 1] - 2.0 * v[k] + v[k - 1]).abs();
            max = max.max(dd);
            if dd > bound + SMOOTHNESS_SOLVER_TOLERANCE {
                violations.push(SmoothnessViolation {
                    cycle: k,
                    dof: name.clone(),
                    second_difference: dd,
                    bound,
                });
            }
        }
        per_dof.push(DofSmoothness {
            dof: name.clone(),
            max_second_difference: max,
            bound,
        });
    }
    SmoothnessReport { per_dof, violations }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingStats {
    pub cycles: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl TimingStats {
    pub fn from_seconds(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self {
                cycles: 0,
                mean_ms: 0.0,
                median_ms: 0.0,
                p95_ms: 0.0,
                max_ms: 0.0,
            };
        }
        let mut s: Vec<f64> = samples.iter().map(|x| x * 1e3).collect();
        s.sort_by(|a, b| a.total_cmp(b));
        let n = s.len();
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Self {
            cycles: n,
            mean_ms: s.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: s[((n as f64 * 0.95).ceil() as usize).clamp(1, n) - 1],
            max_ms: s[n - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub termination: Termination,
    pub terminal_node: Option<String>,
    pub cycles: usize,
    pub t_end: f64,
    pub dt: f64,
    pub horizon: usize,
    pub jerk_limits: Vec<f64>,
    pub smoothness: SmoothnessReport,
    pub solve_time: TimingStats,
    /// Cycles solved with relaxed velocity or jerk bounds.
    pub fallback_cycles: usize,
    /// Largest excursion of any DOF past a hard position limit.
    pub max_limit_excess: f64,
}

pub struct RunOutput {
    pub trajectory: Trajectory,
    pub gantt: Vec<GanttRecord>,
    pub report: RunReport,
    /// JSON dump of the QP of a cycle no bound relaxation could solve.
    pub qp_dump: Option<Value>,
    pub world: WorldModel,
    pub chart: Statechart,
}

struct ActiveMotion {
    tasks: CompiledTasks,
}

struct Runtime<'a> {
    world: &'a mut WorldModel,
    sensors: &'a Sensors,
    program: &'a Program,
    t: f64,
    motions: BTreeMap<NodeId, ActiveMotion>,
    monitor_exprs: BTreeMap<NodeId, (Expr, u64)>,
    started: BTreeMap<NodeId, f64>,
    error: Option<ExecError>,
}

impl Runtime<'_> {
    fn compile_motion(&mut self, node: &Node, payload: usize) -> Result<ActiveMotion, ExecError> {
        let path = self.program.chart.path(node.id);
        let spec = &self.program.motions[payload];
        let wrap = |source| ExecError::Task {
            node: path.clone(),
            source,
        };
        let tasks = (spec.build)(self.world).map_err(wrap)?;
        let tasks = CompiledTasks::new(self.world, tasks).map_err(wrap)?;
        Ok(ActiveMotion { tasks })
    }

    /// Rows of a motion, recompiling when the kinematic tree changed since activation.
    fn motion_rows(&mut self, node: &Node) -> Result<Vec<TaskRow>, ExecError> {
        let NodeKind::Motion { payload } = node.kind else {
            return Ok(Vec::new());
        };
        let stale = self.motions.get(&node.id).map(|m| m.tasks.revision() != self.world.revision()).unwrap_or(true);
        if stale {
            let m = self.compile_motion(node, payload)?;
            self.motions.insert(node.id, m);
        }
        let path = self.program.chart.path(node.id);
        self.motions[&node.id].tasks.evaluate(self.world).map_err(|source| ExecError::Task { node: path, source })
    }

    fn monitor_value(&mut self, node: &Node, build: &ExprBuilder) -> Result<f64, ExecError> {
        let rev = self.world.revision();
        let fresh = matches!(self.monitor_exprs.get(&node.id), Some((_, r)) if *r == rev);
        if !fresh {
            let e = build(self.world).map_err(|source| ExecError::Monitor {
                node: self.program.chart.path(node.id),
                source,
            })?;
            self.monitor_exprs.insert(node.id, (e, rev));
        }
        Ok(self.world.eval(&self.monitor_exprs[&node.id].0))
    }

    fn apply_actions(&mut self, actions: &[WorldAction]) -> Result<(), ExecError> {
        for a in actions {
            match a {
                WorldAction::Attach { link, parent } => {
                    let (l, p) = (self.world.link(link)?, self.world.link(parent)?);
                    let tf = self.world.fk(p, l);
                    self.world.attach(l, p, tf)?;
                }
                WorldAction::Detach { link } => {
                    let l = self.world.link(link)?;
                    self.world.detach(l)?;
                }
            }
        }
        Ok(())
    }

    fn observe_inner(&mut self, node: &Node) -> Result<Ternary, ExecError> {
        match node.kind {
            NodeKind::Motion { .. } => {
                let rows = self.motion_rows(node)?;
                Ok(Ternary::from_bool(rows.iter().all(|r| r.satisfied)))
            }
            NodeKind::Monitor { payload } => match &self.program.monitors[payload] {
                MonitorSpec::Sensor { channel, predicate } => Ok(match (self.sensors.get(channel), predicate) {
                    (None, _) => Ternary::Unknown,
                    (Some(SensorValue::Ternary(t)), _) => *t,
                    (Some(SensorValue::Real(v)), Some(p)) => Ternary::from_bool(p.holds(*v)),
                    (Some(SensorValue::Real(v)), None) => Ternary::from_bool(*v != 0.0),
                }),
                MonitorSpec::Expression { build, predicate } => {
                    let build = build.clone();
                    let v = self.monitor_value(node, &build)?;
                    Ok(Ternary::from_bool(predicate.holds(v)))
                }
                MonitorSpec::Timer { duration } => {
                    let t0 = self.started.get(&node.id).copied().unwrap_or(self.t);
                    // Half a microsecond absorbs accumulated time rounding.
                    Ok(Ternary::from_bool(self.t - t0 >= duration - 5e-7))
                }
            },
            _ => Ok(Ternary::Unknown),
        }
    }
}

impl TickHooks for Runtime<'_> {
    fn observe(&mut self, node: &Node) -> Ternary {
        if self.error.is_some() {
            return Ternary::Unknown;
        }
        match self.observe_inner(node) {
            Ok(t) => t,
            Err(e) => {
                self.error = Some(e);
                Ternary::Unknown
            }
        }
    }

    fn on_transition(&mut self, node: &Node, from: LifeCycle, to: LifeCycle) {
        if self.error.is_some() {
            return;
        }
        let result = (|| -> Result<(), ExecError> {
            if from == LifeCycle::Inactive && to == LifeCycle::Active {
                self.started.insert(node.id, self.t);
                if let NodeKind::Motion { payload } = node.kind {
                    self.apply_actions(&self.program.motions[payload].on_start.clone())?;
                    let m = self.compile_motion(node, payload)?;
                    self.motions.insert(node.id, m);
                }
            }
            if to == LifeCycle::Done || to == LifeCycle::Inactive {
                self.started.remove(&node.id);
                self.monitor_exprs.remove(&node.id);
                let was_running = self.motions.remove(&node.id).is_some();
                if let (NodeKind::Motion { payload }, true, LifeCycle::Done) = (&node.kind, was_running, to) {
                    self.apply_actions(&self.program.motions[*payload].on_end.clone())?;
                }
            }
            Ok(())
        })();
        if let Err(e) = result {
            self.error = Some(e);
        }
    }
}

fn snapshot(world: &WorldModel, sensors: &Sensors, t: f64, bases: &[(JointIdx, [usize; 3])]) -> SystemSnapshot {
    let n = world.dofs().len();
    let mut q: Vec<f64> = (0..n).map(|d| world.position(DofId(d))).collect();
    for (j, idx) in bases {
        let pose = world.joints()[*j].virtuals.iter().map(|s| world.values()[s.id() as usize]).collect::<Vec<_>>();
        for k in 0..3 {
            q[idx[k]] = pose[k];
        }
    }
    SystemSnapshot {
        t,
        q,
        qd: (0..n).map(|d| world.velocity(DofId(d))).collect(),
        qdd: (0..n).map(|d| world.acceleration(DofId(d))).collect(),
        virtuals: world.virtual_symbols().iter().map(|s| world.values()[s.id() as usize]).collect(),
        sensors: sensors.clone(),
    }
}

type JointIdx = usize;

fn limit_excess(world: &WorldModel) -> f64 {
    world
        .dofs()
        .iter()
        .enumerate()
        .filter_map(|(d, dof)| {
            let (lb, ub) = dof.position_limits?;
            let q = world.position(DofId(d));
            Some((lb - q).max(q - ub).max(0.0))
        })
        .fold(0.0, f64::max)
}

/// Runs the control loop until a terminal node fires or the timeout elapses.
pub fn run(
    mut world: WorldModel,
    program: Program,
    config: &RunConfig,
    events: Vec<ScenarioEvent>,
    initial_sensors: Sensors,
) -> Result<RunOutput, ExecError> {
    program.validate()?;
    if !(config.timeout > 0.0) {
        return Err(ExecError::InvalidTimeout(config.timeout));
    }
    if !(config.noise.is_finite() && config.noise >= 0.0) {
        return Err(ExecError::InvalidNoise(config.noise));
    }
    for e in &events {
        if let Trigger::Node { path, .. } = &e.trigger {
            program.chart.find(path).ok_or_else(|| ExecError::UnknownNode(path.clone()))?;
        }
    }
    let mut lmpc = Lmpc::new(config.lmpc.clone())?;
    let dt = config.lmpc.dt;
    let n_dofs = world.dofs().len();
    let jerk_limits = lmpc.jerk_limits(&world)?;
    let bases: Vec<(JointIdx, [usize; 3])> = world
        .joints()
        .iter()
        .enumerate()
        .filter(|(_, j)| j.kind == JointKind::OmniBase)
        .map(|(i, j)| (i, [j.dofs[0].0, j.dofs[1].0, j.dofs[2].0]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sensors = initial_sensors;
    let mut chart = program.chart.clone();
    let mut gantt = GanttRecorder::new(&chart);
    let mut fired = vec![false; events.len()];
    let mut event_exprs: Vec<Option<Expr>> = vec![None; events.len()];
    let mut snapshots = Vec::new();
    let mut commands = Vec::new();
    let mut jerks = Vec::new();
    let mut solve_times = Vec::new();
    let mut fallback_cycles = 0;
    let mut max_limit_excess = limit_excess(&world);
    let mut qp_dump = None;
    let mut motions = BTreeMap::new();
    let mut monitor_exprs = BTreeMap::new();
    let mut started = BTreeMap::new();
    let mut cycle = 0usize;
    let (termination, terminal_node) = loop {
        let t = cycle as f64 * dt;
        if t >= config.timeout - 1e-9 {
            break (Termination::Timeout, None);
        }

        for (i, ev) in events.iter().enumerate() {
            if fired[i] {
                continue;
            }
            let due = match &ev.trigger {
                Trigger::At(at) => t >= at - 0.5 * dt,
                Trigger::Node { path, lifecycle } => chart.find(path).map(|id| chart.lifecycle(id) == *lifecycle).unwrap_or(false),
                Trigger::Expression { build, predicate } => {
                    if event_exprs[i].is_none() {
                        event_exprs[i] = Some(build(&world).map_err(|source| ExecError::Monitor {
                            node: format!("event #{i}"),
                            source,
                        })?);
                    }
                    predicate.holds(world.eval(event_exprs[i].as_ref().unwrap()))
                }
            };
            if !due {
                continue;
            }
            fired[i] = true;
            for eff in &ev.effects {
                match eff {
                    Effect::SetSensor { channel, value } => {
                        sensors.insert(channel.clone(), *value);
                    }
                    Effect::SetVirtual { symbol, value } => {
                        world.set_named(symbol, SymbolKind::Virtual, *value)?;
                    }
                    Effect::Perturb { dof, delta } => {
                        let id = world.dof_id(dof)?;
                        let (p, v, a) = (world.position(id), world.velocity(id), world.acceleration(id));
                        world.set_dof_state(id, p + delta, v, a);
                        world.refresh_limits();
                    }
                }
            }
        }

        let snap = snapshot(&world, &sensors, t, &bases);
        let mut rt = Runtime {
            world: &mut world,
            sensors: &sensors,
            program: &program,
            t,
            motions: std::mem::take(&mut motions),
            monitor_exprs: std::mem::take(&mut monitor_exprs),
            started: std::mem::take(&mut started),
            error: None,
        };
        let out = chart.tick(&mut rt);
        if let Some(e) = rt.error.take() {
            return Err(e);
        }
        gantt.record(&chart, t, t + dt);
        if let Some((kind, id)) = out.terminal {
            let term = match kind {
                Terminal::End => Termination::End,
                Terminal::Cancel => Termination::Cancel,
            };
            break (term, Some(chart.path(id)));
        }

        let mut rows = Vec::new();
        for id in &out.active_motions {
            let node = chart.node(*id).clone();
            rows.extend(rt.motion_rows(&node)?);
        }
        motions = std::mem::take(&mut rt.motions);
        monitor_exprs = std::mem::take(&mut rt.monitor_exprs);
        started = std::mem::take(&mut rt.started);
        drop(rt);

        let step = lmpc.step(&world, &rows)?;
        solve_times.push(step.solve_time.as_secs_f64());
        if step.mode != BoundMode::Nominal {
            fallback_cycles += 1;
        }
        let cmd = step.command;

        for d in 0..n_dofs {
            let id = DofId(d);
            let a = world.acceleration(id) + cmd.jerk[d] * dt;
            let v = cmd.velocity[d];
            let q = world.position(id) + v * dt;
            world.set_dof_state(id, q, v, if cmd.stopped { 0.0 } else { a });
        }
        world.refresh_limits();
        max_limit_excess = max_limit_excess.max(limit_excess(&world));
        world.fold_odometry();
        if config.noise > 0.0 {
            for d in 0..n_dofs {
                let id = DofId(d);
                let (p, v, a) = (world.position(id), world.velocity(id), world.acceleration(id));
                world.set_dof_state(id, p, v + rng.gen_range(-config.noise..=config.noise), a);
            }
        }
        snapshots.push(snap);
        commands.push(cmd.velocity);
        jerks.push(cmd.jerk);
        cycle += 1;

        if let Some(p) = step.failed_problem {
            log::error!("aborting run at t = {t:.3}: QP unsolvable under every bound relaxation");
            qp_dump = Some(qp_to_json(&p));
            break (Termination::Cancel, None);
        }
    };

    let t_end = if terminal_node.is_some() { (cycle + 1) as f64 * dt } else { cycle as f64 * dt };
    let trajectory = Trajectory {
        dt,
        dof_names: world.dofs().iter().map(|d| d.name.clone()).collect(),
        virtual_names: world.virtual_symbols().iter().map(|s| s.name().to_string()).collect(),
        planar_bases: bases.iter().map(|(_, idx)| *idx).collect(),
        final_state: snapshot(&world, &sensors, cycle as f64 * dt, &bases),
        snapshots,
        commands,
        jerks,
    };
    let smoothness = smoothness_report(&trajectory, &jerk_limits, dt);
    let report = RunReport {
        termination,
        terminal_node,
        cycles: trajectory.cycles(),
        t_end,
        dt,
        horizon: config.lmpc.horizon,
        jerk_limits,
        smoothness,
        solve_time: TimingStats::from_seconds(&solve_times),
        fallback_cycles,
        max_limit_excess,
    };
    Ok(RunOutput {
        trajectory,
        gantt: gantt.records(),
        report,
        qp_dump,
        world,
        chart,
    })
}

// --- built-in robots --------------------------------------------------------------------

pub const BUILTIN_ROBOTS: [&str; 5] = ["planar_3dof_arm", "serial_6dof_arm", "omni_base_arm", "diff_drive_base", "dual_6dof_arms"];

fn revolute(w: &mut WorldModel, name: &str, parent: LinkId, child: &str, axis: [f64; 3], xyz: [f64; 3], limits: DofLimits) -> LinkId {
    let c = w.add_link(child).expect("fresh link");
    w.add_joint(
        name,
        parent,
        c,
        JointSpec::Revolute {
            axis,
            origin: pose(xyz, [0.0; 3]),
            limits,
        },
    )
    .expect("valid joint");
    c
}

fn fixed(w: &mut WorldModel, name: &str, parent: LinkId, child: &str, origin: Matrix4<f64>) -> LinkId {
    let c = w.add_link(child).expect("fresh link");
    w.add_joint(name, parent, c, JointSpec::Fixed { origin }).expect("valid joint");
    c
}

/// Six revolute DOFs `{p}shoulder_pan .. {p}wrist_3`, links `{p}base .. {p}tool`.
fn six_dof_chain(w: &mut WorldModel, p: &str, parent: LinkId, origin: Matrix4<f64>) -> LinkId {
    let base = fixed(w, &format!("{p}base_mount"), parent, &format!("{p}base"), origin);
    let lim = |r: f64, v: f64| DofLimits::new(Some((-r, r)), v);
    let z = [0.0, 0.0, 1.0];
    let y = [0.0, 1.0, 0.0];
    let l1 = revolute(w, &format!("{p}shoulder_pan"), base, &format!("{p}shoulder"), z, [0.0, 0.0, 0.1], lim(6.2, 1.0));
    let l2 = revolute(w, &format!("{p}shoulder_lift"), l1, &format!("{p}upper_arm"), y, [0.0, 0.0, 0.09], lim(3.1, 1.0));
    let l3 = revolute(w, &format!("{p}elbow"), l2, &format!("{p}forearm"), y, [0.0, 0.0, 0.42], lim(3.0, 1.2));
    let l4 = revolute(w, &format!("{p}wrist_1"), l3, &format!("{p}wrist1"), y, [0.0, 0.0, 0.39], lim(6.2, 1.5));
    let l5 = revolute(w, &format!("{p}wrist_2"), l4, &format!("{p}wrist2"), z, [0.0, 0.0, 0.1], lim(6.2, 1.5));
    let l6 = revolute(w, &format!("{p}wrist_3"), l5, &format!("{p}wrist3"), y, [0.0, 0.0, 0.1], lim(6.2, 1.5));
    fixed(w, &format!("{p}tool_mount"), l6, &format!("{p}tool"), pose([0.0, 0.0, 0.08], [0.0; 3]))
}

/// Planar arm in the map x-y plane: DOFs `joint_1..joint_3`, links `base -> l1 -> l2 -> tool`.
pub fn planar_3dof_arm() -> WorldModel {
    let mut w = WorldModel::new("map");
    let root = w.root();
    let base = fixed(&mut w, "base_mount", root, "base", Matrix4::identity());
    let z = [0.0, 0.0, 1.0];
    let lim = DofLimits::new(Some((-2.8, 2.8)), 1.0);
    let l1 = revolute(&mut w, "joint_1", base, "l1", z, [0.0; 3], lim.clone());
    let l2 = revolute(&mut w, "joint_2", l1, "l2", z, [0.4, 0.0, 0.0], lim.clone());
    revolute(&mut w, "joint_3", l2, "tool", z, [0.3, 0.0, 0.0], lim);
    w
}

/// Six-DOF arm on a fixed base at the map origin: links `base .. tool`.
pub fn serial_6dof_arm() -> WorldModel {
    let mut w = WorldModel::new("map");
    let root = w.root();
    six_dof_chain(&mut w, "", root, Matrix4::identity());
    w
}

/// Omnidirectional base `base` (DOFs `base_x`, `base_y`, `base_yaw`) carrying a five-DOF arm
/// `arm_1..arm_5` from `torso` to `tool`.
pub fn omni_base_arm() -> WorldModel {
    let mut w = WorldModel::new("map");
    let root = w.root();
    let base = w.add_link("base").expect("fresh link");
    w.add_joint(
        "base",
        root,
        base,
        JointSpec::OmniBase {
            max_linear_velocity: 0.5,
            max_angular_velocity: 0.8,
        },
    )
    .expect("valid joint");
    let torso = fixed(&mut w, "torso_mount", base, "torso", pose([0.0, 0.0, 0.4], [0.0; 3]));
    let z = [0.0, 0.0, 1.0];
    let y = [0.0, 1.0, 0.0];
    let lim = |r: f64, v: f64| DofLimits::new(Some((-r, r)), v);
    let a1 = revolute(&mut w, "arm_1", torso, "arm_link_1", z, [0.1, 0.0, 0.3], lim(2.9, 1.0));
    let a2 = revolute(&mut w, "arm_2", a1, "arm_link_2", y, [0.0, 0.0, 0.05], lim(2.0, 1.0));
    let a3 = revolute(&mut w, "arm_3", a2, "arm_link_3", y, [0.0, 0.0, 0.35], lim(2.6, 1.0));
    let a4 = revolute(&mut w, "arm_4", a3, "arm_link_4", y, [0.0, 0.0, 0.3], lim(2.0, 1.5));
    let a5 = revolute(&mut w, "arm_5", a4, "arm_link_5", z, [0.0, 0.0, 0.08], lim(2.9, 1.5));
    fixed(&mut w, "tool_mount", a5, "tool", pose([0.0, 0.0, 0.1], [0.0; 3]));
    w
}

/// Differential-drive base: like the omni base but with `base_y` held at zero velocity.
/// Links `base`, `laser`.
pub fn diff_drive_base() -> WorldModel {
    let mut w = WorldModel::new("map");
    let root = w.root();
    let base = w.add_link("base").expect("fresh link");
    w.add_joint(
        "base",
        root,
        base,
        JointSpec::OmniBase {
            max_linear_velocity: 0.5,
            max_angular_velocity: 1.0,
        },
    )
    .expect("valid joint");
    let lateral = w.dof_id("base_y").expect("omni base DOF");
    w.add_zero_velocity_constraint(lateral);
    fixed(&mut w, "laser_mount", base, "laser", pose([0.2, 0.0, 0.3], [0.0; 3]));
    w
}

/// Two six-DOF arms on a shared `torso`: prefixes `left_` and `right_`.
pub fn dual_6dof_arms() -> WorldModel {
    let mut w = WorldModel::new("map");
    let root = w.root();
    let torso = fixed(&mut w, "torso_mount", root, "torso", pose([0.0, 0.0, 0.8], [0.0; 3]));
    six_dof_chain(&mut w, "left_", torso, pose([0.0, 0.3, 0.0], [-0.5, 0.0, 0.0]));
    six_dof_chain(&mut w, "right_", torso, pose([0.0, -0.3, 0.0], [0.5, 0.0, 0.0]));
    w
}

pub fn builtin_robot(name: &str) -> Option<WorldModel> {
    Some(match name {
        "planar_3dof_arm" => planar_3dof_arm(),
        "serial_6dof_arm" => serial_6dof_arm(),
        "omni_base_arm" => omni_base_arm(),
        "diff_drive_base" => diff_drive_base(),
        "dual_6dof_arms" => dual_6dof_arms(),
        _ => return None,
    })
}

pub fn builtin_robots() -> Vec<(&'static str, WorldModel)> {
    BUILTIN_ROBOTS.iter().map(|n| (*n, builtin_robot(n).expect("listed robot"))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statechart::{Condition, NodeSpec};
    use crate::taskfn::joint_goal_task;

    fn goal_program(target: f64) -> Program {
        let chart = Statechart::new(vec![NodeSpec::motion("Go", 0), NodeSpec::end("Stop").start(Condition::node("Go"))]).unwrap();
        Program {
            chart,
            motions: vec![MotionSpec::new(Arc::new(move |w: &WorldModel| {
                Ok(vec![joint_goal_task(w, w.dof_id("joint_1")?, target, 1.0)?])
            }))],
            monitors: vec![],
        }
    }

    #[test]
    fn robots_have_documented_shapes() {
        let p = planar_3dof_arm();
        assert_eq!(p.dofs().len(), 3);
        let tool = p.link("tool").unwrap();
        let chain: Vec<&str> = std::iter::successors(Some(tool), |l| p.parent_link(*l)).map(|l| p.link_name(l)).collect();
        assert_eq!(chain, ["tool", "l2", "l1", "base", "map"]);
        let o = omni_base_arm();
        let fk = o.fk_expr_by_name("map", "tool").unwrap();
        let syms = fk.get(0, 3).free_symbols();
        for n in ["base_x", "base_yaw", "base_x_meas", "arm_2"] {
            assert!(syms.iter().any(|s| s.name() == n), "{n}");
        }
        let d = dual_6dof_arms();
        assert_eq!(d.dofs().len(), 12);
        let l = d.link("left_tool").unwrap();
        let r = d.link("right_tool").unwrap();
        assert!(!d.is_in_subtree(l, d.link("right_base").unwrap()));
        assert!(!d.is_in_subtree(r, d.link("left_base").unwrap()));
        assert_eq!(diff_drive_base().zero_velocity_dofs().len(), 1);
    }

    #[test]
    fn goal_at_current_state_ends_at_once() {
        let out = run(planar_3dof_arm(), goal_program(0.0), &RunConfig::default(), vec![], Sensors::new()).unwrap();
        assert_eq!(out.report.termination, Termination::End);
        assert!(out.trajectory.commands.iter().flatten().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn joint_goal_is_reached_smoothly() {
        let out = run(planar_3dof_arm(), goal_program(0.5), &RunConfig::default(), vec![], Sensors::new()).unwrap();
        assert_eq!(out.report.termination, Termination::End);
        assert!((out.world.position(DofId(0)) - 0.5).abs() < 2e-3);
        assert!(out.report.smoothness.violations.is_empty());
        assert_eq!(out.report.fallback_cycles, 0);
    }

    #[test]
    fn timeout_keeps_logs() {
        let cfg = RunConfig {
            timeout: 0.2,
            ..RunConfig::default()
        };
        let out = run(planar_3dof_arm(), goal_program(2.0), &cfg, vec![], Sensors::new()).unwrap();
        assert_eq!(out.report.termination, Termination::Timeout);
        assert_eq!(out.trajectory.cycles(), 10);
    }

    #[test]
    fn velocity_step_is_flagged() {
        let mut out = run(planar_3dof_arm(), goal_program(0.3), &RunConfig::default(), vec![], Sensors::new()).unwrap();
        assert!(out.report.smoothness.violations.is_empty());
        out.trajectory.commands[5][1] += 0.5;
        let r = smoothness_report(&out.trajectory, &out.report.jerk_limits, out.trajectory.dt);
        assert!(r.violations.iter().any(|v| v.cycle == 5 && v.dof == "joint_2"));
    }

    #[test]
    fn events_drive_sensor_monitors() {
        let chart = Statechart::new(vec![NodeSpec::monitor("Flag?", 0), NodeSpec::end("Stop").start(Condition::node("Flag?"))]).unwrap();
        let program = Program {
            chart,
            motions: vec![],
            monitors: vec![MonitorSpec::Sensor {
                channel: "flag".into(),
                predicate: None,
            }],
        };
        let events = vec![ScenarioEvent {
            trigger: Trigger::At(0.5),
            effects: vec![Effect::SetSensor {
                channel: "flag".into(),
                value: SensorValue::Ternary(Ternary::True),
            }],
        }];
        let out = run(planar_3dof_arm(), program, &RunConfig::default(), events, Sensors::new()).unwrap();
        assert_eq!(out.report.termination, Termination::End);
        assert_eq!(out.trajectory.cycles(), 25);
    }
}
