//! Kinematic world model: a rooted tree of links and joints covering both the
//! robot and its articulated environment.
//!
//! Joints own zero or more DOFs and optionally virtual (non-actuated) symbols.
//! Environment DOFs such as a door hinge are controllable like robot joints.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Matrix4, Rotation3, Translation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::expr::{DofSymbols, Expr, ExprError, ExprMatrix, Symbol, SymbolKind, SymbolRegistry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("link `{0}` already exists")]
    DuplicateLink(String),
    #[error("joint `{0}` already exists")]
    DuplicateJoint(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("unknown DOF `{0}`")]
    UnknownDof(String),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("link `{0}` already has a parent joint")]
    AlreadyParented(String),
    #[error("link `{0}` is the root and cannot be re-parented")]
    RootLink(String),
    #[error("attaching `{link}` below `{parent}` would create a cycle")]
    Cycle { link: String, parent: String },
    #[error("joint `{0}` owns DOFs and cannot be replaced by a fixed attachment")]
    ActuatedAttachment(String),
    #[error("invalid limits for `{0}`: {1}")]
    InvalidLimits(String, String),
    #[error(transparent)]
    Symbol(#[from] ExprError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JointId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DofId(pub usize);

#[derive(Clone, Debug)]
pub struct Link {
    pub id: LinkId,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JerkLimit {
    /// Filled in by the controller from the velocity limit and horizon.
    Derived,
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct Dof {
    pub name: String,
    pub symbols: DofSymbols,
    pub position_limits: Option<(f64, f64)>,
    pub velocity_limit: f64,
    pub jerk_limit: JerkLimit,
    /// Unlimited revolute DOF; goals wrap through +/- pi.
    pub continuous: bool,
    pub joint: JointId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum JointKind {
    Fixed,
    Revolute { axis: [f64; 3] },
    Prismatic { axis: [f64; 3] },
    OmniBase,
}

#[derive(Clone, Debug)]
pub struct Joint {
    pub name: String,
    pub parent: LinkId,
    pub child: LinkId,
    pub kind: JointKind,
    pub transform: ExprMatrix,
    pub dofs: Vec<DofId>,
    pub virtuals: Vec<Symbol>,
}

/// Limits for a single-DOF joint.
#[derive(Clone, Debug, PartialEq)]
pub struct DofLimits {
    pub position: Option<(f64, f64)>,
    pub velocity: f64,
}

impl DofLimits {
    pub fn new(position: Option<(f64, f64)>, velocity: f64) -> Self {
        Self { position, velocity }
    }
}

#[derive(Clone, Debug)]
pub enum JointSpec {
    Fixed {
        origin: Matrix4<f64>,
    },
    Revolute {
        axis: [f64; 3],
        origin: Matrix4<f64>,
        limits: DofLimits,
    },
    Prismatic {
        axis: [f64; 3],
        origin: Matrix4<f64>,
        limits: DofLimits,
    },
    /// Planar base: DOFs `<joint>_x`, `<joint>_y`, `<joint>_yaw` are displacements in the
    /// base frame; virtual symbols `<joint>_{x,y,yaw}_meas` carry the measured map pose.
    OmniBase {
        max_linear_velocity: f64,
        max_angular_velocity: f64,
    },
}

/// Builds a constant homogeneous transform from a translation and roll-pitch-yaw angles.
pub fn pose(xyz: [f64; 3], rpy: [f64; 3]) -> Matrix4<f64> {
    let rot = Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]);
    Translation3::new(xyz[0], xyz[1], xyz[2]).to_homogeneous() * rot.to_homogeneous()
}

/// Result of a state update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateReport {
    /// DOF positions outside their hard limits after the update.
    pub limit_violations: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    registry: SymbolRegistry,
    links: Vec<Link>,
    link_by_name: HashMap<String, LinkId>,
    joints: Vec<Joint>,
    joint_by_name: HashMap<String, JointId>,
    parent_joint: Vec<Option<JointId>>,
    dofs: Vec<Dof>,
    dof_by_name: HashMap<String, DofId>,
    values: Vec<f64>,
    root: LinkId,
    limit_flags: BTreeSet<DofId>,
    zero_velocity_dofs: Vec<DofId>,
    revision: u64,
}

impl WorldModel {
    pub fn new(root_name: &str) -> Self {
        let mut world = WorldModel {
            registry: SymbolRegistry::new(),
            links: Vec::new(),
            link_by_name: HashMap::new(),
            joints: Vec::new(),
            joint_by_name: HashMap::new(),
            parent_joint: Vec::new(),
            dofs: Vec::new(),
            dof_by_name: HashMap::new(),
            values: Vec::new(),
            root: LinkId(0),
            limit_flags: BTreeSet::new(),
            zero_velocity_dofs: Vec::new(),
            revision: 0,
        };
        world.root = world.add_link(root_name).expect("fresh world");
        world
    }

    pub fn root(&self) -> LinkId {
        self.root
    }

    pub fn registry(&self) -> &SymbolRegistry {
        &self.registry
    }

    /// Bumped by every structural change (new joints, attach, detach).
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn add_link(&mut self, name: &str) -> Result<LinkId, WorldError> {
        if self.link_by_name.contains_key(name) {
            return Err(WorldError::DuplicateLink(name.to_string()));
        }
        let id = LinkId(self.links.len());
        self.links.push(Link {
            id,
            name: name.to_string(),
        });
        self.link_by_name.insert(name.to_string(), id);
        self.parent_joint.push(None);
        self.revision += 1;
        Ok(id)
    }

    pub fn link(&self, name: &str) -> Result<LinkId, WorldError> {
        self.link_by_name
            .get(name)
            .copied()
            .ok_or_else(|| WorldError::UnknownLink(name.to_string()))
    }

    pub fn link_name(&self, id: LinkId) -> &str {
        &self.links[id.0].name
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint(&self, id: JointId) -> &Joint {
        &self.joints[id.0]
    }

    pub fn joint_by_name(&self, name: &str) -> Option<&Joint> {
        self.joint_by_name.get(name).map(|id| &self.joints[id.0])
    }

    pub fn parent_joint(&self, link: LinkId) -> Option<JointId> {
        self.parent_joint[link.0]
    }

    /// DOFs in declaration order.
    pub fn dofs(&self) -> &[Dof] {
        &self.dofs
    }

    pub fn dof(&self, id: DofId) -> &Dof {
        &self.dofs[id.0]
    }

    pub fn dof_id(&self, name: &str) -> Result<DofId, WorldError> {
        self.dof_by_name
            .get(name)
            .copied()
            .ok_or_else(|| WorldError::UnknownDof(name.to_string()))
    }

    pub fn dof_by_name(&self, name: &str) -> Result<&Dof, WorldError> {
        Ok(&self.dofs[self.dof_id(name)?.0])
    }

    /// Lateral-velocity style constraints contributed by the robot description.
    pub fn zero_velocity_dofs(&self) -> &[DofId] {
        &self.zero_velocity_dofs
    }

    pub fn add_zero_velocity_constraint(&mut self, dof: DofId) {
        if !self.zero_velocity_dofs.contains(&dof) {
            self.zero_velocity_dofs.push(dof);
        }
    }

    fn register_value_slots(&mut self) {
        self.values.resize(self.registry.len(), 0.0);
    }

    fn new_dof(&mut self, name: &str, limits: &DofLimits, continuous: bool, joint: JointId) -> Result<DofId, WorldError> {
        if !(limits.velocity > 0.0) {
            return Err(WorldError::InvalidLimits(name.to_string(), "velocity limit must be > 0".into()));
        }
        if let Some((lb, ub)) = limits.position {
            if !(lb < ub) {
                return Err(WorldError::InvalidLimits(name.to_string(), format!("{lb} >= {ub}")));
            }
        }
        let symbols = self.registry.make_dof(name)?;
        let id = DofId(self.dofs.len());
        self.dofs.push(Dof {
            name: name.to_string(),
            symbols,
            position_limits: limits.position,
            velocity_limit: limits.velocity,
            jerk_limit: JerkLimit::Derived,
            continuous,
            joint,
        });
        self.dof_by_name.insert(name.to_string(), id);
        self.register_value_slots();
        Ok(id)
    }

    /// Adds a joint between two existing links. The child must not have a parent yet.
    pub fn add_joint(&mut self, name: &str, parent: LinkId, child: LinkId, spec: JointSpec) -> Result<JointId, WorldError> {
        if self.joint_by_name.contains_key(name) {
            return Err(WorldError::DuplicateJoint(name.to_string()));
        }
        if child == self.root {
            return Err(WorldError::RootLink(self.link_name(child).to_string()));
        }
        if self.parent_joint[child.0].is_some() {
            return Err(WorldError::AlreadyParented(self.link_name(child).to_string()));
        }
        if self.is_in_subtree(parent, child) {
            return Err(WorldError::Cycle {
                link: self.link_name(child).to_string(),
                parent: self.link_name(parent).to_string(),
            });
        }
        let id = JointId(self.joints.len());
        let (kind, transform, dofs, virtuals) = match spec {
            JointSpec::Fixed { origin } => (JointKind::Fixed, ExprMatrix::from_transform(&origin), vec![], vec![]),
            JointSpec::Revolute { axis, origin, limits } => {
                let dof = self.new_dof(name, &limits, limits.position.is_none(), id)?;
                let q = Expr::symbol(&self.dofs[dof.0].symbols.position);
                let t = ExprMatrix::from_transform(&origin).matmul(&ExprMatrix::rotation_about(axis, &q));
                (JointKind::Revolute { axis }, t, vec![dof], vec![])
            }
            JointSpec::Prismatic { axis, origin, limits } => {
                let dof = self.new_dof(name, &limits, false, id)?;
                let q = Expr::symbol(&self.dofs[dof.0].symbols.position);
                let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
                let slide = ExprMatrix::translation(&q * (axis[0] / n), &q * (axis[1] / n), &q * (axis[2] / n));
                let t = ExprMatrix::from_transform(&origin).matmul(&slide);
                (JointKind::Prismatic { axis }, t, vec![dof], vec![])
            }
            JointSpec::OmniBase {
                max_linear_velocity,
                max_angular_velocity,
            } => {
                let lin = DofLimits::new(None, max_linear_velocity);
                let ang = DofLimits::new(None, max_angular_velocity);
                let dx = self.new_dof(&format!("{name}_x"), &lin, false, id)?;
                let dy = self.new_dof(&format!("{name}_y"), &lin, false, id)?;
                let dyaw = self.new_dof(&format!("{name}_yaw"), &ang, true, id)?;
                let mx = self.registry.make_virtual(&format!("{name}_x_meas"))?;
                let my = self.registry.make_virtual(&format!("{name}_y_meas"))?;
                let myaw = self.registry.make_virtual(&format!("{name}_yaw_meas"))?;
                self.register_value_slots();
                let sym = |d: DofId, s: &Self| Expr::symbol(&s.dofs[d.0].symbols.position);
                let measured = ExprMatrix::translation(Expr::symbol(&mx), Expr::symbol(&my), Expr::zero())
                    .matmul(&ExprMatrix::rotation_z(&Expr::symbol(&myaw)));
                // Displacement DOFs live in the base frame, so the measured yaw rotates them into the map.
                let displacement = ExprMatrix::translation(sym(dx, self), sym(dy, self), Expr::zero())
                    .matmul(&ExprMatrix::rotation_z(&sym(dyaw, self)));
                (JointKind::OmniBase, measured.matmul(&displacement), vec![dx, dy, dyaw], vec![mx, my, myaw])
            }
        };
        self.joints.push(Joint {
            name: name.to_string(),
            parent,
            child,
            kind,
            transform,
            dofs,
            virtuals,
        });
        self.joint_by_name.insert(name.to_string(), id);
        self.parent_joint[child.0] = Some(id);
        self.revision += 1;
        Ok(id)
    }

    pub fn parent_link(&self, link: LinkId) -> Option<LinkId> {
        self.parent_joint[link.0].map(|j| self.joints[j.0].parent)
    }

    /// Whether `link` lies in the subtree rooted at `subtree_root` (inclusive).
    pub fn is_in_subtree(&self, link: LinkId, subtree_root: LinkId) -> bool {
        let mut cur = Some(link);
        let mut guard = 0;
        while let Some(l) = cur {
            if l == subtree_root {
                return true;
            }
            cur = self.parent_link(l);
            guard += 1;
            if guard > self.links.len() {
                break;
            }
        }
        false
    }

    /// Links from `link` up to (and including) the root.
    fn path_to_root(&self, link: LinkId) -> Vec<LinkId> {
        let mut path = vec![link];
        let mut cur = link;
        while let Some(p) = self.parent_link(cur) {
            path.push(p);
            cur = p;
        }
        path
    }

    /// Transform of `link` expressed in its ancestor `ancestor`.
    fn chain_from_ancestor(&self, ancestor: LinkId, link: LinkId) -> ExprMatrix {
        let mut joints = Vec::new();
        let mut cur = link;
        while cur != ancestor {
            let j = self.parent_joint[cur.0].expect("ancestor is on the path to root");
            joints.push(j);
            cur = self.joints[j.0].parent;
        }
        let mut t = ExprMatrix::identity(4);
        for j in joints.into_iter().rev() {
            t = t.matmul(&self.joints[j.0].transform);
        }
        t
    }

    /// Pose of `b` expressed in frame `a`, as a symbolic 4x4 transform.
    pub fn fk_expr(&self, a: LinkId, b: LinkId) -> ExprMatrix {
        if a == b {
            return ExprMatrix::identity(4);
        }
        let up_a = self.path_to_root(a);
        let up_b = self.path_to_root(b);
        let on_b: BTreeSet<LinkId> = up_b.iter().copied().collect();
        let lca = *up_a.iter().find(|l| on_b.contains(l)).expect("single rooted tree");
        let lca_a = self.chain_from_ancestor(lca, a);
        let lca_b = self.chain_from_ancestor(lca, b);
        if lca == a {
            lca_b
        } else if lca == b {
            lca_a.inverse_transform()
        } else {
            lca_a.inverse_transform().matmul(&lca_b)
        }
    }

    pub fn fk_expr_by_name(&self, a: &str, b: &str) -> Result<ExprMatrix, WorldError> {
        Ok(self.fk_expr(self.link(a)?, self.link(b)?))
    }

    /// Numeric pose of `b` in frame `a` at the current state.
    pub fn fk(&self, a: LinkId, b: LinkId) -> Matrix4<f64> {
        let values = self.eval_matrix(&self.fk_expr(a, b));
        Matrix4::from_row_slice(&values)
    }

    /// Re-parents `link` below `new_parent` with a fixed transform.
    pub fn attach(&mut self, link: LinkId, new_parent: LinkId, transform: Matrix4<f64>) -> Result<(), WorldError> {
        if link == self.root {
            return Err(WorldError::RootLink(self.link_name(link).to_string()));
        }
        if self.is_in_subtree(new_parent, link) {
            return Err(WorldError::Cycle {
                link: self.link_name(link).to_string(),
                parent: self.link_name(new_parent).to_string(),
            });
        }
        match self.parent_joint[link.0] {
            Some(j) => {
                let joint = &mut self.joints[j.0];
                if !joint.dofs.is_empty() {
                    return Err(WorldError::ActuatedAttachment(joint.name.clone()));
                }
                joint.parent = new_parent;
                joint.kind = JointKind::Fixed;
                joint.transform = ExprMatrix::from_transform(&transform);
                joint.virtuals.clear();
            }
            None => {
                let name = format!("{}_attachment", self.link_name(link));
                self.add_joint(&name, new_parent, link, JointSpec::Fixed { origin: transform })?;
            }
        }
        self.revision += 1;
        Ok(())
    }

    /// Re-parents `link` to the root, preserving its current world pose. Returns that pose.
    pub fn detach(&mut self, link: LinkId) -> Result<Matrix4<f64>, WorldError> {
        let root = self.root;
        let pose = self.fk(root, link);
        self.attach(link, root, pose)?;
        Ok(pose)
    }

    // --- state ------------------------------------------------------------------------

    fn check_symbol(&self, symbol: &Symbol) -> Result<(), WorldError> {
        match self.registry.by_id(symbol.id()) {
            Some(s) if s.name() == symbol.name() && s.kind() == symbol.kind() => Ok(()),
            _ => Err(WorldError::UnknownSymbol(symbol.to_string())),
        }
    }

    pub fn value(&self, symbol: &Symbol) -> Result<f64, WorldError> {
        self.check_symbol(symbol)?;
        Ok(self.values[symbol.id() as usize])
    }

    /// Applies a partial update. Positions past hard limits are stored and reported.
    pub fn set_state(&mut self, updates: &[(&Symbol, f64)]) -> Result<StateReport, WorldError> {
        for (s, _) in updates {
            self.check_symbol(s)?;
        }
        for (s, v) in updates {
            self.values[s.id() as usize] = *v;
        }
        self.refresh_limit_flags();
        Ok(StateReport {
            limit_violations: self.limit_flags.iter().map(|d| self.dofs[d.0].name.clone()).collect(),
        })
    }

    /// Looks up a symbol by name and kind and sets it.
    pub fn set_named(&mut self, name: &str, kind: SymbolKind, value: f64) -> Result<StateReport, WorldError> {
        let s = self
            .registry
            .get(name, kind)
            .cloned()
            .ok_or_else(|| WorldError::UnknownSymbol(name.to_string()))?;
        self.set_state(&[(&s, value)])
    }

    pub fn get_named(&self, name: &str, kind: SymbolKind) -> Result<f64, WorldError> {
        let s = self
            .registry
            .get(name, kind)
            .ok_or_else(|| WorldError::UnknownSymbol(name.to_string()))?;
        Ok(self.values[s.id() as usize])
    }

    fn refresh_limit_flags(&mut self) {
        self.limit_flags.clear();
        for (i, d) in self.dofs.iter().enumerate() {
            if let Some((lb, ub)) = d.position_limits {
                let q = self.values[d.symbols.position.id() as usize];
                if q < lb || q > ub {
                    self.limit_flags.insert(DofId(i));
                }
            }
        }
    }

    pub fn limit_violations(&self) -> Vec<&str> {
        self.limit_flags.iter().map(|d| self.dofs[d.0].name.as_str()).collect()
    }

    pub fn position(&self, dof: DofId) -> f64 {
        self.values[self.dofs[dof.0].symbols.position.id() as usize]
    }

    pub fn velocity(&self, dof: DofId) -> f64 {
        self.values[self.dofs[dof.0].symbols.velocity.id() as usize]
    }

    pub fn acceleration(&self, dof: DofId) -> f64 {
        self.values[self.dofs[dof.0].symbols.acceleration.id() as usize]
    }

    pub(crate) fn set_dof_state(&mut self, dof: DofId, position: f64, velocity: f64, acceleration: f64) {
        let s = &self.dofs[dof.0].symbols;
        let (p, v, a) = (s.position.id() as usize, s.velocity.id() as usize, s.acceleration.id() as usize);
        self.values[p] = position;
        self.values[v] = velocity;
        self.values[a] = acceleration;
    }

    pub(crate) fn refresh_limits(&mut self) {
        self.refresh_limit_flags();
    }

    /// Raw value table indexed by symbol id.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_for(&self, symbols: &[Symbol]) -> Vec<f64> {
        symbols.iter().map(|s| self.values[s.id() as usize]).collect()
    }

    /// Position and virtual symbols, in id order: the inputs of every task expression.
    pub fn input_symbols(&self) -> Vec<Symbol> {
        self.registry
            .iter()
            .filter(|s| matches!(s.kind(), SymbolKind::DofPosition | SymbolKind::Virtual))
            .cloned()
            .collect()
    }

    pub fn virtual_symbols(&self) -> Vec<Symbol> {
        self.registry
            .iter()
            .filter(|s| s.kind() == SymbolKind::Virtual)
            .cloned()
            .collect()
    }

    pub fn eval(&self, e: &Expr) -> f64 {
        e.eval_with(&|s: &Symbol| self.values.get(s.id() as usize).copied())
            .expect("expression symbols belong to this world")
    }

    pub fn eval_matrix(&self, m: &ExprMatrix) -> Vec<f64> {
        m.eval_with(&|s: &Symbol| self.values.get(s.id() as usize).copied())
            .expect("expression symbols belong to this world")
    }

    /// Folds base displacements into the measured poses of every omni base and zeroes them.
    ///
    /// Returns the new measured pose `(x, y, yaw)` per omni-base joint.
    pub fn fold_odometry(&mut self) -> Vec<(String, [f64; 3])> {
        let mut out = Vec::new();
        for j in 0..self.joints.len() {
            if self.joints[j].kind != JointKind::OmniBase {
                continue;
            }
            let joint = &self.joints[j];
            let [dx, dy, dyaw] = [joint.dofs[0], joint.dofs[1], joint.dofs[2]];
            let [mx, my, myaw] = [
                joint.virtuals[0].id() as usize,
                joint.virtuals[1].id() as usize,
                joint.virtuals[2].id() as usize,
            ];
            let (ddx, ddy, ddyaw) = (self.position(dx), self.position(dy), self.position(dyaw));
            let yaw = self.values[myaw];
            let (s, c) = yaw.sin_cos();
            self.values[mx] += c * ddx - s * ddy;
            self.values[my] += s * ddx + c * ddy;
            self.values[myaw] = yaw + ddyaw;
            for d in [dx, dy, dyaw] {
                let id = self.dofs[d.0].symbols.position.id() as usize;
                self.values[id] = 0.0;
            }
            out.push((joint.name.clone(), [self.values[mx], self.values[my], self.values[myaw]]));
        }
        out
    }

    /// Sets the measured map pose of an omni-base joint.
    pub fn set_base_pose(&mut self, joint: &str, x: f64, y: f64, yaw: f64) -> Result<(), WorldError> {
        let j = self
            .joint_by_name(joint)
            .filter(|j| j.kind == JointKind::OmniBase)
            .ok_or_else(|| WorldError::UnknownSymbol(format!("{joint}_x_meas")))?;
        let ids: Vec<usize> = j.virtuals.iter().map(|s| s.id() as usize).collect();
        self.values[ids[0]] = x;
        self.values[ids[1]] = y;
        self.values[ids[2]] = yaw;
        Ok(())
    }
}

/// Rotation vector (axis times angle) of a rotation matrix.
///
/// Near an angle of pi the axis sign is chosen so that its largest-magnitude
/// component is positive.
pub fn rotation_vector(r: &nalgebra::Matrix3<f64>) -> Vector3<f64> {
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = w.norm();
    let angle = sin.atan2(cos);
    if angle < 1e-12 {
        return w;
    }
    if std::f64::consts::PI - angle > 1e-6 {
        return w * (angle / sin);
    }
    // Axis from the symmetric part: (R + R^T)/2 = cos I + (1 - cos) a a^T.
    let s = (r + r.transpose()) * 0.5;
    let mut aat = s - nalgebra::Matrix3::identity() * cos;
    aat /= 1.0 - cos;
    let k = (0..3)
        .max_by(|&i, &j| aat[(i, i)].partial_cmp(&aat[(j, j)]).unwrap())
        .unwrap();
    let mut axis = aat.column(k).into_owned() / aat[(k, k)].max(1e-300).sqrt();
    axis /= axis.norm();
    let big = (0..3)
        .max_by(|&i, &j| axis[i].abs().partial_cmp(&axis[j].abs()).unwrap())
        .unwrap();
    if axis[big] < 0.0 {
        axis = -axis;
    }
    axis * angle
}

pub fn matrix_from_quaternion(q: &UnitQuaternion<f64>, t: [f64; 3]) -> Matrix4<f64> {
    Translation3::new(t[0], t[1], t[2]).to_homogeneous() * q.to_homogeneous()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn fridge_world() -> WorldModel {
        let mut w = WorldModel::new("map");
        let fridge = w.add_link("Fridge").unwrap();
        let door = w.add_link("Door").unwrap();
        let handle = w.add_link("Handle").unwrap();
        let root = w.root();
        w.add_joint("Fridge Attachment", root, fridge, JointSpec::Fixed { origin: Matrix4::identity() })
            .unwrap();
        w.add_joint(
            "Hinge",
            fridge,
            door,
            JointSpec::Revolute {
                axis: [0.0, 0.0, 1.0],
                origin: pose([1.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
                limits: DofLimits::new(Some((0.0, 1.6)), 0.5),
            },
        )
        .unwrap();
        w.add_joint(
            "Handle Joint",
            door,
            handle,
            JointSpec::Fixed {
                origin: pose([0.0, -0.5, 0.3], [0.0, 0.0, 0.0]),
            },
        )
        .unwrap();
        w
    }

    #[test]
    fn duplicate_links_are_rejected() {
        let mut w = fridge_world();
        assert!(matches!(w.add_link("Handle"), Err(WorldError::DuplicateLink(_))));
        for i in 0..1000 {
            w.add_link(&format!("l{i}")).unwrap();
        }
        for i in 0..1000 {
            assert!(w.link(&format!("l{i}")).is_ok());
        }
    }

    #[test]
    fn fixed_identity_and_revolute_transforms() {
        let mut w = fridge_world();
        let fridge = w.link("Fridge").unwrap();
        assert_eq!(w.fk(w.root(), fridge), Matrix4::identity());
        w.set_named("Hinge", SymbolKind::DofPosition, PI / 2.0).unwrap();
        let door = w.link("Door").unwrap();
        let t = w.fk(fridge, door);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), PI / 2.0);
        for r in 0..3 {
            for c in 0..3 {
                assert!((t[(r, c)] - rz[(r, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fk_identity_and_inverse_composition() {
        let mut w = fridge_world();
        w.set_named("Hinge", SymbolKind::DofPosition, 0.7).unwrap();
        let h = w.link("Handle").unwrap();
        let f = w.link("Fridge").unwrap();
        assert_eq!(w.fk(h, h), Matrix4::identity());
        let prod = w.fk(h, f) * w.fk(f, h);
        assert!((prod - Matrix4::identity()).abs().max() < 1e-10);
    }

    #[test]
    fn omni_base_measured_pose() {
        let mut w = WorldModel::new("map");
        let base = w.add_link("Base Link").unwrap();
        let root = w.root();
        w.add_joint(
            "Odometry",
            root,
            base,
            JointSpec::OmniBase {
                max_linear_velocity: 0.5,
                max_angular_velocity: 1.0,
            },
        )
        .unwrap();
        assert_eq!(w.dofs().len(), 3);
        w.set_base_pose("Odometry", 1.0, 2.0, PI).unwrap();
        let t = w.fk(root, base);
        assert!((t[(0, 3)] - 1.0).abs() < 1e-12);
        assert!((t[(1, 3)] - 2.0).abs() < 1e-12);
        assert!((t[(1, 0)].atan2(t[(0, 0)]).abs() - PI).abs() < 1e-12);
        // A forward displacement in the base frame moves along -x of the map when yaw = pi.
        w.set_named("Odometry_x", SymbolKind::DofPosition, 0.5).unwrap();
        let t = w.fk(root, base);
        assert!((t[(0, 3)] - 0.5).abs() < 1e-12);
        w.fold_odometry();
        assert_eq!(w.get_named("Odometry_x", SymbolKind::DofPosition).unwrap(), 0.0);
        assert!((w.fk(root, base)[(0, 3)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attach_detach_and_cycles() {
        let mut w = fridge_world();
        let root = w.root();
        let obj = w.add_link("cup").unwrap();
        let handle = w.link("Handle").unwrap();
        w.add_joint("cup_joint", root, obj, JointSpec::Fixed { origin: pose([2.0, 0.0, 1.0], [0.0, 0.0, 0.3]) })
            .unwrap();
        let grip = pose([0.0, 0.0, 0.1], [0.1, 0.0, 0.0]);
        w.attach(obj, handle, grip).unwrap();
        assert!((w.fk(handle, obj) - grip).abs().max() < 1e-12);
        w.set_named("Hinge", SymbolKind::DofPosition, 0.4).unwrap();
        let before = w.fk(root, obj);
        w.detach(obj).unwrap();
        assert!((w.fk(root, obj) - before).abs().max() < 1e-9);
        let fridge = w.link("Fridge").unwrap();
        assert!(matches!(w.attach(fridge, handle, grip), Err(WorldError::Cycle { .. })));
        let door = w.link("Door").unwrap();
        assert!(matches!(w.attach(door, root, grip), Err(WorldError::ActuatedAttachment(_))));
    }

    #[test]
    fn state_updates_and_limit_flags() {
        let mut w = fridge_world();
        let hinge = w.dof_by_name("Hinge").unwrap().symbols.position.clone();
        w.set_state(&[(&hinge, 0.3)]).unwrap();
        assert_eq!(w.value(&hinge).unwrap(), 0.3);
        let mut other = SymbolRegistry::new();
        let stranger = other.make_virtual("nope").unwrap();
        assert!(w.set_state(&[(&stranger, 1.0)]).is_err());
        let report = w.set_state(&[(&hinge, 2.0)]).unwrap();
        assert_eq!(w.value(&hinge).unwrap(), 2.0);
        assert_eq!(report.limit_violations, vec!["Hinge".to_string()]);
    }

    #[test]
    fn child_cannot_be_parented_twice() {
        let mut w = fridge_world();
        let root = w.root();
        let door = w.link("Door").unwrap();
        let err = w.add_joint("again", root, door, JointSpec::Fixed { origin: Matrix4::identity() });
        assert!(matches!(err, Err(WorldError::AlreadyParented(_))));
    }

    #[test]
    fn rotation_vector_of_quarter_turn_and_half_turn() {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), PI / 2.0).into_inner();
        let v = rotation_vector(&r);
        assert!((v - Vector3::new(0.0, 0.0, PI / 2.0)).norm() < 1e-9);
        let r = Rotation3::from_axis_angle(&Vector3::y_axis(), PI).into_inner();
        let v = rotation_vector(&r);
        assert!((v - Vector3::new(0.0, PI, 0.0)).norm() < 1e-9);
    }
}
