//! Motion statecharts compiled into a jerk-bounded linear MPC.
//!
//! The crate is organised bottom-up:
//!
//! - [`expr`]: symbolic expression DAG with forward-mode differentiation.
//! - [`world`]: kinematic tree of links, joints and DOFs spanning robot and environment.
//! - [`taskfn`]: task spaces and task functions built on forward kinematics.
//! - [`statechart`]: dual-FSM motion statechart engine.
//! - [`lmpc`]: quadratic program construction, the QP solver and jerk-limit derivation.
//! - [`executive`]: closed control loop with a kinematic simulator and built-in robots.
//! - [`scenario`]: declarative scenario files, bundled scenarios and output artifacts.

pub mod executive;
pub mod expr;
pub mod gantt_svg;
pub mod lmpc;
pub mod scenario;
pub mod statechart;
pub mod taskfn;
pub mod world;

pub use expr::{Expr, ExprMatrix, Symbol, SymbolKind};
pub use world::WorldModel;
