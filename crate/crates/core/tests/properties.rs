use std::collections::HashMap;
use std::f64::consts::PI;

use approx::assert_relative_eq;
use proptest::prelude::*;

use msc_core::expr::{Expr, SymbolKind, SymbolRegistry};
use msc_core::lmpc::qp::{self, Hessian, QpProblem, QpSettings, QpStatus, Row};
use msc_core::lmpc::{min_max_jerk, position_to_velocity_bounds};
use msc_core::taskfn::wrap_angle;

#[derive(Clone, Debug)]
enum Tree {
    X,
    Y,
    Const(f64),
    Sin(Box<Tree>),
    Cos(Box<Tree>),
    Square(Box<Tree>),
    Add(Box<Tree>, Box<Tree>),
    Mul(Box<Tree>, Box<Tree>),
    // a / (1 + b^2) keeps the denominator away from zero.
    SafeDiv(Box<Tree>, Box<Tree>),
}

fn tree() -> impl Strategy<Value = Tree> {
    let leaf = prop_oneof![Just(Tree::X), Just(Tree::Y), (-2.0..2.0f64).prop_map(Tree::Const)];
    leaf.prop_recursive(4, 24, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| Tree::Sin(Box::new(a))),
            inner.clone().prop_map(|a| Tree::Cos(Box::new(a))),
            inner.clone().prop_map(|a| Tree::Square(Box::new(a))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Tree::Add(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Tree::Mul(Box::new(a), Box::new(b))),
            (inner.clone(), inner).prop_map(|(a, b)| Tree::SafeDiv(Box::new(a), Box::new(b))),
        ]
    })
}

fn build(t: &Tree, x: &Expr, y: &Expr) -> Expr {
    match t {
        Tree::X => x.clone(),
        Tree::Y => y.clone(),
        Tree::Const(c) => Expr::constant(*c),
        Tree::Sin(a) => build(a, x, y).sin(),
        Tree::Cos(a) => build(a, x, y).cos(),
        Tree::Square(a) => build(a, x, y).square(),
        Tree::Add(a, b) => build(a, x, y) + build(b, x, y),
        Tree::Mul(a, b) => build(a, x, y) * build(b, x, y),
        Tree::SafeDiv(a, b) => build(a, x, y) / (Expr::one() + build(b, x, y).square()),
    }
}

fn direct(t: &Tree, x: f64, y: f64) -> f64 {
    match t {
        Tree::X => x,
        Tree::Y => y,
        Tree::Const(c) => *c,
        Tree::Sin(a) => direct(a, x, y).sin(),
        Tree::Cos(a) => direct(a, x, y).cos(),
        Tree::Square(a) => direct(a, x, y).powi(2),
        Tree::Add(a, b) => direct(a, x, y) + direct(b, x, y),
        Tree::Mul(a, b) => direct(a, x, y) * direct(b, x, y),
        Tree::SafeDiv(a, b) => direct(a, x, y) / (1.0 + direct(b, x, y).powi(2)),
    }
}

proptest! {
    #[test]
    fn derivative_matches_central_difference(t in tree(), x0 in -1.5..1.5f64, y0 in -1.5..1.5f64) {
        let mut reg = SymbolRegistry::new();
        let x = reg.make_symbol("x", SymbolKind::Virtual).unwrap();
        let y = reg.make_symbol("y", SymbolKind::Virtual).unwrap();
        let e = build(&t, &x, &y);
        let sx = x.as_symbol().unwrap().clone();
        let at = |a: f64, b: f64| HashMap::from([(sx.clone(), a), (y.as_symbol().unwrap().clone(), b)]);

        let v = e.eval_map(&at(x0, y0)).unwrap();
        assert_relative_eq!(v, direct(&t, x0, y0), epsilon = 1e-12, max_relative = 1e-12);

        let h = 1e-6;
        let fd = (direct(&t, x0 + h, y0) - direct(&t, x0 - h, y0)) / (2.0 * h);
        let d = e.diff(&sx).eval_map(&at(x0, y0)).unwrap();
        prop_assert!((d - fd).abs() <= 1e-5 * fd.abs().max(1.0), "d/dx {d} vs {fd} for {e}");
    }

    #[test]
    fn wrap_angle_is_shortest_equivalent(a in -50.0..50.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -PI && w <= PI);
        let k = ((a - w) / (2.0 * PI)).round();
        prop_assert!((a - w - 2.0 * PI * k).abs() < 1e-9);
    }

    #[test]
    fn velocity_bounds_keep_zero_and_respect_limits(
        q in -2.0..2.0f64, lo in -1.5..0.0f64, width in 0.1..3.0f64,
        vmax in 0.1..2.0f64, dt in 0.005..0.1f64, k in 0usize..10,
    ) {
        let hi = lo + width;
        let (lb, ub) = position_to_velocity_bounds(q, Some((lo, hi)), vmax, dt, k);
        prop_assert!(lb <= 0.0 && ub >= 0.0 && lb >= -vmax && ub <= vmax);
        let t = (k + 1) as f64 * dt;
        if q <= hi {
            prop_assert!(q + ub * t <= hi + 1e-12);
        }
        if q >= lo {
            prop_assert!(q + lb * t >= lo - 1e-12);
        }
    }

    #[test]
    fn jerk_limit_scales_linearly(v in 0.01..5.0f64, s in 0.1..10.0f64, dt in 0.005..0.1f64, n in 4usize..16) {
        let a = min_max_jerk(v, dt, n).unwrap();
        let b = min_max_jerk(s * v, dt, n).unwrap();
        assert_relative_eq!(b, s * a, max_relative = 1e-7);
        // Halving the period with the same horizon needs four times the jerk.
        assert_relative_eq!(min_max_jerk(v, dt / 2.0, n).unwrap(), 4.0 * a, max_relative = 1e-7);
    }

    #[test]
    fn qp_solutions_satisfy_kkt(
        n in 1usize..6,
        seed in proptest::collection::vec(-1.0..1.0f64, 64),
        diag in proptest::collection::vec(0.05..3.0f64, 6),
    ) {
        let mut p = QpProblem::new(n);
        p.hessian = Hessian::Diagonal(diag[..n].to_vec());
        p.linear = seed[..n].iter().map(|c| 4.0 * c).collect();
        for i in 0..n {
            p.lower[i] = -1.0 - seed[10 + i].abs();
            p.upper[i] = 1.0 + seed[20 + i].abs();
        }
        for r in 0..3 {
            let coefficients = (0..n).map(|j| (j, seed[30 + 6 * r + j])).collect();
            p.rows.push(Row { label: format!("r{r}"), coefficients, lower: -0.5, upper: 0.5 + seed[60 + r].abs() });
        }
        let s = qp::solve(&p, &QpSettings::default());
        prop_assert_eq!(s.status, QpStatus::Optimal);
        prop_assert!(p.primal_residual(&s.x) < 1e-7);
        prop_assert!(p.stationarity_residual(&s) < 1e-7);
        prop_assert!(p.complementarity_residual(&s) < 1e-7);
    }
}
