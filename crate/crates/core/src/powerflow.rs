//! Steady-state AC power flow on a radial network.
//!
//! The solver is a polar Newton-Raphson on every non-slack bus (all are PQ
//! buses), flat-started at `v = v_ref, theta = 0`. Powers crossing the module
//! boundary are in physical units (MW / MVAr); the iteration itself runs in
//! per-unit on the case base power.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{branch_admittance, NetworkCase};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 30;

/// Device-level power injections. PV vectors follow agent order, load vectors
/// follow the case's load order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSet {
    pub p_pv: Vec<f64>,
    pub q_pv: Vec<f64>,
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
}

impl InjectionSet {
    pub fn zeros(case: &NetworkCase) -> Self {
        InjectionSet {
            p_pv: vec![0.0; case.n_agents()],
            q_pv: vec![0.0; case.n_agents()],
            p_load: vec![0.0; case.loads().len()],
            q_load: vec![0.0; case.loads().len()],
        }
    }

    pub fn validate(&self, case: &NetworkCase) -> Result<()> {
        let check = |what, v: &Vec<f64>, n| {
            if v.len() != n {
                return Err(Error::Dimension {
                    what,
                    expected: n,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!("{what} contains non-finite values")));
            }
            Ok(())
        };
        check("p_pv entries", &self.p_pv, case.n_agents())?;
        check("q_pv entries", &self.q_pv, case.n_agents())?;
        check("p_load entries", &self.p_load, case.loads().len())?;
        check("q_load entries", &self.q_load, case.loads().len())?;
        if self.p_pv.iter().any(|&p| p < 0.0) {
            return Err(Error::Validation("p_pv must be non-negative".into()));
        }
        Ok(())
    }

    /// Net specified injection per bus position, per-unit.
    pub fn bus_injections_pu(&self, case: &NetworkCase) -> (Vec<f64>, Vec<f64>) {
        let n = case.n_buses();
        let base = case.base_power();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for (k, pos) in case.pv_positions().into_iter().enumerate() {
            p[pos] += self.p_pv[k] / base;
            q[pos] += self.q_pv[k] / base;
        }
        for (k, pos) in case.load_positions().into_iter().enumerate() {
            p[pos] -= self.p_load[k] / base;
            q[pos] -= self.q_load[k] / base;
        }
        (p, q)
    }
}

/// One solved (or best-effort) operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    /// Voltage magnitude per bus position, per-unit.
    pub v: Vec<f64>,
    /// Voltage angle per bus position, radians.
    pub theta: Vec<f64>,
    pub injections: InjectionSet,
    /// Slack active power in MW (positive when importing from the main grid).
    pub slack_p: f64,
    pub slack_q: f64,
    /// Series I^2 r losses in MW.
    pub total_loss: f64,
    pub converged: bool,
    /// Number of mismatch evaluations performed.
    pub iterations: usize,
    /// Largest absolute per-unit mismatch at the returned iterate.
    pub max_mismatch: f64,
}

impl GridState {
    pub fn total_loss(&self) -> Result<f64> {
        if self.converged {
            Ok(self.total_loss)
        } else {
            Err(Error::NotConverged)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub max_mismatch: f64,
    pub worst_bus: i64,
}

/// Bus admittance matrix kept in adjacency form.
#[derive(Debug, Clone)]
struct Admittance {
    diag: Vec<(f64, f64)>,
    /// (neighbour, G_ij, B_ij) per bus.
    off: Vec<Vec<(usize, f64, f64)>>,
}

impl Admittance {
    fn build(case: &NetworkCase) -> Result<Self> {
        let n = case.n_buses();
        let mut diag = vec![(0.0, 0.0); n];
        let mut off = vec![Vec::new(); n];
        for (br, &(f, t)) in case.branches().iter().zip(case.branch_ends()) {
            let (g, b) = branch_admittance(br)?;
            let tap = br.tap_ratio;
            diag[f].0 += g / (tap * tap);
            diag[f].1 += b / (tap * tap);
            diag[t].0 += g;
            diag[t].1 += b;
            off[f].push((t, -g / tap, -b / tap));
            off[t].push((f, -g / tap, -b / tap));
        }
        Ok(Admittance { diag, off })
    }

    /// Calculated injections (P_i, Q_i) at every bus.
    fn injections(&self, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = v.len();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            let (gii, bii) = self.diag[i];
            let mut pi = v[i] * v[i] * gii;
            let mut qi = -v[i] * v[i] * bii;
            for &(j, gij, bij) in &self.off[i] {
                let (s, c) = (theta[i] - theta[j]).sin_cos();
                pi += v[i] * v[j] * (gij * c + bij * s);
                qi += v[i] * v[j] * (gij * s - bij * c);
            }
            p[i] = pi;
            q[i] = qi;
        }
        (p, q)
    }
}

pub fn solve_power_flow(case: &NetworkCase, inj: &InjectionSet) -> Result<GridState> {
    solve_with(case, inj, &SolverOptions::default())
}

pub fn solve_with(case: &NetworkCase, inj: &InjectionSet, opts: &SolverOptions) -> Result<GridState> {
    solve_traced(case, inj, opts).map(|(state, _)| state)
}

/// Newton-Raphson solve returning the per-iteration residual trace as well.
pub fn solve_traced(
    case: &NetworkCase,
    inj: &InjectionSet,
    opts: &SolverOptions,
) -> Result<(GridState, Vec<IterationRecord>)> {
    inj.validate(case)?;
    let y = Admittance::build(case)?;
    let tree = Tree::from_admittance(&y);
    let n = case.n_buses();
    let (p_spec, q_spec) = inj.bus_injections_pu(case);

    let mut v = vec![case.v_ref(); n];
    let mut theta = vec![0.0; n];
    let mut trace = Vec::new();
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;

    while iterations <= opts.max_iterations {
        iterations += 1;
        let (p_calc, q_calc) = y.injections(&v, &theta);
        let mut f = vec![Vector2::zeros(); n];
        let mut worst = (0.0f64, 0usize);
        for i in 1..n {
            let dp = p_spec[i] - p_calc[i];
            let dq = q_spec[i] - q_calc[i];
            f[i] = Vector2::new(dp, dq);
            let w = dp.abs().max(dq.abs());
            if w > worst.0 || w.is_nan() {
                worst = (w, i);
            }
        }
        let max_mis = worst.0;
        trace.push(IterationRecord {
            iteration: iterations,
            max_mismatch: max_mis,
            worst_bus: case.label(worst.1),
        });
        if !max_mis.is_finite() || v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            break;
        }
        if best.as_ref().is_none_or(|(b, _, _)| max_mis < *b) {
            best = Some((max_mis, v.clone(), theta.clone()));
        }
        if max_mis <= opts.tolerance {
            converged = true;
            break;
        }
        if iterations > opts.max_iterations {
            break;
        }

        let blocks = JacobianBlocks::assemble(&y, &tree, &v, &theta, &p_calc, &q_calc);
        let dx = match blocks.solve(&tree, f) {
            Some(dx) => dx,
            None => break,
        };
        for i in 1..n {
            theta[i] += dx[i][0];
            v[i] += dx[i][1];
        }
    }

    if !converged {
        if let Some((_, bv, bt)) = best {
            v = bv;
            theta = bt;
        }
    }
    let (p_calc, q_calc) = y.injections(&v, &theta);
    let max_mismatch = (1..n)
        .map(|i| (p_spec[i] - p_calc[i]).abs().max((q_spec[i] - q_calc[i]).abs()))
        .fold(0.0, f64::max);
    let base = case.base_power();
    let losses = branch_losses(case, &v, &theta)?;
    let state = GridState {
        total_loss: losses.iter().map(|l| l.p_loss).sum::<f64>() * base,
        slack_p: p_calc[0] * base,
        slack_q: q_calc[0] * base,
        v,
        theta,
        injections: inj.clone(),
        converged,
        iterations,
        max_mismatch,
    };
    Ok((state, trace))
}

/// Radial structure rooted at the slack: each bus's parent and a
/// parents-first ordering of the non-slack buses.
struct Tree {
    parent: Vec<usize>,
    order: Vec<usize>,
}

impl Tree {
    fn from_admittance(y: &Admittance) -> Self {
        let n = y.diag.len();
        let mut parent = vec![usize::MAX; n];
        let mut order = Vec::with_capacity(n);
        parent[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(i) = queue.pop_front() {
            for &(j, _, _) in &y.off[i] {
                if parent[j] == usize::MAX {
                    parent[j] = i;
                    order.push(j);
                    queue.push_back(j);
                }
            }
        }
        Tree { parent, order }
    }
}

/// Jacobian in 2x2 blocks over `(theta_i, v_i)`. On a tree the only
/// off-diagonal blocks couple a bus with its parent, so eliminating leaves
/// first produces no fill-in.
struct JacobianBlocks {
    diag: Vec<Matrix2<f64>>,
    /// d(P_i, Q_i) / d(theta_p, v_p) for parent p.
    to_parent: Vec<Matrix2<f64>>,
    /// d(P_p, Q_p) / d(theta_i, v_i).
    from_parent: Vec<Matrix2<f64>>,
}

fn coupling(v: &[f64], theta: &[f64], i: usize, j: usize, gij: f64, bij: f64) -> Matrix2<f64> {
    let (s, c) = (theta[i] - theta[j]).sin_cos();
    let a = gij * s - bij * c;
    let b = gij * c + bij * s;
    Matrix2::new(v[i] * v[j] * a, v[i] * b, -v[i] * v[j] * b, v[i] * a)
}

impl JacobianBlocks {
    fn assemble(y: &Admittance, tree: &Tree, v: &[f64], theta: &[f64], p: &[f64], q: &[f64]) -> Self {
        let n = v.len();
        let mut diag = vec![Matrix2::zeros(); n];
        let mut to_parent = vec![Matrix2::zeros(); n];
        let mut from_parent = vec![Matrix2::zeros(); n];
        for &i in &tree.order {
            let (gii, bii) = y.diag[i];
            diag[i] = Matrix2::new(
                -q[i] - bii * v[i] * v[i],
                p[i] / v[i] + gii * v[i],
                p[i] - gii * v[i] * v[i],
                q[i] / v[i] - bii * v[i],
            );
            let par = tree.parent[i];
            if par == 0 {
                continue;
            }
            let &(_, gij, bij) = y.off[i].iter().find(|(j, _, _)| *j == par).expect("tree edge");
            to_parent[i] = coupling(v, theta, i, par, gij, bij);
            from_parent[i] = coupling(v, theta, par, i, gij, bij);
        }
        JacobianBlocks {
            diag,
            to_parent,
            from_parent,
        }
    }

    /// Solves `J dx = f` in place; `None` when a pivot block is singular.
    fn solve(mut self, tree: &Tree, mut f: Vec<Vector2<f64>>) -> Option<Vec<Vector2<f64>>> {
        let mut inv = vec![Matrix2::zeros(); f.len()];
        for &i in tree.order.iter().rev() {
            inv[i] = self.diag[i].try_inverse()?;
            let par = tree.parent[i];
            if par != 0 {
                let k = self.from_parent[i] * inv[i];
                self.diag[par] -= k * self.to_parent[i];
                let fi = f[i];
                f[par] -= k * fi;
            }
        }
        let mut x = vec![Vector2::zeros(); f.len()];
        for &i in &tree.order {
            let par = tree.parent[i];
            let rhs = if par != 0 {
                f[i] - self.to_parent[i] * x[par]
            } else {
                f[i]
            };
            x[i] = inv[i] * rhs;
        }
        x.iter().all(|d| d.iter().all(|e| e.is_finite())).then_some(x)
    }
}

/// Per-branch series flows of a solved state, per-unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchFlow {
    /// Series current magnitude.
    pub current: f64,
    pub p_loss: f64,
    pub q_loss: f64,
}

fn branch_losses(case: &NetworkCase, v: &[f64], theta: &[f64]) -> Result<Vec<BranchFlow>> {
    case.branches()
        .iter()
        .zip(case.branch_ends())
        .map(|(br, &(f, t))| {
            let (g, b) = branch_admittance(br)?;
            // dV = V_f / tap - V_t
            let dre = v[f] * theta[f].cos() / br.tap_ratio - v[t] * theta[t].cos();
            let dim = v[f] * theta[f].sin() / br.tap_ratio - v[t] * theta[t].sin();
            let i2 = (g * g + b * b) * (dre * dre + dim * dim);
            Ok(BranchFlow {
                current: i2.sqrt(),
                p_loss: i2 * br.r,
                q_loss: i2 * br.x,
            })
        })
        .collect()
}

/// Series flows of every branch at `state`.
pub fn branch_flows(case: &NetworkCase, state: &GridState) -> Result<Vec<BranchFlow>> {
    check_state_dims(case, state)?;
    branch_losses(case, &state.v, &state.theta)
}

/// Total series loss in MW of a converged state.
pub fn total_loss(case: &NetworkCase, state: &GridState) -> Result<f64> {
    if !state.converged {
        return Err(Error::NotConverged);
    }
    let flows = branch_flows(case, state)?;
    Ok(flows.iter().map(|f| f.p_loss).sum::<f64>() * case.base_power())
}

/// Power-balance residuals (specified minus network-side injection), two
/// entries per non-slack bus in position order: `[P_1, Q_1, P_2, Q_2, ...]`.
pub fn mismatch(case: &NetworkCase, state: &GridState) -> Result<Vec<f64>> {
    check_state_dims(case, state)?;
    state.injections.validate(case)?;
    let y = Admittance::build(case)?;
    let (p_spec, q_spec) = state.injections.bus_injections_pu(case);
    let (p_calc, q_calc) = y.injections(&state.v, &state.theta);
    Ok((1..case.n_buses())
        .flat_map(|i| [p_spec[i] - p_calc[i], q_spec[i] - q_calc[i]])
        .collect())
}

fn check_state_dims(case: &NetworkCase, state: &GridState) -> Result<()> {
    for (what, len) in [
        ("voltage magnitudes", state.v.len()),
        ("voltage angles", state.theta.len()),
    ] {
        if len != case.n_buses() {
            return Err(Error::Dimension {
                what,
                expected: case.n_buses(),
                got: len,
            });
        }
    }
    Ok(())
}

/// Linearized voltage drop across one branch feeding a single bus, normalized
/// by the receiving-end voltage `v`.
pub fn two_bus_voltage_drop(r: f64, x: f64, p_l: f64, q_l: f64, p_pv: f64, q_pv: f64, v: f64) -> f64 {
    debug_assert!(v > 0.0);
    (r * (p_l - p_pv) + x * (q_l - q_pv)) / v
}

/// Series loss of a two-bus network, per-unit.
pub fn two_bus_power_loss(r: f64, p_l: f64, q_l: f64, p_pv: f64, q_pv: f64, v_parent: f64) -> f64 {
    debug_assert!(v_parent > 0.0);
    let dp = p_l - p_pv;
    let dq = q_l - q_pv;
    (dp * dp + dq * dq) / (v_parent * v_parent) * r
}

/// PV reactive injection that zeroes the linearized two-bus voltage drop.
pub fn zero_deviation_reactive(r: f64, x: f64, p_l: f64, p_pv: f64, q_l: f64) -> f64 {
    debug_assert!(x > 0.0);
    r / x * (p_l - p_pv) + q_l
}
