//! Baseline volt/var controllers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{reactive_headroom, Environment};
use crate::error::{Error, Result};
use crate::network::NetworkCase;
use crate::powerflow::{solve_power_flow, GridState, InjectionSet};

/// What a policy asks the environment to do this step.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    /// Ratios in `[-c, c]` of each PV's reactive headroom.
    Ratios(Vec<f64>),
    /// Reactive setpoints in MVAr.
    Reactive(Vec<f64>),
}

pub trait Policy: Send {
    fn name(&self) -> &'static str;

    /// Called after every environment reset.
    fn reset(&mut self, _env: &Environment, _seed: u64) {}

    fn act(&mut self, env: &Environment) -> Result<Command>;
}

pub fn apply(env: &mut Environment, command: Command) -> Result<crate::env::StepResult> {
    match command {
        Command::Ratios(a) => env.step(&a),
        Command::Reactive(q) => env.step_reactive(&q),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoControl;

impl Policy for NoControl {
    fn name(&self) -> &'static str {
        "none"
    }

    fn act(&mut self, env: &Environment) -> Result<Command> {
        Ok(Command::Ratios(vec![0.0; env.n_agents()]))
    }
}

/// Uniform random ratios in `[-c, c]`.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn reset(&mut self, _env: &Environment, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_stream(2);
    }

    fn act(&mut self, env: &Environment) -> Result<Command> {
        let c = env.action_bound();
        Ok(Command::Ratios(
            (0..env.n_agents()).map(|_| self.rng.random_range(-c..=c)).collect(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DroopParams {
    pub v_ref: f64,
    pub deadband_halfwidth: f64,
    /// MVAr per per-unit volt. When unset the line reaches `q_max` at
    /// `saturation_deviation` from `v_ref`.
    pub slope: Option<f64>,
    pub saturation_deviation: f64,
    /// Iterate droop and power flow to a fixed point within each step.
    pub fixed_point: bool,
    pub max_fixed_point_iterations: usize,
}

impl Default for DroopParams {
    fn default() -> Self {
        DroopParams {
            v_ref: 1.0,
            deadband_halfwidth: 0.0,
            slope: None,
            saturation_deviation: 0.05,
            fixed_point: false,
            max_fixed_point_iterations: 50,
        }
    }
}

impl DroopParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.deadband_halfwidth >= 0.0) {
            return Err(Error::Validation("droop deadband must be non-negative".into()));
        }
        if self.slope.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Validation("droop slope must be positive".into()));
        }
        if self.slope.is_none() && !(self.saturation_deviation > self.deadband_halfwidth) {
            return Err(Error::Validation(
                "saturation deviation must exceed the deadband".into(),
            ));
        }
        Ok(())
    }
}

/// Piecewise-linear volt/var characteristic.
pub fn droop_q(v: f64, p_pv: f64, s_max: f64, params: &DroopParams) -> f64 {
    let q_max = reactive_headroom(p_pv, s_max);
    let dev = v - params.v_ref;
    let excess = dev.abs() - params.deadband_halfwidth;
    if excess <= 0.0 || q_max == 0.0 {
        return 0.0;
    }
    let slope = params
        .slope
        .unwrap_or(q_max / (params.saturation_deviation - params.deadband_halfwidth));
    -(slope * excess).min(q_max) * dev.signum()
}

const FIXED_POINT_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct Droop {
    pub params: DroopParams,
}

impl Droop {
    pub fn new(params: DroopParams) -> Self {
        Droop { params }
    }

    fn local(&self, v: &[f64], p_pv: &[f64], s_max: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(p_pv)
            .zip(s_max)
            .map(|((&v, &p), &s)| droop_q(v, p, s, &self.params))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroopFixedPoint {
    pub q_pv: Vec<f64>,
    pub grid: GridState,
    pub iterations: usize,
    pub converged: bool,
}

/// Fixed point of droop and power flow for one set of injections, starting
/// from the voltages `v0` at the PV buses.
///
/// Substitution is under-relaxed because the loop gain on long feeders is
/// well above one and plain substitution settles into a limit cycle. The
/// factor halves whenever the residual fails to shrink (or the power flow
/// diverges) and grows back by 20% after each improvement.
pub fn droop_fixed_point(
    case: &NetworkCase,
    inj: &InjectionSet,
    s_max: &[f64],
    params: &DroopParams,
    v0: &[f64],
) -> Result<DroopFixedPoint> {
    let droop = Droop::new(*params);
    let pv_pos = case.pv_positions();
    // last iterate whose power flow converged, and the droop response to it
    let mut base = vec![0.0; inj.p_pv.len()];
    let mut target = droop.local(v0, &inj.p_pv, s_max);
    let mut relax = 1.0f64;
    let mut prev_residual = f64::INFINITY;
    let mut trial = inj.clone();
    let max_iter = params.max_fixed_point_iterations.max(1);
    let mut last = None;
    for k in 1..=max_iter {
        let q: Vec<f64> = base.iter().zip(&target).map(|(b, t)| b + relax * (t - b)).collect();
        trial.q_pv = q.clone();
        let grid = solve_power_flow(case, &trial)?;
        if !grid.converged {
            relax *= 0.5;
            last = Some((q, grid, false));
            continue;
        }
        let v: Vec<f64> = pv_pos.iter().map(|&p| grid.v[p]).collect();
        let next = droop.local(&v, &inj.p_pv, s_max);
        let residual = next.iter().zip(&q).map(|(t, q)| (t - q).abs()).fold(0.0, f64::max);
        if residual < FIXED_POINT_TOLERANCE {
            return Ok(DroopFixedPoint {
                q_pv: q,
                grid,
                iterations: k,
                converged: true,
            });
        }
        if residual >= prev_residual {
            relax = (relax * 0.5).max(1.0 / 64.0);
        } else {
            relax = (relax * 1.2).min(1.0);
        }
        prev_residual = residual;
        base = q.clone();
        target = next;
        last = Some((q, grid, true));
    }
    let (q_pv, grid, _) = last.expect("at least one iteration");
    Ok(DroopFixedPoint {
        q_pv,
        grid,
        iterations: max_iter,
        converged: false,
    })
}

impl Policy for Droop {
    fn name(&self) -> &'static str {
        "droop"
    }

    fn act(&mut self, env: &Environment) -> Result<Command> {
        let st = env
            .current()
            .ok_or_else(|| Error::Environment("environment has not been reset".into()))?;
        let v = env.pv_voltages()?;
        let s_max = env.store().s_max();
        if self.params.fixed_point {
            let fp = droop_fixed_point(env.case(), &st.injections, s_max, &self.params, &v)?;
            if !fp.converged {
                log::debug!("droop fixed point not reached after {} iterations", fp.iterations);
            }
            Ok(Command::Reactive(fp.q_pv))
        } else {
            Ok(Command::Reactive(self.local(&v, &st.injections.p_pv, s_max)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpfSettings {
    /// Inner loop stops when the largest coordinate update falls below this, MVAr.
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Initial weight of the quadratic voltage penalty.
    pub penalty: f64,
    pub max_penalty: f64,
    /// Multiplier updates of the augmented Lagrangian.
    pub max_outer: usize,
    /// Finite-difference step, MVAr.
    pub fd_step: f64,
    /// Bounds are tightened by this margin, per-unit, so that the optimum
    /// lands on the feasible side of the band edge.
    pub bound_margin: f64,
    /// Largest bound violation, per-unit, still reported as feasible.
    pub feasibility_tolerance: f64,
}

impl Default for OpfSettings {
    fn default() -> Self {
        OpfSettings {
            tolerance: 1e-5,
            max_sweeps: 200,
            penalty: 1e3,
            max_penalty: 1e9,
            max_outer: 30,
            fd_step: 1e-4,
            bound_margin: 1e-7,
            feasibility_tolerance: 1e-9,
        }
    }
}

impl OpfSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.tolerance, self.penalty, self.max_penalty, self.fd_step];
        if !positive.iter().all(|&x| x > 0.0) || self.max_sweeps == 0 || self.max_outer == 0 {
            return Err(Error::Validation(
                "OPF tolerances, penalties and iteration limits must be positive".into(),
            ));
        }
        if !(self.bound_margin >= 0.0 && self.feasibility_tolerance >= 0.0) {
            return Err(Error::Validation("OPF margins must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    /// MVAr, agent order.
    pub q_pv: Vec<f64>,
    /// Slack active power, MW.
    pub objective: f64,
    pub total_loss: f64,
    pub feasible: bool,
    /// Largest voltage-bound violation, per-unit.
    pub slack_violation: f64,
    pub v: Vec<f64>,
    pub sweeps: usize,
}

/// Augmented Lagrangian of the slack-power objective with the voltage bounds
/// `v_min + m <= v <= v_max - m` on every non-slack bus.
struct OpfProblem<'a> {
    case: &'a NetworkCase,
    inj: InjectionSet,
    q_max: Vec<f64>,
    margin: f64,
    mu: f64,
    /// Multipliers, `[upper, lower]` per non-slack bus.
    lambda: Vec<[f64; 2]>,
}

impl OpfProblem<'_> {
    /// Constraint values `g <= 0`, `[upper, lower]` per non-slack bus.
    fn constraints(&self, v: &[f64]) -> Vec<[f64; 2]> {
        self.case
            .buses()
            .iter()
            .zip(v)
            .skip(1)
            .map(|(bus, &vi)| [vi - (bus.v_max - self.margin), (bus.v_min + self.margin) - vi])
            .collect()
    }

    fn evaluate(&mut self, q: &[f64]) -> Result<(f64, Option<GridState>)> {
        self.inj.q_pv.copy_from_slice(q);
        let grid = solve_power_flow(self.case, &self.inj)?;
        if !grid.converged {
            return Ok((f64::INFINITY, None));
        }
        let mut f = grid.slack_p / self.case.base_power();
        for (g, l) in self.constraints(&grid.v).iter().zip(&self.lambda) {
            for k in 0..2 {
                let shifted = (l[k] + self.mu * g[k]).max(0.0);
                f += (shifted * shifted - l[k] * l[k]) / (2.0 * self.mu);
            }
        }
        Ok((f, Some(grid)))
    }

    fn f(&mut self, q: &[f64]) -> Result<f64> {
        self.evaluate(q).map(|(f, _)| f)
    }
}

fn worst_violation(case: &NetworkCase, v: &[f64]) -> f64 {
    case.buses()
        .iter()
        .zip(v)
        .skip(1)
        .map(|(bus, &vi)| (vi - bus.v_max).max(bus.v_min - vi).max(0.0))
        .fold(0.0, f64::max)
}

/// Minimizes slack active power over PV reactive setpoints subject to
/// `|q_i| <= sqrt(s_i^2 - p_i^2)` and the bus voltage bounds. Projected
/// coordinate descent with finite-difference Newton steps on an augmented
/// Lagrangian of the voltage bounds. When the bounds cannot be met the
/// returned point minimizes the penalized objective and `feasible` is false.
pub fn opf_solve(case: &NetworkCase, inj: &InjectionSet, s_max: &[f64], settings: &OpfSettings) -> Result<OpfSolution> {
    opf_solve_from(case, inj, s_max, settings, None)
}

pub fn opf_solve_from(
    case: &NetworkCase,
    inj: &InjectionSet,
    s_max: &[f64],
    settings: &OpfSettings,
    warm_start: Option<&[f64]>,
) -> Result<OpfSolution> {
    inj.validate(case)?;
    settings.validate()?;
    if s_max.len() != case.n_agents() {
        return Err(Error::Dimension {
            what: "inverter ratings",
            expected: case.n_agents(),
            got: s_max.len(),
        });
    }
    let q_max: Vec<f64> = inj
        .p_pv
        .iter()
        .zip(s_max)
        .map(|(&p, &s)| reactive_headroom(p, s))
        .collect();
    let mut q: Vec<f64> = match warm_start {
        Some(w) if w.len() == q_max.len() => w.iter().zip(&q_max).map(|(&x, &m)| x.clamp(-m, m)).collect(),
        _ => vec![0.0; q_max.len()],
    };
    let mut prob = OpfProblem {
        case,
        inj: inj.clone(),
        q_max,
        margin: settings.bound_margin,
        mu: settings.penalty,
        lambda: vec![[0.0; 2]; case.n_buses() - 1],
    };
    if !prob.f(&q)?.is_finite() {
        q.iter_mut().for_each(|x| *x = 0.0);
        if !prob.f(&q)?.is_finite() {
            return Err(Error::NotConverged);
        }
    }

    let mut sweeps = 0;
    let mut prev_violation = f64::INFINITY;
    for _ in 0..settings.max_outer {
        let mut f0 = prob.f(&q)?;
        for _ in 0..settings.max_sweeps {
            sweeps += 1;
            let (mut max_update, f1) = newton_step(&mut prob, &mut q, f0, settings.fd_step)?;
            f0 = f1;
            if max_update < settings.tolerance {
                // Newton stalled; one coordinate sweep before giving up
                for i in 0..q.len() {
                    let (moved, f1) = coordinate_step(&mut prob, &mut q, i, f0, settings.fd_step)?;
                    max_update = max_update.max(moved);
                    f0 = f1;
                }
            }
            if max_update < settings.tolerance {
                break;
            }
        }
        let (_, grid) = prob.evaluate(&q)?;
        let grid = grid.ok_or(Error::NotConverged)?;
        let g = prob.constraints(&grid.v);
        let violation = g.iter().flatten().fold(0.0f64, |a, &x| a.max(x));
        let mut dual_change = 0.0f64;
        for (l, gj) in prob.lambda.iter_mut().zip(&g) {
            for k in 0..2 {
                let next = (l[k] + prob.mu * gj[k]).max(0.0);
                dual_change = dual_change.max((next - l[k]).abs());
                l[k] = next;
            }
        }
        if violation <= settings.feasibility_tolerance && dual_change <= 1e-6 {
            break;
        }
        if violation > 0.25 * prev_violation {
            prob.mu = (prob.mu * 10.0).min(settings.max_penalty);
        }
        prev_violation = violation;
    }

    let (_, grid) = prob.evaluate(&q)?;
    let grid = grid.ok_or(Error::NotConverged)?;
    let worst = worst_violation(case, &grid.v);
    Ok(OpfSolution {
        objective: grid.slack_p,
        total_loss: grid.total_loss,
        feasible: worst <= settings.feasibility_tolerance,
        slack_violation: worst,
        v: grid.v,
        q_pv: q,
        sweeps,
    })
}

/// One projected Newton step on coordinate `i` with backtracking. Returns the
/// size of the accepted move and the new objective.
/// Projected Newton step on all coordinates with a finite-difference
/// Hessian. Coordinates pinned at a bound by the gradient stay fixed.
/// Returns the largest coordinate move and the new objective.
fn newton_step(prob: &mut OpfProblem<'_>, q: &mut [f64], f0: f64, h: f64) -> Result<(f64, f64)> {
    let n = q.len();
    let x0 = q.to_vec();
    let mut fp = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut hess = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        q[i] = x0[i] + h;
        fp[i] = prob.f(q)?;
        q[i] = x0[i] - h;
        let fm = prob.f(q)?;
        q[i] = x0[i];
        if !(fp[i].is_finite() && fm.is_finite()) {
            return Ok((0.0, f0));
        }
        grad[i] = (fp[i] - fm) / (2.0 * h);
        hess[(i, i)] = (fp[i] - 2.0 * f0 + fm) / (h * h);
    }
    for i in 0..n {
        for j in 0..i {
            q[i] = x0[i] + h;
            q[j] = x0[j] + h;
            let fij = prob.f(q)?;
            q[i] = x0[i];
            q[j] = x0[j];
            if !fij.is_finite() {
                return Ok((0.0, f0));
            }
            let hij = (fij - fp[i] - fp[j] + f0) / (h * h);
            hess[(i, j)] = hij;
            hess[(j, i)] = hij;
        }
    }

    let pinned = |i: usize| {
        let m = prob.q_max[i];
        m <= 0.0 || (x0[i] <= -m + 1e-12 && grad[i] > 0.0) || (x0[i] >= m - 1e-12 && grad[i] < 0.0)
    };
    let free: Vec<usize> = (0..n).filter(|&i| !pinned(i)).collect();
    if free.is_empty() {
        return Ok((0.0, f0));
    }
    let k = free.len();
    let h_ff = DMatrix::from_fn(k, k, |a, b| hess[(free[a], free[b])]);
    let g_f = DVector::from_fn(k, |a, _| grad[free[a]]);
    let scale = h_ff.diagonal().amax().max(1e-12);
    let mut shift = 0.0;
    let dir = loop {
        let shifted = &h_ff + DMatrix::identity(k, k) * shift;
        if let Some(chol) = shifted.cholesky() {
            break chol.solve(&(-&g_f));
        }
        shift = if shift == 0.0 { 1e-8 * scale } else { shift * 10.0 };
        if shift > 1e8 * scale {
            return Ok((0.0, f0));
        }
    };

    let mut t = 1.0;
    for _ in 0..30 {
        for (a, &i) in free.iter().enumerate() {
            let m = prob.q_max[i];
            q[i] = (x0[i] + t * dir[a]).clamp(-m, m);
        }
        let f = prob.f(q)?;
        let decrease: f64 = free.iter().map(|&i| grad[i] * (q[i] - x0[i])).sum();
        if f.is_finite() && f <= f0 + 1e-4 * decrease.min(0.0) && f <= f0 {
            let moved = q.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            return Ok((moved, f));
        }
        t *= 0.5;
    }
    q.copy_from_slice(&x0);
    Ok((0.0, f0))
}

fn coordinate_step(prob: &mut OpfProblem<'_>, q: &mut [f64], i: usize, f0: f64, h: f64) -> Result<(f64, f64)> {
    let (lo, hi) = (-prob.q_max[i], prob.q_max[i]);
    if hi <= lo {
        return Ok((0.0, f0));
    }
    let x0 = q[i];
    let h = h.min((hi - lo) / 4.0);
    // keep the stencil inside the box
    let c = x0.clamp(lo + h, hi - h);
    let mut probe = |x: f64, q: &mut [f64]| -> Result<f64> {
        q[i] = x;
        prob.f(q)
    };
    let fm = probe(c - h, q)?;
    let fc = if c == x0 { f0 } else { probe(c, q)? };
    let fp = probe(c + h, q)?;
    q[i] = x0;

    let mut best = (x0, f0);
    for (x, f) in [(c - h, fm), (c, fc), (c + h, fp)] {
        if f < best.1 {
            best = (x, f);
        }
    }
    if fm.is_finite() && fc.is_finite() && fp.is_finite() {
        let g = (fp - fm) / (2.0 * h);
        let curv = (fp - 2.0 * fc + fm) / (h * h);
        let mut target = if curv > 0.0 {
            c - g / curv
        } else {
            // concave or flat: head for the bound in the descent direction
            if g > 0.0 {
                lo
            } else {
                hi
            }
        };
        target = target.clamp(lo, hi);
        for _ in 0..30 {
            if (target - best.0).abs() < 1e-12 {
                break;
            }
            q[i] = target;
            let f = prob.f(q)?;
            if f < best.1 {
                best = (target, f);
                break;
            }
            target = x0 + 0.5 * (target - x0);
        }
    }
    q[i] = best.0;
    Ok(((best.0 - x0).abs(), best.1))
}

/// Re-solves the OPF at every step, warm-started from the previous solution.
#[derive(Debug, Clone, Default)]
pub struct OpfPolicy {
    pub settings: OpfSettings,
    last: Option<Vec<f64>>,
}

impl OpfPolicy {
    pub fn new(settings: OpfSettings) -> Self {
        OpfPolicy { settings, last: None }
    }
}

impl Policy for OpfPolicy {
    fn name(&self) -> &'static str {
        "opf"
    }

    fn reset(&mut self, _env: &Environment, _seed: u64) {
        self.last = None;
    }

    fn act(&mut self, env: &Environment) -> Result<Command> {
        let st = env
            .current()
            .ok_or_else(|| Error::Environment("environment has not been reset".into()))?;
        let sol = opf_solve_from(
            env.case(),
            &st.injections,
            env.store().s_max(),
            &self.settings,
            self.last.as_deref(),
        )?;
        self.last = Some(sol.q_pv.clone());
        Ok(Command::Reactive(sol.q_pv))
    }
}
