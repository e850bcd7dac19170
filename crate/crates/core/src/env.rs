//! Multi-agent voltage control environment.
//!
//! Each PV inverter is an agent. One step is one 3-minute control interval:
//! the submitted setpoints are applied, the power flow is solved at the
//! current profile values, the shared reward is computed from the solved
//! voltages, and the profile clock advances.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::barrier::{reactive_loss, reward, voltage_loss, BarrierShape, RewardSpec};
use crate::error::{Error, Result};
use crate::network::{BusId, NetworkCase};
use crate::powerflow::{branch_flows, solve_with, GridState, InjectionSet, SolverOptions};
use crate::profiles::ProfileStore;

pub const DEFAULT_EPISODE_LENGTH: usize = 240;
pub const DEFAULT_DAY_BUFFER: usize = 480;
pub const DEFAULT_PROFILE_NOISE: f64 = 0.01;

/// RNG stream ids derived from one episode seed.
const PROFILE_STREAM: u64 = 0;
const OBSERVATION_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartMode {
    /// Uniform offset inside the day window, leaving a full episode.
    #[default]
    Uniform,
    /// Always start at the first step of the day window.
    DayStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialReactive {
    /// `q = u * q_max` with `u ~ U(-c, c)`.
    #[default]
    Uniform,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub barrier: BarrierShape,
    pub alpha: f64,
    pub episode_length: usize,
    pub day_buffer: usize,
    /// Std of the additive Gaussian observation noise.
    pub obs_noise_sigma: f64,
    /// Std of the multiplicative noise on profile reads.
    pub profile_noise_sigma: f64,
    /// Carried for clients; unused by the simulator.
    pub gamma: f64,
    pub start_mode: StartMode,
    pub initial_reactive: InitialReactive,
    /// Also treat branch current above its rating as a safety violation.
    pub check_ratings: bool,
    /// Overrides the case's action bound.
    pub action_bound: Option<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            barrier: BarrierShape::Bowl,
            alpha: 0.1,
            episode_length: DEFAULT_EPISODE_LENGTH,
            day_buffer: DEFAULT_DAY_BUFFER,
            obs_noise_sigma: 0.0,
            profile_noise_sigma: DEFAULT_PROFILE_NOISE,
            gamma: 0.99,
            start_mode: StartMode::Uniform,
            initial_reactive: InitialReactive::Uniform,
            check_ratings: false,
            action_bound: None,
        }
    }
}

impl EnvConfig {
    pub fn reward_spec(&self, case: &NetworkCase) -> RewardSpec {
        let mut spec = RewardSpec::new(self.barrier);
        spec.alpha = self.alpha;
        spec.barrier.v_ref = case.v_ref();
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.episode_length == 0 || self.episode_length >= self.day_buffer {
            return Err(Error::Validation(format!(
                "episode_length {} must be positive and shorter than day_buffer {}",
                self.episode_length, self.day_buffer
            )));
        }
        if !(self.obs_noise_sigma >= 0.0 && self.profile_noise_sigma >= 0.0) {
            return Err(Error::Validation("noise levels must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Validation("gamma must lie in [0, 1]".into()));
        }
        if let Some(c) = self.action_bound {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Validation(format!("action bound must lie in (0, 1], got {c}")));
            }
        }
        Ok(())
    }
}

/// Where an episode sits in the profile store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeWindow {
    pub day: usize,
    pub offset: usize,
    /// Absolute profile index of the first step.
    pub start: usize,
}

/// Per-bus and per-PV measures of one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMeasures {
    pub buses: Vec<BusId>,
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
    pub v: Vec<f64>,
    /// Radians.
    pub theta: Vec<f64>,
    /// Agents of the region, agent order.
    pub agents: Vec<usize>,
    pub p_pv: Vec<f64>,
    pub q_pv_prev: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub agent_id: u32,
    pub region: u32,
    pub measures: RegionMeasures,
}

impl Observation {
    /// Flat layout: `[p_load, q_load, v, theta]` per region bus, then
    /// `[p_pv, q_pv_prev]` per region PV.
    pub fn to_flat(&self) -> Vec<f64> {
        let m = &self.measures;
        let mut out = Vec::with_capacity(4 * m.buses.len() + 2 * m.agents.len());
        for i in 0..m.buses.len() {
            out.extend([m.p_load[i], m.q_load[i], m.v[i], m.theta[i]]);
        }
        for k in 0..m.agents.len() {
            out.extend([m.p_pv[k], m.q_pv_prev[k]]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Solved state of this step, or the restored pre-step state after a
    /// safety violation.
    pub grid_state: GridState,
    /// Reactive setpoints applied in MVAr, agent order.
    pub q_pv: Vec<f64>,
    /// Clamped ratios, agent order (empty for direct reactive commands).
    pub actions: Vec<f64>,
    pub voltage_loss: f64,
    pub reactive_loss: f64,
    pub total_loss: f64,
    pub safety_violation: bool,
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub terminated: bool,
    pub info: StepInfo,
}

/// Everything that determines the future of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub window: EpisodeWindow,
    /// Steps taken in this episode.
    pub t: usize,
    /// Injections of the current step; `q_pv` holds the last applied setpoints.
    pub injections: InjectionSet,
    pub grid: GridState,
    pub terminated: bool,
    profile_rng: ChaCha8Rng,
    obs_rng: ChaCha8Rng,
}

/// Ratio action to reactive power: `q = a * sqrt(s_max^2 - p_pv^2)`.
pub fn action_to_reactive(a: f64, p_pv: f64, s_max: f64) -> f64 {
    a * reactive_headroom(p_pv, s_max)
}

/// Available reactive capacity `sqrt(s_max^2 - p_pv^2)`, zero when `p_pv >= s_max`.
pub fn reactive_headroom(p_pv: f64, s_max: f64) -> f64 {
    (s_max * s_max - p_pv * p_pv).max(0.0).sqrt()
}

pub struct Environment {
    case: Arc<NetworkCase>,
    store: Arc<ProfileStore>,
    config: EnvConfig,
    reward: RewardSpec,
    action_bound: f64,
    solver: SolverOptions,
    /// Per region: bus positions and the loads sitting on each region bus.
    region_buses: Vec<Vec<usize>>,
    region_agents: Vec<Vec<usize>>,
    loads_at: Vec<Vec<usize>>,
    state: Option<EnvState>,
}

impl Environment {
    pub fn new(case: Arc<NetworkCase>, store: Arc<ProfileStore>, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        if store.n_agents() != case.n_agents() || store.n_loads() != case.loads().len() {
            return Err(Error::Validation(
                "profile store does not match the case's devices".into(),
            ));
        }
        if store.len() < config.day_buffer {
            return Err(Error::Environment(format!(
                "profiles cover {} steps, at least one {}-step day is required",
                store.len(),
                config.day_buffer
            )));
        }
        let reward = config.reward_spec(&case);
        reward.validate()?;
        let action_bound = config.action_bound.unwrap_or_else(|| case.action_bound());
        let mut loads_at = vec![Vec::new(); case.n_buses()];
        for (k, pos) in case.load_positions().into_iter().enumerate() {
            loads_at[pos].push(k);
        }
        let region_buses = case
            .regions()
            .iter()
            .map(|r| r.buses.iter().map(|&b| case.position(b).expect("validated")).collect())
            .collect();
        let region_agents = case
            .regions()
            .iter()
            .map(|r| {
                case.pv_units()
                    .iter()
                    .enumerate()
                    .filter(|(_, pv)| pv.region == r.id)
                    .map(|(a, _)| a)
                    .collect()
            })
            .collect();
        Ok(Environment {
            case,
            store,
            config,
            reward,
            action_bound,
            solver: SolverOptions::default(),
            region_buses,
            region_agents,
            loads_at,
            state: None,
        })
    }

    pub fn case(&self) -> &NetworkCase {
        &self.case
    }

    pub fn store(&self) -> &ProfileStore {
        &self.store
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn reward_spec(&self) -> &RewardSpec {
        &self.reward
    }

    pub fn action_bound(&self) -> f64 {
        self.action_bound
    }

    pub fn n_agents(&self) -> usize {
        self.case.n_agents()
    }

    /// Number of whole day windows in the store.
    pub fn n_days(&self) -> usize {
        self.store.len() / self.config.day_buffer
    }

    /// Flat observation length of each agent.
    pub fn observation_dims(&self) -> Vec<usize> {
        let region_dim: Vec<usize> = self
            .region_buses
            .iter()
            .zip(&self.region_agents)
            .map(|(b, a)| 4 * b.len() + 2 * a.len())
            .collect();
        self.case
            .pv_units()
            .iter()
            .map(|pv| region_dim[self.region_index(pv.region)])
            .collect()
    }

    fn region_index(&self, id: u32) -> usize {
        self.case
            .regions()
            .iter()
            .position(|r| r.id == id)
            .expect("validated region")
    }

    fn state(&self) -> Result<&EnvState> {
        self.state
            .as_ref()
            .ok_or_else(|| Error::Environment("environment has not been reset".into()))
    }

    pub fn current(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn snapshot(&self) -> Option<EnvState> {
        self.state.clone()
    }

    pub fn restore(&mut self, state: EnvState) {
        self.state = Some(state);
    }

    /// Reactive headroom of each PV at the current step, MVAr.
    pub fn q_max(&self) -> Result<Vec<f64>> {
        let st = self.state()?;
        Ok(st
            .injections
            .p_pv
            .iter()
            .zip(self.store.s_max())
            .map(|(&p, &s)| reactive_headroom(p, s))
            .collect())
    }

    /// Starts an episode in a random window.
    pub fn reset(&mut self, seed: u64) -> Result<Vec<Observation>> {
        let mut profile_rng = ChaCha8Rng::seed_from_u64(seed);
        profile_rng.set_stream(PROFILE_STREAM);
        let mut obs_rng = ChaCha8Rng::seed_from_u64(seed);
        obs_rng.set_stream(OBSERVATION_STREAM);

        let day = profile_rng.random_range(0..self.n_days());
        let offset = match self.config.start_mode {
            StartMode::Uniform => profile_rng.random_range(0..self.config.day_buffer - self.config.episode_length),
            StartMode::DayStart => 0,
        };
        let window = EpisodeWindow {
            day,
            offset,
            start: day * self.config.day_buffer + offset,
        };
        self.reset_window(window, &mut profile_rng)?;
        let st = self.state.as_mut().expect("just set");
        st.profile_rng = profile_rng;
        st.obs_rng = obs_rng;
        let (grid, inj) = (st.grid.clone(), st.injections.clone());
        Ok(self.observe(&grid, &inj))
    }

    /// Starts an episode at an explicit window; randomness is seeded by `seed`.
    pub fn reset_at(&mut self, window_start: usize, seed: u64) -> Result<Vec<Observation>> {
        if window_start + self.config.episode_length >= self.store.len() {
            return Err(Error::Environment(format!(
                "window start {window_start} leaves no room for an episode"
            )));
        }
        let mut profile_rng = ChaCha8Rng::seed_from_u64(seed);
        profile_rng.set_stream(PROFILE_STREAM);
        let mut obs_rng = ChaCha8Rng::seed_from_u64(seed);
        obs_rng.set_stream(OBSERVATION_STREAM);
        let window = EpisodeWindow {
            day: window_start / self.config.day_buffer,
            offset: window_start % self.config.day_buffer,
            start: window_start,
        };
        self.reset_window(window, &mut profile_rng)?;
        let st = self.state.as_mut().expect("just set");
        st.profile_rng = profile_rng;
        st.obs_rng = obs_rng;
        let (grid, inj) = (st.grid.clone(), st.injections.clone());
        Ok(self.observe(&grid, &inj))
    }

    fn reset_window(&mut self, window: EpisodeWindow, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut inj = self.read_injections(window.start, rng)?;
        let c = self.action_bound;
        inj.q_pv = inj
            .p_pv
            .iter()
            .zip(self.store.s_max())
            .map(|(&p, &s)| match self.config.initial_reactive {
                InitialReactive::Uniform => rng.random_range(-c..=c) * reactive_headroom(p, s),
                InitialReactive::Zero => 0.0,
            })
            .collect();
        let mut grid = solve_with(&self.case, &inj, &self.solver)?;
        if !grid.converged {
            inj.q_pv.iter_mut().for_each(|q| *q = 0.0);
            grid = solve_with(&self.case, &inj, &self.solver)?;
            if !grid.converged {
                return Err(Error::Environment(format!(
                    "power flow diverges at the start of window {}",
                    window.start
                )));
            }
        }
        self.state = Some(EnvState {
            window,
            t: 0,
            injections: inj,
            grid,
            terminated: false,
            profile_rng: ChaCha8Rng::seed_from_u64(0),
            obs_rng: ChaCha8Rng::seed_from_u64(0),
        });
        Ok(())
    }

    fn read_injections(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<InjectionSet> {
        let (p_load, q_load, mut p_pv) = self.store.read_step(index, self.config.profile_noise_sigma, rng)?;
        for (p, &s) in p_pv.iter_mut().zip(self.store.s_max()) {
            *p = p.clamp(0.0, s);
        }
        Ok(InjectionSet {
            q_pv: vec![0.0; p_pv.len()],
            p_pv,
            p_load,
            q_load,
        })
    }

    /// Applies ratio actions in `[-c, c]`; out-of-range values are clamped.
    pub fn step(&mut self, actions: &[f64]) -> Result<StepResult> {
        let st = self.state()?;
        self.check_can_step(st, actions.len())?;
        let c = self.action_bound;
        let mut clamped = 0;
        let ratios: Vec<f64> = actions
            .iter()
            .map(|&a| {
                if a.is_nan() {
                    clamped += 1;
                    log::warn!("NaN action replaced by 0");
                    0.0
                } else if a.abs() > c {
                    clamped += 1;
                    log::warn!("action {a} outside [-{c}, {c}], clamped");
                    a.clamp(-c, c)
                } else {
                    a
                }
            })
            .collect();
        let q: Vec<f64> = ratios
            .iter()
            .zip(&st.injections.p_pv)
            .zip(self.store.s_max())
            .map(|((&a, &p), &s)| action_to_reactive(a, p, s))
            .collect();
        self.apply(q, ratios, clamped)
    }

    /// Applies reactive setpoints in MVAr directly, clamped to each PV's
    /// headroom. Used by model-based baselines.
    pub fn step_reactive(&mut self, q_pv: &[f64]) -> Result<StepResult> {
        let st = self.state()?;
        self.check_can_step(st, q_pv.len())?;
        let q_max = self.q_max()?;
        let mut clamped = 0;
        let q = q_pv
            .iter()
            .zip(&q_max)
            .map(|(&q, &m)| {
                if q.is_nan() || q.abs() > m * (1.0 + 1e-12) {
                    clamped += 1;
                }
                if q.is_nan() {
                    0.0
                } else {
                    q.clamp(-m, m)
                }
            })
            .collect();
        self.apply(q, Vec::new(), clamped)
    }

    fn check_can_step(&self, st: &EnvState, n: usize) -> Result<()> {
        if st.terminated {
            return Err(Error::Environment("episode has terminated; call reset".into()));
        }
        if n != self.n_agents() {
            return Err(Error::Dimension {
                what: "actions",
                expected: self.n_agents(),
                got: n,
            });
        }
        Ok(())
    }

    fn apply(&mut self, q: Vec<f64>, actions: Vec<f64>, clamped: usize) -> Result<StepResult> {
        let mut st = self.state.take().expect("checked by caller");
        let mut inj = st.injections.clone();
        inj.q_pv = q.clone();
        let grid = solve_with(&self.case, &inj, &self.solver)?;
        let violation = !grid.converged || (self.config.check_ratings && self.rating_violated(&grid)?);

        if violation {
            // back to the pre-step state; the episode ends
            st.terminated = true;
            let observations = self.observe_quiet(&st);
            let info = StepInfo {
                grid_state: st.grid.clone(),
                q_pv: q,
                actions,
                voltage_loss: voltage_loss(&self.reward.barrier, &st.grid.v),
                reactive_loss: reactive_loss(&st.injections.q_pv)?,
                total_loss: st.grid.total_loss,
                safety_violation: true,
                clamped,
            };
            self.state = Some(st);
            return Ok(StepResult {
                observations,
                reward: self.reward.safety_penalty,
                terminated: true,
                info,
            });
        }

        let r = reward(&self.reward, &grid.v, &q)?;
        let info = StepInfo {
            voltage_loss: voltage_loss(&self.reward.barrier, &grid.v),
            reactive_loss: reactive_loss(&q)?,
            total_loss: grid.total_loss,
            grid_state: grid.clone(),
            q_pv: q.clone(),
            actions,
            safety_violation: false,
            clamped,
        };
        st.t += 1;
        let mut next = self.read_injections(st.window.start + st.t, &mut st.profile_rng)?;
        next.q_pv = q;
        st.injections = next;
        st.grid = grid;
        st.terminated = st.t >= self.config.episode_length;
        let terminated = st.terminated;
        let (g, i) = (st.grid.clone(), st.injections.clone());
        self.state = Some(st);
        let observations = self.observe(&g, &i);
        Ok(StepResult {
            observations,
            reward: r,
            terminated,
            info,
        })
    }

    fn rating_violated(&self, grid: &GridState) -> Result<bool> {
        let flows = branch_flows(&self.case, grid)?;
        Ok(self
            .case
            .branches()
            .iter()
            .zip(&flows)
            .any(|(br, f)| br.rating.is_some_and(|r| f.current > r)))
    }

    /// Observations of the current state, drawing observation noise.
    fn observe(&mut self, grid: &GridState, inj: &InjectionSet) -> Vec<Observation> {
        let sigma = self.config.obs_noise_sigma;
        let mut rng = self.state.as_ref().map(|s| s.obs_rng.clone()).expect("state present");
        let obs = self.build_observations(grid, inj, sigma, &mut rng);
        if let Some(st) = self.state.as_mut() {
            st.obs_rng = rng;
        }
        obs
    }

    /// Observations of a restored state; the noise stream is not advanced.
    fn observe_quiet(&self, st: &EnvState) -> Vec<Observation> {
        let mut rng = st.obs_rng.clone();
        self.build_observations(&st.grid, &st.injections, self.config.obs_noise_sigma, &mut rng)
    }

    fn build_observations(
        &self,
        grid: &GridState,
        inj: &InjectionSet,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Observation> {
        let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("positive sigma"));
        let mut perturb = |x: f64| match &noise {
            Some(n) => x + n.sample(rng),
            None => x,
        };
        let per_region: Vec<RegionMeasures> = self
            .case
            .regions()
            .iter()
            .enumerate()
            .map(|(r, region)| {
                let buses = &self.region_buses[r];
                let agents = &self.region_agents[r];
                let mut m = RegionMeasures {
                    buses: region.buses.clone(),
                    p_load: Vec::with_capacity(buses.len()),
                    q_load: Vec::with_capacity(buses.len()),
                    v: Vec::with_capacity(buses.len()),
                    theta: Vec::with_capacity(buses.len()),
                    agents: agents.clone(),
                    p_pv: Vec::with_capacity(agents.len()),
                    q_pv_prev: Vec::with_capacity(agents.len()),
                };
                for &pos in buses {
                    let p: f64 = self.loads_at[pos].iter().map(|&k| inj.p_load[k]).sum();
                    let q: f64 = self.loads_at[pos].iter().map(|&k| inj.q_load[k]).sum();
                    m.p_load.push(perturb(p));
                    m.q_load.push(perturb(q));
                    m.v.push(perturb(grid.v[pos]));
                    m.theta.push(perturb(grid.theta[pos]));
                }
                for &a in agents {
                    m.p_pv.push(perturb(inj.p_pv[a]));
                    m.q_pv_prev.push(perturb(inj.q_pv[a]));
                }
                m
            })
            .collect();
        self.case
            .pv_units()
            .iter()
            .map(|pv| {
                let r = self.region_index(pv.region);
                Observation {
                    agent_id: pv.agent_id,
                    region: pv.region,
                    measures: per_region[r].clone(),
                }
            })
            .collect()
    }

    /// Voltage of each PV's own bus in the last solved state.
    pub fn pv_voltages(&self) -> Result<Vec<f64>> {
        let st = self.state()?;
        Ok(self.case.pv_positions().into_iter().map(|p| st.grid.v[p]).collect())
    }
}
