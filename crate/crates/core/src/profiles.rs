//! Load and PV time series: CSV ingestion, cleaning, resampling, scaling and
//! the runtime store the environment reads from.
//!
//! A profile bundle is a directory holding `manifest.json` plus one or more
//! CSV files. Each CSV has an ISO-8601 timestamp first column followed by
//! columns named `<kind>_<id>` where kind is `load-active`, `load-reactive` or
//! `pv-active`.

pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{BusId, NetworkCase};

/// Control period: 3 minutes.
pub const NATIVE_RESOLUTION_SECS: i64 = 180;
/// Columns with more missing cells than this are dropped with an error.
pub const MAX_MISSING_FRACTION: f64 = 0.2;
pub const DEFAULT_OUTLIER_SIGMA: f64 = 7.0;
/// Inverter oversizing relative to peak active output.
pub const INVERTER_OVERSIZE: f64 = 1.2;
/// Half-width of the relative power-factor perturbation.
pub const POWER_FACTOR_SPREAD: f64 = 0.05;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    LoadActive,
    LoadReactive,
    PvActive,
}

impl ProfileKind {
    pub fn prefix(self) -> &'static str {
        match self {
            ProfileKind::LoadActive => "load-active",
            ProfileKind::LoadReactive => "load-reactive",
            ProfileKind::PvActive => "pv-active",
        }
    }

    fn from_prefix(s: &str) -> Option<Self> {
        match s {
            "load-active" => Some(ProfileKind::LoadActive),
            "load-reactive" => Some(ProfileKind::LoadReactive),
            "pv-active" => Some(ProfileKind::PvActive),
            _ => None,
        }
    }
}

impl fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// A uniformly sampled series in MW or MVAr.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub id: u32,
    pub kind: ProfileKind,
    pub start: NaiveDateTime,
    pub resolution_secs: i64,
    pub values: Vec<f64>,
}

impl Profile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn column_name(&self) -> String {
        format!("{}_{}", self.kind, self.id)
    }

    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start + chrono::Duration::seconds(self.resolution_secs * index as i64)
    }

    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .ok()
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_utc()))
}

fn parse_column_name(name: &str) -> Result<(ProfileKind, u32)> {
    let bad = || Error::parse(name, "column must be named `<kind>_<id>`");
    let (kind, id) = name.trim().rsplit_once('_').ok_or_else(bad)?;
    let kind = ProfileKind::from_prefix(kind).ok_or_else(bad)?;
    let id = id.parse().map_err(|_| bad())?;
    Ok((kind, id))
}

/// Reads a profile table. Interior gaps are filled by linear interpolation and
/// leading/trailing gaps by the nearest observed value.
pub fn ingest_csv<R: Read>(source: R) -> Result<Vec<Profile>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::parse(
            "header",
            "expected a timestamp column and at least one series",
        ));
    }
    let columns: Vec<(ProfileKind, u32)> = headers.iter().skip(1).map(parse_column_name).collect::<Result<_>>()?;

    let mut times: Vec<NaiveDateTime> = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = vec![Vec::new(); columns.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let ts = record.get(0).unwrap_or("");
        let t = parse_timestamp(ts)
            .ok_or_else(|| Error::parse("timestamp", format!("row {}: cannot parse `{ts}`", row + 1)))?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::Profile(format!(
                    "timestamps are not strictly increasing at row {}",
                    row + 1
                )));
            }
        }
        times.push(t);
        for (c, col) in cells.iter_mut().enumerate() {
            let raw = record.get(c + 1).unwrap_or("");
            let value = if raw.is_empty() {
                None
            } else {
                let v: f64 = raw.parse().map_err(|_| {
                    Error::parse(
                        &headers[c + 1],
                        format!("row {}: `{raw}` is not a decimal number", row + 1),
                    )
                })?;
                v.is_finite().then_some(v)
            };
            col.push(value);
        }
    }
    if times.is_empty() {
        return Err(Error::Profile("profile table has no rows".into()));
    }
    let resolution_secs = if times.len() > 1 {
        let step = (times[1] - times[0]).num_seconds();
        if let Some(w) = times.windows(2).position(|w| (w[1] - w[0]).num_seconds() != step) {
            return Err(Error::Profile(format!("non-uniform sampling at row {}", w + 2)));
        }
        step
    } else {
        NATIVE_RESOLUTION_SECS
    };

    columns
        .into_iter()
        .zip(cells)
        .map(|((kind, id), col)| {
            let missing = col.iter().filter(|c| c.is_none()).count();
            if missing as f64 > MAX_MISSING_FRACTION * col.len() as f64 {
                return Err(Error::Profile(format!(
                    "column {kind}_{id} has {missing} of {} cells missing",
                    col.len()
                )));
            }
            let mut values = fill_gaps(&col);
            if kind == ProfileKind::PvActive {
                values.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Ok(Profile {
                id,
                kind,
                start: times[0],
                resolution_secs,
                values,
            })
        })
        .collect()
}

/// Linear interpolation across interior gaps; nearest value at the edges.
fn fill_gaps(col: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<(usize, f64)> = col.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
    let mut out = Vec::with_capacity(col.len());
    for (i, cell) in col.iter().enumerate() {
        if let Some(v) = *cell {
            out.push(v);
            continue;
        }
        let value = match known.partition_point(|&(j, _)| j < i) {
            hi if hi == known.len() => known.last().map_or(0.0, |&(_, v)| v),
            0 => known[0].1,
            hi => {
                let (i0, v0) = known[hi - 1];
                let (i1, v1) = known[hi];
                v0 + (v1 - v0) * (i - i0) as f64 / (i1 - i0) as f64
            }
        };
        out.push(value);
    }
    out
}

/// Piecewise-linear resampling onto a new uniform grid starting at the same
/// timestamp. The last output sample never lies past the input's last sample.
pub fn resample(profile: &Profile, target_secs: i64) -> Result<Profile> {
    if target_secs <= 0 {
        return Err(Error::Profile("resample resolution must be positive".into()));
    }
    if profile.resolution_secs == target_secs || profile.values.len() < 2 {
        return Ok(Profile {
            resolution_secs: target_secs,
            ..profile.clone()
        });
    }
    let span = profile.resolution_secs * (profile.values.len() as i64 - 1);
    let n_out = (span / target_secs) as usize + 1;
    let src = profile.resolution_secs as f64;
    let values = (0..n_out)
        .map(|k| {
            let t = (k as i64 * target_secs) as f64;
            let pos = t / src;
            let lo = (pos.floor() as usize).min(profile.values.len() - 1);
            let frac = pos - lo as f64;
            if frac == 0.0 || lo + 1 >= profile.values.len() {
                profile.values[lo]
            } else {
                profile.values[lo] + (profile.values[lo + 1] - profile.values[lo]) * frac
            }
        })
        .collect();
    Ok(Profile {
        values,
        resolution_secs: target_secs,
        ..profile.clone()
    })
}

/// Replaces samples further than `k_sigma` population standard deviations
/// from the series mean with a linear interpolation of their neighbours.
pub fn remove_outliers(profile: &Profile, k_sigma: f64) -> Result<Profile> {
    let n = profile.values.len();
    if n < 2 {
        return Err(Error::Profile(format!(
            "{}: outlier removal needs at least 2 samples",
            profile.column_name()
        )));
    }
    let mean = profile.values.iter().sum::<f64>() / n as f64;
    let var = profile.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Ok(profile.clone());
    }
    let col: Vec<Option<f64>> = profile
        .values
        .iter()
        .map(|&v| ((v - mean).abs() <= k_sigma * sigma).then_some(v))
        .collect();
    if col.iter().all(Option::is_some) {
        return Ok(profile.clone());
    }
    Ok(Profile {
        values: fill_gaps(&col),
        ..profile.clone()
    })
}

/// Multiplicative noisy read `value * (1 + eps)`, `eps ~ N(0, sigma^2)`.
/// PV outputs are clamped at zero.
pub fn noisy_read<R: Rng + ?Sized>(profile: &Profile, t: usize, sigma: f64, rng: &mut R) -> Result<f64> {
    let value = *profile.values.get(t).ok_or_else(|| {
        Error::Profile(format!(
            "{}: index {t} out of range (len {})",
            profile.column_name(),
            profile.len()
        ))
    })?;
    Ok(apply_noise(value, sigma, profile.kind, rng))
}

fn apply_noise<R: Rng + ?Sized>(value: f64, sigma: f64, kind: ProfileKind, rng: &mut R) -> f64 {
    if sigma <= 0.0 {
        return value;
    }
    let eps: f64 = Normal::new(0.0, sigma).expect("sigma is positive").sample(rng);
    let noisy = value * (1.0 + eps);
    if kind == ProfileKind::PvActive {
        noisy.max(0.0)
    } else {
        noisy
    }
}

/// Reactive power for active power `p` at power factor `pf`.
pub fn reactive_from_power_factor(p: f64, pf: f64) -> f64 {
    p * pf.acos().tan()
}

/// Relative perturbation of a power factor, clamped into (0, 1].
pub fn perturbed_power_factor(pf0: f64, relative: f64) -> f64 {
    (pf0 * (1.0 + relative)).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Simulation-ready profiles plus the device assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileStore {
    profiles: BTreeMap<(ProfileKind, u32), Profile>,
    /// Per case load (load order).
    load_active: Vec<u32>,
    load_reactive: Vec<u32>,
    /// Region id -> pv-active profile id.
    pv_active: BTreeMap<u32, u32>,
    /// Region of each agent, agent order.
    agent_regions: Vec<u32>,
    /// Inverter ratings in MVA, agent order.
    s_max: Vec<f64>,
    penetration_ratio: Option<f64>,
    len: usize,
}

/// Device assignments handed to [`ProfileStore::new`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Load bus -> load-active profile id. Missing buses fall back to the case's
    /// `profile_id`.
    #[serde(default)]
    pub loads: BTreeMap<BusId, u32>,
    /// Load bus -> load-reactive profile id. Loads without one get a reactive
    /// series derived from their default power factor.
    #[serde(default)]
    pub reactive: BTreeMap<BusId, u32>,
    /// Region id -> pv-active profile id.
    pub pv_regions: BTreeMap<u32, u32>,
}

impl ProfileStore {
    pub fn new(case: &NetworkCase, profiles: Vec<Profile>, assignment: &Assignment) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut resolution = None;
        for p in profiles {
            if *resolution.get_or_insert(p.resolution_secs) != p.resolution_secs {
                return Err(Error::Profile("profiles must share one resolution".into()));
            }
            if p.kind == ProfileKind::PvActive && p.values.iter().any(|&v| v < 0.0) {
                return Err(Error::Profile(format!("{} has negative values", p.column_name())));
            }
            if map.insert((p.kind, p.id), p).is_some() {
                return Err(Error::Profile("duplicate profile column".into()));
            }
        }
        let require = |map: &BTreeMap<_, Profile>, kind: ProfileKind, id: u32, who: String| -> Result<u32> {
            if map.contains_key(&(kind, id)) {
                Ok(id)
            } else {
                Err(Error::Profile(format!("{who} references missing profile {kind}_{id}")))
            }
        };
        let load_active = case
            .loads()
            .iter()
            .map(|l| {
                let id = assignment.loads.get(&l.bus).copied().unwrap_or(l.profile_id);
                require(&map, ProfileKind::LoadActive, id, format!("load on bus {}", l.bus))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut pv_active = BTreeMap::new();
        for pv in case.pv_units() {
            let id = *assignment
                .pv_regions
                .get(&pv.region)
                .ok_or_else(|| Error::Profile(format!("region {} has no pv-active profile assigned", pv.region)))?;
            require(&map, ProfileKind::PvActive, id, format!("region {}", pv.region))?;
            pv_active.insert(pv.region, id);
        }

        let len = map.values().map(Profile::len).min().unwrap_or(0);
        let mut store = ProfileStore {
            profiles: map,
            load_active,
            load_reactive: Vec::new(),
            pv_active,
            agent_regions: case.pv_units().iter().map(|pv| pv.region).collect(),
            s_max: case.s_max_mva(),
            penetration_ratio: None,
            len,
        };
        // reactive series: explicit columns where assigned, power factor otherwise
        let mut next_id = store.next_free_id(ProfileKind::LoadReactive);
        for (k, load) in case.loads().iter().enumerate() {
            let id = match assignment.reactive.get(&load.bus) {
                Some(&id) => require(
                    &store.profiles,
                    ProfileKind::LoadReactive,
                    id,
                    format!("load on bus {}", load.bus),
                )?,
                None => {
                    let id = next_id;
                    next_id += 1;
                    let active = &store.profiles[&(ProfileKind::LoadActive, store.load_active[k])];
                    let derived = derive_reactive(active, id, load.power_factor);
                    store.profiles.insert((ProfileKind::LoadReactive, id), derived);
                    id
                }
            };
            store.load_reactive.push(id);
        }
        Ok(store)
    }

    fn next_free_id(&self, kind: ProfileKind) -> u32 {
        self.profiles
            .keys()
            .filter(|(k, _)| *k == kind)
            .map(|(_, id)| id + 1)
            .max()
            .unwrap_or(0)
    }

    /// Number of usable time steps (shortest assigned profile).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn profile(&self, kind: ProfileKind, id: u32) -> Option<&Profile> {
        self.profiles.get(&(kind, id))
    }

    pub fn profiles(&self) -> impl Iterator<Item = &Profile> {
        self.profiles.values()
    }

    pub fn penetration_ratio(&self) -> Option<f64> {
        self.penetration_ratio
    }

    /// Inverter apparent-power ratings in MVA, agent order.
    pub fn s_max(&self) -> &[f64] {
        &self.s_max
    }

    pub fn load_active_profile(&self, load: usize) -> &Profile {
        &self.profiles[&(ProfileKind::LoadActive, self.load_active[load])]
    }

    pub fn load_reactive_profile(&self, load: usize) -> &Profile {
        &self.profiles[&(ProfileKind::LoadReactive, self.load_reactive[load])]
    }

    pub fn pv_profile(&self, agent: usize) -> &Profile {
        let region = self.agent_regions[agent];
        &self.profiles[&(ProfileKind::PvActive, self.pv_active[&region])]
    }

    pub fn n_loads(&self) -> usize {
        self.load_active.len()
    }

    pub fn n_agents(&self) -> usize {
        self.agent_regions.len()
    }

    /// Total active load at step `t`, MW.
    pub fn total_load(&self, t: usize) -> f64 {
        (0..self.n_loads()).map(|k| self.load_active_profile(k).values[t]).sum()
    }

    /// Total PV active generation at step `t`, MW.
    pub fn total_pv(&self, t: usize) -> f64 {
        (0..self.n_agents()).map(|a| self.pv_profile(a).values[t]).sum()
    }

    pub fn rated_load(&self) -> f64 {
        (0..self.len).map(|t| self.total_load(t)).fold(0.0, f64::max)
    }

    pub fn rated_pv(&self) -> f64 {
        (0..self.len).map(|t| self.total_pv(t)).fold(0.0, f64::max)
    }

    /// Noisy per-device values at step `t`: `(p_load, q_load, p_pv)`.
    pub fn read_step<R: Rng + ?Sized>(
        &self,
        t: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut p_load = Vec::with_capacity(self.n_loads());
        let mut q_load = Vec::with_capacity(self.n_loads());
        for k in 0..self.n_loads() {
            p_load.push(noisy_read(self.load_active_profile(k), t, sigma, rng)?);
            q_load.push(noisy_read(self.load_reactive_profile(k), t, sigma, rng)?);
        }
        let p_pv = (0..self.n_agents())
            .map(|a| noisy_read(self.pv_profile(a), t, sigma, rng))
            .collect::<Result<_>>()?;
        Ok((p_load, q_load, p_pv))
    }

    fn scale_kind(&mut self, kind: ProfileKind, ids: Vec<u32>, factor: f64) {
        let mut ids = ids;
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            if let Some(p) = self.profiles.get_mut(&(kind, id)) {
                p.values.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Uniformly rescales load-active series so the peak total load equals
    /// `rated_mw`. Reactive series scale along.
    pub fn scale_load(&self, rated_mw: f64) -> Result<ProfileStore> {
        let current = self.rated_load();
        if !(current > 0.0) {
            return Err(Error::Profile("rated load is zero".into()));
        }
        let factor = rated_mw / current;
        let mut out = self.clone();
        out.scale_kind(ProfileKind::LoadActive, self.load_active.clone(), factor);
        out.scale_kind(ProfileKind::LoadReactive, self.load_reactive.clone(), factor);
        Ok(out)
    }
}

fn derive_reactive(active: &Profile, id: u32, pf: f64) -> Profile {
    Profile {
        id,
        kind: ProfileKind::LoadReactive,
        values: active
            .values
            .iter()
            .map(|&p| reactive_from_power_factor(p, pf))
            .collect(),
        ..active.clone()
    }
}

/// Rescales PV series so that peak total PV generation over peak total load
/// equals `pr`, then sizes each inverter at 1.2x its peak active output.
pub fn scale_penetration(store: &ProfileStore, case: &NetworkCase, pr: f64) -> Result<ProfileStore> {
    if !(pr > 0.0) {
        return Err(Error::Validation(format!(
            "penetration ratio must be positive, got {pr}"
        )));
    }
    if store.n_agents() != case.n_agents() {
        return Err(Error::Dimension {
            what: "pv agents",
            expected: case.n_agents(),
            got: store.n_agents(),
        });
    }
    let rated_load = store.rated_load();
    if !(rated_load > 0.0) {
        return Err(Error::Profile("rated load consumption is zero".into()));
    }
    let rated_pv = store.rated_pv();
    if !(rated_pv > 0.0) {
        return Err(Error::Profile("rated PV generation is zero".into()));
    }
    let factor = pr * rated_load / rated_pv;
    let mut out = store.clone();
    out.scale_kind(
        ProfileKind::PvActive,
        store.pv_active.values().copied().collect(),
        factor,
    );
    out.s_max = (0..out.n_agents())
        .map(|a| INVERTER_OVERSIZE * out.pv_profile(a).peak())
        .collect();
    out.penetration_ratio = Some(pr);
    Ok(out)
}

/// Regenerates every load's reactive series from its active series and a
/// power factor perturbed uniformly within +/-5% of the case default.
pub fn perturb_power_factor(store: &ProfileStore, case: &NetworkCase, seed: u64) -> Result<ProfileStore> {
    if store.n_loads() != case.loads().len() {
        return Err(Error::Dimension {
            what: "loads",
            expected: case.loads().len(),
            got: store.n_loads(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.clone();
    out.profiles.retain(|(kind, _), _| *kind != ProfileKind::LoadReactive);
    out.load_reactive.clear();
    for (k, load) in case.loads().iter().enumerate() {
        let relative = rng.random_range(-POWER_FACTOR_SPREAD..=POWER_FACTOR_SPREAD);
        let pf = perturbed_power_factor(load.power_factor, relative);
        let id = k as u32;
        let derived = derive_reactive(store.load_active_profile(k), id, pf);
        out.profiles.insert((ProfileKind::LoadReactive, id), derived);
        out.load_reactive.push(id);
    }
    Ok(out)
}

/// `manifest.json` of a profile bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub files: Vec<String>,
    #[serde(default)]
    pub pv_profiles: Vec<RegionProfile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub load_profiles: Vec<BusProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rated_load_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penetration_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_factor_seed: Option<u64>,
    #[serde(default = "default_outlier_sigma")]
    pub outlier_sigma: f64,
}

fn default_outlier_sigma() -> f64 {
    DEFAULT_OUTLIER_SIGMA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProfile {
    pub region: u32,
    pub profile_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusProfile {
    pub bus: BusId,
    pub profile_id: u32,
}

impl Manifest {
    pub fn assignment(&self) -> Assignment {
        Assignment {
            loads: self.load_profiles.iter().map(|b| (b.bus, b.profile_id)).collect(),
            reactive: BTreeMap::new(),
            pv_regions: self.pv_profiles.iter().map(|r| (r.region, r.profile_id)).collect(),
        }
    }
}

/// Runs the full pipeline on a bundle directory:
/// ingest -> outlier removal -> resample -> penetration scaling -> power factors.
pub fn load_bundle(dir: impl AsRef<Path>, case: &NetworkCase) -> Result<ProfileStore> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut raw = Vec::new();
    for file in &manifest.files {
        let path = dir.join(file);
        let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        raw.extend(ingest_csv(f)?);
    }
    build_store(case, raw, &manifest)
}

/// Pipeline stages after ingestion.
pub fn build_store(case: &NetworkCase, raw: Vec<Profile>, manifest: &Manifest) -> Result<ProfileStore> {
    let cleaned = raw
        .iter()
        .map(|p| {
            let p = if p.len() >= 2 {
                remove_outliers(p, manifest.outlier_sigma)?
            } else {
                p.clone()
            };
            resample(&p, NATIVE_RESOLUTION_SECS)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut store = ProfileStore::new(case, cleaned, &manifest.assignment())?;
    if let Some(rated) = manifest.rated_load_mw {
        store = store.scale_load(rated)?;
    }
    if let Some(pr) = manifest.penetration_ratio {
        store = scale_penetration(&store, case, pr)?;
    }
    perturb_power_factor(&store, case, manifest.power_factor_seed.unwrap_or(0))
}

/// Writes profiles as a single CSV with the given file name.
pub fn write_csv(path: impl AsRef<Path>, profiles: &[Profile]) -> Result<()> {
    let path = path.as_ref();
    let first = profiles
        .first()
        .ok_or_else(|| Error::Profile("nothing to write".into()))?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["timestamp".to_owned()];
    header.extend(profiles.iter().map(Profile::column_name));
    w.write_record(&header)?;
    let n = profiles.iter().map(Profile::len).min().unwrap_or(0);
    for t in 0..n {
        let mut row = vec![first.timestamp(t).format(TIMESTAMP_FORMAT).to_string()];
        row.extend(profiles.iter().map(|p| p.values[t].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
