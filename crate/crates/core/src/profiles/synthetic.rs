//! Synthetic daily load and PV series for a case, used by tests and
//! `avc synth`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_csv, Manifest, Profile, ProfileKind, RegionProfile, DEFAULT_OUTLIER_SIGMA, NATIVE_RESOLUTION_SECS};
use crate::error::{Error, Result};
use crate::network::NetworkCase;

pub const STEPS_PER_DAY: usize = (24 * 3600 / NATIVE_RESOLUTION_SECS) as usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticOptions {
    pub days: usize,
    pub start: NaiveDate,
    pub seed: u64,
    pub penetration_ratio: f64,
    /// Peak total load; the case's nominal total when unset.
    pub rated_load_mw: Option<f64>,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            days: 28,
            start: NaiveDate::from_ymd_opt(2012, 6, 1).expect("valid date"),
            seed: 0,
            penetration_ratio: 2.5,
            rated_load_mw: None,
        }
    }
}

fn bump(h: f64, centre: f64, width: f64) -> f64 {
    (-((h - centre) / width).powi(2)).exp()
}

fn load_shape(h: f64) -> f64 {
    0.62 + 0.22 * bump(h, 8.5, 1.6) + 0.38 * bump(h, 19.0, 2.2) - 0.18 * bump(h, 3.5, 2.5)
}

/// Clear-sky PV shape for hour `h` on day-of-year `doy`, peak near 1.
fn clear_sky(h: f64, doy: f64) -> f64 {
    let season = (2.0 * PI * (doy - 80.0) / 365.0).sin();
    let daylight = 12.0 + 3.5 * season;
    let sunrise = 12.0 - daylight / 2.0;
    let x = (h - sunrise) / daylight;
    if !(0.0..=1.0).contains(&x) {
        return 0.0;
    }
    (0.8 + 0.2 * season) * (PI * x).sin().powf(1.3)
}

/// Builds one load-active profile per distinct load profile id and one
/// pv-active profile per region (id = region id).
pub fn generate(case: &NetworkCase, opts: &SyntheticOptions) -> (Vec<Profile>, Manifest) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.days.max(1) * STEPS_PER_DAY;
    let start: NaiveDateTime = opts.start.and_hms_opt(0, 0, 0).expect("midnight");
    let hour = |t: usize| (t % STEPS_PER_DAY) as f64 * NATIVE_RESOLUTION_SECS as f64 / 3600.0;
    let std = Normal::new(0.0, 1.0).expect("unit normal");

    let mut profiles = Vec::new();
    let ids: BTreeSet<u32> = case.loads().iter().map(|l| l.profile_id).collect();
    let day_levels: Vec<f64> = (0..opts.days.max(1))
        .map(|_| 1.0 + 0.06 * std.sample(&mut rng))
        .collect();
    for id in ids {
        let nominal: f64 = case
            .loads()
            .iter()
            .filter(|l| l.profile_id == id)
            .map(|l| l.p_mw.unwrap_or(0.1))
            .sum::<f64>()
            / case.loads().iter().filter(|l| l.profile_id == id).count() as f64;
        let phase = rng.random_range(-0.75..0.75);
        let amp = rng.random_range(0.9..1.1);
        let mut ar = 0.0;
        let values = (0..n)
            .map(|t| {
                ar = 0.95 * ar + 0.02 * std.sample(&mut rng);
                let level = day_levels[t / STEPS_PER_DAY];
                (nominal * amp * level * load_shape(hour(t) - phase) * (1.0 + ar)).max(0.0)
            })
            .collect();
        profiles.push(Profile {
            id,
            kind: ProfileKind::LoadActive,
            start,
            resolution_secs: NATIVE_RESOLUTION_SECS,
            values,
        });
    }

    // shared weather per day, with regional variation on top
    let weather: Vec<f64> = (0..opts.days.max(1))
        .map(|_| {
            if rng.random_bool(0.6) {
                1.0
            } else {
                rng.random_range(0.35..0.9)
            }
        })
        .collect();
    let mut pv_profiles = Vec::new();
    for region in case.regions() {
        let mut cloud = 0.0;
        let values = (0..n)
            .map(|t| {
                let day = t / STEPS_PER_DAY;
                let doy = (opts.start + chrono::Days::new(day as u64)).ordinal() as f64;
                let w = weather[day];
                cloud = 0.97 * cloud + (1.0 - w + 0.02) * 0.15 * std.sample(&mut rng);
                let factor = (w + cloud).clamp(0.05, 1.0);
                (clear_sky(hour(t), doy) * factor).max(0.0)
            })
            .collect();
        profiles.push(Profile {
            id: region.id,
            kind: ProfileKind::PvActive,
            start,
            resolution_secs: NATIVE_RESOLUTION_SECS,
            values,
        });
        pv_profiles.push(RegionProfile {
            region: region.id,
            profile_id: region.id,
        });
    }

    let rated = opts
        .rated_load_mw
        .unwrap_or_else(|| case.loads().iter().map(|l| l.p_mw.unwrap_or(0.1)).sum());
    let manifest = Manifest {
        files: vec!["profiles.csv".into()],
        pv_profiles,
        load_profiles: Vec::new(),
        rated_load_mw: Some(rated),
        penetration_ratio: Some(opts.penetration_ratio),
        power_factor_seed: Some(opts.seed),
        outlier_sigma: DEFAULT_OUTLIER_SIGMA,
    };
    (profiles, manifest)
}

/// Writes `profiles.csv` and `manifest.json` into `dir`.
pub fn write_bundle(dir: impl AsRef<Path>, case: &NetworkCase, opts: &SyntheticOptions) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (profiles, manifest) = generate(case, opts);
    write_csv(dir.join(&manifest.files[0]), &profiles)?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
