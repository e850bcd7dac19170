#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use avc_core::network::NetworkCase;
use avc_core::profiles::synthetic::{generate, SyntheticOptions};
use avc_core::profiles::{build_store, Assignment, Profile, ProfileKind, ProfileStore, NATIVE_RESOLUTION_SECS};
use chrono::NaiveDate;

/// Slack plus one load bus carrying a single PV in region 1.
pub fn two_bus(r: f64, x: f64, s_max: f64) -> NetworkCase {
    let text = format!(
        r#"{{
        "header": {{"name": "two-bus"}},
        "buses": [{{"index": 0, "nominal_kv": 1}}, {{"index": 1, "nominal_kv": 1}}],
        "branches": [{{"from": 0, "to": 1, "r_pu": {r}, "x_pu": {x}}}],
        "pvs": [{{"bus": 1, "agent_id": 0, "s_max_mva": {s_max}, "region": 1}}],
        "loads": [{{"bus": 1, "profile_id": 0}}],
        "regions": [{{"id": 1, "buses": [1]}}]
    }}"#
    );
    NetworkCase::from_json(&text).unwrap()
}

pub fn case33() -> Arc<NetworkCase> {
    Arc::new(NetworkCase::bundled("case33").unwrap())
}

pub fn synthetic_store(case: &NetworkCase, days: usize, seed: u64) -> Arc<ProfileStore> {
    let opts = SyntheticOptions {
        days,
        seed,
        ..Default::default()
    };
    let (raw, manifest) = generate(case, &opts);
    Arc::new(build_store(case, raw, &manifest).unwrap())
}

fn series(kind: ProfileKind, id: u32, values: Vec<f64>) -> Profile {
    Profile {
        id,
        kind,
        start: NaiveDate::from_ymd_opt(2020, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap(),
        resolution_secs: NATIVE_RESOLUTION_SECS,
        values,
    }
}

/// Store for a case whose loads all use profile 0 and whose regions all use
/// pv profile 0, with explicit zero-free reactive columns.
pub fn flat_store(case: &NetworkCase, load: Vec<f64>, load_q: Vec<f64>, pv: Vec<f64>) -> ProfileStore {
    let mut assignment = Assignment::default();
    for l in case.loads() {
        assignment.loads.insert(l.bus, 0);
        assignment.reactive.insert(l.bus, 0);
    }
    assignment.pv_regions = case.regions().iter().map(|r| (r.id, 0)).collect::<BTreeMap<_, _>>();
    let profiles = vec![
        series(ProfileKind::LoadActive, 0, load),
        series(ProfileKind::LoadReactive, 0, load_q),
        series(ProfileKind::PvActive, 0, pv),
    ];
    ProfileStore::new(case, profiles, &assignment).unwrap()
}
