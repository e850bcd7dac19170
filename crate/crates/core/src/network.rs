//! Static grid description: buses, branches, PV units, loads and the control
//! region partition.
//!
//! Cases are read from a JSON document whose field names are fixed:
//!
//! ```json
//! {
//!   "header":   {"name": "...", "base_power_mva": 1.0, "v_ref_pu": 1.0, "action_bound": 0.8},
//!   "buses":    [{"index": 0, "nominal_kv": 12.66, "v_min_pu": 0.95, "v_max_pu": 1.05}],
//!   "branches": [{"from": 0, "to": 2, "r_pu": 0.01, "x_pu": 0.01, "tap_ratio": 1.0}],
//!   "pvs":      [{"bus": 13, "agent_id": 0, "s_max_mva": 1.75, "region": 1}],
//!   "loads":    [{"bus": 2, "profile_id": 1}],
//!   "regions":  [{"id": 1, "buses": [7, 8, 9]}]
//! }
//! ```
//!
//! Bus `index` values are labels. They must be unique and the slack bus is the
//! one labelled `0`; labels need not be contiguous, which lets a case keep the
//! numbering of the source data it was derived from. Internally every bus also
//! has a dense position, with the slack at position 0.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TopologyError};

/// External bus label as written in the case document.
pub type BusId = i64;

pub const SLACK_BUS: BusId = 0;

fn default_base_power() -> f64 {
    1.0
}
fn default_v_ref() -> f64 {
    1.0
}
fn default_action_bound() -> f64 {
    0.8
}
fn default_v_min() -> f64 {
    0.95
}
fn default_v_max() -> f64 {
    1.05
}
fn default_tap() -> f64 {
    1.0
}
fn default_power_factor() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseHeader {
    pub name: String,
    #[serde(default = "default_base_power")]
    pub base_power_mva: f64,
    #[serde(default = "default_v_ref")]
    pub v_ref_pu: f64,
    /// Bound `c` on the per-agent action ratio.
    #[serde(default = "default_action_bound")]
    pub action_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub index: BusId,
    pub nominal_kv: f64,
    #[serde(rename = "v_min_pu", default = "default_v_min")]
    pub v_min: f64,
    #[serde(rename = "v_max_pu", default = "default_v_max")]
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    #[serde(rename = "r_pu")]
    pub r: f64,
    #[serde(rename = "x_pu")]
    pub x: f64,
    #[serde(default = "default_tap")]
    pub tap_ratio: f64,
    /// Optional series current rating in per-unit, used by the optional
    /// branch-loading safety check.
    #[serde(rename = "rating_pu", default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvUnit {
    pub bus: BusId,
    pub agent_id: u32,
    pub s_max_mva: f64,
    pub region: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadUnit {
    pub bus: BusId,
    pub profile_id: u32,
    /// Nominal active demand, used when synthesizing profiles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_mvar: Option<f64>,
    /// Default power factor used to derive reactive demand.
    #[serde(default = "default_power_factor")]
    pub power_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub id: u32,
    pub buses: Vec<BusId>,
}

/// Raw case document, exactly as serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseDocument {
    pub header: CaseHeader,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub pvs: Vec<PvUnit>,
    #[serde(default)]
    pub loads: Vec<LoadUnit>,
    #[serde(default)]
    pub regions: Vec<Region>,
}

/// A validated, immutable radial network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    header: CaseHeader,
    /// Slack first, then document order.
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    /// Sorted by agent id.
    pv_units: Vec<PvUnit>,
    loads: Vec<LoadUnit>,
    /// Sorted by region id.
    regions: Vec<Region>,
    position: HashMap<BusId, usize>,
    branch_ends: Vec<(usize, usize)>,
}

impl NetworkCase {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CaseDocument = serde_json::from_str(text).map_err(|e| {
            // serde reports the offending field in its message
            Error::parse(json_field_hint(&e), e.to_string())
        })?;
        Self::from_document(doc)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Cases shipped with the crate: `case33` and `case141`.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = match name {
            "case33" => include_str!("../data/case33.json"),
            "case141" => include_str!("../data/case141.json"),
            other => {
                return Err(Error::Validation(format!("no bundled case named `{other}`")));
            }
        };
        Self::from_json(text)
    }

    pub fn from_document(doc: CaseDocument) -> Result<Self> {
        let CaseDocument {
            header,
            buses,
            branches,
            mut pvs,
            loads,
            mut regions,
        } = doc;

        if !(header.base_power_mva > 0.0 && header.base_power_mva.is_finite()) {
            return Err(Error::parse("header.base_power_mva", "must be positive"));
        }
        if !(header.action_bound > 0.0 && header.action_bound.is_finite()) {
            return Err(Error::Validation("action_bound must be > 0".into()));
        }
        if buses.is_empty() {
            return Err(Error::parse("buses", "at least one bus is required"));
        }

        let slack_count = buses.iter().filter(|b| b.index == SLACK_BUS).count();
        if slack_count != 1 {
            return Err(Error::Validation(format!(
                "expected exactly one slack bus with index 0, found {slack_count}"
            )));
        }
        let mut ordered = Vec::with_capacity(buses.len());
        ordered.extend(buses.iter().filter(|b| b.index == SLACK_BUS).cloned());
        ordered.extend(buses.iter().filter(|b| b.index != SLACK_BUS).cloned());

        let mut position = HashMap::with_capacity(ordered.len());
        for (pos, bus) in ordered.iter().enumerate() {
            if position.insert(bus.index, pos).is_some() {
                return Err(Error::Validation(format!("duplicate bus index {}", bus.index)));
            }
            if !(bus.v_min < header.v_ref_pu && header.v_ref_pu < bus.v_max) {
                return Err(Error::Validation(format!(
                    "bus {}: voltage limits [{}, {}] must bracket v_ref {}",
                    bus.index, bus.v_min, bus.v_max, header.v_ref_pu
                )));
            }
            if !(bus.nominal_kv > 0.0) {
                return Err(Error::parse(
                    "buses.nominal_kv",
                    format!("bus {} must be positive", bus.index),
                ));
            }
        }

        let mut branch_ends = Vec::with_capacity(branches.len());
        for br in &branches {
            if br.from == br.to {
                return Err(Error::Validation(format!(
                    "branch {}-{} is a self loop",
                    br.from, br.to
                )));
            }
            if !(br.r >= 0.0) || !br.r.is_finite() {
                return Err(Error::Validation(format!(
                    "branch {}-{}: r must be >= 0",
                    br.from, br.to
                )));
            }
            if !(br.x > 0.0) || !br.x.is_finite() {
                return Err(Error::Validation(format!(
                    "branch {}-{}: x must be > 0",
                    br.from, br.to
                )));
            }
            if !(br.tap_ratio > 0.0) {
                return Err(Error::Validation(format!(
                    "branch {}-{}: tap_ratio must be > 0",
                    br.from, br.to
                )));
            }
            let lookup = |bus: BusId| {
                position.get(&bus).copied().ok_or(TopologyError::UnknownBus {
                    from: br.from,
                    to: br.to,
                    bus,
                })
            };
            branch_ends.push((lookup(br.from)?, lookup(br.to)?));
        }

        pvs.sort_by_key(|p| p.agent_id);
        for pair in pvs.windows(2) {
            if pair[0].agent_id == pair[1].agent_id {
                return Err(Error::Validation(format!("duplicate agent_id {}", pair[0].agent_id)));
            }
        }
        for pv in &pvs {
            if !position.contains_key(&pv.bus) {
                return Err(Error::Validation(format!(
                    "pv agent {} references unknown bus {}",
                    pv.agent_id, pv.bus
                )));
            }
            if !(pv.s_max_mva > 0.0) {
                return Err(Error::Validation(format!(
                    "pv agent {}: s_max must be > 0",
                    pv.agent_id
                )));
            }
        }

        let mut load_buses = BTreeSet::new();
        for load in &loads {
            if !position.contains_key(&load.bus) {
                return Err(Error::Validation(format!("load references unknown bus {}", load.bus)));
            }
            if !load_buses.insert(load.bus) {
                return Err(Error::Validation(format!("more than one load on bus {}", load.bus)));
            }
            if !(load.power_factor > 0.0 && load.power_factor <= 1.0) {
                return Err(Error::Validation(format!(
                    "load on bus {}: power factor must lie in (0, 1]",
                    load.bus
                )));
            }
        }

        regions.sort_by_key(|r| r.id);
        let mut owner: BTreeMap<BusId, u32> = BTreeMap::new();
        for (i, region) in regions.iter().enumerate() {
            if i > 0 && regions[i - 1].id == region.id {
                return Err(Error::Validation(format!("duplicate region id {}", region.id)));
            }
            if region.buses.is_empty() {
                return Err(Error::Validation(format!("region {} is empty", region.id)));
            }
            for &bus in &region.buses {
                if bus == SLACK_BUS {
                    return Err(Error::Validation(format!(
                        "region {} contains the slack bus",
                        region.id
                    )));
                }
                if !position.contains_key(&bus) {
                    return Err(Error::Validation(format!(
                        "region {} references unknown bus {bus}",
                        region.id
                    )));
                }
                if let Some(prev) = owner.insert(bus, region.id) {
                    return Err(Error::Validation(format!(
                        "bus {bus} is listed in regions {prev} and {}",
                        region.id
                    )));
                }
            }
        }
        for pv in &pvs {
            match owner.get(&pv.bus) {
                Some(&id) if id == pv.region => {}
                Some(&id) => {
                    return Err(Error::Validation(format!(
                        "pv agent {} declares region {} but bus {} belongs to region {id}",
                        pv.agent_id, pv.region, pv.bus
                    )))
                }
                None => {
                    return Err(Error::Validation(format!(
                        "pv agent {} on bus {} is not in any region",
                        pv.agent_id, pv.bus
                    )))
                }
            }
        }

        let case = NetworkCase {
            header,
            buses: ordered,
            branches,
            pv_units: pvs,
            loads,
            regions,
            position,
            branch_ends,
        };
        case.validate_radial()?;
        Ok(case)
    }

    /// Checks that the branch graph is a spanning tree rooted at the slack bus.
    pub fn validate_radial(&self) -> Result<(), TopologyError> {
        check_tree(
            self.buses.len(),
            &self.branch_ends,
            |pos| self.buses[pos].index,
            |i| (self.branches[i].from, self.branches[i].to),
        )
    }

    pub fn to_document(&self) -> CaseDocument {
        CaseDocument {
            header: self.header.clone(),
            buses: self.buses.clone(),
            branches: self.branches.clone(),
            pvs: self.pv_units.clone(),
            loads: self.loads.clone(),
            regions: self.regions.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("case document is always serializable")
    }

    pub fn name(&self) -> &str {
        &self.header.name
    }
    pub fn header(&self) -> &CaseHeader {
        &self.header
    }
    pub fn v_ref(&self) -> f64 {
        self.header.v_ref_pu
    }
    pub fn base_power(&self) -> f64 {
        self.header.base_power_mva
    }
    pub fn action_bound(&self) -> f64 {
        self.header.action_bound
    }
    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }
    pub fn pv_units(&self) -> &[PvUnit] {
        &self.pv_units
    }
    pub fn loads(&self) -> &[LoadUnit] {
        &self.loads
    }
    pub fn regions(&self) -> &[Region] {
        &self.regions
    }
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }
    pub fn n_agents(&self) -> usize {
        self.pv_units.len()
    }

    /// Dense position of a bus label.
    pub fn position(&self, bus: BusId) -> Option<usize> {
        self.position.get(&bus).copied()
    }

    pub fn label(&self, position: usize) -> BusId {
        self.buses[position].index
    }

    /// Branch end positions, parallel to [`branches`](Self::branches).
    pub fn branch_ends(&self) -> &[(usize, usize)] {
        &self.branch_ends
    }

    /// Positions of every bus except the slack.
    pub fn controlled_positions(&self) -> Vec<usize> {
        (1..self.buses.len()).collect()
    }

    pub fn pv_positions(&self) -> Vec<usize> {
        self.pv_units.iter().map(|pv| self.position[&pv.bus]).collect()
    }

    pub fn load_positions(&self) -> Vec<usize> {
        self.loads.iter().map(|l| self.position[&l.bus]).collect()
    }

    pub fn region(&self, id: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    /// The region containing `bus`, or `None` for unpartitioned buses such as
    /// the slack.
    pub fn region_of(&self, bus: BusId) -> Result<Option<&Region>> {
        if !self.position.contains_key(&bus) {
            return Err(Error::UnknownBus(bus));
        }
        Ok(self.regions.iter().find(|r| r.buses.contains(&bus)))
    }

    pub fn to_per_unit(&self, physical: f64) -> f64 {
        physical / self.header.base_power_mva
    }

    pub fn to_physical(&self, per_unit: f64) -> f64 {
        per_unit * self.header.base_power_mva
    }

    /// Apparent-power ratings in MVA, ordered by agent.
    pub fn s_max_mva(&self) -> Vec<f64> {
        self.pv_units.iter().map(|pv| pv.s_max_mva).collect()
    }
}

/// Series admittance `(g, b)` of a branch impedance `r + jx`.
pub fn branch_admittance(branch: &Branch) -> Result<(f64, f64)> {
    let denom = branch.r * branch.r + branch.x * branch.x;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::DegenerateBranch {
            from: branch.from,
            to: branch.to,
        });
    }
    Ok((branch.r / denom, -branch.x / denom))
}

fn check_tree(
    n: usize,
    ends: &[(usize, usize)],
    label: impl Fn(usize) -> BusId,
    branch_label: impl Fn(usize) -> (BusId, BusId),
) -> Result<(), TopologyError> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut degree = vec![0usize; n];
    let mut adjacency = vec![Vec::new(); n];
    for (k, &(a, b)) in ends.iter().enumerate() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            let (from, to) = branch_label(k);
            return Err(TopologyError::Cycle { from, to });
        }
        parent[ra] = rb;
        degree[a] += 1;
        degree[b] += 1;
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    if n > 1 {
        if let Some(pos) = (0..n).find(|&p| degree[p] == 0) {
            return Err(TopologyError::OrphanBus { bus: label(pos) });
        }
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if let Some(pos) = seen.iter().position(|s| !s) {
        return Err(TopologyError::Disconnected { bus: label(pos) });
    }
    if ends.len() + 1 != n {
        return Err(TopologyError::EdgeCount {
            buses: n,
            branches: ends.len(),
        });
    }
    Ok(())
}

fn json_field_hint(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    // "missing field `x`" / "unknown field `x`"
    msg.split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| format!("line {}", err.line()))
}
