//! Episode records, voltage-control metrics and the evaluation runner.
//!
//! Records are line-delimited JSON: one `{"kind":"episode",...}` header line
//! followed by one `{"kind":"step",...}` line per environment step.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::BarrierShape;
use crate::control::{apply, Droop, DroopParams, NoControl, OpfPolicy, OpfSettings, Policy, RandomPolicy};
use crate::env::{EnvConfig, Environment, EpisodeWindow};
use crate::error::{Error, Result};
use crate::network::NetworkCase;
use crate::profiles::ProfileStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub case: String,
    pub controller: String,
    pub barrier: BarrierShape,
    pub seed: u64,
    pub window: EpisodeWindow,
    pub v_ref: f64,
    pub v_lower: f64,
    pub v_upper: f64,
    /// Bus positions the metrics are computed over.
    pub controlled: Vec<usize>,
    pub n_agents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Voltage magnitude per bus position.
    pub v: Vec<f64>,
    /// Ratio actions; empty when the controller set reactive power directly.
    pub actions: Vec<f64>,
    /// Applied reactive power, MVAr.
    pub q_pv: Vec<f64>,
    pub reward: f64,
    /// MW.
    pub total_loss: f64,
    pub safety_violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Episode(EpisodeHeader),
    Step(StepRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Validation("episode record has no steps".into()));
        }
        let n_bus = self.steps[0].v.len();
        if let Some(&bad) = self.header.controlled.iter().find(|&&p| p >= n_bus) {
            return Err(Error::Validation(format!("controlled bus position {bad} out of range")));
        }
        if self.header.controlled.is_empty() {
            return Err(Error::Validation("record has no controlled buses".into()));
        }
        for s in &self.steps {
            if s.v.len() != n_bus {
                return Err(Error::Dimension {
                    what: "bus voltages",
                    expected: n_bus,
                    got: s.v.len(),
                });
            }
            if s.q_pv.len() != self.header.n_agents {
                return Err(Error::Dimension {
                    what: "reactive setpoints",
                    expected: self.header.n_agents,
                    got: s.q_pv.len(),
                });
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<records>", e);
        serde_json::to_writer(&mut w, &Line::Episode(self.header.clone()))?;
        w.write_all(b"\n").map_err(io)?;
        for s in &self.steps {
            serde_json::to_writer(&mut w, &Line::Step(s.clone()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    /// Parses every episode in a JSONL stream.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<EpisodeRecord>> {
        let mut out: Vec<EpisodeRecord> = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<records>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                Line::Episode(header) => out.push(EpisodeRecord {
                    header,
                    steps: Vec::new(),
                }),
                Line::Step(step) => out
                    .last_mut()
                    .ok_or_else(|| Error::parse("records", format!("line {}: step before episode header", n + 1)))?
                    .steps
                    .push(step),
            }
        }
        Ok(out)
    }
}

/// Writes one `episode_NNNN.jsonl` file per record.
pub fn write_records(dir: impl AsRef<Path>, records: &[EpisodeRecord]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let path = dir.join(format!("episode_{i:04}.jsonl"));
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            rec.write_jsonl(&mut w)?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Reads all `*.jsonl` files of a directory (or a single file), in file-name order.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>> {
    let path = path.as_ref();
    let mut files = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Validation(format!("no .jsonl records under {}", path.display())));
    }
    let mut out = Vec::new();
    for f in files.drain(..) {
        let file = std::fs::File::open(&f).map_err(|e| Error::io(&f, e))?;
        out.extend(EpisodeRecord::read_jsonl(BufReader::new(file))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cr: f64,
    pub pl_mean: f64,
    pub pl_std: f64,
    pub vr: f64,
    pub ql_mean: f64,
    pub pct_out: f64,
    pub pct_below: f64,
    pub pct_above: f64,
    pub v_dev_mean: f64,
    pub max_drop_dev: f64,
    pub max_rise_dev: f64,
    pub steps: usize,
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    xs.sum::<f64>() / n as f64
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

fn controlled<'a>(rec: &'a EpisodeRecord, step: &'a StepRecord) -> impl ExactSizeIterator<Item = f64> + 'a {
    rec.header.controlled.iter().map(move |&p| step.v[p])
}

/// Fraction of steps where every controlled bus is inside the bounds.
pub fn metric_cr(rec: &EpisodeRecord) -> Result<f64> {
    rec.validate()?;
    let (lo, hi) = (rec.header.v_lower, rec.header.v_upper);
    let ok = rec
        .steps
        .iter()
        .filter(|s| controlled(rec, s).all(|v| v >= lo && v <= hi))
        .count();
    Ok(ok as f64 / rec.steps.len() as f64)
}

/// Mean and population std of per-step total loss, MW.
pub fn metric_pl(rec: &EpisodeRecord) -> Result<(f64, f64)> {
    rec.validate()?;
    let losses: Vec<f64> = rec.steps.iter().map(|s| s.total_loss).collect();
    Ok(mean_std(&losses))
}

/// Mean over steps of the fraction of controlled buses out of bounds.
pub fn metric_vr(rec: &EpisodeRecord) -> Result<f64> {
    let (below, above) = out_fractions(rec)?;
    Ok(below + above)
}

fn out_fractions(rec: &EpisodeRecord) -> Result<(f64, f64)> {
    rec.validate()?;
    let (lo, hi) = (rec.header.v_lower, rec.header.v_upper);
    let n = rec.header.controlled.len() as f64;
    let below = mean(
        rec.steps
            .iter()
            .map(|s| controlled(rec, s).filter(|&v| v < lo).count() as f64 / n),
    );
    let above = mean(
        rec.steps
            .iter()
            .map(|s| controlled(rec, s).filter(|&v| v > hi).count() as f64 / n),
    );
    Ok((below, above))
}

/// Mean over steps of the mean absolute reactive power per agent, MVAr.
pub fn metric_ql(rec: &EpisodeRecord) -> Result<f64> {
    rec.validate()?;
    if rec.header.n_agents == 0 {
        return Ok(0.0);
    }
    Ok(mean(rec.steps.iter().map(|s| {
        s.q_pv.iter().map(|q| q.abs()).sum::<f64>() / s.q_pv.len() as f64
    })))
}

pub fn metric_extended(rec: &EpisodeRecord) -> Result<MetricsReport> {
    let (pct_below, pct_above) = out_fractions(rec)?;
    let (pl_mean, pl_std) = metric_pl(rec)?;
    let (lo, hi, v_ref) = (rec.header.v_lower, rec.header.v_upper, rec.header.v_ref);
    let dev: Vec<f64> = rec
        .steps
        .iter()
        .flat_map(|s| controlled(rec, s).map(move |v| (v - v_ref).abs()))
        .collect();
    let max_drop = mean(
        rec.steps
            .iter()
            .map(|s| controlled(rec, s).map(|v| (lo - v).max(0.0)).fold(0.0, f64::max)),
    );
    let max_rise = mean(
        rec.steps
            .iter()
            .map(|s| controlled(rec, s).map(|v| (v - hi).max(0.0)).fold(0.0, f64::max)),
    );
    Ok(MetricsReport {
        cr: metric_cr(rec)?,
        pl_mean,
        pl_std,
        vr: pct_below + pct_above,
        ql_mean: metric_ql(rec)?,
        pct_out: pct_below + pct_above,
        pct_below,
        pct_above,
        v_dev_mean: dev.iter().sum::<f64>() / dev.len() as f64,
        max_drop_dev: max_drop,
        max_rise_dev: max_rise,
        steps: rec.steps.len(),
    })
}

/// Across-episode summary: mean and population std of every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub episodes: usize,
    pub mean: MetricsReport,
    pub std: MetricsReport,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::Validation("nothing to aggregate".into()));
    }
    let field = |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let mut mean = reports[0];
    let mut std = reports[0];
    macro_rules! fill {
        ($($name:ident),*) => {$(
            let (m, s) = field(|r| r.$name);
            mean.$name = m;
            std.$name = s;
        )*};
    }
    fill!(
        cr,
        pl_mean,
        pl_std,
        vr,
        ql_mean,
        pct_out,
        pct_below,
        pct_above,
        v_dev_mean,
        max_drop_dev,
        max_rise_dev
    );
    let (m, s) = field(|r| r.steps as f64);
    mean.steps = m.round() as usize;
    std.steps = s.round() as usize;
    Ok(AggregateReport {
        episodes: reports.len(),
        mean,
        std,
    })
}

/// Table headers; percentages are reported in percent.
pub const REPORT_COLUMNS: [&str; 15] = [
    "Method",
    "Episodes",
    "% V. Out of Control",
    "% V. Below",
    "% V. Above",
    "% CR",
    "V. Dev.",
    "V. Dev. std",
    "Max V. Drop Dev.",
    "Max V. Drop Dev. std",
    "Max V. Rise Dev.",
    "Max V. Rise Dev. std",
    "PL",
    "PL std",
    "QL",
];

fn report_row(method: &str, a: &AggregateReport) -> Vec<String> {
    let (m, s) = (&a.mean, &a.std);
    vec![
        method.to_owned(),
        a.episodes.to_string(),
        (100.0 * m.pct_out).to_string(),
        (100.0 * m.pct_below).to_string(),
        (100.0 * m.pct_above).to_string(),
        (100.0 * m.cr).to_string(),
        m.v_dev_mean.to_string(),
        s.v_dev_mean.to_string(),
        m.max_drop_dev.to_string(),
        s.max_drop_dev.to_string(),
        m.max_rise_dev.to_string(),
        s.max_rise_dev.to_string(),
        m.pl_mean.to_string(),
        s.pl_mean.to_string(),
        m.ql_mean.to_string(),
    ]
}

pub fn write_report_csv<W: Write>(w: W, rows: &[(String, AggregateReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_COLUMNS)?;
    for (method, a) in rows {
        out.write_record(report_row(method, a))?;
    }
    out.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

/// Human-readable table in the `mean (±std)` convention.
pub fn format_report_table(rows: &[(String, AggregateReport)]) -> String {
    let headers = [
        "Method",
        "Episodes",
        "% V. Out",
        "% V. Below",
        "% V. Above",
        "% CR",
        "V. Dev.",
        "Max V. Drop Dev.",
        "Max V. Rise Dev.",
        "PL",
        "QL",
    ];
    let pm = |m: f64, s: f64| format!("{m:.3} ±{s:.3}");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(method, a)| {
            let (m, s) = (&a.mean, &a.std);
            vec![
                method.clone(),
                a.episodes.to_string(),
                format!("{:.1}", 100.0 * m.pct_out),
                format!("{:.1}", 100.0 * m.pct_below),
                format!("{:.1}", 100.0 * m.pct_above),
                format!("{:.1}", 100.0 * m.cr),
                pm(m.v_dev_mean, s.v_dev_mean),
                pm(m.max_drop_dev, s.max_drop_dev),
                pm(m.max_rise_dev, s.max_rise_dev),
                pm(m.pl_mean, s.pl_mean),
                pm(m.ql_mean, s.ql_mean),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].chars().count())
                .chain([headers[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  "));
    };
    line(&headers.map(String::from), &mut out);
    for r in &body {
        line(r, &mut out);
    }
    out
}

/// Groups records by controller and aggregates each group.
pub fn report_by_controller(records: &[EpisodeRecord]) -> Result<Vec<(String, AggregateReport)>> {
    let mut groups: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.header.controller.clone())
            .or_default()
            .push(metric_extended(r)?);
    }
    groups.into_iter().map(|(k, v)| Ok((k, aggregate(&v)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ControllerSpec {
    None,
    Droop(DroopParams),
    Opf(OpfSettings),
    Random,
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerSpec::None => "none",
            ControllerSpec::Droop(_) => "droop",
            ControllerSpec::Opf(_) => "opf",
            ControllerSpec::Random => "random",
        }
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn Policy>> {
        Ok(match self {
            ControllerSpec::None => Box::new(NoControl),
            ControllerSpec::Droop(p) => {
                p.validate()?;
                Box::new(Droop::new(*p))
            }
            ControllerSpec::Opf(s) => Box::new(OpfPolicy::new(s.clone())),
            ControllerSpec::Random => Box::new(RandomPolicy::new(seed)),
        })
    }
}

/// Runs one episode from `reset(seed)` until termination.
pub fn rollout(env: &mut Environment, policy: &mut dyn Policy, seed: u64) -> Result<EpisodeRecord> {
    env.reset(seed)?;
    policy.reset(env, seed);
    let window = env.current().expect("reset").window;
    let spec = env.reward_spec().barrier;
    let header = EpisodeHeader {
        case: env.case().name().to_owned(),
        controller: policy.name().to_owned(),
        barrier: spec.shape,
        seed,
        window,
        v_ref: spec.v_ref,
        v_lower: spec.v_ref * (1.0 - spec.safe_halfwidth),
        v_upper: spec.v_ref * (1.0 + spec.safe_halfwidth),
        controlled: env.case().controlled_positions(),
        n_agents: env.n_agents(),
    };
    let mut steps = Vec::with_capacity(env.config().episode_length);
    loop {
        let t = env.current().expect("reset").t;
        let command = policy.act(env)?;
        let res = apply(env, command)?;
        steps.push(StepRecord {
            t,
            v: res.info.grid_state.v,
            actions: res.info.actions,
            q_pv: res.info.q_pv,
            reward: res.reward,
            total_loss: res.info.total_loss,
            safety_violation: res.info.safety_violation,
        });
        if res.terminated {
            break;
        }
    }
    Ok(EpisodeRecord { header, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub env: EnvConfig,
    pub controller: ControllerSpec,
    pub episodes: usize,
    /// Episode `i` uses seed `seed + i`.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub records: Vec<EpisodeRecord>,
    pub reports: Vec<MetricsReport>,
    pub aggregate: AggregateReport,
}

/// Evaluates a controller over independent episodes in parallel. Results are
/// ordered by episode index and independent of scheduling.
pub fn run_eval(case: Arc<NetworkCase>, store: Arc<ProfileStore>, cfg: &EvalConfig) -> Result<EvalOutput> {
    if cfg.episodes == 0 {
        return Err(Error::Validation("episodes must be positive".into()));
    }
    cfg.env.validate()?;
    // fail fast on configuration problems before fanning out
    Environment::new(case.clone(), store.clone(), cfg.env.clone())?;
    cfg.controller.build(cfg.seed)?;
    let records = (0..cfg.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i);
            let mut env = Environment::new(case.clone(), store.clone(), cfg.env.clone())?;
            let mut policy = cfg.controller.build(seed)?;
            rollout(&mut env, policy.as_mut(), seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = records.iter().map(metric_extended).collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&reports)?;
    Ok(EvalOutput {
        records,
        reports,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(vs: Vec<Vec<f64>>, losses: Vec<f64>) -> EpisodeRecord {
        let n = vs[0].len();
        EpisodeRecord {
            header: EpisodeHeader {
                case: "t".into(),
                controller: "none".into(),
                barrier: BarrierShape::L1,
                seed: 0,
                window: EpisodeWindow {
                    day: 0,
                    offset: 0,
                    start: 0,
                },
                v_ref: 1.0,
                v_lower: 0.95,
                v_upper: 1.05,
                controlled: (0..n).collect(),
                n_agents: 1,
            },
            steps: vs
                .into_iter()
                .zip(losses)
                .enumerate()
                .map(|(t, (v, l))| StepRecord {
                    t,
                    v,
                    actions: vec![0.0],
                    q_pv: vec![0.0],
                    reward: 0.0,
                    total_loss: l,
                    safety_violation: false,
                })
                .collect(),
        }
    }

    #[test]
    fn cr_examples() {
        let ok = vec![1.0, 1.0];
        let rec = record(vec![ok.clone(); 4], vec![0.05; 4]);
        assert_eq!(metric_cr(&rec).unwrap(), 1.0);
        let rec = record(vec![ok.clone(), vec![1.0, 1.06], ok.clone(), ok], vec![0.05; 4]);
        assert_eq!(metric_cr(&rec).unwrap(), 0.75);
    }

    #[test]
    fn pl_examples() {
        let rec = record(vec![vec![1.0]; 3], vec![0.05; 3]);
        let (m, s) = metric_pl(&rec).unwrap();
        assert!((m - 0.05).abs() < 1e-15 && s.abs() < 1e-15);
        let rec = record(vec![vec![1.0]; 2], vec![0.1, 0.2]);
        let (m, s) = metric_pl(&rec).unwrap();
        assert!((m - 0.15).abs() < 1e-15);
        assert!((s - 0.05).abs() < 1e-15);
    }

    #[test]
    fn vr_one_of_32() {
        let mut v = vec![1.0; 32];
        v[5] = 0.9;
        let rec = record(vec![v; 10], vec![0.0; 10]);
        assert!((metric_vr(&rec).unwrap() - 1.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn extended_examples() {
        let rec = record(vec![vec![1.0, 1.0]; 3], vec![0.0; 3]);
        let r = metric_extended(&rec).unwrap();
        assert_eq!((r.v_dev_mean, r.max_drop_dev, r.max_rise_dev), (0.0, 0.0, 0.0));
        let rec = record(vec![vec![0.93, 1.0]], vec![0.0]);
        let r = metric_extended(&rec).unwrap();
        assert!((r.max_drop_dev - 0.02).abs() < 1e-12);
        assert_eq!(r.pct_below, 0.5);
        assert_eq!(r.pct_above, 0.0);
    }

    #[test]
    fn empty_record_is_rejected() {
        let mut rec = record(vec![vec![1.0]], vec![0.0]);
        rec.steps.clear();
        assert!(metric_cr(&rec).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let rec = record(
            vec![vec![0.1 + 0.2, 1.0 / 3.0], vec![1.0, 1.06]],
            vec![0.123456789012345, 1e-17],
        );
        let mut buf = Vec::new();
        rec.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"kind\":\"episode\""));
        let back = EpisodeRecord::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![rec]);
    }

    #[test]
    fn aggregate_uses_population_std() {
        let a = metric_extended(&record(vec![vec![1.0]], vec![0.1])).unwrap();
        let b = metric_extended(&record(vec![vec![1.0]], vec![0.3])).unwrap();
        let agg = aggregate(&[a, b]).unwrap();
        assert!((agg.mean.pl_mean - 0.2).abs() < 1e-15);
        assert!((agg.std.pl_mean - 0.1).abs() < 1e-15);
    }
}
