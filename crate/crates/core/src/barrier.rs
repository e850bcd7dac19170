//! Voltage barrier functions and the shared global reward.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reward returned when the safety rule fires.
pub const SAFETY_PENALTY: f64 = -200.0;

/// Standard deviation of the Gaussian used inside the Bowl's safe band.
const BOWL_SIGMA: f64 = 0.1;

/// Points that sit on the safe-band edge in decimal arithmetic (e.g. 0.95,
/// 1.05) land a few ulps outside it in binary; they stay on the inner branch.
const EDGE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BarrierShape {
    L1,
    L2,
    Bowl,
}

impl fmt::Display for BarrierShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BarrierShape::L1 => "l1",
            BarrierShape::L2 => "l2",
            BarrierShape::Bowl => "bowl",
        })
    }
}

impl FromStr for BarrierShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(BarrierShape::L1),
            "l2" => Ok(BarrierShape::L2),
            "bowl" => Ok(BarrierShape::Bowl),
            other => Err(Error::Validation(format!(
                "unknown barrier `{other}` (expected l1, l2 or bowl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BowlParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Default for BowlParams {
    fn default() -> Self {
        BowlParams {
            a: 2.0,
            b: 0.095,
            c: 0.01,
            d: 0.04,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub shape: BarrierShape,
    #[serde(default)]
    pub bowl: BowlParams,
    pub v_ref: f64,
    pub safe_halfwidth: f64,
}

impl BarrierSpec {
    pub fn new(shape: BarrierShape) -> Self {
        BarrierSpec {
            shape,
            bowl: BowlParams::default(),
            v_ref: 1.0,
            safe_halfwidth: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let BowlParams { a, b, c, d } = self.bowl;
        if ![a, b, c, d].iter().all(|&p| p > 0.0) {
            return Err(Error::Validation("bowl parameters must be positive".into()));
        }
        if !(self.safe_halfwidth > 0.0) {
            return Err(Error::Validation("safe_halfwidth must be positive".into()));
        }
        Ok(())
    }

    /// Penalty `l_v(v)`; non-negative for every shape.
    pub fn value(&self, v: f64) -> f64 {
        let dev = (v - self.v_ref).abs();
        match self.shape {
            BarrierShape::L1 => dev,
            BarrierShape::L2 => dev * dev,
            BarrierShape::Bowl => {
                let BowlParams { a, b, c, d } = self.bowl;
                if dev > self.safe_halfwidth + EDGE_EPS {
                    a * dev - b
                } else {
                    -c * gaussian_density(v, self.v_ref, BOWL_SIGMA) + d
                }
            }
        }
    }

    /// Analytic derivative `d l_v / dv` (one-sided at kinks, zero at `v_ref`).
    pub fn derivative(&self, v: f64) -> f64 {
        let delta = v - self.v_ref;
        let sign = if delta > 0.0 {
            1.0
        } else if delta < 0.0 {
            -1.0
        } else {
            0.0
        };
        match self.shape {
            BarrierShape::L1 => sign,
            BarrierShape::L2 => 2.0 * delta,
            BarrierShape::Bowl => {
                let BowlParams { a, c, .. } = self.bowl;
                if delta.abs() > self.safe_halfwidth + EDGE_EPS {
                    a * sign
                } else {
                    c * gaussian_density(v, self.v_ref, BOWL_SIGMA) * delta / (BOWL_SIGMA * BOWL_SIGMA)
                }
            }
        }
    }
}

/// Normal density N(x | mean, sigma).
fn gaussian_density(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

pub fn barrier_value(spec: &BarrierSpec, v: f64) -> f64 {
    spec.value(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub barrier: BarrierSpec,
    /// Weight on the reactive-power term.
    pub alpha: f64,
    pub safety_penalty: f64,
}

impl RewardSpec {
    pub fn new(shape: BarrierShape) -> Self {
        RewardSpec {
            barrier: BarrierSpec::new(shape),
            alpha: 0.1,
            safety_penalty: SAFETY_PENALTY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.barrier.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Validation(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Mean absolute reactive power over agents.
pub fn reactive_loss(q_pv: &[f64]) -> Result<f64> {
    if q_pv.is_empty() {
        return Err(Error::Validation("reactive loss needs at least one agent".into()));
    }
    Ok(q_pv.iter().map(|q| q.abs()).sum::<f64>() / q_pv.len() as f64)
}

/// Mean barrier penalty over all buses.
pub fn voltage_loss(spec: &BarrierSpec, v: &[f64]) -> f64 {
    v.iter().map(|&vi| spec.value(vi)).sum::<f64>() / v.len() as f64
}

/// Global reward `-(mean barrier over buses) - alpha * reactive_loss`.
pub fn reward(spec: &RewardSpec, v: &[f64], q_pv: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Dimension {
            what: "bus voltages",
            expected: 1,
            got: 0,
        });
    }
    Ok(-voltage_loss(&spec.barrier, v) - spec.alpha * reactive_loss(q_pv)?)
}
