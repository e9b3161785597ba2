//! Gate schedules and the three gate mechanisms.
//!
//! A schedule maps the training fraction `t` in `[0, 1]` to a value in
//! `[0, 1]` by linear interpolation between breakpoints. For DCR that value
//! is the teacher weight `alpha(t)`; for the stochastic gates it is the
//! probability `p(t)` of selecting the student.

use std::fmt;
use std::str::FromStr;

use rand::distr::Open01;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleKind {
    DcrAggr20,
    TheseusAggr20,
    Constant(f64),
    /// `from` to `to` over the first `over` of training, then held.
    Linear {
        from: f64,
        to: f64,
        over: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateSchedule {
    kind: ScheduleKind,
    breakpoints: Vec<(f64, f64)>,
}

impl GateSchedule {
    /// Teacher weight 1.0 to 0.3 over the first 10%, to 0.0 by 20%, then 0.
    pub fn dcr_aggr20() -> Self {
        GateSchedule {
            kind: ScheduleKind::DcrAggr20,
            breakpoints: vec![(0.0, 1.0), (0.1, 0.3), (0.2, 0.0), (1.0, 0.0)],
        }
    }

    /// Student probability 0.1 to 0.7 over the first 10%, to 1.0 by 20%.
    pub fn theseus_aggr20() -> Self {
        GateSchedule {
            kind: ScheduleKind::TheseusAggr20,
            breakpoints: vec![(0.0, 0.1), (0.1, 0.7), (0.2, 1.0), (1.0, 1.0)],
        }
    }

    pub fn constant(c: f64) -> Result<Self> {
        check_unit("constant schedule value", c)?;
        Ok(GateSchedule {
            kind: ScheduleKind::Constant(c),
            breakpoints: vec![(0.0, c), (1.0, c)],
        })
    }

    pub fn linear(from: f64, to: f64, over: f64) -> Result<Self> {
        check_unit("linear schedule start", from)?;
        check_unit("linear schedule end", to)?;
        if !(over > 0.0 && over <= 1.0) {
            return Err(Error::param(format!(
                "linear schedule length {over} must lie in (0, 1]"
            )));
        }
        let mut breakpoints = vec![(0.0, from), (over, to)];
        if over < 1.0 {
            breakpoints.push((1.0, to));
        }
        Ok(GateSchedule {
            kind: ScheduleKind::Linear { from, to, over },
            breakpoints,
        })
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    /// Piecewise-linear value at training fraction `t`, exact at breakpoints.
    pub fn value(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::param(format!(
                "training fraction {t} outside [0, 1]"
            )));
        }
        for w in self.breakpoints.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t == t0 {
                return Ok(v0);
            }
            if t == t1 {
                return Ok(v1);
            }
            if t > t0 && t < t1 {
                return Ok(v0 + (v1 - v0) * (t - t0) / (t1 - t0));
            }
        }
        unreachable!("breakpoints span [0, 1]")
    }
}

impl fmt::Display for GateSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ScheduleKind::DcrAggr20 => write!(f, "dcr_aggr20"),
            ScheduleKind::TheseusAggr20 => write!(f, "theseus_aggr20"),
            ScheduleKind::Constant(c) => write!(f, "constant:{c}"),
            ScheduleKind::Linear { from, to, over } => write!(f, "linear:{from}:{to}:{over}"),
        }
    }
}

impl FromStr for GateSchedule {
    type Err = Error;

    /// Accepts `dcr_aggr20`, `theseus_aggr20`, `constant:C` and
    /// `linear:FROM:TO:OVER`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |x: &str| {
            x.parse::<f64>()
                .map_err(|_| Error::Config(format!("schedule `{s}`: `{x}` is not a number")))
        };
        match parts.as_slice() {
            ["dcr_aggr20"] => Ok(Self::dcr_aggr20()),
            ["theseus_aggr20"] => Ok(Self::theseus_aggr20()),
            ["constant", c] => Self::constant(num(c)?),
            ["linear", a, b, o] => Self::linear(num(a)?, num(b)?, num(o)?),
            _ => Err(Error::Config(format!(
                "unknown schedule `{s}` (expected dcr_aggr20, theseus_aggr20, constant:C or linear:A:B:F)"
            ))),
        }
    }
}

fn check_unit(what: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::param(format!("{what} {v} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    Deterministic,
    Bernoulli,
    Gumbel,
}

/// One gate realization. `value` is the schedule value for deterministic
/// gates and the drawn `z` or `r` for stochastic ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateDraw {
    pub mechanism: Mechanism,
    pub value: f64,
    pub temperature: Option<f64>,
}

/// `true` with probability `p`.
pub fn draw_bernoulli_gate<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<bool> {
    check_unit("Bernoulli probability", p)?;
    Ok(rng.random::<f64>() < p)
}

/// Binary-concrete relaxation `sigmoid((logit(p) + g) / tau)` with `g` a
/// standard logistic draw. The result is kept strictly inside `(0, 1)` even
/// where the sigmoid rounds to an endpoint.
pub fn draw_gumbel_gate<R: Rng + ?Sized>(p: f64, tau: f64, rng: &mut R) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!(
            "Gumbel gate needs p in (0, 1), got {p}"
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!(
            "Gumbel temperature must be positive, got {tau}"
        )));
    }
    let u: f64 = rng.sample(Open01);
    let noise = u.ln() - (-u).ln_1p();
    let logit = p.ln() - (-p).ln_1p();
    let r = 1.0 / (1.0 + (-(logit + noise) / tau).exp());
    Ok(r.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn constant_and_linear_shapes() {
        let c = GateSchedule::constant(0.5).unwrap();
        assert_eq!(c.value(0.0).unwrap(), 0.5);
        assert_eq!(c.value(0.77).unwrap(), 0.5);
        let l = GateSchedule::linear(0.1, 1.0, 0.5).unwrap();
        assert_eq!(l.value(0.5).unwrap(), 1.0);
        assert_eq!(l.value(0.9).unwrap(), 1.0);
        assert!((l.value(0.25).unwrap() - 0.55).abs() < 1e-15);
        assert!(GateSchedule::linear(0.1, 1.0, 0.0).is_err());
        assert!(GateSchedule::constant(1.5).is_err());
    }

    #[test]
    fn names_round_trip() {
        for s in [
            "dcr_aggr20",
            "theseus_aggr20",
            "constant:0.7",
            "linear:0.1:1:0.5",
        ] {
            let sched: GateSchedule = s.parse().unwrap();
            assert_eq!(sched.to_string().parse::<GateSchedule>().unwrap(), sched);
        }
        assert!("aggr30".parse::<GateSchedule>().is_err());
        assert!("constant:x".parse::<GateSchedule>().is_err());
    }

    #[test]
    fn fraction_outside_unit_interval_is_rejected() {
        let s = GateSchedule::dcr_aggr20();
        assert!(s.value(-1e-9).is_err());
        assert!(s.value(1.0 + 1e-9).is_err());
    }

    #[test]
    fn gumbel_argument_checks() {
        let mut r = rng::stream(0, &[]);
        assert!(draw_gumbel_gate(0.0, 1.0, &mut r).is_err());
        assert!(draw_gumbel_gate(1.0, 1.0, &mut r).is_err());
        assert!(draw_gumbel_gate(0.5, 0.0, &mut r).is_err());
        assert!(draw_bernoulli_gate(1.1, &mut r).is_err());
    }
}
