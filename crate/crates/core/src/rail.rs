//! Crowbar pulse to die-stress translation.
//!
//! A gate pulse of a given length shorts the core rail; on-rail capacitance
//! absorbs a fixed amount of it. What is left (the effective stress) decides
//! whether the target is untouched, may fault inside the pulse window, or
//! reliably stops.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Offset and length of one crowbar activation, relative to the trigger edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlitchPulse {
    pub offset_ns: u64,
    pub length_ns: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PulseError {
    #[error("pulse length must be positive")]
    ZeroLength,
    #[error("{field} {value} ns is not a multiple of the {tick_ns} ns tick")]
    Unaligned { field: &'static str, value: u64, tick_ns: u64 },
    #[error("tick must be positive")]
    ZeroTick,
}

impl GlitchPulse {
    pub fn new(offset_ns: u64, length_ns: u64) -> Self {
        GlitchPulse { offset_ns, length_ns }
    }

    /// Checks the pulse against a rig tick.
    pub fn validate(&self, tick_ns: u64) -> Result<(), PulseError> {
        if tick_ns == 0 {
            return Err(PulseError::ZeroTick);
        }
        if self.length_ns == 0 {
            return Err(PulseError::ZeroLength);
        }
        for (field, value) in [("offset", self.offset_ns), ("length", self.length_ns)] {
            if value % tick_ns != 0 {
                return Err(PulseError::Unaligned { field, value, tick_ns });
            }
        }
        Ok(())
    }

    pub fn end_ns(&self) -> u64 {
        self.offset_ns + self.length_ns
    }
}

/// Piecewise-linear map from effective stress (ns) to fault probability.
///
/// Points are sorted by stress. Below the first point the value is the first
/// point's probability, above the last one it stays flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Susceptibility {
    pub points: Vec<(u64, f64)>,
}

impl Susceptibility {
    pub fn eval(&self, stress_ns: u64) -> f64 {
        let pts = &self.points;
        match pts.len() {
            0 => 0.0,
            _ if stress_ns <= pts[0].0 => pts[0].1,
            _ => {
                for w in pts.windows(2) {
                    let (x0, y0) = w[0];
                    let (x1, y1) = w[1];
                    if stress_ns <= x1 {
                        if x1 == x0 {
                            return y1;
                        }
                        let t = (stress_ns - x0) as f64 / (x1 - x0) as f64;
                        return y0 + t * (y1 - y0);
                    }
                }
                pts[pts.len() - 1].1
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RailConfig {
    pub decoupling_attenuation_ns: u64,
    pub fault_min_ns: u64,
    pub crash_min_ns: u64,
    pub susceptibility: Susceptibility,
    pub detector_enabled: bool,
}

impl Default for RailConfig {
    fn default() -> Self {
        RailConfig {
            decoupling_attenuation_ns: 0,
            fault_min_ns: 10_000,
            crash_min_ns: 13_000,
            susceptibility: Susceptibility {
                points: vec![(10_000, 0.0), (11_300, 0.9)],
            },
            detector_enabled: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RailConfigError {
    #[error("fault_min_ns must be positive")]
    ZeroFaultMin,
    #[error("crash_min_ns ({crash}) must exceed fault_min_ns ({fault})")]
    CrashBelowFault { fault: u64, crash: u64 },
    #[error("susceptibility points must be sorted by stress")]
    UnsortedCurve,
    #[error("susceptibility value {0} is outside [0, 1]")]
    ProbabilityRange(f64),
    #[error("susceptibility must not decrease between fault_min_ns and crash_min_ns")]
    NotMonotone,
}

impl RailConfig {
    pub fn validate(&self) -> Result<(), RailConfigError> {
        if self.fault_min_ns == 0 {
            return Err(RailConfigError::ZeroFaultMin);
        }
        if self.crash_min_ns <= self.fault_min_ns {
            return Err(RailConfigError::CrashBelowFault {
                fault: self.fault_min_ns,
                crash: self.crash_min_ns,
            });
        }
        let pts = &self.susceptibility.points;
        if pts.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(RailConfigError::UnsortedCurve);
        }
        if let Some(&(_, p)) = pts.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(RailConfigError::ProbabilityRange(p));
        }
        // Sampling at the breakpoints is enough for a piecewise-linear curve.
        let mut xs: Vec<u64> = pts
            .iter()
            .map(|&(x, _)| x)
            .filter(|&x| x >= self.fault_min_ns && x < self.crash_min_ns)
            .collect();
        xs.insert(0, self.fault_min_ns);
        xs.push(self.crash_min_ns - 1);
        let ys: Vec<f64> = xs.iter().map(|&x| self.susceptibility.eval(x)).collect();
        if ys.windows(2).any(|w| w[1] + 1e-12 < w[0]) {
            return Err(RailConfigError::NotMonotone);
        }
        Ok(())
    }

    /// Fault probability for a given effective stress, zero below `fault_min_ns`.
    pub fn fault_probability(&self, stress_ns: u64) -> f64 {
        if stress_ns < self.fault_min_ns {
            0.0
        } else {
            self.susceptibility.eval(stress_ns).clamp(0.0, 1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RailKind {
    None,
    FaultWindow,
    Crash,
    Detected,
}

/// Absolute simulated-time interval, inclusive at both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StressWindow {
    pub start_ns: u64,
    pub end_ns: u64,
}

impl StressWindow {
    /// Whether `[start, end)` (an instruction's execution interval) touches the window.
    pub fn overlaps(&self, start: u64, end: u64) -> bool {
        start <= self.end_ns && end > self.start_ns
    }

    /// Moves the window earlier by `ns`, clamping at zero.
    pub fn shifted_earlier(&self, ns: u64) -> StressWindow {
        StressWindow {
            start_ns: self.start_ns.saturating_sub(ns),
            end_ns: self.end_ns.saturating_sub(ns),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RailOutcome {
    pub kind: RailKind,
    /// Interval in which the pulse acts on the die. Present for every kind
    /// except `None`; for `FaultWindow` it is where a fault may land, for
    /// `Crash`/`Detected` its start is when the target stops.
    pub stress_window: Option<StressWindow>,
    pub fault_probability: f64,
}

impl RailOutcome {
    pub fn none() -> Self {
        RailOutcome {
            kind: RailKind::None,
            stress_window: None,
            fault_probability: 0.0,
        }
    }

    pub fn shifted_earlier(mut self, ns: u64) -> Self {
        self.stress_window = self.stress_window.map(|w| w.shifted_earlier(ns));
        self
    }
}

pub fn effective_stress(pulse: &GlitchPulse, rail: &RailConfig) -> u64 {
    pulse.length_ns.saturating_sub(rail.decoupling_attenuation_ns)
}

pub fn resolve_rail(pulse: &GlitchPulse, rail: &RailConfig, trigger_time_ns: u64) -> RailOutcome {
    let stress = effective_stress(pulse, rail);
    let window = StressWindow {
        start_ns: trigger_time_ns + pulse.offset_ns,
        end_ns: trigger_time_ns + pulse.offset_ns + pulse.length_ns,
    };
    if stress == 0 || (stress < rail.fault_min_ns && !rail.detector_enabled) {
        return RailOutcome::none();
    }
    if rail.detector_enabled {
        return RailOutcome {
            kind: RailKind::Detected,
            stress_window: Some(window),
            fault_probability: 0.0,
        };
    }
    if stress >= rail.crash_min_ns {
        return RailOutcome {
            kind: RailKind::Crash,
            stress_window: Some(window),
            fault_probability: 0.0,
        };
    }
    RailOutcome {
        kind: RailKind::FaultWindow,
        stress_window: Some(window),
        fault_probability: rail.fault_probability(stress),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rail(attenuation: u64) -> RailConfig {
        RailConfig {
            decoupling_attenuation_ns: attenuation,
            ..RailConfig::default()
        }
    }

    #[test]
    fn effective_stress_examples() {
        assert_eq!(effective_stress(&GlitchPulse::new(0, 11_320), &rail(0)), 11_320);
        assert_eq!(effective_stress(&GlitchPulse::new(0, 3_000), &rail(3_000)), 0);
        let got = effective_stress(&GlitchPulse::new(0, 11_340), &rail(500));
        // scalar check done independently of the saturating path
        let expected = 11_340i64 - 500i64;
        assert_eq!(got as i64, expected);
        assert_eq!(got, 10_840);
    }

    #[test]
    fn crash_above_thirteen_microseconds() {
        let out = resolve_rail(&GlitchPulse::new(0, 14_000), &rail(0), 0);
        assert_eq!(out.kind, RailKind::Crash);
    }

    #[test]
    fn fully_absorbed_pulse_is_none() {
        let out = resolve_rail(&GlitchPulse::new(100, 3_000), &rail(3_000), 0);
        assert_eq!(out.kind, RailKind::None);
        assert_eq!(out.fault_probability, 0.0);
        assert!(out.stress_window.is_none());
    }

    #[test]
    fn detector_wins() {
        let mut r = rail(0);
        r.detector_enabled = true;
        let out = resolve_rail(&GlitchPulse::new(0, 11_320), &r, 0);
        assert_eq!(out.kind, RailKind::Detected);
        let out = resolve_rail(&GlitchPulse::new(0, 14_000), &r, 0);
        assert_eq!(out.kind, RailKind::Detected);
    }

    #[test]
    fn fault_window_placement() {
        let out = resolve_rail(&GlitchPulse::new(2_633_800, 11_320), &rail(0), 1_000);
        assert_eq!(out.kind, RailKind::FaultWindow);
        let w = out.stress_window.unwrap();
        assert_eq!(w.start_ns, 2_634_800);
        assert_eq!(w.end_ns, 2_634_800 + 11_320);
        assert!((out.fault_probability - 0.9).abs() < 1e-12);
    }

    #[test]
    fn default_curve_shape() {
        let r = RailConfig::default();
        r.validate().unwrap();
        assert_eq!(r.fault_probability(9_999), 0.0);
        assert_eq!(r.fault_probability(10_000), 0.0);
        assert!((r.fault_probability(10_650) - 0.45).abs() < 1e-9);
        assert!((r.fault_probability(11_300) - 0.9).abs() < 1e-12);
        assert!((r.fault_probability(12_999) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut r = RailConfig::default();
        r.crash_min_ns = r.fault_min_ns;
        assert!(matches!(r.validate(), Err(RailConfigError::CrashBelowFault { .. })));
        let mut r = RailConfig::default();
        r.susceptibility.points = vec![(10_000, 0.8), (11_000, 0.2)];
        assert_eq!(r.validate(), Err(RailConfigError::NotMonotone));
        let mut r = RailConfig::default();
        r.susceptibility.points = vec![(10_000, 1.5)];
        assert_eq!(r.validate(), Err(RailConfigError::ProbabilityRange(1.5)));
    }

    #[test]
    fn pulse_validation() {
        assert!(GlitchPulse::new(20, 40).validate(20).is_ok());
        assert_eq!(GlitchPulse::new(0, 0).validate(20), Err(PulseError::ZeroLength));
        assert!(matches!(
            GlitchPulse::new(30, 40).validate(20),
            Err(PulseError::Unaligned { field: "offset", .. })
        ));
    }

    proptest! {
        #[test]
        fn stress_monotone_in_length(a in 0u64..20_000, l1 in 1u64..20_000, l2 in 1u64..20_000) {
            let r = rail(a);
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            prop_assert!(effective_stress(&GlitchPulse::new(0, lo), &r) <= effective_stress(&GlitchPulse::new(0, hi), &r));
        }

        #[test]
        fn regime_partition(a in 0u64..5_000, len in 1u64..20_000, off in 0u64..1_000_000) {
            let r = rail(a);
            let p = GlitchPulse::new(off, len);
            let s = effective_stress(&p, &r);
            let out = resolve_rail(&p, &r, 0);
            let expected = if s >= r.crash_min_ns {
                RailKind::Crash
            } else if s >= r.fault_min_ns {
                RailKind::FaultWindow
            } else {
                RailKind::None
            };
            prop_assert_eq!(out.kind, expected);
            prop_assert!((0.0..=1.0).contains(&out.fault_probability));
            prop_assert_eq!(out, resolve_rail(&p, &r, 0));
        }
    }
}
