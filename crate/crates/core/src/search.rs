//! Glitch parameter space and the order in which it is explored.

use crate::rail::GlitchPulse;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SearchError {
    #[error("step must be positive")]
    ZeroStep,
    #[error("offset range is inverted: {lo_ns} > {hi_ns}")]
    Inverted { lo_ns: u64, hi_ns: u64 },
    #[error("grid has no lengths")]
    NoLengths,
    #[error("{0} ns is not a multiple of the {1} ns tick")]
    Unaligned(u64, u64),
    #[error("exhaustive traversal has visited every grid point")]
    Exhausted,
    #[error("narrowing parameters must be given exactly when the strategy is NARROWING")]
    StrategyMismatch,
    #[error("narrowing needs at least one success")]
    ZeroSuccesses,
}

/// Inclusive offset interval sampled every `step_ns`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetRange {
    pub lo_ns: u64,
    pub hi_ns: u64,
    pub step_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamGrid {
    pub offsets: OffsetRange,
    pub lengths_ns: Vec<u64>,
}

impl ParamGrid {
    pub fn new(lo_ns: u64, hi_ns: u64, step_ns: u64, lengths_ns: Vec<u64>) -> ParamGrid {
        ParamGrid {
            offsets: OffsetRange { lo_ns, hi_ns, step_ns },
            lengths_ns,
        }
    }

    pub fn validate(&self, tick_ns: u64) -> Result<(), SearchError> {
        let o = &self.offsets;
        if o.step_ns == 0 || tick_ns == 0 {
            return Err(SearchError::ZeroStep);
        }
        if o.lo_ns > o.hi_ns {
            return Err(SearchError::Inverted {
                lo_ns: o.lo_ns,
                hi_ns: o.hi_ns,
            });
        }
        if self.lengths_ns.is_empty() {
            return Err(SearchError::NoLengths);
        }
        for v in [o.lo_ns, o.hi_ns, o.step_ns].iter().chain(&self.lengths_ns) {
            if v % tick_ns != 0 {
                return Err(SearchError::Unaligned(*v, tick_ns));
            }
        }
        Ok(())
    }

    pub fn offset_count(&self) -> u64 {
        let o = &self.offsets;
        if o.step_ns == 0 || o.lo_ns > o.hi_ns {
            return 0;
        }
        (o.hi_ns - o.lo_ns) / o.step_ns + 1
    }

    /// Largest offset actually on the grid.
    pub fn last_offset(&self) -> u64 {
        self.offsets.lo_ns + (self.offset_count().max(1) - 1) * self.offsets.step_ns
    }

    pub fn len(&self) -> u64 {
        self.offset_count() * self.lengths_ns.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point `i` in offset-major, then length, order.
    pub fn get(&self, i: u64) -> GlitchPulse {
        let nl = self.lengths_ns.len() as u64;
        GlitchPulse::new(
            self.offsets.lo_ns + (i / nl) * self.offsets.step_ns,
            self.lengths_ns[(i % nl) as usize],
        )
    }

    pub fn contains(&self, p: &GlitchPulse) -> bool {
        let o = &self.offsets;
        o.step_ns > 0
            && p.offset_ns >= o.lo_ns
            && p.offset_ns <= o.hi_ns
            && (p.offset_ns - o.lo_ns).is_multiple_of(o.step_ns)
            && self.lengths_ns.contains(&p.length_ns)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyKind {
    Exhaustive,
    Random,
    Narrowing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Narrowing {
    pub successes_required: u32,
    /// Margin added on each side of the successful offsets.
    pub tolerance_ns: u64,
}

impl Default for Narrowing {
    fn default() -> Self {
        Narrowing {
            successes_required: 10,
            tolerance_ns: 25_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narrowing: Option<Narrowing>,
}

impl Strategy {
    pub const EXHAUSTIVE: Strategy = Strategy {
        kind: StrategyKind::Exhaustive,
        narrowing: None,
    };
    pub const RANDOM: Strategy = Strategy {
        kind: StrategyKind::Random,
        narrowing: None,
    };

    pub fn narrowing(n: Narrowing) -> Strategy {
        Strategy {
            kind: StrategyKind::Narrowing,
            narrowing: Some(n),
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        match (self.kind, self.narrowing) {
            (StrategyKind::Narrowing, Some(n)) if n.successes_required == 0 => Err(SearchError::ZeroSuccesses),
            (StrategyKind::Narrowing, Some(_)) | (StrategyKind::Exhaustive | StrategyKind::Random, None) => Ok(()),
            _ => Err(SearchError::StrategyMismatch),
        }
    }
}

/// Shrinks `grid` to the successful offsets widened by `tolerance_ns` per side
/// and to the lengths that succeeded. The result stays on the original grid.
pub fn narrowed_grid(grid: &ParamGrid, successes: &[GlitchPulse], tolerance_ns: u64) -> ParamGrid {
    let o = grid.offsets;
    let min = successes.iter().map(|p| p.offset_ns).min().expect("at least one success");
    let max = successes.iter().map(|p| p.offset_ns).max().unwrap();
    let lo = min.saturating_sub(tolerance_ns).max(o.lo_ns);
    let lo = o.lo_ns + (lo - o.lo_ns).div_ceil(o.step_ns) * o.step_ns;
    let hi = (max + tolerance_ns).min(grid.last_offset());
    let hi = o.lo_ns + (hi - o.lo_ns) / o.step_ns * o.step_ns;
    let mut lengths: Vec<u64> = successes.iter().map(|p| p.length_ns).collect();
    lengths.sort_unstable();
    lengths.dedup();
    ParamGrid::new(lo, hi, o.step_ns, lengths)
}

/// Integer-keyed maps as `[[k, v], ...]`; JSON object keys would be strings.
mod pairs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(m: &BTreeMap<u64, u64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u64, u64>, D::Error> {
        Ok(Vec::<(u64, u64)>::deserialize(d)?.into_iter().collect())
    }
}

/// Order in which grid indices are visited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
enum Traversal {
    Sequential {
        next: u64,
    },
    /// Fisher–Yates over a virtual identity array; only displaced entries
    /// are stored.
    Shuffled {
        remaining: u64,
        #[serde(with = "pairs")]
        displaced: BTreeMap<u64, u64>,
        #[serde(with = "crate::rngser")]
        rng: ChaCha8Rng,
    },
}

impl Traversal {
    fn next(&mut self, len: u64) -> Option<u64> {
        match self {
            Traversal::Sequential { next } => {
                let i = *next;
                (i < len).then(|| {
                    *next += 1;
                    i
                })
            }
            Traversal::Shuffled { remaining, displaced, rng } => {
                if len == 0 {
                    return None;
                }
                if *remaining == 0 {
                    *remaining = len;
                    displaced.clear();
                }
                let j = rng.gen_range(0..*remaining);
                let last = *remaining - 1;
                let at = |d: &BTreeMap<u64, u64>, k: u64| d.get(&k).copied().unwrap_or(k);
                let picked = at(displaced, j);
                let tail = at(displaced, last);
                displaced.insert(j, tail);
                displaced.remove(&last);
                *remaining = last;
                Some(picked)
            }
        }
    }
}

/// Strategy state; serializable so a campaign can resume from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Searcher {
    strategy: Strategy,
    original: ParamGrid,
    grid: ParamGrid,
    traversal: Traversal,
    successes: Vec<GlitchPulse>,
    drawn: u64,
    narrowed_after: Option<u64>,
}

impl Searcher {
    pub fn new(grid: ParamGrid, strategy: Strategy, seed: u64) -> Result<Searcher, SearchError> {
        strategy.validate()?;
        if grid.is_empty() {
            return Err(SearchError::NoLengths);
        }
        let traversal = match strategy.kind {
            StrategyKind::Exhaustive => Traversal::Sequential { next: 0 },
            _ => Traversal::Shuffled {
                remaining: grid.len(),
                displaced: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        };
        Ok(Searcher {
            strategy,
            original: grid.clone(),
            grid,
            traversal,
            successes: Vec::new(),
            drawn: 0,
            narrowed_after: None,
        })
    }

    pub fn grid(&self) -> &ParamGrid {
        &self.grid
    }

    pub fn original(&self) -> &ParamGrid {
        &self.original
    }

    /// Number of pulses drawn before the grid was narrowed, if it has been.
    pub fn narrowed_after(&self) -> Option<u64> {
        self.narrowed_after
    }

    pub fn next_pulse(&mut self) -> Result<GlitchPulse, SearchError> {
        let i = self.traversal.next(self.grid.len()).ok_or(SearchError::Exhausted)?;
        self.drawn += 1;
        Ok(self.grid.get(i))
    }

    /// Reports the outcome of the last drawn pulse.
    pub fn record(&mut self, pulse: GlitchPulse, success: bool) {
        if !success {
            return;
        }
        self.successes.push(pulse);
        if let (StrategyKind::Narrowing, Some(n), None) = (self.strategy.kind, self.strategy.narrowing, self.narrowed_after) {
            if self.successes.len() >= n.successes_required as usize {
                self.grid = narrowed_grid(&self.grid, &self.successes, n.tolerance_ns);
                if let Traversal::Shuffled { remaining, displaced, .. } = &mut self.traversal {
                    *remaining = self.grid.len();
                    displaced.clear();
                }
                self.narrowed_after = Some(self.drawn);
            }
        }
    }
}

/// Time for one sweep of a single length over an offset window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassEstimate {
    pub num_offsets: u64,
    /// Each attempt waits on average half the window before its pulse.
    pub avg_attempt_ns: u64,
    pub total_ns: u64,
}

impl PassEstimate {
    pub fn total_secs(&self) -> f64 {
        self.total_ns as f64 * 1e-9
    }

    pub fn total_minutes(&self) -> f64 {
        self.total_secs() / 60.0
    }

    pub fn total_days(&self) -> f64 {
        self.total_secs() / 86_400.0
    }
}

pub fn estimate_full_pass(window_ns: u64, step_ns: u64, lengths_count: u64) -> Result<PassEstimate, SearchError> {
    if step_ns == 0 {
        return Err(SearchError::ZeroStep);
    }
    let num_offsets = window_ns / step_ns;
    let avg_attempt_ns = window_ns / 2;
    Ok(PassEstimate {
        num_offsets,
        avg_attempt_ns,
        total_ns: num_offsets * avg_attempt_ns * lengths_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_zero_window() {
        let e = estimate_full_pass(0, 20, 1).unwrap();
        assert_eq!((e.num_offsets, e.total_ns), (0, 0));
        assert_eq!(estimate_full_pass(100, 0, 1), Err(SearchError::ZeroStep));
    }

    #[test]
    fn exhaustive_order() {
        let mut s = Searcher::new(ParamGrid::new(0, 40, 20, vec![11_320]), Strategy::EXHAUSTIVE, 0).unwrap();
        let offs: Vec<u64> = (0..3).map(|_| s.next_pulse().unwrap().offset_ns).collect();
        assert_eq!(offs, [0, 20, 40]);
        assert_eq!(s.next_pulse(), Err(SearchError::Exhausted));
    }

    #[test]
    fn narrowing_interval() {
        let g = ParamGrid::new(0, 4_420_000, 20, vec![11_300, 11_320, 11_340]);
        let hits = [GlitchPulse::new(2_625_900, 11_320), GlitchPulse::new(2_633_800, 11_320)];
        let n = narrowed_grid(&g, &hits, 25_000);
        assert_eq!((n.offsets.lo_ns, n.offsets.hi_ns), (2_600_900, 2_658_800));
        assert_eq!(n.lengths_ns, [11_320]);
    }

    #[test]
    fn narrowing_clamps_to_grid() {
        let g = ParamGrid::new(100, 1_000, 30, vec![20]);
        let n = narrowed_grid(&g, &[GlitchPulse::new(130, 20), GlitchPulse::new(970, 20)], 50);
        assert_eq!((n.offsets.lo_ns, n.offsets.hi_ns), (100, 1_000));
        let n = narrowed_grid(&g, &[GlitchPulse::new(400, 20)], 25);
        assert_eq!((n.offsets.lo_ns, n.offsets.hi_ns), (400, 400));
    }

    #[test]
    fn strategy_shape_is_checked() {
        let bad = Strategy {
            kind: StrategyKind::Random,
            narrowing: Some(Narrowing::default()),
        };
        assert_eq!(bad.validate(), Err(SearchError::StrategyMismatch));
        let bad = Strategy {
            kind: StrategyKind::Narrowing,
            narrowing: None,
        };
        assert_eq!(bad.validate(), Err(SearchError::StrategyMismatch));
    }
}
