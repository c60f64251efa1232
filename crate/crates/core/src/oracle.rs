//! Exhaustive single-fault enumeration.
//!
//! A fault-free golden run fixes the dynamic instruction stream. Every
//! placement in the fault space (skip on any instruction, inversion on any
//! conditional branch, optionally every single-bit corruption of every ALU
//! result) is then tried on a snapshot taken just before that instruction.
//! [`replay`] re-runs one placement from a fresh machine through the
//! ordinary `step` path, as an independent check of the snapshot route.

use crate::asm::Program;
use crate::boot::{BootImage, Personality, DOWNLOAD_LABEL};
use crate::fixtures::Fixture;
use crate::isa::{Instr, InstrClass};
use crate::machine::{marker, ForcedEffect, Injector, Machine, MachineState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// A program with a start state and a success address.
pub trait Scenario {
    /// Machine with reset released, before the first instruction.
    fn fresh(&self) -> Machine;
    fn target(&self) -> u32;
    fn program(&self) -> &Program;
    /// Hard stop for every run.
    fn deadline_ns(&self) -> u64;
    /// Extra terminal condition besides halting, trapping or idling.
    fn finished(&self, _m: &Machine) -> bool {
        false
    }
    /// Listing-relative line number for reports, if the scenario has one.
    fn listing_line(&self, _source_line: usize) -> Option<usize> {
        None
    }
}

impl Scenario for Fixture {
    fn fresh(&self) -> Machine {
        self.fresh_machine()
    }

    fn target(&self) -> u32 {
        self.target
    }

    fn program(&self) -> &Program {
        &self.program
    }

    fn deadline_ns(&self) -> u64 {
        crate::fixtures::FIXTURE_RUN_NS
    }

    fn listing_line(&self, source_line: usize) -> Option<usize> {
        Fixture::listing_line(self, source_line)
    }
}

/// The full boot ROM, with the download entry as the target.
pub struct BootScenario<'a> {
    pub image: &'a BootImage,
    pub personality: &'a Personality,
}

impl Scenario for BootScenario<'_> {
    fn fresh(&self) -> Machine {
        let mut m = Machine::new(&self.image.device(self.personality)).expect("image sized by construction");
        m.reset_release();
        m
    }

    fn target(&self) -> u32 {
        self.image.symbol(DOWNLOAD_LABEL)
    }

    fn program(&self) -> &Program {
        &self.image.program
    }

    fn deadline_ns(&self) -> u64 {
        2 * self.image.params.mb2_entry_time_ns
    }

    fn finished(&self, m: &Machine) -> bool {
        m.markers.last().map(|mk| mk.0) == Some(marker::MB2_ENTRY)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaultSpace {
    /// Dynamic instruction indices to consider.
    pub indices: Range<u64>,
    /// Also try every single-bit corruption of each ALU result.
    pub include_corrupt: bool,
}

impl Default for FaultSpace {
    fn default() -> Self {
        FaultSpace {
            indices: 0..u64::MAX,
            include_corrupt: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Placement {
    pub dyn_index: u64,
    pub pc: u32,
    pub effect: ForcedEffect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleHit {
    pub dyn_index: u64,
    pub pc: u32,
    pub line: Option<usize>,
    pub listing_line: Option<usize>,
    pub mnemonic: String,
    pub instr: String,
    pub effect: ForcedEffect,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleReport {
    pub hits: Vec<OracleHit>,
    /// Every placement that was tried, in enumeration order.
    pub placements: Vec<Placement>,
    /// Whether the unfaulted run itself reaches the target.
    pub golden_reaches: bool,
}

fn effects_for(instr: &Instr, include_corrupt: bool) -> Vec<ForcedEffect> {
    let mut v = vec![ForcedEffect::Skip];
    match instr.class() {
        InstrClass::CondBranch => v.push(ForcedEffect::BranchInvert),
        InstrClass::Alu if include_corrupt => v.extend((0..32).map(ForcedEffect::CorruptBit)),
        _ => {}
    }
    v
}

/// Runs `m` to completion under `inj`; true when the target pc is reached.
fn reaches<S: Scenario + ?Sized>(s: &S, m: &mut Machine, mut inj: Injector) -> bool {
    let target = s.target();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hit = false;
    m.run(&mut inj, &mut rng, s.deadline_ns(), |m| {
        hit = m.pc() == target;
        hit || s.finished(m)
    });
    hit
}

pub fn fault_path_oracle<S: Scenario + ?Sized>(s: &S, space: &FaultSpace) -> OracleReport {
    let golden_reaches = reaches(s, &mut s.fresh(), Injector::None);
    let mut m = s.fresh();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut hits = Vec::new();
    let mut placements = Vec::new();
    let target = s.target();
    let deadline = s.deadline_ns();
    while m.state == MachineState::Running
        && m.retired < space.indices.end
        && m.pc() != target
        && !s.finished(&m)
        && !m.at_idle_loop()
        && m.clock_ns < deadline
    {
        if m.fast_forward(deadline, space.indices.start) > 0 {
            continue;
        }
        if m.retired >= space.indices.start {
            let pc = m.pc();
            if let Some(instr) = m.peek(pc) {
                for effect in effects_for(&instr, space.include_corrupt) {
                    let p = Placement {
                        dyn_index: m.retired,
                        pc,
                        effect,
                    };
                    placements.push(p);
                    let mut trial = m.clone();
                    if reaches(s, &mut trial, Injector::forced(p.dyn_index, effect)) {
                        let line = s.program().line_of(pc);
                        hits.push(OracleHit {
                            dyn_index: p.dyn_index,
                            pc,
                            line,
                            listing_line: line.and_then(|l| s.listing_line(l)),
                            mnemonic: instr.mnemonic().to_string(),
                            instr: instr.to_string(),
                            effect,
                        });
                    }
                }
            }
        }
        m.step(&mut Injector::None, &mut rng).expect("running");
    }
    OracleReport {
        hits,
        placements,
        golden_reaches,
    }
}

/// Replays one placement from reset through the normal `step` path.
pub fn replay<S: Scenario + ?Sized>(s: &S, placement: &Placement) -> bool {
    reaches(s, &mut s.fresh(), Injector::forced(placement.dyn_index, placement.effect))
}
