//! Small standalone programs used to study fault behaviour outside the
//! full boot flow.

use crate::asm::{assemble, Program};
use crate::boot::{FUSE_CHECK_ASM, FUSE_CHECK_HARDENED_ASM};
use crate::crypto::{Fek2Select, FekSource};
use crate::machine::{map, Device, FaultEvent, FaultModel, FuseBank, Injector, Machine, MachineState, RunEnd, Timing};
use crate::rail::{resolve_rail, GlitchPulse, RailConfig, RailOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FixtureName {
    AddLoop,
    Sigcheck,
    FusecheckPoc,
    FusecheckHardened,
}

impl FixtureName {
    pub const ALL: [FixtureName; 4] = [
        FixtureName::AddLoop,
        FixtureName::Sigcheck,
        FixtureName::FusecheckPoc,
        FixtureName::FusecheckHardened,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FixtureName::AddLoop => "ADD_LOOP",
            FixtureName::Sigcheck => "SIGCHECK",
            FixtureName::FusecheckPoc => "FUSECHECK_POC",
            FixtureName::FusecheckHardened => "FUSECHECK_HARDENED",
        }
    }
}

impl fmt::Display for FixtureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown fixture `{0}`")]
pub struct UnknownFixture(pub String);

impl FromStr for FixtureName {
    type Err = UnknownFixture;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FixtureName::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownFixture(s.to_string()))
    }
}

const PRELUDE: &str = "\
.org 0x10000
    b       start
exc_hang:
    b       exc_hang
";

const SIGCHECK_ASM: &str = "\
sigcheck: push    {fp, lr}
    bl      load_further_code
    bl      sig_verify
    cbz     r0, sigcheck_failed
    bl      call_authenticated_code
sigcheck_failed:
    bl      signify_auth_error
.hang:
    b       .hang
";

/// Value the add loop computes on every iteration.
pub const ADD_LOOP_SUM: u32 = 0x1234 + 0x4321;

/// Everything needed to run a fixture and to name its instructions.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub name: FixtureName,
    pub program: Program,
    pub source: String,
    /// Address whose execution counts as success.
    pub target: u32,
    /// Source line of the first line of the transcribed listing.
    pub listing_origin: Option<usize>,
    irom: Arc<Vec<u8>>,
}

fn uart_message(label: &str, text: &str) -> String {
    let mut s = format!("{label}:\n    mov     r2, #{:#x}\n", map::UART_TX);
    for b in text.bytes() {
        s.push_str(&format!("    mov     r0, #{b:#x}\n    strb    r0, [r2]\n"));
    }
    s
}

impl Fixture {
    pub fn load(name: FixtureName) -> Fixture {
        let (body, target_label) = match name {
            FixtureName::AddLoop => (
                format!(
                    "start:
    mov     r6, #{ram:#x}
add_loop:
    mov     r0, #0x1234
    mov     r1, #0x4321
    add     r2, r0, r1
    str     r2, [r6]
    ldrb    r3, [r6]
    out_uart r3
    ldrb    r3, [r6, #1]
    out_uart r3
    ldrb    r3, [r6, #2]
    out_uart r3
    ldrb    r3, [r6, #3]
    out_uart r3
    b       add_loop
    b       add_loop
",
                    ram = map::RAM_BASE
                ),
                "add_loop",
            ),
            FixtureName::Sigcheck => (
                format!(
                    "{SIGCHECK_ASM}
load_further_code:
    mov     pc, lr
sig_verify:
    mov     r0, #0
    mov     pc, lr
{auth}    halt
signify_auth_error:
    mov     pc, lr
start:
    mov     r0, #1
    bl      sigcheck
    halt
",
                    auth = uart_message("call_authenticated_code", "AUTH")
                ),
                "call_authenticated_code",
            ),
            FixtureName::FusecheckPoc | FixtureName::FusecheckHardened => (
                format!(
                    "{check}
is_fam:
    mov     r0, #0
    mov     pc, lr
is_ppm:
    mov     r0, #0
    mov     pc, lr
{download}    halt
start:
    mov     r0, #1
    out_gpio r0
    bl      nonsecure_rom_enter
    mov     r0, #0
    out_gpio r0
    halt
",
                    check = if name == FixtureName::FusecheckPoc {
                        FUSE_CHECK_ASM
                    } else {
                        FUSE_CHECK_HARDENED_ASM
                    },
                    download = uart_message("NvBootUartDownload", "GLITCHED\n")
                ),
                "NvBootUartDownload",
            ),
        };
        let source = format!("{PRELUDE}{body}");
        let program = assemble(&source).expect("fixture sources assemble");
        let listing_origin = match name {
            FixtureName::AddLoop => None,
            _ => Some(PRELUDE.lines().count() + 1),
        };
        assert_eq!(program.base, map::IROM_BASE);
        let irom = program.bytes.clone();
        Fixture {
            name,
            target: program.symbol(target_label).expect("fixture defines its target"),
            program,
            source,
            listing_origin,
            irom: Arc::new(irom),
        }
    }

    pub fn device(&self) -> Device {
        Device {
            irom: self.irom.clone(),
            fuses: FuseBank::default(),
            feks: FekSource {
                nvkey: [0; 16],
                testkey: [0; 16],
                fek2_select: Fek2Select::Nvkey,
            },
            mb1_image: Arc::new(Vec::new()),
            timing: Timing::default(),
        }
    }

    /// A machine with reset released, about to execute the reset vector.
    pub fn fresh_machine(&self) -> Machine {
        let mut m = Machine::new(&self.device()).expect("fixture fits in iROM");
        m.reset_release();
        m
    }

    /// Line number within the transcribed listing, counting from 1.
    pub fn listing_line(&self, source_line: usize) -> Option<usize> {
        let origin = self.listing_origin?;
        (source_line >= origin).then(|| source_line - origin + 1)
    }

    /// Time at which the fixture raises its GPIO trigger, if it has one.
    pub fn gpio_trigger_ns(&self) -> Option<u64> {
        let mut m = self.fresh_machine();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.run(&mut Injector::None, &mut rng, FIXTURE_RUN_NS, |m| !m.gpio_trace.is_empty());
        m.gpio_trace.first().map(|g| g.0)
    }
}

/// Simulated time a fixture is allowed to run when it does not stop itself.
pub const FIXTURE_RUN_NS: u64 = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Trigger {
    /// Pulse offsets count from reset release.
    Reset,
    /// Pulse offsets count from the first GPIO edge.
    Gpio,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureResult {
    pub name: FixtureName,
    pub reached_target: bool,
    pub uart: Vec<u8>,
    /// For the add loop: complete 4-byte sums received and how many were wrong.
    pub sums: usize,
    pub corrupted_sums: usize,
    pub state: MachineState,
    pub end: RunEnd,
    pub fault: Option<FaultEvent>,
    pub trigger_ns: u64,
    pub end_ns: u64,
}

pub fn run_fixture(
    name: FixtureName,
    pulse: Option<&GlitchPulse>,
    rail: &RailConfig,
    seed: u64,
    model: &FaultModel,
    trigger: Trigger,
) -> FixtureResult {
    let fixture = Fixture::load(name);
    let trigger_ns = match trigger {
        Trigger::Reset => 0,
        Trigger::Gpio => fixture.gpio_trigger_ns().unwrap_or(0),
    };
    let outcome = match pulse {
        Some(p) => resolve_rail(p, rail, trigger_ns),
        None => RailOutcome::none(),
    };
    let deadline = pulse.map_or(0, |p| trigger_ns + p.end_ns()).max(FIXTURE_RUN_NS);
    let mut m = fixture.fresh_machine();
    let mut inj = Injector::rail(outcome, *model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reached = false;
    let summary = m.run(&mut inj, &mut rng, deadline, |m| {
        reached |= m.pc() == fixture.target;
        false
    });
    let (sums, corrupted_sums) = if name == FixtureName::AddLoop {
        let words: Vec<u32> = m
            .uart_tx
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        (words.len(), words.iter().filter(|&&w| w != ADD_LOOP_SUM).count())
    } else {
        (0, 0)
    };
    FixtureResult {
        name,
        // The add loop has no success label; reaching its loop head is normal.
        reached_target: reached && name != FixtureName::AddLoop,
        uart: m.uart_tx.clone(),
        sums,
        corrupted_sums,
        state: m.state,
        end: summary.end,
        fault: summary.fault,
        trigger_ns,
        end_ns: m.clock_ns,
    }
}
