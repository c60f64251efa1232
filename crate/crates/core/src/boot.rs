//! Synthetic boot ROM: generation, timeline calibration, and the boot,
//! download and MB2 execution paths.

use crate::asm::{assemble, AsmError, Program};
use crate::crypto::{FekSource, KEY_BLOB_BYTES};
use crate::machine::{map, marker, Device, FaultEvent, FaultModel, FuseBank, Injector, Machine, MachineState, Mode, RunEnd, Timing, Trap};
use crate::payload::{self, PayloadError};
use crate::rail::{resolve_rail, GlitchPulse, RailConfig, RailOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

pub const PROMPT: &[u8] = b"NV-UART-BOOT>";

/// Offset at which the reset handler enters the protected part of the ROM.
pub const PROTECTED_OFFSET: u32 = 0x1200;
pub const RESET_PIROM_UPDATE: (u32, u32) = (0x400, 0x2000);
pub const KEY_BLOB_ADDR: u32 = map::IROM_END - KEY_BLOB_BYTES as u32;

pub const FUSE_CHECK_LABEL: &str = "nonsecure_rom_enter";
pub const DOWNLOAD_LABEL: &str = "NvBootUartDownload";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageParams {
    /// Time of the first instruction of the fuse check after reset release.
    pub fuse_check_time_ns: u64,
    pub qspi_probe_time_ns: u64,
    pub mb2_entry_time_ns: u64,
    /// Replace the fuse check with the double-checked variant.
    pub hardened: bool,
    /// Straight-line SoC configuration stores executed right before the
    /// fuse check.
    pub init_writes: u32,
}

impl Default for ImageParams {
    fn default() -> Self {
        ImageParams {
            fuse_check_time_ns: 2_610_000,
            qspi_probe_time_ns: 4_420_000,
            mb2_entry_time_ns: 172_000_000,
            hardened: false,
            init_writes: 75,
        }
    }
}

#[derive(Debug, Error)]
pub enum BootError {
    #[error("timeline must satisfy fuse check < QSPI probe < MB2 entry")]
    Timeline,
    #[error("{what} cannot be placed at {target_ns} ns; earliest is {earliest_ns} ns")]
    TooEarly {
        what: &'static str,
        target_ns: u64,
        earliest_ns: u64,
    },
    #[error("calibration run never reached {0}")]
    Unreached(&'static str),
    #[error("key blob must be {KEY_BLOB_BYTES} bytes")]
    KeyBlobSize,
    #[error("unprotected code overruns the protected region ({0:#x})")]
    CodeTooLarge(u32),
    #[error("template assembly failed: {0}")]
    Asm(#[from] AsmError),
}

/// Device traits that are not part of the ROM image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Personality {
    pub fuses: FuseBank,
    pub feks: FekSource,
    pub mb1_image: Arc<Vec<u8>>,
    pub timing: Timing,
}

#[derive(Clone, Debug)]
pub struct BootImage {
    pub irom: Arc<Vec<u8>>,
    pub program: Program,
    pub source: String,
    pub params: ImageParams,
    pub reset_pirom_update: (u32, u32),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Delays {
    fuse_check: (u32, u32),
    qspi: (u32, u32),
    mb2: (u32, u32),
}

type DelaySlot = fn(&mut Delays) -> &mut (u32, u32);

impl BootImage {
    /// Generates the ROM and calibrates its delay loops so the fuse check,
    /// QSPI probe and MB2 entry land exactly on the configured times.
    pub fn build(params: &ImageParams, key_blob: &[u8], personality: &Personality) -> Result<BootImage, BootError> {
        if !(params.fuse_check_time_ns < params.qspi_probe_time_ns && params.qspi_probe_time_ns < params.mb2_entry_time_ns) {
            return Err(BootError::Timeline);
        }
        if key_blob.len() != KEY_BLOB_BYTES {
            return Err(BootError::KeyBlobSize);
        }
        let instr_ns = personality.timing.instr_ns();
        let mut delays = Delays {
            fuse_check: (1, 0),
            qspi: (1, 0),
            mb2: (1, 0),
        };
        let stages: [(&'static str, u64, DelaySlot); 3] = [
            ("fuse check", params.fuse_check_time_ns, |d| &mut d.fuse_check),
            ("QSPI probe", params.qspi_probe_time_ns, |d| &mut d.qspi),
            ("MB2 entry", params.mb2_entry_time_ns, |d| &mut d.mb2),
        ];
        for (i, (what, target, slot)) in stages.into_iter().enumerate() {
            let image = Self::assemble_with(params, key_blob, delays)?;
            let times = image.milestones(personality)?;
            let Some(at) = times[i] else {
                return Err(BootError::Unreached(what));
            };
            if at > target {
                return Err(BootError::TooEarly {
                    what,
                    target_ns: target,
                    earliest_ns: at,
                });
            }
            let extra = (target - at) / instr_ns;
            let (loops, pad) = slot(&mut delays);
            // One loop iteration is two instructions; odd leftovers become nops.
            *loops += (extra / 2) as u32;
            *pad += (extra % 2) as u32;
        }
        let image = Self::assemble_with(params, key_blob, delays)?;
        let times = image.milestones(personality)?;
        let want = [params.fuse_check_time_ns, params.qspi_probe_time_ns, params.mb2_entry_time_ns];
        for ((what, _, _), (got, want)) in stages.iter().zip(times.iter().zip(want)) {
            if *got != Some(want) {
                return Err(BootError::Unreached(what));
            }
        }
        Ok(image)
    }

    fn assemble_with(params: &ImageParams, key_blob: &[u8], delays: Delays) -> Result<BootImage, BootError> {
        let source = rom_source(params, delays);
        let program = assemble(&source)?;
        let protected = map::IROM_BASE + PROTECTED_OFFSET;
        let unprotected_end = program.symbol("unprotected_end").expect("template label");
        if unprotected_end > protected {
            return Err(BootError::CodeTooLarge(unprotected_end));
        }
        let mut irom = vec![0u8; map::IROM_SIZE as usize];
        let at = (program.base - map::IROM_BASE) as usize;
        if at + program.bytes.len() > KEY_BLOB_ADDR as usize - map::IROM_BASE as usize {
            return Err(BootError::CodeTooLarge(program.end()));
        }
        irom[at..at + program.bytes.len()].copy_from_slice(&program.bytes);
        let blob_at = (KEY_BLOB_ADDR - map::IROM_BASE) as usize;
        irom[blob_at..].copy_from_slice(key_blob);
        Ok(BootImage {
            irom: Arc::new(irom),
            program,
            source,
            params: params.clone(),
            reset_pirom_update: RESET_PIROM_UPDATE,
        })
    }

    /// Times at which the fuse check starts and the QSPI / MB2 markers are
    /// written on an unfaulted boot.
    fn milestones(&self, personality: &Personality) -> Result<[Option<u64>; 3], BootError> {
        let mut m = Machine::new(&self.device(personality)).expect("image sized by construction");
        m.reset_release();
        let check = self.symbol(FUSE_CHECK_LABEL);
        let mut at_check = None;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.run(&mut Injector::None, &mut rng, u64::MAX, |m| {
            if at_check.is_none() && m.pc() == check {
                at_check = Some(m.clock_ns);
            }
            m.markers.last().map(|mk| mk.0) == Some(marker::MB2_ENTRY)
        });
        let mark = |v| m.markers.iter().find(|mk| mk.0 == v).map(|mk| mk.1);
        Ok([at_check, mark(marker::QSPI_PROBE), mark(marker::MB2_ENTRY)])
    }

    pub fn device(&self, personality: &Personality) -> Device {
        Device {
            irom: self.irom.clone(),
            fuses: personality.fuses,
            feks: personality.feks.clone(),
            mb1_image: personality.mb1_image.clone(),
            timing: personality.timing,
        }
    }

    pub fn symbol(&self, name: &str) -> u32 {
        self.program
            .symbol(name)
            .unwrap_or_else(|| panic!("boot template always defines `{name}`"))
    }

    pub fn key_blob(&self) -> &[u8] {
        &self.irom[(KEY_BLOB_ADDR - map::IROM_BASE) as usize..]
    }
}

/// Listing-style fuse check guarding the UART bootloader.
pub const FUSE_CHECK_ASM: &str = "\
nonsecure_rom_enter: push {fp, lr}
    bl      is_fam
    cbz     r0, is_not_fam
is_fam_or_ppm:
    bl      is_ppm
    cbnz    r0, exit
    bl      NvBootUartDownload
is_not_fam:
    bl      is_ppm
    cmp     r0, #0
    bne     is_fam_or_ppm
exit:
    pop     {fp, pc}
";

/// Same decision as [`FUSE_CHECK_ASM`], with every fuse read duplicated and
/// compared, both copies tested before each exit is skipped, and the
/// failure-analysis fuse re-read right at the gate.
pub const FUSE_CHECK_HARDENED_ASM: &str = "\
nonsecure_rom_enter: push {fp, lr}
    bl      is_fam
    mov     r5, r0
    bl      is_fam
    cmp     r0, r5
    bne     fc_fault
    cbz     r5, exit
    cbz     r0, exit
    bl      is_ppm
    mov     r6, r0
    bl      is_ppm
    cmp     r0, r6
    bne     fc_fault
    cbnz    r6, exit
    cbnz    r0, exit
    bl      is_fam
    cbz     r0, exit
    bl      NvBootUartDownload
exit:
    pop     {fp, pc}
fc_fault:
    b       fc_fault
";

fn delay_fn(name: &str, (loops, pad): (u32, u32)) -> String {
    let mut s = format!("{name}:\n    mov r7, #{loops}\n{name}_loop:\n    sub r7, r7, #1\n    cbnz r7, {name}_loop\n");
    for _ in 0..pad {
        s.push_str("    nop\n");
    }
    s.push_str("    mov pc, lr\n");
    s
}

fn rom_source(params: &ImageParams, delays: Delays) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "\
.equ PROT, {prot:#x}
.equ SOCCFG, {soccfg:#x}
.equ UART_TX, {uart:#x}
.equ BOOTCTL, {bootctl:#x}
.equ CRYPTO, {crypto:#x}
.equ FUSE, {fuse:#x}
.equ STACK_TOP, {stack:#x}

.org {base:#x}
    b       reset
exc_hang:
    b       exc_hang

reset:
    mov     sp, #STACK_TOP
    mov     r1, #PROT
    mov     r0, #{pirom:#x}
    str     r0, [r1, #4]
    bl      apply_irom_patches
    bl      nonsecure_dispatcher
    mov     r0, #protected_entry
    mov     pc, r0

; no patches are fused on synthetic devices
apply_irom_patches:
    mov     pc, lr

; walks the init table; the fixed-size walk is fully unrolled
nonsecure_dispatcher:
    push    {{r4, lr}}
    mov     r4, #dispatch_table
    ldr     r0, [r4]
    add     lr, pc, #8
    mov     pc, r0
    ldr     r0, [r4, #4]
    add     lr, pc, #8
    mov     pc, r0
    pop     {{r4, pc}}

soc_early_init:
    push    {{fp, lr}}
    bl      delay_fuse_check
    mov     r1, #SOCCFG
",
        prot = map::PROT_BASE,
        soccfg = map::SOCCFG_BASE,
        uart = map::UART_TX,
        bootctl = map::BOOTCTL_BASE,
        crypto = map::CRYPTO_CMD,
        fuse = map::FUSE_BASE,
        stack = map::STACK_TOP,
        base = map::IROM_BASE,
        pirom = RESET_PIROM_UPDATE.1,
    );
    // Clock, reset and pad setup: one register store per step, no branches.
    for i in 0..params.init_writes {
        let value = 0x0100_0000u32 | (i.wrapping_mul(0x0001_0101) & 0x00FF_FFFF);
        let off = (i * 4) % map::SOCCFG_SIZE;
        let _ = writeln!(s, "    mov     r0, #{value:#x}\n    str     r0, [r1, #{off:#x}]");
    }
    s.push_str("    pop     {fp, pc}\n\n");
    s.push_str(if params.hardened { FUSE_CHECK_HARDENED_ASM } else { FUSE_CHECK_ASM });
    let _ = write!(
        s,
        "
is_fam:
    mov     r1, #FUSE
    ldr     r0, [r1, #{fam:#x}]
    mov     pc, lr

is_ppm:
    mov     r1, #FUSE
    ldr     r0, [r1, #{ppm:#x}]
    mov     pc, lr

download_guard:
    b       download_guard
NvBootUartDownload:
    mov     r1, #prompt
    mov     r2, #UART_TX
nv_prompt:
    ldrb    r0, [r1]
    cbz     r0, nv_wait
    strb    r0, [r2]
    add     r1, r1, #1
    b       nv_prompt
nv_wait:
    mov     r1, #BOOTCTL
    mov     r0, #1
    str     r0, [r1, #8]
nv_idle:
    b       nv_idle

{delay_fc}
.align 4
dispatch_table:
    .word   soc_early_init, nonsecure_rom_enter
prompt:
    .asciz  \"{prompt}\"
unprotected_end:

.org {protected:#x}
protected_entry:
    bl      delay_qspi
    mov     r1, #BOOTCTL
    mov     r0, #{m_qspi}
    str     r0, [r1]
    mov     r6, #CRYPTO
    mov     r0, #{c_load}
    str     r0, [r6]
    ldr     r0, [r6, #4]
    cbnz    r0, boot_fail
    mov     r0, #{c_blob}
    str     r0, [r6]
    ldr     r0, [r6, #4]
    cbnz    r0, boot_fail
    mov     r1, #FUSE
    ldr     r0, [r1, #{odm:#x}]
    cbz     r0, no_odm
    mov     r0, #{c_odm}
    str     r0, [r6]
    ldr     r0, [r6, #4]
    cbnz    r0, boot_fail
no_odm:
    mov     r0, #{c_mb1}
    str     r0, [r6]
    ldr     r0, [r6, #4]
    cbnz    r0, boot_fail
    mov     r1, #BOOTCTL
    mov     r0, #{m_mb1}
    str     r0, [r1]
    bl      delay_mb2
    ; shrink the readable window and give up the right to change it
    mov     r1, #PROT
    mov     r0, #{protected_off:#x}
    str     r0, [r1, #4]
    mov     r0, #0
    str     r0, [r1, #8]
    str     r0, [r1]
    mov     r1, #BOOTCTL
    str     r0, [r1, #4]
    mov     r0, #{m_mb2}
    str     r0, [r1]
mb2_idle:
    b       mb2_idle
boot_fail:
    b       boot_fail

{delay_qspi}
{delay_mb2}",
        fam = map::FUSE_FAM - map::FUSE_BASE,
        ppm = map::FUSE_PPM - map::FUSE_BASE,
        odm = map::FUSE_ODM_ENABLE - map::FUSE_BASE,
        delay_fc = delay_fn("delay_fuse_check", delays.fuse_check),
        delay_qspi = delay_fn("delay_qspi", delays.qspi),
        delay_mb2 = delay_fn("delay_mb2", delays.mb2),
        prompt = std::str::from_utf8(PROMPT).unwrap(),
        protected = map::IROM_BASE + PROTECTED_OFFSET,
        protected_off = PROTECTED_OFFSET,
        m_qspi = marker::QSPI_PROBE,
        m_mb1 = marker::MB1_READY,
        m_mb2 = marker::MB2_ENTRY,
        c_load = crate::machine::crypto_cmd::LOAD_FEKS,
        c_blob = crate::machine::crypto_cmd::DECRYPT_KEY_BLOB,
        c_odm = crate::machine::crypto_cmd::DERIVE_ODM_KEY,
        c_mb1 = crate::machine::crypto_cmd::DECRYPT_MB1,
    );
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BootResult {
    NormalBoot,
    Crashed,
    DetectShutdown,
    UartPrompt(Vec<u8>),
    Hang,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeKind {
    NormalBoot,
    Crashed,
    DetectShutdown,
    UartPrompt,
    Hang,
}

impl BootResult {
    pub fn kind(&self) -> OutcomeKind {
        match self {
            BootResult::NormalBoot => OutcomeKind::NormalBoot,
            BootResult::Crashed => OutcomeKind::Crashed,
            BootResult::DetectShutdown => OutcomeKind::DetectShutdown,
            BootResult::UartPrompt(_) => OutcomeKind::UartPrompt,
            BootResult::Hang => OutcomeKind::Hang,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct BootOptions {
    pub model: FaultModel,
    /// Delay between reset release and the first instruction.
    pub jitter_ns: u64,
    /// Boots still running at this time are reported as hung; defaults to
    /// twice the MB2 entry time.
    pub watchdog_ns: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootRun {
    pub result: BootResult,
    pub fault: Option<FaultEvent>,
    /// Simulated time (since reset release) at which the outcome was known.
    pub end_ns: u64,
}

/// Releases reset at t = 0 and runs the ROM until a terminal outcome.
/// A machine that reaches the UART prompt is left in download mode.
pub fn run_boot(
    machine: &mut Machine,
    image: &BootImage,
    pulse: Option<&GlitchPulse>,
    rail: &RailConfig,
    seed: u64,
    opts: &BootOptions,
) -> BootRun {
    machine.reset_release();
    let outcome = match pulse {
        // Jitter delays the core relative to the trigger; in core time the
        // stress arrives that much earlier.
        Some(p) => resolve_rail(p, rail, 0).shifted_earlier(opts.jitter_ns),
        None => RailOutcome::none(),
    };
    let mut inj = Injector::rail(outcome, opts.model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let watchdog = opts.watchdog_ns.unwrap_or(2 * image.params.mb2_entry_time_ns);
    let summary = machine.run(&mut inj, &mut rng, watchdog, |m| {
        m.markers.last().map(|mk| mk.0) == Some(marker::MB2_ENTRY)
    });
    let result = match summary.end {
        RunEnd::Watch => BootResult::NormalBoot,
        RunEnd::Stopped(MachineState::Crashed) => BootResult::Crashed,
        RunEnd::Stopped(MachineState::DetectShutdown) => BootResult::DetectShutdown,
        RunEnd::Stopped(MachineState::Download) => BootResult::UartPrompt(machine.uart_tx.clone()),
        RunEnd::Stopped(_) | RunEnd::Idle | RunEnd::Deadline => BootResult::Hang,
    };
    let end_ns = match result {
        BootResult::NormalBoot => machine.markers.last().map(|mk| mk.1).unwrap_or(machine.clock_ns),
        _ => machine.clock_ns,
    };
    BootRun {
        result,
        fault: summary.fault,
        end_ns: end_ns + opts.jitter_ns,
    }
}

/// Instruction budget for uploaded code; enough to stream the whole ROM.
pub const PAYLOAD_STEP_BUDGET: u64 = 4_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionReport {
    /// Why the upload was refused; the loader has re-prompted.
    pub rejected: Option<PayloadError>,
    pub uart: Vec<u8>,
    pub state: MachineState,
    pub trap: Option<Trap>,
    pub instructions: u64,
}

/// Feeds `bytes` to the waiting UART bootloader.
///
/// A valid upload is copied to its entry address and executed in the
/// secure mode the ROM is running in. A rejected one re-emits the prompt
/// and leaves the loader waiting.
pub fn uart_download(machine: &mut Machine, bytes: &[u8]) -> Result<ExecutionReport, crate::machine::SimError> {
    if machine.state != MachineState::Download {
        return Err(crate::machine::SimError::NotRunning(machine.state));
    }
    let reject = |machine: &mut Machine, e: PayloadError| {
        let before = machine.uart_tx.len();
        machine.uart_tx.extend_from_slice(PROMPT);
        ExecutionReport {
            rejected: Some(e),
            uart: machine.uart_tx[before..].to_vec(),
            state: machine.state,
            trap: machine.trap,
            instructions: 0,
        }
    };
    let payload = match payload::decode(bytes) {
        Ok(p) => p,
        Err(e) => return Ok(reject(machine, e)),
    };
    if machine.write_ram(payload.header.entry_addr, &payload.code).is_err() {
        return Ok(reject(
            machine,
            PayloadError::MalformedHeader(format!(
                "entry {:#x} + {} bytes is not in RAM",
                payload.header.entry_addr,
                payload.code.len()
            )),
        ));
    }
    Ok(execute(machine, payload.header.entry_addr, Mode::SecureTz))
}

/// Runs a payload as the next boot stage would: after a normal boot, in
/// non-secure mode with the ROM locked down.
pub fn run_mb2_payload(machine: &mut Machine, bytes: &[u8]) -> Result<ExecutionReport, PayloadError> {
    let payload = payload::decode(bytes)?;
    machine
        .write_ram(payload.header.entry_addr, &payload.code)
        .map_err(|e| PayloadError::MalformedHeader(e.to_string()))?;
    Ok(execute(machine, payload.header.entry_addr, Mode::NonSecure))
}

fn execute(machine: &mut Machine, entry: u32, mode: Mode) -> ExecutionReport {
    let before = machine.uart_tx.len();
    let start = machine.retired;
    machine.jump_to(entry, mode);
    let deadline = machine.clock_ns + PAYLOAD_STEP_BUDGET * machine.timing.instr_ns();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    machine.run(&mut Injector::None, &mut rng, deadline, |_| false);
    ExecutionReport {
        rejected: None,
        uart: machine.uart_tx[before..].to_vec(),
        state: machine.state,
        trap: machine.trap,
        instructions: machine.retired - start,
    }
}
