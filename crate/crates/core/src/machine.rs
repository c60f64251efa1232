//! Cycle-counted boot-processor model with fault-injection hooks.

use crate::crypto::{CryptoEngine, FekSource, KEY_BLOB_BYTES};
use crate::isa::{Instr, InstrClass, Operand, Width, INSTR_BYTES, PC, SP};
use crate::rail::{RailKind, RailOutcome, StressWindow};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

pub mod map {
    pub const IROM_BASE: u32 = 0x0001_0000;
    pub const IROM_SIZE: u32 = 0x0002_0000;
    pub const IROM_END: u32 = IROM_BASE + IROM_SIZE;
    /// Exception entry: every trap lands here. Images put a `b .` at this address.
    pub const EXC_VECTOR: u32 = IROM_BASE + 8;

    pub const RAM_BASE: u32 = 0x5200_0000;
    pub const RAM_SIZE: u32 = 0x0001_0000;
    pub const RAM_END: u32 = RAM_BASE + RAM_SIZE;
    pub const STACK_TOP: u32 = RAM_END;

    pub const BOOTCTL_BASE: u32 = 0x6000_0000;
    pub const BOOTCTL_MARKER: u32 = BOOTCTL_BASE;
    pub const BOOTCTL_MODE_EXIT: u32 = BOOTCTL_BASE + 4;
    pub const BOOTCTL_DOWNLOAD: u32 = BOOTCTL_BASE + 8;

    pub const PROT_BASE: u32 = 0x6000_4000;
    pub const PROT_SECURE_BOOT: u32 = PROT_BASE;
    pub const PROT_PIROM_START: u32 = PROT_BASE + 4;
    pub const PROT_ACCESS_PIROM: u32 = PROT_BASE + 8;

    /// Plain read/write clock, reset and pad configuration registers.
    pub const SOCCFG_BASE: u32 = 0x6000_6000;
    pub const SOCCFG_SIZE: u32 = 0x400;

    pub const GPIO_OUT: u32 = 0x6000_D000;

    pub const MISC_BASE: u32 = 0x7000_0000;
    pub const MISC_NVKEY: u32 = MISC_BASE;
    pub const MISC_TESTKEY: u32 = MISC_BASE + 0x10;
    pub const MISC_SIZE: u32 = 0x20;

    pub const UART_TX: u32 = 0x7000_6000;

    pub const FUSE_BASE: u32 = 0x7000_F800;
    pub const FUSE_FAM: u32 = FUSE_BASE;
    pub const FUSE_PPM: u32 = FUSE_BASE + 0x4;
    pub const FUSE_PRODUCTION: u32 = FUSE_BASE + 0x8;
    pub const FUSE_FEK2_SELECT: u32 = FUSE_BASE + 0xC;
    pub const FUSE_ODM_ENABLE: u32 = FUSE_BASE + 0x10;
    pub const FUSE_FEK_PROTECT: u32 = FUSE_BASE + 0x14;
    pub const FUSE_SIZE: u32 = 0x18;

    pub const CRYPTO_CMD: u32 = 0x7001_2000;
    pub const CRYPTO_STATUS: u32 = 0x7001_2004;
}

pub mod crypto_cmd {
    pub const LOAD_FEKS: u32 = 1;
    pub const DECRYPT_KEY_BLOB: u32 = 2;
    pub const DERIVE_ODM_KEY: u32 = 3;
    pub const DECRYPT_MB1: u32 = 4;
}

pub mod marker {
    pub const QSPI_PROBE: u32 = 1;
    pub const MB1_READY: u32 = 2;
    pub const MB2_ENTRY: u32 = 3;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub tick_ns: u64,
    pub ticks_per_instr: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            tick_ns: 20,
            ticks_per_instr: 1,
        }
    }
}

impl Timing {
    pub fn instr_ns(&self) -> u64 {
        self.tick_ns * self.ticks_per_instr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    SecureTz,
    NonSecure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MachineState {
    ResetHeld,
    Running,
    Crashed,
    DetectShutdown,
    Halted,
    /// The hidden UART bootloader has printed its prompt and waits for a payload.
    Download,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectionRegs {
    pub secure_boot: bool,
    pub pirom_start: u32,
    pub access_pirom: bool,
}

impl Default for ProtectionRegs {
    fn default() -> Self {
        ProtectionRegs {
            secure_boot: true,
            pirom_start: 0x400,
            access_pirom: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuseBank {
    pub failure_analysis_mode: bool,
    pub preproduction_mode: bool,
    pub production_mode: bool,
    pub odm_secure_boot: bool,
    pub fek_readout_protect: bool,
}

impl Default for FuseBank {
    fn default() -> Self {
        FuseBank {
            failure_analysis_mode: false,
            preproduction_mode: false,
            production_mode: true,
            odm_secure_boot: false,
            fek_readout_protect: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultEffect {
    Skip,
    BranchInvert,
    CorruptResult,
    Crash,
    Detected,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub time_ns: u64,
    pub pc_at_fault: u32,
    pub effect: FaultEffect,
    /// Flipped bit for `CorruptResult`, untaken/taken target for `BranchInvert`.
    pub detail: Option<u32>,
}

impl FaultEvent {
    fn none(time_ns: u64, pc: u32) -> Self {
        FaultEvent {
            time_ns,
            pc_at_fault: pc,
            effect: FaultEffect::None,
            detail: None,
        }
    }
}

/// Relative likelihood that a given instruction class faults when it runs
/// inside a faulting stress window. Scales the rail's fault probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultModel {
    pub cond_branch_weight: f64,
    pub alu_weight: f64,
    pub other_weight: f64,
}

impl Default for FaultModel {
    fn default() -> Self {
        FaultModel {
            cond_branch_weight: 1.0,
            alu_weight: 0.005,
            other_weight: 0.001,
        }
    }
}

impl FaultModel {
    pub fn weight(&self, class: InstrClass) -> f64 {
        match class {
            InstrClass::CondBranch => self.cond_branch_weight,
            InstrClass::Alu => self.alu_weight,
            InstrClass::Other => self.other_weight,
        }
    }
}

/// A fault placed by hand rather than drawn from the rail outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ForcedEffect {
    Skip,
    BranchInvert,
    CorruptBit(u8),
}

/// Source of faults for a run.
#[derive(Clone, Debug)]
pub enum Injector {
    None,
    Rail {
        outcome: RailOutcome,
        model: FaultModel,
        spent: bool,
    },
    /// Applies `effect` to the instruction retired as number `at`.
    Forced {
        at: u64,
        effect: ForcedEffect,
        spent: bool,
    },
}

impl Injector {
    pub fn rail(outcome: RailOutcome, model: FaultModel) -> Self {
        Injector::Rail {
            outcome,
            model,
            spent: false,
        }
    }

    pub fn forced(at: u64, effect: ForcedEffect) -> Self {
        Injector::Forced { at, effect, spent: false }
    }

    /// Start of the next interval in which the injector may act, as
    /// `(time_ns, retired_index)`; `u64::MAX` where it never will.
    pub fn horizon(&self) -> (u64, u64) {
        match self {
            Injector::Rail { outcome, spent: false, .. } if outcome.kind != RailKind::None => {
                (outcome.stress_window.map(|w| w.start_ns).unwrap_or(u64::MAX), u64::MAX)
            }
            Injector::Forced { at, spent: false, .. } => (u64::MAX, *at),
            _ => (u64::MAX, u64::MAX),
        }
    }

    /// True once nothing more can be injected at or after `now_ns`.
    pub fn exhausted(&self, now_ns: u64) -> bool {
        match self {
            Injector::None => true,
            Injector::Rail { outcome, spent, .. } => {
                *spent || outcome.kind == RailKind::None || outcome.stress_window.map(|w| now_ns > w.end_ns).unwrap_or(true)
            }
            Injector::Forced { spent, .. } => *spent,
        }
    }

    fn window(&self) -> Option<StressWindow> {
        match self {
            Injector::Rail { outcome, .. } => outcome.stress_window,
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrapKind {
    PiromViolation,
    Unmapped,
    WriteToRom,
    UndefinedInstruction,
    FetchFault,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trap {
    pub kind: TrapKind,
    pub pc: u32,
    pub addr: u32,
    pub time_ns: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("machine is not running (state {0:?})")]
    NotRunning(MachineState),
    #[error("address {0:#x} is outside RAM")]
    OutsideRam(u32),
    #[error("iROM image is {0} bytes, larger than the iROM region")]
    ImageTooLarge(usize),
}

/// Device personality: everything about a board that is not code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Device {
    pub irom: Arc<Vec<u8>>,
    pub fuses: FuseBank,
    pub feks: FekSource,
    pub mb1_image: Arc<Vec<u8>>,
    pub timing: Timing,
}

#[derive(Clone, Debug)]
pub struct Machine {
    pub regs: [u32; 16],
    pub z: bool,
    pub n: bool,
    irom: Arc<Vec<u8>>,
    ram: Vec<u8>,
    soccfg: Vec<u32>,
    pub prot: ProtectionRegs,
    pub fuses: FuseBank,
    pub uart_tx: Vec<u8>,
    pub gpio: u32,
    /// `(time_ns, new latch value)` for every GPIO write that changed the latch.
    pub gpio_trace: Vec<(u64, u32)>,
    pub clock_ns: u64,
    pub retired: u64,
    pub timing: Timing,
    pub mode: Mode,
    pub state: MachineState,
    pub crypto: CryptoEngine,
    feks: FekSource,
    mb1_image: Arc<Vec<u8>>,
    pub mb1_plaintext: Option<Vec<u8>>,
    crypto_status: u32,
    /// `(marker, time_ns)` for every boot-progress marker written.
    pub markers: Vec<(u32, u64)>,
    pub trap: Option<Trap>,
    /// Ignored protection-register writes, for inspection.
    pub prot_log: Vec<String>,
    pub reset_vector: u32,
}

enum Access {
    Ok(u32),
    Fault(TrapKind),
}

impl Machine {
    pub fn new(device: &Device) -> Result<Self, SimError> {
        if device.irom.len() > map::IROM_SIZE as usize {
            return Err(SimError::ImageTooLarge(device.irom.len()));
        }
        Ok(Machine {
            regs: [0; 16],
            z: false,
            n: false,
            irom: device.irom.clone(),
            ram: vec![0; map::RAM_SIZE as usize],
            soccfg: vec![0; (map::SOCCFG_SIZE / 4) as usize],
            prot: ProtectionRegs::default(),
            fuses: device.fuses,
            uart_tx: Vec::new(),
            gpio: 0,
            gpio_trace: Vec::new(),
            clock_ns: 0,
            retired: 0,
            timing: device.timing,
            mode: Mode::SecureTz,
            state: MachineState::ResetHeld,
            crypto: CryptoEngine::new(),
            feks: device.feks.clone(),
            mb1_image: device.mb1_image.clone(),
            mb1_plaintext: None,
            crypto_status: 0,
            markers: Vec::new(),
            trap: None,
            prot_log: Vec::new(),
            reset_vector: map::IROM_BASE,
        })
    }

    /// Puts the machine back into its power-on state with reset asserted.
    pub fn reset_assert(&mut self) {
        let irom = self.irom.clone();
        let mb1 = self.mb1_image.clone();
        let device = Device {
            irom,
            fuses: FuseBank {
                fek_readout_protect: false,
                ..self.fuses
            },
            feks: self.feks.clone(),
            mb1_image: mb1,
            timing: self.timing,
        };
        let vector = self.reset_vector;
        *self = Machine::new(&device).expect("image already validated");
        self.reset_vector = vector;
    }

    pub fn reset_release(&mut self) {
        if self.state == MachineState::ResetHeld {
            self.state = MachineState::Running;
            self.regs[PC as usize] = self.reset_vector;
            self.regs[SP as usize] = map::STACK_TOP;
        }
    }

    pub fn pc(&self) -> u32 {
        self.regs[PC as usize]
    }

    pub fn irom(&self) -> &[u8] {
        &self.irom
    }

    pub fn key_blob(&self) -> &[u8] {
        let end = self.irom.len();
        &self.irom[end.saturating_sub(KEY_BLOB_BYTES)..]
    }

    /// Copies `bytes` into RAM at `addr`.
    pub fn write_ram(&mut self, addr: u32, bytes: &[u8]) -> Result<(), SimError> {
        let end = addr as u64 + bytes.len() as u64;
        if addr < map::RAM_BASE || end > map::RAM_END as u64 {
            return Err(SimError::OutsideRam(addr));
        }
        let at = (addr - map::RAM_BASE) as usize;
        self.ram[at..at + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Starts executing at `entry` in the given mode, as a loader would.
    pub fn jump_to(&mut self, entry: u32, mode: Mode) {
        self.regs[PC as usize] = entry;
        self.mode = mode;
        self.state = MachineState::Running;
    }

    fn pirom_blocked(&self, addr: u32) -> bool {
        let offset = addr - map::IROM_BASE;
        offset >= self.prot.pirom_start && self.mode == Mode::NonSecure && !self.prot.access_pirom
    }

    /// Data load as seen by a program.
    fn load(&mut self, addr: u32, width: Width) -> Access {
        let n = match width {
            Width::Word => 4,
            Width::Byte => 1,
        };
        let read_bytes = |buf: &[u8], at: usize| -> u32 {
            let mut v = [0u8; 4];
            v[..n].copy_from_slice(&buf[at..at + n]);
            u32::from_le_bytes(v)
        };
        let last = addr.wrapping_add(n as u32 - 1);
        if (map::IROM_BASE..map::IROM_END).contains(&addr) && last < map::IROM_END {
            if self.pirom_blocked(addr) || self.pirom_blocked(last) {
                return Access::Fault(TrapKind::PiromViolation);
            }
            let at = (addr - map::IROM_BASE) as usize;
            if at + n > self.irom.len() {
                return Access::Ok(0);
            }
            return Access::Ok(read_bytes(&self.irom, at));
        }
        if (map::RAM_BASE..map::RAM_END).contains(&addr) && last < map::RAM_END {
            return Access::Ok(read_bytes(&self.ram, (addr - map::RAM_BASE) as usize));
        }
        if (map::MISC_BASE..map::MISC_BASE + map::MISC_SIZE).contains(&addr) && last < map::MISC_BASE + map::MISC_SIZE {
            if self.fuses.fek_readout_protect {
                return Access::Ok(0);
            }
            let mut regs = [0u8; 32];
            regs[..16].copy_from_slice(&self.feks.nvkey);
            regs[16..].copy_from_slice(&self.feks.testkey);
            return Access::Ok(read_bytes(&regs, (addr - map::MISC_BASE) as usize));
        }
        if (map::SOCCFG_BASE..map::SOCCFG_BASE + map::SOCCFG_SIZE).contains(&addr) {
            let word = self.soccfg[((addr - map::SOCCFG_BASE) / 4) as usize];
            return Access::Ok(match width {
                Width::Word => word,
                Width::Byte => (word >> (8 * (addr % 4))) & 0xFF,
            });
        }
        // Word registers; byte loads pick a lane of the containing word.
        if width == Width::Word && !addr.is_multiple_of(4) {
            return Access::Fault(TrapKind::Unmapped);
        }
        let v = match addr & !3 {
            map::FUSE_FAM => self.fuses.failure_analysis_mode as u32,
            map::FUSE_PPM => self.fuses.preproduction_mode as u32,
            map::FUSE_PRODUCTION => self.fuses.production_mode as u32,
            map::FUSE_FEK2_SELECT => (self.feks.fek2_select == crate::crypto::Fek2Select::Testkey) as u32,
            map::FUSE_ODM_ENABLE => self.fuses.odm_secure_boot as u32,
            map::FUSE_FEK_PROTECT => self.fuses.fek_readout_protect as u32,
            map::PROT_SECURE_BOOT => self.prot.secure_boot as u32,
            map::PROT_PIROM_START => self.prot.pirom_start,
            map::PROT_ACCESS_PIROM => self.prot.access_pirom as u32,
            map::CRYPTO_STATUS => self.crypto_status,
            map::GPIO_OUT => self.gpio,
            map::BOOTCTL_MARKER => self.markers.last().map(|m| m.0).unwrap_or(0),
            _ => return Access::Fault(TrapKind::Unmapped),
        };
        Access::Ok(match width {
            Width::Word => v,
            Width::Byte => (v >> (8 * (addr % 4))) & 0xFF,
        })
    }

    fn store(&mut self, addr: u32, value: u32, width: Width) -> Result<(), TrapKind> {
        let n = match width {
            Width::Word => 4usize,
            Width::Byte => 1,
        };
        if (map::IROM_BASE..map::IROM_END).contains(&addr) {
            return Err(TrapKind::WriteToRom);
        }
        if (map::RAM_BASE..map::RAM_END).contains(&addr) && addr as u64 + n as u64 <= map::RAM_END as u64 {
            let at = (addr - map::RAM_BASE) as usize;
            self.ram[at..at + n].copy_from_slice(&value.to_le_bytes()[..n]);
            return Ok(());
        }
        if (map::SOCCFG_BASE..map::SOCCFG_BASE + map::SOCCFG_SIZE).contains(&addr) {
            let i = ((addr - map::SOCCFG_BASE) / 4) as usize;
            self.soccfg[i] = match width {
                Width::Word => value,
                Width::Byte => {
                    let sh = 8 * (addr % 4);
                    (self.soccfg[i] & !(0xFF << sh)) | ((value & 0xFF) << sh)
                }
            };
            return Ok(());
        }
        match addr {
            map::UART_TX => self.uart_tx.push(value as u8),
            map::GPIO_OUT => self.set_gpio(value),
            map::BOOTCTL_MARKER => self.markers.push((value, self.clock_ns)),
            map::BOOTCTL_MODE_EXIT => self.mode = Mode::NonSecure,
            map::BOOTCTL_DOWNLOAD => self.state = MachineState::Download,
            map::PROT_SECURE_BOOT => {
                if value & 1 == 0 {
                    self.prot.secure_boot = false;
                } else if !self.prot.secure_boot {
                    self.prot_log.push(format!("{}: SECURE_BOOT cannot be re-set", self.clock_ns));
                }
            }
            map::PROT_PIROM_START | map::PROT_ACCESS_PIROM => {
                if !self.prot.secure_boot {
                    self.prot_log
                        .push(format!("{}: write {value:#x} to {addr:#x} ignored, SECURE_BOOT=0", self.clock_ns));
                } else if addr == map::PROT_PIROM_START {
                    self.prot.pirom_start = value;
                } else {
                    self.prot.access_pirom = value & 1 == 1;
                }
            }
            map::CRYPTO_CMD => self.crypto_command(value),
            // Fuses and key registers are read-only; writes are dropped.
            a if (map::FUSE_BASE..map::FUSE_BASE + map::FUSE_SIZE).contains(&a) => {}
            a if (map::MISC_BASE..map::MISC_BASE + map::MISC_SIZE).contains(&a) => {}
            map::CRYPTO_STATUS => {}
            _ => return Err(TrapKind::Unmapped),
        }
        Ok(())
    }

    fn set_gpio(&mut self, value: u32) {
        if value != self.gpio {
            self.gpio = value;
            self.gpio_trace.push((self.clock_ns, value));
        }
    }

    fn crypto_command(&mut self, cmd: u32) {
        let ok = match cmd {
            crypto_cmd::LOAD_FEKS => {
                let r = self.crypto.load_feks(&self.feks);
                if r.is_ok() {
                    self.fuses.fek_readout_protect = true;
                }
                r.is_ok()
            }
            crypto_cmd::DECRYPT_KEY_BLOB => {
                let blob = self.key_blob().to_vec();
                self.crypto.decrypt_key_blob(&blob).is_ok()
            }
            crypto_cmd::DERIVE_ODM_KEY => self.crypto.derive_odm_key().is_ok(),
            crypto_cmd::DECRYPT_MB1 => {
                let image = self.mb1_image.clone();
                match self.crypto.decrypt_mb1(&image, self.fuses.odm_secure_boot) {
                    Ok(r) => {
                        self.mb1_plaintext = Some(r.plaintext);
                        true
                    }
                    Err(_) => false,
                }
            }
            _ => false,
        };
        self.crypto_status = if ok { 0 } else { 1 };
    }

    fn fetch(&self, pc: u32) -> Option<Instr> {
        let at = |buf: &[u8], base: u32| -> Option<[u8; 8]> {
            let off = pc.checked_sub(base)? as usize;
            buf.get(off..off + INSTR_BYTES as usize)?.try_into().ok()
        };
        let bytes = if (map::IROM_BASE..map::IROM_END).contains(&pc) {
            at(&self.irom, map::IROM_BASE)?
        } else if (map::RAM_BASE..map::RAM_END).contains(&pc) {
            at(&self.ram, map::RAM_BASE)?
        } else {
            return None;
        };
        Instr::decode(bytes)
    }

    /// Decodes the instruction at `pc` without side effects.
    pub fn peek(&self, pc: u32) -> Option<Instr> {
        self.fetch(pc)
    }

    fn take_trap(&mut self, kind: TrapKind, addr: u32) {
        let pc = self.pc();
        self.trap = Some(Trap {
            kind,
            pc,
            addr,
            time_ns: self.clock_ns,
        });
        self.regs[PC as usize] = map::EXC_VECTOR;
    }

    fn retire(&mut self) {
        self.clock_ns += self.timing.instr_ns();
        self.retired += 1;
    }

    fn operand(&self, src: Operand) -> u32 {
        match src {
            Operand::Imm(v) => v,
            Operand::Reg(r) => self.reg_read(r),
        }
    }

    /// Register read as an instruction sees it: pc reads as the next instruction.
    fn reg_read(&self, r: u8) -> u32 {
        if r == PC {
            self.pc().wrapping_add(INSTR_BYTES)
        } else {
            self.regs[r as usize]
        }
    }

    fn branch_condition(&self, instr: &Instr) -> Option<(bool, u32)> {
        match *instr {
            Instr::Cbz { rn, target } => Some((self.reg_read(rn) == 0, target)),
            Instr::Cbnz { rn, target } => Some((self.reg_read(rn) != 0, target)),
            Instr::Beq { target } => Some((self.z, target)),
            Instr::Bne { target } => Some((!self.z, target)),
            _ => None,
        }
    }

    /// Executes one instruction, applying at most one fault from `inj`.
    pub fn step<R: Rng + ?Sized>(&mut self, inj: &mut Injector, rng: &mut R) -> Result<FaultEvent, SimError> {
        if self.state != MachineState::Running {
            return Err(SimError::NotRunning(self.state));
        }
        let pc = self.pc();
        let start = self.clock_ns;
        let end = start + self.timing.instr_ns();

        // Rail outcomes that stop the core act regardless of what is fetched.
        if let Injector::Rail { outcome, spent, .. } = inj {
            if !*spent && matches!(outcome.kind, RailKind::Crash | RailKind::Detected) {
                if let Some(w) = outcome.stress_window {
                    if w.overlaps(start, end) {
                        *spent = true;
                        let (state, effect) = if outcome.kind == RailKind::Crash {
                            (MachineState::Crashed, FaultEffect::Crash)
                        } else {
                            (MachineState::DetectShutdown, FaultEffect::Detected)
                        };
                        self.state = state;
                        return Ok(FaultEvent {
                            time_ns: start,
                            pc_at_fault: pc,
                            effect,
                            detail: None,
                        });
                    }
                }
            }
        }

        let Some(instr) = self.fetch(pc) else {
            let kind = if (map::IROM_BASE..map::IROM_END).contains(&pc) || (map::RAM_BASE..map::RAM_END).contains(&pc) {
                TrapKind::UndefinedInstruction
            } else {
                TrapKind::FetchFault
            };
            self.take_trap(kind, pc);
            self.retire();
            return Ok(FaultEvent::none(start, pc));
        };

        let forced = self.pick_fault(inj, &instr, start, end, rng);
        let mut event = FaultEvent::none(start, pc);
        if let Some(effect) = forced {
            event.effect = match effect {
                ForcedEffect::Skip => FaultEffect::Skip,
                ForcedEffect::BranchInvert => FaultEffect::BranchInvert,
                ForcedEffect::CorruptBit(b) => {
                    event.detail = Some(b as u32);
                    FaultEffect::CorruptResult
                }
            };
        }
        self.execute(pc, &instr, forced, &mut event);
        self.retire();
        Ok(event)
    }

    fn pick_fault<R: Rng + ?Sized>(&self, inj: &mut Injector, instr: &Instr, start: u64, end: u64, rng: &mut R) -> Option<ForcedEffect> {
        let window = inj.window();
        match inj {
            Injector::None => None,
            Injector::Forced { at, effect, spent } => {
                if !*spent && self.retired == *at {
                    *spent = true;
                    Some(*effect)
                } else {
                    None
                }
            }
            Injector::Rail { outcome, model, spent } => {
                if *spent || outcome.kind != RailKind::FaultWindow || !window?.overlaps(start, end) {
                    return None;
                }
                let class = instr.class();
                let p = (outcome.fault_probability * model.weight(class)).clamp(0.0, 1.0);
                if rng.gen::<f64>() >= p {
                    return None;
                }
                *spent = true;
                Some(match class {
                    InstrClass::CondBranch => ForcedEffect::BranchInvert,
                    InstrClass::Alu => ForcedEffect::CorruptBit(rng.gen_range(0..32)),
                    InstrClass::Other => ForcedEffect::Skip,
                })
            }
        }
    }

    fn execute(&mut self, pc: u32, instr: &Instr, fault: Option<ForcedEffect>, event: &mut FaultEvent) {
        let next = pc.wrapping_add(INSTR_BYTES);
        if fault == Some(ForcedEffect::Skip) {
            self.regs[PC as usize] = next;
            return;
        }
        if let Some((mut taken, target)) = self.branch_condition(instr) {
            if fault == Some(ForcedEffect::BranchInvert) {
                taken = !taken;
                event.detail = Some(if taken { target } else { next });
            }
            self.regs[PC as usize] = if taken { target } else { next };
            return;
        }
        // Inverting a non-branch has nothing to invert.
        let corrupt = match fault {
            Some(ForcedEffect::CorruptBit(b)) => Some(b),
            _ => None,
        };
        let mut new_pc = next;
        match *instr {
            Instr::Nop => {}
            Instr::Halt => {
                self.state = MachineState::Halted;
                new_pc = pc;
            }
            Instr::Mov { rd, src } => {
                let v = flip(self.operand(src), corrupt, rd);
                if rd == PC {
                    new_pc = v;
                } else {
                    self.regs[rd as usize] = v;
                }
            }
            Instr::Add { rd, rn, src } => {
                let v = flip(self.reg_read(rn).wrapping_add(self.operand(src)), corrupt, rd);
                if rd == PC {
                    new_pc = v;
                } else {
                    self.regs[rd as usize] = v;
                }
            }
            Instr::Cmp { rn, src } => {
                let r = self.reg_read(rn).wrapping_sub(self.operand(src));
                self.z = r == 0;
                self.n = r & 0x8000_0000 != 0;
            }
            Instr::Ldr { rd, rn, offset, width } => {
                let addr = self.reg_read(rn).wrapping_add(offset as u32);
                match self.load(addr, width) {
                    Access::Ok(v) => {
                        if rd == PC {
                            new_pc = v;
                        } else {
                            self.regs[rd as usize] = v;
                        }
                    }
                    Access::Fault(kind) => {
                        self.take_trap(kind, addr);
                        return;
                    }
                }
            }
            Instr::Str { rs, rn, offset, width } => {
                let addr = self.reg_read(rn).wrapping_add(offset as u32);
                let v = self.reg_read(rs);
                if let Err(kind) = self.store(addr, v, width) {
                    self.take_trap(kind, addr);
                    return;
                }
            }
            Instr::B { target } => new_pc = target,
            Instr::Bl { target } => {
                self.regs[crate::isa::LR as usize] = next;
                new_pc = target;
            }
            Instr::Push { regs } => {
                let count = regs.count_ones();
                let base = self.regs[SP as usize].wrapping_sub(4 * count);
                let mut addr = base;
                for r in (0..16u8).filter(|r| regs & (1 << r) != 0) {
                    let v = self.reg_read(r);
                    if let Err(kind) = self.store(addr, v, Width::Word) {
                        self.take_trap(kind, addr);
                        return;
                    }
                    addr = addr.wrapping_add(4);
                }
                self.regs[SP as usize] = base;
            }
            Instr::Pop { regs } => {
                let mut addr = self.regs[SP as usize];
                let mut loaded = Vec::with_capacity(regs.count_ones() as usize);
                for r in (0..16u8).filter(|r| regs & (1 << r) != 0) {
                    match self.load(addr, Width::Word) {
                        Access::Ok(v) => loaded.push((r, v)),
                        Access::Fault(kind) => {
                            self.take_trap(kind, addr);
                            return;
                        }
                    }
                    addr = addr.wrapping_add(4);
                }
                for (r, v) in loaded {
                    if r == PC {
                        new_pc = v;
                    } else if r != SP {
                        self.regs[r as usize] = v;
                    }
                }
                self.regs[SP as usize] = addr;
            }
            Instr::OutUart { rn } => {
                let v = self.reg_read(rn);
                self.uart_tx.push(v as u8);
            }
            Instr::OutGpio { rn } => {
                let v = self.reg_read(rn);
                self.set_gpio(v);
            }
            Instr::Cbz { .. } | Instr::Cbnz { .. } | Instr::Beq { .. } | Instr::Bne { .. } => unreachable!(),
        }
        self.regs[PC as usize] = new_pc;
    }

    /// Collapses iterations of a `sub rX, rX, #1; cbnz rX, <self>` delay
    /// loop at `pc`, stopping before `horizon_ns` / `retired_limit`.
    ///
    /// The resulting state is identical to stepping the same iterations one
    /// by one. Returns the number of iterations skipped.
    pub fn fast_forward(&mut self, horizon_ns: u64, retired_limit: u64) -> u64 {
        if self.state != MachineState::Running {
            return 0;
        }
        let pc = self.pc();
        let (
            Some(Instr::Add {
                rd,
                rn,
                src: Operand::Imm(0xFFFF_FFFF),
            }),
            Some(Instr::Cbnz { rn: test, target }),
        ) = (self.fetch(pc), self.fetch(pc.wrapping_add(INSTR_BYTES)))
        else {
            return 0;
        };
        if rd != rn || rd != test || target != pc || rd == PC {
            return 0;
        }
        let count = self.regs[rd as usize] as u64;
        if count < 2 {
            return 0;
        }
        let iter_ns = 2 * self.timing.instr_ns();
        let by_time = horizon_ns.saturating_sub(self.clock_ns) / iter_ns;
        let by_index = retired_limit.saturating_sub(self.retired) / 2;
        let n = (count - 1).min(by_time).min(by_index);
        if n == 0 {
            return 0;
        }
        self.regs[rd as usize] = (count - n) as u32;
        self.clock_ns += n * iter_ns;
        self.retired += 2 * n;
        n
    }

    /// True when the instruction at pc branches to itself.
    pub fn at_idle_loop(&self) -> bool {
        matches!(self.fetch(self.pc()), Some(Instr::B { target }) if target == self.pc())
    }

    /// Runs until the machine leaves `Running`, parks in an idle loop,
    /// passes `deadline_ns`, or `watch` returns true (checked before every
    /// instruction). Delay loops are collapsed whenever `inj` cannot act.
    pub fn run<R, W>(&mut self, inj: &mut Injector, rng: &mut R, deadline_ns: u64, mut watch: W) -> RunSummary
    where
        R: Rng + ?Sized,
        W: FnMut(&Machine) -> bool,
    {
        let mut fault = None;
        let end = loop {
            if self.state != MachineState::Running {
                break RunEnd::Stopped(self.state);
            }
            if watch(self) {
                break RunEnd::Watch;
            }
            if self.at_idle_loop() {
                break RunEnd::Idle;
            }
            if self.clock_ns >= deadline_ns {
                break RunEnd::Deadline;
            }
            let (horizon_ns, horizon_idx) = inj.horizon();
            if self.fast_forward(horizon_ns.min(deadline_ns), horizon_idx) > 0 {
                continue;
            }
            let ev = self.step(inj, rng).expect("checked running");
            if ev.effect != FaultEffect::None && fault.is_none() {
                fault = Some(ev);
            }
        };
        RunSummary { end, fault }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunEnd {
    Stopped(MachineState),
    Idle,
    Deadline,
    Watch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSummary {
    pub end: RunEnd,
    pub fault: Option<FaultEvent>,
}

fn flip(v: u32, bit: Option<u8>, rd: u8) -> u32 {
    match bit {
        Some(b) if rd != PC => v ^ (1u32 << (b % 32)),
        _ => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::assemble;
    use crate::crypto::Fek2Select;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn device_with(src: &str) -> Device {
        let p = assemble(src).unwrap();
        assert_eq!(p.base, map::IROM_BASE);
        Device {
            irom: Arc::new(p.bytes),
            fuses: FuseBank::default(),
            feks: FekSource {
                nvkey: [0x11; 16],
                testkey: [0x22; 16],
                fek2_select: Fek2Select::Nvkey,
            },
            mb1_image: Arc::new(Vec::new()),
            timing: Timing::default(),
        }
    }

    fn run(m: &mut Machine, max: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut inj = Injector::None;
        for _ in 0..max {
            if m.state != MachineState::Running || m.at_idle_loop() {
                break;
            }
            m.step(&mut inj, &mut rng).unwrap();
        }
    }

    const PRELUDE: &str = ".org 0x10000\n b start\n hang: b hang\n";

    #[test]
    fn cbz_taken_without_fault() {
        let src = format!("{PRELUDE}start: mov r0, #0\n cbz r0, yes\n halt\nyes: mov r1, #7\n halt\n");
        let mut m = Machine::new(&device_with(&src)).unwrap();
        m.reset_release();
        run(&mut m, 100);
        assert_eq!(m.regs[1], 7);
        assert_eq!(m.state, MachineState::Halted);
    }

    #[test]
    fn clock_is_linear_in_retired() {
        let src = format!("{PRELUDE}start: mov r0, #5\nl: add r0, r0, #-1\n cbnz r0, l\n halt\n");
        let mut dev = device_with(&src);
        dev.timing = Timing {
            tick_ns: 20,
            ticks_per_instr: 3,
        };
        let mut m = Machine::new(&dev).unwrap();
        m.reset_release();
        run(&mut m, 100);
        assert_eq!(m.retired, 1 + 1 + 10 + 1);
        assert_eq!(m.clock_ns, m.retired * 60);
    }

    #[test]
    fn fast_forward_matches_stepping() {
        for count in [2u32, 3, 17, 1000] {
            for horizon in [0u64, 100, 1_000, 10_000, u64::MAX] {
                let src = format!("{PRELUDE}start: mov r7, #{count}\nl: sub r7, r7, #1\n cbnz r7, l\n halt\n");
                let dev = device_with(&src);
                let mut a = Machine::new(&dev).unwrap();
                a.reset_release();
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let mut inj = Injector::None;
                a.step(&mut inj, &mut rng).unwrap();
                let mut b = a.clone();
                let n = a.fast_forward(horizon, u64::MAX);
                for _ in 0..2 * n {
                    b.step(&mut inj, &mut rng).unwrap();
                }
                assert_eq!(a.regs, b.regs);
                assert_eq!(a.clock_ns, b.clock_ns);
                assert_eq!(a.retired, b.retired);
                assert!(a.clock_ns <= horizon.max(20));
                run(&mut a, 10_000);
                run(&mut b, 10_000);
                assert_eq!((a.regs, a.clock_ns), (b.regs, b.clock_ns));
            }
        }
    }

    #[test]
    fn forced_skip_and_invert() {
        let src = format!("{PRELUDE}start: mov r0, #0\n cbz r0, yes\n mov r1, #1\n halt\nyes: mov r1, #2\n halt\n");
        let dev = device_with(&src);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (effect, expect) in [(ForcedEffect::Skip, 1), (ForcedEffect::BranchInvert, 1)] {
            let mut m = Machine::new(&dev).unwrap();
            m.reset_release();
            let mut inj = Injector::forced(2, effect);
            while m.state == MachineState::Running {
                m.step(&mut inj, &mut rng).unwrap();
            }
            assert_eq!(m.regs[1], expect, "{effect:?}");
        }
        // corrupting the mov feeding cbz flips the decision
        let mut m = Machine::new(&dev).unwrap();
        m.reset_release();
        let mut inj = Injector::forced(1, ForcedEffect::CorruptBit(3));
        while m.state == MachineState::Running {
            m.step(&mut inj, &mut rng).unwrap();
        }
        assert_eq!(m.regs[0], 8);
        assert_eq!(m.regs[1], 1);
    }

    #[test]
    fn skipped_cmp_keeps_flags() {
        let src = format!("{PRELUDE}start: mov r0, #1\n cmp r0, #1\n cmp r0, #0\n halt\n");
        let dev = device_with(&src);
        let mut m = Machine::new(&dev).unwrap();
        m.reset_release();
        assert!(!m.z && !m.n);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut inj = Injector::forced(3, ForcedEffect::Skip);
        while m.state == MachineState::Running {
            m.step(&mut inj, &mut rng).unwrap();
        }
        assert!(m.z, "flags left by the first cmp");
    }

    #[test]
    fn push_pop_round_trip() {
        let src = format!("{PRELUDE}start: mov fp, #0x11\n bl f\n halt\nf: push {{fp, lr}}\n mov fp, #0x22\n pop {{fp, pc}}\n");
        let mut m = Machine::new(&device_with(&src)).unwrap();
        m.reset_release();
        run(&mut m, 100);
        assert_eq!(m.state, MachineState::Halted);
        assert_eq!(m.regs[11], 0x11);
        assert_eq!(m.regs[SP as usize], map::STACK_TOP);
    }

    #[test]
    fn unmapped_access_traps_to_vector() {
        let src = format!("{PRELUDE}start: mov r1, #0x90000000\n ldr r0, [r1]\n halt\n");
        let mut m = Machine::new(&device_with(&src)).unwrap();
        m.reset_release();
        run(&mut m, 100);
        assert_eq!(m.trap.unwrap().kind, TrapKind::Unmapped);
        assert_eq!(m.pc(), map::EXC_VECTOR);
        assert!(m.at_idle_loop());
    }

    #[test]
    fn rail_crash_stops_core() {
        let src = format!("{PRELUDE}start: nop\n nop\n nop\n nop\n halt\n");
        let mut m = Machine::new(&device_with(&src)).unwrap();
        m.reset_release();
        let out = RailOutcome {
            kind: RailKind::Crash,
            stress_window: Some(StressWindow {
                start_ns: 40,
                end_ns: 14_040,
            }),
            fault_probability: 0.0,
        };
        let mut inj = Injector::rail(out, FaultModel::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last = None;
        while m.state == MachineState::Running {
            last = Some(m.step(&mut inj, &mut rng).unwrap());
        }
        assert_eq!(m.state, MachineState::Crashed);
        assert_eq!(last.unwrap().effect, FaultEffect::Crash);
        assert_eq!(last.unwrap().time_ns, 40);
        assert!(m.step(&mut inj, &mut rng).is_err());
    }

    #[test]
    fn write_lock_on_protection_registers() {
        let src = format!(
            "{PRELUDE}start: mov r1, #{:#x}\n mov r0, #0\n str r0, [r1]\n mov r0, #0x3000\n str r0, [r1, #4]\n mov r0, #1\n str r0, [r1, #8]\n str r0, [r1]\n halt\n",
            map::PROT_BASE
        );
        let mut m = Machine::new(&device_with(&src)).unwrap();
        m.reset_release();
        run(&mut m, 100);
        assert_eq!(
            m.prot,
            ProtectionRegs {
                secure_boot: false,
                pirom_start: 0x400,
                access_pirom: false
            }
        );
        assert_eq!(m.prot_log.len(), 3);
    }

    #[test]
    fn fek_registers_respect_protect_bit() {
        let src = format!(
            "{PRELUDE}start: mov r1, #{:#x}\n ldrb r0, [r1]\n mov r2, #{:#x}\n mov r3, #1\n str r3, [r2]\n ldrb r4, [r1]\n halt\n",
            map::MISC_NVKEY,
            map::CRYPTO_CMD
        );
        let mut m = Machine::new(&device_with(&src)).unwrap();
        m.reset_release();
        run(&mut m, 100);
        assert_eq!(m.regs[0], 0x11);
        assert_eq!(m.regs[4], 0);
        assert!(m.fuses.fek_readout_protect);
        assert!(m.crypto.feks_loaded());
    }
}
