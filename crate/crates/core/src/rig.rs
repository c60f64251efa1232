//! Emulated glitch controller.
//!
//! The controller sits between the campaign host and the target. The host
//! talks to it over a byte stream of fixed five-byte frames (opcode plus a
//! little-endian 32-bit argument); the controller holds the target in reset,
//! releases it, and fires the crowbar a programmed number of ticks after the
//! release edge. [`RigBackend`] is the seam where a physical controller
//! could replace the emulation.

use crate::rail::GlitchPulse;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FRAME_BYTES: usize = 5;

pub mod opcode {
    pub const SET_OFFSET: u8 = 0x01;
    pub const SET_LENGTH: u8 = 0x02;
    pub const ARM: u8 = 0x03;
    pub const RESET_PULSE: u8 = 0x04;
    pub const STATUS: u8 = 0x05;
}

pub mod reply {
    pub const ACK: u8 = 0x06;
    pub const ERR_BOUNDS: u8 = 0xFC;
    pub const ERR_NOT_ARMED: u8 = 0xFD;
    pub const ERR_ARMED: u8 = 0xFE;
    pub const ERR_OPCODE: u8 = 0xFF;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub tick_ns: u64,
    pub max_offset_ticks: u32,
    pub max_length_ticks: u32,
    /// Upper bound of the uniform delay between reset release and the
    /// target's first instruction; 0 disables jitter.
    pub jitter_max_ns: u64,
    pub jitter_seed: u64,
}

impl Default for RigConfig {
    fn default() -> Self {
        RigConfig {
            tick_ns: 20,
            max_offset_ticks: u32::MAX,
            max_length_ticks: 1 << 16,
            jitter_max_ns: 0,
            jitter_seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RigConfigError {
    #[error("rig tick must be positive")]
    ZeroTick,
    #[error("pulse of {offset_ns} ns + {length_ns} ns does not fit the rig bounds")]
    OutOfBounds { offset_ns: u64, length_ns: u64 },
    #[error("pulse is not aligned to the {0} ns rig tick")]
    Unaligned(u64),
}

impl RigConfig {
    pub fn validate(&self) -> Result<(), RigConfigError> {
        if self.tick_ns == 0 {
            return Err(RigConfigError::ZeroTick);
        }
        Ok(())
    }

    /// Converts a pulse to `(offset_ticks, length_ticks)` if the rig can produce it.
    pub fn ticks(&self, pulse: &GlitchPulse) -> Result<(u32, u32), RigConfigError> {
        self.validate()?;
        if !pulse.offset_ns.is_multiple_of(self.tick_ns) || !pulse.length_ns.is_multiple_of(self.tick_ns) {
            return Err(RigConfigError::Unaligned(self.tick_ns));
        }
        let oob = || RigConfigError::OutOfBounds {
            offset_ns: pulse.offset_ns,
            length_ns: pulse.length_ns,
        };
        let off = u32::try_from(pulse.offset_ns / self.tick_ns).map_err(|_| oob())?;
        let len = u32::try_from(pulse.length_ns / self.tick_ns).map_err(|_| oob())?;
        if off > self.max_offset_ticks || len > self.max_length_ticks || len == 0 {
            return Err(oob());
        }
        Ok((off, len))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RigState {
    Idle = 0,
    Armed = 1,
    Fired = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RigCommand {
    SetOffset(u32),
    SetLength(u32),
    Arm,
    /// Hold reset for this many ticks, then release and fire.
    ResetPulse(u32),
    Status,
}

impl RigCommand {
    pub fn encode(&self) -> [u8; FRAME_BYTES] {
        let (op, arg) = match *self {
            RigCommand::SetOffset(t) => (opcode::SET_OFFSET, t),
            RigCommand::SetLength(t) => (opcode::SET_LENGTH, t),
            RigCommand::Arm => (opcode::ARM, 0),
            RigCommand::ResetPulse(t) => (opcode::RESET_PULSE, t),
            RigCommand::Status => (opcode::STATUS, 0),
        };
        let mut f = [op, 0, 0, 0, 0];
        f[1..].copy_from_slice(&arg.to_le_bytes());
        f
    }

    /// `None` for an unknown opcode.
    pub fn decode(frame: &[u8; FRAME_BYTES]) -> Option<RigCommand> {
        let arg = u32::from_le_bytes(frame[1..].try_into().unwrap());
        Some(match frame[0] {
            opcode::SET_OFFSET => RigCommand::SetOffset(arg),
            opcode::SET_LENGTH => RigCommand::SetLength(arg),
            opcode::ARM => RigCommand::Arm,
            opcode::RESET_PULSE => RigCommand::ResetPulse(arg),
            opcode::STATUS => RigCommand::Status,
            _ => return None,
        })
    }
}

/// What the target experienced during one reset cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fire {
    /// Rig time of the reset release edge.
    pub trigger_ns: u64,
    /// Pulse relative to the trigger.
    pub pulse: GlitchPulse,
    /// Delay between release and the target's first instruction.
    pub jitter_ns: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RigError {
    #[error("rig is not armed")]
    NotArmed,
    #[error("rig rejected a command with reply {0:#04x}")]
    Rejected(u8),
    #[error("backend did not report the fired pulse")]
    NoFire,
}

/// The emulated controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub config: RigConfig,
    state: RigState,
    offset_ticks: u32,
    length_ticks: u32,
    clock_ns: u64,
    #[serde(with = "crate::rngser")]
    jitter_rng: ChaCha8Rng,
    /// Bytes of an incomplete frame.
    pending: Vec<u8>,
    last_fire: Option<Fire>,
}

impl Rig {
    pub fn new(config: RigConfig) -> Rig {
        Rig {
            config,
            state: RigState::Idle,
            offset_ticks: 0,
            length_ticks: 0,
            clock_ns: 0,
            jitter_rng: ChaCha8Rng::seed_from_u64(config.jitter_seed),
            pending: Vec::new(),
            last_fire: None,
        }
    }

    pub fn state(&self) -> RigState {
        self.state
    }

    pub fn clock_ns(&self) -> u64 {
        self.clock_ns
    }

    pub fn last_fire(&self) -> Option<Fire> {
        self.last_fire
    }

    /// Feeds raw bytes; returns one reply byte per completed frame. A
    /// trailing partial frame is kept until more bytes arrive.
    pub fn execute(&mut self, bytes: &[u8]) -> Vec<u8> {
        self.pending.extend_from_slice(bytes);
        let mut replies = Vec::new();
        let mut frames = self.pending.chunks_exact(FRAME_BYTES);
        let cmds: Vec<[u8; FRAME_BYTES]> = frames.by_ref().map(|f| f.try_into().unwrap()).collect();
        self.pending = frames.remainder().to_vec();
        for f in cmds {
            replies.push(match RigCommand::decode(&f) {
                Some(cmd) => self.apply(cmd),
                None => reply::ERR_OPCODE,
            });
        }
        replies
    }

    pub fn apply(&mut self, cmd: RigCommand) -> u8 {
        match cmd {
            RigCommand::SetOffset(_) | RigCommand::SetLength(_) if self.state == RigState::Armed => reply::ERR_ARMED,
            RigCommand::SetOffset(t) => {
                if t > self.config.max_offset_ticks {
                    return reply::ERR_BOUNDS;
                }
                self.offset_ticks = t;
                reply::ACK
            }
            RigCommand::SetLength(t) => {
                if t > self.config.max_length_ticks {
                    return reply::ERR_BOUNDS;
                }
                self.length_ticks = t;
                reply::ACK
            }
            RigCommand::Arm => {
                if self.length_ticks == 0 {
                    return reply::ERR_BOUNDS;
                }
                self.state = RigState::Armed;
                reply::ACK
            }
            RigCommand::ResetPulse(hold) => match self.reset_and_trigger(hold) {
                Ok(_) => reply::ACK,
                Err(_) => reply::ERR_NOT_ARMED,
            },
            RigCommand::Status => self.state as u8,
        }
    }

    /// Asserts reset for `hold_ticks` (at least one), releases it, latches the
    /// release edge as the trigger and fires the programmed pulse.
    pub fn reset_and_trigger(&mut self, hold_ticks: u32) -> Result<Fire, RigError> {
        if self.state != RigState::Armed {
            return Err(RigError::NotArmed);
        }
        let tick = self.config.tick_ns;
        self.clock_ns += u64::from(hold_ticks.max(1)) * tick;
        let jitter_ns = match self.config.jitter_max_ns {
            0 => 0,
            max => self.jitter_rng.gen_range(0..=max),
        };
        let fire = Fire {
            trigger_ns: self.clock_ns,
            pulse: GlitchPulse::new(u64::from(self.offset_ticks) * tick, u64::from(self.length_ticks) * tick),
            jitter_ns,
        };
        // The pulse has been delivered by the time the next command can run.
        self.clock_ns += fire.pulse.end_ns();
        self.last_fire = Some(fire);
        self.state = RigState::Fired;
        Ok(fire)
    }
}

/// Frame-level transport to a controller.
pub trait RigBackend {
    fn transact(&mut self, frame: [u8; FRAME_BYTES]) -> u8;
    /// The pulse the target saw on the last reset cycle, where the backend
    /// can know it. A physical controller cannot.
    fn fired(&self) -> Option<Fire> {
        None
    }
}

impl RigBackend for Rig {
    fn transact(&mut self, frame: [u8; FRAME_BYTES]) -> u8 {
        self.execute(&frame)[0]
    }

    fn fired(&self) -> Option<Fire> {
        self.last_fire
    }
}

impl<B: RigBackend + ?Sized> RigBackend for &mut B {
    fn transact(&mut self, frame: [u8; FRAME_BYTES]) -> u8 {
        (**self).transact(frame)
    }

    fn fired(&self) -> Option<Fire> {
        (**self).fired()
    }
}

/// Wraps a backend and keeps every frame it was sent.
#[derive(Clone, Debug)]
pub struct RecordingBackend<B> {
    pub inner: B,
    pub transcript: Vec<[u8; FRAME_BYTES]>,
}

impl<B: RigBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            transcript: Vec::new(),
        }
    }
}

impl<B: RigBackend> RigBackend for RecordingBackend<B> {
    fn transact(&mut self, frame: [u8; FRAME_BYTES]) -> u8 {
        self.transcript.push(frame);
        self.inner.transact(frame)
    }

    fn fired(&self) -> Option<Fire> {
        self.inner.fired()
    }
}

/// Reset hold used for every attempt.
pub const RESET_HOLD_TICKS: u32 = 50;

/// Host-side command sequence for one glitch attempt: program, arm, reset.
pub fn fire_pulse<B: RigBackend + ?Sized>(backend: &mut B, config: &RigConfig, pulse: &GlitchPulse) -> Result<Fire, RigError> {
    let (off, len) = config.ticks(pulse).map_err(|_| RigError::Rejected(reply::ERR_BOUNDS))?;
    for cmd in [
        RigCommand::SetOffset(off),
        RigCommand::SetLength(len),
        RigCommand::Arm,
        RigCommand::ResetPulse(RESET_HOLD_TICKS),
    ] {
        let r = backend.transact(cmd.encode());
        if r != reply::ACK {
            return Err(RigError::Rejected(r));
        }
    }
    backend.fired().ok_or(RigError::NoFire)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(cmd: RigCommand) -> Vec<u8> {
        cmd.encode().to_vec()
    }

    #[test]
    fn status_after_power_up_is_idle() {
        let mut rig = Rig::new(RigConfig::default());
        assert_eq!(rig.execute(&frame(RigCommand::Status)), vec![RigState::Idle as u8]);
    }

    #[test]
    fn tick_conversion() {
        let mut rig = Rig::new(RigConfig::default());
        rig.execute(&frame(RigCommand::SetOffset(131_690)));
        rig.execute(&frame(RigCommand::SetLength(566)));
        rig.execute(&frame(RigCommand::Arm));
        let fire = rig.reset_and_trigger(1).unwrap();
        assert_eq!(fire.pulse, GlitchPulse::new(2_633_800, 11_320));
        assert_eq!(fire.jitter_ns, 0);
    }

    #[test]
    fn set_while_armed_is_refused() {
        let mut rig = Rig::new(RigConfig::default());
        let mut bytes = frame(RigCommand::SetLength(10));
        bytes.extend(frame(RigCommand::Arm));
        bytes.extend(frame(RigCommand::SetOffset(5)));
        bytes.extend(frame(RigCommand::SetLength(5)));
        bytes.extend(frame(RigCommand::Status));
        assert_eq!(
            rig.execute(&bytes),
            vec![reply::ACK, reply::ACK, reply::ERR_ARMED, reply::ERR_ARMED, 1]
        );
    }

    #[test]
    fn unknown_opcode_and_partial_frames() {
        let mut rig = Rig::new(RigConfig::default());
        assert_eq!(rig.execute(&[0x42, 0, 0, 0, 0]), vec![reply::ERR_OPCODE]);
        let f = frame(RigCommand::Status);
        assert!(rig.execute(&f[..3]).is_empty());
        assert_eq!(rig.execute(&f[3..]), vec![0]);
    }

    #[test]
    fn reset_requires_arming() {
        let mut rig = Rig::new(RigConfig::default());
        assert_eq!(rig.reset_and_trigger(1), Err(RigError::NotArmed));
        assert_eq!(rig.execute(&frame(RigCommand::ResetPulse(1))), vec![reply::ERR_NOT_ARMED]);
    }
}
