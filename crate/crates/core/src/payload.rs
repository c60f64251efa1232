//! Wire format of the UART bootloader payload, plus builders for the
//! dump payloads used after the bootloader has been reached.
//!
//! ```text
//! entry_addr u32 | code_length u32 | id[4] u32 | code ... | checksum u32
//! ```
//! All integers are little-endian. The checksum is the one's complement of
//! the 32-bit wrapping sum of every preceding byte.

use crate::asm::{assemble, AsmError};
use crate::machine::map;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

pub const HEADER_BYTES: usize = 24;
pub const CHECKSUM_BYTES: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UartHeader {
    pub entry_addr: u32,
    pub code_length: u32,
    /// Carried on the wire but never interpreted.
    pub id: [u32; 4],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UartPayload {
    pub header: UartHeader,
    pub code: Vec<u8>,
    pub checksum: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PayloadError {
    #[error("truncated payload: need {need} bytes, got {got}")]
    Truncated { need: usize, got: usize },
    #[error("checksum mismatch: computed {computed:#010x}, received {received:#010x}")]
    ChecksumMismatch { computed: u32, received: u32 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("code_length {header} does not match code of {actual} bytes")]
    LengthMismatch { header: u32, actual: usize },
    #[error("dump range {start:#x}+{count:#x} is outside the memory map")]
    RangeOutsideMap { start: u32, count: u32 },
    #[error("payload assembly failed: {0}")]
    Assembly(#[from] AsmError),
}

/// One's complement of the wrapping byte sum.
pub fn checksum(bytes: &[u8]) -> u32 {
    !bytes.iter().fold(0u32, |acc, &b| acc.wrapping_add(b as u32))
}

impl UartHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut out = [0u8; HEADER_BYTES];
        let words = [self.entry_addr, self.code_length, self.id[0], self.id[1], self.id[2], self.id[3]];
        for (chunk, w) in out.chunks_exact_mut(4).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; HEADER_BYTES]) -> Self {
        let w = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        UartHeader {
            entry_addr: w(0),
            code_length: w(1),
            id: [w(2), w(3), w(4), w(5)],
        }
    }
}

pub fn encode(header: &UartHeader, code: &[u8]) -> Result<Vec<u8>, PayloadError> {
    if header.code_length as usize != code.len() {
        return Err(PayloadError::LengthMismatch {
            header: header.code_length,
            actual: code.len(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + code.len() + CHECKSUM_BYTES);
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(code);
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Parses a complete received frame. The checksum is checked over the
/// frame as received before the length field is trusted, so a corrupted
/// length is reported as a checksum failure rather than a framing error.
pub fn decode(bytes: &[u8]) -> Result<UartPayload, PayloadError> {
    let min = HEADER_BYTES + CHECKSUM_BYTES;
    if bytes.len() < min {
        return Err(PayloadError::Truncated {
            need: min,
            got: bytes.len(),
        });
    }
    let body_end = bytes.len() - CHECKSUM_BYTES;
    let received = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = checksum(&bytes[..body_end]);
    if computed != received {
        return Err(PayloadError::ChecksumMismatch { computed, received });
    }
    let header = UartHeader::from_bytes(bytes[..HEADER_BYTES].try_into().unwrap());
    let actual = body_end - HEADER_BYTES;
    if header.code_length as usize != actual {
        return Err(PayloadError::LengthMismatch {
            header: header.code_length,
            actual,
        });
    }
    Ok(UartPayload {
        header,
        code: bytes[HEADER_BYTES..body_end].to_vec(),
        checksum: received,
    })
}

impl UartPayload {
    pub fn new(entry_addr: u32, code: Vec<u8>) -> Self {
        let header = UartHeader {
            entry_addr,
            code_length: code.len() as u32,
            id: [0; 4],
        };
        let mut body = header.to_bytes().to_vec();
        body.extend_from_slice(&code);
        UartPayload {
            header,
            checksum: checksum(&body),
            code,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.header, &self.code).expect("code_length kept in sync by construction")
    }
}

/// Load address for uploaded code; the start of on-chip RAM.
pub const PAYLOAD_BASE: u32 = map::RAM_BASE;

fn readable(start: u32, count: u32) -> bool {
    let end = start as u64 + count as u64;
    let regions = [
        (map::IROM_BASE, map::IROM_END),
        (map::RAM_BASE, map::RAM_END),
        (map::MISC_BASE, map::MISC_BASE + map::MISC_SIZE),
        (map::FUSE_BASE, map::FUSE_BASE + map::FUSE_SIZE),
    ];
    count == 0 || regions.iter().any(|&(lo, hi)| start >= lo && end <= hi as u64)
}

/// Payload that streams `[start, start + count)` to `uart_mmio_addr`, one
/// byte per store, then halts.
pub fn build_dump_payload(start: u32, count: u32, uart_mmio_addr: u32) -> Result<UartPayload, PayloadError> {
    build_multi_dump_payload(&[(start, count)], uart_mmio_addr)
}

/// Same as [`build_dump_payload`] for several ranges emitted back to back.
pub fn build_multi_dump_payload(ranges: &[(u32, u32)], uart_mmio_addr: u32) -> Result<UartPayload, PayloadError> {
    for &(start, count) in ranges {
        if !readable(start, count) {
            return Err(PayloadError::RangeOutsideMap { start, count });
        }
    }
    let mut src = format!(".org {PAYLOAD_BASE:#x}\n    mov r2, #{uart_mmio_addr:#x}\n");
    for (i, &(start, count)) in ranges.iter().enumerate() {
        let _ = write!(
            src,
            "    mov r0, #{start:#x}\n    mov r1, #{count:#x}\nloop{i}:\n    cbz r1, done{i}\n    ldrb r3, [r0]\n    strb r3, [r2]\n    add r0, r0, #1\n    sub r1, r1, #1\n    b loop{i}\ndone{i}:\n"
        );
    }
    src.push_str("    halt\n");
    let program = assemble(&src)?;
    Ok(UartPayload::new(PAYLOAD_BASE, program.bytes))
}
