//! Boot-processor micro-ISA.
//!
//! Every instruction is eight bytes: `[opcode, a, b, c, imm32 LE]`. Branch
//! targets are absolute addresses in `imm`.

use std::fmt;

pub const INSTR_BYTES: u32 = 8;

pub const SP: u8 = 13;
pub const LR: u8 = 14;
pub const PC: u8 = 15;
pub const FP: u8 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    Imm(u32),
    Reg(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Width {
    Word,
    Byte,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Instr {
    Nop,
    Mov { rd: u8, src: Operand },
    Add { rd: u8, rn: u8, src: Operand },
    Cmp { rn: u8, src: Operand },
    Ldr { rd: u8, rn: u8, offset: i32, width: Width },
    Str { rs: u8, rn: u8, offset: i32, width: Width },
    B { target: u32 },
    Bl { target: u32 },
    Cbz { rn: u8, target: u32 },
    Cbnz { rn: u8, target: u32 },
    Beq { target: u32 },
    Bne { target: u32 },
    Push { regs: u16 },
    Pop { regs: u16 },
    OutUart { rn: u8 },
    OutGpio { rn: u8 },
    Halt,
}

/// How a fault manifests on an instruction, by instruction class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InstrClass {
    /// Conditional branch: faults invert the branch decision.
    CondBranch,
    /// Data-producing ALU op: faults flip a bit of the result.
    Alu,
    /// Everything else: faults skip the instruction.
    Other,
}

mod op {
    pub const NOP: u8 = 0x00;
    pub const MOV: u8 = 0x10;
    pub const ADD: u8 = 0x11;
    pub const CMP: u8 = 0x12;
    pub const LDR: u8 = 0x20;
    pub const STR: u8 = 0x21;
    pub const B: u8 = 0x30;
    pub const BL: u8 = 0x31;
    pub const CBZ: u8 = 0x32;
    pub const CBNZ: u8 = 0x33;
    pub const BEQ: u8 = 0x34;
    pub const BNE: u8 = 0x35;
    pub const PUSH: u8 = 0x40;
    pub const POP: u8 = 0x41;
    pub const OUT_UART: u8 = 0x50;
    pub const OUT_GPIO: u8 = 0x51;
    pub const HALT: u8 = 0xFF;
}

impl Instr {
    pub fn class(&self) -> InstrClass {
        match self {
            Instr::Cbz { .. } | Instr::Cbnz { .. } | Instr::Beq { .. } | Instr::Bne { .. } => InstrClass::CondBranch,
            // A register move into pc is a return, not a data result.
            Instr::Mov { rd, .. } | Instr::Add { rd, .. } if *rd != PC => InstrClass::Alu,
            _ => InstrClass::Other,
        }
    }

    pub fn encode(&self) -> [u8; 8] {
        let (opc, a, b, c, imm) = match *self {
            Instr::Nop => (op::NOP, 0, 0, 0, 0),
            Instr::Mov { rd, src } => {
                let (c, imm) = operand_bits(src);
                (op::MOV, rd, 0, c, imm)
            }
            Instr::Add { rd, rn, src } => {
                let (c, imm) = operand_bits(src);
                (op::ADD, rd, rn, c, imm)
            }
            Instr::Cmp { rn, src } => {
                let (c, imm) = operand_bits(src);
                (op::CMP, rn, 0, c, imm)
            }
            Instr::Ldr { rd, rn, offset, width } => (op::LDR, rd, rn, width_bit(width), offset as u32),
            Instr::Str { rs, rn, offset, width } => (op::STR, rs, rn, width_bit(width), offset as u32),
            Instr::B { target } => (op::B, 0, 0, 0, target),
            Instr::Bl { target } => (op::BL, 0, 0, 0, target),
            Instr::Cbz { rn, target } => (op::CBZ, rn, 0, 0, target),
            Instr::Cbnz { rn, target } => (op::CBNZ, rn, 0, 0, target),
            Instr::Beq { target } => (op::BEQ, 0, 0, 0, target),
            Instr::Bne { target } => (op::BNE, 0, 0, 0, target),
            Instr::Push { regs } => (op::PUSH, 0, 0, 0, regs as u32),
            Instr::Pop { regs } => (op::POP, 0, 0, 0, regs as u32),
            Instr::OutUart { rn } => (op::OUT_UART, rn, 0, 0, 0),
            Instr::OutGpio { rn } => (op::OUT_GPIO, rn, 0, 0, 0),
            Instr::Halt => (op::HALT, 0, 0, 0, 0),
        };
        let i = imm.to_le_bytes();
        [opc, a, b, c, i[0], i[1], i[2], i[3]]
    }

    /// Decodes one instruction; `None` for an undefined encoding.
    pub fn decode(bytes: [u8; 8]) -> Option<Instr> {
        let [opc, a, b, c, ..] = bytes;
        let imm = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        let reg = |r: u8| (r < 16).then_some(r);
        let operand = || match c {
            0 => Some(Operand::Imm(imm)),
            1 if imm < 16 => Some(Operand::Reg(imm as u8)),
            _ => None,
        };
        let width = || match c {
            0 => Some(Width::Word),
            1 => Some(Width::Byte),
            _ => None,
        };
        Some(match opc {
            op::NOP => Instr::Nop,
            op::MOV => Instr::Mov {
                rd: reg(a)?,
                src: operand()?,
            },
            op::ADD => Instr::Add {
                rd: reg(a)?,
                rn: reg(b)?,
                src: operand()?,
            },
            op::CMP => Instr::Cmp {
                rn: reg(a)?,
                src: operand()?,
            },
            op::LDR => Instr::Ldr {
                rd: reg(a)?,
                rn: reg(b)?,
                offset: imm as i32,
                width: width()?,
            },
            op::STR => Instr::Str {
                rs: reg(a)?,
                rn: reg(b)?,
                offset: imm as i32,
                width: width()?,
            },
            op::B => Instr::B { target: imm },
            op::BL => Instr::Bl { target: imm },
            op::CBZ => Instr::Cbz { rn: reg(a)?, target: imm },
            op::CBNZ => Instr::Cbnz { rn: reg(a)?, target: imm },
            op::BEQ => Instr::Beq { target: imm },
            op::BNE => Instr::Bne { target: imm },
            op::PUSH if imm <= 0xFFFF => Instr::Push { regs: imm as u16 },
            op::POP if imm <= 0xFFFF => Instr::Pop { regs: imm as u16 },
            op::OUT_UART => Instr::OutUart { rn: reg(a)? },
            op::OUT_GPIO => Instr::OutGpio { rn: reg(a)? },
            op::HALT => Instr::Halt,
            _ => return None,
        })
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instr::Nop => "nop",
            Instr::Mov { .. } => "mov",
            Instr::Add { .. } => "add",
            Instr::Cmp { .. } => "cmp",
            Instr::Ldr { width: Width::Word, .. } => "ldr",
            Instr::Ldr { width: Width::Byte, .. } => "ldrb",
            Instr::Str { width: Width::Word, .. } => "str",
            Instr::Str { width: Width::Byte, .. } => "strb",
            Instr::B { .. } => "b",
            Instr::Bl { .. } => "bl",
            Instr::Cbz { .. } => "cbz",
            Instr::Cbnz { .. } => "cbnz",
            Instr::Beq { .. } => "beq",
            Instr::Bne { .. } => "bne",
            Instr::Push { .. } => "push",
            Instr::Pop { .. } => "pop",
            Instr::OutUart { .. } => "out_uart",
            Instr::OutGpio { .. } => "out_gpio",
            Instr::Halt => "halt",
        }
    }
}

fn operand_bits(src: Operand) -> (u8, u32) {
    match src {
        Operand::Imm(v) => (0, v),
        Operand::Reg(r) => (1, r as u32),
    }
}

fn width_bit(w: Width) -> u8 {
    match w {
        Width::Word => 0,
        Width::Byte => 1,
    }
}

pub fn reg_name(r: u8) -> String {
    match r {
        SP => "sp".into(),
        LR => "lr".into(),
        PC => "pc".into(),
        FP => "fp".into(),
        _ => format!("r{r}"),
    }
}

fn fmt_operand(src: &Operand) -> String {
    match src {
        Operand::Imm(v) => format!("#{v:#x}"),
        Operand::Reg(r) => reg_name(*r),
    }
}

fn fmt_reglist(regs: u16) -> String {
    let names: Vec<String> = (0..16u8).filter(|r| regs & (1 << r) != 0).map(reg_name).collect();
    format!("{{{}}}", names.join(", "))
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic();
        match self {
            Instr::Nop | Instr::Halt => write!(f, "{m}"),
            Instr::Mov { rd, src } => write!(f, "{m} {}, {}", reg_name(*rd), fmt_operand(src)),
            Instr::Add { rd, rn, src } => write!(f, "{m} {}, {}, {}", reg_name(*rd), reg_name(*rn), fmt_operand(src)),
            Instr::Cmp { rn, src } => write!(f, "{m} {}, {}", reg_name(*rn), fmt_operand(src)),
            Instr::Ldr { rd, rn, offset, .. } => {
                write!(f, "{m} {}, [{}, #{offset}]", reg_name(*rd), reg_name(*rn))
            }
            Instr::Str { rs, rn, offset, .. } => {
                write!(f, "{m} {}, [{}, #{offset}]", reg_name(*rs), reg_name(*rn))
            }
            Instr::B { target } | Instr::Bl { target } | Instr::Beq { target } | Instr::Bne { target } => write!(f, "{m} {target:#x}"),
            Instr::Cbz { rn, target } | Instr::Cbnz { rn, target } => {
                write!(f, "{m} {}, {target:#x}", reg_name(*rn))
            }
            Instr::Push { regs } | Instr::Pop { regs } => write!(f, "{m} {}", fmt_reglist(*regs)),
            Instr::OutUart { rn } | Instr::OutGpio { rn } => write!(f, "{m} {}", reg_name(*rn)),
        }
    }
}
