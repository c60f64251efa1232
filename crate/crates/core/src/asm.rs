//! Two-pass text assembler for the micro-ISA.
//!
//! Syntax is ARM-flavoured:
//!
//! ```text
//! ; comment           (also `@` and `//`)
//! .org 0x10000        set the location counter
//! .equ NAME, expr     define a constant
//! label:
//!     push {fp, lr}
//!     mov  r1, #FUSE_FAM      ; `#` is optional
//!     ldr  r0, [r1]           ; ldrb / str / strb, optional `, #off`
//!     add  r7, r7, #-1
//!     cmp  r0, 0
//!     cbz  r0, somewhere
//!     mov  pc, lr
//! .word expr / .byte expr / .ascii "s" / .asciz "s" / .space n [, fill] / .align n
//! ```
//!
//! Every emitted instruction remembers the 1-based source line it came from,
//! so fault reports can name lines of the original listing.

use crate::isa::{Instr, Operand, Width, FP, INSTR_BYTES, LR, PC, SP};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct AsmError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceInstr {
    pub addr: u32,
    pub line: usize,
    pub instr: Instr,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Program {
    /// Lowest address written.
    pub base: u32,
    /// Image bytes starting at `base`; gaps are zero-filled.
    pub bytes: Vec<u8>,
    pub symbols: BTreeMap<String, u32>,
    pub instrs: Vec<SourceInstr>,
}

impl Program {
    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    pub fn instr_at(&self, addr: u32) -> Option<&SourceInstr> {
        self.instrs.binary_search_by_key(&addr, |s| s.addr).ok().map(|i| &self.instrs[i])
    }

    /// Source line of the instruction at `addr`, if it was assembled from text.
    pub fn line_of(&self, addr: u32) -> Option<usize> {
        self.instr_at(addr).map(|s| s.line)
    }

    pub fn end(&self) -> u32 {
        self.base + self.bytes.len() as u32
    }
}

enum Item {
    Instr(Vec<String>, String),
    Data(Vec<u8>),
    Word(String),
    Byte(String),
}

struct Stmt {
    line: usize,
    addr: u32,
    item: Item,
}

pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut symbols: BTreeMap<String, u32> = BTreeMap::new();
    let mut equs: Vec<(usize, String, String)> = Vec::new();
    let mut stmts = Vec::new();
    let mut pc: u32 = 0;

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let err = |msg: String| AsmError { line, msg };
        let mut text = strip_comment(raw).trim();
        // Labels, possibly several, possibly followed by an instruction.
        while let Some(pos) = label_end(text) {
            let name = text[..pos].trim();
            if !is_ident(name) {
                return Err(err(format!("bad label `{name}`")));
            }
            if symbols.insert(name.to_string(), pc).is_some() {
                return Err(err(format!("duplicate symbol `{name}`")));
            }
            text = text[pos + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (head, rest) = split_head(text);
        let head = head.to_ascii_lowercase();
        match head.as_str() {
            ".org" => {
                // .org only accepts literal numbers so pass one stays simple.
                pc = parse_number(rest).ok_or_else(|| err(format!("bad .org `{rest}`")))? as u32;
            }
            ".equ" | ".set" => {
                let (name, expr) = rest.split_once(',').ok_or_else(|| err(".equ needs NAME, value".into()))?;
                let name = name.trim();
                if !is_ident(name) {
                    return Err(err(format!("bad constant name `{name}`")));
                }
                equs.push((line, name.to_string(), expr.trim().to_string()));
            }
            ".align" => {
                let n = parse_number(rest).ok_or_else(|| err("bad .align".into()))? as u32;
                if n == 0 {
                    return Err(err(".align 0".into()));
                }
                let pad = (n - pc % n) % n;
                if pad > 0 {
                    stmts.push(Stmt {
                        line,
                        addr: pc,
                        item: Item::Data(vec![0; pad as usize]),
                    });
                    pc += pad;
                }
            }
            ".space" => {
                let mut parts = rest.split(',');
                let n = parts
                    .next()
                    .and_then(|s| parse_number(s.trim()))
                    .ok_or_else(|| err("bad .space".into()))? as usize;
                let fill = match parts.next() {
                    Some(s) => parse_number(s.trim()).ok_or_else(|| err("bad .space fill".into()))? as u8,
                    None => 0,
                };
                stmts.push(Stmt {
                    line,
                    addr: pc,
                    item: Item::Data(vec![fill; n]),
                });
                pc += n as u32;
            }
            ".ascii" | ".asciz" => {
                let mut bytes = parse_string(rest).ok_or_else(|| err(format!("bad string {rest}")))?;
                if head == ".asciz" {
                    bytes.push(0);
                }
                let n = bytes.len() as u32;
                stmts.push(Stmt {
                    line,
                    addr: pc,
                    item: Item::Data(bytes),
                });
                pc += n;
            }
            ".word" => {
                for w in split_operands(rest) {
                    stmts.push(Stmt {
                        line,
                        addr: pc,
                        item: Item::Word(w),
                    });
                    pc += 4;
                }
            }
            ".byte" => {
                for b in split_operands(rest) {
                    stmts.push(Stmt {
                        line,
                        addr: pc,
                        item: Item::Byte(b),
                    });
                    pc += 1;
                }
            }
            h if h.starts_with('.') => return Err(err(format!("unknown directive `{h}`"))),
            _ => {
                stmts.push(Stmt {
                    line,
                    addr: pc,
                    item: Item::Instr(split_operands(rest), head.clone()),
                });
                pc = pc.checked_add(INSTR_BYTES).ok_or_else(|| err("address overflow".into()))?;
            }
        }
    }

    // Constants may refer to labels and to earlier constants.
    for (line, name, expr) in &equs {
        let v = eval(expr, &symbols).map_err(|msg| AsmError { line: *line, msg })?;
        if symbols.insert(name.clone(), v).is_some() {
            return Err(AsmError {
                line: *line,
                msg: format!("duplicate symbol `{name}`"),
            });
        }
    }

    let base = stmts.iter().map(|s| s.addr).min().unwrap_or(0);
    let mut bytes: Vec<u8> = Vec::new();
    let mut instrs = Vec::new();
    let put = |addr: u32, data: &[u8], bytes: &mut Vec<u8>| {
        let at = (addr - base) as usize;
        if bytes.len() < at + data.len() {
            bytes.resize(at + data.len(), 0);
        }
        bytes[at..at + data.len()].copy_from_slice(data);
    };
    for s in &stmts {
        let err = |msg: String| AsmError { line: s.line, msg };
        match &s.item {
            Item::Data(d) => put(s.addr, d, &mut bytes),
            Item::Word(e) => {
                let v = eval(e, &symbols).map_err(err)?;
                put(s.addr, &v.to_le_bytes(), &mut bytes);
            }
            Item::Byte(e) => {
                let v = eval(e, &symbols).map_err(err)?;
                put(s.addr, &[v as u8], &mut bytes);
            }
            Item::Instr(ops, mnemonic) => {
                let instr = parse_instr(mnemonic, ops, &symbols).map_err(err)?;
                put(s.addr, &instr.encode(), &mut bytes);
                instrs.push(SourceInstr {
                    addr: s.addr,
                    line: s.line,
                    instr,
                });
            }
        }
    }
    instrs.sort_by_key(|s| s.addr);
    Ok(Program {
        base,
        bytes,
        symbols,
        instrs,
    })
}

fn strip_comment(s: &str) -> &str {
    let mut in_str = false;
    let b = s.as_bytes();
    for i in 0..b.len() {
        match b[i] {
            b'"' => in_str = !in_str,
            b';' | b'@' if !in_str => return &s[..i],
            b'/' if !in_str && b.get(i + 1) == Some(&b'/') => return &s[..i],
            _ => {}
        }
    }
    s
}

fn label_end(s: &str) -> Option<usize> {
    let pos = s.find(':')?;
    // Only a leading identifier followed by ':' is a label.
    is_ident(s[..pos].trim()).then_some(pos)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn split_head(s: &str) -> (&str, &str) {
    match s.find(char::is_whitespace) {
        Some(i) => (&s[..i], s[i..].trim()),
        None => (s, ""),
    }
}

/// Splits on commas that are not inside `[...]` or `{...}`.
fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' | '{' => {
                depth += 1;
                cur.push(c);
            }
            ']' | '}' => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b.trim()),
        None => (false, s),
    };
    let v = if let Some(h) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(&h.replace('_', ""), 16).ok()?
    } else if let Some(b) = body.strip_prefix("0b") {
        i64::from_str_radix(&b.replace('_', ""), 2).ok()?
    } else if body.starts_with(|c: char| c.is_ascii_digit()) {
        body.replace('_', "").parse::<i64>().ok()?
    } else {
        return None;
    };
    Some(if neg { -v } else { v })
}

fn parse_string(s: &str) -> Option<Vec<u8>> {
    let inner = s.trim().strip_prefix('"')?.strip_suffix('"')?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next()? {
                'n' => out.push(b'\n'),
                'r' => out.push(b'\r'),
                't' => out.push(b'\t'),
                '0' => out.push(0),
                '\\' => out.push(b'\\'),
                '"' => out.push(b'"'),
                _ => return None,
            }
        } else {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
        }
    }
    Some(out)
}

/// Evaluates `term (('+'|'-') term)*` where a term is a number or symbol.
fn eval(expr: &str, symbols: &BTreeMap<String, u32>) -> Result<u32, String> {
    let expr = expr.trim().trim_start_matches('#').trim();
    if expr.is_empty() {
        return Err("empty expression".into());
    }
    let mut total: i64 = 0;
    let mut sign = 1i64;
    let mut term = String::new();
    let flush = |term: &mut String, sign: i64, total: &mut i64| -> Result<(), String> {
        let t = term.trim();
        if t.is_empty() {
            return Err(format!("malformed expression `{expr}`"));
        }
        let v = match parse_number(t) {
            Some(v) => v,
            None => *symbols.get(t).ok_or_else(|| format!("undefined symbol `{t}`"))? as i64,
        };
        *total += sign * v;
        term.clear();
        Ok(())
    };
    for (i, c) in expr.char_indices() {
        if (c == '+' || c == '-') && i > 0 && !term.trim().is_empty() {
            flush(&mut term, sign, &mut total)?;
            sign = if c == '+' { 1 } else { -1 };
        } else {
            term.push(c);
        }
    }
    flush(&mut term, sign, &mut total)?;
    if total < i32::MIN as i64 || total > u32::MAX as i64 {
        return Err(format!("value out of range in `{expr}`"));
    }
    Ok(total as u32)
}

fn parse_reg(s: &str) -> Result<u8, String> {
    let s = s.trim().to_ascii_lowercase();
    match s.as_str() {
        "sp" => Ok(SP),
        "lr" => Ok(LR),
        "pc" => Ok(PC),
        "fp" => Ok(FP),
        _ => s
            .strip_prefix('r')
            .and_then(|n| n.parse::<u8>().ok())
            .filter(|&n| n < 16)
            .ok_or_else(|| format!("bad register `{s}`")),
    }
}

fn parse_operand(s: &str, symbols: &BTreeMap<String, u32>) -> Result<Operand, String> {
    match parse_reg(s) {
        Ok(r) => Ok(Operand::Reg(r)),
        Err(_) => eval(s, symbols).map(Operand::Imm),
    }
}

fn parse_mem(s: &str, symbols: &BTreeMap<String, u32>) -> Result<(u8, i32), String> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| format!("expected memory operand, got `{s}`"))?;
    let parts: Vec<&str> = inner.splitn(2, ',').collect();
    let rn = parse_reg(parts[0])?;
    let off = match parts.get(1) {
        Some(e) => eval(e, symbols)? as i32,
        None => 0,
    };
    Ok((rn, off))
}

fn parse_reglist(s: &str) -> Result<u16, String> {
    let inner = s
        .trim()
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .ok_or_else(|| format!("expected register list, got `{s}`"))?;
    let mut mask = 0u16;
    for r in inner.split(',').filter(|r| !r.trim().is_empty()) {
        mask |= 1 << parse_reg(r)?;
    }
    Ok(mask)
}

fn parse_instr(m: &str, ops: &[String], symbols: &BTreeMap<String, u32>) -> Result<Instr, String> {
    let want = |n: usize| -> Result<(), String> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(format!("`{m}` takes {n} operand(s), got {}", ops.len()))
        }
    };
    let target = |s: &str| eval(s, symbols);
    Ok(match m {
        "nop" => {
            want(0)?;
            Instr::Nop
        }
        "halt" => {
            want(0)?;
            Instr::Halt
        }
        "mov" => {
            want(2)?;
            Instr::Mov {
                rd: parse_reg(&ops[0])?,
                src: parse_operand(&ops[1], symbols)?,
            }
        }
        "add" | "sub" => {
            want(3)?;
            let mut src = parse_operand(&ops[2], symbols)?;
            if m == "sub" {
                match src {
                    Operand::Imm(v) => src = Operand::Imm(v.wrapping_neg()),
                    Operand::Reg(_) => return Err("sub only takes an immediate".into()),
                }
            }
            Instr::Add {
                rd: parse_reg(&ops[0])?,
                rn: parse_reg(&ops[1])?,
                src,
            }
        }
        "cmp" => {
            want(2)?;
            Instr::Cmp {
                rn: parse_reg(&ops[0])?,
                src: parse_operand(&ops[1], symbols)?,
            }
        }
        "ldr" | "ldrb" | "str" | "strb" => {
            want(2)?;
            let r = parse_reg(&ops[0])?;
            let (rn, offset) = parse_mem(&ops[1], symbols)?;
            let width = if m.ends_with('b') { Width::Byte } else { Width::Word };
            if m.starts_with('l') {
                Instr::Ldr { rd: r, rn, offset, width }
            } else {
                Instr::Str { rs: r, rn, offset, width }
            }
        }
        "b" | "bl" | "beq" | "bne" => {
            want(1)?;
            let t = target(&ops[0])?;
            match m {
                "b" => Instr::B { target: t },
                "bl" => Instr::Bl { target: t },
                "beq" => Instr::Beq { target: t },
                _ => Instr::Bne { target: t },
            }
        }
        "cbz" | "cbnz" => {
            want(2)?;
            let rn = parse_reg(&ops[0])?;
            let t = target(&ops[1])?;
            if m == "cbz" {
                Instr::Cbz { rn, target: t }
            } else {
                Instr::Cbnz { rn, target: t }
            }
        }
        "push" | "pop" => {
            let list = parse_reglist(&ops.join(","))?;
            if m == "push" {
                Instr::Push { regs: list }
            } else {
                Instr::Pop { regs: list }
            }
        }
        "out_uart" | "out_gpio" => {
            want(1)?;
            let rn = parse_reg(&ops[0])?;
            if m == "out_uart" {
                Instr::OutUart { rn }
            } else {
                Instr::OutGpio { rn }
            }
        }
        _ => return Err(format!("unknown mnemonic `{m}`")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_lines() {
        let src = "\
.org 0x100
start:  mov r0, #1      ; one
        cbz r0, done
        add r0, r0, #-1
done:   halt
";
        let p = assemble(src).unwrap();
        assert_eq!(p.base, 0x100);
        assert_eq!(p.symbol("done"), Some(0x118));
        assert_eq!(p.instrs.len(), 4);
        assert_eq!(p.line_of(0x108), Some(3));
        assert_eq!(p.instr_at(0x108).unwrap().instr, Instr::Cbz { rn: 0, target: 0x118 });
        assert_eq!(
            p.instr_at(0x110).unwrap().instr,
            Instr::Add {
                rd: 0,
                rn: 0,
                src: Operand::Imm(0xFFFF_FFFF)
            }
        );
    }

    #[test]
    fn memory_and_lists() {
        let src = "\
.equ BASE, 0x6000
.org 0
    push {fp, lr}
    ldrb r3, [r1, #BASE+4]
    str r2, [sp]
    pop {fp, pc}
    mov pc, lr
";
        let p = assemble(src).unwrap();
        let i: Vec<Instr> = p.instrs.iter().map(|s| s.instr).collect();
        assert_eq!(
            i[0],
            Instr::Push {
                regs: (1 << FP) | (1 << LR)
            }
        );
        assert_eq!(
            i[1],
            Instr::Ldr {
                rd: 3,
                rn: 1,
                offset: 0x6004,
                width: Width::Byte
            }
        );
        assert_eq!(
            i[2],
            Instr::Str {
                rs: 2,
                rn: SP,
                offset: 0,
                width: Width::Word
            }
        );
        assert_eq!(
            i[3],
            Instr::Pop {
                regs: (1 << FP) | (1 << PC)
            }
        );
        assert_eq!(
            i[4],
            Instr::Mov {
                rd: PC,
                src: Operand::Reg(LR)
            }
        );
    }

    #[test]
    fn data_directives() {
        let src = "\
.org 0x10
msg: .asciz \"hi; there\"
     .align 4
w:   .word msg, 0xdeadbeef
";
        let p = assemble(src).unwrap();
        assert_eq!(&p.bytes[..10], b"hi; there\0");
        assert_eq!(p.symbol("w"), Some(0x1C));
        assert_eq!(&p.bytes[0xC..0x10], &0x10u32.to_le_bytes());
        assert_eq!(&p.bytes[0x10..0x14], &0xdeadbeefu32.to_le_bytes());
    }

    #[test]
    fn errors_carry_line() {
        let e = assemble("nop\n  frob r1\n").unwrap_err();
        assert_eq!(e.line, 2);
        let e = assemble("b nowhere\n").unwrap_err();
        assert!(e.msg.contains("nowhere"));
        let e = assemble("x:\nx:\n").unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn disassembly_is_reassemblable() {
        let src = "\
.org 0
    mov r1, #0x10
    add r2, r1, r3
    cmp r2, #0
    bne 0
    ldr r0, [r1, #4]
    out_uart r0
    halt
";
        let p = assemble(src).unwrap();
        let text: String = std::iter::once(".org 0\n".to_string())
            .chain(p.instrs.iter().map(|s| format!("{}\n", s.instr)))
            .collect();
        let q = assemble(&text).unwrap();
        assert_eq!(p.bytes, q.bytes);
    }
}
