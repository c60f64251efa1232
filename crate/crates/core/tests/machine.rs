use crowbar_core::asm::assemble;
use crowbar_core::fixtures::{Fixture, FixtureName};
use crowbar_core::machine::{map, Injector, Machine, MachineState, Mode, TrapKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PIROM_START: u32 = 0x1200;

fn machine() -> Machine {
    Fixture::load(FixtureName::AddLoop).fresh_machine()
}

fn run_snippet(m: &mut Machine, body: &str, mode: Mode) {
    let p = assemble(&format!(".org {:#x}\n{body}\n    halt\n", map::RAM_BASE)).unwrap();
    m.write_ram(p.base, &p.bytes).unwrap();
    m.jump_to(p.base, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let deadline = m.clock_ns + 100_000;
    m.run(&mut Injector::None, &mut rng, deadline, |_| false);
}

fn load_traps(offset: u32, mode: Mode, access: bool) -> bool {
    let mut m = machine();
    m.prot.pirom_start = PIROM_START;
    m.prot.access_pirom = access;
    run_snippet(
        &mut m,
        &format!("    mov r1, #{:#x}\n    ldr r0, [r1]", map::IROM_BASE + offset),
        mode,
    );
    match m.trap {
        Some(t) => {
            assert_eq!(t.kind, TrapKind::PiromViolation);
            assert_eq!(m.pc(), map::EXC_VECTOR);
            true
        }
        None => {
            assert_eq!(m.state, MachineState::Halted);
            false
        }
    }
}

#[test]
fn protected_region_boundaries() {
    for offset in [PIROM_START - 4, PIROM_START, map::IROM_SIZE - 4] {
        for mode in [Mode::NonSecure, Mode::SecureTz] {
            for access in [false, true] {
                let expect = offset >= PIROM_START && mode == Mode::NonSecure && !access;
                assert_eq!(
                    load_traps(offset, mode, access),
                    expect,
                    "offset {offset:#x} {mode:?} access={access}"
                );
            }
        }
    }
}

#[test]
fn protection_registers_lock_when_secure_boot_clears() {
    let mut m = machine();
    let before = m.prot;
    run_snippet(
        &mut m,
        &format!(
            "    mov r1, #{sb:#x}\n    mov r0, #0\n    str r0, [r1]\n    mov r1, #{ps:#x}\n    mov r0, #0x40\n    str r0, [r1]\n    mov r1, #{ap:#x}\n    mov r0, #1\n    str r0, [r1]\n    mov r1, #{sb:#x}\n    str r0, [r1]",
            sb = map::PROT_SECURE_BOOT,
            ps = map::PROT_PIROM_START,
            ap = map::PROT_ACCESS_PIROM
        ),
        Mode::SecureTz,
    );
    assert_eq!(m.state, MachineState::Halted);
    assert!(!m.prot.secure_boot);
    assert_eq!(m.prot.pirom_start, before.pirom_start);
    assert_eq!(m.prot.access_pirom, before.access_pirom);
    assert_eq!(m.prot_log.len(), 3);
}

#[test]
fn protection_registers_writable_while_secure_boot_set() {
    let mut m = machine();
    run_snippet(
        &mut m,
        &format!("    mov r1, #{:#x}\n    mov r0, #0x2000\n    str r0, [r1]", map::PROT_PIROM_START),
        Mode::SecureTz,
    );
    assert_eq!(m.prot.pirom_start, 0x2000);
}

#[test]
fn word_registers_read_bytewise() {
    let mut m = machine();
    m.fuses.odm_secure_boot = true;
    run_snippet(
        &mut m,
        &format!(
            "    mov r1, #{:#x}\n    ldrb r2, [r1]\n    ldrb r3, [r1, #1]\n    ldr r4, [r1]",
            map::FUSE_ODM_ENABLE
        ),
        Mode::SecureTz,
    );
    assert_eq!((m.regs[2], m.regs[3], m.regs[4]), (1, 0, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fast_forward_is_invisible(count in 0u32..5_000, horizon in 0u64..200_000, limit in 0u64..20_000) {
        let mut a = machine();
        let src = format!("    mov r7, #{count}\nl:\n    sub r7, r7, #1\n    cbnz r7, l\n    mov r8, #9");
        let p = assemble(&format!(".org {:#x}\n{src}\n    halt\n", map::RAM_BASE)).unwrap();
        a.write_ram(p.base, &p.bytes).unwrap();
        a.jump_to(p.base, Mode::SecureTz);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        a.step(&mut Injector::None, &mut rng).unwrap();
        let mut b = a.clone();
        let start = a.retired;
        a.fast_forward(horizon, start + limit);
        prop_assert!(a.retired <= start + limit);
        while b.retired < a.retired {
            b.step(&mut Injector::None, &mut rng).unwrap();
        }
        prop_assert_eq!(a.regs, b.regs);
        prop_assert_eq!((a.clock_ns, a.pc()), (b.clock_ns, b.pc()));
    }
}
