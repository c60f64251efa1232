use crowbar_core::boot::{run_boot, run_mb2_payload, uart_download, BootOptions, BootResult};
use crowbar_core::device::{DeviceBundle, DeviceSpec};
use crowbar_core::machine::{map, Injector, Machine, MachineState, TrapKind};
use crowbar_core::oracle::{fault_path_oracle, BootScenario, FaultSpace, Scenario};
use crowbar_core::payload::{build_dump_payload, build_multi_dump_payload, checksum, decode, encode, PayloadError, UartHeader};
use crowbar_core::pipeline::FEK_DUMP_RANGES;
use crowbar_core::rail::RailConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::sync::OnceLock;

const DATA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data");

fn data(name: &str) -> Vec<u8> {
    std::fs::read(format!("{DATA}/{name}")).unwrap()
}

#[derive(Deserialize)]
struct Vector {
    entry: u32,
    ids: [u32; 4],
    code: String,
    wire: String,
    checksum: u32,
}

#[test]
fn matches_reference_packer() {
    let vectors: Vec<Vector> = serde_json::from_slice(&data("payload_vectors.json")).unwrap();
    assert!(vectors.len() >= 50);
    for v in vectors {
        let code = hex::decode(&v.code).unwrap();
        let header = UartHeader {
            entry_addr: v.entry,
            code_length: code.len() as u32,
            id: v.ids,
        };
        let wire = encode(&header, &code).unwrap();
        assert_eq!(hex::encode(&wire), v.wire);
        let p = decode(&wire).unwrap();
        assert_eq!((p.header, p.code, p.checksum), (header, code, v.checksum));
    }
}

#[test]
fn golden_payloads_are_stable() {
    let cases = [
        (
            "irom_dump.payload",
            build_dump_payload(map::IROM_BASE, map::IROM_SIZE, map::UART_TX),
        ),
        ("unprotected_dump.payload", build_dump_payload(map::IROM_BASE, 0x1200, map::UART_TX)),
        ("empty_dump.payload", build_dump_payload(map::IROM_BASE, 0, map::UART_TX)),
        ("fek_dump.payload", build_multi_dump_payload(&FEK_DUMP_RANGES, map::UART_TX)),
    ];
    for (name, built) in cases {
        assert_eq!(built.unwrap().to_bytes(), data(name), "{name}");
    }
}

fn bundle() -> &'static DeviceBundle {
    static B: OnceLock<DeviceBundle> = OnceLock::new();
    B.get_or_init(|| DeviceBundle::generate(&DeviceSpec::default()).unwrap())
}

fn booted() -> Machine {
    let b = bundle();
    let mut m = Machine::new(&b.device()).unwrap();
    let run = run_boot(&mut m, &b.image, None, &RailConfig::default(), 0, &BootOptions::default());
    assert_eq!(run.result, BootResult::NormalBoot);
    m
}

/// A machine sitting at the loader prompt, opened with a placed fault.
fn at_prompt() -> Machine {
    let b = bundle();
    let s = BootScenario {
        image: &b.image,
        personality: &b.personality,
    };
    let at = b.image.params.fuse_check_time_ns / 20;
    let hit = fault_path_oracle(
        &s,
        &FaultSpace {
            indices: at - 200..at + 200,
            include_corrupt: false,
        },
    )
    .hits[0]
        .clone();
    let mut m = s.fresh();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut inj = Injector::forced(hit.dyn_index, hit.effect);
    m.run(&mut inj, &mut rng, s.deadline_ns(), |_| false);
    assert_eq!(m.state, MachineState::Download);
    m
}

#[test]
fn unprotected_dump_after_boot() {
    let mut m = booted();
    let r = run_mb2_payload(&mut m, &data("unprotected_dump.payload")).unwrap();
    assert_eq!(r.state, MachineState::Halted);
    assert_eq!(r.uart, bundle().image.irom[..0x1200]);
}

#[test]
fn full_dump_after_boot_stops_at_protected_region() {
    let mut m = booted();
    let r = run_mb2_payload(&mut m, &data("irom_dump.payload")).unwrap();
    assert_eq!(r.uart, bundle().image.irom[..0x1200]);
    let trap = r.trap.expect("protected read traps");
    assert_eq!((trap.kind, trap.addr), (TrapKind::PiromViolation, 0x11200));
    assert_eq!(m.pc(), map::EXC_VECTOR);
}

#[test]
fn full_dump_from_loader() {
    let mut m = at_prompt();
    let r = uart_download(&mut m, &data("irom_dump.payload")).unwrap();
    assert_eq!(r.rejected, None);
    assert_eq!(r.state, MachineState::Halted);
    assert_eq!(r.uart, *bundle().image.irom);
}

#[test]
fn empty_dump_halts_immediately() {
    let mut m = at_prompt();
    let r = uart_download(&mut m, &data("empty_dump.payload")).unwrap();
    assert!(r.uart.is_empty());
    assert_eq!(r.state, MachineState::Halted);
    assert!(r.instructions < 8);
}

#[test]
fn loader_rejects_bad_checksum_and_reprompts() {
    let mut m = at_prompt();
    let mut bytes = data("unprotected_dump.payload");
    bytes[30] ^= 0x40;
    let r = uart_download(&mut m, &bytes).unwrap();
    assert!(matches!(r.rejected, Some(PayloadError::ChecksumMismatch { .. })));
    assert_eq!(r.uart, crowbar_core::boot::PROMPT);
    assert_eq!(m.state, MachineState::Download);
    let r = uart_download(&mut m, &data("unprotected_dump.payload")).unwrap();
    assert_eq!(r.uart.len(), 0x1200);
}

#[test]
fn empty_input_is_truncated() {
    assert!(matches!(decode(&[]), Err(PayloadError::Truncated { .. })));
}

fn payload() -> impl Strategy<Value = (UartHeader, Vec<u8>)> {
    (any::<u32>(), any::<[u32; 4]>(), proptest::collection::vec(any::<u8>(), 0..512)).prop_map(|(entry, id, code)| {
        (
            UartHeader {
                entry_addr: entry,
                code_length: code.len() as u32,
                id,
            },
            code,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn round_trip((h, code) in payload()) {
        let wire = encode(&h, &code).unwrap();
        let p = decode(&wire).unwrap();
        prop_assert_eq!(p.header, h);
        prop_assert_eq!(p.code, code);
    }

    #[test]
    fn single_byte_corruption_detected((h, code) in payload(), pos in any::<prop::sample::Index>(), delta in 1u8..=255) {
        let mut wire = encode(&h, &code).unwrap();
        let i = pos.index(wire.len());
        wire[i] = wire[i].wrapping_add(delta);
        let is_checksum_mismatch = matches!(decode(&wire), Err(PayloadError::ChecksumMismatch { .. }));
        prop_assert!(is_checksum_mismatch);
    }

    #[test]
    fn trailer_is_complement_of_sum((h, code) in payload()) {
        let wire = encode(&h, &code).unwrap();
        let (body, tail) = wire.split_at(wire.len() - 4);
        let sum = body.iter().fold(0u32, |a, &b| a.wrapping_add(b as u32));
        prop_assert_eq!(u32::from_le_bytes(tail.try_into().unwrap()), !sum);
        prop_assert_eq!(checksum(body), !sum);
    }
}
