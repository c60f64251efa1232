use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crowbar_core::campaign::read_jsonl;
use crowbar_core::config::CampaignConfig;
use crowbar_core::device::DeviceBundle;
use crowbar_core::fixtures::{Fixture, FixtureName};
use crowbar_core::machine::map;
use crowbar_core::oracle::{fault_path_oracle, BootScenario, FaultSpace};
use crowbar_core::payload::{self, build_dump_payload, UartHeader};
use crowbar_core::pipeline::{self, render_oracle};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Exit status when a campaign used its whole budget without a success.
const EXIT_BUDGET_EXHAUSTED: u8 = 2;
const EXIT_ERROR: u8 = 1;

#[derive(Parser)]
#[command(name = "crowbar", version, about = "Simulated crowbar voltage-glitch campaigns against a boot ROM")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Campaign configuration (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured worker count.
    #[arg(long)]
    workers: Option<u32>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<CampaignConfig> {
        let mut cfg = match &self.config {
            Some(p) => CampaignConfig::load(p)?,
            None => CampaignConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Sweep pulse length against the add-loop fixture.
    Feasibility(Common),
    /// Search for the glitch, dump the ROM and keys, decrypt MB1.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Continue from the last checkpoint in this campaign log.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write a synthetic device bundle.
    Generate(Common),
    /// Summarise a campaign log.
    Report { log: PathBuf },
    #[command(subcommand)]
    Payload(PayloadCmd),
    /// Enumerate single faults that reach the download entry.
    Oracle {
        /// Fixture to analyse, or `BOOT` for the full boot ROM.
        #[arg(long, default_value = "FUSECHECK_POC")]
        target: String,
        /// Also try every single-bit corruption of ALU results.
        #[arg(long)]
        corrupt: bool,
        /// For `BOOT`: instructions to examine on each side of the fuse check.
        #[arg(long, default_value_t = 400)]
        around: u64,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum PayloadCmd {
    /// Wrap raw code in a loader header and checksum.
    Encode {
        #[arg(long, value_parser = parse_u32)]
        entry: u32,
        #[arg(long)]
        code: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Check and describe a payload file.
    Decode {
        file: PathBuf,
        /// Write the code section here.
        #[arg(long)]
        code_out: Option<PathBuf>,
    },
    /// Payload that streams a memory range to the UART.
    BuildDump {
        #[arg(long, value_parser = parse_u32, default_value = "0x10000")]
        start: u32,
        #[arg(long, value_parser = parse_u32, default_value = "0x20000")]
        count: u32,
        #[arg(long, value_parser = parse_u32, default_value_t = map::UART_TX)]
        uart: u32,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn parse_u32(s: &str) -> Result<u32, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|e| format!("`{s}`: {e}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_bundle(cfg: &CampaignConfig) -> Result<DeviceBundle> {
    Ok(match &cfg.image.path {
        Some(p) => DeviceBundle::load(p)?,
        None => DeviceBundle::generate(&cfg.device_spec())?,
    })
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Feasibility(c) => {
            let cfg = c.config()?;
            let r = pipeline::feasibility(&cfg.rail, &cfg.fault_model, &cfg.feasibility, cfg.seed);
            print!("{}", r.render());
            if let Some(dir) = &c.out_dir {
                write(&dir.join("feasibility.json"), &serde_json::to_vec_pretty(&r)?)?;
            }
        }
        Cmd::Attack { common, resume } => {
            let cfg = common.config()?;
            let bundle = load_bundle(&cfg)?;
            let prior = match &resume {
                Some(p) => {
                    let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
                    Some(read_jsonl(BufReader::new(f))?)
                }
                None => None,
            };
            let out = pipeline::attack(&cfg, &bundle, prior.as_deref())?;
            let dir = common.out_dir.clone().unwrap_or_else(|| PathBuf::from("crowbar-out"));
            out.write(&dir)?;
            print!("{}", out.render());
            eprintln!("artifacts written to {}", dir.display());
            if out.exploit.is_none() {
                return Ok(EXIT_BUDGET_EXHAUSTED);
            }
            if !out.succeeded() {
                bail!("captured data does not match the device");
            }
        }
        Cmd::Generate(c) => {
            let cfg = c.config()?;
            let mut spec = cfg.device_spec();
            if let Some(s) = c.seed {
                spec.seed = s;
            }
            let dir = c.out_dir.clone().unwrap_or_else(|| PathBuf::from("device"));
            DeviceBundle::generate(&spec)?.write(&dir)?;
            println!("device bundle written to {}", dir.display());
        }
        Cmd::Report { log } => {
            let f = fs::File::open(&log).with_context(|| format!("opening {}", log.display()))?;
            let records = read_jsonl(BufReader::new(f))?;
            print!("{}", pipeline::report(&records));
        }
        Cmd::Payload(p) => payload_cmd(p)?,
        Cmd::Oracle {
            target,
            corrupt,
            around,
            common,
        } => {
            if target.eq_ignore_ascii_case("boot") {
                let cfg = common.config()?;
                let bundle = load_bundle(&cfg)?;
                let s = BootScenario {
                    image: &bundle.image,
                    personality: &bundle.personality,
                };
                let at = bundle.image.params.fuse_check_time_ns / bundle.spec.timing.instr_ns();
                let space = FaultSpace {
                    indices: at.saturating_sub(around)..at + around,
                    include_corrupt: corrupt,
                };
                print!("{}", render_oracle("BOOT", &fault_path_oracle(&s, &space)));
            } else {
                let name: FixtureName = target.parse()?;
                let f = Fixture::load(name);
                let space = FaultSpace {
                    include_corrupt: corrupt,
                    ..Default::default()
                };
                print!("{}", render_oracle(name.as_str(), &fault_path_oracle(&f, &space)));
            }
        }
    }
    Ok(0)
}

fn payload_cmd(p: PayloadCmd) -> Result<()> {
    match p {
        PayloadCmd::Encode { entry, code, out } => {
            let code = fs::read(&code).with_context(|| format!("reading {}", code.display()))?;
            let header = UartHeader {
                entry_addr: entry,
                code_length: code.len() as u32,
                ..Default::default()
            };
            write(&out, &payload::encode(&header, &code)?)?;
        }
        PayloadCmd::Decode { file, code_out } => {
            let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let p = payload::decode(&bytes)?;
            println!("entry_addr:  {:#010x}", p.header.entry_addr);
            println!("code_length: {}", p.header.code_length);
            println!("id:          {:08x?}", p.header.id);
            println!("checksum:    {:#010x} (ok)", p.checksum);
            if let Some(o) = code_out {
                write(&o, &p.code)?;
            }
        }
        PayloadCmd::BuildDump { start, count, uart, out } => {
            write(&out, &build_dump_payload(start, count, uart)?.to_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
