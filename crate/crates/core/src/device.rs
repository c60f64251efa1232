//! Synthetic device generator: random FEKs and boot keys, an encrypted key
//! blob, a layered MB1 image and a calibrated boot ROM, plus the on-disk
//! bundle format (`irom.bin`, `mb1.enc`, `mb1.plain.bin`, `manifest.toml`).

use crate::boot::{BootError, BootImage, ImageParams, Personality, DOWNLOAD_LABEL, FUSE_CHECK_LABEL, KEY_BLOB_ADDR};
use crate::crypto::{derive_odm_key, encrypt_key_blob, encrypt_mb1, Fek2Select, FekSource, Key, SLOT_MB1};
use crate::machine::{map, Device, FuseBank, Timing};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceSpec {
    pub seed: u64,
    pub odm_secure_boot: bool,
    pub fek2_select: Fek2Select,
    pub mb1_size: usize,
    pub failure_analysis_mode: bool,
    pub preproduction_mode: bool,
    pub image: ImageParams,
    pub timing: Timing,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        DeviceSpec {
            seed: 0,
            odm_secure_boot: false,
            fek2_select: Fek2Select::Testkey,
            mb1_size: 1024,
            failure_analysis_mode: false,
            preproduction_mode: false,
            image: ImageParams::default(),
            timing: Timing::default(),
        }
    }
}

/// Key material a real attacker does not have; kept for verification.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Secrets {
    #[serde(with = "hex_key")]
    pub nvkey: Key,
    #[serde(with = "hex_key")]
    pub testkey: Key,
    #[serde(with = "hex_key")]
    pub mb1_key: Key,
    #[serde(with = "hex_key")]
    pub se_key: Key,
    #[serde(with = "hex_key")]
    pub odm_key: Key,
}

mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(k))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into().map_err(|_| serde::de::Error::custom("key must be 16 bytes"))
    }
}

pub const SLOT_SE: u8 = 4;

#[derive(Clone, Debug)]
pub struct DeviceBundle {
    pub spec: DeviceSpec,
    pub image: BootImage,
    pub personality: Personality,
    pub secrets: Secrets,
    pub mb1_plain: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Boot(#[from] BootError),
    #[error("i/o on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{0} does not match the bundle manifest")]
    Mismatch(&'static str),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DeviceError + '_ {
    move |source| DeviceError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl DeviceBundle {
    pub fn generate(spec: &DeviceSpec) -> Result<DeviceBundle, DeviceError> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut key = || -> Key { rng.gen() };
        let (nvkey, testkey, mb1_key, se_key) = (key(), key(), key(), key());
        let feks = FekSource {
            nvkey,
            testkey,
            fek2_select: spec.fek2_select,
        };
        let odm_key = derive_odm_key(&feks.fek2());
        let blob = encrypt_key_blob(&feks.fek1(), &[(SLOT_MB1, "MB1_KEY", mb1_key), (SLOT_SE, "SE_KEY", se_key)]);
        let mut mb1_plain = b"MB1\0".to_vec();
        mb1_plain.extend((4..spec.mb1_size).map(|_| rng.gen::<u8>()));
        let mb1_enc = encrypt_mb1(&mb1_key, spec.odm_secure_boot.then_some(&odm_key), &mb1_plain);
        let personality = Personality {
            fuses: FuseBank {
                failure_analysis_mode: spec.failure_analysis_mode,
                preproduction_mode: spec.preproduction_mode,
                production_mode: true,
                odm_secure_boot: spec.odm_secure_boot,
                fek_readout_protect: false,
            },
            feks,
            mb1_image: Arc::new(mb1_enc),
            timing: spec.timing,
        };
        let image = BootImage::build(&spec.image, &blob, &personality)?;
        Ok(DeviceBundle {
            spec: spec.clone(),
            image,
            personality,
            secrets: Secrets {
                nvkey,
                testkey,
                mb1_key,
                se_key,
                odm_key,
            },
            mb1_plain,
        })
    }

    pub fn device(&self) -> Device {
        self.image.device(&self.personality)
    }

    pub fn mb1_enc(&self) -> &[u8] {
        &self.personality.mb1_image
    }

    pub fn manifest(&self) -> Manifest {
        let p = &self.image.params;
        Manifest {
            device: self.spec.clone(),
            memory: MemoryInfo {
                irom_base: map::IROM_BASE,
                irom_size: map::IROM_SIZE,
                pirom_start_reset: self.image.reset_pirom_update.0,
                pirom_start_boot: self.image.reset_pirom_update.1,
                pirom_start_mb2: crate::boot::PROTECTED_OFFSET,
                key_blob_addr: KEY_BLOB_ADDR,
                ram_base: map::RAM_BASE,
                ram_size: map::RAM_SIZE,
                uart_tx: map::UART_TX,
                fek_registers: map::MISC_NVKEY,
                fuse_check: self.image.symbol(FUSE_CHECK_LABEL),
                uart_download: self.image.symbol(DOWNLOAD_LABEL),
            },
            timeline: Timeline {
                fuse_check_time_ns: p.fuse_check_time_ns,
                qspi_probe_time_ns: p.qspi_probe_time_ns,
                mb2_entry_time_ns: p.mb2_entry_time_ns,
                tick_ns: self.spec.timing.tick_ns,
                ticks_per_instr: self.spec.timing.ticks_per_instr,
            },
            secrets: self.secrets.clone(),
            files: Files {
                irom: "irom.bin".into(),
                mb1_enc: "mb1.enc".into(),
                mb1_plain: "mb1.plain.bin".into(),
            },
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), DeviceError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let m = self.manifest();
        let files: [(&str, &[u8]); 3] = [
            (&m.files.irom, &self.image.irom),
            (&m.files.mb1_enc, self.mb1_enc()),
            (&m.files.mb1_plain, &self.mb1_plain),
        ];
        for (name, bytes) in files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        let text = toml::to_string_pretty(&m).map_err(|e| DeviceError::Manifest(e.to_string()))?;
        let path = dir.join("manifest.toml");
        fs::write(&path, text).map_err(io_err(&path))
    }

    /// Loads a bundle written by [`DeviceBundle::write`]. The ROM is rebuilt
    /// from the recorded spec (for its symbol table) and must match the
    /// stored bytes exactly.
    pub fn load(dir: &Path) -> Result<DeviceBundle, DeviceError> {
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| DeviceError::Manifest(e.to_string()))?;
        let bundle = DeviceBundle::generate(&m.device)?;
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(io_err(&p))
        };
        if read(&m.files.irom)? != *bundle.image.irom {
            return Err(DeviceError::Mismatch("irom.bin"));
        }
        if read(&m.files.mb1_enc)? != bundle.mb1_enc() {
            return Err(DeviceError::Mismatch("mb1.enc"));
        }
        if read(&m.files.mb1_plain)? != bundle.mb1_plain {
            return Err(DeviceError::Mismatch("mb1.plain.bin"));
        }
        if m.secrets != bundle.secrets {
            return Err(DeviceError::Mismatch("secrets"));
        }
        Ok(bundle)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub device: DeviceSpec,
    pub memory: MemoryInfo,
    pub timeline: Timeline,
    pub secrets: Secrets,
    pub files: Files,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryInfo {
    pub irom_base: u32,
    pub irom_size: u32,
    pub pirom_start_reset: u32,
    pub pirom_start_boot: u32,
    pub pirom_start_mb2: u32,
    pub key_blob_addr: u32,
    pub ram_base: u32,
    pub ram_size: u32,
    pub uart_tx: u32,
    pub fek_registers: u32,
    pub fuse_check: u32,
    pub uart_download: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeline {
    pub fuse_check_time_ns: u64,
    pub qspi_probe_time_ns: u64,
    pub mb2_entry_time_ns: u64,
    pub tick_ns: u64,
    pub ticks_per_instr: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Files {
    pub irom: String,
    pub mb1_enc: String,
    pub mb1_plain: String,
}
