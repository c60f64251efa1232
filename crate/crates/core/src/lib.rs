//! Simulation of a voltage-glitch attack on a secure boot ROM.

pub mod asm;
pub mod boot;
pub mod campaign;
pub mod config;
pub mod crypto;
pub mod device;
pub mod fixtures;
pub mod isa;
pub mod machine;
pub mod oracle;
pub mod payload;
pub mod pipeline;
pub mod rail;
pub mod rig;
mod rngser;
pub mod search;
