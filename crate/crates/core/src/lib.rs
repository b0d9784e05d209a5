pub mod asm;
pub mod attack;
pub mod config;
pub mod cpu;
pub mod error;
pub mod isa;
pub mod memory;
pub mod os;
pub mod state;
pub mod stats;
pub mod trace;
