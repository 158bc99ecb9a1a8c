//! Subcommand implementations. Each returns structured rows; rendering and
//! exit codes live in the binary.

pub mod forward;
pub mod hilo_noise;
pub mod mc;
pub mod roundtrip;
pub mod sweep;
pub mod theory;
