//! Desk-scale lab for distilling a large grid detector into a compact one and
//! measuring how both survive symmetric INT8 post-training quantization.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, AdamW, checkpoints
//! - [`detector`]: width/depth-scalable anchor-free grid detector
//! - [`losses`]: detection task loss and the distillation objective
//! - [`quant`]: calibration, INT8 conversion, integer-only inference
//! - [`metrics`]: IoU matching, AP/mAP, precision/recall/FAR, throughput
//! - [`dataset`]: seeded synthetic long-tail detection scenes
//! - [`harness`]: the end-to-end protocol, ledger and report tables

pub mod dataset;
pub mod detector;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

/// Raw SHA-256 of `bytes`.
pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&d);
    out
}
