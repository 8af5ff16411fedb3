//! Seed fan-out.
//!
//! Every component seed is `derive(master, stream, index)`: a SplitMix64
//! finalizer over the master seed mixed with a fixed stream constant, then
//! mixed again with the index (domain id, run number, ...). Stream constants
//! never change, so adding a component never shifts the others.

/// Stream identifiers, one per randomized component.
pub mod stream {
    pub const VOCAB: u64 = 1;
    pub const DOMAIN: u64 = 2;
    pub const DATA: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const SCHEDULE: u64 = 8;
    pub const FINETUNE: u64 = 9;
    pub const PERTURB: u64 = 10;
    pub const LM: u64 = 11;
    /// Per-run roots: 0 data, 1 model init, 2 training, 3 scorers, 4 LM init.
    pub const RUN: u64 = 12;
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    let s = splitmix64(master ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(s ^ index.wrapping_mul(0xA076_1D64_78BD_642F))
}
