pub mod asm;
pub mod bench;
pub mod cfg;
pub mod exec;
pub mod fold;
pub mod leakage;
pub mod linearize;
pub mod oni;
pub mod par;
