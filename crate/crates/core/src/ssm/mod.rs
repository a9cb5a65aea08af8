//! Selective state-space (Mamba) blocks and the external bidirectional wrapper.

mod mamba;
mod scan;

#[cfg(test)]
mod tests;

pub use mamba::{Direction, ExtBiMamba, Fusion, MambaBlock, MambaConfig, Projections, SsmCore};
pub use scan::{selective_scan, selective_scan_chunked, selective_scan_op, ScanInputs};
