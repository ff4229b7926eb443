//! Distance-aware selective state-space layer and its scan kernels.

pub mod aware;
pub mod scan;

pub use aware::{AwareSsm, AwareSsmConfig, DirectionalTransition};
pub use scan::{scan_parallel, scan_sequential, ScanSequences, ScanState};
