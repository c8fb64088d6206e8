//! State-space sequence primitives.

pub mod block;
pub mod lti;
pub mod scan;

pub use block::{MambaBlock, MambaCache, MambaConfig, MambaLayer, MambaVersion};
pub use lti::{apply_conv, conv_kernel, discretize, scan_recurrent, DiscreteLti, LtiSystem};
