//! Width-switchable layers.

pub mod conv;
pub mod gdn;
pub mod widths;

pub use conv::SlimConv;
pub use gdn::{gdn_backward, gdn_forward, GdnGrads, GdnVariant, SlimGdn};
pub use widths::WidthSet;
