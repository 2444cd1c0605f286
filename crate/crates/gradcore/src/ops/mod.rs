pub mod conv;
pub(crate) mod norm;

pub use conv::{PadMode, Padding};
