//! Page-fault-oblivious compilation for a small C-like language.

pub mod contract;
pub mod corpus;
pub mod error;
pub mod exectree;
pub mod frontend;
pub mod ir;
pub mod layout;
pub mod leakage;
pub mod lower;
pub mod model;
pub mod optimize;
pub mod report;
pub mod simulate;
pub mod suite;
pub mod transform;

pub use error::{Error, Result};
