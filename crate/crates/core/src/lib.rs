pub mod dynamics;
pub mod echo;
pub mod error;
pub mod measure;
pub mod master;
pub mod model;
pub mod qcore;
pub mod robservable;
pub mod scenarios;
pub mod tree;

pub use error::{Error, Result};
pub use qcore::{C64, Operator, SpaceShape, Spectral, StateVector};
