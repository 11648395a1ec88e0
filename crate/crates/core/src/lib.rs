//! Minimum-MSE unit averaging for heterogeneous panels.
//!
//! Per-unit models are fit by least squares ([`panel`]), a scalar focus
//! parameter is chosen ([`focus`]), the local-asymptotic MSE criteria are
//! built ([`lamse`]) and minimized over the simplex ([`qp`], [`weights`]).
//! [`oracle`] simulates the limit experiment and [`montecarlo`] runs the
//! dynamic-panel simulation study.

pub mod cli;
pub mod error;
pub mod focus;
pub mod lamse;
pub mod linalg;
pub mod montecarlo;
pub mod oracle;
pub mod panel;
pub mod qp;
pub mod rng;
pub mod weights;

pub use error::{Error, Result};
pub use focus::Focus;
pub use lamse::{LamseCriterion, LamseFixedN, LamseLargeN, LamseUnbiased};
pub use panel::{ModelSpec, PanelData, UnitFit, Vcov};
pub use weights::{Scheme, WeightVector};
