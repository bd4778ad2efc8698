//! Living-lab sensing platform: member registry, floor plans, device
//! metadata, a time-series store, experience-sampling surveys, automated
//! fault detection and dashboards, served over one HTTP API.

pub mod api;
pub mod clock;
pub mod config;
pub mod dashboards;
pub mod devices;
pub mod error;
pub mod faultwatch;
pub mod floorplan;
pub mod ids;
pub mod labsim;
pub mod platform;
pub mod registry;
pub mod surveys;
pub mod tsstore;

pub use config::ServiceConfig;
pub use error::{Error, Result};
pub use platform::Lab;
