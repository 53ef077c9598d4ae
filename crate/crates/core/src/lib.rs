//! Simulation toolkit for Wi-Fi location obfuscation by transmit precoding.
//!
//! The crate models a multipath MIMO uplink between a user and one or more
//! access points, the precoders a user can apply to hide the direct path
//! behind its reflections, and the access point's localization pipeline
//! (channel estimation, super-resolution angle/delay extraction, direct path
//! selection, ranging and triangulation). A config-driven Monte Carlo
//! harness ties them together.

pub mod array;
pub mod attacker;
pub mod channel;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod locator;
pub mod oracle;
pub mod precoder;

pub use array::{steering_vector, subcarrier_frequencies, Angle, ArrayConfig, BandConfig, SPEED_OF_LIGHT};
pub use channel::{
    add_awgn, excess_delays, random_scenario, scene_to_paths, synthesize_channel, Channel,
    GeometricScene, PathParams, PathSet, ScenarioSpec, SpreadClass,
};
pub use error::{Error, Result};
pub use locator::{ApPose, ErrorStats, Fix};
pub use precoder::{
    apply_precoder, dolos_precoder, draw_delay, invert_precoder, DelayMode, DelayPolicy, Precoder,
    VariantTag,
};
