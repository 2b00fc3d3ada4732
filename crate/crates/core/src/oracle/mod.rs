//! Reference engines for testing the verifier: exact region enumeration,
//! sampling attacks, bound-soundness sampling and random instances.

mod exact;
mod generate;
mod sampling;

pub use exact::{exact_verify, exact_verify_capped, OracleError, MAX_REGIONS};
pub use generate::{
    predicted_label, random_conv_instance, random_conv_network, random_instance, random_network, Instance,
    NetworkShape,
};
pub use sampling::{sample_attack, sample_soundness, uniform_point, BoundKind, Escape, SOUNDNESS_SLACK};
