//! Correction, augmentation and evaluation of human-object interaction
//! motion sequences.
//!
//! The pipeline works on [`sequence::InteractionSequence`] bundles: a marker
//! trajectory, optional articulated-rig pose channels and a rigid object
//! trajectory. [`optimize::correct_sequence`] removes penetration and promotes
//! flagged hand contact, [`augment::augment_sequence`] displaces the object and
//! re-aligns the body under a contact-preservation objective, and
//! [`metrics`] scores sequences against each other.

pub mod augment;
pub mod body;
pub mod cli;
pub mod config;
pub mod fixtures;
pub mod geometry;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod optimize;
pub mod representation;
pub mod scene;
pub mod sequence;
