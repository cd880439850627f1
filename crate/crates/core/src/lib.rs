// Negated float comparisons are the NaN-rejecting form.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod exact;
pub mod fixedpoint;
pub mod interval;
pub mod model;
pub mod stability;
pub mod noise;
pub mod synth;
pub mod verify_msv;
pub mod verify_aa;
