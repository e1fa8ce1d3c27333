// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ccm;
pub mod ccp;
pub mod collision;
pub mod controller;
pub mod dynamics;
pub mod localization;
pub mod ocp;
pub mod qp;
pub mod sim;
