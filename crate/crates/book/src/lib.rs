//! Each chapter of the guide becomes a module here so that `cargo test`
//! runs its code listings as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/vehicle-model.md")]
pub mod vehicle_model {}
#[doc = include_str!("../../../book/src/optimal-control.md")]
pub mod optimal_control {}
#[doc = include_str!("../../../book/src/qp-solver.md")]
pub mod qp_solver {}
#[doc = include_str!("../../../book/src/ccp.md")]
pub mod ccp {}
#[doc = include_str!("../../../book/src/collision-points.md")]
pub mod collision_points {}
#[doc = include_str!("../../../book/src/localization.md")]
pub mod localization {}
#[doc = include_str!("../../../book/src/ccm.md")]
pub mod ccm {}
#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
