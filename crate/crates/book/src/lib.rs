//! The guide in `book/`, included chapter by chapter so `cargo test` runs
//! every code sample.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/kinematics.md")]
pub mod kinematics {}

#[doc = include_str!("../../../book/src/ik.md")]
pub mod ik {}

#[doc = include_str!("../../../book/src/teleoperation.md")]
pub mod teleoperation {}

#[doc = include_str!("../../../book/src/fences.md")]
pub mod fences {}

#[doc = include_str!("../../../book/src/protocol.md")]
pub mod protocol {}

#[doc = include_str!("../../../book/src/task.md")]
pub mod task {}

#[doc = include_str!("../../../book/src/replay.md")]
pub mod replay {}

#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}
