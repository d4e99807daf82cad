pub mod geometry;
pub mod kinematics;
pub mod ik;
pub mod motion;
pub mod device;
pub mod protocol;
pub mod sim;
pub mod task;
pub mod server;
pub mod script;
pub mod lockstep;
