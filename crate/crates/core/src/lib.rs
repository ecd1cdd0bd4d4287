pub mod bench;
pub mod dfo;
pub mod learn;
pub mod mpc;
pub mod policy;
pub mod trackgeom;
pub mod vehicle;
