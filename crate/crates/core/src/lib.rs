pub mod data;
pub mod error;
pub mod interpret;
pub mod contour;
pub mod model;
pub mod par;
pub mod region;
pub mod rng;
pub mod selftest;
pub mod stats;
pub mod tensor;
pub mod training;
