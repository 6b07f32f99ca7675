pub mod acquisition;
pub mod cli;
pub mod ffm;
pub mod harness;
pub mod linalg;
pub mod objective;
pub mod optimizer;
pub mod rng;
pub mod space;
pub mod surrogates;
pub mod synthetic;
