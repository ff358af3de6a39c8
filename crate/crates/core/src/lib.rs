pub mod corpus;
pub mod dsp;
pub mod rng;
pub mod synth;
pub mod features;
pub mod nn;
pub mod train;
pub mod eval;
pub mod desk;
pub mod pipeline;
