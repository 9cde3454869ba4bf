pub mod baselines;
pub mod dataset;
pub mod encoder;
pub mod estimator;
pub mod evalharness;
pub mod frame;
pub mod gp;
pub mod nnkernels;
pub mod numerics;
pub mod pipeline;
pub mod riskcore;
pub mod synthgen;
