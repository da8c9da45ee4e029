pub mod cli;
pub mod data;
pub mod evaluator;
pub mod featurenet;
pub mod gradcheck;
pub mod losses;
pub mod metricnet;
pub mod model;
pub mod tensor;
pub mod trainer;
