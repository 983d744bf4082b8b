pub mod autodiff;
pub mod candidates;
pub mod eval;
pub mod kb;
pub mod model;
pub mod synth;
pub mod training;
pub mod vocab;
