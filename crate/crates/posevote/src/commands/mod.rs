pub mod estimate;
pub mod eval;
pub mod gen_data;
pub mod mmd_fit;
pub mod pipeline;
pub mod vote;
