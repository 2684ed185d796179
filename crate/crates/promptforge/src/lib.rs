pub mod data;
pub mod encoders;
pub mod io;
pub mod par;
pub mod tensor;
pub mod prompt;
pub mod trainer;
pub mod eval;
pub mod experiment;
