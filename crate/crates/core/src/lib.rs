pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod cuf;
pub mod encoder;
pub mod eval;
pub mod grid;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod posenc;
pub mod synth;
pub mod tensor;
pub mod train;
