pub mod numerics;
pub mod score_io;
pub mod vocab;
pub mod model;
pub mod training;
pub mod inference;
pub mod cli;
