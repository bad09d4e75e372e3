pub mod attack;
pub mod evaluate;
pub mod explain;
pub mod report;
pub mod synth;
pub mod train;
