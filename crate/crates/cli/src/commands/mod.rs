pub mod evaluate;
pub mod predict;
pub mod report;
pub mod simulate;
pub mod train;
