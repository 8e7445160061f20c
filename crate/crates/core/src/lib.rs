pub mod eigen;
pub mod limits;
pub mod model;
pub mod montecarlo;
pub mod sampling;
pub mod stats;

mod linalg;
