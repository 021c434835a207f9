pub mod expr;
pub mod integrate;
pub mod model;
pub mod transition;
pub mod sioms;
pub mod plant;
pub mod receding;
pub mod scenario;
pub mod montecarlo;
pub mod baseline;
pub mod cache;
pub mod report;
