pub mod config;
pub mod flow;
pub mod hmp;
pub mod hybrid;
pub mod manifold;
pub mod needle;
pub mod solver;
