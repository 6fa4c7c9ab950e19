pub mod analysis;
pub mod backend;
pub mod report;
pub mod server;
