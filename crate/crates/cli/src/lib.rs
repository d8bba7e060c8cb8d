//! Command-line front end and the survey HTTP service.

pub mod server;
