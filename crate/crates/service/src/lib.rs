//! HTTP API and command-line front end for clinical note search.

pub mod api;
pub mod cli;
pub mod datadir;
pub mod plot;
