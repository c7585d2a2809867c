//! Command line tools and the HTTP session service around `refinpaint-core`.

pub mod api;
pub mod cli;
pub mod config;
pub mod data;
pub mod piece;
pub mod session;
