//! The `kvret` command-line tool: preprocessing, training, search,
//! evaluation, the chat server and a terminal chat.

pub mod commands;
pub mod http;

pub use commands::{run, Cli};
