//! Command-line front end and HTTP query service for `videmb`.

pub mod args;
pub mod commands;
pub mod config;
pub mod serve;

use std::ffi::OsString;

/// Parses and runs one invocation, returning the process exit code:
/// 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match config::parse(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
