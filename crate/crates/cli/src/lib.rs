//! Library side of the `icc` command-line tool.

pub mod checks;
