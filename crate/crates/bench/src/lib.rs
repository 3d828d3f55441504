//! Generators, experiment runner, diagnostics presets and the command-line
//! front end for `sketchtucker`.

pub mod checks;
pub mod cli;
pub mod experiment;
pub mod generators;
