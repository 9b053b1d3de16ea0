//! Writes the default synthetic ABC corpus to standard output.
//!
//! `cargo run -p spe-core --example synth_corpus > data/abc_toy.txt`

use spe_core::corpus::synth::{generate, SynthConfig};

fn main() -> spe_core::Result<()> {
    print!("{}", generate(&SynthConfig::default())?);
    Ok(())
}
