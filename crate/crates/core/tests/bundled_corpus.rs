use std::path::Path;

use spe_core::corpus::synth::{generate, SynthConfig};

#[test]
fn bundled_corpus_matches_the_generator() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/abc_toy.txt");
    let bundled = std::fs::read_to_string(path).unwrap();
    assert!(bundled == generate(&SynthConfig::default()).unwrap(), "regenerate with the synth_corpus example");
}
