pub const BAR_TOKEN: &str = "|";

const BARS_PER_SENTENCE: usize = 4;

/// Splits a pre-tokenized tune into sentences of four bars each.
///
/// A bar is a run of tokens closed by `bar`; the closing token stays with
/// its bar. Tokens after the last bar line form a final open bar. A tune
/// without any bar line yields nothing, and a trailing segment of one to
/// three bars is kept as a short sentence.
pub fn segment_abc<S: AsRef<str> + Clone>(tune: &[S], bar: &str) -> Vec<Vec<S>> {
    if !tune.iter().any(|t| t.as_ref() == bar) {
        return Vec::new();
    }
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    let mut bars = 0;
    for tok in tune {
        current.push(tok.clone());
        if tok.as_ref() == bar {
            bars += 1;
            if bars == BARS_PER_SENTENCE {
                sentences.push(std::mem::take(&mut current));
                bars = 0;
            }
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}
