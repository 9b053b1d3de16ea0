//! Synthetic ABC-style corpus.
//!
//! Every tune has a hidden key (five adjacent pitches, no two keys sharing
//! one, some keys far more
//! common than others), a bar density and a closing motif. Melodies are
//! random walks on the scale. Inside a phrase the third bar repeats the
//! first with probability `repeat`; across phrases a phrase opens with the
//! previous phrase's third bar with probability `echo`, and every phrase
//! ends on the tune's closing motif.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BAR_TOKEN;
use crate::error::{Error, Result};

const PITCHES: [&str; 21] = [
    "C,", "D,", "E,", "F,", "G,", "A,", "B,", "C", "D", "E", "F", "G", "A", "B", "c", "d", "e", "f", "g", "a", "b",
];
/// Keys are disjoint runs of this many pitches.
const SCALE_LEN: usize = 5;
/// Note lengths within one four-unit bar, grouped by note count.
const RHYTHMS: [&[&[u8]]; 3] = [&[&[4]], &[&[2, 2]], &[&[2, 1, 1], &[1, 1, 2], &[1, 2, 1]]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub tunes: usize,
    pub min_phrases: usize,
    pub max_phrases: usize,
    pub keys: usize,
    pub repeat: f64,
    pub echo: f64,
    pub rest_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tunes: 560,
            min_phrases: 8,
            max_phrases: 12,
            keys: 4,
            repeat: 0.5,
            echo: 0.5,
            rest_rate: 0.05,
            seed: 2019,
        }
    }
}

type Bar = Vec<String>;

struct Tune {
    scale: Vec<usize>,
    /// Probabilities of one, two and three notes per bar.
    density: [f64; 3],
    cadence: Bar,
    degree: usize,
}

fn note(pitch: usize, len: u8) -> String {
    match len {
        1 => PITCHES[pitch].to_owned(),
        n => format!("{}{n}", PITCHES[pitch]),
    }
}

fn rest(len: u8) -> String {
    match len {
        1 => "z".to_owned(),
        n => format!("z{n}"),
    }
}

impl Tune {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        // Key k has weight 1/(k+1).
        let weights: Vec<f64> = (0..cfg.keys).map(|k| 1.0 / (k + 1) as f64).collect();
        let key = WeightedIndex::new(&weights).expect("positive weights").sample(rng);
        let scale = (SCALE_LEN * key..SCALE_LEN * (key + 1)).collect();
        let density = match rng.gen_range(0..3) {
            0 => [0.9, 0.1, 0.0],
            1 => [0.1, 0.8, 0.1],
            _ => [0.0, 0.1, 0.9],
        };
        let mut tune = Tune {
            scale,
            density,
            cadence: Vec::new(),
            degree: rng.gen_range(0..SCALE_LEN),
        };
        tune.cadence = tune.bar(cfg, rng);
        tune
    }

    fn bar(&mut self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Bar {
        let u: f64 = rng.gen();
        let count = if u < self.density[0] {
            0
        } else if u < self.density[0] + self.density[1] {
            1
        } else {
            2
        };
        let rhythm = RHYTHMS[count].choose(rng).expect("non-empty");
        let mut out = Vec::with_capacity(rhythm.len() + 1);
        for &len in rhythm.iter() {
            if rng.gen::<f64>() < cfg.rest_rate {
                out.push(rest(len));
                continue;
            }
            let step: i64 = rng.gen_range(-2..=2);
            let n = self.scale.len() as i64;
            self.degree = (self.degree as i64 + step).rem_euclid(n) as usize;
            out.push(note(self.scale[self.degree], len));
        }
        out.push(BAR_TOKEN.to_owned());
        out
    }

    fn phrase(&mut self, cfg: &SynthConfig, opening: Option<&Bar>, rng: &mut ChaCha8Rng) -> Vec<Bar> {
        let first = match opening {
            Some(b) if rng.gen::<f64>() < cfg.echo => b.clone(),
            _ => self.bar(cfg, rng),
        };
        let second = self.bar(cfg, rng);
        let third = if rng.gen::<f64>() < cfg.repeat {
            first.clone()
        } else {
            self.bar(cfg, rng)
        };
        vec![first, second, third, self.cadence.clone()]
    }
}

/// One tune per line, tokens separated by single spaces.
pub fn generate(cfg: &SynthConfig) -> Result<String> {
    if cfg.keys == 0 || cfg.keys > PITCHES.len() / SCALE_LEN {
        return Err(Error::invalid(format!("keys must be in 1..={}", PITCHES.len() / SCALE_LEN)));
    }
    if cfg.min_phrases < 2 || cfg.max_phrases < cfg.min_phrases {
        return Err(Error::invalid("need 2 <= min_phrases <= max_phrases"));
    }
    if [cfg.repeat, cfg.echo, cfg.rest_rate].iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("repeat, echo and rest_rate must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = String::new();
    for _ in 0..cfg.tunes {
        let mut tune = Tune::new(cfg, &mut rng);
        let phrases = rng.gen_range(cfg.min_phrases..=cfg.max_phrases);
        let mut opening: Option<Bar> = None;
        let mut tokens: Vec<String> = Vec::new();
        for _ in 0..phrases {
            let bars = tune.phrase(cfg, opening.as_ref(), &mut rng);
            opening = Some(bars[2].clone());
            tokens.extend(bars.into_iter().flatten());
        }
        out.push_str(&tokens.join(" "));
        out.push('\n');
    }
    Ok(out)
}
