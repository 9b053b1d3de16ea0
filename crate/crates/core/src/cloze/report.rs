use serde::{Deserialize, Serialize};

/// One trained model evaluated on one question set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub weights: String,
    pub sampler: String,
    pub question_set: String,
    pub questions: usize,
    pub criterion1: f64,
    pub criterion2: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<TableRow>,
}

/// Aligned plain-text rendering, accuracies in percent.
pub fn render_table(table: &ResultsTable) -> String {
    let header = ["weights (a,b,g)", "sampler", "questions", "n", "crit. 1", "crit. 2"];
    let cells: Vec<[String; 6]> = table
        .rows
        .iter()
        .map(|r| {
            [
                r.weights.clone(),
                r.sampler.clone(),
                r.question_set.clone(),
                r.questions.to_string(),
                format!("{:.1}%", 100.0 * r.criterion1),
                format!("{:.1}%", 100.0 * r.criterion2),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |vals: Vec<&str>| -> String {
        vals.iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (v, w))| {
                // Text columns left-aligned, numbers right-aligned.
                if i < 3 {
                    format!("{v:<w$}")
                } else {
                    format!("{v:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_owned()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
