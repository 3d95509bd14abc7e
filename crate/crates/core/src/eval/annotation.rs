use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded;

/// Shuffled lines with provenance hidden, plus the key mapping rows to models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSheet {
    pub artist: String,
    pub rows: Vec<String>,
    /// `key[i]` is the model that produced `rows[i]`.
    pub key: Vec<String>,
}

impl AnnotationSheet {
    /// `row<TAB>line`, 1-based rows.
    pub fn sheet_text(&self) -> String {
        let mut out = String::new();
        for (i, line) in self.rows.iter().enumerate() {
            writeln!(out, "{}\t{line}", i + 1).unwrap();
        }
        out
    }

    /// `row<TAB>model`, 1-based rows.
    pub fn key_text(&self) -> String {
        let mut out = String::new();
        for (i, model) in self.key.iter().enumerate() {
            writeln!(out, "{}\t{model}", i + 1).unwrap();
        }
        out
    }

    pub fn parse_key(text: &str) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
            let (row, model) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidInput(format!("key line {}: missing tab", n + 1)))?;
            if row.parse::<usize>().ok() != Some(n + 1) {
                return Err(Error::InvalidInput(format!("key line {}: bad row number {row}", n + 1)));
            }
            out.push(model.to_string());
        }
        Ok(out)
    }
}

/// Takes the first `n` lines of each model, then shuffles all rows with `seed`.
pub fn export_annotation_sheet(
    artist: &str,
    models: &[(String, Vec<String>)],
    n: usize,
    seed: u64,
) -> Result<AnnotationSheet> {
    let mut rows: Vec<(String, String)> = Vec::with_capacity(models.len() * n);
    for (name, lines) in models {
        if lines.len() < n {
            return Err(Error::InvalidInput(format!(
                "model {name} supplied {} lines for {artist}, {n} needed",
                lines.len()
            )));
        }
        rows.extend(lines[..n].iter().map(|l| (l.clone(), name.clone())));
    }
    rows.shuffle(&mut seeded(seed));
    let (rows, key) = rows.into_iter().unzip();
    Ok(AnnotationSheet {
        artist: artist.to_string(),
        rows,
        key,
    })
}

/// Agreement of two binary annotations beyond chance; `0` when chance agreement is total.
pub fn cohens_kappa(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidInput(format!(
            "annotation lengths {} and {} must match and be nonzero",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let pa = a.iter().filter(|&&x| x).count() as f64 / n;
    let pb = b.iter().filter(|&&x| x).count() as f64 / n;
    let chance = pa * pb + (1.0 - pa) * (1.0 - pb);
    if chance == 1.0 {
        return Ok(0.0);
    }
    Ok((agree - chance) / (1.0 - chance))
}
