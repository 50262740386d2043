//! Class activation maps: the per-location probability of one class, and
//! their export as plain graymaps or CSV grids.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::models::FeatureMap;
use crate::tensor::Tensor;

use super::{dense_classify, ClassWeights};

/// Probability of class `j` at every location, shaped `[h, w]`.
pub fn cam(fm: &FeatureMap, w: &ClassWeights, tau: f64, j: usize) -> Result<Tensor> {
    if j >= w.classes() {
        return Err(Error::Index(format!(
            "class {j} out of range for {} classes",
            w.classes()
        )));
    }
    let probs = dense_classify(fm, w, tau)?;
    let col = probs.rows().map(|row| row[j]).collect();
    Tensor::new(vec![fm.h, fm.w], col)
}

/// Probabilities in `[0, 1]` mapped to gray levels `round(255·p)`.
pub fn to_gray(map: &Tensor) -> Vec<u8> {
    map.data()
        .iter()
        .map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8)
        .collect()
}

/// ASCII portable graymap (P2) with maxval 255.
pub fn to_pgm(map: &Tensor) -> Result<String> {
    let (h, w) = dims(map)?;
    let gray = to_gray(map);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in gray.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Parse a P2 graymap back into `(h, w, levels)`. Comments are skipped.
pub fn parse_pgm(text: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let bad = |m: &str| Error::format(0, format!("pgm: {m}"));
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 header"));
    }
    let mut num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("expected {what}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let max = num("maxval")?;
    if max != 255 {
        return Err(bad("maxval must be 255"));
    }
    let levels = (0..w * h)
        .map(|_| num("pixel").and_then(|v| u8::try_from(v).map_err(|_| bad("pixel above 255"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((h, w, levels))
}

/// Raw probabilities, one grid row per line.
pub fn to_csv(map: &Tensor) -> Result<String> {
    let (_, w) = dims(map)?;
    let mut out = String::new();
    for row in map.data().chunks(w) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("write to string");
        }
        out.push('\n');
    }
    Ok(out)
}

fn dims(map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        [h, w] if *w > 0 => Ok((*h, *w)),
        s => Err(Error::shape("cam export", s, &[2])),
    }
}
