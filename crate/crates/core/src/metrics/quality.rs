//! Aggregation of human judge labels into per-image quality levels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One judge's verdict on one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum JudgeLabel {
    Class(u32),
    /// "non-recognizable".
    NotRecognizable,
}

impl FromStr for JudgeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("nr") {
            return Ok(JudgeLabel::NotRecognizable);
        }
        s.parse().map(JudgeLabel::Class).map_err(|_| Error::Invalid(format!("judge label `{s}` is neither an integer nor NR")))
    }
}

impl fmt::Display for JudgeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JudgeLabel::Class(c) => write!(f, "{c}"),
            JudgeLabel::NotRecognizable => f.write_str("NR"),
        }
    }
}

/// Majority class and how many judges chose it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quality {
    /// `None` when no judge recognized the image.
    pub label: Option<u32>,
    pub level: usize,
}

/// Majority over recognized labels with ties to the smallest class; the
/// level counts the judges agreeing with it, and is 0 when nobody
/// recognized the image.
pub fn aggregate_quality(labels: &[JudgeLabel]) -> Result<Quality> {
    if labels.is_empty() {
        return Err(Error::Invalid("no judge labels for image".into()));
    }
    let mut counts = BTreeMap::new();
    for l in labels {
        if let JudgeLabel::Class(c) = l {
            *counts.entry(*c).or_insert(0usize) += 1;
        }
    }
    let best = counts.iter().fold(None, |best: Option<(u32, usize)>, (&c, &k)| match best {
        Some((_, bk)) if bk >= k => best,
        _ => Some((c, k)),
    });
    Ok(match best {
        Some((c, k)) => Quality { label: Some(c), level: k },
        None => Quality { label: None, level: 0 },
    })
}

/// Parses `image_id, judge_id, label` rows (an optional header is skipped)
/// and aggregates per image, ordered by image id.
pub fn aggregate_csv(text: &str) -> Result<Vec<(String, Quality)>> {
    let mut per_image: BTreeMap<String, Vec<JudgeLabel>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Invalid(format!("judge CSV line {}: expected 3 fields, found {}", i + 1, fields.len())));
        }
        if i == 0 && fields[2].eq_ignore_ascii_case("label") {
            continue;
        }
        let label = fields[2].parse().map_err(|e: Error| Error::Invalid(format!("judge CSV line {}: {e}", i + 1)))?;
        per_image.entry(fields[0].to_string()).or_default().push(label);
    }
    per_image.into_iter().map(|(id, ls)| aggregate_quality(&ls).map(|q| (id, q))).collect()
}
