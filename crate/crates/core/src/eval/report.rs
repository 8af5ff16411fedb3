use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{DecodeOptions, MAX_ORDER, SMOOTHING_EPS};
use crate::{Error, Result};

/// How the numbers in a report were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub metric: String,
    pub tokenization: String,
    pub smoothing: String,
    pub beam_width: usize,
    pub max_steps: usize,
}

impl ReportHeader {
    pub fn new(opts: &DecodeOptions) -> Self {
        Self {
            metric: format!("corpus BLEU, {MAX_ORDER}-gram, exponential brevity penalty"),
            tokenization: "model token ids, no retokenization".into(),
            smoothing: format!("numerator {SMOOTHING_EPS} for n-gram orders without matches"),
            beam_width: opts.beam_width,
            max_steps: opts.max_steps,
        }
    }
}

/// One flat report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatRow {
    pub method: String,
    pub domain: String,
    pub seen_flag: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl FlatRow {
    pub fn new(
        method: &str,
        domain: &str,
        seen: Option<bool>,
        metric: &str,
        value: f64,
        seed: u64,
    ) -> Self {
        Self {
            method: method.into(),
            domain: domain.into(),
            seen_flag: match seen {
                Some(true) => "seen".into(),
                Some(false) => "unseen".into(),
                None => String::new(),
            },
            metric: metric.into(),
            value,
            seed,
        }
    }
}

pub const FLAT_HEADER: [&str; 6] = ["method", "domain", "seen_flag", "metric", "value", "seed"];

/// Header plus one line per row; the header is written even with no rows.
pub fn write_flat_csv<W: Write>(rows: &[FlatRow], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(FLAT_HEADER)
        .map_err(|e| Error::Contract(format!("csv: {e}")))?;
    for r in rows {
        out.serialize(r)
            .map_err(|e| Error::Contract(format!("csv: {e}")))?;
    }
    out.flush()
        .map_err(|e| Error::Contract(format!("csv: {e}")))
}
