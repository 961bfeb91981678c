//! Annotation-cost ledger in exact integer arithmetic (label counts and
//! micro-dollars), rounded to tenths of a thousand dollars only for display.

use serde::Serialize;

use crate::error::{Error, Result};

/// Exact label count parsed from a decimal number of millions, e.g. `"3.84"`.
pub fn parse_millions(s: &str) -> Result<u64> {
    let s = s.trim();
    if s.starts_with('-') {
        return Err(Error::Contract(format!("label count {s} is negative")));
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() || frac.len() > 6 {
        return Err(Error::Contract(format!("cannot read {s:?} as millions of labels")));
    }
    let digits = |d: &str| d.is_empty() || d.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || !digits(frac) {
        return Err(Error::Contract(format!("cannot read {s:?} as millions of labels")));
    }
    let whole: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| Error::Contract(format!("{s:?} overflows")))? };
    let frac_val: u64 = if frac.is_empty() { 0 } else { frac.parse::<u64>().unwrap() * 10u64.pow(6 - frac.len() as u32) };
    Ok(whole * 1_000_000 + frac_val)
}

/// Unit prices in micro-dollars per label; caption pairs are unpriced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UnitPrices {
    pub bbox: u64,
    pub triplet: u64,
    pub image_level: u64,
}

impl Default for UnitPrices {
    fn default() -> Self {
        // A triplet is three boxes: 3 x 0.036.
        UnitPrices {
            bbox: 36_000,
            triplet: 108_000,
            image_level: 12_000,
        }
    }
}

/// Label counts (individual labels, not millions) used by one approach.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub approach: String,
    pub caption_pairs: u64,
    pub bbox: u64,
    pub triplets: u64,
    pub image_level: u64,
    pub labelers: u32,
}

impl CostRow {
    /// Counts given in millions: caption pairs, boxes, triplets, image-level labels.
    pub fn from_millions(approach: &str, counts: [&str; 4]) -> Result<Self> {
        Ok(CostRow {
            approach: approach.to_string(),
            caption_pairs: parse_millions(counts[0])?,
            bbox: parse_millions(counts[1])?,
            triplets: parse_millions(counts[2])?,
            image_level: parse_millions(counts[3])?,
            labelers: 3,
        })
    }

    /// Only unpriced caption pairs, so no cost can be quoted.
    pub fn is_unpriced(&self) -> bool {
        self.caption_pairs > 0 && self.bbox == 0 && self.triplets == 0 && self.image_level == 0
    }
}

/// Total cost in micro-dollars.
pub fn labeling_cost(row: &CostRow, prices: &UnitPrices) -> Result<u128> {
    if row.labelers < 1 {
        return Err(Error::Contract("at least one labeler is required".into()));
    }
    if prices.bbox == 0 || prices.triplet == 0 || prices.image_level == 0 {
        return Err(Error::Contract("unit prices must be positive".into()));
    }
    let per_pass = row.bbox as u128 * prices.bbox as u128
        + row.triplets as u128 * prices.triplet as u128
        + row.image_level as u128 * prices.image_level as u128;
    Ok(per_pass * row.labelers as u128)
}

/// `"1176.1k"`: thousands of dollars, one decimal, halves rounded up.
pub fn format_thousands(micros: u128) -> String {
    let tenths = (micros + 50_000_000) / 100_000_000;
    format!("{}.{}k", tenths / 10, tenths % 10)
}

/// The nine approaches compared, with the figures printed for them.
pub fn reference_rows() -> Vec<(CostRow, &'static str)> {
    let rows: [(&str, [&str; 4], &str); 9] = [
        ("Pivoting", ["0.24", "0", "0", "0"], "-"),
        ("Song et al.", ["1.82", "0", "0", "0"], "-"),
        ("Guo et al.", ["0.12", "0", "0", "0"], "-"),
        ("Feng et al.", ["0", "0.71", "0", "0"], "76.7k"),
        ("Laina et al.", ["0", "1.05", "0", "0"], "113.4k"),
        ("Cao et al.", ["0", "0.28", "0.20", "0"], "95.0k"),
        ("Gu et al.", ["0", "3.84", "2.35", "0"], "1176.1k"),
        ("SCS", ["0", "3.84", "0", "0"], "414.7k"),
        ("WS-UIC", ["0", "0", "0", "1.11"], "40.0k"),
    ];
    rows.iter()
        .map(|(n, c, p)| (CostRow::from_millions(n, *c).expect("built-in rows are valid"), *p))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostLine {
    pub approach: String,
    /// `None` for caption-pair-only approaches.
    pub micros: Option<u128>,
    pub display: String,
    pub published: String,
}

impl CostLine {
    pub fn matches(&self) -> bool {
        self.display == self.published
    }
}

pub fn cost_table() -> Vec<CostLine> {
    let prices = UnitPrices::default();
    reference_rows()
        .into_iter()
        .map(|(row, published)| {
            let micros = (!row.is_unpriced()).then(|| labeling_cost(&row, &prices).expect("valid row"));
            CostLine {
                approach: row.approach,
                display: micros.map(format_thousands).unwrap_or_else(|| "-".into()),
                micros,
                published: published.into(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn published_rows() {
        for line in cost_table() {
            assert!(line.matches(), "{}: {} vs {}", line.approach, line.display, line.published);
        }
    }

    #[test]
    fn worked_example_is_exact() {
        let row = CostRow::from_millions("g", ["0", "3.84", "2.35", "0"]).unwrap();
        assert_eq!(labeling_cost(&row, &UnitPrices::default()).unwrap(), 1_176_120_000_000);
        let w = CostRow::from_millions("w", ["0", "0", "0", "1.11"]).unwrap();
        assert_eq!(labeling_cost(&w, &UnitPrices::default()).unwrap(), 39_960_000_000);
    }

    #[test]
    fn zero_and_negative() {
        let z = CostRow::from_millions("z", ["0", "0", "0", "0"]).unwrap();
        assert_eq!(labeling_cost(&z, &UnitPrices::default()).unwrap(), 0);
        assert_eq!(format_thousands(0), "0.0k");
        assert!(matches!(parse_millions("-1"), Err(Error::Contract(_))));
        assert!(parse_millions("1.2.3").is_err());
        assert_eq!(parse_millions(".5").unwrap(), 500_000);
    }

    #[test]
    fn ratio_is_about_thirty() {
        let t = cost_table();
        let get = |n: &str| t.iter().find(|l| l.approach == n).unwrap().micros.unwrap() as f64;
        let r = get("Gu et al.") / get("WS-UIC");
        assert!((29.0..=31.0).contains(&r), "{r}");
    }

    proptest! {
        #[test]
        fn linear_in_counts_and_labelers(b in 0u64..10_000_000, t in 0u64..10_000_000, i in 0u64..10_000_000, k in 1u32..6) {
            let p = UnitPrices::default();
            let row = |b, t, i, k| CostRow { approach: String::new(), caption_pairs: 0, bbox: b, triplets: t, image_level: i, labelers: k };
            let whole = labeling_cost(&row(b, t, i, k), &p).unwrap();
            let parts = labeling_cost(&row(b, 0, 0, 1), &p).unwrap()
                + labeling_cost(&row(0, t, 0, 1), &p).unwrap()
                + labeling_cost(&row(0, 0, i, 1), &p).unwrap();
            prop_assert_eq!(whole, parts * k as u128);
            prop_assert_eq!(labeling_cost(&row(2 * b, 0, 0, k), &p).unwrap(), 2 * labeling_cost(&row(b, 0, 0, k), &p).unwrap());
        }
    }
}
