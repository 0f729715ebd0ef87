//! Evaluation reports: per-item scores with aggregates derived from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub items: Vec<ItemScore>,
    pub categories: BTreeMap<String, BTreeMap<String, f64>>,
    pub overall: BTreeMap<String, f64>,
    /// Metric whose overall value is the headline number.
    pub headline: String,
    #[serde(default)]
    pub config: serde_json::Value,
    /// Input file name → SHA-256 of its bytes.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn means<'a, I>(items: I) -> BTreeMap<String, f64>
where
    I: IntoIterator<Item = &'a ItemScore>,
{
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for item in items {
        for (k, v) in &item.scores {
            let e = sums.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

impl EvalReport {
    /// Builds a report whose category and overall values are means of the
    /// per-item scores (items lacking a metric do not contribute to it).
    pub fn from_items(kind: &str, headline: &str, items: Vec<ItemScore>) -> Self {
        let mut report = Self {
            kind: kind.to_string(),
            items,
            categories: BTreeMap::new(),
            overall: BTreeMap::new(),
            headline: headline.to_string(),
            config: serde_json::Value::Null,
            provenance: BTreeMap::new(),
            notes: Vec::new(),
        };
        report.recompute();
        report
    }

    pub fn recompute(&mut self) {
        let mut by_cat: BTreeMap<String, Vec<&ItemScore>> = BTreeMap::new();
        for item in &self.items {
            if let Some(c) = &item.category {
                by_cat.entry(c.clone()).or_default().push(item);
            }
        }
        self.categories = by_cat
            .into_iter()
            .map(|(c, items)| (c, means(items)))
            .collect();
        self.overall = means(&self.items);
    }

    /// True when stored aggregates equal those recomputed from the items.
    pub fn is_consistent(&self) -> bool {
        let mut fresh = self.clone();
        fresh.recompute();
        let close = |a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|((ka, va), (kb, vb))| ka == kb && (va - vb).abs() < 1e-12)
        };
        close(&fresh.overall, &self.overall)
            && fresh.categories.len() == self.categories.len()
            && fresh
                .categories
                .iter()
                .zip(&self.categories)
                .all(|((ca, a), (cb, b))| ca == cb && close(a, b))
    }

    pub fn headline_value(&self) -> Option<f64> {
        self.overall.get(&self.headline).copied()
    }

    /// Plain-text table: one row per item, then category and overall rows.
    pub fn render_table(&self) -> String {
        let metrics: Vec<&String> = self.overall.keys().collect();
        let id_width = self
            .items
            .iter()
            .map(|i| i.id.len())
            .chain(self.categories.keys().map(|c| c.len() + 6))
            .chain([7])
            .max()
            .unwrap_or(7);
        let col = |m: &str| m.len().max(8);

        let mut out = String::new();
        let _ = write!(out, "{:<id_width$}", "item");
        for m in &metrics {
            let _ = write!(out, "  {:>w$}", m, w = col(m));
        }
        out.push('\n');
        let row = |out: &mut String, label: &str, scores: &BTreeMap<String, f64>| {
            let _ = write!(out, "{label:<id_width$}");
            for m in &metrics {
                match scores.get(*m) {
                    Some(v) => {
                        let _ = write!(out, "  {:>w$.4}", v, w = col(m));
                    }
                    None => {
                        let _ = write!(out, "  {:>w$}", "-", w = col(m));
                    }
                }
            }
            out.push('\n');
        };
        for item in &self.items {
            row(&mut out, &item.id, &item.scores);
        }
        for (c, scores) in &self.categories {
            row(&mut out, &format!("[cat] {c}"), scores);
        }
        row(&mut out, "overall", &self.overall);
        out
    }
}
