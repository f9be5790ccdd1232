//! Non-dominated set extraction over (val_ppl, mia_recall), both minimized.

use std::collections::BTreeMap;

use super::MetricPoint;

/// A point dominates another iff it is ≤ on both coordinates and < on at
/// least one. Returns the non-dominated subset sorted by val_ppl, exact
/// coordinate duplicates kept once. Points without a recall value cannot
/// participate and are skipped.
pub fn pareto_frontier(points: &[MetricPoint]) -> Vec<MetricPoint> {
    let mut usable: Vec<&MetricPoint> = points.iter().filter(|p| p.mia_recall.is_some()).collect();
    usable.sort_by(|a, b| {
        (a.val_ppl, a.mia_recall.unwrap())
            .partial_cmp(&(b.val_ppl, b.mia_recall.unwrap()))
            .expect("finite metrics")
    });
    let mut out: Vec<MetricPoint> = Vec::new();
    let mut best_recall = f64::INFINITY;
    for p in usable {
        let r = p.mia_recall.unwrap();
        if r < best_recall {
            out.push(p.clone());
            best_recall = r;
        }
    }
    out
}

/// Per-strategy frontiers, keyed by strategy label.
pub fn pareto_frontier_by_strategy(points: &[MetricPoint]) -> BTreeMap<String, Vec<MetricPoint>> {
    let mut groups: BTreeMap<String, Vec<MetricPoint>> = BTreeMap::new();
    for p in points {
        groups.entry(p.strategy.clone()).or_default().push(p.clone());
    }
    groups
        .into_iter()
        .map(|(k, v)| (k.clone(), pareto_frontier(&v)))
        .collect()
}
