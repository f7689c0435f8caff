use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Full ranking for one query together with its positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub ranking: Vec<String>,
    pub positives: BTreeSet<String>,
}

/// Metric values as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_queries: usize,
    /// Queries without positives, left out of every metric.
    pub excluded: Vec<String>,
    pub map: f64,
    pub mrr: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub tr5: f64,
    pub p5: f64,
    /// Largest tR@5 any ranking could reach on this query set.
    pub max_tr5: f64,
}

pub fn average_precision(ranking: &[String], positives: &BTreeSet<String>) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / positives.len() as f64
}

fn reciprocal_rank(ranking: &[String], positives: &BTreeSet<String>) -> f64 {
    ranking
        .iter()
        .position(|id| positives.contains(id))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

fn hits_in_top(ranking: &[String], positives: &BTreeSet<String>, k: usize) -> usize {
    ranking.iter().take(k).filter(|id| positives.contains(*id)).count()
}

/// `Σ min(|P|, 5) / Σ |P|`.
pub fn max_tr5(positive_counts: &[usize]) -> f64 {
    let total: usize = positive_counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    positive_counts.iter().map(|&c| c.min(5)).sum::<usize>() as f64 / total as f64
}

pub fn compute_metrics(outcomes: &[QueryOutcome], ks: &[usize]) -> MetricsReport {
    let (used, skipped): (Vec<&QueryOutcome>, Vec<&QueryOutcome>) = outcomes.iter().partition(|o| !o.positives.is_empty());
    let excluded: Vec<String> = skipped.iter().map(|o| o.query_id.clone()).collect();
    for id in &excluded {
        tracing::warn!(query_id = %id, "query has no positives and is excluded from metrics");
    }
    let n = used.len();
    let mut recall_at: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    if n == 0 {
        return MetricsReport {
            n_queries: 0,
            excluded,
            map: 0.0,
            mrr: 0.0,
            recall_at,
            tr5: 0.0,
            p5: 0.0,
            max_tr5: 0.0,
        };
    }
    let nf = n as f64;
    let map = used.iter().map(|o| average_precision(&o.ranking, &o.positives)).sum::<f64>() / nf;
    let mrr = used.iter().map(|o| reciprocal_rank(&o.ranking, &o.positives)).sum::<f64>() / nf;
    for (&k, r) in recall_at.iter_mut() {
        *r = used.iter().filter(|o| hits_in_top(&o.ranking, &o.positives, k) > 0).count() as f64 / nf;
    }
    let top5: usize = used.iter().map(|o| hits_in_top(&o.ranking, &o.positives, 5)).sum();
    let all_pos: usize = used.iter().map(|o| o.positives.len()).sum();
    let counts: Vec<usize> = used.iter().map(|o| o.positives.len()).collect();
    MetricsReport {
        n_queries: n,
        excluded,
        map,
        mrr,
        recall_at,
        tr5: top5 as f64 / all_pos as f64,
        p5: top5 as f64 / (5.0 * nf),
        max_tr5: max_tr5(&counts),
    }
}

impl MetricsReport {
    /// Structured text, metric values as percentages.
    pub fn to_text(&self, title: &str) -> String {
        let mut s = String::new();
        writeln!(s, "[{title}]").unwrap();
        writeln!(s, "queries = {}", self.n_queries).unwrap();
        writeln!(s, "excluded = {}", self.excluded.len()).unwrap();
        writeln!(s, "mAP = {:.2}", 100.0 * self.map).unwrap();
        writeln!(s, "MRR = {:.2}", 100.0 * self.mrr).unwrap();
        for (k, v) in &self.recall_at {
            writeln!(s, "R@{k} = {:.2}", 100.0 * v).unwrap();
        }
        writeln!(s, "tR@5 = {:.2}", 100.0 * self.tr5).unwrap();
        writeln!(s, "P@5 = {:.2}", 100.0 * self.p5).unwrap();
        writeln!(s, "max tR@5 = {:.2}", 100.0 * self.max_tr5).unwrap();
        s
    }

    pub fn table_header(ks: &[usize]) -> String {
        let mut cols = vec!["arm".to_string(), "queries".into(), "mAP".into(), "MRR".into()];
        cols.extend(ks.iter().map(|k| format!("R@{k}")));
        cols.extend(["tR@5".into(), "P@5".into()]);
        cols.join("\t")
    }

    /// Tab-separated row matching [`MetricsReport::table_header`].
    pub fn table_row(&self, arm: &str) -> String {
        let mut cols = vec![
            arm.to_string(),
            self.n_queries.to_string(),
            format!("{:.2}", 100.0 * self.map),
            format!("{:.2}", 100.0 * self.mrr),
        ];
        cols.extend(self.recall_at.values().map(|v| format!("{:.2}", 100.0 * v)));
        cols.push(format!("{:.2}", 100.0 * self.tr5));
        cols.push(format!("{:.2}", 100.0 * self.p5));
        cols.join("\t")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(id: &str, ranking: &[&str], positives: &[&str]) -> QueryOutcome {
        QueryOutcome {
            query_id: id.into(),
            ranking: ranking.iter().map(|s| s.to_string()).collect(),
            positives: positives.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn single_query_at_rank_one() {
        let r = compute_metrics(&[outcome("q", &["a", "b"], &["a"])], &[1, 5]);
        assert_eq!(r.mrr, 1.0);
        assert_eq!(r.recall_at[&5], 1.0);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn mrr_of_ranks_two_and_four() {
        let r = compute_metrics(
            &[
                outcome("q1", &["x", "a", "y", "z"], &["a"]),
                outcome("q2", &["x", "y", "z", "b"], &["b"]),
            ],
            &[1],
        );
        assert_eq!(r.mrr, 0.375);
    }

    #[test]
    fn zero_positive_queries_are_excluded() {
        let r = compute_metrics(&[outcome("q1", &["a"], &["a"]), outcome("q2", &["a"], &[])], &[1]);
        assert_eq!(r.n_queries, 1);
        assert_eq!(r.excluded, vec!["q2"]);
        assert_eq!(r.mrr, 1.0);
    }

    #[test]
    fn many_positives_cap_tr5() {
        let ids: Vec<String> = (0..8).map(|i| format!("m{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let r = compute_metrics(&[outcome("q", &refs, &refs)], &[5]);
        assert_eq!(r.tr5, 5.0 / 8.0);
        assert_eq!(r.max_tr5, 5.0 / 8.0);
        assert_eq!(r.p5, 1.0);
        assert!(r.to_text("x").contains("tR@5 = 62.50"));
    }
}
