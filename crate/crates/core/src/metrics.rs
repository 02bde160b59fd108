//! Identification metrics: rank-one accuracy, per-class Recall@K, CMC
//! curves, multi-run aggregation, and their CSV/SVG outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A query: class scores and the true class.
pub type Query = (Vec<f64>, usize);

fn check_queries(scores: &[Query]) -> Result<usize> {
    let first = scores.first().ok_or_else(|| Error::Input("no queries".into()))?;
    let c = first.0.len();
    if c == 0 {
        return Err(Error::Input("empty score vector".into()));
    }
    for (i, (s, y)) in scores.iter().enumerate() {
        if s.len() != c {
            return Err(Error::Input(format!("query {i} has {} scores, expected {c}", s.len())));
        }
        if *y >= c {
            return Err(Error::Input(format!(
                "query {i}: class {y} out of range for {c} classes"
            )));
        }
    }
    Ok(c)
}

/// Rank of the true class, counting every class scored at least as high
/// (ties resolve to the worst tied position).
pub fn true_rank(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    scores.iter().filter(|&&s| s >= t).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmcResult {
    /// Index k−1 holds Recall@k.
    pub recall_at_k: Vec<f64>,
    pub num_queries: usize,
    pub num_classes: usize,
    /// Run identifiers folded into this curve.
    pub runs: Vec<u64>,
}

impl CmcResult {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at_k[k - 1]
    }
}

/// Full CMC curve, Recall@K averaged per class, for K = 1..num_classes.
pub fn cmc(scores: &[Query], run: u64) -> Result<CmcResult> {
    let c = check_queries(scores)?;
    // hits[class][r-1]: queries of the class whose true rank is r
    let mut hits = vec![vec![0usize; c]; c];
    let mut counts = vec![0usize; c];
    for (s, y) in scores {
        hits[*y][true_rank(s, *y) - 1] += 1;
        counts[*y] += 1;
    }
    if let Some(absent) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("class {absent} has no queries")));
    }
    let mut curve = vec![0.0; c];
    for (h, &n) in hits.iter().zip(&counts) {
        let mut cum = 0;
        for (k, &v) in h.iter().enumerate() {
            cum += v;
            curve[k] += cum as f64 / n as f64;
        }
    }
    curve.iter_mut().for_each(|v| *v /= c as f64);
    // cumulative sums of exact fractions can land a hair above 1
    if let Some(last) = curve.last_mut() {
        *last = 1.0;
    }
    curve.iter_mut().for_each(|v| *v = v.min(1.0));
    Ok(CmcResult {
        recall_at_k: curve,
        num_queries: scores.len(),
        num_classes: c,
        runs: vec![run],
    })
}

pub fn recall_at_k(scores: &[Query], k: usize) -> Result<f64> {
    let c = check_queries(scores)?;
    if k == 0 || k > c {
        return Err(Error::Input(format!("K = {k} outside 1..={c}")));
    }
    Ok(cmc(scores, 0)?.recall(k))
}

/// Query-weighted fraction whose top-scored class (lowest index on ties)
/// is the true class.
pub fn rank_one_accuracy(scores: &[Query]) -> Result<f64> {
    check_queries(scores)?;
    let hits = scores
        .iter()
        .filter(|(s, y)| {
            let mut best = 0;
            for (i, &v) in s.iter().enumerate() {
                if v > s[best] {
                    best = i;
                }
            }
            best == *y
        })
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCmc {
    pub mean: Vec<f64>,
    /// Population standard deviation per K.
    pub std: Vec<f64>,
    pub runs: Vec<u64>,
}

pub fn aggregate_runs(results: &[CmcResult]) -> Result<AggregateCmc> {
    let first = results
        .first()
        .ok_or_else(|| Error::Input("no runs to aggregate".into()))?;
    let c = first.num_classes;
    if let Some(r) = results.iter().find(|r| r.num_classes != c) {
        return Err(Error::Input(format!(
            "runs disagree on class count: {c} vs {}",
            r.num_classes
        )));
    }
    let n = results.len() as f64;
    let mean: Vec<f64> = (0..c)
        .map(|k| results.iter().map(|r| r.recall_at_k[k]).sum::<f64>() / n)
        .collect();
    let std = (0..c)
        .map(|k| {
            let var = results
                .iter()
                .map(|r| (r.recall_at_k[k] - mean[k]).powi(2))
                .sum::<f64>()
                / n;
            var.sqrt()
        })
        .collect();
    Ok(AggregateCmc {
        mean,
        std,
        runs: results.iter().flat_map(|r| r.runs.iter().copied()).collect(),
    })
}

/// Population mean and standard deviation of scalar values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub curve_name: String,
    pub k: usize,
    pub recall: f64,
    pub std: f64,
}

const METRIC_HEADER: &str = "run_id,curve_name,K,recall,std";

/// Metric CSV text. `std` is the population standard deviation over the
/// runs of an aggregate row and 0 for single runs.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRIC_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.run_id, r.curve_name, r.k, r.recall, r.std);
    }
    s
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricRow>> {
    let bad = |line: usize, why: &str| Error::Format {
        path: path.to_path_buf(),
        reason: format!("line {line}: {why}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRIC_HEADER => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 fields"));
        }
        rows.push(MetricRow {
            run_id: f[0].to_string(),
            curve_name: f[1].to_string(),
            k: f[2].parse().map_err(|_| bad(i + 1, "bad K"))?,
            recall: f[3].parse().map_err(|_| bad(i + 1, "bad recall"))?,
            std: f[4].parse().map_err(|_| bad(i + 1, "bad std"))?,
        });
    }
    Ok(rows)
}

/// Rows for one curve; `std` may be empty for a single run.
pub fn curve_rows(run_id: &str, name: &str, recall: &[f64], std: &[f64]) -> Vec<MetricRow> {
    recall
        .iter()
        .enumerate()
        .map(|(i, &r)| MetricRow {
            run_id: run_id.to_string(),
            curve_name: name.to_string(),
            k: i + 1,
            recall: r,
            std: std.get(i).copied().unwrap_or(0.0),
        })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Standalone SVG with one polyline per named curve (Recall@K vs K).
pub fn cmc_svg(curves: &[(String, Vec<f64>)]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::Input("no curves to plot".into()));
    }
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 180.0, 20.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let kmax = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(1).max(2);
    let ymin = curves
        .iter()
        .flat_map(|(_, c)| c.iter().copied())
        .fold(1.0f64, f64::min)
        .min(0.9);
    let ymin = (ymin * 10.0).floor() / 10.0;
    let x = |k: usize| left + pw * (k - 1) as f64 / (kmax - 1) as f64;
    let y = |r: f64| top + ph * (1.0 - (r - ymin) / (1.0 - ymin));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let r = ymin + (1.0 - ymin) * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">{:.2}</text>"#,
            left - 6.0,
            y(r) + 4.0,
            r
        );
    }
    for k in 1..=kmax {
        if kmax <= 20 || k == 1 || k % 5 == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" font-size="11" text-anchor="middle">{k}</text>"#,
                x(k),
                top + ph + 16.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" font-size="13" text-anchor="middle">Rank K</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">Recall@K</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve
            .iter()
            .enumerate()
            .map(|(k, &r)| format!("{:.2},{:.2}", x(k + 1), y(r)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_cmc_plot(curves: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    let svg = cmc_svg(curves)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(s: &[f64], y: usize) -> Query {
        (s.to_vec(), y)
    }

    #[test]
    fn hand_ranked_example() {
        let qs = [q(&[0.9, 0.1], 0), q(&[0.6, 0.4], 1)];
        assert_eq!(recall_at_k(&qs, 1).unwrap(), 0.5);
        assert_eq!(recall_at_k(&qs, 2).unwrap(), 1.0);
    }

    #[test]
    fn ties_take_the_worst_rank() {
        let qs = [q(&[0.5, 0.5], 0), q(&[0.5, 0.5], 1)];
        assert_eq!(recall_at_k(&qs, 1).unwrap(), 0.0);
        // argmax picks the lowest index
        assert_eq!(rank_one_accuracy(&qs).unwrap(), 0.5);
    }

    #[test]
    fn absent_class_is_named() {
        let qs = [q(&[0.9, 0.05, 0.05], 0), q(&[0.1, 0.8, 0.1], 1)];
        let err = recall_at_k(&qs, 1).unwrap_err();
        assert!(err.to_string().contains("class 2"), "{err}");
        assert!(recall_at_k(&qs[..1], 5).is_err());
    }

    #[test]
    fn rank_one_simple_cases() {
        let all = [q(&[1.0, 0.0], 0), q(&[0.0, 1.0], 1)];
        assert_eq!(rank_one_accuracy(&all).unwrap(), 1.0);
        let one = [
            q(&[1.0, 0.0], 0),
            q(&[1.0, 0.0], 1),
            q(&[1.0, 0.0], 1),
            q(&[1.0, 0.0], 1),
        ];
        assert_eq!(rank_one_accuracy(&one).unwrap(), 0.25);
    }

    #[test]
    fn imbalance_separates_query_and_class_weighting() {
        // class 0: 3 queries all right; class 1: 1 query wrong
        let qs = [
            q(&[0.9, 0.1], 0),
            q(&[0.8, 0.2], 0),
            q(&[0.7, 0.3], 0),
            q(&[0.6, 0.4], 1),
        ];
        assert_eq!(rank_one_accuracy(&qs).unwrap(), 0.75);
        assert_eq!(recall_at_k(&qs, 1).unwrap(), 0.5);
    }

    #[test]
    fn aggregation() {
        let run = |v: f64, id| CmcResult {
            recall_at_k: vec![v, 1.0],
            num_queries: 2,
            num_classes: 2,
            runs: vec![id],
        };
        let single = aggregate_runs(&[run(0.8, 0)]).unwrap();
        assert_eq!(single.mean, vec![0.8, 1.0]);
        assert_eq!(single.std, vec![0.0, 0.0]);
        let two = aggregate_runs(&[run(0.8, 0), run(1.0, 1)]).unwrap();
        assert!((two.mean[0] - 0.9).abs() < 1e-15);
        assert!((two.std[0] - 0.1).abs() < 1e-15);
        assert_eq!(two.runs, vec![0, 1]);
        let three = CmcResult {
            recall_at_k: vec![1.0; 3],
            num_queries: 3,
            num_classes: 3,
            runs: vec![2],
        };
        assert!(aggregate_runs(&[run(0.8, 0), three]).is_err());
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = curve_rows("mean", "score_sum", &[0.5, 0.75, 1.0], &[0.1, 0.0, 0.0]);
        let text = metrics_csv(&rows);
        assert!(text.starts_with("run_id,curve_name,K,recall,std\n"));
        assert_eq!(parse_metrics_csv(&text, Path::new("m.csv")).unwrap(), rows);
        assert!(parse_metrics_csv("a,b\n", Path::new("m.csv")).is_err());
    }

    #[test]
    fn svg_shape() {
        let svg = cmc_svg(&[("flat".into(), vec![1.0; 5])]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        // a flat curve at 1.0 sits on the top edge of the plot area
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts = line.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
        assert!(pts.split(' ').all(|p| p.ends_with(",20.00")), "{pts}");
        let two = cmc_svg(&[("a".into(), vec![0.5, 1.0]), ("b<c".into(), vec![0.7, 1.0])]).unwrap();
        assert_eq!(two.matches("<polyline").count(), 2);
        assert!(two.contains(">a</text>") && two.contains(">b&lt;c</text>"));
        assert!(cmc_svg(&[]).is_err());
    }
}
