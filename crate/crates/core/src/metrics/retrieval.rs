//! Identity retrieval score and ingestion of external preference votes.

use std::collections::BTreeMap;
use std::io::Read;

use crate::error::{Error, Result};

use super::EmbeddingSet;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn rows(s: &EmbeddingSet) -> Vec<Vec<f64>> {
    s.data.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Gallery indices sorted by descending cosine similarity to `query`; ties
/// keep gallery order.
pub fn rank_gallery(query: &[f64], gallery: &EmbeddingSet) -> Vec<usize> {
    let g = rows(gallery);
    let sims: Vec<f64> = g.iter().map(|r| cosine(query, r)).collect();
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&i, &j| sims[j].total_cmp(&sims[i]));
    idx
}

/// Fraction of queries whose label appears among the labels of the `k` most
/// similar gallery embeddings.
pub fn top_k_hit_score(queries: &EmbeddingSet, gallery: &EmbeddingSet, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Validation("top-k score needs k >= 1".into()));
    }
    if gallery.is_empty() || queries.is_empty() {
        return Err(Error::Validation("top-k score needs queries and a non-empty gallery".into()));
    }
    if queries.dim() != gallery.dim() {
        return Err(Error::Shape(format!("query width {} vs gallery width {}", queries.dim(), gallery.dim())));
    }
    let (Some(ql), Some(gl)) = (&queries.labels, &gallery.labels) else {
        return Err(Error::Validation("top-k score needs labelled queries and gallery".into()));
    };
    let hits = rows(queries)
        .iter()
        .zip(ql)
        .filter(|(q, label)| rank_gallery(q, gallery).iter().take(k).any(|&g| gl[g] == **label))
        .count();
    Ok(hits as f64 / queries.len() as f64)
}

/// Preference proportions from a votes CSV with a `choice` column (one row
/// per vote).
pub fn mos_preferences(reader: impl Read) -> Result<BTreeMap<String, f64>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(|e| Error::Serde(e.to_string()))?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == "choice")
        .ok_or_else(|| Error::Validation("votes CSV has no `choice` column".into()))?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Serde(e.to_string()))?;
        let choice = rec
            .get(col)
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Validation(format!("vote {} has no choice", total + 1)))?;
        *counts.entry(choice.to_string()).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::Validation("votes CSV is empty".into()));
    }
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / total as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labelled(rows: &[Vec<f64>], labels: &[&str]) -> EmbeddingSet {
        EmbeddingSet::from_rows(rows)
            .unwrap()
            .with_labels(labels.iter().map(|s| s.to_string()).collect())
            .unwrap()
    }

    #[test]
    fn self_match_scores_one() {
        let g = labelled(&[vec![1., 0.], vec![0., 1.], vec![1., 1.]], &["a", "b", "c"]);
        assert_eq!(top_k_hit_score(&g, &g, 1).unwrap(), 1.0);
    }

    #[test]
    fn exhaustive_window_checks_presence() {
        let g = labelled(&[vec![1., 0.], vec![0., 1.]], &["a", "b"]);
        let q = labelled(&[vec![1., 0.], vec![0.3, 0.2]], &["b", "z"]);
        assert_eq!(top_k_hit_score(&q, &g, 5).unwrap(), 0.5);
        assert!(top_k_hit_score(&q, &g, 0).is_err());
    }

    #[test]
    fn votes_to_proportions() {
        let csv = "rater,item,choice\n1,a,ours\n2,a,ours\n3,a,baseline\n4,b,ours\n";
        let p = mos_preferences(csv.as_bytes()).unwrap();
        assert_eq!(p["ours"], 0.75);
        assert_eq!(p["baseline"], 0.25);
        assert!(mos_preferences("rater,item\n1,a\n".as_bytes()).is_err());
    }
}
