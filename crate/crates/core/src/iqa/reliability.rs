//! Blend-path monotonicity: a scorer is reliable on a pair when its score
//! strictly decreases as the clean image is blended toward the degraded one.

use std::io::{Read, Write};

use super::{IqaError, QualityScorer, Result};
use crate::imaging::{alpha_blend, Image};

/// `α_i = 0.1·i` for `i = 1..=10`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=10).map(|i| 0.1 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityReport {
    pub scorer_name: String,
    pub num_pairs: usize,
    pub reliability: f64,
    pub per_pair_monotone: Vec<bool>,
    pub alpha_grid: Vec<f64>,
    pub pair_ids: Vec<String>,
    /// `scores[p][i]` is the score of pair `p` blended at `alpha_grid[i]`.
    pub scores: Vec<Vec<f64>>,
}

/// Scores every pair along the blend path `alpha·degraded + (1 − alpha)·clean`.
pub fn monotonicity_reliability(
    scorer: &dyn QualityScorer,
    pairs: &[(Image, Image)],
    alpha_grid: &[f64],
) -> Result<ReliabilityReport> {
    monotonicity_reliability_with(scorer.name(), pairs, alpha_grid, |_, z| scorer.score(z))
}

/// Same analysis with a scoring closure that also receives the pair index.
pub fn monotonicity_reliability_with(
    scorer_name: &str,
    pairs: &[(Image, Image)],
    alpha_grid: &[f64],
    mut score: impl FnMut(usize, &Image) -> Result<f64>,
) -> Result<ReliabilityReport> {
    if pairs.is_empty() {
        return Err(IqaError::EmptyCorpus);
    }
    validate_grid(alpha_grid)?;
    for (i, (x, y)) in pairs.iter().enumerate() {
        if x.dims() != y.dims() {
            return Err(IqaError::DimensionMismatch(format!("pair {i}: {:?} vs {:?}", x.dims(), y.dims())));
        }
    }
    let mut scores = Vec::with_capacity(pairs.len());
    let mut monotone = Vec::with_capacity(pairs.len());
    for (p, (x, y)) in pairs.iter().enumerate() {
        let mut s = Vec::with_capacity(alpha_grid.len());
        for &a in alpha_grid {
            let v = score(p, &alpha_blend(x, y, a)?)?;
            if !v.is_finite() {
                return Err(IqaError::NonFinite(scorer_name.to_string()));
            }
            s.push(v);
        }
        monotone.push(s.windows(2).all(|w| w[0] > w[1]));
        scores.push(s);
    }
    let hits = monotone.iter().filter(|m| **m).count();
    Ok(ReliabilityReport {
        scorer_name: scorer_name.to_string(),
        num_pairs: pairs.len(),
        reliability: hits as f64 / pairs.len() as f64,
        per_pair_monotone: monotone,
        alpha_grid: alpha_grid.to_vec(),
        pair_ids: (0..pairs.len()).map(|i| i.to_string()).collect(),
        scores,
    })
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(IqaError::InvalidAlphaGrid("needs at least two points".into()));
    }
    if grid.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
        return Err(IqaError::InvalidAlphaGrid("points must lie in (0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(IqaError::InvalidAlphaGrid("points must be strictly increasing".into()));
    }
    Ok(())
}

impl ReliabilityReport {
    pub fn with_pair_ids(mut self, ids: Vec<String>) -> Self {
        assert_eq!(ids.len(), self.num_pairs, "one id per pair");
        self.pair_ids = ids;
        self
    }

    /// One row per pair (`pair_id,s_1..s_n,monotone`) and a final `ALL` row
    /// holding the mean score per grid point and the reliability.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["pair_id".to_string()];
        header.extend((1..=self.alpha_grid.len()).map(|i| format!("s_{i}")));
        header.push("monotone".into());
        w.write_record(&header).map_err(csv_err)?;
        for ((id, s), m) in self.pair_ids.iter().zip(&self.scores).zip(&self.per_pair_monotone) {
            let mut row = vec![id.clone()];
            row.extend(s.iter().map(|v| v.to_string()));
            row.push(if *m { "1" } else { "0" }.into());
            w.write_record(&row).map_err(csv_err)?;
        }
        let mut summary = vec!["ALL".to_string()];
        for i in 0..self.alpha_grid.len() {
            let mean = self.scores.iter().map(|s| s[i]).sum::<f64>() / self.num_pairs as f64;
            summary.push(mean.to_string());
        }
        summary.push(self.reliability.to_string());
        w.write_record(&summary).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }

    /// Parses the CSV form back; the scorer name and alpha grid are not part of the file.
    pub fn read_csv<R: Read>(input: R, scorer_name: &str, alpha_grid: &[f64]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let n = alpha_grid.len();
        let bad = |m: &str| IqaError::MalformedReport(m.to_string());
        if r.headers().map_err(csv_err)?.len() != n + 2 {
            return Err(bad("column count does not match the alpha grid"));
        }
        let mut pair_ids = Vec::new();
        let mut scores = Vec::new();
        let mut monotone = Vec::new();
        let mut reliability = None;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let nums = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
                range.map(|i| rec[i].parse().map_err(|_| bad("non-numeric score"))).collect()
            };
            if &rec[0] == "ALL" {
                reliability = Some(rec[n + 1].parse().map_err(|_| bad("bad reliability"))?);
                continue;
            }
            pair_ids.push(rec[0].to_string());
            scores.push(nums(1..n + 1)?);
            monotone.push(match &rec[n + 1] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("monotone flag must be 0 or 1")),
            });
        }
        let reliability = reliability.ok_or_else(|| bad("missing summary row"))?;
        Ok(Self {
            scorer_name: scorer_name.to_string(),
            num_pairs: pair_ids.len(),
            reliability,
            per_pair_monotone: monotone,
            alpha_grid: alpha_grid.to_vec(),
            pair_ids,
            scores,
        })
    }
}

fn csv_err(e: csv::Error) -> IqaError {
    IqaError::MalformedReport(e.to_string())
}
