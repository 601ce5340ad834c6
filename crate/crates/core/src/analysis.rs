//! Attention logs and the analyses run over them: per-cell brake and
//! attention maps, and the rank correlation between the number of cars on
//! the road and the number of cars being attended to.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One receiver's view of one communication round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub episode: u64,
    pub t: usize,
    pub round: usize,
    pub receiver: usize,
    /// Weight on each sender slot; empty when communication is disabled.
    pub weights: Vec<f64>,
    pub gates: Vec<bool>,
    pub positions: Vec<Option<(usize, usize)>>,
    pub alive: Vec<bool>,
    pub action: usize,
    pub action_probs: Vec<f64>,
}

impl AttentionRecord {
    /// Weights are non-negative, zero on closed or inactive senders, and sum
    /// to one whenever any sender is open.
    pub fn validate(&self) -> Result<()> {
        let n = self.alive.len();
        let bad = |m: String| Err(Error::Contract(format!("episode {} t {}: {m}", self.episode, self.t)));
        if self.gates.len() != n || self.positions.len() != n || self.receiver >= n {
            return bad("slot vectors disagree in length".into());
        }
        if !self.action_probs.is_empty() && (self.action_probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad("action probabilities do not sum to 1".into());
        }
        if self.weights.is_empty() {
            return Ok(());
        }
        if self.weights.len() != n {
            return bad(format!("{} weights for {n} slots", self.weights.len()));
        }
        let open: Vec<bool> = self.alive.iter().zip(&self.gates).map(|(&a, &g)| a && g).collect();
        for (j, &w) in self.weights.iter().enumerate() {
            if w < 0.0 || (!open[j] && w > 1e-6) {
                return bad(format!("weight {w} on sender {j}"));
            }
        }
        let sum: f64 = self.weights.iter().sum();
        if open.iter().any(|&o| o) && (sum - 1.0).abs() > 1e-6 {
            return bad(format!("weights sum to {sum}"));
        }
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(out: &mut impl Write, record: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_attention_jsonl(path: &Path) -> Result<Vec<AttentionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialKind {
    /// Mean probability of the brake action of cars at each cell.
    Brake,
    /// Mean attention weight received by cars at each cell.
    Attention,
}

/// Per-cell means over a `width × height` grid; `None` where nothing was seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<Option<f64>>,
}

impl Grid {
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.cells[y * self.width + x]
    }

    /// One CSV line per grid row; unseen cells are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for y in 0..self.height {
            let line: Vec<String> = (0..self.width)
                .map(|x| self.get(x, y).map_or_else(String::new, |v| v.to_string()))
                .collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Brake maps use round-0 records only so each decision counts once.
/// Attention maps average, per sender cell, the weights all alive
/// receivers put on that sender, optionally restricted to one round.
pub fn spatial_grid(
    records: &[AttentionRecord],
    kind: SpatialKind,
    width: usize,
    height: usize,
    brake_action: usize,
    round: Option<usize>,
) -> Result<Grid> {
    if records.is_empty() {
        return Err(Error::Contract("empty attention log".into()));
    }
    let mut sum = vec![0.0; width * height];
    let mut count = vec![0usize; width * height];
    let mut add = |pos: (usize, usize), v: f64| -> Result<()> {
        if pos.0 >= width || pos.1 >= height {
            return Err(Error::Contract(format!("position {pos:?} outside {width}×{height}")));
        }
        sum[pos.1 * width + pos.0] += v;
        count[pos.1 * width + pos.0] += 1;
        Ok(())
    };
    for r in records {
        match kind {
            SpatialKind::Brake => {
                if r.round != 0 {
                    continue;
                }
                let p = r
                    .action_probs
                    .get(brake_action)
                    .ok_or_else(|| Error::Contract("record has no brake probability".into()))?;
                if let Some(pos) = r.positions[r.receiver] {
                    add(pos, *p)?;
                }
            }
            SpatialKind::Attention => {
                if round.is_some_and(|k| k != r.round) || r.weights.is_empty() {
                    continue;
                }
                for (j, &w) in r.weights.iter().enumerate() {
                    if let (true, Some(pos)) = (r.alive[j], r.positions[j]) {
                        add(pos, w)?;
                    }
                }
            }
        }
    }
    let cells = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(Grid { width, height, cells })
}

/// Per-timestep counts for one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountSeries {
    pub episode: u64,
    pub t: Vec<usize>,
    /// Cars alive at each timestep.
    pub alive: Vec<usize>,
    /// Cars receiving more than `threshold` attention from another car.
    pub attended: Vec<usize>,
}

/// Builds per-episode series from round-0 records. Self-attention does not
/// count as attending to a car.
pub fn count_series(records: &[AttentionRecord], threshold: f64) -> Vec<CountSeries> {
    let mut by_step: BTreeMap<(u64, usize), (usize, Vec<bool>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.round == 0) {
        let entry = by_step
            .entry((r.episode, r.t))
            .or_insert_with(|| (r.alive.iter().filter(|&&a| a).count(), vec![false; r.alive.len()]));
        for (j, &w) in r.weights.iter().enumerate() {
            if j != r.receiver && w > threshold {
                entry.1[j] = true;
            }
        }
    }
    let mut out: Vec<CountSeries> = Vec::new();
    for ((episode, t), (alive, attended)) in by_step {
        if out.last().map_or(true, |s| s.episode != episode) {
            out.push(CountSeries {
                episode,
                t: Vec::new(),
                alive: Vec::new(),
                attended: Vec::new(),
            });
        }
        let s = out.last_mut().expect("just pushed");
        s.t.push(t);
        s.alive.push(alive);
        s.attended.push(attended.iter().filter(|&&a| a).count());
    }
    out
}

/// Fractional ranks (1-based), ties receiving their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman's rank correlation; `None` when undefined.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub threshold: f64,
    pub shift: usize,
    pub pairs: usize,
    /// `None` when a series is constant.
    pub rho: Option<f64>,
}

/// Pairs the alive count at `t` with the attended count at `t + shift`
/// within each episode and correlates the pooled pairs.
pub fn attended_correlation(records: &[AttentionRecord], threshold: f64, shift: usize) -> Result<CorrelationReport> {
    let series = count_series(records, threshold);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for s in &series {
        let by_t: BTreeMap<usize, usize> = s.t.iter().copied().zip(s.attended.iter().copied()).collect();
        for (k, &t) in s.t.iter().enumerate() {
            if let Some(&att) = by_t.get(&(t + shift)) {
                a.push(s.alive[k] as f64);
                b.push(att as f64);
            }
        }
    }
    if a.len() < 2 {
        return Err(Error::Contract("correlation needs at least two timesteps".into()));
    }
    Ok(CorrelationReport {
        threshold,
        shift,
        pairs: a.len(),
        rho: spearman(&a, &b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(episode: u64, t: usize, receiver: usize, weights: Vec<f64>, alive: Vec<bool>) -> AttentionRecord {
        let n = alive.len();
        AttentionRecord {
            episode,
            t,
            round: 0,
            receiver,
            weights,
            gates: vec![true; n],
            positions: (0..n).map(|i| Some((i, 0))).collect(),
            alive,
            action: 0,
            action_probs: vec![0.5, 0.5],
        }
    }

    #[test]
    fn always_braking_car_fills_one_cell() {
        let mut r = record(0, 0, 0, vec![1.0], vec![true]);
        r.positions = vec![Some((3, 3))];
        r.action_probs = vec![0.0, 1.0];
        let recs = vec![r.clone(), r];
        let g = spatial_grid(&recs, SpatialKind::Brake, 7, 7, 1, None).unwrap();
        assert_eq!(g.get(3, 3), Some(1.0));
        assert_eq!(g.cells.iter().filter(|c| c.is_some()).count(), 1);
    }

    #[test]
    fn uniform_attention_spreads_evenly() {
        let k = 4;
        let recs: Vec<_> = (0..k).map(|i| record(0, 0, i, vec![0.25; k], vec![true; k])).collect();
        let g = spatial_grid(&recs, SpatialKind::Attention, 4, 1, 1, None).unwrap();
        for x in 0..4 {
            assert!((g.get(x, 0).unwrap() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_log_is_an_error() {
        assert!(spatial_grid(&[], SpatialKind::Brake, 3, 3, 1, None).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn identical_and_reversed_series() {
        let a = [1.0, 4.0, 2.0, 8.0];
        assert!((spearman(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &rev).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_series_is_undefined() {
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    }

    #[test]
    fn attended_counts_skip_self_attention() {
        let recs = vec![
            record(0, 0, 0, vec![0.9, 0.05, 0.05], vec![true, true, true]),
            record(0, 0, 1, vec![0.5, 0.5, 0.0], vec![true, true, true]),
        ];
        let s = count_series(&recs, 0.1);
        assert_eq!(s[0].alive, vec![3]);
        // receiver 1 attends to car 0; receiver 0 only to itself
        assert_eq!(s[0].attended, vec![1]);
    }

    #[test]
    fn shift_pairs_within_episodes() {
        let mut recs = Vec::new();
        for t in 0..5 {
            let n = t + 2;
            let mut w = vec![0.0; 8];
            // receiver 0 attends to t+1 others
            for j in 1..n {
                w[j] = 1.0 / (n - 1) as f64;
            }
            let alive: Vec<bool> = (0..8).map(|j| j < n).collect();
            recs.push(record(0, t, 0, w, alive));
        }
        let r0 = attended_correlation(&recs, 0.0, 0).unwrap();
        assert_eq!(r0.pairs, 5);
        assert!((r0.rho.unwrap() - 1.0).abs() < 1e-12);
        let r2 = attended_correlation(&recs, 0.0, 2).unwrap();
        assert_eq!(r2.pairs, 3);
        assert!(attended_correlation(&recs[..1], 0.0, 0).is_err());
    }

    #[test]
    fn validation_catches_bad_rows() {
        let good = record(0, 0, 0, vec![0.5, 0.5], vec![true, true]);
        assert!(good.validate().is_ok());
        let mut masked = record(0, 0, 0, vec![0.5, 0.5], vec![true, false]);
        assert!(masked.validate().is_err());
        masked.weights = vec![1.0, 0.0];
        assert!(masked.validate().is_ok());
        let unnormalized = record(0, 0, 0, vec![0.5, 0.4], vec![true, true]);
        assert!(unnormalized.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let recs = vec![record(1, 2, 0, vec![1.0, 0.0], vec![true, false])];
        let mut f = File::create(&path).unwrap();
        for r in &recs {
            write_jsonl(&mut f, r).unwrap();
        }
        drop(f);
        assert_eq!(read_attention_jsonl(&path).unwrap(), recs);
    }
}
