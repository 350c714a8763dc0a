use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ConflictReport, TerminalId, VersionKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    SafeOnServer,
    RecoverableFromPeers,
    Lost,
}

impl Outcome {
    pub fn is_restorable(self) -> bool {
        self != Outcome::Lost
    }
}

/// Why an item was evaluated when it was.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    /// The owner failed and tried to restore.
    Restore,
    Expired,
    Superseded,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub item: VersionKey,
    pub owner: TerminalId,
    pub priority: f64,
    pub outcome: Outcome,
    pub evaluation: Evaluation,
    /// Owner's composite estimate: at failure time for restores, otherwise
    /// at evaluation time.
    pub predicted: f64,
    pub fragments_saved: u8,
    pub evaluated_at: f64,
}

impl ItemOutcome {
    /// Whether the owner actually lost its own copy.
    pub fn exposed(&self) -> bool {
        self.evaluation == Evaluation::Restore
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandLoss {
    pub low: f64,
    pub high: f64,
    pub exposed: u64,
    pub lost: u64,
    pub loss_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancySample {
    pub time: f64,
    pub used_bytes: u64,
    pub quota_bytes: u64,
}

/// A failure-then-restore episode: what the owner predicted, what happened.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub predicted: f64,
    pub restored: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub encounters: u64,
    pub internet_windows: u64,
    pub failures: u64,
    pub restores: u64,
    pub peer_saves: u64,
    pub peer_refusals: u64,
    pub peer_deletions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub horizon: f64,
    pub peer_backup: bool,
    pub items_total: u64,
    pub safe_on_server: u64,
    pub recoverable_from_peers: u64,
    pub lost: u64,
    /// Items whose owner failed before they were otherwise settled.
    pub items_exposed: u64,
    pub exposed_lost: u64,
    /// `exposed_lost / items_exposed`; 0 when nothing was exposed.
    pub loss_ratio: f64,
    /// `lost / items_total`: share of items with no restorable copy at
    /// evaluation time, whether or not the owner failed.
    pub unprotected_ratio: f64,
    pub loss_ratio_by_band: Vec<BandLoss>,
    pub mean_fragments_per_item: f64,
    pub peer_bytes: u64,
    pub owner_upload_bytes: u64,
    pub peer_flush_bytes: u64,
    pub server_bytes: u64,
    pub counters: Counters,
    pub conflict_count: u64,
    pub conflicts: Vec<ConflictReport>,
    pub payload_checks: u64,
    pub payload_mismatches: u64,
    pub occupancy: Vec<OccupancySample>,
    pub calibration: Vec<CalibrationPair>,
    pub items: Vec<ItemOutcome>,
}

pub const PRIORITY_BANDS: [(f64, f64); 4] = [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)];

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    /// Builds the summary fields from per-item outcomes.
    pub(crate) fn from_items(seed: u64, horizon: f64, peer_backup: bool, mut items: Vec<ItemOutcome>) -> Self {
        items.sort_by_key(|i| (i.owner, i.item));
        let count = |o: Outcome| items.iter().filter(|i| i.outcome == o).count() as u64;
        let exposed: Vec<&ItemOutcome> = items.iter().filter(|i| i.exposed()).collect();
        let exposed_lost = exposed.iter().filter(|i| i.outcome == Outcome::Lost).count() as u64;
        let lost = count(Outcome::Lost);
        let bands = PRIORITY_BANDS
            .iter()
            .enumerate()
            .map(|(b, &(low, high))| {
                let last = b + 1 == PRIORITY_BANDS.len();
                let in_band: Vec<&&ItemOutcome> = exposed
                    .iter()
                    .filter(|i| i.priority >= low && (i.priority < high || (last && i.priority <= high)))
                    .collect();
                let band_lost = in_band.iter().filter(|i| i.outcome == Outcome::Lost).count() as u64;
                let n = in_band.len() as u64;
                BandLoss {
                    low,
                    high,
                    exposed: n,
                    lost: band_lost,
                    loss_ratio: (n > 0).then(|| ratio(band_lost, n)),
                }
            })
            .collect();
        let mean_fragments = if items.is_empty() {
            0.0
        } else {
            items.iter().map(|i| f64::from(i.fragments_saved)).sum::<f64>() / items.len() as f64
        };
        let calibration = exposed
            .iter()
            .map(|i| CalibrationPair {
                predicted: i.predicted,
                restored: i.outcome.is_restorable(),
            })
            .collect();
        MetricsReport {
            seed,
            horizon,
            peer_backup,
            items_total: items.len() as u64,
            safe_on_server: count(Outcome::SafeOnServer),
            recoverable_from_peers: count(Outcome::RecoverableFromPeers),
            lost,
            items_exposed: exposed.len() as u64,
            exposed_lost,
            loss_ratio: ratio(exposed_lost, exposed.len() as u64),
            unprotected_ratio: ratio(lost, items.len() as u64),
            loss_ratio_by_band: bands,
            mean_fragments_per_item: mean_fragments,
            peer_bytes: 0,
            owner_upload_bytes: 0,
            peer_flush_bytes: 0,
            server_bytes: 0,
            counters: Counters::default(),
            conflict_count: 0,
            conflicts: Vec::new(),
            payload_checks: 0,
            payload_mismatches: 0,
            occupancy: Vec::new(),
            calibration,
            items,
        }
    }

    /// Named scalar metrics, the quantities batches aggregate.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: f64| {
            m.insert(k.to_string(), v);
        };
        put("items_total", self.items_total as f64);
        put("safe_on_server", self.safe_on_server as f64);
        put("recoverable_from_peers", self.recoverable_from_peers as f64);
        put("lost", self.lost as f64);
        put("items_exposed", self.items_exposed as f64);
        put("exposed_lost", self.exposed_lost as f64);
        put("loss_ratio", self.loss_ratio);
        put("unprotected_ratio", self.unprotected_ratio);
        put("mean_fragments_per_item", self.mean_fragments_per_item);
        put("peer_bytes", self.peer_bytes as f64);
        put("server_bytes", self.server_bytes as f64);
        put("conflict_count", self.conflict_count as f64);
        put("payload_mismatches", self.payload_mismatches as f64);
        for b in &self.loss_ratio_by_band {
            if let Some(r) = b.loss_ratio {
                put(&format!("loss_ratio_band_{:.2}_{:.2}", b.low, b.high), r);
            }
        }
        m
    }
}

/// Mean and normal-approximation 95% interval of one metric over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Replications in which the metric was defined.
    pub n: u64,
    pub mean: f64,
    pub std_err: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

impl MetricSummary {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        MetricSummary {
            n: n as u64,
            mean,
            std_err,
            ci95_low: mean - 1.96 * std_err,
            ci95_high: mean + 1.96 * std_err,
        }
    }

    pub fn width(&self) -> f64 {
        self.ci95_high - self.ci95_low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub base_seed: u64,
    pub replications: u64,
    pub metrics: BTreeMap<String, MetricSummary>,
    /// Calibration pairs pooled over all replications.
    pub calibration: Vec<CalibrationPair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub low: f64,
    pub high: f64,
    pub count: u64,
    pub predicted_mean: f64,
    pub realized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub episodes: u64,
    /// Set when there were no episodes to bin.
    pub empty: bool,
    /// Occupied bins only, in ascending order.
    pub bins: Vec<CalibrationBin>,
}

impl Calibration {
    pub fn max_gap(&self) -> f64 {
        self.bins
            .iter()
            .map(|b| (b.predicted_mean - b.realized).abs())
            .fold(0.0, f64::max)
    }
}

/// Bins episodes by predicted success into `bins` equal-width bins over
/// [0, 1] (the last bin is closed) and compares with realized frequency.
pub fn calibration_check(pairs: &[CalibrationPair], bins: usize) -> Calibration {
    let bins = bins.max(1);
    let mut acc: Vec<(u64, f64, u64)> = vec![(0, 0.0, 0); bins];
    for p in pairs {
        let b = ((p.predicted * bins as f64).floor() as usize).min(bins - 1);
        acc[b].0 += 1;
        acc[b].1 += p.predicted;
        acc[b].2 += u64::from(p.restored);
    }
    Calibration {
        episodes: pairs.len() as u64,
        empty: pairs.is_empty(),
        bins: acc
            .into_iter()
            .enumerate()
            .filter(|(_, (n, _, _))| *n > 0)
            .map(|(b, (n, sum, hits))| CalibrationBin {
                low: b as f64 / bins as f64,
                high: (b + 1) as f64 / bins as f64,
                count: n,
                predicted_mean: sum / n as f64,
                realized: hits as f64 / n as f64,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(version: u64, priority: f64, outcome: Outcome, evaluation: Evaluation) -> ItemOutcome {
        ItemOutcome {
            item: VersionKey::new(1, version),
            owner: TerminalId(0),
            priority,
            outcome,
            evaluation,
            predicted: 0.5,
            fragments_saved: 2,
            evaluated_at: 0.0,
        }
    }

    #[test]
    fn summary_counts_partition_items() {
        let r = MetricsReport::from_items(
            1,
            10.0,
            true,
            vec![
                outcome(1, 0.1, Outcome::Lost, Evaluation::Restore),
                outcome(2, 0.9, Outcome::RecoverableFromPeers, Evaluation::Restore),
                outcome(3, 1.0, Outcome::Lost, Evaluation::Horizon),
                outcome(4, 0.6, Outcome::SafeOnServer, Evaluation::Superseded),
            ],
        );
        assert_eq!(r.safe_on_server + r.recoverable_from_peers + r.lost, r.items_total);
        assert_eq!(r.items_exposed, 2);
        assert_eq!(r.loss_ratio, 0.5);
        assert_eq!(r.unprotected_ratio, 0.5);
        assert_eq!(r.loss_ratio_by_band[0].loss_ratio, Some(1.0));
        assert_eq!(r.loss_ratio_by_band[3].loss_ratio, Some(0.0));
        assert_eq!(r.loss_ratio_by_band[1].loss_ratio, None);
        assert_eq!(r.calibration.len(), 2);
    }

    #[test]
    fn single_sample_has_zero_width() {
        let s = MetricSummary::from_samples(&[0.3]);
        assert_eq!((s.mean, s.std_err, s.width()), (0.3, 0.0, 0.0));
    }

    #[test]
    fn calibration_bins() {
        let pairs = [
            CalibrationPair { predicted: 1.0, restored: true },
            CalibrationPair { predicted: 0.95, restored: false },
            CalibrationPair { predicted: 0.05, restored: false },
        ];
        let c = calibration_check(&pairs, 10);
        assert_eq!(c.bins.len(), 2);
        assert_eq!(c.bins[1].count, 2);
        assert_eq!(c.bins[1].realized, 0.5);
        assert!(calibration_check(&[], 10).empty);
    }
}
