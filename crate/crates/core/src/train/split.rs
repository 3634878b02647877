//! Leakage-free train/validation/test assignment.
//!
//! Each recording is cut into three contiguous blocks. Trials that would
//! share raw samples with an earlier block are dropped at every block
//! boundary, and block sizes are recomputed on the trials that survive, so
//! the fractions hold to within one trial.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AadError, Result};
use crate::synth::ManifestEntry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = AadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| AadError::invalid(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.75, validation: 0.125, test: 0.125 }
    }
}

impl SplitFractions {
    pub fn get(&self, s: Split) -> f64 {
        match s {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.validation, self.test];
        if all.iter().any(|f| !(0.0..=1.0).contains(f)) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AadError::invalid(format!("split fractions must be in [0, 1] and sum to 1, got {all:?}")));
        }
        if self.train == 0.0 {
            return Err(AadError::invalid("train fraction must be positive"));
        }
        Ok(())
    }

    /// Block sizes for `n` trials: train and validation rounded half up,
    /// test takes the rest.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let round = |x: f64| ((x + 0.5 + 1e-9).floor() as usize).min(n);
        let tr = round(self.train * n as f64);
        let va = round(self.validation * n as f64).min(n - tr);
        [tr, va, n - tr - va]
    }
}

/// Outcome for one recording.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecordingSplit {
    pub source: String,
    pub n_trials: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Boundary trials dropped to keep blocks disjoint.
    pub trimmed: usize,
    /// Set when the recording was too short and went wholly to train.
    pub note: Option<String>,
}

impl RecordingSplit {
    pub fn count(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    pub fn kept(&self) -> usize {
        self.train + self.validation + self.test
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    /// Per manifest position; `None` for trimmed trials.
    assignments: Vec<Option<Split>>,
    trials: Vec<usize>,
    pub recordings: Vec<RecordingSplit>,
}

impl SplitPlan {
    pub fn assignments(&self) -> &[Option<Split>] {
        &self.assignments
    }

    /// Container indices of the trials in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.assignments.iter().zip(&self.trials).filter(|(a, _)| **a == Some(split)).map(|(_, &t)| t).collect()
    }

    pub fn notes(&self) -> impl Iterator<Item = &str> {
        self.recordings.iter().filter_map(|r| r.note.as_deref())
    }

    /// Exhaustive pairwise check that no held-out trial shares raw samples
    /// with a train trial. Returns the number of pairs compared.
    pub fn check_disjoint(&self, manifest: &[ManifestEntry]) -> Result<u64> {
        if manifest.len() != self.assignments.len() {
            return Err(AadError::invalid("manifest does not match this plan"));
        }
        let pick = |s: Split| -> Vec<&ManifestEntry> {
            manifest.iter().zip(&self.assignments).filter(|(_, a)| **a == Some(s)).map(|(e, _)| e).collect()
        };
        let train = pick(Split::Train);
        let mut pairs = 0u64;
        for held in [Split::Validation, Split::Test] {
            for h in pick(held) {
                for t in &train {
                    pairs += 1;
                    if h.overlaps(t) {
                        return Err(AadError::Format(format!(
                            "{held} trial {} overlaps train trial {} in {}",
                            h.trial, t.trial, h.source
                        )));
                    }
                }
            }
        }
        Ok(pairs)
    }
}

/// Walks `order` block by block, skipping trials that start before the end
/// of any earlier block. Returns per-trial assignment and the trim count.
fn assign(entries: &[&ManifestEntry], order: [Split; 3], targets: [usize; 3]) -> (Vec<Option<Split>>, usize, bool) {
    let mut out = vec![None; entries.len()];
    let (mut block, mut filled, mut trimmed) = (0, 0, 0);
    let (mut prev_end, mut block_end) = (0u64, 0u64);
    while block < 3 && targets[block] == 0 {
        block += 1;
    }
    for (i, e) in entries.iter().enumerate() {
        if block == 3 {
            // only reached if targets undershoot; keep the tail in the last block
            out[i] = Some(order[2]);
            continue;
        }
        if e.span[0] < prev_end {
            trimmed += 1;
            continue;
        }
        out[i] = Some(order[block]);
        block_end = block_end.max(e.span[1]);
        filled += 1;
        if filled == targets[block] {
            prev_end = block_end;
            filled = 0;
            block += 1;
            while block < 3 && targets[block] == 0 {
                block += 1;
            }
        }
    }
    (out, trimmed, block == 3)
}

/// Assigns each recording's trials to contiguous blocks. `seed` picks, per
/// recording, whether the held-out blocks sit at its end or its start.
pub fn split_dataset(manifest: &[ManifestEntry], fractions: &SplitFractions, seed: u64) -> Result<SplitPlan> {
    fractions.validate()?;
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.iter().enumerate() {
        if e.span[0] >= e.span[1] {
            return Err(AadError::invalid(format!("trial {} has an empty span", e.trial)));
        }
        by_source.entry(e.source.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![None; manifest.len()];
    let mut recordings = Vec::with_capacity(by_source.len());
    for (source, mut idx) in by_source {
        idx.sort_by_key(|&i| (manifest[i].span[0], manifest[i].span[1], manifest[i].trial));
        let entries: Vec<&ManifestEntry> = idx.iter().map(|&i| &manifest[i]).collect();
        let n = entries.len();
        let order = if rng.random_bool(0.5) {
            [Split::Test, Split::Validation, Split::Train]
        } else {
            [Split::Train, Split::Validation, Split::Test]
        };

        let mut kept = n;
        let mut result = None;
        for _ in 0..8 {
            let c = fractions.counts(kept);
            let targets = order.map(|s| c[s as usize]);
            let (a, trimmed, complete) = assign(&entries, order, targets);
            let held_out_ok = Split::ALL.iter().all(|&s| fractions.get(s) == 0.0 || c[s as usize] > 0);
            let done = n - trimmed == kept;
            result = Some((a, trimmed, complete && held_out_ok));
            if done || trimmed >= n {
                break;
            }
            kept = n - trimmed;
        }
        let (a, trimmed, ok) = result.expect("at least one pass");
        let mut rec = RecordingSplit {
            source: source.to_string(),
            n_trials: n,
            train: 0,
            validation: 0,
            test: 0,
            trimmed,
            note: None,
        };
        if ok {
            for (&i, s) in idx.iter().zip(&a) {
                assignments[i] = *s;
                match s {
                    Some(Split::Train) => rec.train += 1,
                    Some(Split::Validation) => rec.validation += 1,
                    Some(Split::Test) => rec.test += 1,
                    None => {}
                }
            }
        } else {
            for &i in &idx {
                assignments[i] = Some(Split::Train);
            }
            rec.train = n;
            rec.trimmed = 0;
            rec.note = Some(format!("{source}: {n} trials cannot fill all three blocks; assigned wholly to train"));
        }
        recordings.push(rec);
    }
    Ok(SplitPlan { assignments, trials: manifest.iter().map(|e| e.trial).collect(), recordings })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `n` trials of `len` samples every `hop` samples.
    fn recording(source: &str, first: usize, n: usize, len: u64, hop: u64) -> Vec<ManifestEntry> {
        (0..n)
            .map(|j| ManifestEntry {
                trial: first + j,
                source: source.into(),
                span: [j as u64 * hop, j as u64 * hop + len],
                split: None,
            })
            .collect()
    }

    #[test]
    fn paper_sized_split_without_overlap() {
        let m = recording("r", 0, 118_922, 1, 1);
        let plan = split_dataset(&m, &SplitFractions::default(), 0).unwrap();
        let r = &plan.recordings[0];
        assert_eq!((r.train, r.validation, r.test), (89_192, 14_865, 14_865));
        assert_eq!(r.trimmed, 0);
    }

    #[test]
    fn overlapping_trials_at_boundaries_are_dropped() {
        // 3 s trials with a 1 s hop: each boundary drops two trials
        let m = recording("r", 0, 40, 192, 64);
        let plan = split_dataset(&m, &SplitFractions::default(), 1).unwrap();
        let r = &plan.recordings[0];
        assert_eq!(r.trimmed, 4);
        assert_eq!(r.kept(), 36);
        assert_eq!((r.train, r.validation, r.test), (27, 5, 4));
        plan.check_disjoint(&m).unwrap();
        let trimmed: Vec<usize> =
            plan.assignments().iter().enumerate().filter(|(_, a)| a.is_none()).map(|(i, _)| i).collect();
        assert_eq!(trimmed.len(), 4);
    }

    #[test]
    fn short_recording_goes_to_train() {
        let mut m = recording("long", 0, 80, 192, 64);
        m.extend(recording("short", 80, 5, 192, 64));
        let plan = split_dataset(&m, &SplitFractions::default(), 0).unwrap();
        let short = plan.recordings.iter().find(|r| r.source == "short").unwrap();
        assert_eq!(short.train, 5);
        assert!(short.note.is_some());
        assert_eq!(plan.notes().count(), 1);
        assert!(plan.indices(Split::Train).contains(&84));
    }

    #[test]
    fn rejects_bad_fractions() {
        let m = recording("r", 0, 10, 1, 1);
        let f = SplitFractions { train: 0.5, validation: 0.2, test: 0.2 };
        assert!(split_dataset(&m, &f, 0).is_err());
    }

    #[test]
    fn indices_partition_kept_trials() {
        let m = recording("r", 100, 64, 192, 64);
        let plan = split_dataset(&m, &SplitFractions::default(), 7).unwrap();
        let mut all: Vec<usize> = Split::ALL.iter().flat_map(|&s| plan.indices(s)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), plan.recordings[0].kept());
        assert!(all.iter().all(|&t| (100..164).contains(&t)));
    }
}
