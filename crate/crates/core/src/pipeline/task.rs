use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSeries;
use crate::labels::{CoarsePosture, Posture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSpec {
    Speaker,
    Posture5,
    /// Five postures merged to sitting / standing / lying.
    Posture3,
}

impl TaskSpec {
    pub const ALL: [TaskSpec; 3] = [TaskSpec::Speaker, TaskSpec::Posture5, TaskSpec::Posture3];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskSpec::Speaker => "speaker",
            TaskSpec::Posture5 => "posture5",
            TaskSpec::Posture3 => "posture3",
        }
    }

    /// Class name of one breath under this task.
    pub fn label(self, speaker: &str, posture: Posture) -> String {
        match self {
            TaskSpec::Speaker => speaker.to_string(),
            TaskSpec::Posture5 => posture.as_str().to_string(),
            TaskSpec::Posture3 => posture.merged().as_str().to_string(),
        }
    }

    /// Canonical class order: speakers as listed, postures in enum order.
    fn canonical_order(self, speakers: &[String]) -> Vec<String> {
        match self {
            TaskSpec::Speaker => speakers.to_vec(),
            TaskSpec::Posture5 => Posture::ALL
                .iter()
                .map(|p| p.as_str().to_string())
                .collect(),
            TaskSpec::Posture3 => CoarsePosture::ALL
                .iter()
                .map(|p| p.as_str().to_string())
                .collect(),
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskSpec::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown task {s:?}")))
    }
}

/// Series labelled for one task. `labels[i]` indexes `classes` for `series[i]`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub task: TaskSpec,
    pub classes: Vec<String>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    /// One `(instance id, label)` pair per breath instance, in first-seen order.
    pub fn instance_labels(&self, series: &[FeatureSeries]) -> Vec<(u64, usize)> {
        let mut seen = BTreeMap::new();
        let mut out = Vec::new();
        for (s, &l) in series.iter().zip(&self.labels) {
            if seen.insert(s.instance_id, l).is_none() {
                out.push((s.instance_id, l));
            }
        }
        out
    }
}

/// Labels every series for `task`. Classes are those present, in canonical order
/// (speakers in the order given).
pub fn build_task(
    series: &[FeatureSeries],
    speakers: &[String],
    task: TaskSpec,
) -> Result<LabeledDataset> {
    let names: Vec<String> = series
        .iter()
        .map(|s| task.label(&s.speaker, s.posture))
        .collect();
    let order = task.canonical_order(speakers);
    if let Some(unknown) = names.iter().find(|n| !order.contains(n)) {
        return Err(Error::UnknownLabel(unknown.clone()));
    }
    let classes: Vec<String> = order.into_iter().filter(|c| names.contains(c)).collect();
    let labels = names
        .iter()
        .map(|n| classes.iter().position(|c| c == n).expect("present class"))
        .collect();
    Ok(LabeledDataset {
        task,
        classes,
        labels,
    })
}

/// Disjoint, exhaustive partition of instance ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIds {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitIds {
    pub fn is_test(&self, id: u64) -> bool {
        self.test.binary_search(&id).is_ok()
    }
}

/// Stratified split over breath instances. Each class contributes
/// `round(n_c * test_fraction)` test instances, moved by at most one so the
/// total is `round(n * test_fraction)`.
pub fn stratified_split(
    instances: &[(u64, usize)],
    test_fraction: f64,
    seed: u64,
) -> Result<SplitIds> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for &(id, label) in instances {
        by_class.entry(label).or_default().push(id);
    }
    if by_class.len() < 2 {
        return Err(Error::Degenerate(format!(
            "classification needs at least 2 classes, found {}",
            by_class.len()
        )));
    }
    if let Some((c, ids)) = by_class.iter().find(|(_, ids)| ids.len() < 2) {
        return Err(Error::Degenerate(format!(
            "class {c} has {} instance(s); need at least 2",
            ids.len()
        )));
    }

    let total: usize = by_class.values().map(Vec::len).sum();
    let target = (total as f64 * test_fraction).round() as usize;
    let mut counts: Vec<(usize, usize, f64)> = by_class
        .iter()
        .map(|(&c, ids)| {
            let exact = ids.len() as f64 * test_fraction;
            let t = (exact.round() as usize).min(ids.len() - 1);
            (c, t, exact - t as f64)
        })
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    if assigned < target {
        order.sort_by(|&a, &b| counts[b].2.total_cmp(&counts[a].2).then(a.cmp(&b)));
        let mut need = target - assigned;
        for i in order {
            if need == 0 {
                break;
            }
            if counts[i].1 + 1 < by_class[&counts[i].0].len() {
                counts[i].1 += 1;
                need -= 1;
            }
        }
    } else if assigned > target {
        order.sort_by(|&a, &b| counts[a].2.total_cmp(&counts[b].2).then(a.cmp(&b)));
        let mut extra = assigned - target;
        for i in order {
            if extra == 0 {
                break;
            }
            if counts[i].1 > 0 {
                counts[i].1 -= 1;
                extra -= 1;
            }
        }
    }

    let mut split = SplitIds {
        train: Vec::with_capacity(total - target),
        test: Vec::with_capacity(target),
    };
    for (class, t, _) in counts {
        let mut ids = by_class[&class].clone();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        ids.shuffle(&mut rng);
        split.test.extend_from_slice(&ids[..t]);
        split.train.extend_from_slice(&ids[t..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
