use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

/// One line of `metrics.jsonl`. Fields that do not apply to the run are null.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub task_loss: Option<f64>,
    pub balancing_loss: Option<f64>,
    pub accuracy: f64,
    pub mean_macs: Option<f64>,
    pub load_cv: Option<f64>,
    pub nmi: Option<f64>,
    pub mean_exit: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.task_loss,
            self.balancing_loss,
            Some(self.accuracy),
            self.mean_macs,
            self.load_cv,
            self.nmi,
            self.mean_exit,
            self.recall,
        ]
        .iter()
        .flatten()
        .all(|v| v.is_finite())
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, self)?;
        writeln!(w)
    }
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(A;B) / (H(A) + H(B))` between two
/// labelings of the same items. Two constant labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    if a.is_empty() {
        return 0.0;
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let (ha, hb) = (entropy(ca.values().copied(), n), entropy(cb.values().copied(), n));
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

/// Coefficient of variation (population standard deviation over mean) of
/// expert loads.
pub fn load_cv(loads: &[usize]) -> f64 {
    let n = loads.len() as f64;
    let mean = loads.iter().sum::<usize>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = loads.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}
