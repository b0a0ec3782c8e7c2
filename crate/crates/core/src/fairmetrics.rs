//! Evaluation arithmetic. Every function returns raw rates in `[0, 1]`;
//! percentage scaling happens when reports are written.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::{Attribute, Sample, TaskSequence, HATE, NON_HATE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, label: usize, predicted: usize) {
        match (label == HATE, predicted == HATE) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.fp + self.tn
    }

    /// `FP / (FP + TN)`, or `None` without negatives.
    pub fn fpr(&self) -> Option<f64> {
        let n = self.negatives();
        (n > 0).then(|| self.fp as f64 / n as f64)
    }

    fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Confusion counts for both groups of one attribute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfusion {
    pub attribute: Attribute,
    pub groups: [Confusion; 2],
    pub overall: Confusion,
}

impl GroupConfusion {
    pub fn from_groups(attribute: Attribute, groups: [Confusion; 2]) -> Self {
        let mut overall = Confusion::default();
        for g in &groups {
            overall.merge(g);
        }
        Self {
            attribute,
            groups,
            overall,
        }
    }
}

/// Per-group confusion counts. `predictions[i]` belongs to `samples[i]`.
pub fn confusion_by_group(predictions: &[usize], samples: &[Sample], attribute: Attribute) -> Result<GroupConfusion> {
    if predictions.len() != samples.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let mut groups = [Confusion::default(); 2];
    for (s, &p) in samples.iter().zip(predictions) {
        if p > HATE {
            return Err(Error::Input(format!("prediction {p} for sample {} is not a class", s.id)));
        }
        groups[s.group(attribute) as usize].record(s.label, p);
    }
    Ok(GroupConfusion::from_groups(attribute, groups))
}

/// Reorders `(id, prediction)` pairs into `samples` order.
pub fn align_predictions(pairs: &[(u64, usize)], samples: &[Sample]) -> Result<Vec<usize>> {
    let by_id: BTreeMap<u64, usize> = pairs.iter().copied().collect();
    if by_id.len() != pairs.len() {
        return Err(Error::Input("duplicate sample id among predictions".into()));
    }
    if by_id.len() != samples.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} samples",
            by_id.len(),
            samples.len()
        )));
    }
    samples
        .iter()
        .map(|s| {
            by_id
                .get(&s.id)
                .copied()
                .ok_or_else(|| Error::Input(format!("no prediction for sample id {}", s.id)))
        })
        .collect()
}

/// `Σ_d |FPR_d − FPR|` over the attribute's two groups.
pub fn fped(conf: &GroupConfusion) -> Result<f64> {
    let names = conf.attribute.groups();
    let overall = conf.overall.fpr().ok_or_else(|| {
        Error::UndefinedRate(format!("{} has no negative samples", conf.attribute))
    })?;
    let mut total = 0.0;
    for (g, name) in conf.groups.iter().zip(names) {
        let rate = g.fpr().ok_or_else(|| {
            Error::UndefinedRate(format!(
                "group {name} of {} has no negative samples",
                conf.attribute
            ))
        })?;
        total += (rate - overall).abs();
    }
    Ok(total)
}

/// Mean FPED over the four attributes.
pub fn aab(fpeds: &BTreeMap<Attribute, f64>) -> Result<f64> {
    let mut sum = 0.0;
    for a in Attribute::ALL {
        sum += fpeds
            .get(&a)
            .ok_or_else(|| Error::Input(format!("no FPED for {a}")))?;
    }
    Ok(sum / Attribute::ALL.len() as f64)
}

/// Bias change over a run: mean over stages `i < n` of the focus
/// attribute's bias after the last stage minus its bias right after stage
/// `i`. `history[i]` holds the per-attribute bias measured after stage
/// `i + 1`.
pub fn bc(history: &[BTreeMap<Attribute, f64>], sequence: &TaskSequence) -> Result<f64> {
    let n = sequence.len();
    if n < 2 {
        return Err(Error::Input("bias change needs at least two stages".into()));
    }
    if history.len() != n {
        return Err(Error::Input(format!(
            "history covers {} stages, sequence has {n}",
            history.len()
        )));
    }
    let last = &history[n - 1];
    let mut sum = 0.0;
    for (i, a) in sequence.focuses[..n - 1].iter().enumerate() {
        let missing = |stage: usize| Error::Input(format!("no {a} bias recorded after stage {stage}"));
        let after_own = history[i].get(a).ok_or_else(|| missing(i + 1))?;
        let after_last = last.get(a).ok_or_else(|| missing(n))?;
        sum += after_last - after_own;
    }
    Ok(sum / (n - 1) as f64)
}

/// Which per-attribute quantity feeds [`bc`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMeasure {
    #[default]
    Fped,
    /// Overall false positive rate, ignoring groups.
    Fpr,
}

impl BiasMeasure {
    pub fn measure(self, conf: &GroupConfusion) -> Result<f64> {
        match self {
            BiasMeasure::Fped => fped(conf),
            BiasMeasure::Fpr => conf.overall.fpr().ok_or_else(|| {
                Error::UndefinedRate(format!("{} has no negative samples", conf.attribute))
            }),
        }
    }
}

/// Distance to the utopia point `(best performance, lowest bias)` after
/// min-max normalizing each axis over the given methods. A constant axis
/// contributes nothing.
pub fn dto(points: &[(f64, f64)]) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::Input("distance to optimum needs at least two methods".into()));
    }
    if points.iter().any(|(p, f)| !p.is_finite() || !f.is_finite()) {
        return Err(Error::Input("non-finite point".into()));
    }
    let range = |get: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(get).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(get).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi - lo)
    };
    let (p_lo, p_span) = range(|p| p.0);
    let (f_lo, f_span) = range(|p| p.1);
    Ok(points
        .iter()
        .map(|&(p, f)| {
            let dp = if p_span > 0.0 { 1.0 - (p - p_lo) / p_span } else { 0.0 };
            let df = if f_span > 0.0 { (f - f_lo) / f_span } else { 0.0 };
            dp.hypot(df)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub accuracy: f64,
    pub f1_macro: f64,
    /// Classes absent from both labels and predictions; each scored F1 = 0.
    pub absent_classes: Vec<usize>,
}

impl Performance {
    /// Same values as [`f1_macro_and_accuracy`], from binary confusion counts.
    pub fn from_confusion(c: &Confusion) -> Result<Self> {
        let total = c.total();
        if total == 0 {
            return Err(Error::Input("no predictions".into()));
        }
        let mut absent = Vec::new();
        let mut f1_sum = 0.0;
        for (class, tp, fp, fn_) in [(NON_HATE, c.tn, c.fn_, c.fp), (HATE, c.tp, c.fp, c.fn_)] {
            if tp + fp + fn_ == 0 {
                absent.push(class);
                continue;
            }
            f1_sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        }
        Ok(Self {
            accuracy: (c.tp + c.tn) as f64 / total as f64,
            f1_macro: f1_sum / 2.0,
            absent_classes: absent,
        })
    }
}

/// Accuracy and unweighted mean of per-class F1 over both classes.
pub fn f1_macro_and_accuracy(predictions: &[usize], labels: &[usize]) -> Result<Performance> {
    if predictions.is_empty() {
        return Err(Error::Input("no predictions".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut absent = Vec::new();
    let mut f1_sum = 0.0;
    for class in [NON_HATE, HATE] {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == class, l == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fn_ == 0 {
            log::warn!("class {class} is absent from labels and predictions; its F1 counts as 0");
            absent.push(class);
            continue;
        }
        f1_sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Ok(Performance {
        accuracy: correct as f64 / predictions.len() as f64,
        f1_macro: f1_sum / 2.0,
        absent_classes: absent,
    })
}

/// Metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub fped: BTreeMap<Attribute, f64>,
    pub aab: f64,
    pub bc: Option<f64>,
    pub dto: Option<f64>,
}

impl FairnessReport {
    /// Named scalar fields, in a fixed order.
    pub fn fields(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("accuracy".to_string(), self.accuracy),
            ("f1_macro".to_string(), self.f1_macro),
        ];
        for (a, v) in &self.fped {
            out.push((format!("fped_{}", a.key()), *v));
        }
        out.push(("aab".into(), self.aab));
        if let Some(v) = self.bc {
            out.push(("bc".into(), v));
        }
        if let Some(v) = self.dto {
            out.push(("dto".into(), v));
        }
        out
    }

    fn from_fields(fields: &BTreeMap<String, f64>) -> Self {
        let get = |k: &str| fields.get(k).copied();
        Self {
            accuracy: get("accuracy").unwrap_or(0.0),
            f1_macro: get("f1_macro").unwrap_or(0.0),
            fped: Attribute::ALL
                .iter()
                .filter_map(|a| get(&format!("fped_{}", a.key())).map(|v| (*a, v)))
                .collect(),
            aab: get("aab").unwrap_or(0.0),
            bc: get("bc"),
            dto: get("dto"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub count: usize,
    pub mean: FairnessReport,
    /// Population variance (divides by `count`).
    pub variance: FairnessReport,
}

/// Field-wise mean and population variance.
pub fn aggregate(reports: &[FairnessReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Input("nothing to aggregate".into()))?;
    let keys: Vec<String> = first.fields().into_iter().map(|(k, _)| k).collect();
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, r) in reports.iter().enumerate() {
        let fields = r.fields();
        let these: Vec<&String> = fields.iter().map(|(k, _)| k).collect();
        if these.len() != keys.len() || these.iter().zip(&keys).any(|(a, b)| *a != b) {
            return Err(Error::Input(format!("report {i} has a different field set")));
        }
        for (k, v) in fields {
            columns.entry(k).or_default().push(v);
        }
    }
    let n = reports.len() as f64;
    let mut mean = BTreeMap::new();
    let mut var = BTreeMap::new();
    for (k, vals) in &columns {
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean.insert(k.clone(), m);
        var.insert(k.clone(), v);
    }
    Ok(AggregateReport {
        count: reports.len(),
        mean: FairnessReport::from_fields(&mean),
        variance: FairnessReport::from_fields(&var),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Largest sample size evaluated by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Mid-ranks of `values` (1-based).
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test on paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "paired lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!(
            "{n} nonzero paired differences; at least 5 are needed"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);

    if n <= WILCOXON_EXACT_MAX {
        return Ok(WilcoxonResult {
            statistic: w,
            p_value: exact_p(&ranks, w),
            n,
            exact: true,
        });
    }

    let mean = total / 2.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let nf = n as f64;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0).sqrt();
    let z = ((w - mean).abs() - 0.5).max(0.0) / sd;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(WilcoxonResult {
        statistic: w,
        p_value: (2.0 * normal.cdf(-z)).min(1.0),
        n,
        exact: false,
    })
}

/// Fraction of the `2ⁿ` sign assignments whose `min(W⁺, W⁻)` is at most
/// `w`, counted over doubled (integer) ranks.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (2.0 * w).round() as usize;
    let extreme: u64 = counts
        .iter()
        .enumerate()
        .filter(|&(s, _)| s <= w2 || s >= total - w2)
        .map(|(_, c)| c)
        .sum();
    extreme as f64 / 2f64.powi(ranks.len() as i32)
}
