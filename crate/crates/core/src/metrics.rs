//! Balanced evaluation: confusion matrix, balanced accuracy, macro
//! precision/recall/F1, one-vs-rest macro AUC, quadratic weighted kappa and
//! head/medium/tail aggregation.
//!
//! Degenerate denominators never raise: the affected class is skipped or the
//! metric returns 0, with a `log::warn!`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `m[true][pred]` counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<Confusion> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t >= k || p >= k {
            return Err(Error::Validation(format!(
                "sample {i}: label pair ({t}, {p}) outside [0, {k})"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(Confusion { counts })
}

/// Recall per class; `None` for classes without support.
pub fn per_class_recall(c: &Confusion) -> Vec<Option<f64>> {
    (0..c.num_classes())
        .map(|i| {
            let n = c.row_sum(i);
            (n > 0).then(|| c.counts[i][i] as f64 / n as f64)
        })
        .collect()
}

pub fn balanced_accuracy(c: &Confusion) -> f64 {
    let recalls = per_class_recall(c);
    let missing = recalls.iter().filter(|r| r.is_none()).count();
    if missing > 0 {
        log::warn!("balanced accuracy: {missing} class(es) without support excluded");
    }
    mean(recalls.into_iter().flatten())
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Macro `(f1, precision, recall)` over classes with support. A class that is
/// never predicted has precision 0.
pub fn macro_f1_precision_recall(c: &Confusion) -> (f64, f64, f64) {
    let k = c.num_classes();
    let (mut f1s, mut ps, mut rs) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..k {
        let support = c.row_sum(i);
        if support == 0 {
            continue;
        }
        let tp = c.counts[i][i] as f64;
        let predicted = c.col_sum(i);
        let p = if predicted == 0 {
            log::warn!("class {i} never predicted; precision set to 0");
            0.0
        } else {
            tp / predicted as f64
        };
        let r = tp / support as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        f1s.push(f);
        ps.push(p);
        rs.push(r);
    }
    (
        mean(f1s.into_iter()),
        mean(ps.into_iter()),
        mean(rs.into_iter()),
    )
}

/// Mann–Whitney AUC of `scores` for `positive` rows, ties counted ½.
fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mid-ranks over tie blocks.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest macro AUC over an `N×K` row-major score matrix.
pub fn auc_ovr_macro(scores: &[f64], y_true: &[usize], k: usize) -> Result<f64> {
    if scores.len() != y_true.len() * k {
        return Err(Error::Shape(format!(
            "{} scores for {} samples and {k} classes",
            scores.len(),
            y_true.len()
        )));
    }
    let mut aucs = Vec::new();
    for class in 0..k {
        let col: Vec<f64> = scores.chunks(k).map(|r| r[class]).collect();
        let pos: Vec<bool> = y_true.iter().map(|&y| y == class).collect();
        match binary_auc(&col, &pos) {
            Some(a) => aucs.push(a),
            None => log::warn!("auc: class {class} lacks positives or negatives; skipped"),
        }
    }
    Ok(mean(aucs.into_iter()))
}

/// `1 − Σ w·O / Σ w·E` with `w_ij = (i−j)²/(K−1)²` and `E` the outer product of
/// the marginals scaled to `Σ O`.
pub fn quadratic_weighted_kappa(c: &Confusion) -> f64 {
    let k = c.num_classes();
    if k < 2 {
        log::warn!("kappa undefined for fewer than two classes");
        return 0.0;
    }
    let total = c.total() as f64;
    if total == 0.0 {
        log::warn!("kappa on an empty confusion matrix");
        return 0.0;
    }
    let rows: Vec<f64> = (0..k).map(|i| c.row_sum(i) as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| c.col_sum(j) as f64).collect();
    let norm = ((k - 1) * (k - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64).powi(2)) / norm;
            num += w * c.counts[i][j] as f64;
            den += w * rows[i] * cols[j] / total;
        }
    }
    if den == 0.0 {
        log::warn!("kappa: zero expected disagreement");
        return 0.0;
    }
    1.0 - num / den
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

impl std::str::FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Group::Head),
            "medium" => Ok(Group::Medium),
            "tail" => Ok(Group::Tail),
            _ => Err(Error::Config(format!("unknown group `{s}`"))),
        }
    }
}

/// Class → frequency group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub assignment: Vec<Group>,
}

impl GroupSpec {
    pub fn uniform(k: usize, g: Group) -> Self {
        Self {
            assignment: vec![g; k],
        }
    }

    /// Tertiles of classes sorted by descending training count (index breaks
    /// ties). Group sizes differ by at most one, larger groups first; a class
    /// whose count equals the last member of the group above joins that group.
    pub fn from_train_counts(counts: &[usize]) -> Self {
        let k = counts.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let base = k / 3;
        let extra = k % 3;
        let sizes = [
            base + usize::from(extra > 0),
            base + usize::from(extra > 1),
            base,
        ];
        let mut group_of_rank = Vec::with_capacity(k);
        for (g, &n) in [Group::Head, Group::Medium, Group::Tail].iter().zip(&sizes) {
            group_of_rank.extend(std::iter::repeat_n(*g, n));
        }
        for r in 1..k {
            if counts[order[r]] == counts[order[r - 1]] {
                group_of_rank[r] = group_of_rank[r - 1];
            }
        }
        let mut assignment = vec![Group::Head; k];
        for (r, &cls) in order.iter().enumerate() {
            assignment[cls] = group_of_rank[r];
        }
        Self { assignment }
    }

    /// Parses `class group` lines; `#` starts a comment.
    pub fn parse(text: &str, k: usize) -> Result<Self> {
        let mut assignment: Vec<Option<Group>> = vec![None; k];
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(c), Some(g), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Config(format!("group file line {}: `{line}`", n + 1)));
            };
            let c: usize = c
                .parse()
                .map_err(|_| Error::Config(format!("group file line {}: bad class", n + 1)))?;
            if c >= k {
                return Err(Error::Config(format!("group file: class {c} >= {k}")));
            }
            if assignment[c].replace(g.parse()?).is_some() {
                return Err(Error::Config(format!("group file: class {c} assigned twice")));
            }
        }
        let assignment = assignment
            .into_iter()
            .enumerate()
            .map(|(c, g)| g.ok_or_else(|| Error::Config(format!("group file: class {c} missing"))))
            .collect::<Result<_>>()?;
        Ok(Self { assignment })
    }

    pub fn load(path: &Path, k: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, k)
    }
}

/// Mean per-class recall within each group; `None` when a group has no
/// supported class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupBacc {
    pub head: Option<f64>,
    pub medium: Option<f64>,
    pub tail: Option<f64>,
    pub overall: f64,
}

pub fn group_bacc(c: &Confusion, groups: &GroupSpec) -> Result<GroupBacc> {
    if groups.assignment.len() != c.num_classes() {
        return Err(Error::Shape(format!(
            "group spec covers {} classes, confusion has {}",
            groups.assignment.len(),
            c.num_classes()
        )));
    }
    let recalls = per_class_recall(c);
    let of = |g: Group| {
        let v: Vec<f64> = recalls
            .iter()
            .zip(&groups.assignment)
            .filter(|(_, a)| **a == g)
            .filter_map(|(r, _)| *r)
            .collect();
        (!v.is_empty()).then(|| mean(v.into_iter()))
    };
    Ok(GroupBacc {
        head: of(Group::Head),
        medium: of(Group::Medium),
        tail: of(Group::Tail),
        overall: balanced_accuracy(c),
    })
}

/// Every balanced metric for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Confusion,
    pub auc_macro: f64,
    pub bacc: f64,
    pub f1_macro: f64,
    pub kappa_quadratic: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub group_bacc: GroupBacc,
    pub n_eval: usize,
}

/// Index of the row maximum; the lowest index wins ties.
pub fn argmax_rows(scores: &[f64], k: usize) -> Vec<usize> {
    scores
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

impl MetricsReport {
    pub fn from_scores(
        scores: &[f64],
        y_true: &[usize],
        k: usize,
        groups: &GroupSpec,
    ) -> Result<Self> {
        let pred = argmax_rows(scores, k);
        let confusion = confusion_matrix(y_true, &pred, k)?;
        let (f1, precision, recall) = macro_f1_precision_recall(&confusion);
        Ok(Self {
            auc_macro: auc_ovr_macro(scores, y_true, k)?,
            bacc: balanced_accuracy(&confusion),
            f1_macro: f1,
            kappa_quadratic: quadratic_weighted_kappa(&confusion),
            precision_macro: precision,
            recall_macro: recall,
            group_bacc: group_bacc(&confusion, groups)?,
            n_eval: y_true.len(),
            confusion,
        })
    }

    /// Report JSON with fixed key order and six-decimal floats.
    pub fn to_json(&self, seed: u64, config_hash: &str) -> String {
        let f = |v: f64| format!("{v:.6}");
        let g = |v: Option<f64>| v.map_or_else(|| "null".to_string(), f);
        let confusion = self
            .confusion
            .counts
            .iter()
            .map(|r| {
                let cells: Vec<String> = r.iter().map(u64::to_string).collect();
                format!("[{}]", cells.join(","))
            })
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        let _ = write!(
            s,
            "{{\"auc\":{},\"bacc\":{},\"f1\":{},\"kappa\":{},\"precision\":{},\"recall\":{},\
             \"group_bacc\":{{\"head\":{},\"medium\":{},\"tail\":{},\"overall\":{}}},\
             \"confusion\":[{}],\"n_eval\":{},\"seed\":{},\"config_hash\":{}}}",
            f(self.auc_macro),
            f(self.bacc),
            f(self.f1_macro),
            f(self.kappa_quadratic),
            f(self.precision_macro),
            f(self.recall_macro),
            g(self.group_bacc.head),
            g(self.group_bacc.medium),
            g(self.group_bacc.tail),
            f(self.group_bacc.overall),
            confusion,
            self.n_eval,
            seed,
            serde_json::to_string(config_hash).unwrap(),
        );
        s
    }
}
