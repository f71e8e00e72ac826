//! Evaluation: multi-label precision/recall/F1 for the three tiers, group
//! matching, group detection scores and the combined report.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cluster::Partition;
use crate::data::{FrameAnnotation, LabelSet};
use crate::error::{Error, Result};
use crate::train::ParPrediction;

/// Thresholds of the group-detection accuracy curve.
pub const IOU_THRESHOLDS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const PERFECT: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    /// Micro scores from counts; both totals zero scores perfect, one zero
    /// total scores zero.
    pub fn from_counts(tp: usize, pred_total: usize, gt_total: usize) -> Self {
        match (pred_total, gt_total) {
            (0, 0) => Self::PERFECT,
            (0, _) | (_, 0) => Self::default(),
            _ => Self::from_pr(tp as f64 / pred_total as f64, tp as f64 / gt_total as f64),
        }
    }

    fn mean(items: &[Prf]) -> Prf {
        if items.is_empty() {
            return Prf::default();
        }
        let n = items.len() as f64;
        Prf {
            precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
            recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
            f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
        }
    }
}

fn check_vocab(set: &LabelSet, vocab_size: usize) -> Result<()> {
    match set.iter().find(|&&l| l >= vocab_size) {
        Some(l) => Err(Error::invalid(format!(
            "label {l} outside vocabulary of {vocab_size}"
        ))),
        None => Ok(()),
    }
}

pub fn multilabel_prf(pred: &LabelSet, gt: &LabelSet, vocab_size: usize) -> Result<Prf> {
    check_vocab(pred, vocab_size)?;
    check_vocab(gt, vocab_size)?;
    let tp = pred.intersection(gt).count();
    Ok(Prf::from_counts(tp, pred.len(), gt.len()))
}

pub fn member_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Strict `IoU > θ`, except that `θ = 1` accepts exact matches.
pub fn passes(iou: f64, theta: f64) -> bool {
    if theta >= 1.0 {
        iou >= 1.0
    } else {
        iou > theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMatch {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Minimum-cost assignment of every row of a `rows <= cols` cost matrix.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = if n == 0 { 0 } else { cost[0].len() };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn eligible(pred: &[BTreeSet<usize>], gt: &[BTreeSet<usize>], theta: f64) -> Vec<Vec<f64>> {
    pred.iter()
        .map(|p| {
            gt.iter()
                .map(|g| {
                    let iou = member_iou(p, g);
                    if p.len() >= 2 && g.len() >= 2 && passes(iou, theta) {
                        iou
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// One-to-one matching maximizing total IoU over pairs that pass `θ`.
/// Groups with fewer than two members never match.
pub fn match_groups(
    pred: &[BTreeSet<usize>],
    gt: &[BTreeSet<usize>],
    theta: f64,
) -> Vec<GroupMatch> {
    let w = eligible(pred, gt, theta);
    if pred.is_empty() || gt.is_empty() {
        return Vec::new();
    }
    let transpose = pred.len() > gt.len();
    let (rows, cols) = if transpose {
        (gt.len(), pred.len())
    } else {
        (pred.len(), gt.len())
    };
    let cost: Vec<Vec<f64>> = (0..rows)
        .map(|r| {
            (0..cols)
                .map(|c| if transpose { -w[c][r] } else { -w[r][c] })
                .collect()
        })
        .collect();
    let mut out: Vec<GroupMatch> = hungarian(&cost)
        .into_iter()
        .enumerate()
        .map(|(r, c)| if transpose { (c, r) } else { (r, c) })
        .filter(|&(p, g)| w[p][g] > 0.0)
        .map(|(p, g)| GroupMatch {
            pred: p,
            gt: g,
            iou: w[p][g],
        })
        .collect();
    out.sort_by_key(|m| (m.pred, m.gt));
    out
}

/// Greedy matching by descending IoU (ties by indices).
pub fn match_groups_greedy(
    pred: &[BTreeSet<usize>],
    gt: &[BTreeSet<usize>],
    theta: f64,
) -> Vec<GroupMatch> {
    let w = eligible(pred, gt, theta);
    let mut cands: Vec<GroupMatch> = Vec::new();
    for (p, row) in w.iter().enumerate() {
        for (g, &iou) in row.iter().enumerate() {
            if iou > 0.0 {
                cands.push(GroupMatch {
                    pred: p,
                    gt: g,
                    iou,
                });
            }
        }
    }
    cands.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then((a.pred, a.gt).cmp(&(b.pred, b.gt)))
    });
    let (mut used_p, mut used_g) = (BTreeSet::new(), BTreeSet::new());
    let mut out = Vec::new();
    for c in cands {
        if !used_p.contains(&c.pred) && !used_g.contains(&c.gt) {
            used_p.insert(c.pred);
            used_g.insert(c.gt);
            out.push(c);
        }
    }
    out.sort_by_key(|m| (m.pred, m.gt));
    out
}

/// Label-level counts for social activities over groups of two or more.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialCounts {
    pub true_positive: usize,
    pub predicted: usize,
    pub annotated: usize,
}

impl SocialCounts {
    pub fn add(&mut self, other: SocialCounts) {
        self.true_positive += other.true_positive;
        self.predicted += other.predicted;
        self.annotated += other.annotated;
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.true_positive, self.predicted, self.annotated)
    }
}

/// Matched pairs contribute label intersections; every predicted (annotated)
/// label of a multi-member group enters the precision (recall) denominator.
pub fn social_counts(
    matches: &[GroupMatch],
    pred: &[(BTreeSet<usize>, LabelSet)],
    gt: &[(BTreeSet<usize>, LabelSet)],
) -> SocialCounts {
    SocialCounts {
        true_positive: matches
            .iter()
            .map(|m| pred[m.pred].1.intersection(&gt[m.gt].1).count())
            .sum(),
        predicted: pred
            .iter()
            .filter(|(g, _)| g.len() >= 2)
            .map(|(_, l)| l.len())
            .sum(),
        annotated: gt
            .iter()
            .filter(|(g, _)| g.len() >= 2)
            .map(|(_, l)| l.len())
            .sum(),
    }
}

pub fn social_prf(
    matches: &[GroupMatch],
    pred: &[(BTreeSet<usize>, LabelSet)],
    gt: &[(BTreeSet<usize>, LabelSet)],
) -> Prf {
    social_counts(matches, pred, gt).prf()
}

/// Off-diagonal co-membership counts between two partitions.
pub fn relation_overlap(pred: &Partition, gt: &Partition) -> Result<(usize, usize)> {
    if pred.num_subjects() != gt.num_subjects() {
        return Err(Error::invalid("partitions cover different subject sets"));
    }
    let (a, b) = (pred.to_relation(), gt.to_relation());
    let n = pred.num_subjects();
    let (mut and, mut or) = (0, 0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (x, y) = (a[(i, j)] > 0.5, b[(i, j)] > 0.5);
            and += usize::from(x && y);
            or += usize::from(x || y);
        }
    }
    Ok((and, or))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub theta: f64,
    /// Matched annotated groups over all annotated groups.
    pub recall: f64,
    /// Matched predicted groups over all predicted groups.
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDetection {
    pub iou_50: f64,
    pub iou_auc: f64,
    pub mat_iou: f64,
    pub iou_50_precision: f64,
    pub iou_auc_precision: f64,
    pub curve: Vec<CurvePoint>,
}

/// Trapezoid over the six thresholds (spacing 0.1), normalized by the range.
pub fn curve_auc(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| 0.1 * (w[0] + w[1]) / 2.0)
        .sum::<f64>()
        / 0.5
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn group_detection_scores(pred: &[Partition], gt: &[Partition]) -> Result<GroupDetection> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("prediction and annotation counts differ"));
    }
    let (mut and, mut or) = (0, 0);
    for (p, g) in pred.iter().zip(gt) {
        let (a, o) = relation_overlap(p, g)?;
        and += a;
        or += o;
    }
    let total_gt: usize = gt.iter().map(|g| g.groups().len()).sum();
    let total_pred: usize = pred.iter().map(|p| p.groups().len()).sum();
    let curve: Vec<CurvePoint> = IOU_THRESHOLDS
        .iter()
        .map(|&theta| {
            let matched: usize = pred
                .iter()
                .zip(gt)
                .map(|(p, g)| match_groups(p.groups(), g.groups(), theta).len())
                .sum();
            CurvePoint {
                theta,
                recall: ratio(matched, total_gt),
                precision: ratio(matched, total_pred),
            }
        })
        .collect();
    let rec: Vec<f64> = curve.iter().map(|c| c.recall).collect();
    let prec: Vec<f64> = curve.iter().map(|c| c.precision).collect();
    Ok(GroupDetection {
        iou_50: rec[0],
        iou_auc: curve_auc(&rec),
        mat_iou: ratio(and, or),
        iou_50_precision: prec[0],
        iou_auc_precision: curve_auc(&prec),
        curve,
    })
}

pub fn overall_f1(f_i: f64, f_p: f64, f_g: f64) -> f64 {
    (f_i + f_p + f_g) / 3.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub frames: usize,
    pub subjects: usize,
    pub annotated_groups: usize,
    pub predicted_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub individual: Prf,
    pub social: Prf,
    pub global: Prf,
    pub overall_f1: f64,
    pub group_detection: GroupDetection,
    pub social_counts: SocialCounts,
    pub counts: ReportCounts,
    pub notes: Vec<String>,
}

/// Vocabulary sizes used to validate label ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub actions: usize,
    pub social: usize,
    pub global: usize,
}

pub fn evaluate(
    preds: &[ParPrediction],
    frames: &[FrameAnnotation],
    vocab: VocabSizes,
) -> Result<MetricsReport> {
    if frames.is_empty() {
        return Err(Error::data(None, "evaluation set is empty"));
    }
    if preds.len() != frames.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} frames",
            preds.len(),
            frames.len()
        )));
    }
    let mut individual = Vec::new();
    let mut global = Vec::with_capacity(frames.len());
    let mut social = SocialCounts::default();
    let mut counts = ReportCounts::default();
    for (p, f) in preds.iter().zip(frames) {
        let ids: Vec<u64> = f.subjects.iter().map(|s| s.id).collect();
        if p.frame_id != f.frame_id || p.subject_ids != ids {
            return Err(Error::invalid(format!(
                "prediction for frame {} does not cover the subjects of frame {}",
                p.frame_id, f.frame_id
            )));
        }
        for (pa, s) in p.actions.iter().zip(&f.subjects) {
            individual.push(multilabel_prf(pa, &s.actions, vocab.actions)?);
        }
        global.push(multilabel_prf(
            &p.global,
            &f.global_activities,
            vocab.global,
        )?);
        let pred_groups: Vec<(BTreeSet<usize>, LabelSet)> = p
            .partition
            .groups()
            .iter()
            .cloned()
            .zip(p.group_activities.iter().cloned())
            .collect();
        let gt_groups = f.multi_member_groups();
        for (_, l) in pred_groups.iter().chain(&gt_groups) {
            check_vocab(l, vocab.social)?;
        }
        let pg: Vec<BTreeSet<usize>> = pred_groups.iter().map(|(g, _)| g.clone()).collect();
        let gg: Vec<BTreeSet<usize>> = gt_groups.iter().map(|(g, _)| g.clone()).collect();
        social.add(social_counts(
            &match_groups(&pg, &gg, 0.5),
            &pred_groups,
            &gt_groups,
        ));
        counts.frames += 1;
        counts.subjects += f.num_subjects();
        counts.annotated_groups += gg.len();
        counts.predicted_groups += pg.len();
    }
    let pred_parts: Vec<Partition> = preds.iter().map(|p| p.partition.clone()).collect();
    let gt_parts: Vec<Partition> = frames.iter().map(|f| f.gt_partition()).collect();
    let group_detection = group_detection_scores(&pred_parts, &gt_parts)?;
    let (individual, global, social_prf) =
        (Prf::mean(&individual), Prf::mean(&global), social.prf());
    Ok(MetricsReport {
        overall_f1: overall_f1(individual.f1, social_prf.f1, global.f1),
        individual,
        social: social_prf,
        global,
        group_detection,
        social_counts: social,
        counts,
        notes: vec![
            "group matching uses IoU > theta; theta = 1.0 accepts IoU >= 1".into(),
            "social scores count labels over matched groups (IoU > 0.5)".into(),
        ],
    })
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

impl MetricsReport {
    /// Aligned text table, percentages with one decimal.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let head = [
            "P_i", "R_i", "F_i", "P_p", "R_p", "F_p", "P_g", "R_g", "F_g", "F_a",
        ];
        let vals = [
            self.individual.precision,
            self.individual.recall,
            self.individual.f1,
            self.social.precision,
            self.social.recall,
            self.social.f1,
            self.global.precision,
            self.global.recall,
            self.global.f1,
            self.overall_f1,
        ];
        for h in head {
            let _ = write!(s, "{h:>7}");
        }
        s.push('\n');
        for v in vals {
            let _ = write!(s, "{:>7}", pct(v));
        }
        s.push_str("\n\n");
        let g = &self.group_detection;
        let _ = writeln!(s, "{:>9}{:>9}{:>9}", "IOU@0.5", "IOU@AUC", "Mat.IOU");
        let _ = writeln!(
            s,
            "{:>9}{:>9}{:>9}",
            pct(g.iou_50),
            pct(g.iou_auc),
            pct(g.mat_iou)
        );
        let _ = writeln!(
            s,
            "(precision-style: IOU@0.5 {}, IOU@AUC {})",
            pct(g.iou_50_precision),
            pct(g.iou_auc_precision)
        );
        let c = &self.counts;
        let _ = writeln!(
            s,
            "frames {}  subjects {}  annotated groups {}  predicted groups {}",
            c.frames, c.subjects, c.annotated_groups, c.predicted_groups
        );
        s
    }
}
