//! Stage-wise TP/FP flags and the rates at which correct detections fade or
//! errors persist between early decoder stages and the last one.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxCxcywh, ImageTargets};
use crate::error::{Error, Result};

/// Default score floor for counting a query as a detection.
pub const SCORE_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryFlag {
    Tp,
    Fp,
    /// Score at or below the floor.
    Below,
}

/// Predictions of one image at one stage: sigmoid scores (N_q × K) and boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct StageImagePredictions {
    pub scores: Vec<f64>,
    pub boxes: Vec<BoxCxcywh>,
    pub num_classes: usize,
}

impl StageImagePredictions {
    /// Best class and its score for query `q`; the lowest class wins ties.
    fn top(&self, q: usize) -> (usize, f64) {
        let row = &self.scores[q * self.num_classes..(q + 1) * self.num_classes];
        let mut best = (0, row[0]);
        for (c, &s) in row.iter().enumerate().skip(1) {
            if s > best.1 {
                best = (c, s);
            }
        }
        best
    }
}

/// Flags and top scores, indexed [stage][image·N_q + query].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagTable {
    pub flags: Vec<Vec<QueryFlag>>,
    pub scores: Vec<Vec<f64>>,
}

impl FlagTable {
    pub fn num_stages(&self) -> usize {
        self.flags.len()
    }

    /// Reorders query slots consistently across stages.
    pub fn permuted(&self, perm: &[usize]) -> FlagTable {
        FlagTable {
            flags: self.flags.iter().map(|f| perm.iter().map(|&i| f[i]).collect()).collect(),
            scores: self.scores.iter().map(|s| perm.iter().map(|&i| s[i]).collect()).collect(),
        }
    }
}

/// Greedy score-ordered matching of one image's queries at IoU > `tau`.
pub fn flag_image(pred: &StageImagePredictions, gt: &ImageTargets, tau: f64, floor: f64) -> (Vec<QueryFlag>, Vec<f64>) {
    let nq = pred.boxes.len();
    let tops: Vec<(usize, f64)> = (0..nq).map(|q| pred.top(q)).collect();
    let mut order: Vec<usize> = (0..nq).filter(|&q| tops[q].1 > floor).collect();
    order.sort_by(|&a, &b| tops[b].1.total_cmp(&tops[a].1).then(a.cmp(&b)));
    let mut flags = vec![QueryFlag::Below; nq];
    let mut taken = vec![false; gt.len()];
    for q in order {
        let (label, _) = tops[q];
        let mut best: Option<(usize, f64)> = None;
        for (g, (b, &l)) in gt.boxes.iter().zip(&gt.labels).enumerate() {
            if taken[g] || l != label {
                continue;
            }
            let v = iou(pred.boxes[q], *b);
            if v > tau && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        flags[q] = match best {
            Some((g, _)) => {
                taken[g] = true;
                QueryFlag::Tp
            }
            None => QueryFlag::Fp,
        };
    }
    (flags, tops.iter().map(|t| t.1).collect())
}

/// `stages[s][i]` holds stage s+1's predictions for image i.
pub fn stage_matchings(
    stages: &[Vec<StageImagePredictions>],
    gts: &[ImageTargets],
    tau: f64,
    floor: f64,
) -> Result<FlagTable> {
    let Some(first) = stages.first() else {
        return Err(Error::Contract("no stages to flag".into()));
    };
    for s in stages {
        if s.len() != gts.len() {
            return Err(Error::Shape(format!("{} images of predictions for {} targets", s.len(), gts.len())));
        }
        for (a, b) in s.iter().zip(first) {
            if a.boxes.len() != b.boxes.len() || a.scores.len() != a.boxes.len() * a.num_classes {
                return Err(Error::Shape("stages disagree on the number of queries".into()));
            }
        }
    }
    let mut table = FlagTable {
        flags: Vec::new(),
        scores: Vec::new(),
    };
    for s in stages {
        let (mut f, mut sc) = (Vec::new(), Vec::new());
        for (p, g) in s.iter().zip(gts) {
            let (ff, ss) = flag_image(p, g, tau, floor);
            f.extend(ff);
            sc.extend(ss);
        }
        table.flags.push(f);
        table.scores.push(sc);
    }
    Ok(table)
}

fn check_reference(table: &FlagTable, reference: &[usize]) -> Result<usize> {
    let last = table.num_stages();
    if reference.is_empty() || reference.iter().any(|&r| r == 0 || r >= last) {
        return Err(Error::Contract(format!("reference stages {reference:?} must be earlier than stage {last}")));
    }
    Ok(last - 1)
}

/// Share of queries that are TP in any reference stage (1-based) but not at
/// the last stage. Zero when no reference TP exists.
pub fn tp_fading_rate(table: &FlagTable, reference: &[usize]) -> Result<f64> {
    let last = check_reference(table, reference)?;
    let (mut den, mut num) = (0usize, 0usize);
    for q in 0..table.flags[last].len() {
        if reference.iter().any(|&r| table.flags[r - 1][q] == QueryFlag::Tp) {
            den += 1;
            if table.flags[last][q] != QueryFlag::Tp {
                num += 1;
            }
        }
    }
    Ok(if den == 0 { 0.0 } else { num as f64 / den as f64 })
}

/// Share of last-stage FPs that were already FP in a reference stage with a
/// score no higher than at the last stage.
pub fn fp_exacerbation_rate(table: &FlagTable, reference: &[usize]) -> Result<f64> {
    let last = check_reference(table, reference)?;
    let (mut den, mut num) = (0usize, 0usize);
    for q in 0..table.flags[last].len() {
        if table.flags[last][q] != QueryFlag::Fp {
            continue;
        }
        den += 1;
        let final_score = table.scores[last][q];
        if reference
            .iter()
            .any(|&r| table.flags[r - 1][q] == QueryFlag::Fp && table.scores[r - 1][q] <= final_score)
        {
            num += 1;
        }
    }
    Ok(if den == 0 { 0.0 } else { num as f64 / den as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadingReport {
    pub tau: f64,
    /// e.g. "1", "2" or "1&2".
    pub reference: String,
    pub tp_f_rate: f64,
    pub fp_e_rate: f64,
}

/// Rates at τ ∈ {0.25, 0.5, 0.75} against one reference stage set, such as
/// `[1]`, `[2]` or the union `[1, 2]`. One row per τ.
pub fn fading_reports(
    stages: &[Vec<StageImagePredictions>],
    gts: &[ImageTargets],
    floor: f64,
    reference: &[usize],
) -> Result<Vec<FadingReport>> {
    let label = reference.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("&");
    [0.25, 0.5, 0.75]
        .into_iter()
        .map(|tau| {
            let table = stage_matchings(stages, gts, tau, floor)?;
            Ok(FadingReport {
                tau,
                reference: label.clone(),
                tp_f_rate: tp_fading_rate(&table, reference)?,
                fp_e_rate: fp_exacerbation_rate(&table, reference)?,
            })
        })
        .collect()
}
