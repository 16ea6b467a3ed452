//! Segmentation and grading scores, training losses with analytic
//! gradients, and fold-level aggregation.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::BinaryMask;

/// Lesion channels of the segmentation task, in file/channel order.
pub const LESION_CLASSES: [&str; 3] = ["irma", "na", "nv"];

fn check_mask_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `(|P|, |G|, |P∩G|)`.
fn overlap_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<(u64, u64, u64)> {
    check_mask_shapes(pred, gt)?;
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (a != 0, b != 0);
        p += a as u64;
        g += b as u64;
        both += (a && b) as u64;
    }
    Ok((p, g, both))
}

/// `2|P∩G| / (|P|+|G|)`, or 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (p, g, both) = overlap_counts(pred, gt)?;
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`, or 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (p, g, both) = overlap_counts(pred, gt)?;
    let union = p + g - both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(both as f64 / union as f64)
}

/// Per-class averages for one set of images.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegScores {
    /// `None` when no image's ground truth contains the class.
    pub dice: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    /// Mean of the defined per-class dice averages.
    pub mdsc: f64,
    pub miou: f64,
}

/// Score multi-channel predictions. A class is averaged only over images
/// whose ground truth contains it.
pub fn seg_report(preds: &[Vec<BinaryMask>], gts: &[Vec<BinaryMask>]) -> Result<SegScores> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("no images to evaluate"));
    }
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let channels = gts[0].len();
    let mut dice_sum = vec![0.0; channels];
    let mut iou_sum = vec![0.0; channels];
    let mut counts = vec![0usize; channels];
    for (i, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        if pred.len() != channels || gt.len() != channels {
            return Err(Error::ShapeMismatch(format!(
                "image {i}: expected {channels} channels"
            )));
        }
        for c in 0..channels {
            check_mask_shapes(&pred[c], &gt[c])?;
            if gt[c].count() == 0 {
                continue;
            }
            dice_sum[c] += dice(&pred[c], &gt[c])?;
            iou_sum[c] += iou(&pred[c], &gt[c])?;
            counts[c] += 1;
        }
    }
    let avg = |sums: &[f64]| -> Vec<Option<f64>> {
        sums.iter()
            .zip(&counts)
            .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
            .collect()
    };
    let dice = avg(&dice_sum);
    let iou = avg(&iou_sum);
    let mean_defined = |v: &[Option<f64>]| -> Result<f64> {
        let defined: Vec<f64> = v.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::UndefinedMetric(
                "no ground truth contains any class".into(),
            ));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(SegScores {
        mdsc: mean_defined(&dice)?,
        miou: mean_defined(&iou)?,
        dice,
        iou,
    })
}

/// Observed confusion matrix, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_labels(gt: &[usize], pred: &[usize], k: usize) -> Result<Self> {
        if gt.len() != pred.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ground-truth labels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let mut counts = vec![0u64; k * k];
        for (&g, &p) in gt.iter().zip(pred) {
            if g >= k || p >= k {
                return Err(Error::InvalidArgument(format!(
                    "label {} outside [0, {k})",
                    g.max(p)
                )));
            }
            counts[g * k + p] += 1;
        }
        Ok(Self { k, counts })
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Quadratic weighted kappa. Both weighted sums are accumulated in integers
/// (the `(K−1)²` normalisation and the `1/N` scaling of the expected matrix
/// cancel), so the result is exact up to the final division. A zero
/// expected disagreement gives 1.
pub fn qwk(gt: &[usize], pred: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need K >= 2, got {k}")));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("no labels"));
    }
    let cm = ConfusionMatrix::from_labels(gt, pred, k)?;
    let n = cm.total() as u128;
    let mut row = vec![0u128; k];
    let mut col = vec![0u128; k];
    for i in 0..k {
        for j in 0..k {
            let c = cm.get(i, j) as u128;
            row[i] += c;
            col[j] += c;
        }
    }
    let (mut observed, mut expected) = (0u128, 0u128);
    for i in 0..k {
        for j in 0..k {
            let w = (i.abs_diff(j) * i.abs_diff(j)) as u128;
            observed += w * cm.get(i, j) as u128;
            expected += w * row[i] * col[j];
        }
    }
    if expected == 0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n * observed) as f64 / expected as f64)
}

/// Mann–Whitney AUC of `scores` for the samples flagged positive; ties
/// count one half. `None` without positives or negatives.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks (1-based) of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&s| positive[s]).count();
        rank_sum += midrank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Result of [`auc_ovr`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AucReport {
    /// Macro average over the evaluated classes.
    pub macro_auc: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes without positives or without negatives.
    pub skipped: Vec<usize>,
}

/// Macro one-vs-rest AUC. `scores[i][c]` is sample `i`'s score for class `c`.
pub fn auc_ovr(scores: &[Vec<f64>], gt: &[usize], k: usize) -> Result<AucReport> {
    if scores.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} score rows for {} labels",
            scores.len(),
            gt.len()
        )));
    }
    if let Some(i) = scores.iter().position(|row| row.len() != k) {
        return Err(Error::ShapeMismatch(format!("score row {i} does not have {k} columns")));
    }
    if let Some(&g) = gt.iter().find(|&&g| g >= k) {
        return Err(Error::InvalidArgument(format!("label {g} outside [0, {k})")));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for c in 0..k {
        let column: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let positive: Vec<bool> = gt.iter().map(|&g| g == c).collect();
        let auc = binary_auc(&column, &positive);
        if auc.is_none() {
            skipped.push(c);
        }
        per_class.push(auc);
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(
            "every class lacks positives or negatives".into(),
        ));
    }
    if !skipped.is_empty() {
        log::warn!("AUC skipped classes {skipped:?}");
    }
    Ok(AucReport {
        macro_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
        skipped,
    })
}

fn check_channels(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<usize> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction channels vs {} ground-truth channels",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0;
    for (c, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "channel {c}: {} predictions vs {} targets",
                p.len(),
                g.len()
            )));
        }
        total += p.len();
    }
    Ok(total)
}

/// Soft Dice loss averaged over channels, with its gradient.
///
/// Per channel: `1 − (2Σpg + ε)/(Σp + Σg + ε)`.
pub fn soft_dice_loss(
    pred: &[Vec<f64>],
    gt: &[Vec<f64>],
    eps: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_channels(pred, gt)?;
    let c = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let num = 2.0 * inter + eps;
        let den = p.iter().sum::<f64>() + g.iter().sum::<f64>() + eps;
        loss += 1.0 - num / den;
        grad.push(
            g.iter()
                .map(|&gi| -(2.0 * gi * den - num) / (den * den) / c)
                .collect(),
        );
    }
    Ok((loss / c, grad))
}

/// Binary cross entropy averaged over every element of every channel.
/// Predictions are clamped to `[ε, 1−ε]`; the gradient is zero where the
/// clamp is active.
pub fn bce_loss(pred: &[Vec<f64>], gt: &[Vec<f64>], eps: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = check_channels(pred, gt)?;
    if n == 0 {
        return Err(Error::EmptyInput("no elements"));
    }
    let n = n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let mut gc = Vec::with_capacity(p.len());
        for (&pi, &gi) in p.iter().zip(g) {
            let q = pi.clamp(eps, 1.0 - eps);
            loss -= gi * q.ln() + (1.0 - gi) * (1.0 - q).ln();
            let d = if pi < eps || pi > 1.0 - eps {
                0.0
            } else {
                (-gi / q + (1.0 - gi) / (1.0 - q)) / n
            };
            gc.push(d);
        }
        grad.push(gc);
    }
    Ok((loss / n, grad))
}

/// Mean squared error and its gradient `2(p − g)/N`.
pub fn mse_loss(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("no samples"));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n;
    let grad = pred.iter().zip(gt).map(|(p, g)| 2.0 * (p - g) / n).collect();
    Ok((loss, grad))
}

/// Mean and standard error (sample standard deviation over √n).
pub fn mean_and_se(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub mean: f64,
    pub se: f64,
    /// Number of folds contributing.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    /// Class name, or `all` for aggregates.
    pub class: String,
    pub score: Score,
}

/// Scores summarised across folds.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Combine per-fold observations `(metric, class, value)`. Rows keep the
    /// order in which each `(metric, class)` pair first appears; folds where
    /// a pair is missing simply do not count towards it.
    pub fn from_folds(folds: &[Vec<(String, String, f64)>]) -> Result<Self> {
        let mut keys: Vec<(String, String)> = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        for fold in folds {
            for (metric, class, v) in fold {
                let key = (metric.clone(), class.clone());
                let idx = match keys.iter().position(|k| *k == key) {
                    Some(i) => i,
                    None => {
                        keys.push(key);
                        values.push(Vec::new());
                        keys.len() - 1
                    }
                };
                values[idx].push(*v);
            }
        }
        let mut rows = Vec::with_capacity(keys.len());
        for ((metric, class), vals) in keys.into_iter().zip(values) {
            let (mean, se) = mean_and_se(&vals)?;
            rows.push(MetricRow {
                metric,
                class,
                score: Score {
                    mean,
                    se,
                    n: vals.len(),
                },
            });
        }
        Ok(Self { rows })
    }

    pub fn get(&self, metric: &str, class: &str) -> Option<Score> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.class == class)
            .map(|r| r.score)
    }

    /// CSV block `metric,class,mean,se,n`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["metric", "class", "mean", "se", "n"])?;
        for r in &self.rows {
            w.write_record([
                r.metric.clone(),
                r.class.clone(),
                format!("{:.6}", r.score.mean),
                format!("{:.6}", r.score.se),
                r.score.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl SegScores {
    /// Flatten into `(metric, class, value)` observations for one fold.
    pub fn observations(&self, class_names: &[&str]) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for (c, name) in class_names.iter().enumerate() {
            if let Some(Some(d)) = self.dice.get(c) {
                out.push(("dice".to_string(), name.to_string(), *d));
            }
            if let Some(Some(i)) = self.iou.get(c) {
                out.push(("iou".to_string(), name.to_string(), *i));
            }
        }
        out.push(("mdsc".into(), "all".into(), self.mdsc));
        out.push(("miou".into(), "all".into(), self.miou));
        out
    }
}
