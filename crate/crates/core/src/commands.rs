//! File-level implementations of the command-line tools.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::{write_atomic, ImageSample};
use crate::degrade::apply_pipeline;
use crate::ensemble::{decode_ordinal, ensemble_reg, ensemble_seg, read_folds_csv, stratified_kfold};
use crate::error::{Error, Result};
use crate::growth::{simulate, Layer};
use crate::layout::build_layout;
use crate::metrics::{auc_ovr, qwk, seg_report, MetricReport, LESION_CLASSES};
use crate::pgm::{self, BitDepth};
use crate::raster::BinaryMask;

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

/// Degrade one image/mask pair, writing both under their original file
/// names into `out_dir`. Returns the transform log.
pub fn degrade_files(
    config: &RunConfig,
    image: &Path,
    mask: &Path,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<String>> {
    let sample = ImageSample::new(pgm::read_image(image)?, pgm::read_mask(mask)?);
    let out = apply_pipeline(&sample, &config.degrade, seed)?;
    fs::create_dir_all(out_dir)?;
    let depth = config.bit_depth();
    let name = |p: &Path| p.file_name().map(PathBuf::from).unwrap_or_else(|| "out.pgm".into());
    write_atomic(&out_dir.join(name(image)), &pgm::encode_image(&out.image, depth))?;
    write_atomic(&out_dir.join(name(mask)), &pgm::encode_mask(&out.mask, depth))?;
    Ok(out.meta.transform_log)
}

/// Read a `sample_id,<column>` file of non-negative integer labels.
pub fn read_labels(path: &Path, column: &str) -> Result<Vec<(String, usize)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::Format(format!("{} has no `{column}` column", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let raw = rec.get(idx).unwrap_or_default().trim();
        let label = raw
            .parse()
            .map_err(|_| Error::Format(format!("sample {id}: label {raw:?} is not a class index")))?;
        out.push((id, label));
    }
    Ok(out)
}

/// Stratified folds over a label file. Writes `sample_id,fold` and returns
/// the per-fold class histogram.
pub fn split(labels_csv: &Path, column: &str, k: usize, seed: u64, out: &Path) -> Result<Vec<Vec<usize>>> {
    let rows = read_labels(labels_csv, column)?;
    let ids: Vec<String> = rows.iter().map(|(id, _)| id.clone()).collect();
    let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
    let folds = stratified_kfold(&labels, k, seed)?;
    let mut buf = Vec::new();
    folds.write_csv(&ids, &mut buf)?;
    write_atomic(out, &buf)?;
    Ok(folds.histogram(&labels))
}

/// Sample ids of a directory holding `<id>_<class>.pgm` triples.
fn seg_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".pgm") else { continue };
        for class in LESION_CLASSES {
            if let Some(id) = stem.strip_suffix(&format!("_{class}")) {
                ids.insert(id.to_string());
            }
        }
    }
    Ok(ids)
}

fn seg_path(dir: &Path, id: &str, class: &str) -> PathBuf {
    dir.join(format!("{id}_{class}.pgm"))
}

fn require(path: PathBuf, id: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingFile {
            sample: id.to_string(),
            path,
        })
    }
}

fn read_triple(dir: &Path, id: &str) -> Result<Vec<BinaryMask>> {
    LESION_CLASSES
        .iter()
        .map(|c| pgm::read_mask(&require(seg_path(dir, id, c), id)?))
        .collect()
}

/// Group sample ids by fold; without a folds file everything is fold 0.
fn group_by_fold(ids: &[String], folds: Option<&Path>) -> Result<BTreeMap<usize, Vec<String>>> {
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    match folds {
        None => {
            groups.insert(0, ids.to_vec());
        }
        Some(path) => {
            let map = read_folds_csv(fs::File::open(path)?)?;
            for id in ids {
                let fold = map.get(id).ok_or_else(|| Error::MissingFile {
                    sample: id.clone(),
                    path: path.to_path_buf(),
                })?;
                groups.entry(*fold).or_default().push(id.clone());
            }
        }
    }
    Ok(groups)
}

/// Compare predicted and reference lesion masks. Each sample is three files
/// `<id>_irma.pgm`, `<id>_na.pgm`, `<id>_nv.pgm`.
pub fn evaluate_seg(pred_dir: &Path, gt_dir: &Path, folds: Option<&Path>) -> Result<MetricReport> {
    let gt_ids = seg_ids(gt_dir)?;
    let pred_ids = seg_ids(pred_dir)?;
    if let Some(id) = pred_ids.difference(&gt_ids).next() {
        return Err(Error::MissingFile {
            sample: id.clone(),
            path: seg_path(gt_dir, id, LESION_CLASSES[0]),
        });
    }
    let ids: Vec<String> = gt_ids.into_iter().collect();
    let mut per_fold = Vec::new();
    for (_, members) in group_by_fold(&ids, folds)? {
        let mut preds = Vec::with_capacity(members.len());
        let mut gts = Vec::with_capacity(members.len());
        for id in &members {
            gts.push(read_triple(gt_dir, id)?);
            preds.push(read_triple(pred_dir, id)?);
        }
        let scores = seg_report(&preds, &gts)?;
        per_fold.push(scores.observations(&LESION_CLASSES));
    }
    MetricReport::from_folds(&per_fold)
}

/// `sample_id,score_0..score_{K-1}` rows keyed by id.
fn read_scores(path: &Path, k: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let cols: Vec<usize> = (0..k)
        .map(|c| {
            let name = format!("score_{c}");
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Format(format!("{} has no `{name}` column", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let row = cols
            .iter()
            .map(|&c| {
                let raw = rec.get(c).unwrap_or_default().trim();
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("sample {id}: bad score {raw:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.insert(id, row);
    }
    Ok(out)
}

/// The ordinal grade implied by per-class scores: the score-weighted mean
/// class index, decoded by rounding.
pub fn grade_from_scores(scores: &[f64], k: usize) -> Result<usize> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scores {scores:?} do not sum to a positive value"
        )));
    }
    let expected: f64 = scores.iter().enumerate().map(|(i, s)| i as f64 * s).sum::<f64>() / total;
    Ok(decode_ordinal(expected, k))
}

/// QWK (on decoded grades) and macro AUC (on the per-class scores).
pub fn evaluate_grade(pred_csv: &Path, gt_csv: &Path, k: usize, folds: Option<&Path>) -> Result<MetricReport> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need K >= 2, got {k}")));
    }
    let preds = read_scores(pred_csv, k)?;
    let gt = read_labels(gt_csv, "label")?;
    let gt_ids: BTreeSet<&String> = gt.iter().map(|(id, _)| id).collect();
    if let Some(id) = preds.keys().find(|id| !gt_ids.contains(id)) {
        return Err(Error::Format(format!("prediction for unknown sample {id}")));
    }
    for (id, label) in &gt {
        if *label >= k {
            return Err(Error::InvalidArgument(format!(
                "sample {id}: label {label} outside [0, {k})"
            )));
        }
        if !preds.contains_key(id) {
            return Err(Error::Format(format!("no prediction for sample {id}")));
        }
    }
    let labels: BTreeMap<&String, usize> = gt.iter().map(|(id, l)| (id, *l)).collect();
    let ids: Vec<String> = gt.iter().map(|(id, _)| id.clone()).collect();
    let mut per_fold = Vec::new();
    for (_, members) in group_by_fold(&ids, folds)? {
        let truth: Vec<usize> = members.iter().map(|id| labels[id]).collect();
        let scores: Vec<Vec<f64>> = members.iter().map(|id| preds[id].clone()).collect();
        let decoded = scores
            .iter()
            .map(|s| grade_from_scores(s, k))
            .collect::<Result<Vec<_>>>()?;
        let mut obs = vec![("qwk".to_string(), "all".to_string(), qwk(&truth, &decoded, k)?)];
        match auc_ovr(&scores, &truth, k) {
            Ok(auc) => obs.push(("auc".into(), "all".into(), auc.macro_auc)),
            Err(Error::UndefinedMetric(msg)) => log::warn!("fold skipped for AUC: {msg}"),
            Err(e) => return Err(e),
        }
        per_fold.push(obs);
    }
    MetricReport::from_folds(&per_fold)
}

/// Average probability maps from several prediction directories and
/// threshold them. Every input directory must hold the same `<id>_<class>`
/// files; outputs reuse those names.
pub fn ensemble_seg_dirs(inputs: &[PathBuf], t: f64, out_dir: &Path) -> Result<usize> {
    let first = inputs.first().ok_or(Error::EmptyInput("no input directories"))?;
    let ids = seg_ids(first)?;
    for dir in &inputs[1..] {
        let other = seg_ids(dir)?;
        if let Some(id) = ids.symmetric_difference(&other).next() {
            let missing_in = if ids.contains(id) { dir } else { first };
            return Err(Error::MissingFile {
                sample: id.clone(),
                path: seg_path(missing_in, id, LESION_CLASSES[0]),
            });
        }
    }
    fs::create_dir_all(out_dir)?;
    for id in &ids {
        let models = inputs
            .iter()
            .map(|dir| {
                LESION_CLASSES
                    .iter()
                    .map(|c| pgm::read_image(&require(seg_path(dir, id, c), id)?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = ensemble_seg(&models, t)?;
        for (mask, class) in masks.iter().zip(LESION_CLASSES) {
            write_atomic(&seg_path(out_dir, id, class), &pgm::encode_mask(mask, BitDepth::Eight))?;
        }
    }
    Ok(ids.len())
}

/// Average per-sample score tables with identical headers and id sets.
pub fn ensemble_reg_csvs(inputs: &[PathBuf], out: &Path) -> Result<usize> {
    let mut header: Option<csv::StringRecord> = None;
    let mut tables: Vec<BTreeMap<String, Vec<f64>>> = Vec::new();
    let mut order: Vec<String> = Vec::new();
    for (n, path) in inputs.iter().enumerate() {
        let mut r = csv::Reader::from_path(path)?;
        let h = r.headers()?.clone();
        if h.len() < 2 {
            return Err(Error::Format(format!("{} needs sample_id and score columns", path.display())));
        }
        match &header {
            Some(first) if *first != h => {
                return Err(Error::ShapeMismatch(format!(
                    "{} has different columns from {}",
                    path.display(),
                    inputs[0].display()
                )))
            }
            _ => header = Some(h.clone()),
        }
        let mut table = BTreeMap::new();
        for rec in r.records() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or_default().to_string();
            let values = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("sample {id}: bad value {v:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if n == 0 {
                order.push(id.clone());
            }
            table.insert(id, values);
        }
        tables.push(table);
    }
    let header = header.ok_or(Error::EmptyInput("no input tables"))?;
    for (n, t) in tables.iter().enumerate() {
        if t.len() != order.len() || order.iter().any(|id| !t.contains_key(id)) {
            return Err(Error::ShapeMismatch(format!(
                "{} covers different samples from {}",
                inputs[n].display(),
                inputs[0].display()
            )));
        }
    }
    let columns = header.len() - 1;
    let mut buf = Vec::new();
    {
        let mut w = csv_writer(&mut buf);
        w.write_record(&header)?;
        for id in &order {
            let mut row = vec![id.clone()];
            for c in 0..columns {
                let per_model: Vec<Vec<f64>> = tables.iter().map(|t| vec![t[id][c]]).collect();
                row.push(format!("{}", ensemble_reg(&per_model)?[0]));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    write_atomic(out, &buf)?;
    Ok(order.len())
}

/// Simulate one forest set and write each requested layer's node table.
pub fn dump_forest(config: &RunConfig, seed: u64, layers: &[Layer], out: &mut dyn Write) -> Result<()> {
    let layout = build_layout(&config.layout)?;
    let mut sim_config = config.sim.clone();
    sim_config.seed = seed;
    let sim = simulate(&sim_config, &layout)?;
    for forest in sim.forests.iter().filter(|f| layers.contains(&f.layer)) {
        forest.write_dump(&mut *out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grade_is_the_rounded_expected_class() {
        assert_eq!(grade_from_scores(&[0.0, 0.0, 1.0], 3).unwrap(), 2);
        assert_eq!(grade_from_scores(&[0.2, 0.6, 0.2], 3).unwrap(), 1);
        assert_eq!(grade_from_scores(&[0.5, 0.0, 0.5], 3).unwrap(), 1);
        assert_eq!(grade_from_scores(&[0.9, 0.1, 0.0], 3).unwrap(), 0);
        assert!(grade_from_scores(&[0.0, 0.0, 0.0], 3).is_err());
    }
}
