//! Model ensembling, ordinal decoding and stratified cross-validation folds.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, GrayImage};
use crate::rng;

/// Order-independent mean: values are sorted before summation so any
/// permutation of the inputs gives bit-identical output, and replicating
/// one value n times gives the value back.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let mut m = 0.0;
    for (i, &v) in values.iter().enumerate() {
        m += (v - m) / (i + 1) as f64;
    }
    m
}

/// Average per-pixel probability maps over models and threshold at `t`.
///
/// `models[m][c]` is model `m`'s probability map for class `c`. Inputs are
/// probabilities; any sigmoid is the producer's job.
pub fn ensemble_seg(models: &[Vec<GrayImage>], t: f64) -> Result<Vec<BinaryMask>> {
    let first = models
        .first()
        .ok_or(Error::EmptyInput("ensemble needs at least one model"))?;
    for (m, maps) in models.iter().enumerate() {
        if maps.len() != first.len() {
            return Err(Error::ShapeMismatch(format!(
                "model {m} has {} classes, model 0 has {}",
                maps.len(),
                first.len()
            )));
        }
        for (c, map) in maps.iter().enumerate() {
            if (map.width, map.height) != (first[c].width, first[c].height) {
                return Err(Error::ShapeMismatch(format!(
                    "model {m} class {c}: {}x{} vs {}x{}",
                    map.width, map.height, first[c].width, first[c].height
                )));
            }
        }
    }
    let mut out = Vec::with_capacity(first.len());
    let mut buf = vec![0.0; models.len()];
    for (c, proto) in first.iter().enumerate() {
        let mut mask = BinaryMask::new(proto.width, proto.height);
        for i in 0..proto.data.len() {
            for (slot, maps) in buf.iter_mut().zip(models) {
                *slot = maps[c].data[i] as f64;
            }
            mask.data[i] = u8::from(stable_mean(&mut buf) >= t);
        }
        out.push(mask);
    }
    Ok(out)
}

/// Per-sample mean of regression outputs; `models[m][i]` is model `m`'s
/// score for sample `i`.
pub fn ensemble_reg(models: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or(Error::EmptyInput("ensemble needs at least one model"))?;
    if let Some(m) = models.iter().position(|v| v.len() != first.len()) {
        return Err(Error::ShapeMismatch(format!(
            "model {m} has {} samples, model 0 has {}",
            models[m].len(),
            first.len()
        )));
    }
    let mut buf = vec![0.0; models.len()];
    Ok((0..first.len())
        .map(|i| {
            for (slot, m) in buf.iter_mut().zip(models) {
                *slot = m[i];
            }
            stable_mean(&mut buf)
        })
        .collect())
}

/// Round half away from zero, then clamp into `[0, K−1]`.
pub fn decode_ordinal(score: f64, k: usize) -> usize {
    let top = k.saturating_sub(1) as f64;
    let r = score.round();
    if r.is_nan() {
        return 0;
    }
    r.clamp(0.0, top) as usize
}

/// Fold id for each sample index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    /// Sample indices of fold `f`, ascending.
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == f).collect()
    }

    /// `counts[f][c]`: samples of class `c` in fold `f`.
    pub fn histogram(&self, labels: &[usize]) -> Vec<Vec<usize>> {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0; classes]; self.k];
        for (&f, &l) in self.folds.iter().zip(labels) {
            counts[f][l] += 1;
        }
        counts
    }

    /// CSV `sample_id,fold`.
    pub fn write_csv<W: Write>(&self, ids: &[String], out: W) -> Result<()> {
        if ids.len() != self.folds.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids for {} assignments",
                ids.len(),
                self.folds.len()
            )));
        }
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["sample_id", "fold"])?;
        for (id, f) in ids.iter().zip(&self.folds) {
            w.write_record([id.as_str(), &f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Read a `sample_id,fold` file into an id → fold map.
pub fn read_folds_csv<R: Read>(input: R) -> Result<BTreeMap<String, usize>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let (Some(id), Some(fold)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Format("folds file needs sample_id,fold".into()));
        };
        let fold = fold
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad fold id {fold:?} for {id}")))?;
        out.insert(id.to_string(), fold);
    }
    Ok(out)
}

/// Shuffle each class with a seeded stream and deal its members to folds in
/// turn. The dealer position carries over from one class to the next, so
/// fold sizes stay within one of each other as well as per class.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need k >= 2, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} samples",
            labels.len()
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = rng::stream(seed, 0);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f32]) -> GrayImage {
        GrayImage::from_data(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn pixel_mean_fixture() {
        let a = vec![map(&[0.6, 0.9])];
        let b = vec![map(&[0.3, 0.2])];
        let out = ensemble_seg(&[a, b], 0.5).unwrap();
        assert_eq!(out[0].data, vec![0, 1]);
    }

    #[test]
    fn single_model_is_thresholding() {
        let a = vec![map(&[0.49, 0.5, 0.51, 0.0, 1.0])];
        let out = ensemble_seg(std::slice::from_ref(&a), 0.5).unwrap();
        assert_eq!(out[0].data, vec![0, 1, 1, 0, 1]);
    }

    #[test]
    fn ensemble_errors() {
        assert!(matches!(ensemble_seg(&[], 0.5), Err(Error::EmptyInput(_))));
        let a = vec![map(&[0.1, 0.2])];
        let b = vec![map(&[0.1])];
        assert!(matches!(ensemble_seg(&[a, b], 0.5), Err(Error::ShapeMismatch(_))));
        assert!(ensemble_reg(&[]).is_err());
        assert!(ensemble_reg(&[vec![1.0], vec![]]).is_err());
    }

    #[test]
    fn regression_mean() {
        let out = ensemble_reg(&[vec![0.8, 2.0], vec![1.6, 2.0]]).unwrap();
        assert!((out[0] - 1.2).abs() < 1e-15);
        assert_eq!(out[1], 2.0);
    }

    #[test]
    fn ordinal_decoding() {
        assert_eq!(decode_ordinal(1.4, 3), 1);
        assert_eq!(decode_ordinal(-0.3, 3), 0);
        assert_eq!(decode_ordinal(0.5, 3), 1);
        assert_eq!(decode_ordinal(1.5, 3), 2);
        assert_eq!(decode_ordinal(7.0, 3), 2);
    }

    #[test]
    fn even_split_of_one_class() {
        let f = stratified_kfold(&[0; 10], 5, 3).unwrap();
        for fold in 0..5 {
            assert_eq!(f.members(fold).len(), 2);
        }
        let f = stratified_kfold(&[0; 4], 2, 3).unwrap();
        assert_eq!(f.members(0).len(), 2);
        assert!(stratified_kfold(&[0; 4], 5, 0).is_err());
    }

    #[test]
    fn folds_csv_round_trip() {
        let f = stratified_kfold(&[0, 1, 0, 1], 2, 9).unwrap();
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let mut buf = Vec::new();
        f.write_csv(&ids, &mut buf).unwrap();
        assert!(buf.starts_with(b"sample_id,fold\n"));
        let back = read_folds_csv(buf.as_slice()).unwrap();
        for (i, id) in ids.iter().enumerate() {
            assert_eq!(back[id], f.folds[i]);
        }
    }
}
