//! Sample rendering and on-disk datasets.
//!
//! A dataset directory holds `img_NNNNN.pgm` / `lbl_NNNNN.pgm` pairs, a
//! `manifest.csv` with one row per finished sample, the resolved
//! `config.txt` and a `config.sha256` guard. Generation is resumable: the
//! longest prefix of manifest rows whose files are present with the right
//! size is kept and everything after it is regenerated.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::degrade::apply_pipeline;
use crate::error::{Error, Result};
use crate::growth::{simulate, Layer, Simulation};
use crate::layout::{build_layout, RetinaLayout};
use crate::pgm::{self, BitDepth};
use crate::raster::{self, BinaryMask, GrayImage};
use crate::rng;

/// Stream index of the degradation seed, after the two layer streams.
const DEGRADE_STREAM: u64 = 2;

pub const MANIFEST: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "sample_id,seed,vessel_fraction,transform_log";
const HASH_FILE: &str = "config.sha256";
const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub config_hash: String,
    pub transform_log: Vec<String>,
    pub terminal_counts: Vec<(Layer, usize)>,
    pub segment_count: usize,
    /// Vessel pixels of the clean mask over FOV pixels.
    pub vessel_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: GrayImage,
    pub mask: BinaryMask,
    /// Mask of the thick vessels only, used for flow-projection ghosts.
    pub large_vessels: Option<BinaryMask>,
    pub meta: SampleMeta,
}

impl ImageSample {
    pub fn new(image: GrayImage, mask: BinaryMask) -> Self {
        Self {
            image,
            mask,
            large_vessels: None,
            meta: SampleMeta::default(),
        }
    }
}

pub fn image_name(i: usize) -> String {
    format!("img_{i:05}.pgm")
}

pub fn label_name(i: usize) -> String {
    format!("lbl_{i:05}.pgm")
}

/// Simulate and rasterise one clean sample.
pub fn render_clean(config: &RunConfig, layout: &RetinaLayout, seed: u64) -> Result<(ImageSample, Simulation)> {
    let mut sim_config = config.sim.clone();
    sim_config.seed = seed;
    let sim = simulate(&sim_config, layout)?;
    let spec = config.image_spec()?;
    let image = raster::draw_forest(&sim.forests, &spec)?;
    let mask = raster::ground_truth(&sim.forests, &spec)?;
    let cutoff = config.degrade.flow.radius_cutoff_mm;
    let large = raster::ground_truth_where(&sim.forests, &spec, |r| r > cutoff)?;
    let fov = raster::fov_mask(layout, &spec);
    let meta = SampleMeta {
        seed,
        config_hash: config.content_hash(),
        transform_log: Vec::new(),
        terminal_counts: sim.forests.iter().map(|f| (f.layer, f.terminal_count())).collect(),
        segment_count: sim.forests.iter().map(|f| f.segment_count()).sum(),
        vessel_fraction: raster::vessel_fraction(&mask, &fov),
    };
    let sample = ImageSample {
        image,
        mask,
        large_vessels: Some(large),
        meta,
    };
    Ok((sample, sim))
}

/// Full sample: clean render followed by the degradation pipeline.
pub fn render_sample(config: &RunConfig, layout: &RetinaLayout, seed: u64) -> Result<ImageSample> {
    let (clean, _) = render_clean(config, layout, seed)?;
    let band = config.vessel_fraction_band;
    let f = clean.meta.vessel_fraction;
    if f < band.lo || f > band.hi {
        log::warn!("seed {seed}: vessel fraction {f:.4} outside {}..{}", band.lo, band.hi);
    }
    apply_pipeline(&clean, &config.degrade, rng::derive_seed(seed, DEGRADE_STREAM))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub sample_id: usize,
    pub seed: u64,
    pub vessel_fraction: f64,
    /// Log entries joined with `|`.
    pub transform_log: String,
}

impl ManifestRow {
    fn line(&self) -> String {
        format!(
            "{},{},{:.6},{}\n",
            self.sample_id, self.seed, self.vessel_fraction, self.transform_log
        )
    }

    fn parse(line: &str) -> Option<Self> {
        let mut parts = line.splitn(4, ',');
        Some(Self {
            sample_id: parts.next()?.parse().ok()?,
            seed: parts.next()?.parse().ok()?,
            vessel_fraction: parts.next()?.parse().ok()?,
            transform_log: parts.next()?.to_string(),
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(MANIFEST_HEADER) => {}
        _ => return Err(Error::Format(format!("{} lacks the manifest header", path.display()))),
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            ManifestRow::parse(l)
                .ok_or_else(|| Error::Format(format!("manifest row {} is malformed", i + 1)))
        })
        .collect()
}

/// Write through a temporary sibling and rename, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn pgm_size(config: &RunConfig) -> u64 {
    let n = config.image.size;
    let depth = config.bit_depth();
    let header = format!("P5\n{n} {n}\n{}\n", depth.maxval()).len();
    let per = if depth == BitDepth::Sixteen { 2 } else { 1 };
    (header + n * n * per) as u64
}

fn sample_complete(dir: &Path, i: usize, size: u64) -> bool {
    [image_name(i), label_name(i)]
        .iter()
        .all(|name| fs::metadata(dir.join(name)).is_ok_and(|m| m.is_file() && m.len() == size))
}

fn check_hash(dir: &Path, hash: &str) -> Result<()> {
    let path = dir.join(HASH_FILE);
    match fs::read_to_string(&path) {
        Ok(existing) if existing.trim() != hash => Err(Error::InvalidConfig(format!(
            "{} was generated with a different configuration",
            dir.display()
        ))),
        Ok(_) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            write_atomic(&path, format!("{hash}\n").as_bytes())
        }
        Err(e) => Err(e.into()),
    }
}

/// Rows of an existing manifest that can be kept: consecutive ids from 0
/// whose files are complete, capped at the requested sample count.
fn resumable_prefix(config: &RunConfig, dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let rows = match read_manifest(&path) {
        Ok(rows) => rows,
        Err(Error::Format(msg)) => {
            log::warn!("discarding manifest: {msg}");
            return Ok(Vec::new());
        }
        Err(e) => return Err(e),
    };
    let size = pgm_size(config);
    let mut keep = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        if i >= config.samples
            || row.sample_id != i
            || row.seed != rng::derive_seed(config.seed, i as u64)
            || !sample_complete(dir, i, size)
        {
            break;
        }
        keep.push(row);
    }
    Ok(keep)
}

fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut text = format!("{MANIFEST_HEADER}\n");
    for r in rows {
        text.push_str(&r.line());
    }
    write_atomic(path, text.as_bytes())
}

/// Generate (or finish generating) the dataset described by `config`,
/// using `jobs` worker threads. Output is identical for any `jobs`.
pub fn generate_dataset(config: &RunConfig, jobs: usize) -> Result<Vec<ManifestRow>> {
    config.validate()?;
    let layout = build_layout(&config.layout)?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    let hash = config.content_hash();
    check_hash(dir, &hash)?;
    write_atomic(&dir.join(CONFIG_FILE), config.snapshot_text().as_bytes())?;

    let manifest_path = dir.join(MANIFEST);
    let mut rows = resumable_prefix(config, dir)?;
    write_manifest(&manifest_path, &rows)?;
    if !rows.is_empty() {
        log::info!("resuming after {} complete samples", rows.len());
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let depth = config.bit_depth();
    let chunk = jobs.max(1) * 2;
    let mut manifest = BufWriter::new(OpenOptions::new().append(true).open(&manifest_path)?);

    let mut next = rows.len();
    while next < config.samples {
        let end = (next + chunk).min(config.samples);
        let produced: Vec<Result<ManifestRow>> = pool.install(|| {
            (next..end)
                .into_par_iter()
                .map(|i| {
                    let seed = rng::derive_seed(config.seed, i as u64);
                    let sample = render_sample(config, &layout, seed)?;
                    write_atomic(&dir.join(image_name(i)), &pgm::encode_image(&sample.image, depth))?;
                    write_atomic(&dir.join(label_name(i)), &pgm::encode_mask(&sample.mask, depth))?;
                    Ok(ManifestRow {
                        sample_id: i,
                        seed,
                        vessel_fraction: sample.meta.vessel_fraction,
                        transform_log: sample.meta.transform_log.join("|"),
                    })
                })
                .collect()
        });
        for row in produced {
            let row = row?;
            manifest.write_all(row.line().as_bytes())?;
            log::info!("sample {} done", row.sample_id);
            rows.push(row);
        }
        manifest.flush()?;
        next = end;
    }
    manifest.get_ref().sync_all()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> RunConfig {
        let mut c = RunConfig::default();
        c.samples = 2;
        c.seed = 17;
        c.output_dir = dir.to_path_buf();
        c.image.size = 128;
        c.sim.grid_cells = 60;
        c.sim.svc.target_terminal_count = 20;
        c.sim.dvc.target_terminal_count = 30;
        c
    }

    #[test]
    fn manifest_rows_round_trip() {
        let r = ManifestRow {
            sample_id: 3,
            seed: 99,
            vessel_fraction: 0.125,
            transform_log: "a x=1|b".into(),
        };
        assert_eq!(ManifestRow::parse(r.line().trim_end()).unwrap(), r);
    }

    #[test]
    fn generates_and_refuses_foreign_config() {
        let tmp = tempfile::tempdir().unwrap();
        let c = small_config(tmp.path());
        let rows = generate_dataset(&c, 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(tmp.path().join(image_name(1)).exists());
        let text = fs::read_to_string(tmp.path().join(MANIFEST)).unwrap();
        assert!(text.starts_with(MANIFEST_HEADER));
        assert_eq!(text.lines().count(), 3);

        let mut other = c.clone();
        other.seed = 18;
        assert!(matches!(generate_dataset(&other, 1), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn degradation_free_sample_keeps_mask_inside_signal() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = small_config(tmp.path());
        c.degrade = crate::degrade::DegradeConfig::disabled();
        let layout = build_layout(&c.layout).unwrap();
        let s = render_sample(&c, &layout, 5).unwrap();
        assert!(s.meta.transform_log.is_empty());
        for (m, v) in s.mask.data.iter().zip(&s.image.data) {
            if *m == 1 {
                assert!(*v > 0.0);
            }
        }
    }
}
