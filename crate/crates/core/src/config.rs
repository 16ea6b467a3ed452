//! Run configuration in a flat `key = value` text format.
//!
//! ```text
//! # comment
//! samples = 8
//! svc.terminal_radius_mm = 0.01
//! background.gain = 0.5..1.5
//! ```
//!
//! Keys are the dotted paths of [`RunConfig`]'s fields, with the simulation
//! and degradation sections at top level (`murray_exponent`, `svc.*`,
//! `dvc.*`, `background.*`, `geometric.*`, …). Ranges are written `lo..hi`.
//! Missing keys keep their defaults; unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::degrade::{DegradeConfig, Span};
use crate::error::{Error, Result};
use crate::growth::SimConfig;
use crate::layout::LayoutConfig;
use crate::pgm::BitDepth;
use crate::raster::ImageSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageConfig {
    /// Pixels per side.
    pub size: usize,
    /// 8 or 16.
    pub bit_depth: u8,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            size: 1024,
            bit_depth: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub samples: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Acceptable vessel-pixel fraction of the FOV; samples outside it are
    /// logged, not rejected.
    pub vessel_fraction_band: Span<f64>,
    pub layout: LayoutConfig,
    pub image: ImageConfig,
    #[serde(flatten)]
    pub sim: SimConfig,
    #[serde(flatten)]
    pub degrade: DegradeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            samples: 1,
            seed: 0,
            output_dir: PathBuf::from("dataset"),
            vessel_fraction_band: Span::new(0.04, 0.30),
            layout: LayoutConfig::default(),
            image: ImageConfig::default(),
            sim: SimConfig::default(),
            degrade: DegradeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::validation("samples", "must be >= 1"));
        }
        if self.image.size == 0 {
            return Err(Error::validation("image.size", "must be >= 1"));
        }
        if !matches!(self.image.bit_depth, 8 | 16) {
            return Err(Error::validation("image.bit_depth", "must be 8 or 16"));
        }
        let band = self.vessel_fraction_band;
        if !(0.0 <= band.lo && band.lo <= band.hi && band.hi <= 1.0) {
            return Err(Error::validation(
                "vessel_fraction_band",
                format!("{}..{} is not an ordered range in [0, 1]", band.lo, band.hi),
            ));
        }
        self.layout.validate()?;
        self.sim.validate()?;
        self.degrade.validate()?;
        Ok(())
    }

    pub fn image_spec(&self) -> Result<ImageSpec> {
        ImageSpec::square(self.image.size, self.layout.extent_mm)
    }

    pub fn bit_depth(&self) -> BitDepth {
        if self.image.bit_depth == 16 {
            BitDepth::Sixteen
        } else {
            BitDepth::Eight
        }
    }

    /// SHA-256 (hex) of everything that affects sample content. The sample
    /// count and output directory are excluded so a dataset can be extended
    /// or moved.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Value::Object(map) = &mut v {
            map.remove("samples");
            map.remove("output_dir");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Every key with its current value, in the text format.
    pub fn to_text(&self) -> String {
        self.text_without(&[])
    }

    /// The text form with `output_dir` left out, as stored next to a dataset.
    pub fn snapshot_text(&self) -> String {
        self.text_without(&["output_dir"])
    }

    fn text_without(&self, skip: &[&str]) -> String {
        let v = serde_json::to_value(self).expect("config serialises");
        let mut out = String::new();
        for (key, leaf) in leaves(&v) {
            if skip.contains(&key.as_str()) {
                continue;
            }
            let _ = writeln!(out, "{key} = {}", render(leaf));
        }
        out
    }
}

fn leaves(v: &Value) -> Vec<(String, &Value)> {
    fn walk<'a>(prefix: &str, v: &'a Value, out: &mut Vec<(String, &'a Value)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            _ => out.push((prefix.to_string(), v)),
        }
    }
    let mut out = Vec::new();
    walk("", v, &mut out);
    out
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) if items.len() == 2 => format!("{}..{}", render(&items[0]), render(&items[1])),
        other => other.to_string(),
    }
}

fn parse_scalar(raw: &str, like: &Value) -> std::result::Result<Value, String> {
    match like {
        Value::Bool(_) => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("expected true or false, found {raw:?}")),
        },
        Value::Number(n) if n.is_f64() => raw
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a finite number, found {raw:?}")),
        Value::Number(_) => {
            if let Ok(i) = raw.parse::<i64>() {
                Ok(Value::from(i))
            } else if let Ok(u) = raw.parse::<u64>() {
                Ok(Value::from(u))
            } else {
                Err(format!("expected an integer, found {raw:?}"))
            }
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        _ => Err("unsupported value type".into()),
    }
}

fn parse_value(raw: &str, like: &Value) -> std::result::Result<Value, String> {
    match like {
        Value::Array(items) if items.len() == 2 => {
            let (lo, hi) = raw
                .split_once("..")
                .ok_or_else(|| format!("expected a range lo..hi, found {raw:?}"))?;
            Ok(Value::Array(vec![
                parse_scalar(lo.trim(), &items[0])?,
                parse_scalar(hi.trim(), &items[1])?,
            ]))
        }
        other => parse_scalar(raw, other),
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .and_then(|m| m.get_mut(*part))
            .expect("key validated against the defaults");
    }
    if let Some(map) = cur.as_object_mut() {
        map.insert(parts[parts.len() - 1].to_string(), v);
    }
}

fn unquote(s: &str) -> &str {
    let b = s.as_bytes();
    if b.len() >= 2 && (b[0] == b'"' && b[b.len() - 1] == b'"') {
        &s[1..s.len() - 1]
    } else {
        s
    }
}

/// Parse and validate a configuration text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serialises");
    let known: Map<String, Value> = leaves(&defaults)
        .into_iter()
        .map(|(k, v)| (k, v.clone()))
        .collect();
    let mut tree = defaults.clone();
    let mut seen = std::collections::HashSet::new();
    let mut config = RunConfig::default();

    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `key = value`, found {content:?}"),
        })?;
        let (key, value) = (key.trim(), unquote(value.trim()));
        let like = known.get(key).ok_or_else(|| Error::Parse {
            line,
            msg: format!("unknown key `{key}`"),
        })?;
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
        let parsed = parse_value(value, like).map_err(|msg| Error::Parse {
            line,
            msg: format!("`{key}`: {msg}"),
        })?;
        set_path(&mut tree, key, parsed);
        config = serde_json::from_value(tree.clone()).map_err(|e| Error::Parse {
            line,
            msg: format!("`{key}`: {e}"),
        })?;
    }
    config.validate()?;
    Ok(config)
}
