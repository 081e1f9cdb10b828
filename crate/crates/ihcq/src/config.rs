//! Run configuration: a TOML file layered over defaults, then flag
//! overrides. Every unknown or invalid key is reported, not just the first.

use std::path::Path;

use ihcq_core::detect::PeakParams;
use ihcq_core::inference::{StainBasis, StainParams};
use ihcq_core::metrics::DEFAULT_MAX_DIST;
use ihcq_core::quantify::{Cutoffs, SweepRange};
use ihcq_core::slide::{
    ResolutionSpec, DEFAULT_MIN_TISSUE_FRACTION, DEFAULT_WHITE_THRESHOLD, REFERENCE_MPP,
    REFERENCE_TILE,
};
use ihcq_core::annotations::DEFAULT_DISK_RADIUS;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{ConfigIssue, Error, Result};
use crate::fsutil;
use crate::manifest::TileOptions;
use crate::pipeline::{SlideOptions, SlideSynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Pca,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub grid_n: u32,
    /// Edge of each mosaic thumbnail in pixels.
    pub thumb_size: u32,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            grid_n: 8,
            thumb_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Resolution every tile is resampled to.
    pub reference_mpp: f64,
    /// Edge of generated synthetic tiles.
    pub tile_size: u32,
    pub white_threshold: u8,
    pub min_tissue_fraction: f64,
    pub workers: usize,
    /// Seed of every randomized command.
    pub seed: u64,
    /// Match radius in reference pixels.
    pub max_dist: f64,
    pub disk_radius: u32,
    pub peak: PeakParams,
    pub cutoffs: Cutoffs,
    pub sweep: SweepRange,
    pub stain: StainParams,
    pub synth: SlideSynthSpec,
    pub embed: EmbedConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            reference_mpp: REFERENCE_MPP,
            tile_size: REFERENCE_TILE,
            white_threshold: DEFAULT_WHITE_THRESHOLD,
            min_tissue_fraction: DEFAULT_MIN_TISSUE_FRACTION,
            workers: 1,
            seed: 0,
            max_dist: DEFAULT_MAX_DIST,
            disk_radius: DEFAULT_DISK_RADIUS,
            peak: PeakParams::default(),
            cutoffs: Cutoffs::default(),
            sweep: SweepRange::default(),
            stain: StainParams::default(),
            synth: SlideSynthSpec::default(),
            embed: EmbedConfig::default(),
        }
    }
}

/// Keys derived from others; setting them directly is an error.
const DERIVED_KEYS: [(&str, &str); 4] = [
    ("synth.tile.seed", "set the top-level `seed` instead"),
    ("synth.pmap.seed", "set the top-level `seed` instead"),
    ("synth.tile.width", "set `tile_size` instead"),
    ("synth.tile.height", "set `tile_size` instead"),
];

fn issue(key: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        key: key.into(),
        message: message.into(),
    }
}

fn default_table() -> Table {
    match Value::try_from(RunConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("default config serializes to a table"),
    }
}

/// Leaf key paths of `user`, flagging those absent from `defaults`.
fn walk(user: &Table, defaults: &Table, prefix: &str, leaves: &mut Vec<String>, issues: &mut Vec<ConfigIssue>) {
    for (k, v) in user {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (v, defaults.get(k)) {
            (_, None) => issues.push(issue(key, "unknown key")),
            (Value::Table(u), Some(Value::Table(d))) => walk(u, d, &key, leaves, issues),
            _ => leaves.push(key),
        }
    }
}

fn get<'a>(t: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = t.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn set(t: &mut Table, key: &str, value: Value) {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("intermediate config key is a table");
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
}

impl RunConfig {
    /// Parse TOML text over the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![issue("<syntax>", e.message())]))?;
        let defaults = default_table();
        let mut leaves = Vec::new();
        let mut issues = Vec::new();
        walk(&user, &defaults, "", &mut leaves, &mut issues);

        let mut merged = defaults.clone();
        for key in &leaves {
            if let Some((_, why)) = DERIVED_KEYS.iter().find(|(k, _)| k == key) {
                issues.push(issue(key, *why));
                continue;
            }
            // type-check each key on its own so every bad one is reported
            let mut probe = defaults.clone();
            let value = get(&user, key).expect("leaf exists").clone();
            set(&mut probe, key, value.clone());
            match Value::Table(probe).try_into::<RunConfig>() {
                Ok(_) => set(&mut merged, key, value),
                Err(e) => issues.push(issue(key, e.message().trim())),
            }
        }
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        let cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![issue("<config>", e.message())]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fsutil::read_to_string(path)?)
    }

    /// Value checks over the whole config; all failures are collected.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let mut check = |ok: bool, key: &str, message: &str| {
            if !ok {
                issues.push(issue(key, message));
            }
        };
        check(
            ResolutionSpec::new(self.reference_mpp).is_ok(),
            "reference_mpp",
            "must be positive",
        );
        check(self.tile_size > 0, "tile_size", "must be positive");
        check(
            (0.0..=1.0).contains(&self.min_tissue_fraction),
            "min_tissue_fraction",
            "must lie in [0, 1]",
        );
        check(self.workers >= 1, "workers", "must be at least 1");
        check(
            self.max_dist.is_finite() && self.max_dist >= 0.0,
            "max_dist",
            "must be a non-negative number",
        );
        check(self.disk_radius >= 1, "disk_radius", "must be at least 1");
        check(self.peak.min_distance >= 1, "peak.min_distance", "must be at least 1");
        check(
            self.peak.foreground_threshold > 0.0 && self.peak.foreground_threshold < 1.0,
            "peak.foreground_threshold",
            "must lie in (0, 1)",
        );
        check(
            self.cutoffs.validate().is_ok(),
            "cutoffs",
            "need 0 <= low < high <= 100",
        );
        check(
            self.sweep.values().is_ok(),
            "sweep",
            "need a positive step and valid (c1, c2) cutoffs",
        );
        check(
            StainBasis::new(self.stain.hematoxylin, self.stain.dab).is_ok(),
            "stain",
            "stain vectors must be non-zero and not collinear",
        );
        check(
            self.stain.softness.is_finite() && self.stain.softness > 0.0,
            "stain.softness",
            "must be positive",
        );
        check(
            self.stain.dab_threshold.is_finite() && self.stain.nuclear_threshold.is_finite(),
            "stain",
            "thresholds must be finite",
        );
        check(
            self.synth.grid_w >= 1 && self.synth.grid_h >= 1,
            "synth",
            "grid_w and grid_h must be at least 1",
        );
        check(
            self.synth.blank_tiles.iter().all(|&i| i < self.synth.grid_w * self.synth.grid_h),
            "synth.blank_tiles",
            "tile index outside the grid",
        );
        if let Err(e) = self.synth_spec().tile.validate() {
            issues.push(issue("synth.tile", e.to_string()));
        }
        let mut check = |ok: bool, key: &str, message: &str| {
            if !ok {
                issues.push(issue(key, message));
            }
        };
        check(self.embed.grid_n >= 2, "embed.grid_n", "must be at least 2");
        check(self.embed.thumb_size >= 1, "embed.thumb_size", "must be at least 1");
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    /// The synthetic slide spec with tile size and seeds filled in.
    pub fn synth_spec(&self) -> SlideSynthSpec {
        let mut s = self.synth.clone();
        s.tile.width = self.tile_size;
        s.tile.height = self.tile_size;
        s.tile.seed = self.seed;
        s.pmap.seed = self.seed.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
        s
    }

    pub fn target(&self) -> ResolutionSpec {
        ResolutionSpec::new(self.reference_mpp).expect("validated")
    }

    pub fn slide_options(&self) -> SlideOptions {
        SlideOptions {
            tiles: TileOptions {
                target: self.target(),
                min_tissue_fraction: self.min_tissue_fraction,
                white_threshold: self.white_threshold,
            },
            peak: self.peak,
            workers: self.workers,
        }
    }

    /// JSON snapshot for run manifests. The worker count is left out: it
    /// never changes results.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("workers");
        }
        v
    }

    pub fn from_snapshot(v: &serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v.clone())
            .map_err(|e| Error::Config(vec![issue("<snapshot>", e.to_string())]))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
