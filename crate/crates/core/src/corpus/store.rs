//! On-disk tile feature store.
//!
//! Layout: `<dir>/manifest.json` plus one `<slide_id>.npyish` per slide. Each
//! slide file is little-endian: magic `PTPF`, u32 version, u32 tile count M,
//! u32 feature dimension d, then M records of (u32 row, u32 col, i32 gt label
//! or -1, d × f32), then the u32 slide label.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelSpace, SlideRecord, Split, Tile};
use crate::error::{Error, Result};
use crate::text::TextEncoderConfig;

pub const STORE_SCHEMA_VERSION: u32 = 1;
const SLIDE_MAGIC: &[u8; 4] = b"PTPF";
const SLIDE_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const SLIDE_EXT: &str = "npyish";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub grid_h: u32,
    pub grid_w: u32,
    pub slide_label: usize,
    pub split: Split,
    pub num_tiles: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dim: usize,
    pub labels: LabelSpace,
    /// Present when the features come from the synthetic generator, so the
    /// matching text encoder can be rebuilt.
    #[serde(default)]
    pub text_encoder: Option<TextEncoderConfig>,
    pub slides: Vec<SlideEntry>,
}

/// Everything a feature-store directory holds.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub labels: LabelSpace,
    pub dim: usize,
    pub text_encoder: Option<TextEncoderConfig>,
    pub slides: Vec<SlideRecord>,
}

fn valid_slide_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && id != MANIFEST.trim_end_matches(".json")
}

fn encode_slide(slide: &SlideRecord, dim: usize) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + slide.tiles.len() * (12 + 4 * dim) + 4);
    buf.extend_from_slice(SLIDE_MAGIC);
    buf.extend_from_slice(&SLIDE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(slide.tiles.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for t in &slide.tiles {
        buf.extend_from_slice(&t.row.to_le_bytes());
        buf.extend_from_slice(&t.col.to_le_bytes());
        let gt = t.gt_label.map_or(-1i32, |g| g as i32);
        buf.extend_from_slice(&gt.to_le_bytes());
        for f in &t.feature {
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(slide.slide_label as u32).to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let out = self.bytes.get(self.pos..self.pos + N)?.try_into().ok()?;
        self.pos += N;
        Some(out)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
    fn i32(&mut self) -> Option<i32> {
        self.take::<4>().map(i32::from_le_bytes)
    }
    fn f32(&mut self) -> Option<f32> {
        self.take::<4>().map(f32::from_le_bytes)
    }
}

fn decode_slide(entry: &SlideEntry, bytes: &[u8], dim: usize) -> Result<SlideRecord> {
    let fail = |reason: &str| Error::Load { slide: entry.slide_id.clone(), reason: reason.to_string() };
    let truncated = || fail("truncated slide file");
    let mut r = Reader { bytes, pos: 0 };
    if r.take::<4>().as_ref() != Some(SLIDE_MAGIC) {
        return Err(fail("bad magic, expected PTPF"));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != SLIDE_VERSION {
        return Err(fail(&format!("unsupported slide file version {version}")));
    }
    let m = r.u32().ok_or_else(truncated)? as usize;
    let d = r.u32().ok_or_else(truncated)? as usize;
    if d != dim {
        return Err(fail(&format!("feature dimension {d} does not match manifest dimension {dim}")));
    }
    if m != entry.num_tiles {
        return Err(fail(&format!("tile count {m} does not match manifest count {}", entry.num_tiles)));
    }
    let expected_len = 16 + m * (12 + 4 * d) + 4;
    if bytes.len() != expected_len {
        return Err(fail(&format!("file is {} bytes, header implies {expected_len}", bytes.len())));
    }
    let mut tiles = Vec::with_capacity(m);
    let mut seen = HashSet::with_capacity(m);
    for _ in 0..m {
        let row = r.u32().ok_or_else(truncated)?;
        let col = r.u32().ok_or_else(truncated)?;
        let gt = r.i32().ok_or_else(truncated)?;
        let gt_label = match gt {
            -1 => None,
            g if g >= 0 => Some(g as usize),
            g => return Err(fail(&format!("invalid gt label {g}"))),
        };
        if !seen.insert((row, col)) {
            return Err(fail(&format!("duplicate tile coordinate ({row}, {col})")));
        }
        let feature = (0..d).map(|_| r.f32()).collect::<Option<Vec<f32>>>().ok_or_else(truncated)?;
        tiles.push(Tile { row, col, feature, gt_label });
    }
    let label = r.u32().ok_or_else(truncated)? as usize;
    if label != entry.slide_label {
        return Err(fail(&format!("slide label {label} disagrees with manifest label {}", entry.slide_label)));
    }
    Ok(SlideRecord {
        slide_id: entry.slide_id.clone(),
        grid_h: entry.grid_h,
        grid_w: entry.grid_w,
        tiles,
        slide_label: label,
        split: entry.split,
    })
}

impl FeatureStore {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.slides.len());
        let mut ids = HashSet::new();
        for slide in &self.slides {
            if !valid_slide_id(&slide.slide_id) {
                return Err(Error::Load { slide: slide.slide_id.clone(), reason: "slide id is not filename-safe".into() });
            }
            if !ids.insert(slide.slide_id.as_str()) {
                return Err(Error::Load { slide: slide.slide_id.clone(), reason: "duplicate slide id".into() });
            }
            slide.validate(self.dim, self.labels.len())?;
            let file = format!("{}.{SLIDE_EXT}", slide.slide_id);
            fs::write(dir.join(&file), encode_slide(slide, self.dim))?;
            entries.push(SlideEntry {
                slide_id: slide.slide_id.clone(),
                grid_h: slide.grid_h,
                grid_w: slide.grid_w,
                slide_label: slide.slide_label,
                split: slide.split,
                num_tiles: slide.tiles.len(),
                file,
            });
        }
        let manifest = Manifest {
            schema_version: STORE_SCHEMA_VERSION,
            dim: self.dim,
            labels: self.labels.clone(),
            text_encoder: self.text_encoder.clone(),
            slides: entries,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST);
        let store_err = |reason: String| Error::Store { path: manifest_path.clone(), reason };
        let text = fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| store_err(e.to_string()))?;
        if manifest.schema_version != STORE_SCHEMA_VERSION {
            return Err(store_err(format!("unsupported schema version {}", manifest.schema_version)));
        }
        if manifest.dim == 0 {
            return Err(store_err("feature dimension must be positive".into()));
        }
        let mut slides = Vec::with_capacity(manifest.slides.len());
        let mut ids = HashSet::new();
        for entry in &manifest.slides {
            if !valid_slide_id(&entry.slide_id) || !ids.insert(entry.slide_id.clone()) {
                return Err(Error::Load { slide: entry.slide_id.clone(), reason: "invalid or duplicate slide id".into() });
            }
            let path: PathBuf = dir.join(&entry.file);
            let bytes = fs::read(&path)
                .map_err(|e| Error::Load { slide: entry.slide_id.clone(), reason: format!("{}: {e}", path.display()) })?;
            let slide = decode_slide(entry, &bytes, manifest.dim)?;
            slide.validate(manifest.dim, manifest.labels.len())?;
            slides.push(slide);
        }
        Ok(Self { labels: manifest.labels, dim: manifest.dim, text_encoder: manifest.text_encoder, slides })
    }
}

pub fn write_feature_store(store: &FeatureStore, dir: impl AsRef<Path>) -> Result<()> {
    store.write(dir)
}

pub fn read_feature_store(dir: impl AsRef<Path>) -> Result<FeatureStore> {
    FeatureStore::read(dir)
}
