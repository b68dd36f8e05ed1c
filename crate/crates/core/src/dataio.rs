//! Frame-sequence datasets: directory-of-images clips, manifests and chunking.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Smallest frame side the encoder accepts (three stride-2 stages plus pooling).
pub const MIN_SIDE: usize = 32;

/// One RGB frame, stored planar (channel-major) with values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Frame {
    clip_id: Arc<str>,
    frame_idx: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Frame")
            .field("clip_id", &self.clip_id)
            .field("frame_idx", &self.frame_idx)
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl Frame {
    /// `data` is planar RGB: `data[c * h * w + y * w + x]`.
    pub fn new(
        clip_id: impl Into<Arc<str>>,
        frame_idx: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Param(format!(
                "frame {height}x{width} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "frame buffer has {} values, expected {}",
                data.len(),
                3 * height * width
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Param(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            frame_idx,
            height,
            width,
            data,
        })
    }

    pub fn filled(clip_id: &str, frame_idx: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(clip_id, frame_idx, height, width, vec![value; 3 * height * width])
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    pub fn frame_idx(&self) -> usize {
        self.frame_idx
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Plane `c` of the frame.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Replaces the pixel buffer, clamping into `[0, 1]`.
    pub(crate) fn with_data(&self, mut data: Vec<f32>) -> Frame {
        debug_assert_eq!(data.len(), self.data.len());
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Frame {
            clip_id: self.clip_id.clone(),
            frame_idx: self.frame_idx,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn from_rgb8(clip_id: impl Into<Arc<str>>, frame_idx: usize, img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let n = w * h;
        let mut data = vec![0f32; 3 * n];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c] as f32 / 255.0;
            }
        }
        Self::new(clip_id, frame_idx, h, w, data)
    }

    /// Quantizes to 8 bits per channel (round to nearest).
    pub fn to_rgb8(&self) -> RgbImage {
        let n = self.height * self.width;
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            Rgb(std::array::from_fn(|c| {
                (self.data[c * n + i] * 255.0).round().clamp(0.0, 255.0) as u8
            }))
        })
    }

    /// Bilinear resize; output values stay in `[0, 1]`.
    pub fn resized(&self, height: usize, width: usize) -> Result<Frame> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let n = self.height * self.width;
        let src: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let i = y as usize * self.width + x as usize;
                Rgb(std::array::from_fn(|c| self.data[c * n + i]))
            });
        let dst = image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
        let m = height * width;
        let mut data = vec![0f32; 3 * m];
        for (i, p) in dst.pixels().enumerate() {
            for c in 0..3 {
                data[c * m + i] = p[c].clamp(0.0, 1.0);
            }
        }
        Frame::new(self.clip_id.clone(), self.frame_idx, height, width, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::Decode {
                path: path.to_owned(),
                message: e.to_string(),
            })
    }
}

/// A time-ordered sequence of equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    clip_id: Arc<str>,
    frames: Vec<Frame>,
    pub fps_hint: Option<f64>,
}

impl Clip {
    pub fn new(clip_id: impl Into<Arc<str>>, frames: Vec<Frame>) -> Result<Self> {
        let clip_id = clip_id.into();
        let Some(first) = frames.first() else {
            return Err(Error::Param(format!("clip `{clip_id}` has no frames")));
        };
        for (i, f) in frames.iter().enumerate() {
            if f.frame_idx != i {
                return Err(Error::Param(format!(
                    "clip `{clip_id}`: frame at position {i} has index {}",
                    f.frame_idx
                )));
            }
            if !f.same_dims(first) {
                return Err(Error::ClipRejected {
                    clip_id: clip_id.to_string(),
                    message: format!(
                        "frame {i} is {}x{}, frame 0 is {}x{}",
                        f.height, f.width, first.height, first.width
                    ),
                });
            }
        }
        Ok(Self {
            clip_id,
            frames,
            fps_hint: None,
        })
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    /// Frames `range` re-indexed from zero.
    pub fn slice(&self, range: Range<usize>) -> Result<Clip> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::Param(format!(
                "frame range {range:?} invalid for {}-frame clip",
                self.len()
            )));
        }
        let frames = self.frames[range]
            .iter()
            .enumerate()
            .map(|(i, f)| Frame {
                frame_idx: i,
                ..f.clone()
            })
            .collect();
        Clip::new(self.clip_id.clone(), frames)
    }

    pub(crate) fn map_frames<F>(&self, f: F) -> Clip
    where
        F: Fn(&Frame) -> Frame + Sync + Send,
    {
        let frames = par::map(self.frames.len(), |i| f(&self.frames[i]));
        Clip {
            clip_id: self.clip_id.clone(),
            frames,
            fps_hint: self.fps_hint,
        }
    }

    /// Writes `<dir>/<NNNNN>.png` for every frame.
    pub fn save_frames(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        par::try_map(self.frames.len(), |i| {
            self.frames[i].save_png(&dir.join(format!("{i:05}.png")))
        })?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `<root>/<clip_id>/<NNNNN>.{jpg,png}`
    DavisStyle,
    /// `<root>/<NNNNN>.{jpg,png}`, a single clip named after the directory.
    Flat,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "davis_style" | "davis" => Ok(Layout::DavisStyle),
            "flat" => Ok(Layout::Flat),
            other => Err(Error::Param(format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: PathBuf,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Clips skipped or rejected during the scan, one line each.
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn get(&self, clip_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.clip_id == clip_id)
    }

    pub fn clip_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.clip_id.as_str())
    }

    pub fn with_role(mut self, role: Role) -> Self {
        for e in &mut self.entries {
            e.role = role;
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let entries: Vec<ManifestEntry> = serde_json::from_str(s)?;
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::Param(format!("duplicate clip_id `{}`", e.clip_id)));
            }
        }
        Ok(Self {
            entries,
            warnings: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

/// Image files of a clip directory ordered by their numeric stem.
fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        let Some(n) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
        else {
            log::warn!("{}: non-numeric frame name ignored", path.display());
            continue;
        };
        files.push((n, path));
    }
    files.sort();
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

fn scan_clip(clip_id: &str, dir: &Path) -> Result<std::result::Result<ManifestEntry, String>> {
    let files = frame_files(dir)?;
    let probed: Vec<_> = files.iter().map(image::image_dimensions).collect();
    if probed.iter().all(|p| p.is_err()) {
        return Ok(Err(format!("{clip_id}: no decodable frames, skipped")));
    }
    let mut dims = Vec::with_capacity(files.len());
    for (f, p) in files.iter().zip(probed) {
        match p {
            Ok((w, h)) => dims.push((h as usize, w as usize)),
            Err(e) => {
                return Ok(Err(format!("{clip_id}: rejected, undecodable frame {}: {e}", f.display())));
            }
        }
    }
    if dims.len() < 2 {
        return Ok(Err(format!("{clip_id}: fewer than 2 frames, skipped")));
    }
    if let Some((i, d)) = dims.iter().enumerate().find(|(_, d)| **d != dims[0]) {
        return Ok(Err(format!(
            "{clip_id}: rejected, frame {i} is {}x{} but frame 0 is {}x{}",
            d.0, d.1, dims[0].0, dims[0].1
        )));
    }
    Ok(Ok(ManifestEntry {
        clip_id: clip_id.to_owned(),
        path: dir.to_owned(),
        frames: dims.len(),
        height: dims[0].0,
        width: dims[0].1,
        role: Role::Train,
    }))
}

pub fn scan_dataset(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let clips: Vec<(String, PathBuf)> = match layout {
        Layout::Flat => {
            let id = root
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or("clip")
                .to_owned();
            vec![(id, root.to_owned())]
        }
        Layout::DavisStyle => {
            let mut dirs = Vec::new();
            for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
                let path = entry.map_err(|e| Error::io(root, e))?.path();
                if path.is_dir() {
                    if let Some(name) = path.file_name().and_then(|s| s.to_str()) {
                        dirs.push((name.to_owned(), path.clone()));
                    }
                }
            }
            dirs
        }
    };
    let mut results = par::try_map(clips.len(), |i| scan_clip(&clips[i].0, &clips[i].1))?;
    let mut manifest = DatasetManifest::default();
    for r in results.drain(..) {
        match r {
            Ok(entry) => manifest.entries.push(entry),
            Err(w) => {
                log::warn!("{w}");
                manifest.warnings.push(w);
            }
        }
    }
    manifest.entries.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    manifest.warnings.sort();
    Ok(manifest)
}

fn decode_frame(clip_id: &Arc<str>, idx: usize, path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    Frame::from_rgb8(clip_id.clone(), idx, &img.to_rgb8())
}

pub fn load_clip(
    manifest: &DatasetManifest,
    clip_id: &str,
    resize_to: Option<(usize, usize)>,
) -> Result<Clip> {
    let entry = manifest
        .get(clip_id)
        .ok_or_else(|| Error::UnknownClip(clip_id.to_owned()))?;
    let files = frame_files(&entry.path)?;
    if files.len() != entry.frames {
        return Err(Error::ClipRejected {
            clip_id: clip_id.to_owned(),
            message: format!(
                "manifest lists {} frames, directory has {}",
                entry.frames,
                files.len()
            ),
        });
    }
    let id: Arc<str> = Arc::from(clip_id);
    let frames = par::try_map(files.len(), |i| {
        let f = decode_frame(&id, i, &files[i])?;
        match resize_to {
            Some((h, w)) => f.resized(h, w),
            None => Ok(f),
        }
    })?;
    Clip::new(id, frames)
}

/// Frame window of a streaming chunk. `primary` is the part of `range` not
/// shared with the previous chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkRange {
    pub range: Range<usize>,
    pub primary: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Chunk<'a> {
    pub range: Range<usize>,
    pub primary: Range<usize>,
    pub frames: &'a [Frame],
}

pub fn chunk_ranges(total: usize, chunk_len: usize, overlap: usize) -> Result<Vec<ChunkRange>> {
    if chunk_len == 0 {
        return Err(Error::Param("chunk_len must be at least 1".into()));
    }
    if overlap >= chunk_len {
        return Err(Error::Param(format!(
            "overlap {overlap} must be smaller than chunk_len {chunk_len}"
        )));
    }
    let stride = chunk_len - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + chunk_len).min(total);
        let primary_start = if out.is_empty() { start } else { start + overlap };
        out.push(ChunkRange {
            range: start..end,
            primary: primary_start..end,
        });
        if end == total {
            break;
        }
        start += stride;
    }
    Ok(out)
}

pub fn chunk_clip(clip: &Clip, chunk_len: usize, overlap: usize) -> Result<Vec<Chunk<'_>>> {
    Ok(chunk_ranges(clip.len(), chunk_len, overlap)?
        .into_iter()
        .map(|r| Chunk {
            frames: &clip.frames[r.range.clone()],
            range: r.range,
            primary: r.primary,
        })
        .collect())
}
