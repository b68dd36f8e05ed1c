//! Per-frame ground-truth label tables over (clip x degradation x amplitude).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dataio::{load_clip, DatasetManifest};
use crate::degrade::{apply_degradation, DegradationKind, DegradationSpec};
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::metrics::{quality_triplet, PerceptualExtractor, QualityTriplet};
use crate::par;

pub const CSV_HEADER: &str = "clip_id,frame_idx,kind,amplitude,seed,lpips_q,psnr_q,ssim_q,lpips_source";

/// Default amplitude grid for training data.
pub const DEFAULT_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LpipsSource {
    Builtin,
    External,
}

impl fmt::Display for LpipsSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LpipsSource::Builtin => "builtin",
            LpipsSource::External => "external",
        })
    }
}

impl FromStr for LpipsSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "builtin" => Ok(LpipsSource::Builtin),
            "external" => Ok(LpipsSource::External),
            other => Err(format!("unknown lpips_source `{other}`")),
        }
    }
}

/// Identifies one degraded variant of one clip.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariantKey {
    pub clip_id: String,
    pub kind: DegradationKind,
    amplitude_bits: u64,
    pub seed: u64,
}

impl VariantKey {
    pub fn new(clip_id: impl Into<String>, kind: DegradationKind, amplitude: f64, seed: u64) -> Self {
        // +0.0 so that -0.0 and 0.0 share a key; bit order equals numeric order for non-negatives.
        Self {
            clip_id: clip_id.into(),
            kind,
            amplitude_bits: (amplitude + 0.0).to_bits(),
            seed,
        }
    }

    pub fn amplitude(&self) -> f64 {
        f64::from_bits(self.amplitude_bits)
    }

    pub fn spec(&self) -> DegradationSpec {
        DegradationSpec {
            kind: self.kind,
            amplitude: self.amplitude(),
            seed: self.seed,
        }
    }
}

impl fmt::Display for VariantKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.clip_id, self.kind, sig9(self.amplitude()), self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelKey {
    pub variant: VariantKey,
    pub frame_idx: usize,
}

impl fmt::Display for LabelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.variant, self.frame_idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub triplet: QualityTriplet,
    pub lpips_source: LpipsSource,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelTable {
    rows: BTreeMap<LabelKey, LabelRow>,
    /// Free-form `key=value` metadata written in the `# meta:` line.
    pub meta: BTreeMap<String, String>,
}

impl LabelTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, key: LabelKey, row: LabelRow) -> Result<()> {
        if !row.triplet.is_valid() {
            return Err(Error::Param(format!("quality out of [0, 1] for {key}")));
        }
        if self.rows.contains_key(&key) {
            return Err(Error::Param(format!("duplicate label key {key}")));
        }
        self.rows.insert(key, row);
        Ok(())
    }

    pub fn get(&self, key: &LabelKey) -> Option<&LabelRow> {
        self.rows.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LabelKey, &LabelRow)> {
        self.rows.iter()
    }

    /// Rows grouped by variant, each group ordered by frame index.
    pub fn variants(&self) -> BTreeMap<VariantKey, Vec<(usize, QualityTriplet)>> {
        let mut out: BTreeMap<VariantKey, Vec<(usize, QualityTriplet)>> = BTreeMap::new();
        for (k, r) in &self.rows {
            out.entry(k.variant.clone())
                .or_default()
                .push((k.frame_idx, r.triplet));
        }
        out
    }

    pub fn kinds(&self) -> Vec<DegradationKind> {
        let mut v: Vec<_> = self.rows.keys().map(|k| k.variant.kind).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Rows whose kind satisfies `keep`, metadata preserved.
    pub fn filter_kinds(&self, keep: impl Fn(DegradationKind) -> bool) -> LabelTable {
        LabelTable {
            rows: self
                .rows
                .iter()
                .filter(|(k, _)| keep(k.variant.kind))
                .map(|(k, r)| (k.clone(), r.clone()))
                .collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::new();
        if !self.meta.is_empty() {
            let parts: Vec<String> = self.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
            s.push_str("# meta: ");
            s.push_str(&parts.join(";"));
            s.push('\n');
        }
        s.push_str(CSV_HEADER);
        s.push('\n');
        for (k, r) in &self.rows {
            if k.variant.clip_id.contains([',', '\n', '\r']) {
                return Err(Error::Param(format!("clip_id `{}` cannot be written to CSV", k.variant.clip_id)));
            }
            let t = r.triplet;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                k.variant.clip_id,
                k.frame_idx,
                k.variant.kind,
                sig9(k.variant.amplitude()),
                k.variant.seed,
                sig9(t.lpips_q),
                sig9(t.psnr_q),
                sig9(t.ssim_q),
                r.lpips_source
            ));
        }
        Ok(s)
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Csv {
            path: path.to_owned(),
            line,
            message,
        };
        let text = text.strip_prefix('\u{feff}').unwrap_or(text);
        let mut table = LabelTable::default();
        let mut header_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if !header_seen {
                if let Some(meta) = line.strip_prefix("# meta:") {
                    if line_no != 1 {
                        return Err(err(line_no, "meta line must be the first line".into()));
                    }
                    for part in meta.split(';').map(str::trim).filter(|p| !p.is_empty()) {
                        let (k, v) = part
                            .split_once('=')
                            .ok_or_else(|| err(line_no, format!("malformed meta entry `{part}`")))?;
                        table.meta.insert(k.trim().to_owned(), v.trim().to_owned());
                    }
                    continue;
                }
                if line != CSV_HEADER {
                    return Err(err(line_no, format!("expected header `{CSV_HEADER}`")));
                }
                header_seen = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(err(line_no, format!("expected 9 fields, found {}", f.len())));
            }
            let num = |idx: usize, name: &str| -> Result<f64> {
                f[idx]
                    .parse::<f64>()
                    .map_err(|_| err(line_no, format!("{name} `{}` is not a number", f[idx])))
            };
            let frame_idx: usize = f[1]
                .parse()
                .map_err(|_| err(line_no, format!("frame_idx `{}` is not an integer", f[1])))?;
            let kind: DegradationKind = f[2].parse().map_err(|e: Error| err(line_no, e.to_string()))?;
            let amplitude = num(3, "amplitude")?;
            if !(0.0..=1.0).contains(&amplitude) {
                return Err(err(line_no, format!("amplitude {amplitude} outside [0, 1]")));
            }
            let seed: u64 = f[4]
                .parse()
                .map_err(|_| err(line_no, format!("seed `{}` is not an unsigned integer", f[4])))?;
            let triplet = QualityTriplet {
                lpips_q: num(5, "lpips_q")?,
                psnr_q: num(6, "psnr_q")?,
                ssim_q: num(7, "ssim_q")?,
            };
            for (name, v) in ["lpips_q", "psnr_q", "ssim_q"].iter().zip(triplet.as_array()) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(err(line_no, format!("{name} {v} outside [0, 1]")));
                }
            }
            let lpips_source: LpipsSource = f[8].parse().map_err(|e| err(line_no, e))?;
            let key = LabelKey {
                variant: VariantKey::new(f[0], kind, amplitude, seed),
                frame_idx,
            };
            if table.rows.contains_key(&key) {
                return Err(err(line_no, format!("duplicate key {key}")));
            }
            table.rows.insert(key, LabelRow { triplet, lpips_source });
        }
        if !header_seen {
            return Err(err(1, "missing header".into()));
        }
        Ok(table)
    }

    pub fn import_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, path)
    }
}

#[derive(Debug, Clone)]
pub struct LabelOptions {
    pub resize_to: Option<(usize, usize)>,
    pub extractor: PerceptualExtractor,
}

impl Default for LabelOptions {
    fn default() -> Self {
        Self {
            resize_to: None,
            extractor: PerceptualExtractor::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenerationReport {
    pub skipped: Vec<String>,
}

/// Triplets of every frame of one degraded variant against its pristine clip.
pub fn variant_triplets(
    pristine: &crate::dataio::Clip,
    spec: &DegradationSpec,
    extractor: &PerceptualExtractor,
) -> Result<Vec<QualityTriplet>> {
    let degraded = apply_degradation(pristine, spec)?;
    par::try_map(pristine.len(), |i| {
        quality_triplet(&pristine.frames()[i], &degraded.frames()[i], extractor)
    })
}

/// Rounds to the digits the CSV keeps, so exported tables re-import unchanged.
fn at_csv_precision(t: QualityTriplet) -> QualityTriplet {
    QualityTriplet::from_array(t.as_array().map(|v| sig9(v).parse().expect("sig9 output parses")))
}

pub fn generate_labels(
    manifest: &DatasetManifest,
    kinds: &[DegradationKind],
    grid: &[f64],
    seed: u64,
    opts: &LabelOptions,
) -> Result<(LabelTable, GenerationReport)> {
    if manifest.entries.is_empty() {
        return Err(Error::Param("manifest has no clips".into()));
    }
    if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Param(format!("amplitude {a} outside [0, 1]")));
    }
    let ids: Vec<&str> = manifest.clip_ids().collect();
    let per_clip = par::map(ids.len(), |ci| -> Result<Vec<(LabelKey, LabelRow)>> {
        let clip = load_clip(manifest, ids[ci], opts.resize_to)?;
        let jobs: Vec<(DegradationKind, f64)> =
            kinds.iter().flat_map(|&k| grid.iter().map(move |&a| (k, a))).collect();
        let per_job = par::try_map(jobs.len(), |j| {
            let (kind, amplitude) = jobs[j];
            let spec = DegradationSpec::new(kind, amplitude, seed)?;
            variant_triplets(&clip, &spec, &opts.extractor).map(|t| (spec, t))
        })?;
        let mut rows = Vec::new();
        for (spec, triplets) in per_job {
            for (frame_idx, triplet) in triplets.into_iter().enumerate() {
                rows.push((
                    LabelKey {
                        variant: VariantKey::new(ids[ci], spec.kind, spec.amplitude, seed),
                        frame_idx,
                    },
                    LabelRow {
                        triplet: at_csv_precision(triplet),
                        lpips_source: LpipsSource::Builtin,
                    },
                ));
            }
        }
        Ok(rows)
    });
    let mut table = LabelTable::default();
    let mut report = GenerationReport::default();
    for (ci, rows) in per_clip.into_iter().enumerate() {
        match rows {
            Ok(rows) => {
                for (k, r) in rows {
                    table.insert(k, r)?;
                }
            }
            Err(e) => {
                let msg = format!("{}: {e}", ids[ci]);
                log::warn!("label generation skipped {msg}");
                report.skipped.push(msg);
            }
        }
    }
    table.meta.insert("perceptual".into(), opts.extractor.describe());
    if let Some((h, w)) = opts.resize_to {
        table.meta.insert("resolution".into(), format!("{h}x{w}"));
    }
    Ok((table, report))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MergeReport {
    pub updated: usize,
    pub unmatched: Vec<LabelKey>,
}

/// Replaces `lpips_q` of every key present in `sidecar`.
pub fn merge_external_lpips(table: &LabelTable, sidecar: &LabelTable) -> (LabelTable, MergeReport) {
    let mut out = table.clone();
    let mut report = MergeReport::default();
    for (k, r) in &sidecar.rows {
        match out.rows.get_mut(k) {
            Some(row) => {
                row.triplet.lpips_q = r.triplet.lpips_q;
                row.lpips_source = LpipsSource::External;
                report.updated += 1;
            }
            None => report.unmatched.push(k.clone()),
        }
    }
    for (k, v) in &sidecar.meta {
        out.meta.insert(format!("external.{k}"), v.clone());
    }
    (out, report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpactPoint {
    pub amplitude: f64,
    pub lpips_q: f64,
    pub psnr_q: f64,
    pub ssim_q: f64,
    pub count: usize,
}

/// Mean quality per amplitude for one kind, ascending amplitude.
pub fn impact_curve(table: &LabelTable, kind: DegradationKind) -> Vec<ImpactPoint> {
    let mut acc: BTreeMap<u64, ([f64; 3], usize)> = BTreeMap::new();
    for (k, r) in &table.rows {
        if k.variant.kind != kind {
            continue;
        }
        let e = acc.entry(k.variant.amplitude_bits).or_insert(([0.0; 3], 0));
        for (s, v) in e.0.iter_mut().zip(r.triplet.as_array()) {
            *s += v;
        }
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(bits, (s, n))| ImpactPoint {
            amplitude: f64::from_bits(bits),
            lpips_q: s[0] / n as f64,
            psnr_q: s[1] / n as f64,
            ssim_q: s[2] / n as f64,
            count: n,
        })
        .collect()
}

pub fn impact_curve_csv(points: &[ImpactPoint]) -> String {
    let mut s = String::from("amplitude,lpips_q,psnr_q,ssim_q,frames\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            sig9(p.amplitude),
            sig9(p.lpips_q),
            sig9(p.psnr_q),
            sig9(p.ssim_q),
            p.count
        ));
    }
    s
}
