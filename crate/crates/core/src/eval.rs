//! Streaming inference and the reporting stack: per-metric MAE, Pearson
//! correlation, smoothing, mean-centering and report files.

use std::collections::BTreeMap;
use std::path::Path;

use crate::dataio::{chunk_ranges, Clip};
use crate::degrade::{apply_degradation, DegradationKind};
use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::labels::{impact_curve, impact_curve_csv, LabelTable, VariantKey};
use crate::metrics::QualityTriplet;
use crate::model::{clip_batch, Network, TemporalState};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// Disjoint chunks; the recurrent state flows from one chunk to the next.
    CarryState,
    /// Every chunk starts from zero state; the first `overlap` frames of a
    /// non-initial chunk only warm the state and their predictions come from
    /// the chunk before.
    WarmOverlap,
}

impl std::str::FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "carry_state" | "carry" => Ok(StreamMode::CarryState),
            "warm_overlap" | "warm" => Ok(StreamMode::WarmOverlap),
            other => Err(Error::Param(format!("unknown streaming mode `{other}`"))),
        }
    }
}

impl StreamMode {
    pub fn name(self) -> &'static str {
        match self {
            StreamMode::CarryState => "carry_state",
            StreamMode::WarmOverlap => "warm_overlap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamOptions {
    pub chunk_len: usize,
    pub overlap: usize,
    pub mode: StreamMode,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            chunk_len: 8,
            overlap: 0,
            mode: StreamMode::CarryState,
        }
    }
}

impl StreamOptions {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 {
            return Err(Error::Param("chunk_len must be at least 1".into()));
        }
        if self.overlap >= self.chunk_len {
            return Err(Error::Param(format!(
                "overlap {} must be smaller than chunk_len {}",
                self.overlap, self.chunk_len
            )));
        }
        match self.mode {
            StreamMode::CarryState if self.overlap != 0 => {
                Err(Error::Param("carry_state uses disjoint chunks; overlap must be 0".into()))
            }
            StreamMode::WarmOverlap if self.overlap == 0 => {
                Err(Error::Param("warm_overlap needs overlap of at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

fn triplets(pred: &[f32]) -> Vec<QualityTriplet> {
    pred.chunks(3)
        .map(|p| QualityTriplet::from_array([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect()
}

/// Predicts every frame of `clip` exactly once, chunk by chunk.
pub fn streaming_infer(net: &Network<f32>, clip: &Clip, opts: &StreamOptions) -> Result<Vec<QualityTriplet>> {
    opts.validate()?;
    let ranges = chunk_ranges(clip.len(), opts.chunk_len, opts.overlap)?;
    let mut out = Vec::with_capacity(clip.len());
    let mut state: Option<TemporalState<f32>> = None;
    for r in ranges {
        let chunk = clip.slice(r.range.clone())?;
        let x = clip_batch::<f32>(&[&chunk])?;
        let carried = match opts.mode {
            StreamMode::CarryState => state.as_ref(),
            StreamMode::WarmOverlap => None,
        };
        let (y, next) = net.forward(&x, carried)?;
        let skip = r.primary.start - r.range.start;
        out.extend(triplets(&y.data()[3 * skip..]));
        state = Some(next);
    }
    Ok(out)
}

/// Per-frame predictions and ground truth of one degraded clip under one model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSeries {
    pub model_id: String,
    pub variant: VariantKey,
    pub pred: Vec<QualityTriplet>,
    pub gt: Vec<QualityTriplet>,
}

impl PredictionSeries {
    pub fn new(model_id: impl Into<String>, variant: VariantKey, pred: Vec<QualityTriplet>, gt: Vec<QualityTriplet>) -> Result<Self> {
        if pred.len() != gt.len() || pred.is_empty() {
            return Err(Error::Param(format!(
                "{variant}: {} predictions for {} ground-truth frames",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(i) = pred.iter().chain(&gt).position(|t| !t.is_valid()) {
            return Err(Error::Numeric(format!("{variant}: value outside [0, 1] at entry {}", i % pred.len())));
        }
        Ok(Self {
            model_id: model_id.into(),
            variant,
            pred,
            gt,
        })
    }

    pub fn clip_id(&self) -> &str {
        &self.variant.clip_id
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred.is_empty()
    }

    fn column(v: &[QualityTriplet], m: usize) -> Vec<f64> {
        v.iter().map(|t| t.as_array()[m]).collect()
    }

    pub fn pred_metric(&self, m: usize) -> Vec<f64> {
        Self::column(&self.pred, m)
    }

    pub fn gt_metric(&self, m: usize) -> Vec<f64> {
        Self::column(&self.gt, m)
    }
}

/// Mean absolute error per metric, pooled over all frames of the series.
pub fn mae(series: &[&PredictionSeries]) -> Result<[f64; 3]> {
    let frames: usize = series.iter().map(|s| s.len()).sum();
    if frames == 0 {
        return Err(Error::Param("no frames to score".into()));
    }
    let mut sum = [0.0; 3];
    for s in series {
        for (p, g) in s.pred.iter().zip(&s.gt) {
            let (p, g) = (p.as_array(), g.as_array());
            for m in 0..3 {
                sum[m] += (p[m] - g[m]).abs();
            }
        }
    }
    Ok(sum.map(|v| v / frames as f64))
}

/// Per-metric MAE per model.
pub fn mae_report(series: &[PredictionSeries]) -> Result<BTreeMap<String, [f64; 3]>> {
    check_same_ground_truth(series)?;
    by_model(series).into_iter().map(|(id, s)| Ok((id.to_string(), mae(&s)?))).collect()
}

fn by_model(series: &[PredictionSeries]) -> BTreeMap<&str, Vec<&PredictionSeries>> {
    let mut m: BTreeMap<&str, Vec<&PredictionSeries>> = BTreeMap::new();
    for s in series {
        m.entry(&s.model_id).or_default().push(s);
    }
    m
}

/// Errors unless every model was scored on the same variants with the same targets.
pub fn check_same_ground_truth(series: &[PredictionSeries]) -> Result<()> {
    let mut reference: Option<(&str, BTreeMap<&VariantKey, &[QualityTriplet]>)> = None;
    for (id, s) in by_model(series) {
        let rows: BTreeMap<&VariantKey, &[QualityTriplet]> = s.iter().map(|s| (&s.variant, s.gt.as_slice())).collect();
        if rows.len() != s.len() {
            return Err(Error::Param(format!("model {id} scores a variant twice")));
        }
        match &reference {
            None => reference = Some((id, rows)),
            Some((first, r)) if *r != rows => {
                return Err(Error::Param(format!("models {first} and {id} were scored on different ground truth")));
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Param(format!("series lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!("{} samples", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean of `x` taken relative to `pivot`, so a constant slice returns exactly its value.
fn pivoted_mean(x: &[f64], pivot: f64) -> f64 {
    pivot + x.iter().map(|v| v - pivot).sum::<f64>() / x.len() as f64
}

/// Centered moving average; windows shrink at the edges.
pub fn moving_average(x: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Param(format!("window {window} must be odd and positive")));
    }
    let half = window / 2;
    Ok((0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            pivoted_mean(&x[lo..hi], x[i])
        })
        .collect())
}

pub fn mean_center(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = pivoted_mean(x, x[0]);
    x.iter().map(|v| v - m).collect()
}

/// Per-frame mean of the three qualities.
pub fn composite_score(series: &[QualityTriplet]) -> Vec<f64> {
    series.iter().map(|t| t.as_array().iter().sum::<f64>() / 3.0).collect()
}

/// Summary row of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub model_id: String,
    pub mae: [f64; 3],
    /// Pooled-frame correlation per metric; `None` where it is undefined.
    pub r: [Option<f64>; 3],
    pub frames: usize,
}

fn correlation(series: &[&PredictionSeries], m: usize) -> Result<Option<f64>> {
    let p: Vec<f64> = series.iter().flat_map(|s| s.pred_metric(m)).collect();
    let g: Vec<f64> = series.iter().flat_map(|s| s.gt_metric(m)).collect();
    match pearson_r(&p, &g) {
        Ok(r) => Ok(Some(r)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn summarize(series: &[PredictionSeries]) -> Result<Vec<ModelSummary>> {
    if series.is_empty() {
        return Err(Error::Param("no prediction series".into()));
    }
    check_same_ground_truth(series)?;
    by_model(series)
        .into_iter()
        .map(|(id, s)| {
            Ok(ModelSummary {
                model_id: id.to_string(),
                mae: mae(&s)?,
                r: [correlation(&s, 0)?, correlation(&s, 1)?, correlation(&s, 2)?],
                frames: s.iter().map(|x| x.len()).sum(),
            })
        })
        .collect()
}

/// Predicts a constant triplet for every frame.
pub fn constant_series(model_id: &str, value: QualityTriplet, reference: &PredictionSeries) -> Result<PredictionSeries> {
    PredictionSeries::new(model_id, reference.variant.clone(), vec![value; reference.len()], reference.gt.clone())
}

/// Mean label per metric over rows of the given kinds.
pub fn label_mean(table: &LabelTable, kinds: &[DegradationKind]) -> Result<QualityTriplet> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (k, r) in table.iter() {
        if kinds.contains(&k.variant.kind) {
            for (s, v) in sum.iter_mut().zip(r.triplet.as_array()) {
                *s += v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Param("no label rows for the constant predictor".into()));
    }
    Ok(QualityTriplet::from_array(sum.map(|s| s / n as f64)))
}

/// Streams every labelled variant of `kinds` through each model.
pub fn predict_variants(
    models: &[(String, Network<f32>)],
    clips: &BTreeMap<String, Clip>,
    table: &LabelTable,
    kinds: &[DegradationKind],
    opts: &StreamOptions,
) -> Result<Vec<PredictionSeries>> {
    opts.validate()?;
    let variants: Vec<(VariantKey, Vec<(usize, QualityTriplet)>)> =
        table.variants().into_iter().filter(|(v, _)| kinds.contains(&v.kind)).collect();
    if variants.is_empty() {
        return Err(Error::Param("no labelled variants to evaluate".into()));
    }
    let per_variant = par::try_map(variants.len(), |i| -> Result<Vec<PredictionSeries>> {
        let (v, rows) = &variants[i];
        let clip = clips.get(&v.clip_id).ok_or_else(|| Error::UnknownClip(v.clip_id.clone()))?;
        if rows.len() != clip.len() || rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return Err(Error::Param(format!("labels for {v} cover {} of {} frames", rows.len(), clip.len())));
        }
        let degraded = apply_degradation(clip, &v.spec())?;
        let gt: Vec<QualityTriplet> = rows.iter().map(|r| r.1).collect();
        models
            .iter()
            .map(|(id, net)| PredictionSeries::new(id.clone(), v.clone(), streaming_infer(net, &degraded, opts)?, gt.clone()))
            .collect()
    })?;
    let mut out: Vec<PredictionSeries> = per_variant.into_iter().flatten().collect();
    out.sort_by(|a, b| (&a.model_id, &a.variant).cmp(&(&b.model_id, &b.variant)));
    Ok(out)
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(sig9).unwrap_or_else(|| "NA".into())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const REPORT_HEADER: &str = "model,mae_lpips,mae_psnr,mae_ssim,r_lpips,r_psnr,r_ssim,frames";
pub const PER_CLIP_HEADER: &str =
    "model,clip_id,kind,amplitude,seed,frames,mae_lpips,mae_psnr,mae_ssim,r_lpips,r_psnr,r_ssim";
pub const SERIES_HEADER: &str =
    "frame_idx,gt_lpips,gt_psnr,gt_ssim,pred_lpips,pred_psnr,pred_ssim,gt_composite_view,pred_composite_view";

pub fn report_csv(summaries: &[ModelSummary]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for m in summaries {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.model_id,
            sig9(m.mae[0]),
            sig9(m.mae[1]),
            sig9(m.mae[2]),
            opt(m.r[0]),
            opt(m.r[1]),
            opt(m.r[2]),
            m.frames
        ));
    }
    s
}

fn per_clip_csv(series: &[PredictionSeries]) -> Result<String> {
    let mut s = format!("{PER_CLIP_HEADER}\n");
    for x in series {
        let m = mae(&[x])?;
        let r = [correlation(&[x], 0)?, correlation(&[x], 1)?, correlation(&[x], 2)?];
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            x.model_id,
            x.variant.clip_id,
            x.variant.kind,
            sig9(x.variant.amplitude()),
            x.variant.seed,
            x.len(),
            sig9(m[0]),
            sig9(m[1]),
            sig9(m[2]),
            opt(r[0]),
            opt(r[1]),
            opt(r[2])
        ));
    }
    Ok(s)
}

/// Frame table of one series. The `*_composite_view` columns hold the
/// 3-frame smoothed, mean-centered composite score.
pub fn series_csv(x: &PredictionSeries) -> Result<String> {
    let view = |t: &[QualityTriplet]| -> Result<Vec<f64>> { Ok(mean_center(&moving_average(&composite_score(t), 3)?)) };
    let (gv, pv) = (view(&x.gt)?, view(&x.pred)?);
    let mut s = format!("{SERIES_HEADER}\n");
    for i in 0..x.len() {
        let (g, p) = (x.gt[i].as_array(), x.pred[i].as_array());
        s.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{}\n",
            sig9(g[0]),
            sig9(g[1]),
            sig9(g[2]),
            sig9(p[0]),
            sig9(p[1]),
            sig9(p[2]),
            sig9(gv[i]),
            sig9(pv[i])
        ));
    }
    Ok(s)
}

pub fn series_file_name(v: &VariantKey) -> String {
    format!("{}_{}_{}.csv", slug(&v.clip_id), v.kind, sig9(v.amplitude()))
}

/// Writes `report.csv`, `per_clip.csv`, `series/<model>/<clip>_<kind>_<amplitude>.csv`
/// and, when a label table is given, `curves/<kind>.csv`.
pub fn emit_report(out_dir: &Path, series: &[PredictionSeries], curves: Option<&LabelTable>) -> Result<Vec<ModelSummary>> {
    let summaries = summarize(series)?;
    let mut sorted: Vec<&PredictionSeries> = series.iter().collect();
    sorted.sort_by(|a, b| (&a.model_id, &a.variant).cmp(&(&b.model_id, &b.variant)));
    write(&out_dir.join("report.csv"), &report_csv(&summaries))?;
    let owned: Vec<PredictionSeries> = sorted.iter().map(|s| (*s).clone()).collect();
    write(&out_dir.join("per_clip.csv"), &per_clip_csv(&owned)?)?;
    for x in &sorted {
        let path = out_dir.join("series").join(slug(&x.model_id)).join(series_file_name(&x.variant));
        write(&path, &series_csv(x)?)?;
    }
    if let Some(table) = curves {
        write_curves(out_dir, table)?;
    }
    Ok(summaries)
}

/// Writes `curves/<kind>.csv` for every kind present in the table.
pub fn write_curves(out_dir: &Path, table: &LabelTable) -> Result<Vec<DegradationKind>> {
    let kinds = table.kinds();
    for &k in &kinds {
        write(&out_dir.join("curves").join(format!("{k}.csv")), &impact_curve_csv(&impact_curve(table, k)))?;
    }
    Ok(kinds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri(v: f64) -> QualityTriplet {
        QualityTriplet::from_array([v; 3])
    }

    fn series(model: &str, clip: &str, pred: &[f64], gt: &[f64]) -> PredictionSeries {
        let v = VariantKey::new(clip, DegradationKind::GaussianNoise, 0.5, 0);
        PredictionSeries::new(model, v, pred.iter().map(|&p| tri(p)).collect(), gt.iter().map(|&g| tri(g)).collect()).unwrap()
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson_r(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_r(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        let want = 3.0 / (2.0f64 * 42.0 / 9.0).sqrt();
        assert!((pearson_r(&x, &[1.0, 2.0, 4.0]).unwrap() - want).abs() < 1e-12);
        assert!(matches!(pearson_r(&x, &[2.0; 3]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(pearson_r(&[1.0], &[1.0]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(moving_average(&[0.0, 1.0, 2.0, 3.0], 3).unwrap(), vec![0.5, 1.0, 2.0, 2.5]);
        assert_eq!(moving_average(&[4.0, 1.0], 1).unwrap(), vec![4.0, 1.0]);
        assert!(moving_average(&[1.0], 2).is_err());
        assert_eq!(mean_center(&[1.0, 3.0]), vec![-1.0, 1.0]);
        assert_eq!(composite_score(&[QualityTriplet::from_array([0.0, 0.5, 1.0])]), vec![0.5]);
    }

    #[test]
    fn pooled_mae_weights_by_frames() {
        let a = series("m", "a", &[0.0, 0.0, 0.0], &[0.3, 0.3, 0.3]);
        let b = series("m", "b", &[1.0], &[0.5]);
        let got = mae(&[&a, &b]).unwrap();
        assert!((got[0] - (3.0 * 0.3 + 0.5) / 4.0).abs() < 1e-12);
        let c = series("m", "c", &[0.5, 0.5], &[0.6, 0.6]);
        assert!(mae(&[&c]).unwrap().iter().all(|v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn ground_truth_must_match_across_models() {
        let a = series("x", "a", &[0.1, 0.2], &[0.3, 0.4]);
        let b = series("y", "a", &[0.5, 0.2], &[0.3, 0.4]);
        assert!(mae_report(&[a.clone(), b]).is_ok());
        let c = series("y", "a", &[0.5, 0.2], &[0.3, 0.5]);
        assert!(mae_report(&[a, c]).is_err());
    }

    #[test]
    fn stream_options_are_checked() {
        let bad = [
            StreamOptions { chunk_len: 0, overlap: 0, mode: StreamMode::CarryState },
            StreamOptions { chunk_len: 4, overlap: 1, mode: StreamMode::CarryState },
            StreamOptions { chunk_len: 4, overlap: 0, mode: StreamMode::WarmOverlap },
            StreamOptions { chunk_len: 4, overlap: 4, mode: StreamMode::WarmOverlap },
        ];
        assert!(bad.iter().all(|o| o.validate().is_err()));
        assert!(StreamOptions { chunk_len: 4, overlap: 2, mode: StreamMode::WarmOverlap }.validate().is_ok());
    }
}
