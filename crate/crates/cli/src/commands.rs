use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use streamvq::dataio::{load_clip, scan_dataset, DatasetManifest, Layout};
use streamvq::degrade::{apply_degradation, parse_kinds, save_degraded, DegradationKind, DegradationSpec};
use streamvq::eval::{self, StreamMode, StreamOptions};
use streamvq::labels::{generate_labels, merge_external_lpips, LabelOptions, LabelTable};
use streamvq::model::Network;
use streamvq::train::{parse_resolution, TrainData, Trainer};
use streamvq::{synth, Error, Result};

use crate::settings;
use crate::{CurvesArgs, DegradeArgs, EvalArgs, LabelsArgs, ScanArgs, SynthArgs, TrainArgs};

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn seed_or_random(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        log::info!("no seed given; using random seed {s}");
        s
    })
}

fn resize(s: Option<&str>) -> Result<Option<(usize, usize)>> {
    s.map(parse_resolution).transpose()
}

fn kinds_or_all(s: &str) -> Result<Vec<DegradationKind>> {
    let kinds = if s == "all" { DegradationKind::ALL.to_vec() } else { parse_kinds(s)? };
    if kinds.is_empty() {
        return Err(Error::Param("no degradation kinds given".into()));
    }
    Ok(kinds)
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Param(format!("grid value `{t}` is not a number"))))
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::Param("empty amplitude grid".into()));
    }
    Ok(grid)
}

pub fn scan(a: ScanArgs) -> Result<()> {
    let layout: Layout = a.layout.parse()?;
    let manifest = scan_dataset(&a.root, layout)?;
    if manifest.entries.is_empty() {
        return Err(Error::ClipRejected {
            clip_id: a.root.display().to_string(),
            message: "no usable clips found".into(),
        });
    }
    ensure_parent(&a.out)?;
    manifest.save(&a.out)?;
    log::info!("{} clips, {} skipped -> {}", manifest.entries.len(), manifest.warnings.len(), a.out.display());
    Ok(())
}

pub fn degrade(a: DegradeArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let kind: DegradationKind = a.kind.parse()?;
    let seed = seed_or_random(a.seed);
    let spec = DegradationSpec::new(kind, a.amplitude, seed)?;
    let size = resize(a.resize.as_deref())?;
    for id in manifest.clip_ids() {
        let clip = load_clip(&manifest, id, size)?;
        let dir = save_degraded(&a.out, &spec, &apply_degradation(&clip, &spec)?)?;
        log::info!("{id}: {} frames -> {}", clip.len(), dir.display());
    }
    Ok(())
}

pub fn labels(a: LabelsArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let kinds = kinds_or_all(&a.kinds)?;
    let grid = parse_grid(&a.grid)?;
    let seed = seed_or_random(a.seed);
    let opts = LabelOptions {
        resize_to: resize(a.resize.as_deref())?,
        ..LabelOptions::default()
    };
    let (mut table, report) = generate_labels(&manifest, &kinds, &grid, seed, &opts)?;
    if table.is_empty() {
        return Err(Error::ClipRejected {
            clip_id: a.manifest.display().to_string(),
            message: format!("every clip failed: {}", report.skipped.join("; ")),
        });
    }
    if let Some(path) = &a.merge_lpips {
        let sidecar = LabelTable::import_csv(path)?;
        let (merged, m) = merge_external_lpips(&table, &sidecar);
        log::info!("merged {} external lpips values", m.updated);
        for k in &m.unmatched {
            log::warn!("sidecar row {} frame {} matches no label", k.variant, k.frame_idx);
        }
        table = merged;
    }
    ensure_parent(&a.out)?;
    table.export_csv(&a.out)?;
    log::info!("{} rows -> {}", table.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let table = LabelTable::import_csv(&a.labels)?;
    let saved = a.out.join("config.txt");
    let file = match (&a.config, a.resume) {
        (Some(p), _) => settings::load_file(Some(p))?,
        (None, true) => settings::load_file(Some(&saved))?,
        (None, false) => BTreeMap::new(),
    };
    let rc = settings::resolve(&file, &settings::flag_pairs(&a), rand::random::<u64>)?;
    rc.log();
    let data = TrainData::load(&manifest, &table, &rc.train)?;
    let mut trainer = if a.resume {
        let t = Trainer::resume(&data, &a.out, rc.train.clone())?;
        if let Some(diff) = t.network().config().mismatch(&rc.model) {
            return Err(Error::ConfigMismatch(format!("{} was trained with a different model: {diff}", a.out.display())));
        }
        log::info!("resuming at step {} of {}", t.step_count(), t.total_steps());
        t
    } else {
        Trainer::new(&data, rc.model.clone(), rc.train.clone())?
    };
    let spe = trainer.steps_per_epoch();
    trainer.run(|r| {
        if r.step % spe == 0 {
            log::info!("epoch {} step {} loss {:.5}", r.epoch, r.step, r.loss.total);
        }
    })?;
    trainer.save(&a.out)?;
    if let Some(b) = trainer.best() {
        log::info!("best val {:.5} at epoch {} (step {})", b.val_loss, b.epoch, b.step);
    }
    log::info!("saved {}", a.out.display());
    Ok(())
}

/// Short model names, suffixed `_2`, `_3`... when repeated.
fn model_ids(nets: &[Network<f32>]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    nets.iter()
        .map(|n| {
            let base = if n.config().temporal_enabled { "temporal" } else { "baseline" };
            let c = seen.entry(base).or_insert(0);
            *c += 1;
            if *c == 1 { base.to_string() } else { format!("{base}_{c}") }
        })
        .collect()
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let opts = StreamOptions {
        chunk_len: a.chunk_len,
        overlap: a.overlap,
        mode: a.mode.parse::<StreamMode>()?,
    };
    opts.validate()?;
    let nets = a
        .checkpoints
        .iter()
        .map(|p| Network::<f32>::load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let ids = model_ids(&nets);
    for (id, p) in ids.iter().zip(&a.checkpoints) {
        log::info!("model {id}: {}", p.display());
    }
    let models: Vec<(String, Network<f32>)> = ids.into_iter().zip(nets).collect();
    let manifest = DatasetManifest::load(&a.manifest)?;
    let table = LabelTable::import_csv(&a.labels)?;
    let kinds = match a.kinds.as_str() {
        "validation" => DegradationKind::VALIDATION.to_vec(),
        "all" => table.kinds(),
        s => parse_kinds(s)?,
    };
    let size = match (&a.resolution, table.meta.get("resolution")) {
        (Some(r), _) => Some(parse_resolution(r)?),
        (None, Some(r)) => Some(parse_resolution(r)?),
        (None, None) => None,
    };
    let needed: BTreeSet<String> = table
        .variants()
        .into_keys()
        .filter(|v| kinds.contains(&v.kind))
        .map(|v| v.clip_id)
        .collect();
    let clips = needed
        .iter()
        .map(|id| Ok((id.clone(), load_clip(&manifest, id, size)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut series = eval::predict_variants(&models, &clips, &table, &kinds, &opts)?;
    if !a.no_constant {
        match eval::label_mean(&table, &DegradationKind::TRAIN) {
            Ok(mean) => {
                let first = &models[0].0;
                let extra = series
                    .iter()
                    .filter(|s| &s.model_id == first)
                    .map(|s| eval::constant_series("constant_mean", mean, s))
                    .collect::<Result<Vec<_>>>()?;
                series.extend(extra);
            }
            Err(_) => log::warn!("labels have no training-kind rows; constant_mean left out"),
        }
    }
    let summaries = eval::emit_report(&a.out, &series, Some(&table))?;
    print!("{}", eval::report_csv(&summaries));
    log::info!("report -> {}", a.out.display());
    Ok(())
}

pub fn curves(a: CurvesArgs) -> Result<()> {
    let table = LabelTable::import_csv(&a.labels)?;
    let kinds = eval::write_curves(&a.out, &table)?;
    log::info!("{} curves -> {}", kinds.len(), a.out.display());
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let (h, w) = parse_resolution(&a.size)?;
    let seed = seed_or_random(a.seed);
    let ids = synth::write_dataset(&a.out, a.clips, a.frames, h, w, seed)?;
    log::info!("{} clips of {} frames -> {}", ids.len(), a.frames, a.out.display());
    Ok(())
}
