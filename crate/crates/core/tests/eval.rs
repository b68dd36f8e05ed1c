mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use streamvq::degrade::DegradationKind;
use streamvq::eval::*;
use streamvq::model::{clip_batch, ModelConfig, Network};

fn full_forward(net: &Network<f32>, clip: &streamvq::dataio::Clip) -> Vec<f32> {
    net.forward(&clip_batch(&[clip]).unwrap(), None).unwrap().0.into_data()
}

fn flat(t: &[streamvq::metrics::QualityTriplet]) -> Vec<f32> {
    t.iter().flat_map(|q| q.as_array().map(|v| v as f32)).collect()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max)
}

#[test]
fn carried_chunks_match_the_full_pass() {
    let net = Network::<f32>::new(ModelConfig::default()).unwrap();
    let clip = &common::fixture_clips()[0];
    let full = full_forward(&net, clip);
    for chunk_len in [1, 2, 3, 4, clip.len(), clip.len() + 5] {
        let opts = StreamOptions { chunk_len, overlap: 0, mode: StreamMode::CarryState };
        let got = flat(&streaming_infer(&net, clip, &opts).unwrap());
        let d = max_diff(&got, &full);
        assert!(d < 1e-5, "chunk {chunk_len}: {d}");
        if chunk_len >= clip.len() {
            assert_eq!(d, 0.0);
        }
    }
}

#[test]
fn warm_overlap_predicts_each_frame_once() {
    let net = Network::<f32>::new(ModelConfig::default()).unwrap();
    let clip = streamvq::synth::generate_clip(2, "ten", 10, 32, 32).unwrap();
    let opts = StreamOptions { chunk_len: 4, overlap: 2, mode: StreamMode::WarmOverlap };
    let got = flat(&streaming_infer(&net, &clip, &opts).unwrap());
    assert_eq!(got.len(), 30);
    let full = full_forward(&net, &clip);
    assert_eq!(&got[..12], &full[..12]);
    let tail = clip.slice(6..10).unwrap();
    assert_eq!(&got[3 * 8..], &full_forward(&net, &tail)[3 * 2..]);
}

fn report_inputs() -> (Vec<(String, Network<f32>)>, BTreeMap<String, streamvq::dataio::Clip>, streamvq::labels::LabelTable) {
    let models = vec![
        ("temporal".to_string(), Network::<f32>::new(ModelConfig::default()).unwrap()),
        ("baseline".to_string(), Network::<f32>::new(ModelConfig::baseline()).unwrap()),
    ];
    let clips = common::fixture_clips().into_iter().map(|c| (c.clip_id().to_string(), c)).collect();
    let table = common::fixture_labels(&[DegradationKind::GaussianNoise, DegradationKind::Saturation], &[0.0, 1.0]);
    (models, clips, table)
}

#[test]
fn report_tree_is_complete_and_deterministic() {
    let (models, clips, table) = report_inputs();
    let opts = StreamOptions { chunk_len: 3, overlap: 0, mode: StreamMode::CarryState };
    let series = predict_variants(&models, &clips, &table, &DegradationKind::VALIDATION, &opts).unwrap();
    assert_eq!(series.len(), 2 * 2 * 2 * 2);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        emit_report(d.path(), &series, Some(&table)).unwrap();
    }
    let report = std::fs::read_to_string(dirs[0].path().join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], REPORT_HEADER);
    assert_eq!(lines.len(), 3);
    for (line, id) in lines[1..].iter().zip(["baseline", "temporal"]) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], id);
        assert!(cells[1..7].iter().all(|c| c.parse::<f64>().is_ok()), "{line}");
    }
    let series_file = dirs[0].path().join("series/temporal/scene00_gaussian_noise_1.csv");
    assert_eq!(std::fs::read_to_string(&series_file).unwrap().lines().count(), 1 + 8);
    assert!(dirs[0].path().join("curves/saturation.csv").is_file());
    for rel in ["report.csv", "per_clip.csv", "series/baseline/scene01_saturation_0.csv", "curves/gaussian_noise.csv"] {
        assert_eq!(
            std::fs::read(dirs[0].path().join(rel)).unwrap(),
            std::fs::read(dirs[1].path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn constant_predictor_has_undefined_correlation() {
    let (models, clips, table) = report_inputs();
    let series = predict_variants(&models[..1], &clips, &table, &[DegradationKind::GaussianNoise], &StreamOptions::default()).unwrap();
    let c = QualityTriplet::from_array([0.5, 0.5, 0.5]);
    let mut all = series.clone();
    all.extend(series.iter().map(|s| constant_series("constant_mean", c, s).unwrap()));
    let summaries = summarize(&all).unwrap();
    let constant = summaries.iter().find(|s| s.model_id == "constant_mean").unwrap();
    assert_eq!(constant.r, [None, None, None]);
    let csv = report_csv(&summaries);
    assert!(csv.lines().any(|l| l.starts_with("constant_mean,") && l.ends_with(",NA,NA,NA,32")));
}

use streamvq::metrics::QualityTriplet;

proptest! {
    #[test]
    fn pearson_is_affine_invariant(
        x in proptest::collection::vec(-5.0f64..5.0, 3..20),
        noise in proptest::collection::vec(-1.0f64..1.0, 20),
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
    ) {
        let y: Vec<f64> = x.iter().zip(&noise).map(|(v, n)| v + n).collect();
        if let Ok(r) = pearson_r(&x, &y) {
            let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson_r(&xs, &y).unwrap() - r).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn smoothing_is_shift_equivariant(x in proptest::collection::vec(-2.0f64..2.0, 1..40)) {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let a = moving_average(&mean_center(&x), 3).unwrap();
        let b = moving_average(&x, 3).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - (q - m)).abs() < 1e-12);
        }
        let centered = mean_center(&b);
        prop_assert!((centered.iter().sum::<f64>() / x.len() as f64).abs() < 1e-12);
        prop_assert!((mean_center(&x).iter().sum::<f64>() / x.len() as f64).abs() < 1e-12);
        prop_assert_eq!(moving_average(&x, 1).unwrap(), x.clone());
    }

    #[test]
    fn constant_series_survive_smoothing(c in -1.0f64..1.0, n in 1usize..30) {
        let x = vec![c; n];
        prop_assert_eq!(moving_average(&x, 3).unwrap(), x.clone());
        prop_assert_eq!(mean_center(&x), vec![0.0; n]);
    }
}
