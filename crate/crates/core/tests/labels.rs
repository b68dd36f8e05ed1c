mod common;

use std::path::Path;

use streamvq::dataio::{scan_dataset, Layout};
use streamvq::degrade::DegradationKind;
use streamvq::labels::*;
use streamvq::Error;

fn ten_frame_table() -> LabelTable {
    let root = tempfile::tempdir().unwrap();
    streamvq::synth::write_dataset(root.path(), 1, 10, 48, 48, 4).unwrap();
    let m = scan_dataset(root.path(), Layout::DavisStyle).unwrap();
    let kinds = [DegradationKind::GaussianBlur, DegradationKind::GaussianNoise];
    generate_labels(&m, &kinds, &[0.0, 0.5, 1.0], 9, &LabelOptions::default()).unwrap().0
}

fn sidecar_from(table: &LabelTable, mut edit: impl FnMut(&str) -> String) -> LabelTable {
    let csv = table.to_csv().unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let mut out = format!("{}\n", lines.next().unwrap());
    for l in lines {
        out.push_str(&edit(l));
        out.push('\n');
    }
    LabelTable::parse_csv(&out, Path::new("sidecar.csv")).unwrap()
}

fn with_lpips(line: &str, v: &str) -> String {
    let mut f: Vec<&str> = line.split(',').collect();
    f[5] = v;
    f[8] = "external";
    f.join(",")
}

#[test]
fn cardinality_identity_rows_and_determinism() {
    let t = ten_frame_table();
    assert_eq!(t.len(), 60);
    for (k, r) in t.iter() {
        if k.variant.amplitude() == 0.0 {
            assert!(r.triplet.as_array().iter().all(|v| (v - 1.0).abs() < 1e-6), "{k}");
        }
    }
    assert_eq!(ten_frame_table().to_csv().unwrap(), t.to_csv().unwrap());
}

#[test]
fn export_import_round_trip_and_bad_rows() {
    let t = ten_frame_table();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("labels.csv");
    t.export_csv(&p).unwrap();
    assert_eq!(LabelTable::import_csv(&p).unwrap(), t);

    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let header_at = lines.iter().position(|l| *l == CSV_HEADER).unwrap();
    let mut bad = lines.clone();
    let broken = with_lpips(lines[header_at + 2], "1.2");
    bad[header_at + 2] = &broken;
    match LabelTable::parse_csv(&bad.join("\n"), &p) {
        Err(Error::Csv { line, .. }) => assert_eq!(line, header_at + 3),
        other => panic!("{other:?}"),
    }
    let mut dup = lines.clone();
    dup.push(lines[header_at + 1]);
    let err = LabelTable::parse_csv(&dup.join("\n"), &p).unwrap_err().to_string();
    assert!(err.contains("duplicate key"), "{err}");
}

#[test]
fn merge_counts_matched_and_stale_keys() {
    let t = ten_frame_table();
    let all = sidecar_from(&t, |l| with_lpips(l, "0.25"));
    let (merged, rep) = merge_external_lpips(&t, &all);
    assert_eq!((rep.updated, rep.unmatched.len()), (60, 0));
    assert!(merged.iter().all(|(_, r)| r.triplet.lpips_q == 0.25 && r.lpips_source == LpipsSource::External));
    for ((_, a), (_, b)) in merged.iter().zip(t.iter()) {
        assert_eq!((a.triplet.psnr_q, a.triplet.ssim_q), (b.triplet.psnr_q, b.triplet.ssim_q));
    }

    let (same, rep) = merge_external_lpips(&t, &LabelTable::default());
    assert_eq!((same, rep.updated), (t.clone(), 0));

    let mut first = true;
    let stale = sidecar_from(&t, |l| {
        let line = with_lpips(l, "0.5");
        if std::mem::take(&mut first) {
            let mut f: Vec<&str> = line.split(',').collect();
            f[4] = "12345";
            f.join(",")
        } else {
            line
        }
    });
    let (_, rep) = merge_external_lpips(&t, &stale);
    assert_eq!((rep.updated, rep.unmatched.len()), (59, 1));
    assert_eq!(rep.unmatched[0].variant.seed, 12345);
}

#[test]
fn fixture_impact_curves_start_at_one() {
    let t = common::fixture_labels(&[DegradationKind::Brightness], &[0.0, 0.5, 1.0]);
    let c = impact_curve(&t, DegradationKind::Brightness);
    assert_eq!(c.len(), 3);
    assert!([c[0].lpips_q, c[0].psnr_q, c[0].ssim_q].iter().all(|v| (v - 1.0).abs() < 1e-6));
    assert_eq!(c[0].count, 16);
    let csv = impact_curve_csv(&c);
    assert_eq!(csv.lines().count(), 4);
}
