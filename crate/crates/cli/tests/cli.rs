use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vitfeat::descriptor_store::write_field;
use vitfeat::{DescriptorField, Facet, FieldMeta, SaliencyField};

fn vitfeat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitfeat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn meta(id: &str, dim: u32) -> FieldMeta {
    FieldMeta {
        image_id: id.into(),
        image_height_px: 22,
        image_width_px: 22,
        patch_size_px: 8,
        stride_px: 2,
        layer_index: 11,
        facet: Facet::Key,
        model_id: "dino_vits8".into(),
        descriptor_dim: dim,
        augmented: false,
    }
}

/// Three 8x8-cell images: a salient square object on a plain background,
/// with a little per-cell jitter so clustering has something to do.
fn write_inputs(dir: &Path) {
    for (i, id) in ["img0", "img1", "img2"].iter().enumerate() {
        let (mut data, mut sal) = (Vec::new(), Vec::new());
        for r in 0..8 {
            for c in 0..8 {
                let inside = (2 + i..5 + i).contains(&r) && (2..6).contains(&c);
                let j = ((r * 8 + c) % 5) as f32 * 0.01;
                data.extend(if inside { [1.0, 0.1 + j, 0.0] } else { [0.0, 0.2 + j, 1.0] });
                sal.push(if inside { 0.8 } else { 0.05 });
            }
        }
        let f = DescriptorField::new(meta(id, 3), data).unwrap();
        write_field(&f.into(), dir.join(format!("{id}_11_key.vitd"))).unwrap();
        let s = SaliencyField::new(meta(id, 1), sal).unwrap();
        write_field(&s.into(), dir.join(format!("{id}_saliency.vitd"))).unwrap();
    }
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(dir_bytes(&p));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn coseg_is_reproducible_from_its_report() {
    let input = tempfile::tempdir().unwrap();
    write_inputs(input.path());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let input_s = input.path().to_str().unwrap();
    assert_ok(&vitfeat(&[
        "coseg", "--input-dir", input_s, "--out-dir", a.path().to_str().unwrap(), "--k", "2",
    ]));
    let mask = fs::read(a.path().join("masks/img0.png")).unwrap();
    assert!(!mask.is_empty());
    let report = a.path().join("report.json");
    assert_ok(&vitfeat(&[
        "--threads", "1", "coseg", "--from-report", report.to_str().unwrap(), "--out-dir",
        b.path().to_str().unwrap(),
    ]));
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let json: serde_json::Value = serde_json::from_slice(&fs::read(report).unwrap()).unwrap();
    assert_eq!(json["clustering"]["k"], 2);
    assert_eq!(json["clustering"]["fg_clusters"].as_array().unwrap().len(), 1);
}

#[test]
fn config_file_then_flags() {
    let input = tempfile::tempdir().unwrap();
    write_inputs(input.path());
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "[coseg]\ninput_dir = {:?}\nk = 3\n[parts]\nnum_parts = 3\n",
            input.path().to_str().unwrap()
        ),
    )
    .unwrap();
    let o = out.path().join("parts");
    assert_ok(&vitfeat(&[
        "parts", "--config", cfg.to_str().unwrap(), "--k", "2", "--num-parts", "1", "--out-dir",
        o.to_str().unwrap(),
    ]));
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(o.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["coseg"]["k"], 2);
    assert_eq!(json["config"]["num_parts"], 1);
    assert!(o.join("parts/img1.png").is_file());
    assert!(o.join("parts_colors.json").is_file());
}

#[test]
fn match_and_pca_run() {
    let input = tempfile::tempdir().unwrap();
    write_inputs(input.path());
    let out = tempfile::tempdir().unwrap();
    let input_s = input.path().to_str().unwrap();
    assert_ok(&vitfeat(&[
        "match", "--input-dir", input_s, "--layer", "11", "--source", "img0", "--target", "img1",
        "--out-dir", out.path().to_str().unwrap(),
    ]));
    let lines = fs::read_to_string(out.path().join("matches.jsonl")).unwrap();
    assert!(lines.lines().count() > 0);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["sim"].as_f64().unwrap() <= 1.0 + 1e-9);
    }

    let pca_out = out.path().join("pca_run");
    assert_ok(&vitfeat(&[
        "pca", "--input-dir", input_s, "--n-components", "2", "--out-dir", pca_out.to_str().unwrap(),
    ]));
    assert!(pca_out.join("pca/img2_pc1.png").is_file());
}

#[test]
fn bad_inputs_exit_with_two() {
    let empty = tempfile::tempdir().unwrap();
    let out = empty.path().join("out");
    let o = vitfeat(&["coseg", "--input-dir", empty.path().to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no *_11_key.vitd"));

    // Missing required flag is a usage error.
    assert_eq!(vitfeat(&["coseg"]).status.code(), Some(2));
    assert_eq!(vitfeat(&["coseg", "--out-dir", out.to_str().unwrap()]).status.code(), Some(2));

    // Corrupt file.
    fs::write(empty.path().join("x_11_key.vitd"), b"NOPE").unwrap();
    let o = vitfeat(&["coseg", "--input-dir", empty.path().to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"), "{}", String::from_utf8_lossy(&o.stderr));
}
