use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exedit_core::dataset::{Manifest, ManifestEntry, ReviewStatus};
use exedit_core::image_ops::{load_image, save_png};
use exedit_core::metrics::Metrics;
use exedit_core::pipeline::{apply_edit, write_bundle, EditOptions, EditType, NullObserver, StubEditor};
use exedit_core::reference::{ReferenceModels, DEFAULT_SEED};
use exedit_core::suite::graded_suite;
use image::{Rgb, RgbImage};
use serde_json::Value;

fn exedit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exedit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("EXEDIT_BACKEND")
        .env_remove("EXEDIT_CACHE_DIR")
        .env_remove(exedit_core::vlm::VLM_URL_ENV)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), stdout(&o), String::from_utf8_lossy(&o.stderr));
    o
}

fn json(o: Output) -> Value {
    serde_json::from_slice(&ok(o).stdout).unwrap()
}

fn write_inputs(dir: &Path) {
    let img = |f: fn(u32, u32) -> [u8; 3]| RgbImage::from_fn(96, 96, move |x, y| Rgb(f(x, y)));
    save_png(&img(|x, y| [(x * 2) as u8, (y * 2) as u8, 90]), dir.join("x.png")).unwrap();
    save_png(&img(|x, y| [(x * 2) as u8 / 2 + 120, (y * 2) as u8 / 2, 40]), dir.join("xe.png")).unwrap();
    save_png(&img(|x, y| [((x + y) % 256) as u8, 140, (y * 2) as u8]), dir.join("y.png")).unwrap();
}

const TRIPLET: [&str; 6] = ["--x", "x.png", "--xedit", "xe.png", "--y", "y.png"];

fn args<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend(TRIPLET);
    v.extend(extra);
    v
}

fn core_fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/natural")
}

#[test]
fn stub_edit_writes_a_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    let out = ok(exedit(&args("edit", &["--backend", "stub", "--out", "res"]), tmp.path()));
    assert!(stdout(&out).contains("result.png"));
    for f in ["result.png", "provenance.json", "timings.json", "caption.txt"] {
        assert!(tmp.path().join("res").join(f).exists(), "{f} missing");
    }
    let prov: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("res/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["lambda_used"], 0.65);
    assert_eq!(prov["options"]["inversion_steps"], 1000);
}

#[test]
fn missing_input_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = exedit(&["edit", "--x", "x.png", "--xedit", "xe.png"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--y"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    assert_eq!(exedit(&["frobnicate"], tmp.path()).status.code(), Some(2));
    assert_eq!(exedit(&args("edit", &["--backend", "stub", "--lambda", "NaN"]), tmp.path()).status.code(), Some(2));
    assert_eq!(exedit(&args("edit", &["--backend", "stub", "--gen-steps", "0"]), tmp.path()).status.code(), Some(2));
    std::fs::write(tmp.path().join("bad.json"), "{\"lamda\": 1}").unwrap();
    assert_eq!(exedit(&args("edit", &["--backend", "stub", "--config", "bad.json"]), tmp.path()).status.code(), Some(2));
    // domain failure: the input file does not exist
    let out = exedit(&["edit", "--x", "nope.png", "--xedit", "xe.png", "--y", "y.png", "--backend", "stub"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.png"));
    assert_eq!(exedit(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    std::fs::write(tmp.path().join("cfg.json"), r#"{"lambda": 0.3, "backend": "stub", "seed": 9}"#).unwrap();
    let v = json(exedit(&args("edit", &["--config", "cfg.json", "--json", "--out", "a"]), tmp.path()));
    assert_eq!(v["lambda"], 0.3);
    let v = json(exedit(&args("edit", &["--config", "cfg.json", "--json", "--lambda", "0.9", "--out", "b"]), tmp.path()));
    assert_eq!(v["lambda"], 0.9);
    let prov: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("b/provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["options"]["seed"], 9);
}

#[test]
fn dry_run_prints_the_plan_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    let v = json(exedit(&args("edit", &["--dry-run", "--json", "--out", "res", "--ablate", "no_caption"]), tmp.path()));
    let stages: Vec<(&str, &str)> = v["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| (s["stage"].as_str().unwrap(), s["action"].as_str().unwrap()))
        .collect();
    assert_eq!(stages[0], ("captioning", "skipped"));
    assert!(stages.contains(&("inverting", "run")));
    assert!(!tmp.path().join("res").exists());

    let text = stdout(&ok(exedit(&args("sweep", &["--dry-run", "--lambdas", "0,0.5,1"]), tmp.path())));
    assert!(text.contains("lambdas [0.0, 0.5, 1.0]"), "{text}");
    assert!(text.contains("inverting"), "{text}");
}

#[test]
fn seeded_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    for backend in ["stub", "reference"] {
        let run = |out: &str| {
            json(exedit(
                &args("edit", &["--backend", backend, "--seed", "17", "--inversion-steps", "8", "--gen-steps", "3", "--json", "--out", out]),
                tmp.path(),
            ))
        };
        let (a, b) = (run(&format!("{backend}-a")), run(&format!("{backend}-b")));
        assert_eq!(a["output_sha256"], b["output_sha256"], "{backend}");
        assert_eq!(a["caption"], b["caption"]);
        let png = |d: &str| std::fs::read(tmp.path().join(d).join("result.png")).unwrap();
        assert_eq!(png(&format!("{backend}-a")), png(&format!("{backend}-b")));
    }
}

#[test]
fn sweep_and_ablate_bundles() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    let v = json(exedit(&args("sweep", &["--backend", "stub", "--lambdas", "0,0.4,0.8,1.2", "--json", "--out", "sw"]), tmp.path()));
    assert_eq!(v["results"].as_array().unwrap().len(), 4);
    for i in 0..4 {
        assert!(tmp.path().join(format!("sw/result_{i}.png")).exists());
    }
    let v = json(exedit(&args("ablate", &["--backend", "stub", "--json", "--out", "ab"]), tmp.path()));
    let variants: Vec<&String> = v["variants"].as_object().unwrap().keys().collect();
    assert_eq!(variants, ["no_caption", "no_image_delta", "no_injection", "none"]);
    assert!(tmp.path().join("ab/no_caption/result.png").exists());
}

#[test]
fn invert_reports_the_cache_entry() {
    let tmp = tempfile::tempdir().unwrap();
    write_inputs(tmp.path());
    let base = ["invert", "--y", "y.png", "--inversion-steps", "6", "--cache-dir", "cache", "--json"];
    let v = json(exedit(&base, tmp.path()));
    assert_eq!(v["cached"], false);
    let path = tmp.path().join(v["cache_path"].as_str().unwrap());
    assert!(path.exists(), "{path:?}");
    let v = json(exedit(&base, tmp.path()));
    assert_eq!(v["cached"], true);

    let mut with_recon = base.to_vec();
    with_recon.extend(["--reconstruct", "recon.png"]);
    ok(exedit(&with_recon, tmp.path()));
    assert_eq!(load_image(tmp.path().join("recon.png")).unwrap().dimensions(), (512, 512));

    // plain mode prints just the path
    let plain = stdout(&ok(exedit(&base[..base.len() - 1], tmp.path())));
    assert_eq!(tmp.path().join(plain.trim()), path);
}

#[test]
fn eval_prints_summary_matching_in_process_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = core_fixtures();
    let photos: Vec<(String, RgbImage)> = ["astronaut", "coffee", "chelsea", "rocket", "grass", "brick"]
        .iter()
        .map(|n| (n.to_string(), load_image(dir.join(format!("{n}.jpg"))).unwrap()))
        .collect();
    let suite = graded_suite(&photos, 10);
    let mut entries = Vec::new();
    let opts = EditOptions::default();
    for t in &suite {
        let d = tmp.path().join("inputs").join(&t.id);
        let names = ["x.png", "xe.png", "y.png", "ye.png"];
        for (img, n) in [&t.x, &t.x_edit, &t.y, t.y_edit.as_ref().unwrap()].into_iter().zip(names) {
            save_png(img, d.join(n)).unwrap();
        }
        let rel = |n: &str| PathBuf::from("inputs").join(&t.id).join(n);
        entries.push(ManifestEntry {
            id: t.id.clone(),
            x: rel(names[0]),
            x_edit: rel(names[1]),
            y: rel(names[2]),
            y_edit: rel(names[3]),
            edit_type: Some(EditType::GlobalStyle),
            review_status: ReviewStatus::Accepted,
            instruction: String::new(),
        });
        let r = apply_edit(&StubEditor, t, &opts, &mut NullObserver).unwrap();
        write_bundle(&r, &tmp.path().join("results").join(&t.id)).unwrap();
    }
    let manifest = Manifest::new(entries);
    manifest.save(&tmp.path().join("manifest.json")).unwrap();

    let text = stdout(&ok(exedit(&["eval", "--manifest", "manifest.json", "--results", "results", "--method", "stub"], tmp.path())));
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("Method") && lines[0].contains("LPIPS") && lines[0].contains("S-Vis"), "{text}");
    assert!(lines[1].starts_with("stub"), "{text}");
    assert!(text.contains("samples: 10  failures: 0"), "{text}");
    assert!(tmp.path().join("results/metrics.csv").exists());

    let v = json(exedit(&["eval", "--manifest", "manifest.json", "--results", "results", "--json"], tmp.path()));
    let expected = Metrics::reference(&ReferenceModels::new(DEFAULT_SEED)).evaluate(&manifest, tmp.path(), &tmp.path().join("results"));
    for (key, want) in [
        ("lpips", expected.means.lpips),
        ("ssim", expected.means.ssim),
        ("clip_score", expected.means.clip_score),
        ("dir_sim", expected.means.dir_sim),
        ("s_visual", expected.means.s_visual),
    ] {
        let got = v["means"][key].as_f64().unwrap();
        assert!((got - want.unwrap()).abs() < 1e-12, "{key}: {got} vs {want:?}");
    }
    let cell = format!("{:.4}", expected.means.ssim.unwrap());
    assert!(lines[1].contains(&cell), "{text}");
}

#[test]
fn curation_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut csv = String::from("source_id,image,edited_image,instruction\n");
    for i in 0..3u8 {
        let a = RgbImage::from_pixel(32, 32, Rgb([i * 60, 100, 100]));
        let b = RgbImage::from_pixel(32, 32, Rgb([i * 60, 30, 200]));
        save_png(&a, root.join(format!("src/r{i}.png"))).unwrap();
        save_png(&b, root.join(format!("src/r{i}e.png"))).unwrap();
        csv += &format!("r{i},r{i}.png,r{i}e.png,Make it blue\n");
    }
    std::fs::write(root.join("src/records.csv"), csv).unwrap();

    let v = json(exedit(&["curate", "pair", "--records", "src/records.csv", "--out", "cands.json", "--json"], root));
    assert_eq!(v["candidates"], 6);
    ok(exedit(&["curate", "export", "--candidates", "cands.json", "--out", "review"], root));
    assert_eq!(std::fs::read_dir(root.join("review/sheets")).unwrap().count(), 6);

    // reviewer accepts two rows, rejects one, leaves the rest pending
    let review = std::fs::read_to_string(root.join("review/review.csv")).unwrap();
    let mut lines: Vec<String> = review.lines().map(str::to_owned).collect();
    for (i, decision) in [(1, "accept,global_style"), (2, "yes,Background Change"), (3, "reject,")] {
        let cols: Vec<&str> = lines[i].split(',').collect();
        lines[i] = format!("{},{},{},{},", cols[0], cols[1], cols[2], decision);
    }
    std::fs::write(root.join("review/review.csv"), lines.join("\n") + "\n").unwrap();

    let v = json(exedit(&["curate", "ingest", "--review", "review/review.csv", "--manifest-dir", "review", "--json"], root));
    assert_eq!((v["accepted"].as_u64(), v["rejected"].as_u64(), v["pending"].as_u64()), (Some(2), Some(1), Some(3)));
    let manifest = Manifest::load(&root.join("review/manifest.json")).unwrap();
    assert_eq!(manifest.entries.len(), 2);
    assert_eq!(manifest.total(), 2);
    manifest.validate(&root.join("review")).unwrap();
}

#[test]
fn serve_dry_run_resolves_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(Command::new(env!("CARGO_BIN_EXE_exedit"))
        .args(["serve", "--dry-run", "--backend", "stub"])
        .env("EXEDIT_PORT", "9123")
        .env("EXEDIT_QUEUE_CAP", "3")
        .current_dir(tmp.path())
        .output()
        .unwrap());
    let text = stdout(&out);
    assert!(text.contains("127.0.0.1:9123") && text.contains("queue cap 3") && text.contains("Stub"), "{text}");
}
