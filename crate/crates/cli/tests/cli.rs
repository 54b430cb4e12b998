use std::path::Path;
use std::process::{Command, Output};

fn glyphforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glyphforge"))
        .args(args)
        .env_remove("GLYPHFORGE_LLM_URL")
        .env_remove("GLYPHFORGE_DETECTOR_URL")
        .env_remove("GLYPHFORGE_DENOISER_URL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMALL: [&str; 6] = ["--size", "64", "--steps", "6", "--semtypo-steps", "6"];

#[test]
fn generate_writes_artifacts_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let mut args = vec![
            "generate",
            "--char",
            "rose",
            "--seed",
            "7",
            "--out",
            dir.to_str().unwrap(),
        ];
        args.extend(SMALL);
        let o = glyphforge(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        dirs.push(dir);
    }
    for f in ["final.png", "mask.png", "subject_star_0.png", "manifest.json"] {
        assert_eq!(
            std::fs::read(dirs[0].join(f)).unwrap(),
            std::fs::read(dirs[1].join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn prompt_overrides_are_recorded_as_manual() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "generate",
        "--char",
        "kiwi",
        "--subject-prompt",
        "a ripe kiwi fruit",
        "--surrounding-prompt",
        "green flesh",
        "--out",
        tmp.path().to_str().unwrap(),
    ];
    args.extend(SMALL);
    let o = glyphforge(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest(tmp.path())["prompts"][0]["source"], "manual");
}

#[test]
fn two_concepts_and_per_concept_gamma() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "generate",
        "--char",
        "snow",
        "--concepts",
        "snow,rose",
        "--gamma",
        "0.7,0.9",
        "--out",
        tmp.path().to_str().unwrap(),
    ];
    args.extend(SMALL);
    let o = glyphforge(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(tmp.path());
    assert_eq!(m["regions"].as_array().unwrap().len(), 2);
    assert_eq!(m["regions"][1]["gamma"], 0.9);
    assert!(tmp.path().join("mask_1.png").exists());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"char": "rose", "seed": 3, "alpha": 0.3, "size_px": 64, "steps": 5}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = glyphforge(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["config"]["seed"], 5);
    assert_eq!(m["config"]["alpha"], 0.3);
    assert_eq!(m["config"]["steps"], 5);
}

#[test]
fn replaying_a_manifest_reproduces_the_image() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let mut args = vec![
        "generate",
        "--char",
        "snow",
        "--backend",
        "toy-micro",
        "--out",
        first.to_str().unwrap(),
    ];
    args.extend(SMALL);
    assert!(glyphforge(&args).status.success());
    let second = tmp.path().join("second");
    let manifest_path = first.join("manifest.json");
    let o = glyphforge(&[
        "generate",
        "--config",
        manifest_path.to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(first.join("final.png")).unwrap(),
        std::fs::read(second.join("final.png")).unwrap()
    );
}

#[test]
fn stage_failure_exits_nonzero_with_tag() {
    let tmp = tempfile::tempdir().unwrap();
    let o = glyphforge(&[
        "generate",
        "--char",
        "kiwi",
        "--size",
        "64",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[knowledge]"), "{}", stderr(&o));

    let o = glyphforge(&["generate", "--char", "rose", "--strength", "1.5"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("[config]"), "{}", stderr(&o));

    let o = glyphforge(&["generate"]);
    assert!(!o.status.success());
}

#[test]
fn regions_prints_ranked_boxes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = glyphforge(&["regions", "--char", "rose", "--size", "64", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("1. [0.300, 0.220, 0.980, 0.900]  conf 0.620"), "{text}");
    assert!(!text.contains("conf 0.710"), "{text}");
    assert!(tmp.path().join("mask_0.png").exists());

    let o = glyphforge(&[
        "regions",
        "--char",
        "rose",
        "--size",
        "64",
        "--conf-min",
        "0",
        "--area-lo",
        "0",
        "--area-hi",
        "1",
        "--out",
        out,
    ]);
    let text = stdout(&o);
    let first = text.find("conf 0.710").unwrap();
    let second = text.find("conf 0.620").unwrap();
    assert!(first < second, "{text}");
}

#[test]
fn regions_without_detections_reports_fallback() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = tmp.path().join("boxes.json");
    std::fs::write(&fixture, r#"{"rose|a blooming red rose flower": []}"#).unwrap();
    let o = glyphforge(&[
        "regions",
        "--char",
        "rose",
        "--size",
        "64",
        "--detector-fixture",
        fixture.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("fallback box used"), "{text}");
    assert!(text.contains("fallback: [0.146, 0.146, 0.854, 0.854]"), "{text}");
}

#[test]
fn prompts_prints_the_fixture_pair() {
    let o = glyphforge(&["prompts", "--char", "rose"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v[0]["subject"], "a blooming red rose flower");
    assert_eq!(v[0]["source"], "fixture");
}

#[test]
fn semtypo_at_zero_strength_returns_the_subject() {
    let tmp = tempfile::tempdir().unwrap();
    let st = tmp.path().join("st");
    let full = tmp.path().join("full");
    let o = glyphforge(&[
        "semtypo",
        "--char",
        "rose",
        "--size",
        "64",
        "--strength",
        "0",
        "--out",
        st.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut args = vec![
        "generate",
        "--char",
        "rose",
        "--strength",
        "0",
        "--out",
        full.to_str().unwrap(),
    ];
    args.extend(SMALL);
    assert!(glyphforge(&args).status.success());
    assert_eq!(
        std::fs::read(st.join("subject_star_0.png")).unwrap(),
        std::fs::read(full.join("subject_0.png")).unwrap()
    );
}
