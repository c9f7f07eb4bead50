//! Command-line pipeline on a small exemplar: generate, precompute,
//! compress, sample-test and render.

use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glintcache")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SCENE: &str = r#"
[camera]
position = [0.0, -2.2, 1.7]
look_at = [0.0, 0.0, 0.2]
fov_deg = 40.0
width = 16
height = 16

[surface]
width = 2.0
height = 2.0
bend = 1.2
uv_scale = [4.0, 4.0]

[material]
alpha = 0.15

[[lights]]
kind = "point"
position = [0.4, -1.0, 2.0]
intensity = [20.0, 20.0, 20.0]
"#;

#[test]
fn pipeline_runs_and_renders_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (map, pyr, store) = (d.join("m.nraw"), d.join("pyr"), d.join("s.cndf"));
    ok(&["generate", "--kind", "isotropic", "--resolution", "256", "--seed", "3", "--out", s(&map)]);
    ok(&["precompute", "--map", s(&map), "--tileable", "--stride", "16", "--ndf-res", "64", "--out", s(&pyr)]);
    ok(&["compress", "--pyramid", s(&pyr), "--rank", "4", "--region", "4", "--out", s(&store)]);

    let st = ok(&[
        "sample-test",
        "--store",
        s(&store),
        "--footprint",
        "128,128,12",
        "--samples",
        "20000",
        "--out",
        s(&d.join("st")),
    ]);
    let text = String::from_utf8_lossy(&st.stdout);
    assert!(text.contains("relative_l1"), "{text}");

    let scene = d.join("scene.toml");
    std::fs::write(&scene, SCENE).unwrap();
    let render = |seed: &str, prefix: &str| {
        ok(&[
            "render", "--scene", s(&scene), "--store", s(&store), "--spp", "2", "--seed", seed, "--out",
            s(&d.join(prefix)),
        ]);
        std::fs::read(d.join(format!("{prefix}.pfm"))).unwrap()
    };
    let (a, b, c) = (render("5", "a"), render("5", "b"), render("6", "c"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(d.join("a.png").exists() && d.join("a.stats.json").exists());
}

#[test]
fn invalid_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["render", "--scene", "/nonexistent.toml", "--store", "/nonexistent", "--out", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = bin(&["sample-test", "--store", "/nonexistent", "--footprint", "1,2", "--out", "x"]);
    assert!(!out.status.success());
}
