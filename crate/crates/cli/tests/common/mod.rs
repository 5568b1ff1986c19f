#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stylebank_cli::manifest::RunManifest;
use stylebank_core::image::write_ppm;
use stylebank_core::synth;

pub fn stylebank(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylebank"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs a command that must succeed and returns its stdout.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = stylebank(dir, args);
    assert!(
        out.status.success(),
        "stylebank {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

/// Runs a command with a manifest and returns it.
pub fn ok_manifest(dir: &Path, name: &str, args: &[&str]) -> RunManifest {
    let path = dir.join(format!("{name}.manifest.json"));
    let mut full: Vec<&str> = args.to_vec();
    let p = path.to_str().unwrap();
    full.extend(["--manifest", p]);
    ok(dir, &full);
    RunManifest::load(&path).unwrap()
}

/// Writes `n` style images of one family into `dir/<sub>`.
pub fn write_styles(dir: &Path, sub: &str, family: u64, n: usize, px: usize) -> Vec<PathBuf> {
    let styles = dir.join(sub);
    std::fs::create_dir_all(&styles).unwrap();
    (0..n)
        .map(|v| {
            let p = styles.join(format!("style{v}.ppm"));
            write_ppm(&synth::style_image(family, v as u64, px, px), &p).unwrap();
            p
        })
        .collect()
}

pub fn write_content(dir: &Path, name: &str, seed: u64, px: usize) -> PathBuf {
    let p = dir.join(name);
    write_ppm(&synth::content_image(seed, px, px), &p).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Style caches, bank, tokens and statistics produced through the CLI.
pub struct Prepared {
    pub caches: Vec<String>,
    pub bank: String,
    pub phi: String,
    pub stats: String,
}

/// Inverts, distills, fine-tunes, embeds and generates statistics for `n`
/// style images of side `style_px`, with all files under `dir/<tag>*`.
pub fn prepare(dir: &Path, tag: &str, family: u64, n: usize, style_px: usize, steps: usize, extra: &[&str]) -> Prepared {
    let styles = write_styles(dir, &format!("{tag}_styles"), family, n, style_px);
    let steps_s = steps.to_string();
    let mut caches = Vec::new();
    for (i, img) in styles.iter().enumerate() {
        let out = format!("{tag}_s{i}.skvc");
        let mut args = vec!["invert", "--image", s(img), "--steps", &steps_s, "--out", &out];
        args.extend(extra);
        ok(dir, &args);
        caches.push(out);
    }
    let bank = format!("{tag}.skvb");
    let mut args: Vec<&str> = vec!["distill", "--out", &bank, "--caches"];
    args.extend(caches.iter().map(|c| c.as_str()));
    args.extend(extra);
    ok(dir, &args);

    let styles_dir = format!("{tag}_styles");
    let adapter = format!("{tag}.adp1");
    let mut args = vec!["finetune", "--styles", &styles_dir, "--steps", "5", "--out", &adapter];
    args.extend(extra);
    ok(dir, &args);
    let phi = format!("{tag}_phi.ten");
    let mut args = vec!["embed", "--styles", &styles_dir, "--adapter", &adapter, "--out", &phi];
    args.extend(extra);
    ok(dir, &args);
    let stats = format!("{tag}.snrm");
    let avg = format!("{tag}_avg.ten");
    let mut args = vec!["avgimage", "--phi", &phi, "--out", &avg, "--stats", &stats, "--steps", &steps_s];
    args.extend(extra);
    ok(dir, &args);
    Prepared {
        caches,
        bank,
        phi,
        stats,
    }
}
