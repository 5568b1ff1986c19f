mod common;

use common::{ok, ok_manifest, prepare, s, stylebank, write_content, write_styles};

/// Output digest of `distill` then `stylize` on the toy fixtures below,
/// recorded once from this implementation.
const GOLDEN_STYLIZE_DIGEST: &str = "48540c0b67808155";

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["distill", "--bogus"], &["stylize", "--content", "c.ppm"], &[]] {
        let out = stylebank(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(stderr(&out).contains("Usage"), "{args:?}");
    }
    let out = stylebank(dir.path(), &["--threads", "0", "cache", "inspect", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr(&out).trim(), "error[usage]: --threads must be at least 1");
}

#[test]
fn file_errors_exit_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = stylebank(dir.path(), &["cache", "inspect", "missing.skvc"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[io]: "), "{err}");

    std::fs::write(dir.path().join("junk.skvc"), b"NOPE0000000000000000").unwrap();
    let out = stylebank(dir.path(), &["cache", "inspect", "junk.skvc"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[bad_magic]: "));

    std::fs::write(dir.path().join("short.skvc"), b"SK").unwrap();
    let out = stylebank(dir.path(), &["cache", "inspect", "short.skvc"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[truncated_index]: "));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare(dir.path(), "t", 1, 1, 16, 2, &[]);
    write_content(dir.path(), "c.ppm", 0, 16);
    let run = |cfg: &str| {
        std::fs::write(dir.path().join("cfg.json"), cfg).unwrap();
        stylebank(
            dir.path(),
            &[
                "stylize", "--content", "c.ppm", "--bank", &p.bank, "--stats", &p.stats, "--phi", &p.phi, "--config",
                "cfg.json", "--out", "o.ppm",
            ],
        )
    };
    let out = run(r#"{"steps": 2, "colour": true}"#);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[config]: "));
    let out = run(r#"{"steps": 2, "structure_fraction": 2.0}"#);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error[invalid_argument]: "));
    let out = run(r#"{"steps": 3}"#);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(run(r#"{"steps": 2}"#).status.success());
}

#[test]
fn inspect_lists_cache_and_bank_indices() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare(dir.path(), "t", 2, 2, 16, 2, &[]);
    let text = ok(dir.path(), &["cache", "inspect", &p.caches[0]]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2 * 2 * 2);
    assert!(lines.iter().all(|l| l.split(',').count() == 6));
    assert!(lines[0].starts_with("0,0,0,"));
    let bank = ok(dir.path(), &["cache", "inspect", &p.bank]);
    assert_eq!(bank.lines().count(), 8);
}

#[test]
fn distill_ignores_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare(dir.path(), "t", 3, 3, 16, 3, &[]);
    let digest = |threads: &str| {
        let mut args = vec!["--threads", threads, "--seed", "4", "distill", "--out", "b.skvb", "--caches"];
        args.extend(p.caches.iter().map(|c| c.as_str()));
        let m = ok_manifest(dir.path(), &format!("d{threads}"), &args);
        assert_eq!(m.threads.to_string(), threads);
        m.outputs[0].fnv1a.clone()
    };
    assert_eq!(digest("1"), digest("8"));
}

#[test]
fn manifest_phases_cover_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare(dir.path(), "t", 4, 2, 16, 3, &[]);
    write_content(dir.path(), "c.ppm", 1, 16);
    std::fs::write(dir.path().join("cfg.json"), r#"{"steps": 3}"#).unwrap();
    let m = ok_manifest(
        dir.path(),
        "st",
        &[
            "stylize", "--content", "c.ppm", "--bank", &p.bank, "--stats", &p.stats, "--phi", &p.phi, "--config",
            "cfg.json", "--out", "o.ppm",
        ],
    );
    assert_eq!(m.command, "stylize");
    assert_eq!(m.config["stylize"]["steps"], 3);
    assert_eq!(m.outputs.len(), 1);
    assert_eq!(m.outputs[0].fnv1a.len(), 16);
    let phases: f64 = m.phases.iter().map(|p| p.ms).sum();
    assert!(phases <= m.total_ms);
    assert!(phases >= 0.9 * m.total_ms, "{phases} of {}", m.total_ms);
    assert!(m.phase_ms("stylize").is_some());
}

#[test]
fn metric_commands() {
    let dir = tempfile::tempdir().unwrap();
    let styles = write_styles(dir.path(), "sty", 1, 2, 8);
    let out_dir = dir.path().join("out");
    std::fs::create_dir_all(&out_dir).unwrap();
    for i in 0..2 {
        std::fs::copy(write_content(dir.path(), &format!("c{i}.ppm"), i, 8), out_dir.join(format!("o{i}.ppm"))).unwrap();
    }
    let same = ok(dir.path(), &["metric", "chamfer", s(&styles[0]), s(&styles[0])]);
    assert_eq!(same.trim().parse::<f64>().unwrap(), 0.0);
    let csv = dir.path().join("e.csv");
    let text = ok(
        dir.path(),
        &["--seed", "2", "metric", "eval", "--stylized", "out", "--styles", "sty", "--fraction", "0.5", "--csv", s(&csv)],
    );
    assert!(text.starts_with("all,"));
    let csv = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 1);
    assert!(csv.starts_with("group,output,style,chamfer\n"));
}

#[test]
fn two_stage_stylize_runs() {
    let dir = tempfile::tempdir().unwrap();
    let hi = prepare(dir.path(), "hi", 5, 2, 32, 4, &[]);
    let lo = prepare(dir.path(), "lo", 5, 2, 16, 4, &[]);
    write_content(dir.path(), "c.ppm", 2, 32);
    std::fs::write(dir.path().join("cfg.json"), r#"{"steps": 4, "structure_fraction": 0.5}"#).unwrap();
    ok(
        dir.path(),
        &[
            "stylize", "--content", "c.ppm", "--bank", &hi.bank, "--stats", &hi.stats, "--phi", &hi.phi, "--bank-lo",
            &lo.bank, "--stats-lo", &lo.stats, "--config", "cfg.json", "--out", "o.ppm",
        ],
    );
    let img = stylebank_core::image::read_ppm(&dir.path().join("o.ppm")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}

#[test]
fn end_to_end_golden_digest() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare(dir.path(), "g", 0, 3, 16, 4, &["--seed", "1"]);
    write_content(dir.path(), "c.ppm", 0, 16);
    std::fs::write(dir.path().join("cfg.json"), r#"{"steps": 4, "seed": 5}"#).unwrap();
    let args = [
        "stylize", "--content", "c.ppm", "--bank", &p.bank, "--stats", &p.stats, "--phi", &p.phi, "--config",
        "cfg.json", "--out", "o.ppm",
    ];
    let a = ok_manifest(dir.path(), "a", &args);
    let b = ok_manifest(dir.path(), "b", &args);
    assert_eq!(a.outputs, b.outputs);
    assert_eq!(a.outputs[0].fnv1a, GOLDEN_STYLIZE_DIGEST);
}
