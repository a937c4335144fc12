use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glr_core::harness::{piecewise_smooth, save_image};

fn glr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glr"))
        .args(args)
        .output()
        .expect("spawn glr")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn clean_image(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let path = dir.join(name);
    save_image(&piecewise_smooth(32, 32, seed), &path).unwrap();
    path
}

#[test]
fn corrupt_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_image(dir.path(), "a.png", 1);
    let (b1, b2, b3) = (
        dir.path().join("b1.png"),
        dir.path().join("b2.png"),
        dir.path().join("b3.png"),
    );
    for (out, seed) in [(&b1, "7"), (&b2, "7"), (&b3, "8")] {
        let o = glr(&[
            "corrupt",
            "--in",
            s(&clean),
            "--out",
            s(out),
            "--sigma",
            "25",
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(&b1), read(&b2));
    assert_ne!(read(&b1), read(&b3));
}

#[test]
fn classic_denoise_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_image(dir.path(), "a.pgm", 2);
    let noisy = dir.path().join("b.pgm");
    let out = dir.path().join("c.pgm");
    assert!(glr(&[
        "corrupt",
        "--in",
        s(&clean),
        "--out",
        s(&noisy),
        "--sigma",
        "25"
    ])
    .status
    .success());
    let o = glr(&[
        "denoise",
        "--classic",
        "--mu",
        "8",
        "--epsilon2x",
        "0.1",
        "--in",
        s(&noisy),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let eval = |test: &Path| {
        let o = glr(&["eval", "--ref", s(&clean), "--test", s(test)]);
        assert!(o.status.success());
        let text = String::from_utf8(o.stdout).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2, "{text}");
        assert!(lines[0].starts_with("PSNR: ") && lines[0].ends_with(" dB"));
        assert!(lines[1].starts_with("SSIM: "));
        let psnr: f64 = lines[0][6..lines[0].len() - 3].parse().unwrap();
        assert_eq!(lines[0].split('.').nth(1).unwrap().len(), 4 + 3);
        (psnr, text)
    };
    let (before, _) = eval(&noisy);
    let (after, first) = eval(&out);
    assert!(after > before, "{before} -> {after}");
    assert_eq!(eval(&out).1, first);
}

#[test]
fn train_then_denoise_with_model() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..2 {
        clean_image(dir.path(), &format!("t{i}.png"), 10 + i);
    }
    std::fs::write(dir.path().join("train.txt"), "t0.png\nt1.png\n").unwrap();
    std::fs::write(
        dir.path().join("cfg.txt"),
        "epochs = 2\ncascades = 1\nbatch_size = 2\nf_widths = 2,3,4\nprefilter_width = 2\nmu_widths = 2,2\nmu_hidden = 3\nlr_schedule = 1e-3\nlr_epochs =\n",
    )
    .unwrap();
    let (model, log) = (dir.path().join("m.glr"), dir.path().join("log.txt"));
    let o = glr(&[
        "train",
        "--data",
        s(&dir.path().join("train.txt")),
        "--config",
        s(&dir.path().join("cfg.txt")),
        "--out-model",
        s(&model),
        "--log",
        s(&log),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (n, line) in lines.iter().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!((f[0], f[2], f[4]), ("epoch", "loss", "lr"), "{line}");
        assert_eq!(f[1], (n + 1).to_string());
        assert!(f[3].parse::<f64>().unwrap() > 0.0);
        assert_eq!(f[5].parse::<f64>().unwrap(), 1e-3);
    }

    let noisy = dir.path().join("n.png");
    let out = dir.path().join("o.png");
    assert!(glr(&[
        "corrupt",
        "--in",
        s(&dir.path().join("t0.png")),
        "--out",
        s(&noisy),
        "--sigma",
        "25"
    ])
    .status
    .success());
    let o = glr(&[
        "denoise",
        "--model",
        s(&model),
        "--cascades",
        "2",
        "--in",
        s(&noisy),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.exists());
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        vec![
            "corrupt", "--in", "a.png", "--out", "b.png", "--sigma", "25", "--bogus",
        ],
        vec!["denoise", "--classic", "--in", "a.png", "--out", "b.png"],
        vec![
            "denoise", "--model", "m", "--mu", "3", "--in", "a.png", "--out", "b.png",
        ],
        vec!["denoise", "--in", "a.png", "--out", "b.png"],
        vec!["frobnicate"],
        vec![],
    ] {
        let o = glr(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn operational_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.png");
    let o = glr(&["eval", "--ref", s(&missing), "--test", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("none.png"));

    let bad = dir.path().join("bad.png");
    std::fs::write(&bad, b"not an image").unwrap();
    let o = glr(&[
        "corrupt",
        "--in",
        s(&bad),
        "--out",
        s(&missing),
        "--sigma",
        "25",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let o = glr(&["gradcheck", "--seed", "0"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(o.status.success(), "{text}");
    assert!(text.lines().last().unwrap().contains("overall PASS"));
}
