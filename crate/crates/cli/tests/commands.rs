use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set=batch_size=8",
    "--set=steps_per_iteration=200",
    "--set=gen_filters=8",
    "--set=latent_dim=8",
    "--set=enc_channels=4",
    "--set=enc_layers=1",
    "--set=encoding_dim=8",
    "--set=generator_updates=1",
    "--set=diversity_updates=2",
    "--workers=2",
    "--frames=100000",
    "--max-iterations=1",
];

fn gpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("GPN_OUT")
        .output()
        .unwrap()
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn train_tiny(out: &Path) {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = gpn(&args);
    assert!(o.status.success(), "{:?}", text(&o));
}

#[test]
fn unknown_config_key_fails_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 3\nbogus_rate = 0.1\n").unwrap();
    let o = gpn(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let (_, err) = text(&o);
    assert!(err.contains("bogus_rate") && err.contains("line 2"), "{err}");
}

#[test]
fn render_prints_level_and_names_bad_glyphs() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("corridor.lvl");
    std::fs::write(&good, "A+g\n").unwrap();
    let o = gpn(&["render", good.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(text(&o).0, "A+g\n");

    let bad = dir.path().join("bad.lvl");
    std::fs::write(&bad, "A.g\n.?.\n").unwrap();
    let o = gpn(&["render", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    let (_, err) = text(&o);
    assert!(err.contains("row 1") && err.contains("column 1") && err.contains('?'), "{err}");
}

#[test]
fn train_sample_render_eval_plot() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    train_tiny(&run);
    let ck = run.join("checkpoint.gpnf");
    assert!(ck.exists());
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 2);

    let none = dir.path().join("none");
    let o = gpn(&["sample", "--checkpoint", ck.to_str().unwrap(), "--count", "0", "--out", none.to_str().unwrap()]);
    assert!(o.status.success(), "{:?}", text(&o));
    assert!(text(&o).0.starts_with("0 levels"));
    assert_eq!(std::fs::read_to_string(none.join("manifest.csv")).unwrap(), "file,valid,estimated_u\n");

    let nine = dir.path().join("nine");
    let o = gpn(&["sample", "--checkpoint", ck.to_str().unwrap(), "--out", nine.to_str().unwrap()]);
    assert!(o.status.success(), "{:?}", text(&o));
    assert!(text(&o).0.starts_with("9 levels: "));
    let manifest = std::fs::read_to_string(nine.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 10);

    let montage = dir.path().join("montage.txt");
    let o = gpn(&["render", nine.to_str().unwrap(), "--montage", montage.to_str().unwrap()]);
    assert!(o.status.success(), "{:?}", text(&o));
    let m = std::fs::read_to_string(&montage).unwrap();
    let blocks: Vec<&str> = m.split("\n\n").collect();
    assert_eq!(blocks.len(), 3);
    for b in blocks {
        let lines: Vec<&str> = b.lines().collect();
        assert_eq!(lines.len(), 12);
        assert!(lines.iter().all(|l| l.split(' ').count() == 3));
    }

    let floor = dir.path().join("floor.lvl");
    let all_floor: String = (0..12).map(|_| format!("{}\n", ".".repeat(16))).collect();
    std::fs::write(&floor, all_floor).unwrap();
    let o = gpn(&["eval", "--checkpoint", ck.to_str().unwrap(), "--levels", floor.to_str().unwrap(), "--episodes", "3"]);
    assert!(o.status.success(), "{:?}", text(&o));
    let (csv, _) = text(&o);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..6], ["floor.lvl", "false", "3", "0", "-1", "1"]);

    let charts = dir.path().join("charts");
    let o = gpn(&["plot", run.join("metrics.csv").to_str().unwrap(), "--out", charts.to_str().unwrap()]);
    assert!(o.status.success(), "{:?}", text(&o));
    for f in ["rewards.svg", "failure.svg", "losses.svg", "diversity.svg"] {
        assert!(std::fs::read_to_string(charts.join(f)).unwrap().starts_with("<svg"));
    }
}

#[test]
fn output_directory_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from_env");
    let flag_out = dir.path().join("from_flag");
    let mut args = vec!["train", "--out", flag_out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_gpn"))
        .args(&args)
        .env("RUST_LOG", "warn")
        .env("GPN_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{:?}", text(&o));
    assert!(env_out.join("checkpoint.gpnf").exists());
    assert!(!flag_out.exists());
}
