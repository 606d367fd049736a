use std::path::Path;
use std::process::{Command, Output};

fn hear(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hear"))
        .args(args)
        .current_dir(dir)
        .env_remove("HEAR_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small, fast settings shared by the pipeline tests.
const SMALL: &[&str] = &[
    "--set", "gen_samples=10",
    "--set", "gen_duration=4",
    "--set", "hidden_dim=8",
    "--set", "num_layers=1",
    "--set", "num_heads=2",
    "--set", "codebook_size=16",
    "--set", "bias_hidden=8",
    "--set", "amplitude_scale=1",
    "--set", "batch_size=4",
    "--set", "epochs=1",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

#[test]
fn help_lists_every_key() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["pretrain", "--help"]] {
        let o = hear(dir.path(), args);
        assert_eq!(o.status.code(), Some(0));
        let text = stdout(&o);
        for key in ["data_dir", "mask_ratio", "prefetch_depth", "codebook_size", "seeds", "topomap_out"] {
            assert!(text.contains(&format!("  {key} = ")), "{key} missing from {args:?}");
        }
    }
}

#[test]
fn dictionary_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let o = hear(dir.path(), &["dict", "--lookup", "EEG FP1-REF"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "Fp1 EEG -0.0806 -0.0291 -0.0413");
    let o = hear(dir.path(), &["dict", "--lookup", "QQQ"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not found"));
}

#[test]
fn duplicate_row_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "# x\nC3, 10-20, EEG, -0.05, 0, 0.05\nc3, 10-20, EEG, -0.05, 0, 0.05\n").unwrap();
    let o = hear(dir.path(), &["dict", "--validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hear(dir.path(), &["gen", "--set", "nonsense=1"]).status.code(), Some(2));
    assert_eq!(hear(dir.path(), &["gen", "--set", "gen_samples=many"]).status.code(), Some(2));
    std::fs::write(dir.path().join("run.cfg"), "steps = 3\nwhat = 1\n").unwrap();
    let o = hear(dir.path(), &["pretrain", "--config", "run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run.cfg:2"));
    assert_eq!(hear(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hear(dir.path(), &["pretrain", "--data-dir", "nowhere", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_on_fresh_weights() {
    let dir = tempfile::tempdir().unwrap();
    let o = hear(dir.path(), &["gradcheck", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let last = stdout(&o).lines().last().unwrap().to_string();
    let err: f64 = last.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{last}");
}

#[test]
fn zero_step_pretraining_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert!(hear(dir.path(), &with_small(&["gen"])).status.success());
    let o = hear(dir.path(), &with_small(&["pretrain", "--steps", "0"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("checkpoint.hear").exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("pretrain.log")).unwrap(), "");
}

#[test]
fn data_dir_comes_from_the_environment_unless_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str], env: &str| {
        Command::new(env!("CARGO_BIN_EXE_hear"))
            .args(with_small(args))
            .current_dir(dir.path())
            .env("HEAR_DATA_DIR", env)
            .output()
            .unwrap()
    };
    assert!(run(&["gen"], "from_env").status.success());
    assert!(dir.path().join("from_env/manifest").exists());
    assert!(run(&["gen", "--data-dir", "from_flag"], "from_env").status.success());
    assert!(dir.path().join("from_flag/manifest").exists());
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(hear(d, &with_small(&["gen"])).status.success());
    let o = hear(d, &with_small(&["pretrain", "--steps", "3"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("pretrain.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert_eq!(log.lines().next().unwrap().split(", ").count(), 6);
    let o = hear(d, &with_small(&["pretrain", "--steps", "3", "--set", "log=again.log"]));
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(d.join("again.log")).unwrap(), log);

    let o = hear(d, &with_small(&["finetune"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(d.join("finetuned.hear").exists());
    assert_eq!(std::fs::read_to_string(d.join("finetune.log")).unwrap().lines().count(), 1);

    let o = hear(d, &with_small(&["eval"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(d.join("results.txt")).unwrap();
    assert_eq!(table, stdout(&o));
    let row = table.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(", ").collect();
    assert_eq!(fields[..2], ["dataset", "balanced_accuracy"]);
    assert_eq!(fields[4].split(';').count(), 3);

    let o = hear(d, &with_small(&["topomap", "--set", "topomap_samples=2"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("topomap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let raw: f64 = csv.lines().skip(1).map(|l| l.split(',').nth(6).unwrap().parse::<f64>().unwrap()).sum();
    assert!((raw - 1.0).abs() < 1e-6);
    assert!(std::fs::read_to_string(d.join("topomap.svg")).unwrap().starts_with("<svg"));
}
