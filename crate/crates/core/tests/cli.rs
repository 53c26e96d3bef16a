use std::path::Path;

use flux_upscale::cli::{run_cli, EXIT_DATA, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use flux_upscale::eval::{read_site_metrics, REPORT_FILES};
use flux_upscale::infer::{read_predictions, write_predictions};

const SMALL: &str = r#"
[model]
hidden = 5
encoder_hidden = 3
embedding_dim = 2
generator_hidden = [4]

[train]
pretrain_epochs = 1
joint_epochs = 1
baseline_epochs = 1
ensemble_size = 2
"#;

fn cli(out: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["flux-upscale", "--out", out.to_str().unwrap()];
    argv.extend_from_slice(args);
    run_cli(argv)
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(cli(out, &["synth", "--sites", "12", "--days", "400", "--seed", "7"]), EXIT_OK);
    }
    for f in ["sites.csv", "site_params.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let other = dir.path().join("c");
    assert_eq!(cli(&other, &["synth", "--sites", "12", "--days", "400", "--seed", "8"]), EXIT_OK);
    assert_ne!(std::fs::read(a.join("sites.csv")).unwrap(), std::fs::read(other.join("sites.csv")).unwrap());
}

#[test]
fn full_pipeline_emits_every_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("out");
    assert_eq!(cli(&out, &["--config", &config, "synth", "--sites", "8", "--days", "400"]), EXIT_OK);
    for step in ["pretrain", "train", "infer", "eval", "report"] {
        assert_eq!(cli(&out, &["--config", &config, step]), EXIT_OK, "{step}");
    }
    for seed in [0, 1] {
        for f in ["pretrained.ckpt", "ctlstm.ckpt", "tamrl.ckpt", "pretrain_log.tsv", "joint_log.tsv"] {
            assert!(out.join(format!("members/seed_{seed}/{f}")).exists(), "seed {seed} {f}");
        }
    }
    for kind in ["tamrl", "tamlstm", "ctlstm"] {
        assert!(out.join(format!("predictions_{kind}.csv")).exists());
    }
    for f in REPORT_FILES {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn partial_state_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("out");
    assert_eq!(cli(&out, &["--config", &config, "pretrain"]), EXIT_USAGE);
    assert_eq!(cli(&out, &["--config", &config, "synth", "--sites", "6", "--days", "400"]), EXIT_OK);
    assert_eq!(cli(&out, &["--config", &config, "train"]), EXIT_RUNTIME);
    assert_eq!(cli(&out, &["--config", &config, "infer"]), EXIT_RUNTIME);
    assert_eq!(cli(&out, &["--config", &config, "eval"]), EXIT_USAGE);
    assert_eq!(cli(&out, &["--config", &config, "report"]), EXIT_USAGE);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(cli(&out, &["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&out, &["--nope", "synth"]), EXIT_USAGE);
    assert_eq!(cli(&out, &["synth", "--sites", "0"]), EXIT_DATA);

    let bad_config = dir.path().join("bad.toml");
    std::fs::write(&bad_config, "[train]\nensemble_size = 0\n").unwrap();
    assert_eq!(cli(&out, &["--config", bad_config.to_str().unwrap(), "synth"]), EXIT_USAGE);

    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("sites.csv"), "site_id,date,driver_1,gpp,nee,qc,igbp,koppen\nA,2001-01-01,1.0,2.0,-1.0,1.5,ENF,Dfb\n").unwrap();
    assert_eq!(cli(&out, &["pretrain"]), EXIT_DATA);
}

#[test]
fn eval_on_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let out = dir.path().join("out");
    assert_eq!(cli(&out, &["--config", &config, "synth", "--sites", "8", "--days", "400"]), EXIT_OK);
    for step in ["pretrain", "train", "infer"] {
        assert_eq!(cli(&out, &["--config", &config, step]), EXIT_OK);
    }
    for kind in ["tamrl", "tamlstm", "ctlstm"] {
        let path = out.join(format!("predictions_{kind}.csv"));
        let mut rows = read_predictions(std::fs::File::open(&path).unwrap()).unwrap();
        for r in &mut rows {
            if let Some(t) = r.truth {
                r.pred = t;
            }
        }
        write_predictions(&rows, std::fs::File::create(&path).unwrap()).unwrap();
    }
    assert_eq!(cli(&out, &["--config", &config, "eval"]), EXIT_OK);
    let metrics = read_site_metrics(std::fs::File::open(out.join(REPORT_FILES[0])).unwrap()).unwrap();
    assert!(!metrics.is_empty());
    for m in metrics {
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.r2, Some(1.0));
    }
}
