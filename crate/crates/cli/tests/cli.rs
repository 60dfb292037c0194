use std::fs;
use std::path::Path;
use std::process::Command;

use mdpo_cli::*;
use mdpo_core::metrics::read_metrics_csv;
use mdpo_core::trainer::Algorithm;

fn flags(root: &Path) -> Flags {
    Flags {
        algorithm: Some("mdpo".into()),
        env: Some("stochastic-game".into()),
        rounds: Some(3),
        steps_per_round: Some(80),
        out: Some(root.to_path_buf()),
        ..Default::default()
    }
}

fn quick_config(root: &Path, extra: &str) -> std::path::PathBuf {
    let path = root.join("quick.toml");
    fs::write(&path, format!("model_steps = 5\npredictor_steps = 5\nepochs = 1\nl = 3\n{extra}")).unwrap();
    path
}

#[test]
fn missing_algorithm_is_named() {
    let f = Flags { algorithm: None, ..flags(Path::new("/tmp")) };
    let err = parse_config(CommandTag::Train, &f).unwrap_err();
    assert!(err.to_string().contains("algorithm"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn flags_override_file_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("c.toml");
    fs::write(&cfg_path, "algorithm = \"ippo\"\nenv = \"coopnav\"\nrounds = 500\n").unwrap();
    let f = Flags { config: Some(cfg_path.clone()), rounds: Some(5), ..Default::default() };
    let cfg = parse_config(CommandTag::Train, &f).unwrap();
    assert_eq!(cfg.run.rounds, 5);
    assert_eq!(cfg.run.algorithm, Algorithm::Ippo);
    assert_eq!(cfg.run.steps_per_round, 1280);
    let f = Flags { config: Some(cfg_path), algorithm: Some("mdpo".into()), no_prediction: true, ..Default::default() };
    assert_eq!(parse_config(CommandTag::Train, &f).unwrap().run.algorithm, Algorithm::MdpoNopred);
}

#[test]
fn unknown_keys_and_bad_values_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("c.toml");
    fs::write(&p, "algorithm = \"mdpo\"\nenv = \"polygon\"\nlearning_rate = 3\n").unwrap();
    let err = parse_config(CommandTag::Train, &Flags { config: Some(p.clone()), ..Default::default() }).unwrap_err();
    assert!(err.to_string().contains("learning_rate"), "{err}");
    fs::write(&p, "algorithm = \"mdpo\"\nenv = \"polygon\"\nsteps_per_round = 50\n").unwrap();
    let err = parse_config(CommandTag::Train, &Flags { config: Some(p.clone()), ..Default::default() }).unwrap_err();
    assert!(err.to_string().contains("steps_per_round"), "{err}");
    fs::write(&p, "algorithm = \"sac\"\nenv = \"polygon\"\n").unwrap();
    assert_eq!(
        parse_config(CommandTag::Train, &Flags { config: Some(p), ..Default::default() }).unwrap_err().exit_code(),
        1
    );
    let json = tmp.path().join("c.json");
    fs::write(&json, r#"{"algorithm": "mdpo-nopred", "env": "nonstationary", "seed": 4}"#).unwrap();
    let cfg = parse_config(CommandTag::Train, &Flags { config: Some(json), ..Default::default() }).unwrap();
    assert_eq!((cfg.run.algorithm, cfg.run.seed), (Algorithm::MdpoNopred, 4));
}

#[test]
fn echoed_config_reparses_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let f =
        Flags { config: Some(quick_config(tmp.path(), "c_obs = 2.5\n")), seeds: Some(vec![1, 2]), ..flags(tmp.path()) };
    let cfg = parse_config(CommandTag::Batch, &f).unwrap();
    let text = toml::to_string(&echo(&cfg)).unwrap();
    let back: FileConfig = toml::from_str(&text).unwrap();
    assert_eq!(reparse(CommandTag::Batch, &back).unwrap(), cfg);
}

#[test]
fn train_writes_rows_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let f = Flags { config: Some(quick_config(tmp.path(), "")), rounds: Some(5), ..flags(tmp.path()) };
    let cfg = parse_config(CommandTag::Train, &f).unwrap();
    let dir = cmd_train(&cfg).unwrap();
    let (header, rows) = read_metrics_csv(&dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(&header[..5], ["round", "mean_return", "visitation_l1", "xent", "reward_l1"]);
    for f in ["config.toml", "run.json", "env.json", "stages.log", "checkpoints/agent0_model.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let first = fs::read(dir.join("metrics.csv")).unwrap();
    cmd_train(&cfg).unwrap();
    assert_eq!(first, fs::read(dir.join("metrics.csv")).unwrap());
}

#[test]
fn ippo_leaves_model_columns_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let f = Flags { config: Some(quick_config(tmp.path(), "")), algorithm: Some("ippo".into()), ..flags(tmp.path()) };
    let dir = cmd_train(&parse_config(CommandTag::Train, &f).unwrap()).unwrap();
    let (header, rows) = read_metrics_csv(&dir.join("metrics.csv")).unwrap();
    for (i, h) in header.iter().enumerate() {
        if h.ends_with("model_loss") || h.ends_with("predictor_loss") || h == "xent" || h == "reward_l1" {
            assert!(rows.iter().all(|r| r[i].is_none()), "{h}");
        }
    }
}

#[test]
fn batch_writes_one_directory_per_seed_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let f = Flags {
        config: Some(quick_config(tmp.path(), "")),
        seeds: Some(vec![0, 1, 2]),
        jobs: Some(2),
        ..flags(tmp.path())
    };
    let cfg = parse_config(CommandTag::Batch, &f).unwrap();
    let rep = cmd_batch(&cfg).unwrap();
    assert_eq!(rep.runs.len(), 3);
    let files: Vec<_> = rep.runs.iter().map(|(_, r)| r.as_ref().unwrap().join("metrics.csv")).collect();
    let (_, s) = read_metrics_csv(rep.summary.as_ref().unwrap()).unwrap();
    let per: Vec<_> = files.iter().map(|p| read_metrics_csv(p).unwrap().1).collect();
    for (r, row) in s.iter().enumerate() {
        let hand = per.iter().map(|t| t[r][1].unwrap()).sum::<f64>() / 3.0;
        assert!((row[1].unwrap() - hand).abs() < 1e-12);
    }
    // identical runs: mean equals the run, std is zero
    let same = tmp.path().join("same.csv");
    summarize(&[files[0].clone(), files[0].clone()], &same).unwrap();
    let (_, s) = read_metrics_csv(&same).unwrap();
    for (r, row) in s.iter().enumerate() {
        assert_eq!(row[1], per[0][r][1]);
        assert_eq!(row[2], Some(0.0));
    }
}

#[test]
fn verify_matrices_are_stochastic_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let f = Flags { seeds: Some(vec![5]), out: Some(tmp.path().to_path_buf()), ..Default::default() };
    let cfg = parse_config(CommandTag::Verify, &f).unwrap();
    cmd_verify(&cfg).unwrap();
    let path = tmp.path().join("verify-seed5/z_given_a.csv");
    let first = fs::read_to_string(&path).unwrap();
    for line in first.lines().skip(1) {
        let s: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    cmd_verify(&cfg).unwrap();
    assert_eq!(first, fs::read_to_string(&path).unwrap());
}

#[test]
fn correspond_writes_per_agent_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let f = Flags { config: Some(quick_config(tmp.path(), "")), rounds: Some(2), ..flags(tmp.path()) };
    let cfg = parse_config(CommandTag::Correspond, &f).unwrap();
    let mats = cmd_correspond(&cfg).unwrap();
    assert_eq!(mats.len(), 3);
    assert_eq!(mats[0].z_given_a.len(), 25);
    assert!(cfg.run.out_dir.join("correspondence/agent2_a_given_z.csv").exists());
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_mdpo");
    let out = Command::new(bin).args(["train", "--env", "coopnav"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = Command::new(bin)
        .args(["train", "--algo", "ippo", "--env", "stochastic-game", "--rounds", "0", "--out"])
        .arg(blocker.join("sub"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = Command::new(bin).args(["gen-env", "--env", "polygon", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(tmp.path().join("polygon-env0.json").exists());
    let help = Command::new(bin).args(["train", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--config", "--algo", "--env", "--seed", "--seeds", "--rounds", "--out", "--jobs", "--no-prediction"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn out_root_defaults_to_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_mdpo");
    let out =
        Command::new(bin).args(["gen-env", "--env", "stochastic-game"]).env(OUT_ROOT_VAR, tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(tmp.path().join("stochastic-game-env0.json").exists());
}
