mod common;

use adagp_cli::{parse_config_str, CliError, ExperimentConfig};
use common::{adagp, adagp_ok, json, run_all_subcommands, snapshot, SMALL_TRAIN};

#[test]
fn empty_config_takes_the_defaults() {
    let cfg = parse_config_str("").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    let s = cfg.train.schedule;
    assert_eq!((s.warmup_epochs, s.m_initial, s.k, s.growth), (3, 1, 4, 1));
    assert_eq!(cfg.timeline.alpha, 0.02);
    assert_eq!(cfg.mix.gp_fraction, 0.5);
}

#[test]
fn partial_section_keeps_other_defaults() {
    let cfg = parse_config_str("[train.schedule]\nk = 6\n").unwrap();
    assert_eq!(cfg.train.schedule.k, 6);
    assert_eq!(cfg.train.schedule.warmup_epochs, 3);
    assert_eq!(cfg.train.epochs, 20);
}

#[test]
fn k_below_m_initial_names_the_key_and_line() {
    let text = "[train]\nepochs = 2\n\n[train.schedule]\nm_initial = 5\nk = 4\n";
    match parse_config_str(text).unwrap_err() {
        CliError::Config { section, line, message, .. } => {
            assert_eq!(section, "train");
            assert!(message.contains("k"), "{message}");
            assert!(line == Some(5) || line == Some(6), "{line:?}: {message}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn invalid_values_are_rejected_per_section() {
    for (text, section) in [
        ("[timeline]\nalpha = -0.5\n", "timeline"),
        ("[pipeline]\ndevices = 0\n", "pipeline"),
        ("[pipeline]\nstrategy = \"chimera\"\nmicro_batches = 3\n", "pipeline"),
        ("[mix]\ngp_fraction = 1.5\n", "mix"),
        ("[train]\nmodel = \"resnet\"\n", "train"),
    ] {
        match parse_config_str(text) {
            Err(CliError::Config { section: s, line, .. }) => {
                assert_eq!(s, section, "{text}");
                assert!(line.is_some(), "{text}");
            }
            other => panic!("{text}: expected a config error, got {other:?}"),
        }
    }
}

#[test]
fn unknown_keys_and_wrong_types_are_parse_errors() {
    let unknown = parse_config_str("[timeline]\nlayres = 4\n").unwrap_err().to_string();
    assert!(unknown.contains("layres") && unknown.contains("line 2"), "{unknown}");
    let nested = parse_config_str("[train.model_optimizer]\nlearning_rate = 0.1\nkind = \"sgd_momentum\"\nmomentom = 0.9\n")
        .unwrap_err()
        .to_string();
    assert!(nested.contains("momentom"), "{nested}");
    let top = parse_config_str("[trian]\nepochs = 2\n").unwrap_err().to_string();
    assert!(top.contains("trian"), "{top}");
    let typed = parse_config_str("[train]\nepochs = \"many\"\n").unwrap_err().to_string();
    assert!(typed.contains("line 2"), "{typed}");
}

#[test]
fn serialize_parse_is_a_fixpoint() {
    let mut cfg = parse_config_str(SMALL_TRAIN).unwrap();
    cfg.pipeline.predictor_alpha = Some(0.25);
    cfg.energy.buffer_capacity = Some(4096);
    let text = cfg.to_toml().unwrap();
    let again = parse_config_str(&text).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.to_toml().unwrap(), text);
}

#[test]
fn show_config_output_parses_back() {
    let text = adagp_ok(&["show-config"]);
    assert_eq!(parse_config_str(&text).unwrap(), ExperimentConfig::default());
}

fn steps(args: &[&str]) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let mut full = vec!["-o", dir.path().to_str().unwrap(), "timeline"];
    full.extend(args);
    adagp_ok(&full);
    json(&dir.path().join("timeline.json"))["steps"].as_f64().unwrap()
}

#[test]
fn timeline_fixtures_through_the_binary() {
    for alpha in [0.0, 0.05, 0.25] {
        let a = alpha.to_string();
        let at = |phase| steps(&["-N", "4", "--alpha", &a, "--phase", phase]);
        assert!((at("baseline") - 12.0).abs() <= 1e-12);
        assert!((at("bp") - (12.0 + 12.0 * alpha)).abs() <= 1e-12);
        assert!((at("gp") - (4.0 + 4.0 * alpha)).abs() <= 1e-12);
        assert!((at("two_batch") - (16.0 + 16.0 * alpha)).abs() <= 1e-12);
    }
}

fn makespan(strategy: &str, mode: &str) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let stdout = adagp_ok(&["-o", o, "pipeline", "--strategy", strategy, "--mode", mode, "-D", "4", "-M", "4"]);
    let csv = std::fs::read_to_string(dir.path().join(format!("pipeline/{strategy}-{mode}-d4-m4.csv"))).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let span: f64 = row[header.iter().position(|h| *h == "makespan").unwrap()].parse().unwrap();
    assert!(stdout.contains(&format!("makespan {span}")));
    let svg = std::fs::read_to_string(dir.path().join(format!("pipeline/{strategy}-{mode}-d4-m4.svg"))).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    span
}

#[test]
fn pipeline_fixtures_through_the_binary() {
    assert_eq!(makespan("gpipe", "baseline"), 21.0);
    assert_eq!(makespan("dapple", "baseline"), 21.0);
    assert_eq!(makespan("chimera", "baseline"), 16.0);
    assert_eq!(makespan("gpipe", "transition"), 25.0);
    assert_eq!(makespan("chimera", "transition"), 20.0);
}

#[test]
fn errors_exit_non_zero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train.schedule]\nm_initial = 5\nk = 4\n").unwrap();
    for args in [
        vec!["-o", o, "pipeline", "-D", "0"],
        vec!["-o", o, "pipeline", "--strategy", "chimera", "-M", "3"],
        vec!["-o", o, "pipeline", "--strategy", "zigzag"],
        vec!["-c", "/nonexistent/adagp.toml", "-o", o, "timeline"],
        vec!["-c", bad.to_str().unwrap(), "-o", o, "train"],
        vec!["-o", o, "energy", "--gp-fraction", "2"],
    ] {
        let out = adagp(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }
    let out = adagp(&["-c", bad.to_str().unwrap(), "-o", o, "train"]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("bad.toml") && err.contains("[train]") && err.contains("line 3"), "{err}");
    assert!(!dir.path().join("train").exists());
}

#[test]
fn output_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    let from_file = dir.path().join("from-file");
    std::fs::write(&cfg, format!("output_dir = {:?}\n", from_file.to_str().unwrap())).unwrap();
    let c = cfg.to_str().unwrap();
    let bin = env!("CARGO_BIN_EXE_adagp");

    adagp_ok(&["-c", c, "timeline"]);
    assert!(from_file.join("timeline.json").exists());

    let from_env = dir.path().join("from-env");
    let status = std::process::Command::new(bin).args(["-c", c, "timeline"]).env("ADAGP_OUT", &from_env).output().unwrap().status;
    assert!(status.success());
    assert!(from_env.join("timeline.json").exists());

    let from_flag = dir.path().join("from-flag");
    let status = std::process::Command::new(bin)
        .args(["-c", c, "-o", from_flag.to_str().unwrap(), "timeline"])
        .env("ADAGP_OUT", &from_env)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert!(from_flag.join("timeline.json").exists());
}

#[test]
fn train_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let (c, o) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());
    adagp_ok(&["-c", c, "-o", o, "train"]);
    adagp_ok(&["-c", c, "-o", o, "train", "--baseline"]);

    let csv = |run: &str| std::fs::read_to_string(dir.path().join(format!("train/{run}/metrics.csv"))).unwrap();
    let (a, b) = (csv("adagp"), csv("baseline"));
    let header: Vec<&str> = a.lines().next().unwrap().split(',').collect();
    assert_eq!(a.lines().count(), 5);
    let first = |s: &str| s.lines().nth(1).unwrap().split(',').map(String::from).collect::<Vec<_>>();
    let (ra, rb) = (first(&a), first(&b));
    // epoch 0 is warm-up for ADA-GP: same updates as plain backprop
    for col in ["epoch", "learning_rate", "train_loss", "eval_accuracy", "backward_calls"] {
        let i = header.iter().position(|h| *h == col).unwrap();
        assert_eq!(ra[i], rb[i], "{col}");
    }

    let sa = json(&dir.path().join("train/adagp/summary.json"));
    let sb = json(&dir.path().join("train/baseline/summary.json"));
    let counts = &sa["phase_counts"];
    let backprop = counts["warmup"].as_u64().unwrap() + counts["bp"].as_u64().unwrap();
    assert_eq!(sa["backward_calls"].as_u64().unwrap(), backprop);
    assert!(counts["gp"].as_u64().unwrap() > 0);
    assert_eq!(sa["predictor_stores"], 1);
    assert_eq!(sb["predictor_stores"], 0);
    assert_eq!(sb["backward_calls"], sb["phase_counts"]["bp"]);
    assert!(dir.path().join("train/adagp/checkpoint.json").exists());
}

#[test]
fn every_subcommand_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all_subcommands(&cfg, &a);
    run_all_subcommands(&cfg, &b);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(sa.len() >= 25, "{:?}", sa.keys().collect::<Vec<_>>());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (path, bytes) in &sa {
        assert!(bytes == &sb[path], "{} differs between runs", path.display());
    }
}

#[test]
fn report_merges_every_section() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let stdout = adagp_ok(&["-o", o, "report"]);
    for section in ["[timeline]", "[pipeline]", "[energy]"] {
        assert!(stdout.contains(section), "{stdout}");
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "format_version,section,metric,value");
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 4), "{csv}");
    assert!(csv.contains("gpipe baseline makespan (D=4 M=4),21"));
    assert!(csv.contains("chimera transition makespan (D=4 M=4),20"));
}

#[test]
fn reference_config_documents_the_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config-reference.toml");
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(parse_config_str(&text).unwrap(), ExperimentConfig::default());
    // the commented-out alternatives parse too
    let uncommented: String = text.lines().map(|l| l.strip_prefix("# ").filter(|r| r.contains(" = ")).unwrap_or(l)).collect::<Vec<_>>().join("\n");
    let blobs = uncommented.split("[train.dataset]").nth(2).unwrap().split("\n\n").next().unwrap();
    let cfg = parse_config_str(&format!("[train.dataset]{blobs}")).unwrap();
    assert_eq!(cfg.train.dataset.name(), "blobs");
}
