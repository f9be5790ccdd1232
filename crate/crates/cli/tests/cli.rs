//! End-to-end subcommand tests driving the pipeline on tiny inputs.

use std::path::{Path, PathBuf};
use std::process::Command;

use memaudit_cli::commands;
use memaudit_cli::config::ExperimentConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_memaudit"))
}

fn write_corpora(dir: &Path) -> (PathBuf, PathBuf) {
    let pre = dir.join("pre.txt");
    let fine = dir.join("fine.txt");
    let gen = |path: &Path, docs: usize, seed: u64| {
        let out = bin()
            .args(["gen-corpus", "--docs", &docs.to_string(), "--seed", &seed.to_string(), "--out"])
            .arg(path)
            .output()
            .expect("gen-corpus");
        assert!(out.status.success());
    };
    gen(&pre, 60, 41);
    gen(&fine, 40, 42);
    (pre, fine)
}

fn tiny_config_text(pre: &Path, fine: &Path, out_dir: &Path) -> String {
    format!(
        "data.pretrain = {}\n\
         data.finetune = {}\n\
         data.val_fraction = 0.3\n\
         model.blocks = 2\n\
         model.d_model = 32\n\
         model.heads = 2\n\
         model.d_ff = 128\n\
         model.context = 32\n\
         train.lr = [1e-3, 1e-4]\n\
         train.strategies = [full, head]\n\
         train.epochs = 3\n\
         train.seq_len = 16\n\
         train.repeats = 2\n\
         train.pretrain_epochs = 2\n\
         train.keep_checkpoints = final\n\
         run.out_dir = {}\n\
         run.seed = 11\n",
        pre.display(),
        fine.display(),
        out_dir.display()
    )
}

#[test]
fn pipeline_row_accounting_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, fine) = write_corpora(dir.path());
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, tiny_config_text(&pre, &fine, &dir.path().join("out"))).unwrap();
    let cfg = ExperimentConfig::from_file(&cfg_path).unwrap();
    let summary = commands::cmd_run(&cfg, false).unwrap();
    assert!(summary.failures.is_empty());

    // Merged rows: strategies × lrs × epochs (repeat-averaged).
    let csv = std::fs::read_to_string(summary.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
    // Raw per-repeat rows preserved per cell.
    for cell in ["full/lr0_rep0", "full/lr1_rep1", "head/lr0_rep1"] {
        let cell_csv =
            std::fs::read_to_string(summary.out_dir.join("cells").join(cell).join("metrics.csv"))
                .unwrap();
        assert_eq!(cell_csv.lines().count(), 1 + 3, "{cell}");
    }
    // Echo of the fully-resolved config lists every effective value.
    let echo = std::fs::read_to_string(summary.out_dir.join("config.resolved.txt")).unwrap();
    assert!(echo.contains("train.epochs = 3"));
    assert!(echo.contains("attack.fpr_cap = 0.1"));
    assert!(echo.contains("model.d_ff = 128"));
    assert!(summary.out_dir.join("pareto.svg").exists());
    assert!(summary.out_dir.join("phases.txt").exists());
    assert!(summary.out_dir.join("vocab.tsv").exists());

    // `report` regenerates identical top-level files from the cells.
    let before = std::fs::read(summary.out_dir.join("metrics.csv")).unwrap();
    let out = bin().args(["report", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success());
    let after = std::fs::read(summary.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn attack_of_a_model_against_itself_has_zero_recall() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, fine) = write_corpora(dir.path());
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, tiny_config_text(&pre, &fine, &dir.path().join("out"))).unwrap();

    let out = bin().args(["pretrain", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "{out:?}");
    let reference = dir.path().join("out").join("reference.ckpt");
    assert!(reference.exists());

    let report_path = dir.path().join("null_attack.json");
    let out = bin()
        .args(["attack", "--config"])
        .arg(&cfg_path)
        .arg("--model")
        .arg(&reference)
        .arg("--reference")
        .arg(&reference)
        .arg("--out")
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("recall 0.0000"), "stdout: {stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["recall"].as_f64().unwrap(), 0.0);
    assert_eq!(report["realized_fpr"].as_f64().unwrap(), 0.0);
}

#[test]
fn analyze_hand_written_csv_extracts_expected_frontier() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "\
strategy,lr,epoch,train_ppl,val_ppl,mia_recall,exposure
full,0.001,1,9,10,30,
head,0.001,1,11,12,20,
head,0.001,2,11,12.5,35,
";
    let path = dir.path().join("metrics.csv");
    std::fs::write(&path, csv).unwrap();
    let out = bin()
        .args(["analyze", "--metrics"])
        .arg(&path)
        .arg("--out-dir")
        .arg(dir.path().join("analysis"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    let stdout = String::from_utf8(out.stdout).unwrap();
    // (10, 30) and (12, 20) are non-dominated; (12.5, 35) is dominated.
    assert!(stdout.contains("pareto frontier (2 points)"), "{stdout}");
    assert!(stdout.contains("val_ppl=10.0000"), "{stdout}");
    assert!(stdout.contains("val_ppl=12.0000"), "{stdout}");
    assert!(!stdout.contains("12.5000"), "{stdout}");
    assert!(dir.path().join("analysis").join("pareto.svg").exists());
}

#[test]
fn config_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, "train.epocs = 10\n").unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("train.epocs"), "{stderr}");
    assert!(stderr.contains(":1:"), "line number missing: {stderr}");
}

#[test]
fn out_root_env_var_prefixes_relative_output_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, fine) = write_corpora(dir.path());
    let cfg_path = dir.path().join("exp.cfg");
    // Relative out_dir plus MEMAUDIT_OUT_ROOT in the environment.
    let text = tiny_config_text(&pre, &fine, Path::new("nested/out"))
        .replace("train.epochs = 3", "train.epochs = 1")
        .replace("train.repeats = 2", "train.repeats = 1")
        .replace("train.lr = [1e-3, 1e-4]", "train.lr = [1e-3]")
        .replace("train.strategies = [full, head]", "train.strategies = [head]");
    std::fs::write(&cfg_path, text).unwrap();
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg_path)
        .env("MEMAUDIT_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    assert!(dir.path().join("nested/out/metrics.csv").exists());
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for p in [&a, &b] {
        let out = bin()
            .args(["gen-corpus", "--docs", "25", "--seed", "9", "--out"])
            .arg(p)
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn block_subset_untied_and_scratch_strategies_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, fine) = write_corpora(dir.path());
    let cfg_path = dir.path().join("exp.cfg");
    let text = tiny_config_text(&pre, &fine, &dir.path().join("out"))
        .replace("train.lr = [1e-3, 1e-4]", "train.lr = [1e-3]")
        .replace("train.epochs = 3", "train.epochs = 2")
        .replace("train.repeats = 2", "train.repeats = 1")
        .replace(
            "train.strategies = [full, head]",
            "train.strategies = [block(1), blocks(1-2), body, untied-full, from-scratch-full, adapters(4)]",
        );
    std::fs::write(&cfg_path, text).unwrap();
    let cfg = ExperimentConfig::from_file(&cfg_path).unwrap();
    let summary = commands::cmd_run(&cfg, false).unwrap();
    assert!(summary.failures.is_empty(), "{:?}", summary.failures);
    let csv = std::fs::read_to_string(summary.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
    for label in ["block(1)", "blocks(1-2)", "body", "untied-full", "from-scratch-full", "adapters(4)"] {
        assert!(
            summary
                .out_dir
                .join("cells")
                .join(label)
                .join("lr0_rep0")
                .join("COMPLETE")
                .exists(),
            "{label} cell missing"
        );
    }
}

#[test]
fn single_cell_finetune_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, fine) = write_corpora(dir.path());
    let cfg_path = dir.path().join("exp.cfg");
    std::fs::write(&cfg_path, tiny_config_text(&pre, &fine, &dir.path().join("out"))).unwrap();

    let out = bin()
        .args([
            "finetune",
            "--strategy",
            "head",
            "--lr",
            "1e-3",
            "--repeat",
            "1",
            "--config",
        ])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    let cell = dir.path().join("out/cells/head/lr0_rep1");
    assert!(cell.join("COMPLETE").exists());
    assert!(cell.join("metrics.csv").exists());

    // An lr outside the configured sweep is rejected.
    let out = bin()
        .args(["finetune", "--strategy", "head", "--lr", "0.5", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
}
