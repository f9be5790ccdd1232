//! Acceptance suite. One test per criterion; each prints a PASS line on
//! success (run with `--nocapture` to see them; a failed test is the FAIL
//! line). Tolerances are pinned in the assertions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use memaudit_cli::commands;
use memaudit_cli::config::ExperimentConfig;
use memaudit_core::analysis::{parse_metrics_csv, segment_phases, MetricPoint};
use memaudit_core::attacks::{
    calibrate_threshold, exposure_exact, exposure_from_scores, exposure_sampled, mia_recall,
};
use memaudit_core::autodiff::{grad_check, Tensor};
use memaudit_core::data::{build_vocab, email_corpus, windows, CanarySpec, Corpus, TokenizeMode};
use memaudit_core::model::{build_model, ModelConfig};

fn pass(n: u32, name: &str) {
    println!("ACCEPTANCE {n} ({name}): PASS");
}

// ─────────────────────── helpers ───────────────────────

/// Average ranks (ties share the mean of their positions).
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn median(xs: &mut Vec<f64>) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn tiny_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_blocks: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        context_length: 24,
        tied_embeddings: true,
        adapter_reduction: None,
    }
}

// ─────────────────────── criterion 1 ───────────────────────

#[test]
fn criterion_1_parameter_count_reproduction() {
    let t0 = Instant::now();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_memaudit"))
        .args(["count-params", "--gpt2-table"])
        .output()
        .expect("spawn count-params");
    let elapsed = t0.elapsed();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let value = |label: &str| -> u64 {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(label))
            .unwrap_or_else(|| panic!("missing row {label} in:\n{text}"));
        line.split_whitespace().last().unwrap().parse().unwrap()
    };

    // Exact integers.
    assert_eq!(value("total"), 124_439_808, "Table 1 total, exact");
    assert_eq!(value("full"), 124_439_808);
    assert_eq!(value("adapters(16)"), 894_528, "Table 1 adapters r=16, exact");
    assert_eq!(value("adapters(2)"), 7_091_712, "Table 1 adapters r=2, exact");
    assert_eq!(value("block(1)"), 7_087_872, "Table 2 single block, exact");

    // Blocks 1-6 within ±2% of the quoted 42M.
    let blocks16 = value("blocks(1-6)") as f64;
    assert_eq!(value("blocks(1-6)"), 42_527_232);
    assert!((blocks16 - 42.0e6).abs() / 42.0e6 <= 0.02);

    // Head: exact computed value, within 0.05% of the quoted 38.590M
    // (the 0.02% gap to 768×50257 is a documented discrepancy).
    let head = value("head");
    assert_eq!(head, 38_597_376);
    assert!((head as f64 - 38.590e6).abs() / 38.590e6 <= 0.0005);

    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}, budget 1 s");
    pass(1, "parameter-count reproduction");
}

// ─────────────────────── criterion 2 ───────────────────────

#[test]
fn criterion_2_gradient_correctness() {
    let t0 = Instant::now();
    const TOL: f64 = 1e-4;
    const SEEDS: u64 = 100;
    let h = 1e-5;

    let randn = |n: usize, seed: u64| -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
    };
    let t = |shape: Vec<usize>, seed: u64| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, randn(n, seed)).unwrap()
    };

    let mut worst = 0.0f64;
    let mut check = |err: f64, what: &str| {
        assert!(err < TOL, "{what}: relative error {err}");
        if err > worst {
            worst = err;
        }
    };

    for seed in 0..SEEDS {
        let s = seed * 1000;
        // matmul + bias + gelu + cross-entropy chain
        let err = grad_check(
            |tape, ids| {
                let h1 = tape.matmul(ids[0], ids[1])?;
                let h1 = tape.add_row_bias(h1, ids[2])?;
                let a = tape.gelu(h1);
                let h2 = tape.matmul_transpose_b(a, ids[3])?;
                tape.cross_entropy(h2, &[1, 3])
            },
            &[
                t(vec![2, 5], s),
                t(vec![5, 4], s + 1),
                t(vec![4], s + 2),
                t(vec![6, 4], s + 3),
            ],
            h,
        )
        .unwrap();
        check(err, "matmul/bias/gelu/cross-entropy");

        // softmax and log_softmax through an elementwise product
        let err = grad_check(
            |tape, ids| {
                let sm = tape.softmax(ids[0], 1)?;
                let lsm = tape.log_softmax(ids[1], 1)?;
                let prod = tape.mul(sm, lsm)?;
                Ok(tape.sum(prod))
            },
            &[t(vec![3, 4], s + 10), t(vec![3, 4], s + 11)],
            h,
        )
        .unwrap();
        check(err, "softmax/log_softmax");

        // layer norm
        let err = grad_check(
            |tape, ids| {
                let ln = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                tape.cross_entropy(ln, &[0, 2])
            },
            &[t(vec![2, 6], s + 20), t(vec![6], s + 21), t(vec![6], s + 22)],
            h,
        )
        .unwrap();
        check(err, "layer_norm");

        // embedding lookup with repeated ids
        let err = grad_check(
            |tape, ids| {
                let e = tape.embedding_lookup(ids[0], &[2, 0, 2, 1])?;
                tape.cross_entropy(e, &[0, 1, 2, 3])
            },
            &[t(vec![4, 5], s + 30)],
            h,
        )
        .unwrap();
        check(err, "embedding_lookup");

        // fused causal attention
        let err = grad_check(
            |tape, ids| {
                let att = tape.causal_attention(ids[0], ids[1], ids[2], 2, 3, 2)?;
                tape.cross_entropy(att, &[0, 1, 2, 3, 0, 1])
            },
            &[
                t(vec![6, 4], s + 40),
                t(vec![6, 4], s + 41),
                t(vec![6, 4], s + 42),
            ],
            h,
        )
        .unwrap();
        check(err, "causal_attention");

        // column slicing + add + mul
        let err = grad_check(
            |tape, ids| {
                let a = tape.slice_cols(ids[0], 1, 3)?;
                let b = tape.slice_cols(ids[0], 3, 3)?;
                let sum = tape.add(a, b)?;
                let prod = tape.mul(sum, sum)?;
                Ok(tape.sum(prod))
            },
            &[t(vec![2, 7], s + 50)],
            h,
        )
        .unwrap();
        check(err, "slice_cols/add/mul");

        // the full 2-block mini transformer loss
        let cfg = ModelConfig {
            n_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            context_length: 6,
            tied_embeddings: true,
            adapter_reduction: None,
        };
        let model = build_model::<f64>(&cfg, s + 60).unwrap();
        let inputs: Vec<Tensor<f64>> = model.params().values().cloned().collect();
        let tokens = [(seed % 11) as u32, 1, 4, 7];
        let targets = [1u32, 4, 7, (seed % 11) as u32];
        let err = grad_check(
            |tape, ids| {
                let logits = model.forward_from_leaves(tape, ids, &tokens, 1, 4)?;
                tape.cross_entropy(logits, &targets)
            },
            &inputs,
            h,
        )
        .unwrap();
        check(err, "2-block transformer loss");
    }

    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "took {elapsed:?}, budget 2 min"
    );
    println!("  worst relative error over {SEEDS} seeds: {worst:.2e} (runtime {elapsed:?})");
    pass(2, "gradient correctness");
}

// ─────────────────────── criterion 3 ───────────────────────

#[test]
fn criterion_3_null_attack_calibration() {
    use rand::{Rng, SeedableRng};
    let t0 = Instant::now();

    // 200 trials of member and non-member scores drawn iid from the same
    // continuous distribution. n_val = 99 makes the marginal flag
    // probability exactly (floor(0.1·99)+1)/(99+1) = 10/100 under the
    // order-statistic threshold.
    const TRIALS: usize = 200;
    const N_VAL: usize = 99;
    const N_MEM: usize = 20;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20_260_809);
    let mut flagged_total = 0usize;
    for _ in 0..TRIALS {
        let vals: Vec<f64> = (0..N_VAL).map(|_| rng.gen::<f64>()).collect();
        let members: Vec<f64> = (0..N_MEM).map(|_| rng.gen::<f64>()).collect();
        let t = calibrate_threshold(&vals, 0.10).unwrap();
        let fpr = vals.iter().filter(|&&v| v < t).count() as f64 / N_VAL as f64;
        assert!(fpr <= 0.10, "realized FPR {fpr} exceeded the cap");
        flagged_total += members.iter().filter(|&&m| m < t).count();
    }
    // 99% binomial band around 10% of 200·20 member decisions.
    let n = (TRIALS * N_MEM) as f64;
    let expect = 0.10 * n;
    let band = 2.576 * (n * 0.10 * 0.90).sqrt();
    let got = flagged_total as f64;
    assert!(
        (got - expect).abs() <= band,
        "aggregate recall {got}/{n} outside {expect}±{band}"
    );

    // Separately: M == R on real data gives recall 0 and FPR 0.
    let corpus = email_corpus(30, 31, "null");
    let mode = TokenizeMode::Word { max_vocab: 200 };
    let vocab = build_vocab(&[&corpus], &mode).unwrap();
    let ids = memaudit_core::data::encode_corpus(&corpus, &vocab, &mode);
    let ws = windows(&ids, 8).unwrap();
    let (members, nonmembers) = ws.split_at(ws.len() / 2);
    let model = build_model::<f32>(&tiny_model_config(vocab.size()), 5).unwrap();
    let report = mia_recall(&model, &model.clone(), members, nonmembers, 0.10, 16).unwrap();
    assert_eq!(report.recall, 0.0, "M == R must give zero recall");
    assert_eq!(report.realized_fpr, 0.0);

    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 1 min");
    pass(3, "null-attack calibration");
}

// ─────────────────────── criterion 4 ───────────────────────

#[test]
fn criterion_4_pareto_oracle_equivalence() {
    use rand::{Rng, SeedableRng};
    let t0 = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for set in 0..1000 {
        let n = rng.gen_range(1..=1000);
        let points: Vec<MetricPoint> = (0..n)
            .map(|i| {
                // Coarse grid in both coordinates to force ties/duplicates.
                let val = rng.gen_range(0..200) as f64 * 0.25;
                let rec = rng.gen_range(0..200) as f64 * 0.005;
                MetricPoint {
                    strategy: format!("s{}", i % 3),
                    lr: 1e-4,
                    epoch: i as u32,
                    train_ppl: val,
                    val_ppl: val,
                    mia_recall: Some(rec),
                    exposure: None,
                }
            })
            .collect();

        let fast: Vec<(f64, f64)> = memaudit_core::analysis::pareto_frontier(&points)
            .iter()
            .map(|p| (p.val_ppl, p.mia_recall.unwrap()))
            .collect();

        // O(n²) dominance oracle.
        let mut oracle: Vec<(f64, f64)> = points
            .iter()
            .filter(|q| {
                !points.iter().any(|p| {
                    let (pv, pr) = (p.val_ppl, p.mia_recall.unwrap());
                    let (qv, qr) = (q.val_ppl, q.mia_recall.unwrap());
                    pv <= qv && pr <= qr && (pv < qv || pr < qr)
                })
            })
            .map(|p| (p.val_ppl, p.mia_recall.unwrap()))
            .collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        oracle.dedup();

        assert_eq!(fast, oracle, "mismatch on set {set} (n = {n})");
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}, budget 1 min");
    pass(4, "pareto oracle equivalence");
}

// ─────────────────────── criterion 5 ───────────────────────

#[test]
fn criterion_5_exposure_consistency() {
    let t0 = Instant::now();

    // Extractability threshold: rank 1 in a six-digit space.
    let mut scores = vec![0.0f64; 1_000_000];
    scores[940_955] = 1.0;
    let top = exposure_from_scores(940_955, &scores).unwrap();
    assert!(
        (top.exposure - 19.931568569324174).abs() < 1e-9,
        "rank-1 exposure {}",
        top.exposure
    );

    // Exact vs sampled agreement on a 10^4 space, n = 1000, tiny model,
    // median absolute difference over 20 sampling seeds.
    let corpus = Corpus::new(vec!["pin code 00".into()], "exposure");
    let mode = TokenizeMode::Char;
    let vocab = build_vocab(&[&corpus], &mode).unwrap();
    let model = build_model::<f32>(&tiny_model_config(vocab.size()), 909).unwrap();
    let spec = CanarySpec::new("pin code ____", "4711", 1);

    let exact = exposure_exact(&model, &spec, &vocab, &mode, 1_000_000, 64).unwrap();
    assert!(
        exact.rank >= 30.0,
        "degenerate fixture: true secret ranked {} of 10^4; pick another model seed",
        exact.rank
    );
    let mut diffs: Vec<f64> = (0..20)
        .map(|seed| {
            let sampled =
                exposure_sampled(&model, &spec, 1000, seed, &vocab, &mode, 64).unwrap();
            (sampled.exposure - exact.exposure).abs()
        })
        .collect();
    let med = median(&mut diffs);
    assert!(
        med <= 0.5,
        "median |sampled − exact| = {med} bits (exact {})",
        exact.exposure
    );

    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}, budget 5 min");
    println!(
        "  exact exposure {:.3} bits (rank {}), median sampled gap {med:.3} bits",
        exact.exposure, exact.rank
    );
    pass(5, "exposure consistency");
}

// ─────────────────────── criterion 6 ───────────────────────

struct GridData {
    /// (strategy, lr) → per-epoch medians over repeats.
    medians: BTreeMap<(String, usize), Vec<MetricPoint>>,
    lrs: Vec<f64>,
}

fn write_corpora(dir: &Path) -> (PathBuf, PathBuf) {
    let pre = dir.join("pre.txt");
    let fine = dir.join("fine.txt");
    std::fs::write(&pre, email_corpus(300, 1001, "pre").to_text()).unwrap();
    std::fs::write(&fine, email_corpus(90, 2002, "fine").to_text()).unwrap();
    (pre, fine)
}

fn desk_config(dir: &Path, pre: &Path, fine: &Path, out: &str, canary: bool) -> ExperimentConfig {
    let canary_lines = if canary {
        "data.canary.template = the access code is ____\n\
         data.canary.secret = 4721\n\
         data.canary.copies = 50\n\
         train.lr = [1e-3]\n"
    } else {
        "train.lr = [2e-5, 1e-4, 1e-3]\n"
    };
    let text = format!(
        "data.pretrain = {pre}\n\
         data.finetune = {fine}\n\
         data.val_fraction = 0.3\n\
         model.blocks = 4\n\
         model.d_model = 128\n\
         model.heads = 4\n\
         model.d_ff = 512\n\
         model.context = 64\n\
         {canary_lines}\
         train.strategies = [full, head, adapters(16)]\n\
         train.epochs = 20\n\
         train.seq_len = 32\n\
         train.batch_size = 8\n\
         train.repeats = 3\n\
         train.pretrain_epochs = 10\n\
         train.pretrain_lr = 1e-3\n\
         train.keep_checkpoints = final\n\
         attack.exposure_samples = 250\n\
         run.out_dir = {out}\n\
         run.seed = 60660\n",
        pre = pre.display(),
        fine = fine.display(),
        out = dir.join(out).display(),
    );
    let path = dir.join(format!("{out}.cfg"));
    std::fs::write(&path, text).unwrap();
    ExperimentConfig::from_file(&path).unwrap()
}

fn load_grid(cfg: &ExperimentConfig, out_dir: &Path) -> GridData {
    let mut medians = BTreeMap::new();
    for strategy in &cfg.strategies {
        for (li, _) in cfg.learning_rates.iter().enumerate() {
            let mut per_rep: Vec<Vec<MetricPoint>> = Vec::new();
            for rep in 0..cfg.repeats {
                let path = out_dir
                    .join("cells")
                    .join(strategy.label())
                    .join(format!("lr{li}_rep{rep}"))
                    .join("metrics.csv");
                let text = std::fs::read_to_string(&path)
                    .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                per_rep.push(parse_metrics_csv(&text).unwrap());
            }
            let epochs = per_rep[0].len();
            assert!(per_rep.iter().all(|r| r.len() == epochs));
            let mut med_points = Vec::with_capacity(epochs);
            for e in 0..epochs {
                let med = |f: &dyn Fn(&MetricPoint) -> f64| {
                    let mut vals: Vec<f64> = per_rep.iter().map(|r| f(&r[e])).collect();
                    median(&mut vals)
                };
                med_points.push(MetricPoint {
                    strategy: strategy.label(),
                    lr: cfg.learning_rates[li],
                    epoch: (e + 1) as u32,
                    train_ppl: med(&|p| p.train_ppl),
                    val_ppl: med(&|p| p.val_ppl),
                    mia_recall: Some(med(&|p| p.mia_recall.expect("recall present"))),
                    exposure: None,
                });
            }
            medians.insert((strategy.label(), li), med_points);
        }
    }
    GridData {
        medians,
        lrs: cfg.learning_rates.clone(),
    }
}

fn median_trajectory(points: &[MetricPoint]) -> memaudit_core::train::Trajectory {
    memaudit_core::train::Trajectory {
        strategy: points[0].strategy.clone(),
        lr: points[0].lr,
        records: points
            .iter()
            .map(|p| memaudit_core::train::EpochMetrics {
                epoch: p.epoch,
                train_ppl: p.train_ppl,
                val_ppl: p.val_ppl,
                mia_recall: p.mia_recall,
                exposure: p.exposure,
            })
            .collect(),
    }
}

#[test]
fn criterion_6_desk_scale_directional_reproduction() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (pre, fine) = write_corpora(dir.path());

    // Main grid: {full, head, adapters(16)} × {2e-5, 1e-4, 1e-3} × 3 repeats.
    let cfg = desk_config(dir.path(), &pre, &fine, "grid", false);
    let summary = commands::cmd_run(&cfg, false).unwrap();
    assert!(
        summary.failures.is_empty(),
        "grid cells failed: {:?}",
        summary.failures
    );
    let grid = load_grid(&cfg, &summary.out_dir);

    // (a) Recall is non-decreasing across the detected phase-2 segment:
    // for each strategy, among the learning rates whose median trajectory
    // yields a segment of at least 3 epochs, take the one with the widest
    // recall range inside its segment — the trajectory where phase-2
    // dynamics are most visible (ties: lower lr). The range is unsigned, so
    // a strongly *decreasing* segment would be selected and fail the trend
    // test. Require Spearman(epoch, recall) > 0.8 over the segment.
    for strategy in ["full", "head", "adapters(16)"] {
        let mut best: Option<(f64, usize, u32, u32)> = None; // (span, li, a, b)
        for li in 0..grid.lrs.len() {
            let points = &grid.medians[&(strategy.to_string(), li)];
            let seg = segment_phases(&median_trajectory(points), 0.05, 2).unwrap();
            let (a, b) = (seg.boundary_a, seg.boundary_b);
            if b - a + 1 < 3 {
                continue;
            }
            let recalls: Vec<f64> = (a..=b)
                .map(|e| points[(e - 1) as usize].mia_recall.unwrap())
                .collect();
            let span = recalls.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - recalls.iter().cloned().fold(f64::INFINITY, f64::min);
            if best.map_or(true, |(s, ..)| span > s) {
                best = Some((span, li, a, b));
            }
        }
        let (_, li, a, b) = best.unwrap_or_else(|| {
            panic!("{strategy}: no phase-2 segment of ≥3 epochs at any learning rate")
        });
        let points = &grid.medians[&(strategy.to_string(), li)];
        let epochs: Vec<f64> = (a..=b).map(|e| e as f64).collect();
        let recalls: Vec<f64> = (a..=b)
            .map(|e| points[(e - 1) as usize].mia_recall.unwrap())
            .collect();
        let rho = spearman(&epochs, &recalls);
        println!(
            "  (a) {strategy}: lr {} phase-2 [{a}, {b}], spearman {rho:.3}",
            grid.lrs[li]
        );
        assert!(
            rho > 0.8,
            "{strategy}: rank correlation {rho} over phase-2 [{a}, {b}] at lr {}",
            grid.lrs[li]
        );
    }

    // Training invariant: at each strategy's best lr (min final median
    // val ppl), the median train perplexity improves over the run.
    for strategy in ["full", "head", "adapters(16)"] {
        let li = (0..grid.lrs.len())
            .min_by(|&x, &y| {
                let f = |li: usize| {
                    grid.medians[&(strategy.to_string(), li)]
                        .last()
                        .unwrap()
                        .val_ppl
                };
                f(x).partial_cmp(&f(y)).unwrap()
            })
            .unwrap();
        let points = &grid.medians[&(strategy.to_string(), li)];
        assert!(
            points.last().unwrap().train_ppl < points[0].train_ppl,
            "{strategy}: median train ppl should improve at its best lr"
        );
    }

    // (b) At the closest-matched val-PPL pair of median checkpoints,
    // head recall exceeds adapters(16) recall.
    let head_points: Vec<&MetricPoint> = (0..grid.lrs.len())
        .flat_map(|li| grid.medians[&("head".to_string(), li)].iter())
        .collect();
    let adapter_points: Vec<&MetricPoint> = (0..grid.lrs.len())
        .flat_map(|li| grid.medians[&("adapters(16)".to_string(), li)].iter())
        .collect();
    let mut closest: Option<(f64, &MetricPoint, &MetricPoint)> = None;
    for h in &head_points {
        for a in &adapter_points {
            let d = (h.val_ppl - a.val_ppl).abs();
            if closest.as_ref().map_or(true, |(best, _, _)| d < *best) {
                closest = Some((d, h, a));
            }
        }
    }
    let (d, h, a) = closest.unwrap();
    println!(
        "  (b) matched pair Δppl {d:.4}: head(lr {}, ep {}) recall {:.1}% vs adapters(lr {}, ep {}) recall {:.1}%",
        h.lr,
        h.epoch,
        h.mia_recall.unwrap() * 100.0,
        a.lr,
        a.epoch,
        a.mia_recall.unwrap() * 100.0
    );
    assert!(
        h.mia_recall.unwrap() > a.mia_recall.unwrap(),
        "head recall {:?} should exceed adapters recall {:?} at matched val ppl",
        h.mia_recall,
        a.mia_recall
    );

    // (c) With 50 inserted canary copies, final-epoch exposure exceeds the
    // epoch-0 exposure for every strategy (median over 3 repeats).
    let canary_cfg = desk_config(dir.path(), &pre, &fine, "canary", true);
    let canary_summary = commands::cmd_run(&canary_cfg, false).unwrap();
    assert!(
        canary_summary.failures.is_empty(),
        "canary cells failed: {:?}",
        canary_summary.failures
    );
    for strategy in ["full", "head", "adapters(16)"] {
        let mut bases = Vec::new();
        let mut finals = Vec::new();
        for rep in 0..canary_cfg.repeats {
            let path = canary_summary
                .out_dir
                .join("cells")
                .join(strategy)
                .join(format!("lr0_rep{rep}"))
                .join("exposure_report.json");
            let report: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
            bases.push(report["base"]["exposure"].as_f64().unwrap());
            finals.push(report["final_sampled"]["exposure"].as_f64().unwrap());
        }
        let base = median(&mut bases);
        let fin = median(&mut finals);
        println!("  (c) {strategy}: canary exposure {base:.3} -> {fin:.3} bits");
        assert!(
            fin > base,
            "{strategy}: final exposure {fin} must exceed epoch-0 exposure {base}"
        );
    }

    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs_f64() < 3600.0,
        "took {elapsed:?}, budget 60 min"
    );
    println!("  runtime {elapsed:?}");
    pass(6, "desk-scale directional reproduction");
}

// ─────────────────────── criterion 7 ───────────────────────

fn small_resume_config(dir: &Path, out: &str) -> (PathBuf, ExperimentConfig) {
    let pre = dir.join("pre_small.txt");
    let fine = dir.join("fine_small.txt");
    if !pre.exists() {
        std::fs::write(&pre, email_corpus(80, 7001, "pre").to_text()).unwrap();
        std::fs::write(&fine, email_corpus(50, 7002, "fine").to_text()).unwrap();
    }
    let text = format!(
        "data.pretrain = {}\n\
         data.finetune = {}\n\
         data.val_fraction = 0.3\n\
         model.blocks = 2\n\
         model.d_model = 32\n\
         model.heads = 2\n\
         model.d_ff = 128\n\
         model.context = 32\n\
         train.lr = [1e-3]\n\
         train.strategies = [full, head]\n\
         train.epochs = 4\n\
         train.seq_len = 16\n\
         train.repeats = 2\n\
         train.pretrain_epochs = 2\n\
         run.out_dir = {}\n\
         run.seed = 777\n",
        pre.display(),
        fine.display(),
        dir.join(out).display(),
    );
    let path = dir.join(format!("{out}.cfg"));
    std::fs::write(&path, text).unwrap();
    let cfg = ExperimentConfig::from_file(&path).unwrap();
    (path, cfg)
}

fn report_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    ["metrics.csv", "pareto.svg", "phases.txt"]
        .iter()
        .map(|name| (name.to_string(), std::fs::read(dir.join(name)).unwrap()))
        .collect()
}

#[test]
fn criterion_7_determinism_and_resume() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();

    // Determinism: identical config + seed → byte-identical outputs,
    // including with parallel workers.
    let (_, cfg_a) = small_resume_config(dir.path(), "det_a");
    let summary_a = commands::cmd_run(&cfg_a, false).unwrap();
    assert!(summary_a.failures.is_empty());
    let (_, cfg_b) = small_resume_config(dir.path(), "det_b");
    let mut cfg_b = cfg_b;
    cfg_b.workers = 2;
    let summary_b = commands::cmd_run(&cfg_b, false).unwrap();
    assert!(summary_b.failures.is_empty());
    assert_eq!(
        report_bytes(&summary_a.out_dir),
        report_bytes(&summary_b.out_dir),
        "reports must be byte-identical across runs and worker counts"
    );
    for cell in ["full/lr0_rep0", "full/lr0_rep1", "head/lr0_rep0", "head/lr0_rep1"] {
        let a = std::fs::read(summary_a.out_dir.join("cells").join(cell).join("attack_report.json"))
            .unwrap();
        let b = std::fs::read(summary_b.out_dir.join("cells").join(cell).join("attack_report.json"))
            .unwrap();
        assert_eq!(a, b, "attack report {cell} differs");
    }

    // Resume: kill a run mid-grid, resume it, and require byte equality
    // with an uninterrupted run plus untouched completed-cell checkpoints.
    let (cfg_path, _) = small_resume_config(dir.path(), "interrupted");
    let out_dir = dir.path().join("interrupted");
    let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_memaudit"))
        .args(["run", "--config"])
        .arg(&cfg_path)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .expect("spawn run");
    // Wait for the first completed cell, then kill the process.
    let deadline = Instant::now() + std::time::Duration::from_secs(300);
    let first_complete = loop {
        let complete: Vec<PathBuf> = ["full/lr0_rep0", "full/lr0_rep1", "head/lr0_rep0"]
            .iter()
            .map(|c| out_dir.join("cells").join(c).join("COMPLETE"))
            .filter(|p| p.exists())
            .collect();
        if !complete.is_empty() {
            break complete;
        }
        if let Some(status) = child.try_wait().unwrap() {
            panic!("run finished before it could be interrupted: {status}");
        }
        assert!(Instant::now() < deadline, "timed out waiting for a cell");
        std::thread::sleep(std::time::Duration::from_millis(25));
    };
    child.kill().unwrap();
    let _ = child.wait();

    let stamp = |p: &Path| std::fs::metadata(p).unwrap().modified().unwrap();
    let marker = &first_complete[0];
    let done_cell = marker.parent().unwrap().to_path_buf();
    let ckpt = done_cell.join("epoch_004.ckpt");
    let before = (stamp(marker), stamp(&ckpt));

    let out = std::process::Command::new(env!("CARGO_BIN_EXE_memaudit"))
        .args(["run", "--resume", "--config"])
        .arg(&cfg_path)
        .output()
        .expect("resume run");
    assert!(out.status.success(), "resume failed: {out:?}");
    let after = (stamp(marker), stamp(&ckpt));
    assert_eq!(before, after, "completed cell must not be recomputed");

    assert_eq!(
        report_bytes(&summary_a.out_dir),
        report_bytes(&out_dir),
        "resumed run must equal the uninterrupted run byte-for-byte"
    );
    // Cell outputs agree too: final checkpoints of the resumed run match the
    // uninterrupted run bit for bit (same seed, different directory).
    for cell in ["full/lr0_rep0", "full/lr0_rep1", "head/lr0_rep0", "head/lr0_rep1"] {
        let a = std::fs::read(
            summary_a
                .out_dir
                .join("cells")
                .join(cell)
                .join("epoch_004.ckpt"),
        )
        .unwrap();
        let b = std::fs::read(out_dir.join("cells").join(cell).join("epoch_004.ckpt")).unwrap();
        assert_eq!(a, b, "checkpoint {cell} differs after resume");
    }

    println!("  runtime {:?}", t0.elapsed());
    pass(7, "determinism and resume");
}
