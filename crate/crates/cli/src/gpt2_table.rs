//! The parameter-count table at the GPT-2 base shape.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use memaudit_core::model::{count_trainable_for_config, ModelConfig, TuningStrategy};

/// Exact trainable-parameter counts per strategy for the GPT-2 base config
/// (12 blocks, d=768, 12 heads, d_ff=3072, vocab 50257, ctx 1024, tied).
pub fn gpt2_table() -> String {
    let cfg = ModelConfig::gpt2();
    let mut adapters2 = cfg.clone();
    adapters2.adapter_reduction = Some(2);
    let mut adapters16 = cfg.clone();
    adapters16.adapter_reduction = Some(16);
    let mut untied = cfg.clone();
    untied.tied_embeddings = false;

    let count = |c: &ModelConfig, s: &TuningStrategy| {
        count_trainable_for_config(c, s).expect("gpt2 table strategies are valid")
    };
    let rows: Vec<(String, u64)> = vec![
        ("total".into(), cfg.param_count()),
        ("full".into(), count(&cfg, &TuningStrategy::Full)),
        ("head".into(), count(&cfg, &TuningStrategy::Head)),
        (
            "adapters(2)".into(),
            count(&adapters2, &TuningStrategy::Adapters(2)),
        ),
        (
            "adapters(16)".into(),
            count(&adapters16, &TuningStrategy::Adapters(16)),
        ),
        ("block(1)".into(), count(&cfg, &TuningStrategy::SingleBlock(1))),
        (
            "blocks(1-6)".into(),
            count(
                &cfg,
                &TuningStrategy::Blocks((1..=6).collect::<BTreeSet<_>>()),
            ),
        ),
        ("body".into(), count(&cfg, &TuningStrategy::Body)),
        (
            "untied-full".into(),
            count(&untied, &TuningStrategy::UntiedFull),
        ),
    ];

    let mut out = String::from(
        "GPT-2 base (12 blocks, d=768, 12 heads, d_ff=3072, vocab=50257, ctx=1024, tied)\n",
    );
    out.push_str("strategy       trainable_params\n");
    for (name, count) in rows {
        writeln!(out, "{name:<14} {count:>16}").expect("string write");
    }
    out
}

/// Counts for an arbitrary config and strategy list.
pub fn table_for(cfg: &ModelConfig, strategies: &[TuningStrategy]) -> anyhow::Result<String> {
    let mut out = String::new();
    writeln!(out, "total          {:>16}", cfg.param_count())?;
    for s in strategies {
        let mut c = cfg.clone();
        if let TuningStrategy::Adapters(r) = s {
            c.adapter_reduction = Some(*r);
        }
        if matches!(s, TuningStrategy::UntiedFull) {
            c.tied_embeddings = false;
        }
        writeln!(
            out,
            "{:<14} {:>16}",
            s.label(),
            count_trainable_for_config(&c, s)?
        )?;
    }
    Ok(out)
}
