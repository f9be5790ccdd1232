//! Deterministic synthetic "email-like" corpus generator, the desk-scale
//! stand-in for a private mail dataset. Documents follow a
//! greeting / body / sign-off shape with seeded word choices and occasional
//! numbers so digit tokens get exercised.

use rand::Rng;

use super::Corpus;
use crate::seed::rng_for;

const FIRST_NAMES: &[&str] = &[
    "ana", "boris", "carla", "dmitri", "elena", "farid", "grace", "henrik", "irene", "jonas",
    "kira", "leo", "maria", "nadia", "oscar", "priya", "quentin", "rosa", "stefan", "tara",
];

const TOPICS: &[&str] = &[
    "budget", "schedule", "contract", "proposal", "invoice", "roadmap", "audit", "forecast",
    "pipeline", "handbook", "rollout", "migration", "backlog", "retreat", "training", "survey",
];

const VERBS: &[&str] = &[
    "review", "update", "finalize", "approve", "circulate", "draft", "archive", "merge",
    "reschedule", "summarize", "escalate", "confirm",
];

const OBJECTS: &[&str] = &[
    "report", "document", "spreadsheet", "presentation", "summary", "agenda", "checklist",
    "timeline", "estimate", "notes", "minutes", "attachment",
];

const ADJECTIVES: &[&str] = &[
    "latest", "revised", "final", "quarterly", "annual", "pending", "updated", "preliminary",
    "shared", "internal",
];

const WEEKDAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday"];

const CLOSINGS: &[&str] = &["thanks", "best", "regards", "cheers"];

fn pick<'a>(rng: &mut impl Rng, pool: &[&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn sentence(rng: &mut impl Rng) -> String {
    match rng.gen_range(0..5) {
        0 => format!(
            "please {} the {} {} before {}",
            pick(rng, VERBS),
            pick(rng, ADJECTIVES),
            pick(rng, OBJECTS),
            pick(rng, WEEKDAYS)
        ),
        1 => format!(
            "the {} {} is attached for your review",
            pick(rng, ADJECTIVES),
            pick(rng, OBJECTS)
        ),
        2 => format!(
            "we should {} the {} {} with {}",
            pick(rng, VERBS),
            pick(rng, TOPICS),
            pick(rng, OBJECTS),
            pick(rng, FIRST_NAMES)
        ),
        3 => format!(
            "ticket {} tracks the {} {}",
            rng.gen_range(100..10000),
            pick(rng, TOPICS),
            pick(rng, OBJECTS)
        ),
        _ => format!(
            "let us meet on {} at {} to discuss the {}",
            pick(rng, WEEKDAYS),
            rng.gen_range(8..18),
            pick(rng, TOPICS)
        ),
    }
}

fn email(rng: &mut impl Rng) -> String {
    let mut lines = Vec::new();
    lines.push(format!(
        "subject {} {}",
        pick(rng, ADJECTIVES),
        pick(rng, TOPICS)
    ));
    lines.push(format!("hi {}", pick(rng, FIRST_NAMES)));
    let n_sentences = rng.gen_range(2..6);
    for _ in 0..n_sentences {
        lines.push(sentence(rng));
    }
    lines.push(format!("{} {}", pick(rng, CLOSINGS), pick(rng, FIRST_NAMES)));
    lines.join("\n")
}

/// Generate `n_docs` email-like documents; identical (n_docs, seed) pairs
/// reproduce the corpus byte for byte.
pub fn email_corpus(n_docs: usize, seed: u64, provenance: impl Into<String>) -> Corpus {
    let mut rng = rng_for(seed, "synthetic-email");
    let documents = (0..n_docs).map(|_| email(&mut rng)).collect();
    Corpus::new(documents, provenance)
}
