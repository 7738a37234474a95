//! Planted corpora and evaluation tasks with known causal structure.
//!
//! * Topic notes mix a few topic words into neutral filler. Long-short data
//!   maps such notes to their topic label, so it sharpens topic features:
//!   classification and clustering of notes improve.
//! * STS pairs are scored by filler overlap while carrying unrelated topic
//!   words, so sharpening topic features hurts STS.
//! * Short-long data matches place names to field reports written in a
//!   separate vocabulary; the retrieval and reranking tasks measure that.
//! * The base dataset is filler paraphrases, which is what makes STS work.
//!
//! [`planted_responder`] serves the same generators behind the mock server,
//! keyed by the request seed, so a generation run is fully reproducible.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedder::{EmbedError, EmbedderParams, FeaturizerConfig};
use crate::eval::{
    Document, EvalTask, LabeledText, RerankInstance, RetrievalQuery, ScoredPair, TaskPayload,
};
use crate::gateway::{ChatRequest, LoggedRequest, MockResponse, Role};
use crate::model::{Category, Dataset, SyntheticExample};
use crate::synth::GenerationSpec;
use crate::trainer::{Optimizer, TrainConfig};

pub const FILLER: &[&str] = &[
    "morning", "window", "table", "yellow", "quiet", "street", "garden", "letter", "simple", "little", "orange",
    "bright", "corner", "silver", "winter", "summer", "happy", "gentle", "narrow", "wooden", "basket", "candle",
    "pencil", "mirror", "pillow", "blanket", "ladder", "bottle", "button", "carpet", "curtain", "kettle",
    "lantern", "marble", "meadow", "needle", "pocket", "ribbon", "saddle", "teacup",
];

/// Topic label and its signal words.
pub const TOPICS: &[(&str, &[&str])] = &[
    ("astronomy", &["telescope", "nebula", "comet", "galaxy"]),
    ("cooking", &["saucepan", "oregano", "simmer", "braise"]),
    ("sailing", &["mainsail", "rudder", "keel", "starboard"]),
    ("finance", &["ledger", "dividend", "equity", "invoice"]),
];

pub const PLACES: &[&str] = &[
    "avalon", "brixton", "cordoba", "dunmore", "elmira", "fenwick", "galway", "hampden", "ipswich", "jarrow",
    "kilkee", "lowell",
];

const REPORT_WORDS: &[&str] = &[
    "rainfall", "survey", "bridge", "census", "harvest", "quarry", "railway", "ferry", "drought", "mill",
    "tannery", "granary",
];

pub const LONG_SHORT_TASK: &str = "Assign each short note to the topic it is about.";
pub const SHORT_LONG_TASK: &str = "Match a place name with its field report.";
pub const BASE_INSTRUCTION: &str = "Find a paraphrase of the word list.";
pub const GENERATOR_TAG: &str = "planted";

/// Training preset the planted experiments are calibrated for.
///
/// Explicit negatives only: in-batch negatives would couple the categories
/// through batch composition.
pub fn train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        learning_rate: 0.05,
        warmup_steps: 0,
        weight_decay: 1e-3,
        epochs: 3,
        in_batch_negatives: false,
        optimizer: Optimizer::adamw(),
        ..TrainConfig::default()
    }
}

/// Randomly initialized 64-dimensional base model over default features.
pub fn base_params(seed: u64) -> Result<EmbedderParams, EmbedError> {
    EmbedderParams::random(FeaturizerConfig::default(), 64, 1.0, seed)
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str], n: usize) -> Vec<&'a str> {
    words.choose_multiple(rng, n).copied().collect()
}

fn sentence(words: &[&str]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(0..1) {
        let upper = first.to_uppercase();
        s.replace_range(0..1, &upper);
    }
    s + "."
}

/// A note on topic `t`: `sentences` sentences, each one topic word and three fillers.
pub fn topic_note(rng: &mut ChaCha8Rng, t: usize, sentences: usize) -> String {
    (0..sentences)
        .map(|_| {
            let mut words = pick(rng, FILLER, 3);
            words.push(TOPICS[t].1.choose(rng).expect("non-empty"));
            words.shuffle(rng);
            sentence(&words)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn field_report(rng: &mut ChaCha8Rng, place: &str) -> String {
    (0..3)
        .map(|_| {
            let w = pick(rng, REPORT_WORDS, 2);
            sentence(&[w[0], "near", place, "and", w[1]])
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn place_query(rng: &mut ChaCha8Rng, place: &str) -> String {
    format!("{place} {}", REPORT_WORDS.choose(rng).expect("non-empty"))
}

/// One planted (query, positive, negative) triple for `category`.
pub fn planted_triple(category: Category, rng: &mut ChaCha8Rng) -> (String, String, String) {
    match category {
        Category::LongShort => {
            let t = rng.random_range(0..TOPICS.len());
            let other = (t + rng.random_range(1..TOPICS.len())) % TOPICS.len();
            (topic_note(rng, t, 3), format!("topic: {}", TOPICS[t].0), format!("topic: {}", TOPICS[other].0))
        }
        Category::ShortLong => {
            let two = pick(rng, PLACES, 2);
            (place_query(rng, two[0]), field_report(rng, two[0]), field_report(rng, two[1]))
        }
        _ => {
            let words = pick(rng, FILLER, 6);
            let mut para = words.clone();
            para.shuffle(rng);
            let swap = rng.random_range(0..para.len());
            para[swap] = FILLER.choose(rng).expect("non-empty");
            (words.join(" "), para.join(" "), pick(rng, FILLER, 6).join(" "))
        }
    }
}

/// Task description the responder answers for each category.
pub fn planted_task(category: Category) -> &'static str {
    match category {
        Category::LongShort => LONG_SHORT_TASK,
        Category::ShortLong => SHORT_LONG_TASK,
        _ => BASE_INSTRUCTION,
    }
}

fn example(category: Category, instruction: &str, triple: (String, String, String), task_id: &str) -> Option<SyntheticExample> {
    let (q, p, n) = triple;
    SyntheticExample::new(category, instruction, q, p, Some(n), task_id, GENERATOR_TAG).ok()
}

/// `n` filler-paraphrase examples, used as the non-synthetic base data.
pub fn base_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::new();
    d.metadata.insert("source".into(), "planted-base".into());
    while d.len() < n {
        if let Some(ex) = example(Category::Sts, BASE_INSTRUCTION, planted_triple(Category::Sts, &mut rng), "base") {
            d.push(ex).expect("constructed examples are valid");
        }
    }
    d
}

/// `n` planted examples of `category` generated directly (no gateway).
pub fn category_dataset(category: Category, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::new();
    while d.len() < n {
        if let Some(ex) = example(category, planted_task(category), planted_triple(category, &mut rng), "planted") {
            d.push(ex).expect("constructed examples are valid");
        }
    }
    d
}

fn labeled(text: String, label: &str) -> LabeledText {
    LabeledText {
        text,
        label: label.to_string(),
    }
}

/// The five planted evaluation tasks.
pub fn eval_tasks(seed: u64) -> Vec<EvalTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let notes = |rng: &mut ChaCha8Rng, per_class: usize| {
        let mut v = Vec::new();
        for _ in 0..per_class {
            for (t, (label, _)) in TOPICS.iter().enumerate() {
                let n = rng.random_range(1..=2);
                v.push(labeled(topic_note(rng, t, n), label));
            }
        }
        v
    };
    let classification = EvalTask {
        id: "topic-classification".into(),
        instruction: "Classify the note by topic.".into(),
        payload: TaskPayload::Classification {
            train: notes(&mut rng, 10),
            test: notes(&mut rng, 15),
        },
    };
    let clustering = EvalTask {
        id: "topic-clustering".into(),
        instruction: "Group notes by topic.".into(),
        payload: TaskPayload::Clustering {
            texts: notes(&mut rng, 12),
        },
    };

    let mut corpus = Vec::new();
    for p in PLACES {
        for k in 0..3 {
            corpus.push(Document {
                id: format!("{p}-{k}"),
                text: field_report(&mut rng, p),
            });
        }
    }
    let queries = PLACES
        .iter()
        .map(|p| RetrievalQuery {
            id: format!("q-{p}"),
            text: place_query(&mut rng, p),
            candidates: None,
            relevance: (0..3).map(|k| (format!("{p}-{k}"), 1)).collect::<BTreeMap<_, _>>(),
        })
        .collect();
    let retrieval = EvalTask {
        id: "place-retrieval".into(),
        instruction: SHORT_LONG_TASK.into(),
        payload: TaskPayload::Retrieval { corpus, queries },
    };

    let instances = PLACES
        .iter()
        .map(|p| {
            let others: Vec<&str> = PLACES.iter().copied().filter(|o| o != p).collect();
            RerankInstance {
                query: place_query(&mut rng, p),
                positives: (0..2).map(|_| field_report(&mut rng, p)).collect(),
                negatives: pick(&mut rng, &others, 4).iter().map(|o| field_report(&mut rng, o)).collect(),
            }
        })
        .collect();
    let reranking = EvalTask {
        id: "place-reranking".into(),
        instruction: SHORT_LONG_TASK.into(),
        payload: TaskPayload::Reranking { instances },
    };

    let pairs = (0..48)
        .map(|_| {
            let base = pick(&mut rng, FILLER, 6);
            let keep = rng.random_range(0..=6);
            let fresh: Vec<&str> = FILLER.iter().copied().filter(|w| !base.contains(w)).collect();
            let mut second: Vec<&str> = base[..keep].to_vec();
            second.extend(pick(&mut rng, &fresh, 6 - keep));
            let topic = |rng: &mut ChaCha8Rng| {
                let t = rng.random_range(0..TOPICS.len());
                pick(rng, TOPICS[t].1, 2)
            };
            let mut a = base.clone();
            a.extend(topic(&mut rng));
            a.shuffle(&mut rng);
            second.extend(topic(&mut rng));
            second.shuffle(&mut rng);
            ScoredPair {
                text1: a.join(" "),
                text2: second.join(" "),
                score: keep as f64,
            }
        })
        .collect();
    let sts = EvalTask {
        id: "filler-sts".into(),
        instruction: String::new(),
        payload: TaskPayload::Sts { pairs },
    };
    vec![classification, clustering, retrieval, reranking, sts]
}

fn category_from_hint(prompt: &str) -> Option<Category> {
    Category::ALL
        .into_iter()
        .find(|c| prompt.contains(&GenerationSpec::new(*c, 1, 1).category_hint()))
}

fn category_from_task(prompt: &str) -> Option<Category> {
    [Category::LongShort, Category::ShortLong]
        .into_iter()
        .find(|c| prompt.contains(planted_task(*c)))
}

/// Reply content for a chat request under the planted generators.
///
/// Brainstorm prompts (recognized by their category hint) get a one-task
/// list; instance prompts get a JSON triple drawn from the request seed.
/// `malformed_rate` of first attempts are answered with prose instead.
pub fn planted_reply(request: &ChatRequest, malformed_rate: f64) -> String {
    let prompt = &request.messages[0].content;
    let seed = request.seed.unwrap_or(0);
    let first_attempt = request.messages.iter().filter(|m| m.role == Role::User).count() == 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    if first_attempt && rng.random::<f64>() < malformed_rate {
        return "I am not able to produce that right now.".to_string();
    }
    if let Some(category) = category_from_task(prompt) {
        let (query, positive, negative) = planted_triple(category, &mut rng);
        return serde_json::json!({"query": query, "positive": positive, "negative": negative}).to_string();
    }
    if let Some(category) = category_from_hint(prompt) {
        return serde_json::json!([planted_task(category)]).to_string();
    }
    let (query, positive, negative) = planted_triple(Category::Sts, &mut rng);
    serde_json::json!({"query": query, "positive": positive, "negative": negative}).to_string()
}

/// Mock-server responder serving [`planted_reply`].
pub fn planted_responder(malformed_rate: f64) -> impl Fn(&LoggedRequest) -> MockResponse + Send + Sync + 'static {
    move |req: &LoggedRequest| match req.chat_request() {
        Some(r) => MockResponse::chat(&planted_reply(&r, malformed_rate)),
        None => MockResponse::status(400),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_data_is_valid_and_reproducible() {
        for c in [Category::LongShort, Category::ShortLong, Category::Sts] {
            let a = category_dataset(c, 30, 5);
            assert_eq!(a, category_dataset(c, 30, 5));
            assert!(a.iter().all(|e| e.validate().is_ok()));
        }
        assert_eq!(base_dataset(20, 1).len(), 20);
    }

    #[test]
    fn eval_tasks_validate() {
        for t in eval_tasks(3) {
            t.validate().unwrap();
        }
    }

    #[test]
    fn long_short_triples_follow_length_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (q, p, _) = planted_triple(Category::LongShort, &mut rng);
        assert!(crate::synth::sentence_count(&q) >= 3);
        assert!(p.len() < 40);
    }
}
