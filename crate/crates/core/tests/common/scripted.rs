//! A scripted generator: a fixed example payload per category, served by the
//! mock server with a share of malformed replies mixed in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthembed::embedder::EmbedderParams;
use synthembed::gateway::{Gateway, GatewayConfig, LoggedRequest, MockResponse, MockServer, Role};
use synthembed::model::{Category, Dataset};
use synthembed::synth::{compose_report, deduplicate, run_generation, GenerationSpec, SynthConfig, TemplateSet};

/// (category, task instruction, payloads answering it).
pub const SCRIPT: &[(Category, &str, &[&str])] = &[
    (
        Category::ShortShort,
        "Identify a famous painting from a brief description.",
        &[
            r#"{"query": "Painting of a woman with a mysterious smile", "positive": "The Mona Lisa by Leonardo da Vinci", "negative": "Claude Monet"}"#,
            r#"{"query": "a woman with a clock", "positive": "Girl with a Pearl Earring by Johannes Vermeer", "negative": "a toy that runs using a spring"}"#,
        ],
    ),
    (
        Category::ShortLong,
        "Search for documentaries about the effects of pollution on human health.",
        &[
            r#"{"query": "Documentaries on microplastics in drinking water", "positive": "This film follows researchers who sample tap water in twelve cities. They find plastic fragments in most samples. Doctors interviewed in the film discuss what is known about long-term exposure.", "negative": "This film follows a sailing crew across the Pacific. The crew photographs floating debris and the wildlife living around it. Most of the running time is about the voyage itself."}"#,
            r#"{"query": "soot and heart disease in city neighborhoods", "positive": "Fine particles from traffic and industry settle deep in the lungs. Several cohort studies link long exposure to higher rates of heart attack. Poorer districts near highways tend to carry the heaviest load.", "negative": "Heart disease has many known risk factors. Diet, smoking and family history dominate most studies. This overview does not discuss air quality at all."}"#,
        ],
    ),
    (
        Category::LongShort,
        "Classify data breach notifications into high, medium, and low risk categories.",
        &[
            r#"{"query": "An online retailer reported that attackers reached its customer database. Contact details of about half a million people were copied. Payment records were stored elsewhere and were not touched. Customers have been told to reset their passwords.", "positive": "high risk", "negative": "medium risk"}"#,
            r#"{"query": "A phishing email gave intruders access to one office laptop. The device held a cached list of supplier phone numbers. No customer data was on the laptop. The account was locked within the hour.", "positive": "low", "negative": "medium"}"#,
        ],
    ),
    (
        Category::LongLong,
        "Given a summary of research praising meditation, find writing that disputes its psychological benefits.",
        &[
            r#"{"query": "Many trials report that regular meditation lowers stress. Participants often sleep better and describe a calmer mood. Some studies also find modest gains in attention.", "positive": "Not everyone benefits from meditation. Some people with a history of trauma report more anxiety after intensive retreats. Critics also note that many trials are small and lack active controls.", "negative": "Meditation comes in many styles. Breath-focused practice is the most common in beginner courses. Walking meditation is popular among people who find sitting still difficult."}"#,
            r#"{"query": "Meditation has been linked to lower blood pressure. Hospitals now offer courses for patients with chronic pain. Brain imaging studies show changes in regions tied to attention.", "positive": "Several reviews argue that the effects of meditation are overstated. Benefits shrink when compared with exercise or relaxation training. A few participants describe lasting distress after long sessions.", "negative": "Exercise has well documented effects on mood. Even short daily walks reduce reported stress. This article compares running with swimming for beginners."}"#,
        ],
    ),
];

const MALFORMED: &[&str] = &[
    "Sure! Here is an example you could use for this task.",
    r#"{"query": "Painting of a woman with"#,
    r#"{"query": "a scripted query", "negative": "a scripted negative"}"#,
];

fn script_entry(prompt: &str) -> Option<&'static (Category, &'static str, &'static [&'static str])> {
    SCRIPT.iter().find(|(_, task, _)| prompt.contains(task))
}

/// Replies with the scripted payloads; each reply, retries included, is
/// malformed with probability `malformed_rate`, drawn from the request seed.
pub fn responder(malformed_rate: f64) -> impl Fn(&LoggedRequest) -> MockResponse + Send + Sync + 'static {
    move |req: &LoggedRequest| {
        let Some(r) = req.chat_request() else {
            return MockResponse::status(400);
        };
        let prompt = &r.messages[0].content;
        let attempt = r.messages.iter().filter(|m| m.role == Role::User).count() as u64;
        let seed = r.seed.unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ attempt);
        if let Some((_, _, payloads)) = script_entry(prompt) {
            if rng.random::<f64>() < malformed_rate {
                return MockResponse::chat(MALFORMED[rng.random_range(0..MALFORMED.len())]);
            }
            return MockResponse::chat(payloads[(seed % payloads.len() as u64) as usize]);
        }
        // brainstorm: the category is named by the hint; answer with its task
        let task = SCRIPT
            .iter()
            .find(|(c, _, _)| prompt.contains(&GenerationSpec::new(*c, 1, 1).category_hint()))
            .map(|(_, t, _)| *t)
            .unwrap_or(SCRIPT[0].1);
        MockResponse::chat(&serde_json::json!([task]).to_string())
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedRun {
    pub requested: usize,
    /// Schema-valid examples before deduplication.
    pub valid: usize,
    pub rejected: usize,
    pub dedup_removed: usize,
    pub parse_retries: usize,
    pub dedup_idempotent: bool,
    pub totals_conserved: bool,
}

impl ScriptedRun {
    pub fn yield_rate(&self) -> f64 {
        self.valid as f64 / self.requested as f64
    }
}

/// Generates `per_category` instances for every scripted category.
pub fn run(per_category: usize, malformed_rate: f64) -> ScriptedRun {
    let server = MockServer::with_responder(responder(malformed_rate)).unwrap();
    let mut cfg = GatewayConfig::for_url(server.base_url());
    cfg.backoff_base_ms = 1;
    let gateway = Gateway::new(cfg).unwrap();
    let specs: Vec<GenerationSpec> = SCRIPT
        .iter()
        .enumerate()
        .map(|(i, (c, _, _))| {
            let mut s = GenerationSpec::new(*c, 1, per_category);
            s.seed_base = 7919 * (i as u64 + 1);
            s
        })
        .collect();
    let templates = TemplateSet::builtin("v1").unwrap();
    let out = run_generation::<_, EmbedderParams>(&specs, &gateway, &templates, &SynthConfig::default(), None).unwrap();

    let mut all = Dataset::new();
    for d in out.datasets.values() {
        all.extend(d);
    }
    let (once, _) = deduplicate(&all);
    let (twice, removed_again) = deduplicate(&once);
    let recount = compose_report(&all);
    let requested = per_category * SCRIPT.len();
    let valid = out.report.total + out.report.dedup_removed;
    ScriptedRun {
        requested,
        valid,
        rejected: out.report.rejected,
        dedup_removed: out.report.dedup_removed,
        parse_retries: out.stats.parse_retries,
        dedup_idempotent: removed_again == 0 && twice.examples() == once.examples(),
        totals_conserved: recount.total == all.len()
            && recount.counts.values().sum::<usize>() == out.report.total
            && out.report.counts == recount.counts
            && valid + out.report.rejected == requested,
    }
}
