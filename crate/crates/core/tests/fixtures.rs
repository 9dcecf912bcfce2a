//! Remote providers replayed from checked-in fixtures.
//!
//! The fixture files hold recorded request/response exchanges keyed by the
//! request hash. `fixtures_are_current` fails when a prompt template change
//! would orphan them; rerun with `CURATE_BLESS=1` to rewrite.

use std::path::PathBuf;

use curate_core::corpus::InstructionRecord;
use curate_core::embedding::{embed_batch, Embedder, EmbeddingError, HashedNgramEmbedder, RemoteEmbedder};
use curate_core::http::{EndpointConfig, RecordedExchange};
use curate_core::merging::{
    merge_pair, GateConfig, MergeContext, Merger, MergerConfig, MergerKind, RemoteMerger, Verdict,
};
use curate_core::pairing::CandidatePair;
use curate_core::scoring::{
    compute_perplexity, ln_to_log2, LogprobEndpointConfig, LogprobSource, RemoteLogprobs, RemoteScorer, Scorer,
    ScorerConfig, ScorerKind, ScoringError,
};
use curate_core::testing::FakeServer;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

struct Group {
    name: &'static str,
    first: InstructionRecord,
    second: InstructionRecord,
    merged: [&'static str; 3],
    scores: [f64; 3],
}

fn groups() -> Vec<Group> {
    vec![
        Group {
            name: "translation",
            first: InstructionRecord::new("tr-1", "Translate to Spanish", "Life is a journey, not a destination.", "La vida es un viaje, no un destino."),
            second: InstructionRecord::new("tr-2", "Translate to English", "El sol no brilla hoy.", "The sun is not shining today."),
            merged: [
                "Translate the given phrase either from Spanish to English or English to Spanish",
                "The sun is not shining today. / La vida es un viaje, no un destino.",
                "El sol no brilla hoy. / Life is a journey, not a destination.",
            ],
            scores: [1.88, 1.93, 2.57],
        },
        Group {
            name: "language_analysis",
            first: InstructionRecord::new("la-1", "Categorize part of speech", "very", "The word 'very' is an adverb."),
            second: InstructionRecord::new("la-2", "Identify sentence structure", "The birds are singing, but the sun is hidden.", "Compound-complex sentence"),
            merged: [
                "Identify the type of sentence structure used and analyze its phrase for the part of speech",
                "The birds are singing, but the sun is hidden on this windy day",
                "The given sentence '...' is a Compound-complex sentence. Also, the phrase 'windy day' within this sentence is an adjective phrase, as it describes the noun 'day' indicating that it is windy.",
            ],
            scores: [1.71, 1.23, 3.13],
        },
        Group {
            name: "calculation",
            first: InstructionRecord::new("ca-1", "Identify if the given number is odd or even.", "Number: 48", "Even"),
            second: InstructionRecord::new("ca-2", "Is the given number a prime number?", "19", "Yes, 19 is a prime number."),
            merged: [
                "Determine if the given number is odd or even, and also check if it is a prime number.",
                "Number: 48",
                "The number 48 is even. It is not a prime number because it has divisors other than 1 and itself.",
            ],
            scores: [2.35, 2.97, 3.08],
        },
    ]
}

impl Group {
    fn pair(&self) -> (CandidatePair, MergeContext) {
        let pair = CandidatePair {
            cluster: 0,
            id_a: self.first.id.clone(),
            id_b: self.second.id.clone(),
            similarity: 0.8,
        };
        let ctx = MergeContext {
            cluster: 0,
            first: self.first.clone(),
            second: self.second.clone(),
        };
        (pair, ctx)
    }

    fn merged_record(&self) -> InstructionRecord {
        InstructionRecord::new("m", self.merged[0], self.merged[1], self.merged[2])
    }
}

const SCORER_MODEL: &str = "deita-quality-scorer";
const MERGER_MODEL: &str = "gpt-4o-mini";

fn exchange(request: curate_core::http::ChatRequest, response: &str) -> RecordedExchange {
    RecordedExchange {
        key: request.key(),
        request,
        response: response.into(),
    }
}

// Never called: only used to build requests.
struct Unreachable;

impl curate_core::http::ChatTransport for Unreachable {
    fn complete(&self, _: &curate_core::http::ChatRequest) -> Result<String, curate_core::http::ApiError> {
        unreachable!("request builder only")
    }
}

fn score_exchanges() -> Vec<RecordedExchange> {
    let scorer = RemoteScorer::new(Box::new(Unreachable), SCORER_MODEL, 2);
    let mut out = Vec::new();
    for g in groups() {
        let records = [g.first.clone(), g.second.clone(), g.merged_record()];
        for (r, s) in records.iter().zip(g.scores) {
            if r.id.as_str() == "tr-2" {
                // A chatty first answer exercises the re-ask path.
                out.push(exchange(scorer.request_for(r, 0), "This example is fairly weak."));
                out.push(exchange(scorer.request_for(r, 1), &format!("Score: {s}")));
            } else {
                out.push(exchange(scorer.request_for(r, 0), &format!("{s}")));
            }
        }
    }
    out
}

fn merge_exchanges() -> Vec<RecordedExchange> {
    let merger = RemoteMerger::new(Box::new(Unreachable), MERGER_MODEL);
    groups()
        .iter()
        .map(|g| {
            let [i, x, y] = g.merged;
            let text = format!("Here is the merged example.\n<merged>\n<instruction>{i}</instruction>\n<input>{x}</input>\n<output>{y}</output>\n</merged>");
            exchange(merger.request_for(&g.pair().1, 0), &text)
        })
        .collect()
}

fn embedding_body() -> String {
    // Deliberately not unit length; the client normalizes.
    let v = HashedNgramEmbedder::new(384, 5).embed_one("Translate to Spanish").expect("embeds");
    let values: Vec<f64> = v.values().iter().map(|x| x * 3.0).collect();
    serde_json::json!({"object": "list", "model": "all-MiniLM-L6-v2", "data": [{"object": "embedding", "index": 0, "embedding": values}]})
        .to_string()
}

fn to_jsonl(x: &[RecordedExchange]) -> String {
    x.iter().map(|e| serde_json::to_string(e).expect("serializes") + "\n").collect()
}

#[test]
fn fixtures_are_current() {
    let expected = [
        ("score_replay.jsonl", to_jsonl(&score_exchanges())),
        ("merge_replay.jsonl", to_jsonl(&merge_exchanges())),
        ("embeddings_response.json", embedding_body()),
    ];
    let bless = std::env::var_os("CURATE_BLESS").is_some();
    for (name, text) in expected {
        if bless {
            std::fs::create_dir_all(fixture("")).unwrap();
            std::fs::write(fixture(name), &text).unwrap();
        }
        let on_disk = std::fs::read_to_string(fixture(name)).unwrap_or_default();
        assert!(on_disk == text, "{name} is stale; rerun with CURATE_BLESS=1");
    }
}

fn replay_scorer() -> Box<dyn Scorer> {
    ScorerConfig {
        kind: ScorerKind::Replay,
        fixture_path: Some(fixture("score_replay.jsonl")),
        ..ScorerConfig::default()
    }
    .build()
    .unwrap()
}

fn replay_merger() -> Box<dyn Merger> {
    MergerConfig {
        kind: MergerKind::Replay,
        fixture_path: Some(fixture("merge_replay.jsonl")),
        ..MergerConfig::default()
    }
    .build()
    .unwrap()
}

#[test]
fn scorer_replays_recorded_scores() {
    let scorer = replay_scorer();
    let g = &groups()[0];
    assert_eq!(scorer.score(&g.first).unwrap().value(), 1.88);
    // First answer has no number; the second attempt is used.
    assert_eq!(scorer.score(&g.second).unwrap().value(), 1.93);
    let unknown = InstructionRecord::new("u", "Say hello", "", "Hello");
    assert!(matches!(scorer.score(&unknown), Err(ScoringError::Provider(_))));
}

#[test]
fn replayed_merges_follow_the_gate() {
    let (merger, scorer) = (replay_merger(), replay_scorer());
    let gate = GateConfig::default();
    let mut verdicts = Vec::new();
    for g in groups() {
        let (pair, ctx) = g.pair();
        let o = merge_pair(&pair, &ctx, merger.as_ref(), scorer.as_ref(), &gate, 0);
        o.check(&gate).unwrap();
        assert_eq!(o.pre_scores, Some([g.scores[0], g.scores[1]]), "{}", g.name);
        assert_eq!(o.post_score, Some(g.scores[2]), "{}", g.name);
        assert_eq!(o.merged.as_ref().unwrap().instruction, g.merged[0]);
        verdicts.push((g.name, o.verdict));
    }
    assert_eq!(
        verdicts,
        [
            ("translation", Verdict::RejectedByGate),
            ("language_analysis", Verdict::Accepted),
            ("calculation", Verdict::RejectedByGate),
        ]
    );
}

#[test]
fn unrecorded_resynthesis_is_a_provider_failure() {
    let (merger, scorer) = (replay_merger(), replay_scorer());
    let g = &groups()[0];
    let (pair, ctx) = g.pair();
    // Attempt 1 asks at a higher temperature, which was never recorded.
    let o = merge_pair(&pair, &ctx, merger.as_ref(), scorer.as_ref(), &GateConfig::default(), 1);
    assert_eq!(o.verdict, Verdict::ProviderFailed);
    assert_eq!(o.attempts, 2);
    assert!(!o.accepted());
}

#[test]
fn remote_embedder_reads_recorded_response() {
    let body = std::fs::read_to_string(fixture("embeddings_response.json")).unwrap();
    let server = FakeServer::start(move |req| {
        assert_eq!(req.path, "/v1/embeddings");
        assert_eq!(req.json()["input"][0], "Translate to Spanish");
        (200, body.clone())
    });
    let embedder = RemoteEmbedder::new(&EndpointConfig::new(server.url()), "all-MiniLM-L6-v2", 384).unwrap();
    let v = embed_batch(&embedder, &["Translate to Spanish".to_string()], 8, 1).unwrap();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].dim(), 384);
    assert!((v[0].norm() - 1.0).abs() < 1e-6);

    let wrong = RemoteEmbedder::new(&EndpointConfig::new(server.url()), "all-MiniLM-L6-v2", 768).unwrap();
    assert!(matches!(
        wrong.embed(&["Translate to Spanish".to_string()]),
        Err(EmbeddingError::DimensionMismatch { expected: 768, found: 384 })
    ));
}

#[test]
fn remote_logprobs_give_perplexity() {
    let server = FakeServer::start(|req| {
        let body = req.json();
        assert_eq!(body["echo"], true);
        assert_eq!(body["max_tokens"], 0);
        let lp = serde_json::json!({"choices": [{"text": "", "logprobs": {
            "tokens": ["Life", " is", " a", " journey", "."],
            "token_logprobs": [null, -0.5, -1.25, -2.0, -0.25]
        }}]});
        (200, lp.to_string())
    });
    let cfg = LogprobEndpointConfig {
        endpoint: EndpointConfig::new(server.url()),
        model: "llama".into(),
        supports_logprobs: true,
    };
    let source = RemoteLogprobs::new(&cfg).unwrap();
    let lps = source.token_logprobs("Life is a journey.").unwrap();
    assert_eq!(lps, [-0.5, -1.25, -2.0, -0.25]);
    let pp = compute_perplexity(&ln_to_log2(&lps)).unwrap();
    assert!((pp - 1.0f64.exp()).abs() < 1e-12);
    source.token_logprobs("Life is a journey.").unwrap();
    assert_eq!(server.hits(), 1);

    let blind = LogprobEndpointConfig {
        supports_logprobs: false,
        ..cfg
    };
    assert!(matches!(RemoteLogprobs::new(&blind), Err(ScoringError::Capability(_))));
}
