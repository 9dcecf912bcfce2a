//! Seeded generator of topic-structured instruction corpora for offline
//! runs and tests.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, InstructionRecord, RecordId};

const TOPICS: &[(&str, [&str; 8])] = &[
    ("astronomy", ["planet", "orbit", "telescope", "galaxy", "comet", "nebula", "eclipse", "asteroid"]),
    ("cooking", ["recipe", "oven", "flour", "sauce", "garlic", "simmer", "pastry", "spice"]),
    ("finance", ["budget", "interest", "loan", "savings", "stock", "inflation", "dividend", "mortgage"]),
    ("gardening", ["soil", "compost", "seedling", "prune", "tomato", "mulch", "greenhouse", "fertilizer"]),
    ("programming", ["function", "compiler", "variable", "loop", "array", "debugger", "recursion", "pointer"]),
    ("history", ["empire", "treaty", "revolution", "dynasty", "archive", "monarch", "colony", "battle"]),
    ("music", ["melody", "rhythm", "chord", "tempo", "guitar", "symphony", "lyrics", "harmony"]),
    ("medicine", ["symptom", "vaccine", "diagnosis", "antibiotic", "fever", "therapy", "pulse", "allergy"]),
    ("travel", ["itinerary", "passport", "luggage", "airport", "hostel", "visa", "souvenir", "ferry"]),
    ("chemistry", ["molecule", "reaction", "catalyst", "electron", "acid", "solvent", "isotope", "bond"]),
    ("sports", ["referee", "tournament", "stadium", "goalkeeper", "marathon", "coach", "penalty", "league"]),
    ("geography", ["river", "mountain", "desert", "glacier", "delta", "plateau", "volcano", "canyon"]),
    ("grammar", ["noun", "adjective", "clause", "pronoun", "tense", "punctuation", "synonym", "idiom"]),
    ("fitness", ["workout", "stretch", "protein", "squat", "cardio", "endurance", "posture", "treadmill"]),
    ("law", ["contract", "verdict", "statute", "plaintiff", "appeal", "evidence", "tenant", "copyright"]),
    ("ecology", ["habitat", "species", "wetland", "pollinator", "predator", "forest", "coral", "migration"]),
    ("mathematics", ["integer", "fraction", "polynomial", "triangle", "prime", "matrix", "derivative", "probability"]),
    ("marketing", ["brand", "slogan", "customer", "campaign", "audience", "newsletter", "discount", "survey"]),
    ("architecture", ["facade", "column", "blueprint", "staircase", "courtyard", "arch", "skyscraper", "balcony"]),
    ("psychology", ["memory", "emotion", "habit", "motivation", "anxiety", "perception", "empathy", "stress"]),
];

const VERBS: &[&str] = &[
    "Explain",
    "Describe",
    "Summarize",
    "List three facts about",
    "Write a short note on",
    "Give an example of",
    "Compare",
    "Suggest a tip about",
];

const FILLER: &[&str] = &[
    "the", "a", "is", "often", "can", "with", "because", "usually", "when", "many", "people", "important", "simple", "between",
    "helps", "changes", "most", "every", "small", "large",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub records: usize,
    /// Number of topics used, at most the built-in twenty.
    pub topics: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(records: usize, seed: u64) -> Self {
        Self {
            records,
            topics: TOPICS.len(),
            seed,
        }
    }
}

/// Number of built-in topics.
pub fn topic_count() -> usize {
    TOPICS.len()
}

/// Builds a corpus of short records spread round-robin over topics. Ids are
/// `syn-000000`, `syn-000001`, ...; record `i` belongs to topic
/// `i % topics`.
pub fn synthetic_corpus(spec: SyntheticSpec) -> Corpus {
    let topics = spec.topics.clamp(1, TOPICS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let records = (0..spec.records)
        .map(|i| {
            let (topic, words) = TOPICS[i % topics];
            let pick = |rng: &mut ChaCha8Rng| *words.choose(rng).expect("non-empty");
            let verb = *VERBS.choose(&mut rng).expect("non-empty");
            let (a, b) = (pick(&mut rng), pick(&mut rng));
            let instruction = if a == b {
                format!("{verb} the {a} in {topic}.")
            } else {
                format!("{verb} the {a} and the {b} in {topic}.")
            };
            let input = if rng.random_bool(0.4) {
                format!("Context: {} {}", pick(&mut rng), pick(&mut rng))
            } else {
                String::new()
            };
            let len = rng.random_range(6..=20);
            let output: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        pick(&mut rng)
                    } else {
                        *FILLER.choose(&mut rng).expect("non-empty")
                    }
                })
                .collect();
            let mut record = InstructionRecord::new("", instruction, input, format!("{}.", output.join(" ")));
            record.id = RecordId::new(format!("syn-{i:06}"));
            record
        })
        .collect();
    Corpus::new(records).expect("generated ids are unique")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synthetic_corpus(SyntheticSpec::new(100, 3));
        assert_eq!(a.len(), 100);
        assert_eq!(a, synthetic_corpus(SyntheticSpec::new(100, 3)));
        assert_ne!(a, synthetic_corpus(SyntheticSpec::new(100, 4)));
        assert!(a.records()[21].instruction.contains("cooking"));
    }
}
