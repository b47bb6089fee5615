//! Seeded synthetic corpus with latent topics and one fact per document.
//!
//! Each topic has its own pseudo-word vocabulary used for filler sentences and
//! for the kind of thing its facts talk about. A fact reads
//! `The <kind> <Thing> was <verb> by <Person> in <Month> <Year> .` and QA
//! questions ask for the person, the thing or the date with wording that differs
//! from the generated pretraining questions.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::finetune::QaExample;
use crate::seed::stage_rng;

const CONSONANTS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const SURNAME_SUFFIXES: [&str; 6] = ["son", "berg", "ova", "ski", "wick", "ham"];
const FIRST_NAMES: [&str; 40] = [
    "Anna", "Boris", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Irene", "Jonas", "Karla", "Lars",
    "Marta", "Nikolai", "Olga", "Pavel", "Quinn", "Rosa", "Stefan", "Tilda", "Ulrich", "Vera", "Walter",
    "Xenia", "Yusuf", "Zora", "Arthur", "Beatrix", "Cyril", "Dora", "Edgar", "Flora", "Gideon", "Helga",
    "Ivan", "Judith", "Konrad", "Lena", "Magnus", "Nora",
];
const VERBS: [&str; 12] = [
    "founded", "built", "designed", "discovered", "painted", "composed", "invented", "restored", "named",
    "mapped", "funded", "charted",
];
const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
    "November", "December",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub topics: usize,
    pub docs_per_topic: usize,
    pub vocab_per_topic: usize,
    pub min_filler_sentences: usize,
    pub max_filler_sentences: usize,
    pub train_questions: usize,
    pub dev_questions: usize,
    pub test_questions: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topics: 50,
            docs_per_topic: 100,
            vocab_per_topic: 40,
            min_filler_sentences: 3,
            max_filler_sentences: 5,
            train_questions: 2000,
            dev_questions: 300,
            test_questions: 1000,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Person,
    Thing,
    Date,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub doc_id: String,
    pub topic: usize,
    pub kind: String,
    pub thing: String,
    pub person: String,
    pub verb: String,
    pub date: String,
}

impl Fact {
    pub fn question(&self, kind: QuestionKind) -> QaExample {
        let (question, answer) = match kind {
            QuestionKind::Person => (format!("who {} the {} {}", self.verb, self.kind, self.thing), &self.person),
            QuestionKind::Thing => (format!("which {} was {} by {}", self.kind, self.verb, self.person), &self.thing),
            QuestionKind::Date => (format!("when was the {} {} {}", self.kind, self.thing, self.verb), &self.date),
        };
        QaExample {
            question,
            answers: vec![answer.clone()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub docs: Vec<Document>,
    pub facts: Vec<Fact>,
    pub train: Vec<QaExample>,
    pub dev: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

struct Namer {
    used: HashSet<String>,
}

impl Namer {
    fn word(&mut self, rng: &mut ChaCha8Rng, min_syl: usize, max_syl: usize) -> String {
        loop {
            let n = rng.gen_range(min_syl..=max_syl);
            let w: String = (0..n)
                .map(|_| format!("{}{}", CONSONANTS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn unique(&mut self, rng: &mut ChaCha8Rng, make: impl Fn(&mut ChaCha8Rng) -> String) -> String {
        loop {
            let s = make(rng);
            if self.used.insert(s.clone()) {
                return s;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    if config.topics == 0 || config.docs_per_topic == 0 || config.vocab_per_topic < 4 {
        return Err(Error::invalid("synthetic corpus needs topics, documents and at least 4 words per topic"));
    }
    if config.min_filler_sentences > config.max_filler_sentences {
        return Err(Error::invalid("min_filler_sentences exceeds max_filler_sentences"));
    }
    let n_facts = config.topics * config.docs_per_topic;
    if config.train_questions + config.dev_questions + config.test_questions > n_facts {
        return Err(Error::invalid("more questions requested than facts"));
    }
    let mut rng = stage_rng(config.seed, "synth-corpus", 0);
    let mut namer = Namer { used: HashSet::new() };

    let vocab: Vec<Vec<String>> = (0..config.topics)
        .map(|_| (0..config.vocab_per_topic).map(|_| namer.word(&mut rng, 2, 4)).collect())
        .collect();
    // The first few words of each topic name the kinds of things its facts describe.
    let kinds_per_topic = (config.vocab_per_topic / 8).max(1);

    let mut docs = Vec::with_capacity(n_facts);
    let mut facts = Vec::with_capacity(n_facts);
    for (t, words) in vocab.iter().enumerate() {
        for d in 0..config.docs_per_topic {
            let kind = words[rng.gen_range(0..kinds_per_topic)].clone();
            let thing = namer.unique(&mut rng, |r| {
                let a = (0..r.gen_range(2..=3))
                    .map(|_| format!("{}{}", CONSONANTS.choose(r).unwrap(), VOWELS.choose(r).unwrap()))
                    .collect::<String>();
                let b = (0..r.gen_range(2..=3))
                    .map(|_| format!("{}{}", CONSONANTS.choose(r).unwrap(), VOWELS.choose(r).unwrap()))
                    .collect::<String>();
                format!("{} {}", capitalize(&a), capitalize(&b))
            });
            let person = namer.unique(&mut rng, |r| {
                let stem = (0..r.gen_range(1..=2))
                    .map(|_| format!("{}{}", CONSONANTS.choose(r).unwrap(), VOWELS.choose(r).unwrap()))
                    .collect::<String>();
                format!(
                    "{} {}{}",
                    FIRST_NAMES.choose(r).unwrap(),
                    capitalize(&stem),
                    SURNAME_SUFFIXES.choose(r).unwrap()
                )
            });
            let verb = VERBS.choose(&mut rng).unwrap().to_string();
            let date = format!("{} {}", MONTHS.choose(&mut rng).unwrap(), rng.gen_range(1700..2021));

            let fact_sentence = format!("The {kind} {thing} was {verb} by {person} in {date} .");
            let n_fill = rng.gen_range(config.min_filler_sentences..=config.max_filler_sentences);
            let mut sentences: Vec<String> = (0..n_fill)
                .map(|_| {
                    let len = rng.gen_range(6..=10);
                    let body: Vec<&str> = (0..len).map(|_| words.choose(&mut rng).unwrap().as_str()).collect();
                    format!("{} .", body.join(" "))
                })
                .collect();
            let at = rng.gen_range(0..=sentences.len());
            sentences.insert(at, fact_sentence);

            let doc_id = format!("t{t:02}-d{d:03}");
            docs.push(Document {
                doc_id: doc_id.clone(),
                paragraphs: vec![sentences.join(" ")],
            });
            facts.push(Fact {
                doc_id,
                topic: t,
                kind,
                thing,
                person,
                verb,
                date,
            });
        }
    }

    let mut qrng = stage_rng(config.seed, "synth-questions", 0);
    let mut order: Vec<usize> = (0..n_facts).collect();
    order.shuffle(&mut qrng);
    let kinds = [QuestionKind::Person, QuestionKind::Thing, QuestionKind::Date];
    let mut take = |n: usize, from: &mut std::slice::Iter<'_, usize>| -> Vec<QaExample> {
        from.by_ref()
            .take(n)
            .map(|&i| facts[i].question(*kinds.choose(&mut qrng).unwrap()))
            .collect()
    };
    let mut it = order.iter();
    let train = take(config.train_questions, &mut it);
    let dev = take(config.dev_questions, &mut it);
    let test = take(config.test_questions, &mut it);
    Ok(SynthData {
        docs,
        facts,
        train,
        dev,
        test,
    })
}
