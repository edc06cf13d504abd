//! Deterministic synthetic corpora for smoke runs and trend experiments.
//!
//! The word space is split into topic words and specific words. Each
//! document belongs to one topic and mixes several of that topic's words
//! with a few specific words. A query mentions its document's topic only
//! through "q" synonyms (`q17` stands for `d17`) and repeats a couple of the
//! document's specific words verbatim. Lexical overlap alone narrows the
//! candidates; resolving the topic requires learning the synonym mapping,
//! and topic identity is low-dimensional enough to survive truncation.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RunQrels, StsPair, TextRecord, TrainPair};
use crate::encoder::{Vocab, CLS_TOKEN};
use crate::error::{Error, Result};
use crate::eval::RetrievalSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Total vocabulary including the special tokens.
    pub vocab_size: usize,
    pub n_docs: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub n_topics: usize,
    pub words_per_topic: usize,
    /// Topic words per document.
    pub doc_topic_words: usize,
    /// Specific words per document.
    pub doc_specific_words: usize,
    /// Synonyms of topic words per query.
    pub query_topic_words: usize,
    /// Verbatim specific words per query.
    pub query_specific_words: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            n_docs: 2000,
            n_train: 500,
            n_eval: 100,
            n_topics: 32,
            words_per_topic: 6,
            doc_topic_words: 4,
            doc_specific_words: 6,
            query_topic_words: 2,
            query_specific_words: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub vocab: Vocab,
    pub train: Vec<TrainPair>,
    pub eval: RetrievalSet,
}

fn doc_word(i: usize) -> String {
    format!("d{i}")
}

fn query_word(i: usize) -> String {
    format!("q{i}")
}

const SPECIALS: [&str; 3] = ["[pad]", "[unk]", CLS_TOKEN];

/// Special tokens, then `d` words, then as many `q` synonyms as fit.
pub fn synth_vocab(vocab_size: usize) -> Result<Vocab> {
    if vocab_size < SPECIALS.len() + 2 {
        return Err(Error::InvalidArgument(format!("synthetic vocab size {vocab_size} too small")));
    }
    let (d, q) = word_counts(vocab_size);
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..d).map(doc_word));
    tokens.extend((0..q).map(query_word));
    Vocab::new(tokens)
}

fn word_counts(vocab_size: usize) -> (usize, usize) {
    let n = vocab_size.saturating_sub(SPECIALS.len());
    (n - n / 2, n / 2)
}

impl SynthConfig {
    fn words(&self) -> usize {
        word_counts(self.vocab_size).0
    }

    fn topic_span(&self) -> usize {
        self.n_topics * self.words_per_topic
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        if self.n_topics == 0 || self.doc_topic_words == 0 || self.doc_specific_words == 0 {
            return bad("topics and document word counts must be positive");
        }
        if self.doc_topic_words > self.words_per_topic {
            return bad("doc_topic_words exceeds words_per_topic");
        }
        if self.vocab_size < SPECIALS.len() + 2
            || self.topic_span() > word_counts(self.vocab_size).1
            || self.topic_span() + self.doc_specific_words > self.words()
        {
            return bad("vocabulary too small for the topic layout");
        }
        if self.query_topic_words > self.doc_topic_words || self.query_specific_words > self.doc_specific_words {
            return bad("queries cannot use more words than their document has");
        }
        if self.query_topic_words + self.query_specific_words == 0 {
            return bad("queries need at least one word");
        }
        if self.n_train == 0 || self.n_eval == 0 || self.n_train + self.n_eval > self.n_docs {
            return bad("need train and eval queries on distinct documents");
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SynthData> {
        self.validate()?;
        let vocab = synth_vocab(self.vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let specific: Vec<usize> = (self.topic_span()..self.words()).collect();

        struct Doc {
            topic: Vec<usize>,
            specific: Vec<usize>,
        }
        let docs: Vec<Doc> = (0..self.n_docs)
            .map(|_| {
                let t = rng.random_range(0..self.n_topics);
                let pool: Vec<usize> = (t * self.words_per_topic..(t + 1) * self.words_per_topic).collect();
                Doc {
                    topic: pool.choose_multiple(&mut rng, self.doc_topic_words).copied().collect(),
                    specific: specific
                        .choose_multiple(&mut rng, self.doc_specific_words)
                        .copied()
                        .collect(),
                }
            })
            .collect();
        let corpus: Vec<TextRecord> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let mut ws: Vec<usize> = d.topic.iter().chain(&d.specific).copied().collect();
                ws.shuffle(&mut rng);
                TextRecord {
                    id: format!("doc{i}"),
                    text: join(ws.into_iter().map(doc_word)),
                }
            })
            .collect();

        let make_query = |d: &Doc, rng: &mut ChaCha8Rng| -> String {
            let mut ws: Vec<String> = d
                .topic
                .choose_multiple(rng, self.query_topic_words)
                .map(|&w| query_word(w))
                .chain(
                    d.specific
                        .choose_multiple(rng, self.query_specific_words)
                        .map(|&w| doc_word(w)),
                )
                .collect();
            ws.shuffle(rng);
            join(ws.into_iter())
        };

        let mut order: Vec<usize> = (0..self.n_docs).collect();
        order.shuffle(&mut rng);
        let train = order[..self.n_train]
            .iter()
            .map(|&i| TrainPair {
                query: make_query(&docs[i], &mut rng),
                positive: corpus[i].text.clone(),
            })
            .collect();
        let mut queries = Vec::with_capacity(self.n_eval);
        let mut qrels = RunQrels::default();
        for (n, &i) in order[self.n_train..self.n_train + self.n_eval].iter().enumerate() {
            let id = format!("q{n}");
            qrels.insert(&id, &corpus[i].id);
            queries.push(TextRecord {
                id,
                text: make_query(&docs[i], &mut rng),
            });
        }
        Ok(SynthData {
            vocab,
            train,
            eval: RetrievalSet {
                corpus,
                queries,
                qrels,
            },
        })
    }
}

fn join(words: impl Iterator<Item = String>) -> String {
    words.collect::<Vec<_>>().join(" ")
}

/// Sentence pairs whose gold score is the Jaccard overlap of their words.
pub fn synth_sts(vocab_size: usize, n_pairs: usize, seed: u64) -> Result<Vec<StsPair>> {
    let words = word_counts(vocab_size).0;
    if words < 8 || n_pairs < 2 {
        return Err(Error::InvalidArgument("too few words or pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..words).collect();
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a: Vec<usize> = all.choose_multiple(&mut rng, 6).copied().collect();
        let keep = rng.random_range(0..=6);
        let mut b: Vec<usize> = a[..keep].to_vec();
        while b.len() < 6 {
            let w = *all.choose(&mut rng).unwrap();
            if !b.contains(&w) {
                b.push(w);
            }
        }
        let inter = b.iter().filter(|w| a.contains(w)).count();
        let score = inter as f64 / (12 - inter) as f64;
        let text = |ws: &[usize]| ws.iter().map(|&w| doc_word(w)).collect::<Vec<_>>().join(" ");
        out.push(StsPair {
            s1: text(&a),
            s2: text(&b),
            score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            vocab_size: 64,
            n_docs: 50,
            n_train: 20,
            n_eval: 10,
            n_topics: 4,
            words_per_topic: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_consistent() {
        let a = small().generate().unwrap();
        let b = small().generate().unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.eval.queries, b.eval.queries);
        assert_eq!(a.vocab.len(), 64);
        assert_eq!(a.eval.corpus.len(), 50);
        for q in &a.eval.queries {
            let doc = a.eval.qrels.get(&q.id).unwrap().iter().next().unwrap();
            let text = &a.eval.corpus.iter().find(|d| &d.id == doc).unwrap().text;
            for w in q.text.split(' ') {
                assert!(text.split(' ').any(|t| t[1..] == w[1..]), "{w} not in {text}");
            }
        }
    }

    #[test]
    fn default_sizes() {
        let d = SynthConfig::default().generate().unwrap();
        assert_eq!(d.vocab.len(), 512);
        assert_eq!(d.train.len(), 500);
        assert_eq!(d.eval.queries.len(), 100);
        assert_eq!(d.eval.corpus.len(), 2000);
    }

    #[test]
    fn sts_scores_in_range() {
        let p = synth_sts(64, 30, 1).unwrap();
        assert!(p.iter().all(|x| (0.0..=1.0).contains(&x.score)));
    }
}
