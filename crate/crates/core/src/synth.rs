//! Topic-clustered synthetic search data: documents, queries, click logs and
//! graded judgements.
//!
//! Every topic owns an anchor word that appears in all of its queries and
//! titles, a set of document-side words and a set of query-side words. Queries
//! lean on the query-side words and titles on the document-side ones, so
//! matching beyond the anchor requires learning which words belong together.
//! Document bodies mix both sides, which is what pretraining can pick up.
//! Topics come in pairs ("groups") that share a group word.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::text;
use crate::encoder::Vocab;
use crate::training::{
    group_click_log, mine_from_graded_labels, read_jsonl, write_jsonl, ClickGroups, ClickLogRecord,
    GradedLabelRecord, PretrainPair, StageData, TrainExample, ValidationQuery, ValidationSet,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub n_topics: usize,
    pub docs_per_topic: usize,
    pub queries_per_topic: usize,
    /// Distinct generated words (topic, group and filler words together).
    pub vocab_size: usize,
    /// Words owned by each topic, anchor included.
    pub topic_words: usize,
    pub query_length: (usize, usize),
    pub title_length: (usize, usize),
    pub body_length: (usize, usize),
    /// Share of queries marked low-frequency; they get one search session and
    /// use query-side words only.
    pub tail_fraction: f64,
    /// Probability that a non-anchor slot holds a filler word.
    pub noise_rate: f64,
    /// Search sessions logged per head query.
    pub sessions_per_query: usize,
    /// Results shown per session.
    pub session_length: usize,
    /// Judged documents per held-out query.
    pub labels_per_query: usize,
    /// Judged documents per training query.
    pub train_labels_per_query: usize,
    /// Share of training queries that receive judgements (all held-out queries do).
    pub train_label_fraction: f64,
    /// Probability that a judgement is off by one grade.
    pub label_noise: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_topics: 50,
            docs_per_topic: 10,
            queries_per_topic: 16,
            vocab_size: 600,
            topic_words: 9,
            query_length: (2, 4),
            title_length: (4, 8),
            body_length: (12, 20),
            tail_fraction: 0.3,
            noise_rate: 0.25,
            sessions_per_query: 3,
            session_length: 6,
            labels_per_query: 24,
            train_labels_per_query: 10,
            train_label_fraction: 0.3,
            label_noise: 0.3,
            valid_fraction: 0.15,
            test_fraction: 0.15,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocRecord {
    pub doc_id: u64,
    pub title: String,
    pub body: String,
    pub topic: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u64,
    pub text: String,
    pub topic: usize,
    pub split: Split,
    pub tail: bool,
    /// Ground truth for Recall@k: every document of the query's topic.
    pub relevant: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    pub docs: Vec<DocRecord>,
    pub queries: Vec<QueryRecord>,
    /// Sessions of training queries only.
    pub click_log: Vec<ClickLogRecord>,
    pub labels: Vec<GradedLabelRecord>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic pronounceable three-syllable word for an index.
pub fn word(index: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut i = index;
    let mut s = String::with_capacity(6);
    for _ in 0..3 {
        let syl = i % n;
        i /= n;
        s.push(CONSONANTS[syl / VOWELS.len()] as char);
        s.push(VOWELS[syl % VOWELS.len()] as char);
    }
    s
}

struct Lexicon {
    anchors: Vec<String>,
    doc_side: Vec<Vec<String>>,
    query_side: Vec<Vec<String>>,
    group: Vec<String>,
    filler: Vec<String>,
}

impl Lexicon {
    fn new(spec: &SyntheticCorpusSpec) -> Self {
        let mut next = 0;
        let mut take = |k: usize| {
            let out: Vec<String> = (next..next + k).map(word).collect();
            next += k;
            out
        };
        let k = spec.topic_words;
        let doc_k = (k - 1) / 2;
        let mut anchors = Vec::new();
        let mut doc_side = Vec::new();
        let mut query_side = Vec::new();
        for _ in 0..spec.n_topics {
            anchors.push(take(1).remove(0));
            doc_side.push(take(doc_k));
            query_side.push(take(k - 1 - doc_k));
        }
        let group = take(spec.n_topics.div_ceil(2));
        let used = spec.n_topics * k + group.len();
        let mut filler = take(spec.vocab_size - used);
        filler.extend(text::STOP_WORDS.iter().map(|w| w.to_string()));
        Self {
            anchors,
            doc_side,
            query_side,
            group,
            filler,
        }
    }
}

fn len_in(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

fn pick<'a>(rng: &mut ChaCha8Rng, words: &'a [String]) -> &'a str {
    &words[rng.gen_range(0..words.len())]
}

/// Noise-free relevance grade of a document for a query, as the generator
/// assigns it before annotator noise.
pub struct Grader {
    filler: BTreeSet<String>,
}

impl Grader {
    pub fn new(spec: &SyntheticCorpusSpec) -> Self {
        Self {
            filler: Lexicon::new(spec).filler.into_iter().collect(),
        }
    }

    /// 4/3: same topic with at least two / fewer shared topical words;
    /// 2: partner topic; 1: any shared topical word; 0 otherwise.
    pub fn grade(&self, q: &QueryRecord, d: &DocRecord) -> u8 {
        let overlap = topical_overlap(&q.text, &d.title, &self.filler);
        if d.topic == q.topic {
            if overlap >= 2 {
                4
            } else {
                3
            }
        } else if d.topic / 2 == q.topic / 2 {
            2
        } else if overlap >= 1 {
            1
        } else {
            0
        }
    }
}

/// Content words shared by a query and a title, filler excluded.
pub fn topical_overlap(query: &str, title: &str, filler: &BTreeSet<String>) -> usize {
    let q: BTreeSet<String> = text::tokenize(query).into_iter().collect();
    let t: BTreeSet<String> = text::tokenize(title).into_iter().collect();
    q.intersection(&t).filter(|w| !filler.contains(*w)).count()
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.n_topics < 2 || self.docs_per_topic == 0 || self.queries_per_topic == 0 {
            return bad("need at least 2 topics with documents and queries".into());
        }
        if self.topic_words < 3 {
            return bad("topic_words must be at least 3 (anchor + document + query word)".into());
        }
        let needed = self.n_topics * self.topic_words + self.n_topics.div_ceil(2) + 1;
        if self.vocab_size < needed {
            return bad(format!(
                "vocab_size {} cannot hold {} topics of {} words plus group and filler words (need {})",
                self.vocab_size, self.n_topics, self.topic_words, needed
            ));
        }
        for (name, (lo, hi)) in [
            ("query_length", self.query_length),
            ("title_length", self.title_length),
            ("body_length", self.body_length),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{} range ({}, {}) is empty", name, lo, hi));
            }
        }
        for (name, p) in [
            ("tail_fraction", self.tail_fraction),
            ("noise_rate", self.noise_rate),
            ("train_label_fraction", self.train_label_fraction),
            ("label_noise", self.label_noise),
            ("valid_fraction", self.valid_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{} {} outside [0, 1]", name, p));
            }
        }
        if self.valid_fraction + self.test_fraction >= 1.0 {
            return bad("validation and test fractions leave no training queries".into());
        }
        if self.session_length < 2 || self.session_length > self.n_topics * self.docs_per_topic {
            return bad("session_length must be in 2..=corpus size".into());
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SyntheticCorpus> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let lex = Lexicon::new(self);
        let filler_noise = |rng: &mut ChaCha8Rng| rng.gen::<f64>() < self.noise_rate;

        let mut docs = Vec::with_capacity(self.n_topics * self.docs_per_topic);
        for t in 0..self.n_topics {
            for _ in 0..self.docs_per_topic {
                let mut title = vec![lex.anchors[t].clone()];
                if rng.gen::<bool>() {
                    title.push(lex.group[t / 2].clone());
                }
                let n = len_in(&mut rng, self.title_length);
                while title.len() < n {
                    let w = if filler_noise(&mut rng) {
                        pick(&mut rng, &lex.filler)
                    } else {
                        pick(&mut rng, &lex.doc_side[t])
                    };
                    title.push(w.to_string());
                }
                title.shuffle(&mut rng);
                let n = len_in(&mut rng, self.body_length);
                let mut body = vec![lex.anchors[t].clone()];
                while body.len() < n {
                    let r: f64 = rng.gen();
                    let w = if r < 0.4 {
                        pick(&mut rng, &lex.doc_side[t])
                    } else if r < 0.7 {
                        pick(&mut rng, &lex.query_side[t])
                    } else if r < 0.8 {
                        &lex.group[t / 2]
                    } else {
                        pick(&mut rng, &lex.filler)
                    };
                    body.push(w.to_string());
                }
                body.shuffle(&mut rng);
                docs.push(DocRecord {
                    doc_id: docs.len() as u64,
                    title: title.join(" "),
                    body: body.join(" "),
                    topic: t,
                });
            }
        }

        let mut queries = Vec::with_capacity(self.n_topics * self.queries_per_topic);
        for t in 0..self.n_topics {
            let relevant: Vec<u64> = docs.iter().filter(|d| d.topic == t).map(|d| d.doc_id).collect();
            let n = self.queries_per_topic;
            let n_valid = (n as f64 * self.valid_fraction).round() as usize;
            let n_test = (n as f64 * self.test_fraction).round() as usize;
            let mut splits: Vec<Split> = (0..n)
                .map(|i| {
                    if i < n_valid {
                        Split::Valid
                    } else if i < n_valid + n_test {
                        Split::Test
                    } else {
                        Split::Train
                    }
                })
                .collect();
            splits.shuffle(&mut rng);
            for split in splits {
                let tail = rng.gen::<f64>() < self.tail_fraction;
                let mut q = vec![lex.anchors[t].clone()];
                let len = len_in(&mut rng, self.query_length);
                while q.len() < len {
                    let w = if filler_noise(&mut rng) {
                        pick(&mut rng, &lex.filler)
                    } else if tail || rng.gen::<f64>() < 0.7 {
                        pick(&mut rng, &lex.query_side[t])
                    } else {
                        pick(&mut rng, &lex.doc_side[t])
                    };
                    q.push(w.to_string());
                }
                q.shuffle(&mut rng);
                queries.push(QueryRecord {
                    query_id: queries.len() as u64,
                    text: q.join(" "),
                    topic: t,
                    split,
                    tail,
                    relevant: relevant.clone(),
                });
            }
        }

        let grader = Grader::new(self);
        let grade = |q: &QueryRecord, d: &DocRecord| grader.grade(q, d);

        let per_topic = self.docs_per_topic;
        let sample_docs = |rng: &mut ChaCha8Rng, topic: usize, same: usize, related: usize, total: usize| {
            let mut chosen: Vec<usize> = Vec::with_capacity(total);
            let own: Vec<usize> = (topic * per_topic..(topic + 1) * per_topic).collect();
            chosen.extend(own.choose_multiple(rng, same.min(per_topic)));
            let partner = topic ^ 1;
            if partner < self.n_topics {
                let rel: Vec<usize> = (partner * per_topic..(partner + 1) * per_topic).collect();
                chosen.extend(rel.choose_multiple(rng, related.min(per_topic)));
            }
            while chosen.len() < total {
                let d = rng.gen_range(0..docs.len());
                if docs[d].topic / 2 != topic / 2 && !chosen.contains(&d) {
                    chosen.push(d);
                }
            }
            chosen.shuffle(rng);
            chosen
        };

        let examine = |pos: usize| 1.0 / (1.0 + pos as f64).sqrt();
        const ATTRACT: [f64; 5] = [0.03, 0.08, 0.2, 0.55, 0.85];
        let mut click_log = Vec::new();
        for q in queries.iter().filter(|q| q.split == Split::Train) {
            let sessions = if q.tail { 1 } else { self.sessions_per_query };
            for _ in 0..sessions {
                let shown = sample_docs(&mut rng, q.topic, 2, 1, self.session_length);
                for (pos, &d) in shown.iter().enumerate() {
                    let g = grade(q, &docs[d]);
                    let clicked = rng.gen::<f64>() < examine(pos) * ATTRACT[g as usize];
                    let dwell_time = if clicked {
                        let mu = 2.2 + 0.35 * g as f64;
                        LogNormal::new(mu, 0.5).unwrap().sample(&mut rng)
                    } else {
                        0.0
                    };
                    click_log.push(ClickLogRecord {
                        query_id: q.query_id,
                        query_text: q.text.clone(),
                        doc_id: docs[d].doc_id,
                        doc_title: docs[d].title.clone(),
                        clicked,
                        dwell_time,
                    });
                }
            }
        }

        let mut labels = Vec::new();
        for q in &queries {
            let n_labels = match q.split {
                Split::Train if rng.gen::<f64>() >= self.train_label_fraction => continue,
                Split::Train => self.train_labels_per_query,
                _ => self.labels_per_query,
            }
            .min(docs.len());
            let same = (n_labels * 3).div_ceil(8);
            let related = n_labels / 4;
            for d in sample_docs(&mut rng, q.topic, same, related, n_labels) {
                let mut g = grade(q, &docs[d]);
                if rng.gen::<f64>() < self.label_noise {
                    g = if g == 0 || (g < 4 && rng.gen::<bool>()) { g + 1 } else { g - 1 };
                }
                labels.push(GradedLabelRecord {
                    query_id: q.query_id,
                    query_text: q.text.clone(),
                    doc_id: docs[d].doc_id,
                    doc_title: docs[d].title.clone(),
                    grade: g,
                });
            }
        }

        Ok(SyntheticCorpus {
            spec: self.clone(),
            docs,
            queries,
            click_log,
            labels,
        })
    }
}

const DOCS: &str = "docs.jsonl";
const QUERIES: &str = "queries.jsonl";
const CLICKS: &str = "click_log.jsonl";

fn labels_file(split: Split) -> &'static str {
    match split {
        Split::Train => "graded_labels.train.jsonl",
        Split::Valid => "graded_labels.valid.jsonl",
        Split::Test => "graded_labels.test.jsonl",
    }
}

impl SyntheticCorpus {
    pub fn queries_in(&self, split: Split) -> impl Iterator<Item = &QueryRecord> {
        self.queries.iter().filter(move |q| q.split == split)
    }

    pub fn grader(&self) -> Grader {
        Grader::new(&self.spec)
    }

    /// Judgements of the queries in one split.
    pub fn labels_in(&self, split: Split) -> Vec<GradedLabelRecord> {
        let ids: BTreeSet<u64> = self.queries_in(split).map(|q| q.query_id).collect();
        self.labels.iter().filter(|l| ids.contains(&l.query_id)).cloned().collect()
    }

    /// Every text the tokenizer vocabulary should cover.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.docs
            .iter()
            .flat_map(|d| [d.title.as_str(), d.body.as_str()])
            .chain(self.queries.iter().map(|q| q.text.as_str()))
    }

    /// Word vocabulary over every title, body and query.
    pub fn vocab(&self, capacity: usize) -> Vocab {
        Vocab::build(self.texts(), capacity)
    }

    fn title_pool(&self, vocab: &Vocab) -> Vec<Vec<u32>> {
        self.docs.iter().map(|d| vocab.ids(&d.title)).collect()
    }

    /// Stage-1 pairs: each document body followed by its own title.
    pub fn pretrain_data(&self, vocab: &Vocab) -> StageData {
        let pairs = self
            .docs
            .iter()
            .map(|d| PretrainPair {
                a: vocab.ids(&d.body),
                b: vocab.ids(&d.title),
                is_next: true,
            })
            .filter(|p| !p.a.is_empty() && !p.b.is_empty())
            .collect();
        StageData::Pairs {
            pairs,
            negative_pool: self.title_pool(vocab),
        }
    }

    /// Stage-2 pairs: each training query followed by a title it clicked.
    pub fn post_pretrain_data(&self, vocab: &Vocab) -> StageData {
        let mut seen = BTreeSet::new();
        let pairs = self
            .click_log
            .iter()
            .filter(|r| r.clicked && seen.insert((r.query_id, r.doc_id)))
            .map(|r| PretrainPair {
                a: vocab.ids(&r.query_text),
                b: vocab.ids(&r.doc_title),
                is_next: true,
            })
            .filter(|p| !p.a.is_empty() && !p.b.is_empty())
            .collect();
        StageData::Pairs {
            pairs,
            negative_pool: self.title_pool(vocab),
        }
    }

    pub fn click_groups(&self, vocab: &Vocab, max_len: usize) -> ClickGroups {
        group_click_log(&self.click_log, vocab, max_len)
    }

    pub fn graded_triplets(&self, split: Split, vocab: &Vocab, max_len: usize) -> Vec<TrainExample> {
        mine_from_graded_labels(&self.labels_in(split), vocab, max_len)
    }

    /// Held-out queries of `split` against the full title corpus.
    pub fn validation_set(&self, split: Split, vocab: &Vocab, max_len: usize) -> ValidationSet {
        let mut judged: std::collections::HashMap<u64, Vec<(u64, f64)>> = Default::default();
        for l in &self.labels {
            judged.entry(l.query_id).or_default().push((l.doc_id, l.grade as f64));
        }
        ValidationSet {
            doc_ids: self.docs.iter().map(|d| d.doc_id).collect(),
            docs: self.docs.iter().map(|d| vocab.encode(&d.title, max_len)).collect(),
            queries: self
                .queries_in(split)
                .map(|q| ValidationQuery {
                    query_id: q.query_id,
                    seq: vocab.encode(&q.text, max_len),
                    relevant: q.relevant.clone(),
                    judged: judged.remove(&q.query_id).unwrap_or_default(),
                })
                .collect(),
            k: 10,
        }
    }

    /// Writes the corpus as line-JSON files plus `spec.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        write_jsonl(&dir.join(DOCS), &self.docs)?;
        write_jsonl(&dir.join(QUERIES), &self.queries)?;
        write_jsonl(&dir.join(CLICKS), &self.click_log)?;
        for split in [Split::Train, Split::Valid, Split::Test] {
            write_jsonl(&dir.join(labels_file(split)), &self.labels_in(split))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let spec_path = dir.join("spec.json");
        let spec_text = std::fs::read_to_string(&spec_path)
            .map_err(|e| Error::Input(format!("cannot read {}: {}", spec_path.display(), e)))?;
        let spec = serde_json::from_str(&spec_text)?;
        let mut labels = Vec::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            labels.extend(crate::training::read_graded_labels(&dir.join(labels_file(split)))?);
        }
        let queries: Vec<QueryRecord> = read_jsonl(&dir.join(QUERIES))?;
        // Restore generation order (labels were written grouped by split).
        let order: std::collections::HashMap<u64, usize> =
            queries.iter().enumerate().map(|(i, q)| (q.query_id, i)).collect();
        labels.sort_by_key(|l| order.get(&l.query_id).copied().unwrap_or(usize::MAX));
        Ok(Self {
            spec,
            docs: read_jsonl(&dir.join(DOCS))?,
            queries,
            click_log: crate::training::read_click_log(&dir.join(CLICKS))?,
            labels,
        })
    }
}
