//! Term index over document titles with Okapi BM25 scoring.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "PINV" | u32 version | u64 n_docs | n_docs × (u64 doc_id | u32 length)
//! u64 n_terms | n_terms × (str term | u32 n_postings | n_postings × (u64 doc_id | u32 tf))
//! ```
//! Terms are stored in lexicographic order and postings by doc id, so equal
//! indexes serialize to equal bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ann::{top_k, Hit, Hits};
use super::text;
use crate::binio::{BinReader, BinWriter};
use crate::error::{contract, Error, Result};

const MAGIC: &[u8; 4] = b"PINV";
const VERSION: u32 = 1;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Posting {
    pub doc_id: u64,
    pub tf: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_len: BTreeMap<u64, u32>,
    avg_len: f64,
}

/// `ln((N - df + 0.5) / (df + 0.5) + 1)`.
pub fn bm25_idf(n_docs: usize, df: usize) -> f64 {
    ((n_docs as f64 - df as f64 + 0.5) / (df as f64 + 0.5) + 1.0).ln()
}

/// Per-term BM25 contribution for term frequency `tf` in a document of length `len`.
pub fn bm25_term(idf: f64, tf: u32, len: u32, avg_len: f64) -> f64 {
    let tf = tf as f64;
    let norm = if avg_len > 0.0 { len as f64 / avg_len } else { 0.0 };
    idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * norm))
}

impl InvertedIndex {
    /// Indexes analyzed (tokenized, stop-word filtered) titles.
    pub fn build<'a>(docs: impl IntoIterator<Item = (u64, &'a str)>) -> Result<Self> {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = BTreeMap::new();
        let mut tokenized: Vec<(u64, Vec<String>)> = docs.into_iter().map(|(id, t)| (id, text::analyze(t))).collect();
        if tokenized.is_empty() {
            return contract("cannot index an empty corpus");
        }
        tokenized.sort_by_key(|d| d.0);
        for (id, terms) in &tokenized {
            if doc_len.insert(*id, terms.len() as u32).is_some() {
                return contract(format!("duplicate doc id {}", id));
            }
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.to_string()).or_default().push(Posting { doc_id: *id, tf: n });
            }
        }
        let total: u64 = doc_len.values().map(|l| *l as u64).sum();
        let avg_len = total as f64 / doc_len.len() as f64;
        Ok(Self {
            postings,
            doc_len,
            avg_len,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, doc_id: u64) -> Option<u32> {
        self.doc_len.get(&doc_id).copied()
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    /// BM25 score of every document matching at least one distinct query term.
    pub fn bm25_scores(&self, query: &str) -> HashMap<u64, f64> {
        let terms: BTreeSet<String> = text::analyze(query).into_iter().collect();
        let mut scores: HashMap<u64, f64> = HashMap::new();
        for t in &terms {
            let list = self.postings(t);
            if list.is_empty() {
                continue;
            }
            let idf = bm25_idf(self.n_docs(), list.len());
            for p in list {
                *scores.entry(p.doc_id).or_default() += bm25_term(idf, p.tf, self.doc_len[&p.doc_id], self.avg_len);
            }
        }
        scores
    }

    /// Top-`k` documents by BM25. An all-stop-word query yields an empty,
    /// flagged result.
    pub fn search(&self, query: &str, k: usize) -> Result<Hits> {
        if k == 0 {
            return contract("k must be at least 1");
        }
        if text::analyze(query).is_empty() {
            return Ok(Hits {
                hits: Vec::new(),
                short: true,
            });
        }
        let hits: Vec<Hit> = self
            .bm25_scores(query)
            .into_iter()
            .map(|(doc_id, score)| Hit { doc_id, score })
            .collect();
        let short = hits.len() < k;
        Ok(Hits {
            hits: top_k(hits, k),
            short,
        })
    }

    pub fn write<W: Write>(&self, out: W) -> Result<W> {
        let mut w = BinWriter::new(out);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u64(self.doc_len.len() as u64)?;
        for (id, len) in &self.doc_len {
            w.u64(*id)?;
            w.u32(*len)?;
        }
        w.u64(self.postings.len() as u64)?;
        for (term, list) in &self.postings {
            w.str(term)?;
            w.u32(list.len() as u32)?;
            for p in list {
                w.u64(p.doc_id)?;
                w.u32(p.tf)?;
            }
        }
        w.finish()
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = BinReader::new(input);
        r.header(MAGIC, VERSION)?;
        let n = r.u64()? as usize;
        if n == 0 {
            return Err(Error::Format("index holds no documents".into()));
        }
        let mut doc_len = BTreeMap::new();
        for _ in 0..n {
            let id = r.u64()?;
            let len = r.u32()?;
            if doc_len.insert(id, len).is_some() {
                return Err(Error::Format(format!("duplicate doc id {}", id)));
            }
        }
        let n_terms = r.u64()? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = r.str()?;
            let len = r.u32()? as usize;
            if len > n {
                return Err(Error::Format(format!("term {:?} has more postings than documents", term)));
            }
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let doc_id = r.u64()?;
                let tf = r.u32()?;
                if !doc_len.contains_key(&doc_id) {
                    return Err(Error::Format(format!("posting for unknown doc {}", doc_id)));
                }
                list.push(Posting { doc_id, tf });
            }
            postings.insert(term, list);
        }
        r.expect_end()?;
        let total: u64 = doc_len.values().map(|l| *l as u64).sum();
        let avg_len = total as f64 / n as f64;
        Ok(Self {
            postings,
            doc_len,
            avg_len,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn postings_and_frequencies() {
        let idx = InvertedIndex::build([(1, "alpha beta alpha")]).unwrap();
        assert_eq!(idx.postings("alpha"), &[Posting { doc_id: 1, tf: 2 }]);
        assert_eq!(idx.postings("beta"), &[Posting { doc_id: 1, tf: 1 }]);

        let idx = InvertedIndex::build([(3, "x y"), (1, "x"), (2, "z x")]).unwrap();
        assert_eq!(idx.df("x"), 3);
        let ids: Vec<u64> = idx.postings("x").iter().map(|p| p.doc_id).collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert!(InvertedIndex::build(std::iter::empty()).is_err());
        assert!(InvertedIndex::build([(1, "a"), (1, "b")]).is_err());
    }

    #[test]
    fn hand_computed_bm25() {
        // Lengths 3, 2, 1 → avgdl 2; "cat" in docs 1 (tf 2) and 3 (tf 1), df 2.
        let idx = InvertedIndex::build([(1, "cat cat dog"), (2, "dog bird"), (3, "cat")]).unwrap();
        let idf = (1.5f64 / 2.5 + 1.0).ln();
        let s1 = idf * 2.0 * 2.2 / (2.0 + 1.2 * (0.25 + 0.75 * 1.5));
        let s3 = idf * 1.0 * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 0.5));
        let h = idx.search("cat", 10).unwrap();
        assert_eq!(h.ids(), vec![3, 1]);
        assert!((h.hits[0].score - s3).abs() < 1e-12);
        assert!((h.hits[1].score - s1).abs() < 1e-12);
        assert!(h.short);

        assert!(idx.search("unicorn", 10).unwrap().hits.is_empty());
        let stop = idx.search("the of and", 5).unwrap();
        assert!(stop.hits.is_empty() && stop.short);
    }

    #[test]
    fn identical_docs_tie_by_id() {
        let idx = InvertedIndex::build([(7, "red fox"), (4, "red fox"), (9, "blue")]).unwrap();
        let h = idx.search("fox red", 3).unwrap();
        assert_eq!(h.ids(), vec![4, 7]);
        assert_eq!(h.hits[0].score, h.hits[1].score);
    }

    #[test]
    fn persistence_round_trips() {
        let idx = InvertedIndex::build([(2, "b c b"), (5, "a"), (1, "c a the")]).unwrap();
        let bytes = idx.write(Vec::new()).unwrap();
        let back = InvertedIndex::read(bytes.as_slice()).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.write(Vec::new()).unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(InvertedIndex::read(bad.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn idf_decreases_with_df(n in 1usize..1000, df in 0usize..999) {
            prop_assume!(df < n);
            prop_assert!(bm25_idf(n, df + 1) < bm25_idf(n, df));
            prop_assert!(bm25_idf(n, df) > 0.0);
        }

        #[test]
        fn postings_count_distinct_docs(docs in prop::collection::vec(prop::collection::vec(0u8..6, 1..6), 1..12)) {
            let texts: Vec<String> = docs.iter().map(|d| d.iter().map(|w| format!("w{}", w)).collect::<Vec<_>>().join(" ")).collect();
            let idx = InvertedIndex::build(texts.iter().enumerate().map(|(i, t)| (i as u64, t.as_str()))).unwrap();
            for w in 0..6u8 {
                let term = format!("w{}", w);
                let want = docs.iter().filter(|d| d.contains(&w)).count();
                prop_assert_eq!(idx.df(&term), want);
                let ids: Vec<u64> = idx.postings(&term).iter().map(|p| p.doc_id).collect();
                prop_assert!(ids.windows(2).all(|p| p[0] < p[1]));
            }
        }
    }
}
