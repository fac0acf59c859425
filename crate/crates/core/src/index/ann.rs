//! Dot-product nearest-neighbour search: exact flat scan or an IVF index
//! over a k-means coarse quantizer.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "PANN" | u32 version | u32 mode (0 flat, 1 ivf) | u32 dim | u64 n | u32 n_probe
//! n × (u64 doc_id | f64 vector[dim])
//! u32 n_clusters | n_clusters × f64 centroid[dim]
//! n_clusters × (u32 len | u32 member[len])
//! ```

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{BinReader, BinWriter};
use crate::error::{contract, Error, Result};
use crate::scalar::{dot, Scalar};

const MAGIC: &[u8; 4] = b"PANN";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnMode {
    #[default]
    Flat,
    Ivf,
}

impl std::str::FromStr for AnnMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Self::Flat),
            "ivf" => Ok(Self::Ivf),
            _ => Err(Error::Input(format!("unknown ANN mode {:?} (flat|ivf)", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnParams {
    pub mode: AnnMode,
    pub n_clusters: usize,
    pub n_probe: usize,
    pub kmeans_iterations: usize,
    pub seed: u64,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            mode: AnnMode::Flat,
            n_clusters: 100,
            n_probe: 10,
            kmeans_iterations: 25,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: u64,
    pub score: f64,
}

/// Ranked hits; `short` flags fewer than the requested `k` results.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hits {
    pub hits: Vec<Hit>,
    pub short: bool,
}

impl Hits {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.doc_id).collect()
    }
}

/// Score descending, then doc id ascending.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then(a.doc_id.cmp(&b.doc_id))
}

/// Keeps the best `k` of `hits` in rank order.
pub fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    if hits.len() > k && k > 0 {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
    hits.truncate(k);
    hits
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnIndex<T> {
    mode: AnnMode,
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<T>,
    centroids: Vec<T>,
    lists: Vec<Vec<u32>>,
    n_probe: usize,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        s += d * d;
    }
    s
}

/// Lloyd's k-means from `k` distinct seeded points; returns centroids and assignments.
pub fn kmeans<T: Scalar>(data: &[T], dim: usize, k: usize, iterations: usize, seed: u64) -> (Vec<T>, Vec<usize>) {
    let n = data.len() / dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init: Vec<usize> = sample(&mut rng, n, k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<T> = init.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].to_vec()).collect();
    let mut assign = vec![0usize; n];
    let nearest = |centroids: &[T], v: &[T]| {
        let mut best = (0, T::infinity());
        for c in 0..k {
            let d = sq_dist(v, &centroids[c * dim..(c + 1) * dim]);
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    };
    for _ in 0..iterations {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(&centroids, &data[i * dim..(i + 1) * dim]);
        }
        let mut sums = vec![T::zero(); k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                *s += *v;
            }
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                let inv = T::one() / T::from_usize(counts[c]).unwrap();
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = *s * inv;
                }
            }
        }
    }
    for (i, a) in assign.iter_mut().enumerate() {
        *a = nearest(&centroids, &data[i * dim..(i + 1) * dim]);
    }
    (centroids, assign)
}

impl<T: Scalar> AnnIndex<T> {
    pub fn build(ids: &[u64], embeddings: &[Vec<T>], params: &AnnParams) -> Result<Self> {
        if embeddings.is_empty() {
            return contract("cannot index an empty embedding set");
        }
        if ids.len() != embeddings.len() {
            return contract(format!("{} ids for {} embeddings", ids.len(), embeddings.len()));
        }
        let dim = embeddings[0].len();
        if dim == 0 || embeddings.iter().any(|e| e.len() != dim) {
            return Err(Error::Shape("embeddings must share a non-zero dimension".into()));
        }
        if embeddings.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding value".into()));
        }
        let vectors: Vec<T> = embeddings.iter().flatten().copied().collect();
        let mut index = Self {
            mode: params.mode,
            dim,
            ids: ids.to_vec(),
            vectors,
            centroids: Vec::new(),
            lists: Vec::new(),
            n_probe: 0,
        };
        if params.mode == AnnMode::Ivf {
            let n = ids.len();
            if params.n_clusters == 0 || params.n_clusters > n {
                return contract(format!("n_clusters {} must be in 1..={}", params.n_clusters, n));
            }
            if params.n_probe == 0 {
                return contract("n_probe must be at least 1");
            }
            let (centroids, assign) =
                kmeans(&index.vectors, dim, params.n_clusters, params.kmeans_iterations, params.seed);
            let mut lists = vec![Vec::new(); params.n_clusters];
            for (i, a) in assign.into_iter().enumerate() {
                lists[a].push(i as u32);
            }
            index.centroids = centroids;
            index.lists = lists;
            index.n_probe = params.n_probe.min(params.n_clusters);
        }
        Ok(index)
    }

    pub fn mode(&self) -> AnnMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[T] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn n_clusters(&self) -> usize {
        self.lists.len()
    }

    /// Cluster posting lists (row indices); empty for flat indexes.
    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    pub fn centroid(&self, c: usize) -> &[T] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn search(&self, query: &[T], k: usize) -> Result<Hits> {
        self.search_with_probe(query, k, self.n_probe)
    }

    /// Top-`k` by dot product. IVF indexes scan the `n_probe` clusters whose
    /// centroids have the largest dot product with the query.
    pub fn search_with_probe(&self, query: &[T], k: usize, n_probe: usize) -> Result<Hits> {
        if k == 0 {
            return contract("k must be at least 1");
        }
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query width {} vs index {}", query.len(), self.dim)));
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite query".into()));
        }
        let score = |row: usize| Hit {
            doc_id: self.ids[row],
            score: dot(query, self.vector(row)).to_f64_lossy(),
        };
        let (hits, pool) = match self.mode {
            AnnMode::Flat => ((0..self.len()).map(score).collect::<Vec<_>>(), self.len()),
            AnnMode::Ivf => {
                let probes: Vec<Hit> = (0..self.n_clusters())
                    .map(|c| Hit {
                        doc_id: c as u64,
                        score: dot(query, self.centroid(c)).to_f64_lossy(),
                    })
                    .collect();
                let probes = top_k(probes, n_probe.clamp(1, self.n_clusters()));
                let rows: Vec<usize> = probes
                    .iter()
                    .flat_map(|p| self.lists[p.doc_id as usize].iter().map(|r| *r as usize))
                    .collect();
                let n = rows.len();
                (rows.into_iter().map(score).collect(), n)
            }
        };
        Ok(Hits {
            hits: top_k(hits, k),
            short: pool < k,
        })
    }

    pub fn write<W: Write>(&self, out: W) -> Result<W> {
        let mut w = BinWriter::new(out);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u32(match self.mode {
            AnnMode::Flat => 0,
            AnnMode::Ivf => 1,
        })?;
        w.u32(self.dim as u32)?;
        w.u64(self.ids.len() as u64)?;
        w.u32(self.n_probe as u32)?;
        for (i, id) in self.ids.iter().enumerate() {
            w.u64(*id)?;
            for v in self.vector(i) {
                w.f64(v.to_f64_lossy())?;
            }
        }
        w.u32(self.lists.len() as u32)?;
        for v in &self.centroids {
            w.f64(v.to_f64_lossy())?;
        }
        for list in &self.lists {
            w.u32(list.len() as u32)?;
            for r in list {
                w.u32(*r)?;
            }
        }
        w.finish()
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = BinReader::new(input);
        r.header(MAGIC, VERSION)?;
        let mode = match r.u32()? {
            0 => AnnMode::Flat,
            1 => AnnMode::Ivf,
            m => return Err(Error::Format(format!("unknown ANN mode {}", m))),
        };
        let dim = r.u32()? as usize;
        let n = r.u64()? as usize;
        let n_probe = r.u32()? as usize;
        if dim == 0 || n.checked_mul(dim).is_none_or(|x| x > 1 << 32) {
            return Err(Error::Format(format!("implausible index size {} × {}", n, dim)));
        }
        let mut ids = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n * dim);
        for _ in 0..n {
            ids.push(r.u64()?);
            for _ in 0..dim {
                vectors.push(T::of(r.f64()?));
            }
        }
        let n_clusters = r.u32()? as usize;
        if n_clusters > n {
            return Err(Error::Format("more clusters than vectors".into()));
        }
        let centroids = (0..n_clusters * dim).map(|_| r.f64().map(T::of)).collect::<Result<Vec<_>>>()?;
        let mut lists = Vec::with_capacity(n_clusters);
        let mut seen = 0;
        for _ in 0..n_clusters {
            let len = r.u32()? as usize;
            seen += len;
            if seen > n {
                return Err(Error::Format("posting lists exceed the vector count".into()));
            }
            let list = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if list.iter().any(|x| *x as usize >= n) {
                return Err(Error::Format("posting refers past the last vector".into()));
            }
            lists.push(list);
        }
        r.expect_end()?;
        Ok(Self {
            mode,
            dim,
            ids,
            vectors,
            centroids,
            lists,
            n_probe,
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
