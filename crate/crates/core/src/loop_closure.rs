//! Bag-of-binary-words place recognition with geometric verification.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{match_features, Descriptor, Feature, MatchParams, DESCRIPTOR_BITS};
use crate::geometry::{Se3Pose, Vec3};
use crate::odometry::{register_matched_with, RegistrationParams};

pub const VOCAB_MAGIC: &[u8; 4] = b"IVOC";
pub const VOCAB_VERSION: u32 = 1;
const NO_WORD: u32 = u32::MAX;
const KMEDIANS_ITERATIONS: usize = 10;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("corpus of {have} descriptors is smaller than {need}")]
    InsufficientCorpus { have: usize, need: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
struct VocNode {
    centroid: Descriptor,
    first_child: u32,
    child_count: u32,
    word: u32,
}

/// Hierarchical k-medians tree over binary descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    branching: usize,
    depth: usize,
    /// Breadth-first; children of a node are contiguous. Node 0 is the root.
    nodes: Vec<VocNode>,
    idf: Vec<f64>,
}

/// Bitwise majority; ties resolve to 0.
pub fn majority(items: &[Descriptor]) -> Descriptor {
    let mut counts = [0u32; DESCRIPTOR_BITS];
    for d in items {
        for (i, c) in counts.iter_mut().enumerate() {
            if d.bit(i) {
                *c += 1;
            }
        }
    }
    let mut out = Descriptor([0; 4]);
    for (i, c) in counts.iter().enumerate() {
        if 2 * *c as usize > items.len() {
            out.set_bit(i, true);
        }
    }
    out
}

fn nearest(centroids: &[Descriptor], d: &Descriptor) -> usize {
    let mut best = (u32::MAX, 0);
    for (i, c) in centroids.iter().enumerate() {
        let h = c.hamming(d);
        if h < best.0 {
            best = (h, i);
        }
    }
    best.1
}

/// k-medians with k-means++ seeding; returns non-empty clusters in a
/// deterministic order.
fn kmedians(items: &[Descriptor], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Descriptor>> {
    let mut centroids = vec![items[rng.random_range(0..items.len())]];
    let mut dist: Vec<f64> = items
        .iter()
        .map(|d| (d.hamming(&centroids[0]) as f64).powi(2))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut pick = rng.random_range(0.0..total);
        let mut idx = items.len() - 1;
        for (i, w) in dist.iter().enumerate() {
            if pick < *w {
                idx = i;
                break;
            }
            pick -= w;
        }
        centroids.push(items[idx]);
        for (i, d) in items.iter().enumerate() {
            dist[i] = dist[i].min((d.hamming(&items[idx]) as f64).powi(2));
        }
    }
    let mut assign = vec![usize::MAX; items.len()];
    for _ in 0..KMEDIANS_ITERATIONS {
        let next: Vec<usize> = items.iter().map(|d| nearest(&centroids, d)).collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<Descriptor> = items
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == c)
                .map(|(d, _)| *d)
                .collect();
            if !members.is_empty() {
                *centroid = majority(&members);
            }
        }
    }
    let mut clusters = vec![Vec::new(); centroids.len()];
    for (d, a) in items.iter().zip(&assign) {
        clusters[*a].push(*d);
    }
    clusters.retain(|c| !c.is_empty());
    clusters
}

struct BuildNode {
    centroid: Descriptor,
    children: Vec<BuildNode>,
}

fn build(
    items: &[Descriptor],
    centroid: Descriptor,
    level: usize,
    b: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> BuildNode {
    let mut node = BuildNode {
        centroid,
        children: Vec::new(),
    };
    if level == d || items.len() <= 1 {
        return node;
    }
    let mut distinct = items.to_vec();
    distinct.sort_by_key(|x| x.0);
    distinct.dedup();
    if distinct.len() <= b {
        node.children = distinct
            .into_iter()
            .map(|x| BuildNode {
                centroid: x,
                children: Vec::new(),
            })
            .collect();
        return node;
    }
    for cluster in kmedians(items, b, rng) {
        let c = majority(&cluster);
        node.children.push(build(&cluster, c, level + 1, b, d, rng));
    }
    node
}

impl Vocabulary {
    /// Trains the tree; every word starts with idf 1.
    pub fn train(
        corpus: &[Descriptor],
        branching: usize,
        depth: usize,
        seed: u64,
    ) -> Result<Self, LoopError> {
        if branching < 2 || depth < 1 {
            return Err(LoopError::InvalidParam(format!(
                "branching {branching}, depth {depth}"
            )));
        }
        let need = branching.checked_pow(depth as u32).unwrap_or(usize::MAX);
        if corpus.len() < need {
            return Err(LoopError::InsufficientCorpus {
                have: corpus.len(),
                need,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root = build(corpus, majority(corpus), 0, branching, depth, &mut rng);
        // flatten breadth-first
        let mut nodes = vec![VocNode {
            centroid: root.centroid,
            first_child: 0,
            child_count: 0,
            word: NO_WORD,
        }];
        let mut queue = std::collections::VecDeque::from([(0usize, root)]);
        let mut words = 0u32;
        while let Some((idx, n)) = queue.pop_front() {
            if n.children.is_empty() {
                nodes[idx].word = words;
                words += 1;
                continue;
            }
            nodes[idx].first_child = nodes.len() as u32;
            nodes[idx].child_count = n.children.len() as u32;
            for c in n.children {
                nodes.push(VocNode {
                    centroid: c.centroid,
                    first_child: 0,
                    child_count: 0,
                    word: NO_WORD,
                });
                queue.push_back((nodes.len() - 1, c));
            }
        }
        Ok(Self {
            branching,
            depth,
            nodes,
            idf: vec![1.0; words as usize],
        })
    }

    /// Trains on the pooled descriptors and sets idf = ln(N / nᵢ) from the
    /// documents, where nᵢ counts documents containing word i.
    pub fn train_documents(
        docs: &[Vec<Descriptor>],
        branching: usize,
        depth: usize,
        seed: u64,
    ) -> Result<Self, LoopError> {
        let corpus: Vec<Descriptor> = docs.iter().flatten().copied().collect();
        let mut v = Self::train(&corpus, branching, depth, seed)?;
        v.set_idf(docs);
        Ok(v)
    }

    pub fn set_idf(&mut self, docs: &[Vec<Descriptor>]) {
        let mut df = vec![0usize; self.word_count()];
        for doc in docs {
            let mut seen: Vec<u32> = doc.iter().map(|d| self.transform(d)).collect();
            seen.sort_unstable();
            seen.dedup();
            for w in seen {
                df[w as usize] += 1;
            }
        }
        let n = docs.len().max(1) as f64;
        self.idf = df
            .iter()
            .map(|&c| if c == 0 { n.ln() } else { (n / c as f64).ln() })
            .collect();
    }

    pub fn word_count(&self) -> usize {
        self.idf.len()
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn idf(&self, word: u32) -> f64 {
        self.idf[word as usize]
    }

    /// Word id and the number of descents taken.
    pub fn transform_traced(&self, d: &Descriptor) -> (u32, usize) {
        let mut idx = 0usize;
        let mut steps = 0;
        loop {
            let n = &self.nodes[idx];
            if n.child_count == 0 {
                return (n.word, steps);
            }
            let first = n.first_child as usize;
            let kids: Vec<Descriptor> = self.nodes[first..first + n.child_count as usize]
                .iter()
                .map(|c| c.centroid)
                .collect();
            idx = first + nearest(&kids, d);
            steps += 1;
        }
    }

    pub fn transform(&self, d: &Descriptor) -> u32 {
        self.transform_traced(d).0
    }

    /// Word centroids indexed by word id.
    pub fn words(&self) -> Vec<Descriptor> {
        let mut out = vec![Descriptor([0; 4]); self.word_count()];
        for n in &self.nodes {
            if n.word != NO_WORD {
                out[n.word as usize] = n.centroid;
            }
        }
        out
    }

    pub fn bow(&self, descriptors: &[Descriptor]) -> BowVector {
        let mut tf: BTreeMap<u32, f64> = BTreeMap::new();
        for d in descriptors {
            *tf.entry(self.transform(d)).or_insert(0.0) += 1.0;
        }
        BowVector::normalized(tf.into_iter().map(|(w, c)| (w, c * self.idf(w))).collect())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), LoopError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(VOCAB_MAGIC);
        for v in [
            VOCAB_VERSION,
            self.branching as u32,
            self.depth as u32,
            self.nodes.len() as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for n in &self.nodes {
            buf.extend_from_slice(&n.first_child.to_le_bytes());
            buf.extend_from_slice(&n.child_count.to_le_bytes());
            buf.extend_from_slice(&n.word.to_le_bytes());
            buf.extend_from_slice(&n.centroid.to_bytes());
        }
        buf.extend_from_slice(&(self.idf.len() as u32).to_le_bytes());
        for w in &self.idf {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, LoopError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LoopError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], LoopError> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| LoopError::Format("truncated".into()))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != VOCAB_MAGIC {
            return Err(LoopError::Format("bad magic".into()));
        }
        let rd_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = rd_u32(take(4)?);
        if version != VOCAB_VERSION {
            return Err(LoopError::Format(format!("unsupported version {version}")));
        }
        let branching = rd_u32(take(4)?) as usize;
        let depth = rd_u32(take(4)?) as usize;
        let count = rd_u32(take(4)?) as usize;
        let mut nodes = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let first_child = rd_u32(take(4)?);
            let child_count = rd_u32(take(4)?);
            let word = rd_u32(take(4)?);
            let centroid = Descriptor::from_bytes(take(32)?.try_into().unwrap());
            nodes.push(VocNode {
                centroid,
                first_child,
                child_count,
                word,
            });
        }
        let words = rd_u32(take(4)?) as usize;
        let mut idf = Vec::with_capacity(words.min(1 << 24));
        for _ in 0..words {
            idf.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        if pos != bytes.len() {
            return Err(LoopError::Format("trailing bytes".into()));
        }
        let v = Self {
            branching,
            depth,
            nodes,
            idf,
        };
        v.check()?;
        Ok(v)
    }

    fn check(&self) -> Result<(), LoopError> {
        if self.nodes.is_empty() {
            return Err(LoopError::Format("empty node table".into()));
        }
        let mut seen = vec![false; self.idf.len()];
        for n in &self.nodes {
            if n.child_count == 0 {
                let w = n.word as usize;
                if w >= seen.len() || seen[w] {
                    return Err(LoopError::Format(format!("bad word id {}", n.word)));
                }
                seen[w] = true;
            } else if n.first_child as usize + n.child_count as usize > self.nodes.len() {
                return Err(LoopError::Format("child range out of bounds".into()));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(LoopError::Format("word ids are not dense".into()));
        }
        Ok(())
    }
}

/// Sparse tf-idf histogram, L1-normalized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BowVector(BTreeMap<u32, f64>);

impl BowVector {
    pub fn normalized(weights: BTreeMap<u32, f64>) -> Self {
        let total: f64 = weights.values().filter(|w| **w > 0.0).sum();
        if !(total > 0.0) {
            return Self::default();
        }
        Self(
            weights
                .into_iter()
                .filter(|(_, w)| *w > 0.0)
                .map(|(k, w)| (k, w / total))
                .collect(),
        )
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn entries(&self) -> &BTreeMap<u32, f64> {
        &self.0
    }

    /// `1 − ½‖a − b‖₁`; 0 when either side is empty.
    pub fn similarity(&self, other: &BowVector) -> f64 {
        if self.is_empty() || other.is_empty() {
            return 0.0;
        }
        let mut l1 = 0.0;
        let mut a = self.0.iter().peekable();
        let mut b = other.0.iter().peekable();
        loop {
            match (a.peek(), b.peek()) {
                (Some((ka, va)), Some((kb, vb))) => {
                    if ka == kb {
                        l1 += (*va - *vb).abs();
                        a.next();
                        b.next();
                    } else if ka < kb {
                        l1 += **va;
                        a.next();
                    } else {
                        l1 += **vb;
                        b.next();
                    }
                }
                (Some((_, va)), None) => {
                    l1 += **va;
                    a.next();
                }
                (None, Some((_, vb))) => {
                    l1 += **vb;
                    b.next();
                }
                (None, None) => break,
            }
        }
        (1.0 - 0.5 * l1).clamp(0.0, 1.0)
    }
}

/// Append-only store of keyframe vectors, indexed by keyframe id.
#[derive(Debug, Clone, Default)]
pub struct BowDatabase {
    entries: Vec<BowVector>,
}

impl BowDatabase {
    pub fn add(&mut self, bow: BowVector) -> usize {
        self.entries.push(bow);
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ids older than `current − gap` scoring at least `threshold`, best
    /// first (ties by lower id), at most `top_n`.
    pub fn query(
        &self,
        bow: &BowVector,
        current: usize,
        gap: usize,
        top_n: usize,
        threshold: f64,
    ) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .take_while(|(id, _)| id + gap < current)
            .map(|(id, e)| (id, bow.similarity(e)))
            .filter(|(_, s)| *s >= threshold)
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out.truncate(top_n);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopCandidate {
    pub query_id: usize,
    pub match_id: usize,
    pub similarity: f64,
    /// Maps candidate-frame coordinates into the query frame.
    pub relative: Se3Pose,
    pub inlier_count: usize,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyParams {
    pub min_inliers: usize,
    pub max_residual: f64,
    pub match_params: MatchParams,
    pub registration: RegistrationParams,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            min_inliers: 25,
            max_residual: 0.3,
            match_params: MatchParams::default(),
            registration: RegistrationParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    Registration(String),
    TooFewInliers(usize),
    ResidualTooLarge(f64),
}

/// Geometric check of a retrieved candidate.
pub fn verify(
    query: &[Feature],
    candidate: &[Feature],
    params: &VerifyParams,
) -> Result<(Se3Pose, usize, f64), Rejection> {
    let matches = match_features(candidate, query, &params.match_params);
    let a: Vec<Vec3> = matches
        .iter()
        .map(|m| candidate[m.index_prev].point3d)
        .collect();
    let b: Vec<Vec3> = matches
        .iter()
        .map(|m| query[m.index_curr].point3d)
        .collect();
    let s: Vec<f64> = matches.iter().map(|m| m.score).collect();
    let est = register_matched_with(&a, &b, &s, &params.registration)
        .map_err(|e| Rejection::Registration(e.to_string()))?;
    if est.inlier_count < params.min_inliers {
        return Err(Rejection::TooFewInliers(est.inlier_count));
    }
    if !(est.mean_residual < params.max_residual) {
        return Err(Rejection::ResidualTooLarge(est.mean_residual));
    }
    Ok((est.relative, est.inlier_count, est.mean_residual))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopParams {
    pub gap: usize,
    pub threshold: f64,
    pub top_n: usize,
    pub verify: VerifyParams,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            gap: 50,
            threshold: 0.15,
            top_n: 1,
            verify: VerifyParams::default(),
        }
    }
}

/// Retrieval plus verification over the stream of keyframes.
#[derive(Debug, Clone)]
pub struct LoopDetector {
    pub params: LoopParams,
    vocab: Vocabulary,
    db: BowDatabase,
    features: Vec<Vec<Feature>>,
    pub rejected: usize,
}

impl LoopDetector {
    pub fn new(vocab: Vocabulary, params: LoopParams) -> Self {
        Self {
            params,
            vocab,
            db: BowDatabase::default(),
            features: Vec::new(),
            rejected: 0,
        }
    }

    /// Queries with the new keyframe, verifies the best candidate, then
    /// stores the keyframe. Ids must be added densely from 0.
    pub fn process(&mut self, id: usize, features: &[Feature]) -> Option<LoopCandidate> {
        debug_assert_eq!(id, self.db.len());
        let descs: Vec<Descriptor> = features.iter().map(|f| f.descriptor).collect();
        let bow = self.vocab.bow(&descs);
        let hits = self.db.query(
            &bow,
            id,
            self.params.gap,
            self.params.top_n,
            self.params.threshold,
        );
        self.db.add(bow);
        self.features.push(features.to_vec());
        for (cand, sim) in hits {
            match verify(features, &self.features[cand], &self.params.verify) {
                Ok((relative, inliers, residual)) => {
                    return Some(LoopCandidate {
                        query_id: id,
                        match_id: cand,
                        similarity: sim,
                        relative,
                        inlier_count: inliers,
                        mean_residual: residual,
                    })
                }
                Err(r) => {
                    self.rejected += 1;
                    log::debug!("loop {id} -> {cand} rejected: {r:?}");
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn rd(rng: &mut ChaCha8Rng) -> Descriptor {
        Descriptor([rng.random(), rng.random(), rng.random(), rng.random()])
    }

    fn flip(d: &Descriptor, bits: usize, rng: &mut ChaCha8Rng) -> Descriptor {
        let mut d = *d;
        for _ in 0..bits {
            let i = rng.random_range(0..256);
            d.set_bit(i, !d.bit(i));
        }
        d
    }

    #[test]
    fn degenerate_clustering_gives_each_its_own_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus: Vec<Descriptor> = (0..8).map(|_| rd(&mut rng)).collect();
        let v = Vocabulary::train(&corpus, 8, 1, 7).unwrap();
        assert_eq!(v.word_count(), 8);
        let mut ids: Vec<u32> = corpus.iter().map(|d| v.transform(d)).collect();
        ids.sort();
        assert_eq!(ids, (0..8).collect::<Vec<u32>>());
    }

    #[test]
    fn two_clusters_give_their_majorities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Descriptor([0; 4]);
        let b = Descriptor([!0; 4]);
        let ca: Vec<Descriptor> = (0..40).map(|_| flip(&a, 10, &mut rng)).collect();
        let cb: Vec<Descriptor> = (0..40).map(|_| flip(&b, 10, &mut rng)).collect();
        let corpus: Vec<Descriptor> = ca.iter().chain(cb.iter()).copied().collect();
        let v = Vocabulary::train(&corpus, 2, 1, 3).unwrap();
        let mut words = v.words();
        let (ma, mb) = (majority(&ca), majority(&cb));
        words.sort_by_key(|d| d.count_ones());
        assert_eq!(words, vec![ma, mb]);
    }

    #[test]
    fn small_corpus_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus: Vec<Descriptor> = (0..99).map(|_| rd(&mut rng)).collect();
        assert!(matches!(
            Vocabulary::train(&corpus, 10, 2, 0),
            Err(LoopError::InsufficientCorpus {
                have: 99,
                need: 100
            })
        ));
    }

    #[test]
    fn vocabulary_is_deterministic_and_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corpus: Vec<Descriptor> = (0..3000).map(|_| rd(&mut rng)).collect();
        let v1 = Vocabulary::train(&corpus, 10, 3, 9).unwrap();
        let v2 = Vocabulary::train(&corpus, 10, 3, 9).unwrap();
        assert_eq!(v1, v2);
        let mut seen = vec![false; v1.word_count()];
        for d in &corpus {
            let (w, steps) = v1.transform_traced(d);
            assert!(steps <= 3);
            seen[w as usize] = true;
            assert_eq!(w, v1.transform(d));
        }
        assert!(v1.word_count() > 100);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let docs: Vec<Vec<Descriptor>> = (0..20)
            .map(|_| (0..30).map(|_| rd(&mut rng)).collect())
            .collect();
        let v = Vocabulary::train_documents(&docs, 4, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ivoc");
        v.write(&p).unwrap();
        assert_eq!(Vocabulary::read(&p).unwrap(), v);
        let bytes = std::fs::read(&p).unwrap();
        assert!(Vocabulary::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Vocabulary::decode(&bad).is_err());
    }

    fn bow(pairs: &[(u32, f64)]) -> BowVector {
        BowVector::normalized(pairs.iter().copied().collect())
    }

    #[test]
    fn similarity_examples() {
        let a = bow(&[(1, 2.0), (5, 1.0)]);
        let b = bow(&[(2, 1.0), (7, 3.0)]);
        assert!((a.similarity(&a) - 1.0).abs() < 1e-12);
        assert_eq!(a.similarity(&b), 0.0);
        let sum: f64 = a.entries().values().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn query_respects_gap_and_threshold() {
        let mut db = BowDatabase::default();
        let target = bow(&[(1, 1.0), (2, 1.0)]);
        for i in 0..60 {
            db.add(if i == 5 || i == 55 {
                target.clone()
            } else {
                bow(&[(100 + i, 1.0)])
            });
        }
        let hits = db.query(&target, 60, 50, 5, 0.15);
        assert_eq!(hits, vec![(5, 1.0)]);
        // 55 is within the gap even though it matches exactly
        assert!(db
            .query(&target, 60, 10, 5, 0.15)
            .iter()
            .all(|(id, _)| *id != 55));
        assert!(db.query(&bow(&[(999, 1.0)]), 60, 10, 5, 0.15).is_empty());
    }

    fn features_from(points: &[Vec3], descs: &[Descriptor]) -> Vec<Feature> {
        points
            .iter()
            .zip(descs)
            .map(|(p, d)| Feature {
                row: 0,
                col: 0,
                response: 1.0,
                descriptor: *d,
                point3d: *p,
            })
            .collect()
    }

    #[test]
    fn verify_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Vec3> = (0..60)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        let descs: Vec<Descriptor> = (0..60).map(|_| rd(&mut rng)).collect();
        let f = features_from(&pts, &descs);
        let (pose, inliers, res) = verify(&f, &f, &VerifyParams::default()).unwrap();
        assert!(pose.distance_to(&Se3Pose::identity()).0 < 1e-12);
        assert_eq!(inliers, 60);
        assert!(res < 1e-12);

        let other: Vec<Descriptor> = (0..60).map(|_| rd(&mut rng)).collect();
        assert!(verify(&f, &features_from(&pts, &other), &VerifyParams::default()).is_err());

        // the same place seen 1 m further along x
        let shift = Se3Pose::from_translation(Vec3::new(-1.0, 0.0, 0.0));
        let moved: Vec<Vec3> = pts.iter().map(|p| shift.transform_point(p)).collect();
        let q = features_from(&moved, &descs);
        let (pose, inliers, res) = verify(&q, &f, &VerifyParams::default()).unwrap();
        assert!((pose.inverse().translation() - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-9);
        // independent re-check of the acceptance rule
        let r: f64 = pts
            .iter()
            .zip(&moved)
            .map(|(a, b)| (pose.transform_point(a) - b).norm())
            .sum::<f64>()
            / 60.0;
        assert!(inliers >= 25 && r < 0.3 && res < 0.3);
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric(a in proptest::collection::btree_map(0u32..50, 0.01f64..5.0, 1..20),
                                   b in proptest::collection::btree_map(0u32..50, 0.01f64..5.0, 1..20)) {
            let va = BowVector::normalized(a);
            let vb = BowVector::normalized(b);
            prop_assert!((va.similarity(&vb) - vb.similarity(&va)).abs() < 1e-12);
            prop_assert!((va.similarity(&va) - 1.0).abs() < 1e-12);
            let s: f64 = va.entries().values().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
