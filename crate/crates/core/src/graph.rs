//! Bipartite query-ad click graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::normalize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Query,
    Ad,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Query => Side::Ad,
            Side::Ad => Side::Query,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Query => "query",
            Side::Ad => "ad",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Neighbor texts padded to a fixed number of slots.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct NeighborSample {
    pub neighbors: Vec<String>,
    pub mask: Vec<u8>,
}

impl NeighborSample {
    /// Real neighbors first, padded with empty slots up to `k`.
    pub fn from_texts<I, S>(texts: I, k: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut neighbors: Vec<String> = texts.into_iter().take(k).map(Into::into).collect();
        let mut mask = vec![1u8; neighbors.len()];
        neighbors.resize(k, String::new());
        mask.resize(k, 0);
        Self { neighbors, mask }
    }

    pub fn padding(k: usize) -> Self {
        Self { neighbors: vec![String::new(); k], mask: vec![0; k] }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn real(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().zip(&self.mask).filter(|(_, &m)| m == 1).map(|(n, _)| n.as_str())
    }
}

/// Immutable click graph `G = {Q, A, E}`.
///
/// Adjacency lists are kept sorted by descending click count, then by
/// neighbor text, which makes top-k sampling a prefix slice.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BehaviorGraph {
    queries: BTreeSet<String>,
    ads: BTreeSet<String>,
    edges: BTreeMap<(String, String), u64>,
    query_adj: BTreeMap<String, Vec<(String, u64)>>,
    ad_adj: BTreeMap<String, Vec<(String, u64)>>,
}

impl BehaviorGraph {
    /// Builds a graph from click edges, merging duplicates by summing counts.
    /// Extra isolated entities may be supplied for either side.
    pub fn from_parts<E, Q, A>(edges: E, extra_queries: Q, extra_ads: A) -> Result<Self>
    where
        E: IntoIterator<Item = (String, String, u64)>,
        Q: IntoIterator<Item = String>,
        A: IntoIterator<Item = String>,
    {
        let mut g = BehaviorGraph::default();
        for (q, a, count) in edges {
            if count == 0 {
                return Err(Error::Config("click counts must be positive".into()));
            }
            let (q, a) = (normalize(&q), normalize(&a));
            if q.is_empty() || a.is_empty() {
                return Err(Error::Config("entity text must be non-empty".into()));
            }
            g.queries.insert(q.clone());
            g.ads.insert(a.clone());
            *g.edges.entry((q, a)).or_default() += count;
        }
        g.queries.extend(extra_queries.into_iter().map(|q| normalize(&q)));
        g.ads.extend(extra_ads.into_iter().map(|a| normalize(&a)));
        for ((q, a), &c) in &g.edges {
            g.query_adj.entry(q.clone()).or_default().push((a.clone(), c));
            g.ad_adj.entry(a.clone()).or_default().push((q.clone(), c));
        }
        for list in g.query_adj.values_mut().chain(g.ad_adj.values_mut()) {
            list.sort_by(|x, y| y.1.cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        }
        Ok(g)
    }

    /// Parses `query<TAB>ad<TAB>count` lines. Blank lines are skipped.
    pub fn load_edges(reader: impl BufRead) -> Result<Self> {
        let mut edges = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            }
            let count: u64 = fields[2].trim().parse().map_err(|_| err(format!("count must be a positive integer, got {:?}", fields[2])))?;
            if count == 0 {
                return Err(err("count must be positive".into()));
            }
            let (q, a) = (normalize(fields[0]), normalize(fields[1]));
            if q.is_empty() || a.is_empty() {
                return Err(err("entity text must be non-empty".into()));
            }
            edges.push((q, a, count));
        }
        Self::from_parts(edges, Vec::new(), Vec::new())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for ((q, a), c) in &self.edges {
            out.push_str(&format!("{q}\t{a}\t{c}\n"));
        }
        out
    }

    pub fn queries(&self) -> &BTreeSet<String> {
        &self.queries
    }

    pub fn ads(&self) -> &BTreeSet<String> {
        &self.ads
    }

    pub fn edges(&self) -> &BTreeMap<(String, String), u64> {
        &self.edges
    }

    pub fn entities(&self, side: Side) -> &BTreeSet<String> {
        match side {
            Side::Query => &self.queries,
            Side::Ad => &self.ads,
        }
    }

    pub fn contains(&self, entity: &str, side: Side) -> bool {
        self.entities(side).contains(entity)
    }

    pub fn has_edge(&self, query: &str, ad: &str) -> bool {
        self.edges.contains_key(&(query.to_string(), ad.to_string()))
    }

    pub fn click_count(&self, query: &str, ad: &str) -> u64 {
        self.edges.get(&(query.to_string(), ad.to_string())).copied().unwrap_or(0)
    }

    /// Neighbors sorted by descending click count, then text.
    pub fn adjacency(&self, entity: &str, side: Side) -> &[(String, u64)] {
        let adj = match side {
            Side::Query => &self.query_adj,
            Side::Ad => &self.ad_adj,
        };
        adj.get(entity).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Top-k neighbors by click count, ties broken by neighbor text.
    pub fn sample_neighbors(&self, entity: &str, side: Side, k: usize) -> Result<NeighborSample> {
        let entity = normalize(entity);
        if !self.contains(&entity, side) && self.contains(&entity, side.other()) {
            return Err(Error::WrongSide { entity, expected: side.name(), found: side.other().name() });
        }
        Ok(NeighborSample::from_texts(self.adjacency(&entity, side).iter().map(|(n, _)| n.clone()), k))
    }

    /// Number of distinct neighbors; zero for absent entities.
    pub fn degree(&self, entity: &str, side: Side) -> usize {
        self.adjacency(&normalize(entity), side).len()
    }

    /// Seeded uniform sample, without replacement, of entities whose degree
    /// is at most `max_degree`. Returned in sorted order.
    pub fn long_tail_subset(&self, max_degree: usize, side: Side, rng_seed: u64, sample_size: usize) -> Vec<String> {
        let pool: Vec<&String> = self.entities(side).iter().filter(|e| self.adjacency(e, side).len() <= max_degree).collect();
        if pool.len() <= sample_size {
            return pool.into_iter().cloned().collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut picked: Vec<String> = index::sample(&mut rng, pool.len(), sample_size).into_iter().map(|i| pool[i].clone()).collect();
        picked.sort();
        picked
    }
}
