//! Typed, weighted concept graph: query-to-node mapping, k-hop
//! neighborhood gathering and PageRank.
//!
//! Neighborhood traversal treats every edge as undirected. PageRank follows
//! edge direction, with undirected edges contributing a link each way.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::types::{cosine, Embedding, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub relation: String,
    pub weight: f64,
    #[serde(default = "default_directed")]
    pub directed: bool,
}

fn default_directed() -> bool {
    true
}

/// Node as stored in a KG file. A missing embedding is computed at load from
/// the label and description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KgFile {
    pub schema_version: u32,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DanglingEdge {
    pub edge_index: usize,
    pub missing: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BadWeight {
    pub edge_index: usize,
    pub weight: f64,
}

/// Problems found while loading a KG file.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct KgValidationReport {
    pub duplicate_nodes: Vec<String>,
    pub dangling_references: Vec<DanglingEdge>,
    pub out_of_range_weights: Vec<BadWeight>,
    pub bad_embeddings: Vec<String>,
}

impl KgValidationReport {
    pub fn is_clean(&self) -> bool {
        self.duplicate_nodes.is_empty()
            && self.dangling_references.is_empty()
            && self.out_of_range_weights.is_empty()
            && self.bad_embeddings.is_empty()
    }
}

impl std::fmt::Display for KgValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        for id in &self.duplicate_nodes {
            parts.push(format!("duplicate node {id}"));
        }
        for d in &self.dangling_references {
            parts.push(format!("edge {} references unknown node {}", d.edge_index, d.missing));
        }
        for w in &self.out_of_range_weights {
            parts.push(format!("edge {} has weight {} outside [0,1]", w.edge_index, w.weight));
        }
        for id in &self.bad_embeddings {
            parts.push(format!("node {id} has an invalid embedding"));
        }
        write!(f, "{}", parts.join("; "))
    }
}

fn check_structure(
    node_ids: impl Iterator<Item = String>,
    edges: &[Edge],
) -> (KgValidationReport, HashMap<String, usize>) {
    let mut report = KgValidationReport::default();
    let mut index = HashMap::new();
    for (i, id) in node_ids.enumerate() {
        if index.contains_key(&id) {
            report.duplicate_nodes.push(id);
        } else {
            index.insert(id, i);
        }
    }
    for (i, e) in edges.iter().enumerate() {
        for end in [&e.src, &e.dst] {
            if !index.contains_key(end) {
                report.dangling_references.push(DanglingEdge {
                    edge_index: i,
                    missing: end.clone(),
                });
            }
        }
        if !(0.0..=1.0).contains(&e.weight) {
            report.out_of_range_weights.push(BadWeight {
                edge_index: i,
                weight: e.weight,
            });
        }
    }
    (report, index)
}

/// Validates a KG file without building it.
pub fn validate(file: &KgFile) -> KgValidationReport {
    let (mut report, _) = check_structure(file.nodes.iter().map(|n| n.id.clone()), &file.edges);
    for n in &file.nodes {
        if let Some(e) = &n.embedding {
            if e.iter().any(|v| !v.is_finite()) {
                report.bad_embeddings.push(n.id.clone());
            }
        }
    }
    report
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
    undirected: Vec<BTreeSet<usize>>,
    successors: Vec<BTreeSet<usize>>,
    pair_weights: HashMap<(usize, usize), f64>,
}

impl KnowledgeGraph {
    /// Builds a graph; nodes are stored sorted by id so that index order is
    /// lexicographic id order.
    pub fn new(mut nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        nodes.sort_by(|a, b| a.id.cmp(&b.id));
        let (report, index) = check_structure(nodes.iter().map(|n| n.id.clone()), &edges);
        if !report.is_clean() {
            return Err(Error::data(format!("invalid knowledge graph: {report}")));
        }
        if let Some(first) = nodes.first() {
            let dim = first.embedding.dim();
            if let Some(n) = nodes.iter().find(|n| n.embedding.dim() != dim) {
                return Err(Error::data(format!(
                    "node {} has dimension {}, expected {dim}",
                    n.id,
                    n.embedding.dim()
                )));
            }
        }
        let n = nodes.len();
        let mut undirected = vec![BTreeSet::new(); n];
        let mut successors = vec![BTreeSet::new(); n];
        let mut pair_weights: HashMap<(usize, usize), f64> = HashMap::new();
        for e in &edges {
            let (s, d) = (index[&e.src], index[&e.dst]);
            if s != d {
                undirected[s].insert(d);
                undirected[d].insert(s);
            }
            successors[s].insert(d);
            if !e.directed {
                successors[d].insert(s);
            }
            let key = (s.min(d), s.max(d));
            let w = pair_weights.entry(key).or_insert(0.0);
            *w = w.max(e.weight);
        }
        Ok(KnowledgeGraph {
            nodes,
            edges,
            index,
            undirected,
            successors,
            pair_weights,
        })
    }

    /// Loads a KG file, filling missing node embeddings from `encoder`.
    pub fn from_file(file: KgFile, encoder: Option<&dyn Encoder>) -> Result<Self> {
        let report = validate(&file);
        if !report.is_clean() {
            return Err(Error::data(format!("invalid knowledge graph: {report}")));
        }
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for rec in file.nodes {
            let embedding = match rec.embedding {
                Some(v) => Embedding::new(v)?,
                None => {
                    let enc = encoder.ok_or_else(|| {
                        Error::data(format!("node {} has no embedding and no encoder was given", rec.id))
                    })?;
                    let text = match &rec.description {
                        Some(d) => format!("{} {}", rec.label, d),
                        None => rec.label.clone(),
                    };
                    enc.encode(&text)?
                }
            };
            if let Some(enc) = encoder {
                if embedding.dim() != enc.dimension() {
                    return Err(Error::data(format!(
                        "node {} has dimension {}, encoder produces {}",
                        rec.id,
                        embedding.dim(),
                        enc.dimension()
                    )));
                }
            }
            nodes.push(Node {
                id: rec.id,
                label: rec.label,
                description: rec.description,
                embedding,
            });
        }
        KnowledgeGraph::new(nodes, file.edges)
    }

    pub fn from_json(json: &str, encoder: Option<&dyn Encoder>) -> Result<Self> {
        let file: KgFile = serde_json::from_str(json)?;
        Self::from_file(file, encoder)
    }

    pub fn to_file(&self) -> KgFile {
        KgFile {
            schema_version: SCHEMA_VERSION,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id.clone(),
                    label: n.label.clone(),
                    description: n.description.clone(),
                    embedding: Some(n.embedding.as_slice().to_vec()),
                })
                .collect(),
            edges: self.edges.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Ids adjacent to `id` ignoring direction, in id order.
    pub fn neighbors(&self, id: &str) -> Vec<&str> {
        match self.index.get(id) {
            Some(&i) => self.undirected[i]
                .iter()
                .map(|&j| self.nodes[j].id.as_str())
                .collect(),
            None => Vec::new(),
        }
    }

    /// Whether some edge (either direction) joins `a` and `b`.
    pub fn has_edge_between(&self, a: &str, b: &str) -> bool {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&i), Some(&j)) => self.pair_weights.contains_key(&(i.min(j), i.max(j))),
            _ => false,
        }
    }

    /// Largest weight among edges joining `a` and `b` in either direction,
    /// 0 when there is none.
    pub fn pair_weight(&self, a: &str, b: &str) -> f64 {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&i), Some(&j)) => self
                .pair_weights
                .get(&(i.min(j), i.max(j)))
                .copied()
                .unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn dimension(&self) -> Option<usize> {
        self.nodes.first().map(|n| n.embedding.dim())
    }

    /// Unweighted undirected hop distances from `sources`.
    pub fn distances_from<'a>(
        &self,
        sources: impl IntoIterator<Item = &'a str>,
    ) -> HashMap<String, usize> {
        let mut dist = vec![usize::MAX; self.nodes.len()];
        let mut queue = VecDeque::new();
        for s in sources {
            if let Some(&i) = self.index.get(s) {
                if dist[i] != 0 {
                    dist[i] = 0;
                    queue.push_back(i);
                }
            }
        }
        while let Some(i) = queue.pop_front() {
            for &j in &self.undirected[i] {
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        dist.into_iter()
            .enumerate()
            .filter(|(_, d)| *d != usize::MAX)
            .map(|(i, d)| (self.nodes[i].id.clone(), d))
            .collect()
    }

    /// All shortest undirected paths from `from` to `to`, lexicographically
    /// sorted and capped at `limit`.
    pub fn shortest_paths(&self, from: &str, to: &str, limit: usize) -> Result<Vec<Vec<String>>> {
        let (&s, &t) = match (self.index.get(from), self.index.get(to)) {
            (Some(s), Some(t)) => (s, t),
            (None, _) => return Err(Error::usage(format!("unknown node {from}"))),
            (_, None) => return Err(Error::usage(format!("unknown node {to}"))),
        };
        let mut dist = vec![usize::MAX; self.nodes.len()];
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(i) = queue.pop_front() {
            for &j in &self.undirected[i] {
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        if dist[t] == usize::MAX {
            return Ok(Vec::new());
        }
        // walk forward from `s` along strictly increasing distance towards `t`
        let to_target = {
            let mut d = vec![usize::MAX; self.nodes.len()];
            d[t] = 0;
            let mut q = VecDeque::from([t]);
            while let Some(i) = q.pop_front() {
                for &j in &self.undirected[i] {
                    if d[j] == usize::MAX {
                        d[j] = d[i] + 1;
                        q.push_back(j);
                    }
                }
            }
            d
        };
        let total = dist[t];
        let mut out = Vec::new();
        let mut stack = vec![s];
        self.enumerate_paths(&mut stack, t, total, &dist, &to_target, limit, &mut out);
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate_paths(
        &self,
        stack: &mut Vec<usize>,
        target: usize,
        total: usize,
        dist: &[usize],
        to_target: &[usize],
        limit: usize,
        out: &mut Vec<Vec<String>>,
    ) {
        if out.len() >= limit {
            return;
        }
        let cur = *stack.last().expect("non-empty path");
        if cur == target {
            out.push(stack.iter().map(|&i| self.nodes[i].id.clone()).collect());
            return;
        }
        for &j in &self.undirected[cur] {
            if dist[j] == dist[cur] + 1 && dist[j] + to_target[j] == total {
                stack.push(j);
                self.enumerate_paths(stack, target, total, dist, to_target, limit, out);
                stack.pop();
            }
        }
    }

    /// Checks that consecutive ids in `path` are joined by an edge.
    pub fn is_valid_path(&self, path: &[String]) -> bool {
        !path.is_empty()
            && path.iter().all(|id| self.contains(id))
            && path.windows(2).all(|w| self.has_edge_between(&w[0], &w[1]))
    }
}

/// Nodes whose embedding has cosine similarity strictly above `tau`.
pub fn map_query_to_nodes(
    query: &Embedding,
    kg: &KnowledgeGraph,
    tau: f64,
) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for node in kg.nodes() {
        if cosine(query, &node.embedding)?.value > tau {
            out.insert(node.id.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraversalResult {
    pub seed_nodes: BTreeSet<String>,
    /// `frontier_by_hop[i]` holds the nodes first reached at distance `i`.
    pub frontier_by_hop: Vec<BTreeSet<String>>,
    /// Shortest witness path from a seed to every reached node.
    pub paths: BTreeMap<String, Vec<String>>,
}

impl TraversalResult {
    pub fn reached(&self) -> impl Iterator<Item = &str> {
        self.frontier_by_hop.iter().flatten().map(String::as_str)
    }

    pub fn distance(&self, id: &str) -> Option<usize> {
        self.paths.get(id).map(|p| p.len() - 1)
    }
}

/// Breadth-first neighborhood expansion up to `hops` edges from `seeds`.
///
/// Among equally short witness paths the lexicographically smallest id
/// sequence is recorded.
pub fn k_hop(seeds: &BTreeSet<String>, kg: &KnowledgeGraph, hops: usize) -> Result<TraversalResult> {
    if let Some(bad) = seeds.iter().find(|s| !kg.contains(s)) {
        return Err(Error::usage(format!("seed {bad} is not a graph node")));
    }
    let mut paths: BTreeMap<String, Vec<String>> = seeds
        .iter()
        .map(|s| (s.clone(), vec![s.clone()]))
        .collect();
    let mut frontier_by_hop = vec![seeds.clone()];
    for _ in 0..hops {
        let prev = frontier_by_hop.last().expect("seed layer");
        let mut ordered: Vec<&String> = prev.iter().collect();
        ordered.sort_by(|a, b| paths[*a].cmp(&paths[*b]));
        let mut next = BTreeSet::new();
        let mut new_paths = Vec::new();
        for parent in ordered {
            for nb in kg.neighbors(parent) {
                if paths.contains_key(nb) || next.contains(nb) {
                    continue;
                }
                next.insert(nb.to_string());
                let mut p = paths[parent].clone();
                p.push(nb.to_string());
                new_paths.push((nb.to_string(), p));
            }
        }
        if next.is_empty() {
            break;
        }
        paths.extend(new_paths);
        frontier_by_hop.push(next);
    }
    Ok(TraversalResult {
        seed_nodes: seeds.clone(),
        frontier_by_hop,
        paths,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRank {
    pub scores: BTreeMap<String, f64>,
    pub iterations: usize,
    pub converged: bool,
    /// L1 change of the last iteration.
    pub residual: f64,
}

impl PageRank {
    pub fn score(&self, id: &str) -> f64 {
        self.scores.get(id).copied().unwrap_or(0.0)
    }
}

/// Power iteration for `PR(i) = (1-gamma)/N + gamma * sum_{j in In(i)} PR(j)/|Out(j)|`,
/// starting from the uniform distribution. Nodes without out-links spread
/// their mass uniformly over all nodes.
pub fn pagerank(kg: &KnowledgeGraph, gamma: f64, tolerance: f64, max_iter: usize) -> Result<PageRank> {
    if kg.is_empty() {
        return Err(Error::usage("pagerank of an empty graph"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::usage(format!("gamma must be in (0,1), got {gamma}")));
    }
    if !(tolerance > 0.0) || max_iter == 0 {
        return Err(Error::usage("tolerance and max_iter must be positive"));
    }
    let n = kg.len();
    let nf = n as f64;
    let teleport = (1.0 - gamma) / nf;
    let mut pr = vec![1.0 / nf; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let dangling: f64 = (0..n)
            .filter(|&j| kg.successors[j].is_empty())
            .map(|j| pr[j])
            .sum();
        next.iter_mut().for_each(|v| *v = teleport + gamma * dangling / nf);
        for (j, succ) in kg.successors.iter().enumerate() {
            if succ.is_empty() {
                continue;
            }
            let share = gamma * pr[j] / succ.len() as f64;
            for &i in succ {
                next[i] += share;
            }
        }
        residual = pr.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut pr, &mut next);
        if residual < tolerance {
            converged = true;
            break;
        }
    }
    Ok(PageRank {
        scores: kg
            .nodes
            .iter()
            .zip(pr)
            .map(|(node, s)| (node.id.clone(), s))
            .collect(),
        iterations,
        converged,
        residual,
    })
}
