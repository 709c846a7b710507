//! Extendable content-addressable key-value vector memory.
//!
//! Reads are approximate nearest-neighbor under Euclidean distance through a
//! navigable small-world graph (max degree 24, construction beam 150, query
//! beam 224); `read_exact` is the brute-force oracle. A side table of exact
//! key bit patterns guarantees that querying a stored key always surfaces
//! that record. Deletion uses tombstones (still routable) and rebuilds the
//! graph once a quarter of its nodes are dead.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::wire::{check_count, Reader, Writer};

pub const KEY_WIDTH: usize = 64;
pub const MAX_DEGREE: usize = 24;
pub const EF_CONSTRUCTION: usize = 150;
pub const EF_SEARCH: usize = 224;
/// Rebuild the graph when this fraction of its nodes are tombstones.
pub const COMPACT_DEAD_FRACTION: f64 = 0.25;

const SNAPSHOT_MAGIC: &[u8; 4] = b"VMEM";
const SNAPSHOT_VERSION: u16 = 1;
const METRIC_EUCLIDEAN: u8 = 0;
const MAX_THOUGHT_WIDTH: u64 = 1 << 20;

/// Zero-pads a vector (typically a thought) out to key width.
pub fn pad_key(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() > KEY_WIDTH {
        return Err(CoreError::Invalid(format!("key source width {} > {KEY_WIDTH}", v.len())));
    }
    let mut key = v.to_vec();
    key.resize(KEY_WIDTH, 0.0);
    Ok(key)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// One experienced window: owning program, its thought, stream position.
    Episodic { program: u32, thought: Vec<f64>, position: u64 },
    /// A program vector's retrieval key lives at this record's key.
    Program { program: u32 },
    /// Successor thought of the window stored under this record's key.
    Consequent { next_thought: Vec<f64>, next_program: u32 },
}

impl Payload {
    pub fn tag(&self) -> u8 {
        match self {
            Payload::Episodic { .. } => 0,
            Payload::Program { .. } => 1,
            Payload::Consequent { .. } => 2,
        }
    }

    fn encode(&self, w: &mut Writer) {
        w.u8(self.tag());
        match self {
            Payload::Episodic { program, thought, position } => {
                w.u32(*program);
                w.u64(*position);
                w.u32(thought.len() as u32);
                w.f64_slice(thought);
            }
            Payload::Program { program } => w.u32(*program),
            Payload::Consequent { next_thought, next_program } => {
                w.u32(*next_program);
                w.u32(next_thought.len() as u32);
                w.f64_slice(next_thought);
            }
        }
    }

    fn decode(r: &mut Reader) -> Result<Payload> {
        match r.u8()? {
            0 => {
                let program = r.u32()?;
                let position = r.u64()?;
                let n = check_count("memory snapshot", r.u32()? as u64, MAX_THOUGHT_WIDTH)?;
                Ok(Payload::Episodic { program, position, thought: r.f64_vec(n)? })
            }
            1 => Ok(Payload::Program { program: r.u32()? }),
            2 => {
                let next_program = r.u32()?;
                let n = check_count("memory snapshot", r.u32()? as u64, MAX_THOUGHT_WIDTH)?;
                Ok(Payload::Consequent { next_program, next_thought: r.f64_vec(n)? })
            }
            t => Err(CoreError::Format {
                what: "memory snapshot",
                detail: format!("unknown payload tag {t}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRecord {
    pub id: u64,
    pub key: Vec<f64>,
    pub payload: Payload,
    /// Logical insertion time (monotone per memory instance).
    pub timestamp: u64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Heap entry ordered by (distance, node index) so ties are deterministic.
#[derive(PartialEq)]
struct HeapItem {
    d2: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .partial_cmp(&other.d2)
            .unwrap_or(Ordering::Equal)
            .then(self.node.cmp(&other.node))
    }
}

#[derive(Clone, Debug)]
struct GraphNode {
    record: u64,
    key: Vec<f64>,
    /// Neighbor node indices per level, level 0 first.
    neighbors: Vec<Vec<usize>>,
    dead: bool,
}

#[derive(Clone, Debug)]
struct Graph {
    nodes: Vec<GraphNode>,
    entry: Option<usize>,
    max_level: usize,
    dead: usize,
    rng: ChaCha8Rng,
}

impl Graph {
    fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            entry: None,
            max_level: 0,
            dead: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn assign_level(&mut self) -> usize {
        let u: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        (-u.ln() / (MAX_DEGREE as f64).ln()) as usize
    }

    /// Greedy walk toward `query` within one level. Tombstones still route.
    fn greedy(&self, query: &[f64], mut cur: usize, level: usize) -> usize {
        let mut best = dist2(query, &self.nodes[cur].key);
        loop {
            let mut improved = false;
            for &nb in self.nodes[cur].neighbors.get(level).map_or(&[][..], |v| v) {
                let d = dist2(query, &self.nodes[nb].key);
                if d < best {
                    best = d;
                    cur = nb;
                    improved = true;
                }
            }
            if !improved {
                return cur;
            }
        }
    }

    /// Beam search within one level; returns up to `ef` nodes sorted by
    /// (distance, node index), tombstones included.
    fn search_layer(&self, query: &[f64], entry: usize, ef: usize, level: usize) -> Vec<(f64, usize)> {
        let mut visited = HashSet::with_capacity(4 * ef);
        visited.insert(entry);
        let d0 = dist2(query, &self.nodes[entry].key);
        let mut candidates = BinaryHeap::new(); // min-heap via Reverse
        candidates.push(std::cmp::Reverse(HeapItem { d2: d0, node: entry }));
        let mut found = BinaryHeap::new(); // max-heap, keeps best ef
        found.push(HeapItem { d2: d0, node: entry });

        while let Some(std::cmp::Reverse(cand)) = candidates.pop() {
            let worst = found.peek().map_or(f64::INFINITY, |w| w.d2);
            if cand.d2 > worst && found.len() >= ef {
                break;
            }
            for &nb in self.nodes[cand.node].neighbors.get(level).map_or(&[][..], |v| v) {
                if !visited.insert(nb) {
                    continue;
                }
                let d = dist2(query, &self.nodes[nb].key);
                let worst = found.peek().map_or(f64::INFINITY, |w| w.d2);
                if found.len() < ef || d < worst {
                    candidates.push(std::cmp::Reverse(HeapItem { d2: d, node: nb }));
                    found.push(HeapItem { d2: d, node: nb });
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        let mut out: Vec<(f64, usize)> = found.into_iter().map(|h| (h.d2, h.node)).collect();
        out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        out
    }

    /// Pick up to `m` diverse neighbors from `cands` (sorted by distance to
    /// the owner): a candidate is kept only when it is closer to the owner
    /// than to every neighbor already kept, so links fan out across
    /// directions instead of piling into one tight cluster. Skipped
    /// candidates backfill any remaining slots.
    fn select_diverse(&self, cands: &[(f64, usize)], m: usize) -> Vec<usize> {
        let mut kept: Vec<usize> = Vec::with_capacity(m);
        for &(d_own, c) in cands {
            if kept.len() >= m {
                break;
            }
            if kept.iter().all(|&k| dist2(&self.nodes[c].key, &self.nodes[k].key) > d_own) {
                kept.push(c);
            }
        }
        if kept.len() < m {
            for &(_, c) in cands {
                if kept.len() >= m {
                    break;
                }
                if !kept.contains(&c) {
                    kept.push(c);
                }
            }
        }
        kept
    }

    fn link(&mut self, from: usize, to: usize, level: usize) {
        let list = &mut self.nodes[from].neighbors[level];
        if list.contains(&to) {
            return;
        }
        list.push(to);
        if list.len() > MAX_DEGREE {
            let own = self.nodes[from].key.clone();
            let mut scored: Vec<(f64, usize)> = self.nodes[from].neighbors[level]
                .iter()
                .map(|&n| (dist2(&own, &self.nodes[n].key), n))
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
            self.nodes[from].neighbors[level] = self.select_diverse(&scored, MAX_DEGREE);
        }
    }

    fn insert(&mut self, record: u64, key: Vec<f64>) {
        let level = self.assign_level();
        let idx = self.nodes.len();
        self.nodes.push(GraphNode {
            record,
            key,
            neighbors: vec![Vec::new(); level + 1],
            dead: false,
        });
        let Some(entry) = self.entry else {
            self.entry = Some(idx);
            self.max_level = level;
            return;
        };

        let key = self.nodes[idx].key.clone();
        let mut cur = entry;
        if self.max_level > level {
            for l in (level + 1..=self.max_level).rev() {
                cur = self.greedy(&key, cur, l);
            }
        }
        for l in (0..=level.min(self.max_level)).rev() {
            let cands = self.search_layer(&key, cur, EF_CONSTRUCTION, l);
            cur = cands[0].1;
            for nb in self.select_diverse(&cands, MAX_DEGREE) {
                self.link(idx, nb, l);
                self.link(nb, idx, l);
            }
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = Some(idx);
        }
    }

    /// Up to `k` live records nearest to `query` as (squared distance, record id).
    fn search(&self, query: &[f64], k: usize, ef: usize) -> Vec<(f64, u64)> {
        let Some(entry) = self.entry else {
            return Vec::new();
        };
        let mut cur = entry;
        for l in (1..=self.max_level).rev() {
            cur = self.greedy(query, cur, l);
        }
        // Over-fetch so tombstones cannot crowd out live results.
        let beam = ef.max(k) + self.dead.min(ef);
        self.search_layer(query, cur, beam, 0)
            .into_iter()
            .filter(|&(_, n)| !self.nodes[n].dead)
            .take(k)
            .map(|(d2, n)| (d2, self.nodes[n].record))
            .collect()
    }

    fn mark_dead(&mut self, idx: usize) {
        if !self.nodes[idx].dead {
            self.nodes[idx].dead = true;
            self.dead += 1;
        }
    }
}

#[derive(Clone, Debug)]
pub struct VectorMemory {
    records: BTreeMap<u64, MemoryRecord>,
    /// Exact key bit-patterns -> record ids, for the exact-key guarantee.
    exact: HashMap<Vec<u64>, Vec<u64>>,
    graph: Graph,
    node_of: HashMap<u64, usize>,
    next_id: u64,
    clock: u64,
    seed: u64,
}

fn key_bits(key: &[f64]) -> Vec<u64> {
    key.iter().map(|v| v.to_bits()).collect()
}

impl VectorMemory {
    pub fn new(seed: u64) -> Self {
        VectorMemory {
            records: BTreeMap::new(),
            exact: HashMap::new(),
            graph: Graph::new(seed),
            node_of: HashMap::new(),
            next_id: 0,
            clock: 0,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryRecord> {
        self.records.values()
    }

    pub fn get(&self, id: u64) -> Option<&MemoryRecord> {
        self.records.get(&id)
    }

    fn check_key(key: &[f64]) -> Result<()> {
        if key.len() != KEY_WIDTH {
            return Err(CoreError::Invalid(format!("key width {} != {KEY_WIDTH}", key.len())));
        }
        if key.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid("non-finite key".into()));
        }
        Ok(())
    }

    /// Stores a record; returns its id. Duplicate keys are allowed.
    pub fn write(&mut self, key: Vec<f64>, payload: Payload) -> Result<u64> {
        Self::check_key(&key)?;
        let id = self.next_id;
        let timestamp = self.clock;
        self.next_id += 1;
        self.clock += 1;
        self.graph.insert(id, key.clone());
        self.node_of.insert(id, self.graph.nodes.len() - 1);
        self.exact.entry(key_bits(&key)).or_default().push(id);
        self.records.insert(id, MemoryRecord { id, key, payload, timestamp });
        Ok(id)
    }

    /// Approximate top-k by ascending Euclidean distance (ties by id). A
    /// query equal to a stored key always includes that record.
    pub fn read(&self, key: &[f64], k: usize) -> Result<Vec<(f64, &MemoryRecord)>> {
        Self::check_key(key)?;
        if k == 0 {
            return Err(CoreError::Invalid("k must be >= 1".into()));
        }
        if self.records.is_empty() {
            return Ok(Vec::new());
        }
        let mut hits: BTreeMap<u64, f64> = BTreeMap::new();
        if let Some(ids) = self.exact.get(&key_bits(key)) {
            for &id in ids {
                hits.insert(id, 0.0);
            }
        }
        for (d2, id) in self.graph.search(key, k, EF_SEARCH) {
            hits.entry(id).or_insert(d2);
        }
        let mut scored: Vec<(f64, u64)> = hits.into_iter().map(|(id, d2)| (d2, id)).collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(d2, id)| (d2.sqrt(), &self.records[&id]))
            .collect())
    }

    /// Exact top-k by brute force; the oracle for recall measurements.
    pub fn read_exact(&self, key: &[f64], k: usize) -> Result<Vec<(f64, &MemoryRecord)>> {
        Self::check_key(key)?;
        if k == 0 {
            return Err(CoreError::Invalid("k must be >= 1".into()));
        }
        let mut scored: Vec<(f64, u64)> =
            self.records.values().map(|r| (dist2(key, &r.key), r.id)).collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(d2, id)| (d2.sqrt(), &self.records[&id]))
            .collect())
    }

    /// Top-k among records whose payload passes `pred`, widening the beam
    /// until enough matches are found (falling back to the exact scan), so a
    /// filter over a rare payload kind still sees the whole store.
    pub fn read_filtered<F>(&self, key: &[f64], k: usize, pred: F) -> Result<Vec<(f64, &MemoryRecord)>>
    where
        F: Fn(&Payload) -> bool,
    {
        Self::check_key(key)?;
        if k == 0 {
            return Err(CoreError::Invalid("k must be >= 1".into()));
        }
        let live = self.records.len();
        if live == 0 {
            return Ok(Vec::new());
        }
        let mut fetch = (4 * k).max(16);
        loop {
            if fetch >= live {
                let hits: Vec<_> = self
                    .read_exact(key, live)?
                    .into_iter()
                    .filter(|(_, r)| pred(&r.payload))
                    .take(k)
                    .collect();
                return Ok(hits);
            }
            let hits: Vec<_> = self
                .read(key, fetch)?
                .into_iter()
                .filter(|(_, r)| pred(&r.payload))
                .collect();
            if hits.len() >= k {
                return Ok(hits.into_iter().take(k).collect());
            }
            fetch *= 2;
        }
    }

    /// Removes a record; `false` if the id is unknown. Idempotent.
    pub fn delete(&mut self, id: u64) -> bool {
        let Some(record) = self.records.remove(&id) else {
            return false;
        };
        let bits = key_bits(&record.key);
        if let Some(ids) = self.exact.get_mut(&bits) {
            ids.retain(|&x| x != id);
            if ids.is_empty() {
                self.exact.remove(&bits);
            }
        }
        if let Some(node) = self.node_of.remove(&id) {
            self.graph.mark_dead(node);
        }
        if !self.graph.nodes.is_empty()
            && self.graph.dead as f64 >= COMPACT_DEAD_FRACTION * self.graph.nodes.len() as f64
        {
            self.rebuild();
        }
        true
    }

    fn rebuild(&mut self) {
        self.graph = Graph::new(self.seed);
        self.node_of.clear();
        for (&id, record) in &self.records {
            self.graph.insert(id, record.key.clone());
            self.node_of.insert(id, self.graph.nodes.len() - 1);
        }
    }

    /// Serializes every record (not the graph; it is rebuilt on load).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(SNAPSHOT_MAGIC);
        w.u16(SNAPSHOT_VERSION);
        w.u8(METRIC_EUCLIDEAN);
        w.u64(self.records.len() as u64);
        for record in self.records.values() {
            w.u64(record.id);
            w.f64_slice(&record.key);
            record.payload.encode(&mut w);
            w.u64(record.timestamp);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8], seed: u64) -> Result<Self> {
        let mut r = Reader::new(bytes, "memory snapshot");
        let mem = Self::from_reader(&mut r, seed)?;
        r.finish()?;
        Ok(mem)
    }

    /// Parses a snapshot from a reader positioned at its magic (allows
    /// embedding inside the model container).
    pub fn from_reader(r: &mut Reader, seed: u64) -> Result<Self> {
        r.expect_magic(SNAPSHOT_MAGIC)?;
        let version = r.u16()?;
        if version != SNAPSHOT_VERSION {
            return Err(CoreError::Format {
                what: "memory snapshot",
                detail: format!("unsupported version {version}"),
            });
        }
        let metric = r.u8()?;
        if metric != METRIC_EUCLIDEAN {
            return Err(CoreError::Format {
                what: "memory snapshot",
                detail: format!("unknown metric tag {metric}"),
            });
        }
        let count = check_count("memory snapshot", r.u64()?, 1 << 32)?;
        let mut mem = VectorMemory::new(seed);
        for _ in 0..count {
            let id = r.u64()?;
            let key = r.f64_vec(KEY_WIDTH)?;
            let payload = Payload::decode(r)?;
            let timestamp = r.u64()?;
            if mem.records.contains_key(&id) {
                return Err(CoreError::Format {
                    what: "memory snapshot",
                    detail: format!("duplicate record id {id}"),
                });
            }
            mem.graph.insert(id, key.clone());
            mem.node_of.insert(id, mem.graph.nodes.len() - 1);
            mem.exact.entry(key_bits(&key)).or_default().push(id);
            mem.records.insert(id, MemoryRecord { id, key, payload, timestamp });
            mem.next_id = mem.next_id.max(id + 1);
            mem.clock = mem.clock.max(timestamp + 1);
        }
        Ok(mem)
    }

    /// Test/debug invariant: store, exact table, and graph agree on membership.
    pub fn check_coherence(&self) -> Result<()> {
        let live = self.graph.nodes.iter().filter(|n| !n.dead).count();
        let exact_total: usize = self.exact.values().map(|v| v.len()).sum();
        if live != self.records.len() || exact_total != self.records.len() {
            return Err(CoreError::Invalid(format!(
                "memory incoherent: {} records, {live} live nodes, {exact_total} exact entries",
                self.records.len()
            )));
        }
        for (&id, _) in &self.records {
            let Some(&node) = self.node_of.get(&id) else {
                return Err(CoreError::Invalid(format!("record {id} missing from graph")));
            };
            if self.graph.nodes[node].record != id || self.graph.nodes[node].dead {
                return Err(CoreError::Invalid(format!("record {id} mis-indexed")));
            }
        }
        Ok(())
    }
}
