//! Stretcher hypernetwork: expands a 64-element program vector into the flat
//! parameter vector of one autoencoder through dense layers 64 -> 64 -> 128
//! -> 256 (tanh) and a final 1%-sparse linear layer 256 -> P. One stretcher
//! instance is shared by every program in a bank, so programs stay cheap and
//! the expansion itself is learned jointly.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::numeric::{NodeId, Shape, SparseLinear, SparseMask, Tape};

/// Width of program embeddings and keys.
pub const EMBED_WIDTH: usize = 64;
/// Hidden widths of the three dense layers.
pub const HIDDEN: [usize; 3] = [64, 128, 256];
/// Default connection density of the final sparse layer.
pub const DEFAULT_DENSITY: f64 = 0.01;

/// A program: dense id, 64-element embedding, optional retrieval key.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgramVector {
    pub id: usize,
    pub embedding: Vec<f64>,
    pub key: Option<Vec<f64>>,
}

impl ProgramVector {
    pub fn new(id: usize, embedding: Vec<f64>) -> Result<Self> {
        if embedding.len() != EMBED_WIDTH {
            return Err(CoreError::Invalid(format!(
                "embedding width {} != {EMBED_WIDTH}",
                embedding.len()
            )));
        }
        Ok(ProgramVector { id, embedding, key: None })
    }
}

/// Shared hypernetwork parameters. The sparse mask is fixed at init and
/// persisted with the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct StretcherParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
    pub w4: SparseLinear,
    pub b4: Vec<f64>,
    pub p: usize,
    pub density: f64,
    pub seed: u64,
}

impl StretcherParams {
    /// Named mutable views over every trainable block, for the optimizer.
    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 8] {
        [
            ("stretcher.w1", &mut self.w1),
            ("stretcher.b1", &mut self.b1),
            ("stretcher.w2", &mut self.w2),
            ("stretcher.b2", &mut self.b2),
            ("stretcher.w3", &mut self.w3),
            ("stretcher.b3", &mut self.b3),
            ("stretcher.w4", &mut self.w4.weights),
            ("stretcher.b4", &mut self.b4),
        ]
    }

    pub fn block_sizes(&self) -> [(&'static str, usize); 8] {
        [
            ("stretcher.w1", self.w1.len()),
            ("stretcher.b1", self.b1.len()),
            ("stretcher.w2", self.w2.len()),
            ("stretcher.b2", self.b2.len()),
            ("stretcher.w3", self.w3.len()),
            ("stretcher.b3", self.b3.len()),
            ("stretcher.w4", self.w4.weights.len()),
            ("stretcher.b4", self.b4.len()),
        ]
    }
}

pub(crate) fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Initializes a stretcher for autoencoders of `p` parameters. Dense weights
/// are fan-in-scaled uniform; sparse weights are scaled by
/// `1/sqrt(256 * density)`; biases start at zero. Reproducible from `seed`.
pub fn init_stretcher(seed: u64, p: usize, density: f64) -> Result<StretcherParams> {
    if p == 0 {
        return Err(CoreError::Invalid("P must be >= 1".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(CoreError::Invalid(format!("density {density} outside (0, 1]")));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w1 = fan_in_uniform(&mut rng, HIDDEN[0], EMBED_WIDTH);
    let w2 = fan_in_uniform(&mut rng, HIDDEN[1], HIDDEN[0]);
    let w3 = fan_in_uniform(&mut rng, HIDDEN[2], HIDDEN[1]);
    let mask = SparseMask::sample(p, HIDDEN[2], density, &mut rng)?;
    let bound = 1.0 / (HIDDEN[2] as f64 * density).sqrt();
    let weights = (0..mask.nnz()).map(|_| rng.gen_range(-bound..bound)).collect();
    let w4 = SparseLinear::new(mask, weights)?;
    Ok(StretcherParams {
        w1,
        b1: vec![0.0; HIDDEN[0]],
        w2,
        b2: vec![0.0; HIDDEN[1]],
        w3,
        b3: vec![0.0; HIDDEN[2]],
        w4,
        b4: vec![0.0; p],
        p,
        density,
        seed,
    })
}

/// One 64-element embedding drawn i.i.d. from N(0, 1).
pub fn sample_embedding(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..EMBED_WIDTH).map(|_| StandardNormal.sample(rng)).collect()
}

/// Seeded convenience wrapper around [`sample_embedding`].
pub fn sample_program(seed: u64) -> Vec<f64> {
    use rand::SeedableRng;
    sample_embedding(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn dense_tanh(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let cols = x.len();
    out.clear();
    for r in 0..b.len() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wk, xk) in row.iter().zip(x) {
            acc += wk * xk;
        }
        out.push(acc.tanh());
    }
}

/// Expands an embedding into a flat autoencoder parameter vector.
pub fn stretch(embedding: &[f64], sp: &StretcherParams) -> Result<Vec<f64>> {
    if embedding.len() != EMBED_WIDTH {
        return Err(CoreError::shape(
            "stretch",
            format!("embedding width {} != {EMBED_WIDTH}", embedding.len()),
        ));
    }
    let mut h1 = Vec::with_capacity(HIDDEN[0]);
    let mut h2 = Vec::with_capacity(HIDDEN[1]);
    let mut h3 = Vec::with_capacity(HIDDEN[2]);
    dense_tanh(&sp.w1, &sp.b1, embedding, &mut h1);
    dense_tanh(&sp.w2, &sp.b2, &h1, &mut h2);
    dense_tanh(&sp.w3, &sp.b3, &h2, &mut h3);
    let mut flat = vec![0.0; sp.p];
    sp.w4.apply(&h3, &mut flat);
    for (f, b) in flat.iter_mut().zip(&sp.b4) {
        *f += b;
    }
    Ok(flat)
}

/// Leaf nodes for every stretcher block on a tape.
#[derive(Clone, Debug)]
pub struct StretcherNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
    pub w4: NodeId,
    pub b4: NodeId,
    pub mask: Arc<SparseMask>,
}

pub fn stretcher_leaves(tape: &mut Tape, sp: &StretcherParams) -> Result<StretcherNodes> {
    Ok(StretcherNodes {
        w1: tape.leaf(sp.w1.clone(), Shape::matrix(HIDDEN[0], EMBED_WIDTH))?,
        b1: tape.leaf(sp.b1.clone(), Shape::vector(HIDDEN[0]))?,
        w2: tape.leaf(sp.w2.clone(), Shape::matrix(HIDDEN[1], HIDDEN[0]))?,
        b2: tape.leaf(sp.b2.clone(), Shape::vector(HIDDEN[1]))?,
        w3: tape.leaf(sp.w3.clone(), Shape::matrix(HIDDEN[2], HIDDEN[1]))?,
        b3: tape.leaf(sp.b3.clone(), Shape::vector(HIDDEN[2]))?,
        w4: tape.leaf(sp.w4.weights.clone(), Shape::vector(sp.w4.weights.len()))?,
        b4: tape.leaf(sp.b4.clone(), Shape::vector(sp.p))?,
        mask: sp.w4.mask.clone(),
    })
}

/// Stretch graph from an embedding node; returns the flat parameter node.
pub fn build_stretch(tape: &mut Tape, embedding: NodeId, sn: &StretcherNodes) -> Result<NodeId> {
    let z1 = tape.matvec(sn.w1, embedding)?;
    let z1 = tape.add(z1, sn.b1)?;
    let h1 = tape.tanh_node(z1);
    let z2 = tape.matvec(sn.w2, h1)?;
    let z2 = tape.add(z2, sn.b2)?;
    let h2 = tape.tanh_node(z2);
    let z3 = tape.matvec(sn.w3, h2)?;
    let z3 = tape.add(z3, sn.b3)?;
    let h3 = tape.tanh_node(z3);
    let lin = tape.sparse_apply(sn.w4, h3, sn.mask.clone())?;
    tape.add(lin, sn.b4)
}
