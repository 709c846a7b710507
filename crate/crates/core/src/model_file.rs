//! The `LTMM` model container: one file holding the stretcher (mask
//! included), every program vector with its optional key, the usage
//! counters, the key classifier, and a full memory snapshot. Round trips
//! are bit-exact.

use std::path::Path;
use std::sync::Arc;

use crate::bank::ProgramBank;
use crate::error::{CoreError, Result};
use crate::keyclass::KeyClassifier;
use crate::numeric::{SparseLinear, SparseMask};
use crate::seqae::ParamLayout;
use crate::stretcher::{ProgramVector, StretcherParams, EMBED_WIDTH, HIDDEN};
use crate::vmem::VectorMemory;
use crate::wire::{check_count, Reader, Writer};

const MODEL_MAGIC: &[u8; 4] = b"LTMM";
const MODEL_VERSION: u16 = 1;

#[derive(Debug)]
pub struct ModelFile {
    pub bank: ProgramBank,
    pub classifier: Option<KeyClassifier>,
    pub memory: VectorMemory,
    pub window_len: usize,
    /// Seed the memory's index graph is rebuilt from on load.
    pub memory_seed: u64,
}

impl ModelFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC);
        w.u16(MODEL_VERSION);
        w.u32(self.bank.layout.d as u32);
        w.u32(self.bank.layout.h as u32);
        w.u32(self.bank.action_count as u32);
        w.u32(self.window_len as u32);
        w.u64(self.memory_seed);

        let sp = &self.bank.stretcher;
        w.u64(sp.p as u64);
        w.f64(sp.density);
        w.u64(sp.seed);
        w.f64_slice(&sp.w1);
        w.f64_slice(&sp.b1);
        w.f64_slice(&sp.w2);
        w.f64_slice(&sp.b2);
        w.f64_slice(&sp.w3);
        w.f64_slice(&sp.b3);
        w.u64(sp.w4.mask.entries.len() as u64);
        for &(r, c) in &sp.w4.mask.entries {
            w.u32(r);
            w.u32(c);
        }
        w.f64_slice(&sp.w4.weights);
        w.f64_slice(&sp.b4);

        w.u64(self.bank.programs.len() as u64);
        for p in &self.bank.programs {
            w.u64(p.id as u64);
            w.f64_slice(&p.embedding);
            match &p.key {
                Some(k) => {
                    w.u8(1);
                    w.f64_slice(k);
                }
                None => w.u8(0),
            }
        }

        w.u64(self.bank.usage.len() as u64);
        for ((label, program), count) in &self.bank.usage {
            w.u16(label.len() as u16);
            w.bytes(label.as_bytes());
            w.u64(*program as u64);
            w.u64(*count);
        }

        match &self.classifier {
            Some(clf) => {
                w.u8(1);
                w.u32(clf.d as u32);
                w.u64(clf.params.len() as u64);
                w.f64_slice(&clf.params);
            }
            None => w.u8(0),
        }

        let mem = self.memory.to_bytes();
        w.u64(mem.len() as u64);
        w.bytes(&mem);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "model file");
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(CoreError::Format {
                what: "model file",
                detail: format!("unsupported version {version}"),
            });
        }
        let d = r.u32()? as usize;
        let h = r.u32()? as usize;
        let action_count = r.u32()? as usize;
        let window_len = r.u32()? as usize;
        let memory_seed = r.u64()?;
        let layout = ParamLayout::new(d, h, h)?;

        let p = check_count("model file", r.u64()?, 1 << 32)?;
        if p != layout.total {
            return Err(CoreError::Format {
                what: "model file",
                detail: format!("stretcher emits {p} parameters; layout needs {}", layout.total),
            });
        }
        let density = r.f64()?;
        let seed = r.u64()?;
        let w1 = r.f64_vec(HIDDEN[0] * EMBED_WIDTH)?;
        let b1 = r.f64_vec(HIDDEN[0])?;
        let w2 = r.f64_vec(HIDDEN[1] * HIDDEN[0])?;
        let b2 = r.f64_vec(HIDDEN[1])?;
        let w3 = r.f64_vec(HIDDEN[2] * HIDDEN[1])?;
        let b3 = r.f64_vec(HIDDEN[2])?;
        let nnz = check_count("model file", r.u64()?, 1 << 32)?;
        let mut entries = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let row = r.u32()?;
            let col = r.u32()?;
            entries.push((row, col));
        }
        let mask = SparseMask::from_entries(p, HIDDEN[2], entries)?;
        let weights = r.f64_vec(nnz)?;
        let w4 = SparseLinear { mask: Arc::new(mask), weights };
        if w4.weights.len() != w4.mask.entries.len() {
            return Err(CoreError::Format {
                what: "model file",
                detail: "sparse weight count mismatch".into(),
            });
        }
        let b4 = r.f64_vec(p)?;
        let stretcher = StretcherParams { w1, b1, w2, b2, w3, b3, w4, b4, p, density, seed };

        let n_programs = check_count("model file", r.u64()?, 1 << 24)?;
        let mut programs = Vec::with_capacity(n_programs);
        for i in 0..n_programs {
            let id = r.u64()? as usize;
            if id != i {
                return Err(CoreError::Format {
                    what: "model file",
                    detail: format!("program id {id} at slot {i}"),
                });
            }
            let embedding = r.f64_vec(EMBED_WIDTH)?;
            let key = match r.u8()? {
                0 => None,
                1 => Some(r.f64_vec(EMBED_WIDTH)?),
                t => {
                    return Err(CoreError::Format {
                        what: "model file",
                        detail: format!("bad key flag {t}"),
                    })
                }
            };
            let mut pv = ProgramVector::new(id, embedding)?;
            pv.key = key;
            programs.push(pv);
        }

        let n_usage = check_count("model file", r.u64()?, 1 << 24)?;
        let mut usage = std::collections::BTreeMap::new();
        for _ in 0..n_usage {
            let len = r.u16()? as usize;
            let label = String::from_utf8(r.bytes(len)?.to_vec()).map_err(|e| {
                CoreError::Format { what: "model file", detail: format!("usage label: {e}") }
            })?;
            let program = r.u64()? as usize;
            let count = r.u64()?;
            usage.insert((label, program), count);
        }

        let classifier = match r.u8()? {
            0 => None,
            1 => {
                let cd = r.u32()? as usize;
                let n = check_count("model file", r.u64()?, 1 << 32)?;
                if n != KeyClassifier::param_count(cd) {
                    return Err(CoreError::Format {
                        what: "model file",
                        detail: format!(
                            "classifier has {n} parameters; width {cd} needs {}",
                            KeyClassifier::param_count(cd)
                        ),
                    });
                }
                Some(KeyClassifier { d: cd, params: r.f64_vec(n)? })
            }
            t => {
                return Err(CoreError::Format {
                    what: "model file",
                    detail: format!("bad classifier flag {t}"),
                })
            }
        };

        let mem_len = check_count("model file", r.u64()?, 1 << 40)?;
        let mem_bytes = r.bytes(mem_len)?.to_vec();
        let memory = VectorMemory::from_bytes(&mem_bytes, memory_seed)?;
        r.finish()?;

        let bank = ProgramBank { programs, stretcher, layout, action_count, usage };
        Ok(ModelFile { bank, classifier, memory, window_len, memory_seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
