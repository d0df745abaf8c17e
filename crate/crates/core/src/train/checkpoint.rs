//! Binary checkpoints: parameters, optimizer moments, RNG state, config hash, epoch.
//!
//! Layout (little-endian): magic `SCKDCKPT`, u32 version, u8 kind length + kind,
//! u64 epoch, 32-byte config hash, RNG (32-byte seed, u64 stream, u128 word
//! position), u64 optimizer step, then three tensor tables (parameters, first
//! moments, second moments). A table is a u32 count followed by entries of
//! u32 name length, name bytes, u32 rank, u64 dims, f64 values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{AdamW, OptimizerSpec};
use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SCKDCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `teacher` or `student`.
    pub kind: String,
    pub epoch: u64,
    pub config_hash: [u8; 32],
    pub rng: RngState,
    pub params: ParamStore,
    pub optimizer_step: u64,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn optimizer(&self, spec: OptimizerSpec) -> AdamW {
        AdamW {
            spec,
            step: self.optimizer_step,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.len() as u8);
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.optimizer_step.to_le_bytes());
        write_table(&mut out, self.params.iter());
        write_table(&mut out, self.adam_m.iter());
        write_table(&mut out, self.adam_v.iter());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        ensure_parse(
            magic == CHECKPOINT_MAGIC,
            0,
            "magic",
            "not a checkpoint file",
        )?;
        let at = r.pos;
        let version = r.u32("version")?;
        ensure_parse(
            version == VERSION,
            at,
            "version",
            &format!("unsupported version {version}"),
        )?;
        let kind_len = r.take(1, "kind length")?[0] as usize;
        let at = r.pos;
        let kind = String::from_utf8(r.take(kind_len, "kind")?.to_vec())
            .map_err(|_| parse_err(at, "kind", "not UTF-8"))?;
        let epoch = r.u64("epoch")?;
        let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng word position")?.try_into().unwrap());
        let optimizer_step = r.u64("optimizer step")?;
        let params = read_table(&mut r)?;
        let adam_m = read_table(&mut r)?;
        let adam_v = read_table(&mut r)?;
        ensure_parse(r.pos == bytes.len(), r.pos, "trailer", "trailing bytes")?;
        let mut store = ParamStore::new();
        for (k, t) in params {
            store.insert(k, t);
        }
        Ok(Self {
            kind,
            epoch,
            config_hash,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params: store,
            optimizer_step,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(format!("reading {}", path.display()), e)
            }
        })?;
        Self::from_bytes(&bytes)
    }

    /// Fail unless the checkpoint was produced for `kind` under config hash `hash`.
    pub fn check(&self, kind: &str, hash: &[u8; 32]) -> Result<()> {
        ensure!(
            self.kind == kind,
            Config,
            "expected a {kind} checkpoint, found {}",
            self.kind
        );
        ensure!(
            &self.config_hash == hash,
            Config,
            "{kind} checkpoint was produced with a different model configuration"
        );
        Ok(())
    }
}

fn write_table<'a>(out: &mut Vec<u8>, items: impl Iterator<Item = (&'a String, &'a Tensor)>) {
    let items: Vec<_> = items.collect();
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_table(r: &mut Reader) -> Result<BTreeMap<String, Tensor>> {
    let count = r.u32("table count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let at = r.pos;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| parse_err(at, "name", "not UTF-8"))?;
        let rank = r.u32("rank")? as usize;
        ensure_parse(rank <= 8, r.pos, "rank", "rank above 8")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dim")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let at = r.pos;
        let n = n.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()));
        let n = n.ok_or_else(|| parse_err(at, "values", "tensor larger than file"))?;
        let data = r
            .take(n * 8, "values")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let at = r.pos;
        ensure_parse(
            out.insert(name.clone(), Tensor::new(shape, data)?)
                .is_none(),
            at,
            "name",
            &format!("duplicate tensor `{name}`"),
        )?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(parse_err(self.pos, field, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

fn parse_err(offset: usize, field: &'static str, message: &str) -> Error {
    Error::Parse {
        offset: offset as u64,
        field,
        message: message.to_string(),
    }
}

fn ensure_parse(cond: bool, offset: usize, field: &'static str, message: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(parse_err(offset, field, message))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn bitwise_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let mut params = ParamStore::new();
        params.insert(
            "a.w",
            Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
        );
        params.insert("a.b", Tensor::zeros(&[0]));
        let mut m = BTreeMap::new();
        m.insert("a.w".to_string(), Tensor::full(&[2, 2], 1e-300));
        let ck = Checkpoint {
            kind: "teacher".into(),
            epoch: 7,
            config_hash: [3; 32],
            rng: RngState::capture(&rng),
            params,
            optimizer_step: 11,
            adam_m: m.clone(),
            adam_v: m,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, ck);
        assert_eq!(back.rng.restore().next_u64(), rng.next_u64());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
