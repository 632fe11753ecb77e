//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VMNF"  u32 version
//! u64 len, model spec (JSON, UTF-8)
//! u64 len, config echo (UTF-8)
//! u64 epoch
//! u8 has_rng [32-byte seed, u64 stream, u128 word position]
//! tensor log_prior
//! u64 count, count × (u32 name len, name, tensor)
//! tensor = u32 rank, rank × u64 dims, numel × f64
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::mixture::{MixtureModel, ModelSpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VMNF";
pub const VERSION: u32 = 1;

/// Everything restored from a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MixtureModel,
    pub config_echo: String,
    pub epoch: u64,
    pub rng: Option<Rng>,
}

/// Serialises `model` with its training state.
pub fn to_bytes(model: &MixtureModel, config_echo: &str, epoch: u64, rng: Option<&Rng>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec = serde_json::to_string(model.spec()).expect("model specs always serialise");
    put_block(&mut out, spec.as_bytes());
    put_block(&mut out, config_echo.as_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    match rng {
        Some(r) => {
            out.push(1);
            out.extend_from_slice(&r.get_seed());
            out.extend_from_slice(&r.get_stream().to_le_bytes());
            out.extend_from_slice(&r.get_word_pos().to_le_bytes());
        }
        None => out.push(0),
    }
    put_tensor(&mut out, &Tensor::vector(model.log_prior().to_vec()));
    let store = model.store();
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        put_tensor(&mut out, store.get(id));
    }
    out
}

pub fn save(path: &Path, model: &MixtureModel, config_echo: &str, epoch: u64, rng: Option<&Rng>) -> Result<()> {
    std::fs::write(path, to_bytes(model, config_echo, epoch, rng)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format { path: path.to_path_buf(), reason },
        other => other,
    })
}

fn put_block(out: &mut Vec<u8>, block: &[u8]) {
    out.extend_from_slice(&(block.len() as u64).to_le_bytes());
    out.extend_from_slice(block);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format { path: "<checkpoint>".into(), reason: reason.into() }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.bytes.len()).ok_or_else(|| bad(format!("length {n} exceeds file")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(bad(format!("tensor of rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape, data)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = r.len()?;
    let spec_json = r.string(n)?;
    let spec: ModelSpec = serde_json::from_str(&spec_json).map_err(|e| bad(format!("model spec: {e}")))?;
    let n = r.len()?;
    let config_echo = r.string(n)?;
    let epoch = r.u64()?;
    let rng = match r.take(1)?[0] {
        0 => None,
        1 => {
            let seed: [u8; 32] = r.array()?;
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.array()?);
            let mut rng = <Rng as rand::SeedableRng>::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            Some(rng)
        }
        f => return Err(bad(format!("bad rng flag {f}"))),
    };
    let log_prior = r.tensor()?;
    let mut model = MixtureModel::new(spec, 0).map_err(|e| bad(format!("model spec: {e}")))?;
    let count = r.len()?;
    if count != model.store().len() {
        return Err(bad(format!("{count} tensors, the model has {}", model.store().len())));
    }
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = r.string(n)?;
        let value = r.tensor()?;
        let id = model.store().id_of(&name).ok_or_else(|| bad(format!("unknown tensor `{name}`")))?;
        model.store_mut().set(id, value).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    model.set_log_prior(log_prior.into_data()).map_err(|e| bad(format!("log prior: {e}")))?;
    Ok(Checkpoint { model, config_echo, epoch, rng })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::LayerSpec;
    use crate::rng;
    use rand::RngCore;

    fn model() -> MixtureModel {
        let spec = ModelSpec { components: 2, dim: 2, flow: LayerSpec::realnvp(2, &[3]), posterior_hidden: vec![4] };
        MixtureModel::new(spec, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let mut r = rng::seeded(5);
        r.next_u64();
        let ck = from_bytes(&to_bytes(&m, "echo", 7, Some(&r))).unwrap();
        assert_eq!(ck.config_echo, "echo");
        assert_eq!(ck.epoch, 7);
        assert_eq!(ck.rng.unwrap().next_u64(), r.next_u64());
        for id in m.store().ids() {
            assert_eq!(m.store().get(id), ck.model.store().get(id));
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = to_bytes(&model(), "", 0, None);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        assert!(from_bytes(&[]).is_err());
    }
}
