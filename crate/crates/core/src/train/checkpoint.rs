//! Binary checkpoint: `DUCD`, u32 version, u32 config length, the config in
//! canonical text form, then one record per parameter until end of file:
//! u32 name length, name, u32 rank, u64 dims, f64 payload. All integers and
//! floats are little-endian. The stored config carries default paths, so a checkpoint
//! depends only on the model and training settings.

use std::fs;
use std::path::Path;

use super::config::TrainConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::DualUNet;
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"DUCD";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Checkpoint {
    pub fn from_model(config: &TrainConfig, model: &DualUNet) -> Self {
        let mut params = ParamStore::new();
        for (name, t) in model.params().iter() {
            let mut t = t.clone();
            t.zero_grad();
            params.insert(name, t).expect("names are unique");
        }
        // Paths describe where a run lived, not the model, and would make
        // otherwise identical checkpoints differ byte for byte.
        let defaults = TrainConfig::default();
        let config = TrainConfig {
            data_root: defaults.data_root,
            out_dir: defaults.out_dir,
            ..config.clone()
        };
        Checkpoint { config, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_text();
        let mut out = Vec::with_capacity(16 + text.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let config = TrainConfig::parse(text)?;
        let mut params = ParamStore::new();
        while !r.done() {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Checkpoint(format!("parameter `{name}` has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (bytes.len() - r.pos) / 8)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` overruns the file")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params
                .insert(&name, Tensor::new(&shape, data)?)
                .map_err(|_| Error::Checkpoint(format!("parameter `{name}` appears twice")))?;
        }
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network. Fails if a stored parameter is unknown to the
    /// configured architecture or one it needs is absent.
    pub fn into_model(self) -> Result<DualUNet> {
        let mut model = DualUNet::new(self.config.model.clone(), self.config.seed)?;
        model.load_params(self.params)?;
        Ok(model)
    }
}
