//! The encoder/projector/denoiser bundle, seeding helpers, and the on-disk
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DCRCKPT\0"
//! version  u32      1
//! meta_len u32      followed by meta_len bytes of JSON (CheckpointMeta)
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   rank u32, rank × u64 dims
//!   product(dims) × f64 values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::datasets::ImageDims;
use crate::diffusion::{Denoiser, DenoiserConfig};
use crate::encoder::{Encoder, EncoderConfig, Projector, ProjectorConfig};
use crate::error::{Error, Result};
use crate::nn::Module;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Independent ChaCha8 stream `tag` under `seed`.
pub fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Stream for one optimizer step of one stage.
pub fn step_rng(seed: u64, stage_tag: u64, step: u64) -> ChaCha8Rng {
    stream_rng(seed, (stage_tag << 40) | step)
}

pub mod tags {
    pub const ENCODER_INIT: u64 = 1;
    pub const PROJECTOR_INIT: u64 = 2;
    pub const DENOISER_INIT: u64 = 3;
    pub const REFERENCE_PROJECTOR_INIT: u64 = 4;
    pub const STAGE0: u64 = 10;
    pub const STAGE1: u64 = 11;
    pub const STAGE2: u64 = 12;
    pub const NAIVE: u64 = 13;
    pub const END_TO_END: u64 = 14;
    pub const EVAL: u64 = 20;
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub denoiser: DenoiserConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub projector: Projector,
    pub denoiser: Denoiser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub dims: ImageDims,
    pub diffusion_steps: usize,
    pub model: ModelConfig,
}

impl Model {
    /// Fresh parameters; each component draws from its own stream of `seed`.
    pub fn new(dims: ImageDims, diffusion_steps: usize, cfg: &ModelConfig, seed: u64) -> Self {
        let d = dims.len();
        let encoder = Encoder::new(d, &cfg.encoder, &mut stream_rng(seed, tags::ENCODER_INIT));
        let projector = Projector::new(cfg.encoder.d_z, &cfg.projector, &mut stream_rng(seed, tags::PROJECTOR_INIT));
        let denoiser = Denoiser::new(
            d,
            cfg.projector.d_c,
            diffusion_steps,
            &cfg.denoiser,
            &mut stream_rng(seed, tags::DENOISER_INIT),
        );
        Self {
            encoder,
            projector,
            denoiser,
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.params();
        out.extend(self.projector.params());
        out.extend(self.denoiser.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.params_mut();
        out.extend(self.projector.params_mut());
        out.extend(self.denoiser.params_mut());
        out
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            meta,
            tensors: self.params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    /// Rebuilds a model from a checkpoint, checking every tensor against the
    /// shapes implied by the stored configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        let mut model = Model::new(meta.dims, meta.diffusion_steps, &meta.model, 0);
        let expected: Vec<(String, Vec<usize>)> =
            model.params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != ckpt.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                ckpt.tensors.len()
            )));
        }
        for ((want_name, want_shape), (name, t)) in expected.iter().zip(&ckpt.tensors) {
            if want_name != name {
                return Err(Error::Checkpoint(format!("expected tensor `{want_name}`, found `{name}`")));
            }
            if want_shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, configuration implies {:?}",
                    t.shape(),
                    want_shape
                )));
            }
        }
        for (dst, (_, src)) in model.params_mut().into_iter().zip(&ckpt.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(model)
    }
}

/// Named tensors plus JSON metadata; see the module docs for the byte layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
