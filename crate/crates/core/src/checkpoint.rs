//! Binary checkpoint archive: one file holding every named parameter
//! tensor (generator, both critics, optimizer slots) plus a JSON header
//! with the model configs and training counters. Values are stored as
//! little-endian f32 so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::optim::{OptimConfig, Optimizer};
use crate::nn::Param;

/// Bumped when the on-disk layout changes incompatibly.
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"LDCP";
/// Upper bound on the JSON header; anything bigger is a corrupt file.
const MAX_HEADER_BYTES: u64 = 1 << 24;

/// Everything needed to rebuild the models and continue training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub optimizer: OptimConfig,
    /// Completed optimizer steps for (generator, critic A, critic B).
    pub optim_steps: [u64; 3],
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct EntryDesc {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    entries: Vec<EntryDesc>,
}

/// An in-memory checkpoint: metadata plus ordered named tensors.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Writes the archive; the file is complete and self-describing.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            meta: self.meta.clone(),
            entries: self
                .tensors
                .iter()
                .map(|(name, t)| EntryDesc {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Structural(format!("checkpoint header serialization: {e}")))?;
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, tensor) in &self.tensors {
            for &v in tensor.iter() {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads and validates an archive written by [`Checkpoint::save`].
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| Error::io(path, e);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Structural(format!(
                "{} is not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != FORMAT_VERSION {
            return Err(Error::Structural(format!(
                "checkpoint format version {version} is not supported; this build reads version {FORMAT_VERSION}"
            )));
        }
        let json_len = r.read_u64::<LittleEndian>().map_err(io)?;
        if json_len > MAX_HEADER_BYTES {
            return Err(Error::Structural(format!(
                "checkpoint header claims {json_len} bytes; the file is corrupt"
            )));
        }
        let mut json = vec![0u8; json_len as usize];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Structural(format!("checkpoint header does not parse: {e}")))?;

        let mut tensors = Vec::with_capacity(header.entries.len());
        for entry in header.entries {
            let len: usize = entry.shape.iter().product();
            let mut values = vec![0.0f32; len];
            r.read_f32_into::<LittleEndian>(&mut values).map_err(io)?;
            let tensor = ArrayD::from_shape_vec(entry.shape.clone(), values).map_err(|_| {
                Error::Structural(format!("entry {} has inconsistent shape", entry.name))
            })?;
            tensors.push((entry.name, tensor));
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(io)? != 0 {
            return Err(Error::Structural(format!(
                "{} has trailing bytes after the last tensor",
                path.display()
            )));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }
}

/// Appends (name, value) snapshots of a parameter collection.
pub fn pack_params(named: &[(String, &Param)], out: &mut Vec<(String, ArrayD<f32>)>) {
    for (name, param) in named {
        out.push((name.clone(), param.value.clone()));
    }
}

/// Copies checkpoint entries back into a parameter collection; the names
/// and order must match how the collection reports itself.
pub fn unpack_params(ckpt: &Checkpoint, names: &[String], params: Vec<&mut Param>) -> Result<()> {
    if names.len() != params.len() {
        return Err(Error::Structural(format!(
            "parameter collection has {} entries but {} names were given",
            params.len(),
            names.len()
        )));
    }
    for (name, param) in names.iter().zip(params) {
        let stored = ckpt
            .get(name)
            .ok_or_else(|| Error::Structural(format!("checkpoint is missing entry {name}")))?;
        if stored.shape() != param.value.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("checkpoint entry {name}"),
                expected: param.value.shape().to_vec(),
                actual: stored.shape().to_vec(),
            });
        }
        param.value.assign(stored);
        param.grad.fill(0.0);
    }
    Ok(())
}

/// Appends an optimizer's slot tensors under `{prefix}.slot{i}`.
pub fn pack_optimizer(prefix: &str, opt: &Optimizer, out: &mut Vec<(String, ArrayD<f32>)>) {
    for (i, slot) in opt.slots().iter().enumerate() {
        out.push((format!("{prefix}.slot{i}"), slot.clone()));
    }
}

/// Restores an optimizer's slots and step counter from the archive.
pub fn unpack_optimizer(
    ckpt: &Checkpoint,
    prefix: &str,
    steps: u64,
    opt: &mut Optimizer,
) -> Result<()> {
    let mut slots = Vec::with_capacity(opt.slots().len());
    for i in 0..opt.slots().len() {
        let name = format!("{prefix}.slot{i}");
        let stored = ckpt
            .get(&name)
            .ok_or_else(|| Error::Structural(format!("checkpoint is missing entry {name}")))?;
        slots.push(stored.clone());
    }
    opt.restore(steps, slots)
}

/// Rebuilds a generator purely from a checkpoint (for inference paths).
pub fn load_generator(ckpt: &Checkpoint) -> Result<Generator> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut gen = Generator::new(ckpt.meta.generator, &mut rng)?;
    let names: Vec<String> = gen.named_params().into_iter().map(|(n, _)| n).collect();
    unpack_params(ckpt, &names, gen.params_mut())?;
    Ok(gen)
}
