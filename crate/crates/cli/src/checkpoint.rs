//! Bit-exact training checkpoints.
//!
//! Layout (all integers little-endian): magic `UKEP`, u32 format version,
//! u32-length-prefixed UTF-8 config text, u64 next epoch, u64 optimizer
//! step count, RNG state (32-byte seed, u128 word position, u64 stream),
//! then a u32 tensor count followed by repeated records of
//! `(u32 name length, name, u8 dtype code, u8 rank, u64 dims...,
//! little-endian payload)`. Parameters are f32 under their own names;
//! optimizer moments are f64 under `<name>.m` / `<name>.v`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ukanep_core::error::{Error, Result};
use ukanep_core::model::Model;
use ukanep_core::param::Visit;
use ukanep_core::tensor::Tensor;

use crate::config::TrainConfig;
use crate::optim::{AdamW, Moments};

const MAGIC: [u8; 4] = *b"UKEP";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Everything needed to continue training exactly where it stopped.
pub struct TrainState {
    pub config: TrainConfig,
    /// Next epoch to run; equals `config.epochs` when training finished.
    pub epoch: usize,
    pub model: Model<f32>,
    pub optimizer: AdamW,
    /// Data-order stream (epoch shuffles), positioned mid-stream.
    pub rng: ChaCha8Rng,
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    let config = state.config.to_text();
    out.extend((config.len() as u32).to_le_bytes());
    out.extend(config.as_bytes());
    out.extend((state.epoch as u64).to_le_bytes());
    out.extend(state.optimizer.step_count().to_le_bytes());
    out.extend(state.rng.get_seed());
    out.extend(state.rng.get_word_pos().to_le_bytes());
    out.extend(state.rng.get_stream().to_le_bytes());

    let mut records: Vec<(String, u8, Vec<usize>, Vec<u8>)> = Vec::new();
    state.model.visit(&mut |p| {
        let mut payload = Vec::with_capacity(p.numel() * 4);
        for v in p.value.data() {
            payload.extend(v.to_le_bytes());
        }
        records.push((p.name.clone(), DTYPE_F32, p.value.shape().to_vec(), payload));
    });
    for (name, moments) in state.optimizer.moments() {
        for (suffix, values) in [(".m", &moments.m), (".v", &moments.v)] {
            let mut payload = Vec::with_capacity(values.len() * 8);
            for v in values {
                payload.extend(v.to_le_bytes());
            }
            records.push((format!("{name}{suffix}"), DTYPE_F64, vec![values.len()], payload));
        }
    }

    out.extend((records.len() as u32).to_le_bytes());
    for (name, dtype, dims, payload) in records {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(dtype);
        out.push(dims.len() as u8);
        for d in dims {
            out.extend((d as u64).to_le_bytes());
        }
        out.extend(payload);
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("len")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {VERSION})"
        )));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("config blob is not UTF-8: {e}")))?;
    let config = TrainConfig::parse(config_text)?;
    config.validate()?;
    let epoch = r.u64()? as usize;
    let step = r.u64()?;

    let seed: [u8; 32] = r.take(32)?.try_into().expect("len");
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("len"));
    let stream = r.u64()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let count = r.u32()? as usize;
    let mut f32_tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    let mut f64_vecs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let dtype = r.take(1)?[0];
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        match dtype {
            DTYPE_F32 => {
                let data = r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("chunks")))
                    .collect();
                f32_tensors.insert(name, Tensor::from_vec(&dims, data)?);
            }
            DTYPE_F64 => {
                let data = r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunks")))
                    .collect();
                f64_vecs.insert(name, data);
            }
            other => {
                return Err(Error::Checkpoint(format!("unknown dtype code {other}")))
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor records".into()));
    }

    let mut model = Model::<f32>::new(&config.model)?;
    let mut missing = Vec::new();
    model.visit_mut(&mut |p| match f32_tensors.remove(&p.name) {
        Some(t) if t.shape() == p.value.shape() => p.value = t,
        Some(t) => missing.push(format!(
            "{}: shape {:?} in file, {:?} in model",
            p.name,
            t.shape(),
            p.value.shape()
        )),
        None => missing.push(format!("{}: absent from checkpoint", p.name)),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("parameter mismatch: {missing:?}")));
    }
    if !f32_tensors.is_empty() {
        let extra: Vec<&String> = f32_tensors.keys().collect();
        return Err(Error::Checkpoint(format!("unknown parameters in file: {extra:?}")));
    }

    let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
    for (key, values) in f64_vecs {
        let (name, field) = key
            .rsplit_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("bad moment key {key:?}")))?;
        let entry = moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: Vec::new(),
            v: Vec::new(),
        });
        match field {
            "m" => entry.m = values,
            "v" => entry.v = values,
            other => {
                return Err(Error::Checkpoint(format!("bad moment suffix {other:?}")))
            }
        }
    }
    let mut optimizer = AdamW::from_config(&config);
    optimizer.restore(step, moments);

    Ok(TrainState {
        config,
        epoch,
        model,
        optimizer,
        rng,
    })
}
