//! Versioned binary checkpoint container shared by every trainable stage.
//!
//! A checkpoint carries: a section tag naming the stage, the
//! configuration echoed as TOML text, the epoch counter and base seed
//! (which together determine every future RNG stream, since training
//! derives per-epoch streams from them), named parameter tensors, named
//! non-trainable state tensors (batch-norm running statistics), and the
//! optimizer state. A SHA-256 digest of the payload closes the file.
//! Saving, loading and saving again produces identical bytes.

use std::path::Path;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Adam, MomentPair, ParamRefs};

const MAGIC: &[u8; 8] = b"OSLDCKPT";
const VERSION: u32 = 1;

/// Serializable snapshot of [`Adam`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    pub step_count: u64,
    pub moments: Vec<MomentPair>,
}

impl AdamState {
    pub fn capture(opt: &Adam) -> Self {
        AdamState {
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            decoupled: opt.decoupled,
            step_count: opt.step_count,
            moments: opt.moments.clone(),
        }
    }

    pub fn restore(&self) -> Adam {
        Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled,
            step_count: self.step_count,
            moments: self.moments.clone(),
        }
    }
}

/// In-memory checkpoint contents; see the module docs for the file layout.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub section: String,
    pub config_toml: String,
    pub epoch: u64,
    pub base_seed: u64,
    /// Scalar metrics worth keeping with the weights (gate accuracy,
    /// embedding width).
    pub meta: Vec<(String, f64)>,
    pub params: Vec<(String, ArrayD<f64>)>,
    /// Non-trainable tensors restored alongside the parameters.
    pub state: Vec<(String, ArrayD<f64>)>,
    pub optimizer: Option<AdamState>,
}

/// Copies the current values out of a parameter list, preserving order.
pub fn capture_params(params: &mut ParamRefs<'_>) -> Vec<(String, ArrayD<f64>)> {
    params
        .iter()
        .map(|(name, p)| (name.clone(), p.value.clone()))
        .collect()
}

impl Checkpoint {
    /// Writes the checkpoint values back into a live parameter list. The
    /// list must match the stored names and shapes in order; optimizer
    /// moments are aligned by the same order.
    pub fn apply_params(&self, params: &mut ParamRefs<'_>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((name, stored), (live_name, live)) in self.params.iter().zip(params.iter_mut()) {
            if name != live_name {
                return Err(Error::Validation(format!(
                    "checkpoint parameter `{name}` does not match model parameter `{live_name}`"
                )));
            }
            if stored.shape() != live.value.shape() {
                return Err(Error::shape(
                    format!("{:?} for {name}", live.value.shape()),
                    format!("{:?}", stored.shape()),
                ));
            }
            live.value.assign(stored);
        }
        Ok(())
    }

    /// Like [`Checkpoint::apply_params`] but only for the given subset of
    /// parameters; entries are looked up by name and every requested
    /// parameter must exist in the checkpoint.
    pub fn apply_params_subset(&self, params: &mut ParamRefs<'_>) -> Result<()> {
        for (live_name, live) in params.iter_mut() {
            let stored = self
                .params
                .iter()
                .find(|(name, _)| name == live_name)
                .map(|(_, v)| v)
                .ok_or_else(|| {
                    Error::Validation(format!("checkpoint is missing parameter `{live_name}`"))
                })?;
            if stored.shape() != live.value.shape() {
                return Err(Error::shape(
                    format!("{:?} for {live_name}", live.value.shape()),
                    format!("{:?}", stored.shape()),
                ));
            }
            live.value.assign(stored);
        }
        Ok(())
    }

    pub fn meta_value(&self, key: &str) -> Option<f64> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, VERSION);
        push_str(&mut out, &self.section);
        push_str(&mut out, &self.config_toml);
        push_u64(&mut out, self.epoch);
        push_u64(&mut out, self.base_seed);

        push_u32(&mut out, len_u32(self.meta.len(), "meta entries")?);
        for (key, value) in &self.meta {
            push_str(&mut out, key);
            push_f64(&mut out, *value);
        }
        push_u32(&mut out, len_u32(self.params.len(), "parameters")?);
        for (name, array) in &self.params {
            push_str(&mut out, name);
            push_array(&mut out, array)?;
        }
        push_u32(&mut out, len_u32(self.state.len(), "state tensors")?);
        for (name, array) in &self.state {
            push_str(&mut out, name);
            push_array(&mut out, array)?;
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                push_f64(&mut out, opt.lr);
                push_f64(&mut out, opt.beta1);
                push_f64(&mut out, opt.beta2);
                push_f64(&mut out, opt.eps);
                push_f64(&mut out, opt.weight_decay);
                out.push(u8::from(opt.decoupled));
                push_u64(&mut out, opt.step_count);
                push_u32(&mut out, len_u32(opt.moments.len(), "moment pairs")?);
                for pair in &opt.moments {
                    push_array(&mut out, &pair.m)?;
                    push_array(&mut out, &pair.v)?;
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if raw.len() < MAGIC.len() + 32 || &raw[..MAGIC.len()] != MAGIC {
            return Err(Error::parse(path, "not a checkpoint file"));
        }
        let body_len = raw.len() - 32;
        let digest = Sha256::digest(&raw[..body_len]);
        if digest.as_slice() != &raw[body_len..] {
            return Err(Error::parse(path, "checksum mismatch; file is corrupt"));
        }
        let mut r = Reader {
            buf: &raw[..body_len],
            pos: MAGIC.len(),
            path,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::parse(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let section = r.str()?;
        let config_toml = r.str()?;
        let epoch = r.u64()?;
        let base_seed = r.u64()?;

        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let key = r.str()?;
            let value = r.f64()?;
            meta.push((key, value));
        }
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.str()?;
            let array = r.array()?;
            params.push((name, array));
        }
        let n_state = r.u32()? as usize;
        let mut state = Vec::with_capacity(n_state);
        for _ in 0..n_state {
            let name = r.str()?;
            let array = r.array()?;
            state.push((name, array));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let lr = r.f64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let weight_decay = r.f64()?;
                let decoupled = r.u8()? != 0;
                let step_count = r.u64()?;
                let n_moments = r.u32()? as usize;
                let mut moments = Vec::with_capacity(n_moments);
                for _ in 0..n_moments {
                    let m = r.array()?;
                    let v = r.array()?;
                    moments.push(MomentPair { m, v });
                }
                Some(AdamState {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    decoupled,
                    step_count,
                    moments,
                })
            }
            other => {
                return Err(Error::parse(
                    path,
                    format!("bad optimizer flag {other}"),
                ))
            }
        };
        if r.pos != r.buf.len() {
            return Err(Error::parse(path, "trailing bytes after checkpoint body"));
        }
        Ok(Checkpoint {
            section,
            config_toml,
            epoch,
            base_seed,
            meta,
            params,
            state,
            optimizer,
        })
    }
}

fn len_u32(len: usize, what: &str) -> Result<u32> {
    u32::try_from(len).map_err(|_| Error::Validation(format!("too many {what} for checkpoint")))
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    push_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn push_array(out: &mut Vec<u8>, array: &ArrayD<f64>) -> Result<()> {
    push_u32(out, len_u32(array.ndim(), "array dimensions")?);
    for &d in array.shape() {
        push_u64(out, d as u64);
    }
    for v in array.iter() {
        push_f64(out, *v);
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse(self.path, "checkpoint truncated"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::parse(self.path, "checkpoint string is not UTF-8"))
    }

    fn array(&mut self) -> Result<ArrayD<f64>> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let data = self.take(count * 8)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        ArrayD::from_shape_vec(shape, values)
            .map_err(|e| Error::parse(self.path, format!("bad checkpoint tensor: {e}")))
    }
}
