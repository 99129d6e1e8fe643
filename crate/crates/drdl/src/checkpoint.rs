//! Single-file training checkpoints.
//!
//! A checkpoint holds everything a single-threaded run needs to continue
//! bit-exactly: model configuration and label spaces (so the network can be
//! rebuilt), every named parameter and batch-norm buffer, the Adam moment
//! state of all four parameter groups, the epoch counter, the master seed,
//! and the metrics CSV produced so far (so the resumed run's CSV is byte
//! identical to an uninterrupted one).
//!
//! Layout: magic, format version, element-type tag, then sections in a
//! fixed order, closed by an FNV-1a checksum over all preceding bytes.
//! Float payloads are little-endian f64 regardless of the in-memory element
//! type; widening f32 to f64 and back is exact, so round-trips preserve
//! bits in both precisions.

use crate::data::LabelSpaces;
use crate::model::{DrdlModel, Group, ModelConfig, ParamModuleMutBuffers};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::ParamModule;
use crate::tensor::{Scalar, Tensor};
use crate::util::{atomic_write, Digest};
use crate::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DRDLCKPT";
const VERSION: u32 = 1;

/// Counters and artifacts that belong to the run rather than the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainState {
    /// Number of fully completed epochs; a resumed run starts at the next.
    pub epochs_done: usize,
    /// The run's master seed. Every stream is re-derivable from it, so no
    /// RNG state needs to be stored.
    pub master_seed: u64,
    /// Bytes of the metrics CSV written so far, including the header.
    pub metrics_csv: Vec<u8>,
}

/// Saves model, optimizer, and run state to one file, atomically.
///
/// `optimizers` must hold one Adam per parameter group in [`Group::ALL`]
/// order. A freshly constructed optimizer (no steps yet) is fine; its empty
/// moment state round-trips as such.
pub fn save<T: Scalar>(
    path: &Path,
    model: &DrdlModel<T>,
    optimizers: &[&Adam<T>],
    state: &TrainState,
) -> Result<()> {
    if optimizers.len() != Group::ALL.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} optimizers (one per parameter group), got {}",
            Group::ALL.len(),
            optimizers.len()
        )));
    }
    let mut enc = Enc::new();
    enc.bytes(MAGIC);
    enc.u32(VERSION);
    enc.str(T::NAME);

    enc.u32(model.cfg.in_channels as u32);
    enc.u32(model.cfg.block_channels.len() as u32);
    for &c in &model.cfg.block_channels {
        enc.u32(c as u32);
    }
    enc.u32(model.cfg.reduce_dim as u32);

    enc.u32(model.labels.num_source_ids as u32);
    enc.u32(model.labels.num_source_cams as u32);
    enc.u32(model.labels.num_target_cams as u32);

    enc.u64(state.epochs_done as u64);
    enc.u64(state.master_seed);
    enc.blob(&state.metrics_csv);

    for (group, opt) in Group::ALL.iter().zip(optimizers) {
        let params = model.group_params(*group);
        enc.u32(params.len() as u32);
        for p in &params {
            enc.str(&p.name);
            enc.tensor(&p.value);
        }
        let buffers = group_buffers(model, *group);
        enc.u32(buffers.len() as u32);
        for (name, t) in &buffers {
            enc.str(name);
            enc.tensor(t);
        }
        enc.f64(opt.cfg.lr);
        enc.f64(opt.cfg.beta1);
        enc.f64(opt.cfg.beta2);
        enc.f64(opt.cfg.eps);
        enc.f64(opt.cfg.weight_decay);
        enc.u64(opt.t);
        if !opt.m.is_empty() && opt.m.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "group {group:?} optimizer holds {} moment tensors for {} parameters",
                opt.m.len(),
                params.len()
            )));
        }
        enc.u32(opt.m.len() as u32);
        for t in &opt.m {
            enc.tensor(t);
        }
        for t in &opt.v {
            enc.tensor(t);
        }
    }

    let mut digest = Digest::new();
    digest.push_bytes(&enc.buf);
    enc.u64(digest.value());
    atomic_write(path, &enc.buf)
}

/// Loads a checkpoint saved by [`save`] with the same element type.
pub fn load<T: Scalar>(path: &Path) -> Result<(DrdlModel<T>, Vec<Adam<T>>, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint(format!(
            "{}: file too short to be a checkpoint",
            path.display()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("split gave 8 bytes"));
    let mut digest = Digest::new();
    digest.push_bytes(body);
    if digest.value() != stored {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch, file is corrupt or truncated",
            path.display()
        )));
    }

    let mut dec = Dec::new(body);
    if dec.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = dec.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version} is not the supported version {VERSION}",
            path.display()
        )));
    }
    let precision = dec.str()?;
    if precision != T::NAME {
        return Err(Error::Checkpoint(format!(
            "{}: stores {precision} state, cannot load as {}",
            path.display(),
            T::NAME
        )));
    }

    let in_channels = dec.u32()? as usize;
    let nblocks = dec.u32()? as usize;
    let mut block_channels = Vec::with_capacity(nblocks);
    for _ in 0..nblocks {
        block_channels.push(dec.u32()? as usize);
    }
    let reduce_dim = dec.u32()? as usize;
    let cfg = ModelConfig {
        in_channels,
        block_channels,
        reduce_dim,
    };
    let labels = LabelSpaces {
        num_source_ids: dec.u32()? as usize,
        num_source_cams: dec.u32()? as usize,
        num_target_cams: dec.u32()? as usize,
    };

    let state = TrainState {
        epochs_done: dec.u64()? as usize,
        master_seed: dec.u64()?,
        metrics_csv: dec.blob()?.to_vec(),
    };

    let mut model = DrdlModel::<T>::new(cfg, labels, 0)?;
    let mut optimizers = Vec::with_capacity(Group::ALL.len());
    for group in Group::ALL {
        let nparams = dec.u32()? as usize;
        {
            let mut params = model.group_params_mut(group);
            if nparams != params.len() {
                return Err(Error::Checkpoint(format!(
                    "group {group:?} stores {nparams} parameters, model has {}",
                    params.len()
                )));
            }
            for p in params.iter_mut() {
                let name = dec.str()?;
                if name != p.name {
                    return Err(Error::Checkpoint(format!(
                        "parameter order mismatch: stored {name}, model expects {}",
                        p.name
                    )));
                }
                p.value = dec.tensor_like(p.value.shape(), &name)?;
            }
        }
        let nbuffers = dec.u32()? as usize;
        let names: Vec<String> = group_buffers(&model, group)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let mut buffers = group_buffers_mut(&mut model, group);
        if nbuffers != buffers.len() {
            return Err(Error::Checkpoint(format!(
                "group {group:?} stores {nbuffers} buffers, model has {}",
                buffers.len()
            )));
        }
        for (expected, slot) in names.iter().zip(buffers.iter_mut()) {
            let name = dec.str()?;
            if name != *expected {
                return Err(Error::Checkpoint(format!(
                    "buffer order mismatch: stored {name}, model expects {expected}"
                )));
            }
            **slot = dec.tensor_like(slot.shape(), &name)?;
        }

        let cfg = AdamConfig {
            lr: dec.f64()?,
            beta1: dec.f64()?,
            beta2: dec.f64()?,
            eps: dec.f64()?,
            weight_decay: dec.f64()?,
        };
        let t = dec.u64()?;
        let nmoments = dec.u32()? as usize;
        let shapes: Vec<Vec<usize>> = model
            .group_params(group)
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        if nmoments != 0 && nmoments != shapes.len() {
            return Err(Error::Checkpoint(format!(
                "group {group:?} stores {nmoments} moment tensors for {} parameters",
                shapes.len()
            )));
        }
        let read_moments = |dec: &mut Dec| -> Result<Vec<Tensor<T>>> {
            (0..nmoments)
                .map(|i| dec.tensor_like(&shapes[i], "optimizer moment"))
                .collect()
        };
        let m = read_moments(&mut dec)?;
        let v = read_moments(&mut dec)?;
        let mut opt = Adam::new(cfg)?;
        opt.t = t;
        opt.m = m;
        opt.v = v;
        optimizers.push(opt);
    }

    if dec.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} unexpected trailing bytes",
            path.display(),
            body.len() - dec.pos
        )));
    }
    Ok((model, optimizers, state))
}

fn group_buffers<T: Scalar>(model: &DrdlModel<T>, group: Group) -> Vec<(String, &Tensor<T>)> {
    match group {
        Group::E1 => model.e1.buffers(),
        Group::E2 => model.e2.buffers(),
        Group::W1 => model.w1.buffers(),
        Group::W2 => model.w2.buffers(),
    }
}

fn group_buffers_mut<T: Scalar>(model: &mut DrdlModel<T>, group: Group) -> Vec<&mut Tensor<T>> {
    match group {
        Group::E1 => model.e1.buffers_mut_vec(),
        Group::E2 => model.e2.buffers_mut_vec(),
        Group::W1 => model.w1.buffers_mut_vec(),
        Group::W2 => model.w2.buffers_mut_vec(),
    }
}

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn new() -> Self {
        Enc { buf: Vec::new() }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }

    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &x in t.data() {
            self.f64(x.to_f64());
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Dec { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated record at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid utf-8 in name at byte {}", self.pos)))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    /// Reads a tensor and checks its shape against what the model expects.
    fn tensor_like<T: Scalar>(&mut self, expected: &[usize], what: &str) -> Result<Tensor<T>> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        if shape != expected {
            return Err(Error::Checkpoint(format!(
                "{what}: stored shape {shape:?} does not match model shape {expected:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(T::from_f64(self.f64()?));
        }
        Tensor::from_vec(&shape, data)
    }
}
