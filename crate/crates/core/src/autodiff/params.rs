use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::tape::{Gradients, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CDM1";
const CHECKPOINT_VERSION: u32 = 1;
const MOMENT1_PREFIX: &str = "adam.m/";
const MOMENT2_PREFIX: &str = "adam.v/";
const STEP_ENTRY: &str = "adam.step";

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Tensor,
    grad: Option<Tensor>,
    moment1: Tensor,
    moment2: Tensor,
}

/// Named trainable tensors plus their Adam state.
///
/// Iteration order is the lexicographic order of names, which makes
/// checkpoints and updates independent of insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter {name:?}")));
        }
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                moment1: Tensor::zeros(&shape),
                moment2: Tensor::zeros(&shape),
            },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of optimizer steps taken.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Overwrites the gradient of one parameter.
    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))?;
        if grad.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {name:?} of shape {:?}",
                grad.shape(),
                p.value.shape()
            )));
        }
        p.grad = Some(grad);
        Ok(())
    }

    /// Adds the gradients of every parameter registered on `tape`.
    /// Parameters the output does not depend on receive zeros.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (name, var) in tape.params() {
            let g = grads.get_or_zero(*var);
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("unknown parameter {name:?}")))?;
            match &mut p.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += v;
                    }
                }
                None => p.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Standard Adam update with bias correction. Every parameter must
    /// carry a gradient; gradients are zeroed afterwards.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::State(format!("parameter {name:?} has no gradient")));
        }
        let t = self.step + 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for p in self.params.values_mut() {
            let grad = p.grad.as_mut().expect("checked above");
            let values = p.value.data_mut().iter_mut();
            let m = p.moment1.data_mut().iter_mut();
            let v = p.moment2.data_mut().iter_mut();
            for (((x, m), v), g) in values.zip(m).zip(v).zip(grad.data_mut().iter_mut()) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * *g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * *g * *g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                *g = 0.0;
            }
        }
        self.step = t;
        Ok(())
    }

    /// Rounds values and optimizer moments to `f32`, so the in-memory state
    /// equals what a checkpoint round trip would restore.
    pub fn round_to_f32(&mut self) {
        for p in self.params.values_mut() {
            p.value.round_to_f32();
            p.moment1.round_to_f32();
            p.moment2.round_to_f32();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.all_finite())
    }

    /// Serializes values, Adam moments and the step counter in CDM1 format.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (name, p) in &self.params {
            write_entry(&mut out, name, &p.value)?;
        }
        for (name, p) in &self.params {
            write_entry(&mut out, &format!("{MOMENT1_PREFIX}{name}"), &p.moment1)?;
            write_entry(&mut out, &format!("{MOMENT2_PREFIX}{name}"), &p.moment2)?;
        }
        // f32 holds integers exactly up to 2^24, split the counter in two halves.
        let step = Tensor::new(
            vec![2],
            vec![(self.step >> 24) as f64, (self.step & 0xFF_FFFF) as f64],
        )?;
        write_entry(&mut out, STEP_ENTRY, &step)?;
        out.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cursor = Cursor { bytes: &bytes, pos: 0 };
        if cursor.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cursor.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut entries = Vec::new();
        while !cursor.at_end() {
            entries.push(read_entry(&mut cursor)?);
        }

        let mut store = ParamStore::new();
        let mut moments = Vec::new();
        for (name, tensor) in entries {
            if name == STEP_ENTRY {
                let d = tensor.data();
                if d.len() != 2 {
                    return Err(Error::Checkpoint("malformed step entry".into()));
                }
                store.step = ((d[0] as u64) << 24) | d[1] as u64;
            } else if name.starts_with(MOMENT1_PREFIX) || name.starts_with(MOMENT2_PREFIX) {
                moments.push((name, tensor));
            } else {
                store.insert(&name, tensor)?;
            }
        }
        for (name, tensor) in moments {
            let (target, first) = match name.strip_prefix(MOMENT1_PREFIX) {
                Some(t) => (t, true),
                None => (&name[MOMENT2_PREFIX.len()..], false),
            };
            let p = store
                .params
                .get_mut(target)
                .ok_or_else(|| Error::Checkpoint(format!("moment for unknown parameter {target:?}")))?;
            if tensor.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("moment shape mismatch for {target:?}")));
            }
            if first {
                p.moment1 = tensor;
            } else {
                p.moment2 = tensor;
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

fn write_entry<W: Write>(out: &mut W, name: &str, tensor: &Tensor) -> Result<()> {
    let name_bytes = name.as_bytes();
    out.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
    out.write_all(name_bytes)?;
    out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_entry(cursor: &mut Cursor<'_>) -> Result<(String, Tensor)> {
    let name_len = cursor.u32()? as usize;
    let name = std::str::from_utf8(cursor.take(name_len)?)
        .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
        .to_string();
    let rank = cursor.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(cursor.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
    let raw = cursor.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}
