use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 5] = b"VPCK1";

/// A named tensor with its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Running statistics and other buffers are stored alongside weights but never trained.
    pub trainable: bool,
    /// Set whenever a backward pass deposits a gradient.
    pub touched: bool,
}

/// All weights of a model, keyed by dotted names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Param>,
}

fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry. Names ending in `.running_mean`/`.running_var` are buffers.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let grad = Tensor::zeros(value.shape());
        let trainable = !is_buffer_name(&name);
        self.entries.insert(name, Param { value, grad, trainable, touched: false });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("no parameter named {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.get_mut(name)?.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_weights(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
            p.touched = false;
        }
    }

    /// Adds `grad` into the slot of `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name} has shape {:?}, expected {:?}",
                grad.shape(),
                p.grad.shape()
            )));
        }
        p.grad.add_assign(grad);
        p.touched = true;
        Ok(())
    }

    /// Trainable parameters that received no gradient since the last `zero_grads`.
    pub fn untouched(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable && !p.touched)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// He-normal weights of shape `shape`, fan-in = product of all but the first extent.
    pub fn init_he<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], rng: &mut R) {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..shape.iter().product()).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"));
    }

    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for p in out.entries.values_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }

    pub fn write_checkpoint(&self, config_text: &str, mut out: impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        write_u32(&mut out, config_text.len())?;
        out.write_all(config_text.as_bytes())?;
        write_u32(&mut out, self.entries.len())?;
        for (name, p) in &self.entries {
            write_u32(&mut out, name.len())?;
            out.write_all(name.as_bytes())?;
            write_u32(&mut out, p.value.rank())?;
            for &e in p.value.shape() {
                write_u32(&mut out, e)?;
            }
            for &v in p.value.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint, returning the store and the embedded config text.
    pub fn read_checkpoint(mut input: impl Read) -> Result<(Self, String)> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut magic = [0u8; 5];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("missing VPCK1 magic"));
        }
        let config_len = read_u32(&mut input)?;
        let mut config = vec![0u8; config_len];
        input.read_exact(&mut config).map_err(|_| bad("truncated config block"))?;
        let config = String::from_utf8(config).map_err(|_| bad("config block is not UTF-8"))?;
        let count = read_u32(&mut input)?;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = read_u32(&mut input)?;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let rank = read_u32(&mut input)?;
            let shape = (0..rank).map(|_| read_u32(&mut input)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut word = [0u8; 4];
            for _ in 0..n {
                input.read_exact(&mut word).map_err(|_| bad("truncated tensor data"))?;
                data.push(f32::from_le_bytes(word) as f64);
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok((store, config))
    }

    pub fn save(&self, config_text: &str, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(config_text, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<usize> {
    let mut word = [0u8; 4];
    input
        .read_exact(&mut word)
        .map_err(|_| Error::Checkpoint("truncated length field".into()))?;
    Ok(u32::from_le_bytes(word) as usize)
}
