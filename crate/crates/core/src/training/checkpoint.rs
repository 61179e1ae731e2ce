//! Binary tensor container used for checkpoints and demo files.
//!
//! Layout, little-endian throughout: magic `STPC`, u32 version, u32 entry
//! count, then per entry a u32 name length, the UTF-8 name, a u8 dtype code
//! (0 = f32, 1 = f64, 2 = u64), a u8 rank, one u64 per dim and the raw
//! payload; finally a u64 config digest.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::optim::AdamState;
use super::trainer::Trainer;
use crate::numerics::{DType, ParamRegistry, ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STPC";
pub const VERSION: u32 = 1;
const U64_CODE: u8 = 2;

/// One stored array.
#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Entry {
    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::F64(t) => t.shape(),
            Entry::U64 { shape, .. } => shape,
        }
    }

    fn code(&self) -> u8 {
        match self {
            Entry::F32(_) => DType::F32.code(),
            Entry::F64(_) => DType::F64.code(),
            Entry::U64 { .. } => U64_CODE,
        }
    }

    pub fn scalar_u64(v: u64) -> Self {
        Entry::U64 { shape: vec![1], data: vec![v] }
    }
}

/// Ordered named arrays plus the digest of the config that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<(String, Entry)>,
    pub digest: u64,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn push(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.push((name.into(), entry));
    }

    pub fn f32(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(Entry::F32(t)) => Ok(t),
            Some(_) => Err(Error::Checkpoint(format!("entry `{name}` is not f32"))),
            None => Err(Error::Checkpoint(format!("missing entry `{name}`"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.get(name) {
            Some(Entry::U64 { data, .. }) if data.len() == 1 => Ok(data[0]),
            Some(_) => Err(Error::Checkpoint(format!("entry `{name}` is not a u64 scalar"))),
            None => Err(Error::Checkpoint(format!("missing entry `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(e.code());
            out.push(e.shape().len() as u8);
            for &d in e.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match e {
                Entry::F32(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Entry::F64(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Entry::U64 { data, .. } => data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out.extend_from_slice(&self.digest.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected `STPC`")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported container version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err(truncated());
            }
            let (name, rest) = r.split_at(len);
            r = rest;
            let name = String::from_utf8(name.to_vec()).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let mut head = [0u8; 2];
            read_exact(&mut r, &mut head)?;
            let [code, rank] = head;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(truncated)?;
            if numel.checked_mul(if code == 0 { 4 } else { 8 }).is_none_or(|b| b > r.len()) {
                return Err(truncated());
            }
            let entry = match code {
                0 => Entry::F32(Tensor::new(shape, (0..numel).map(|_| read_f32(&mut r)).collect::<Result<_>>()?)?),
                1 => Entry::F64(Tensor::new(shape, (0..numel).map(|_| read_f64(&mut r)).collect::<Result<_>>()?)?),
                U64_CODE => Entry::U64 { shape, data: (0..numel).map(|_| read_u64(&mut r)).collect::<Result<_>>()? },
                other => return Err(Error::Checkpoint(format!("unknown dtype code {other} for `{name}`"))),
            };
            entries.push((name, entry));
        }
        let digest = read_u64(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after digest", r.len())));
        }
        Ok(Container { entries, digest })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn truncated() -> Error {
    Error::Checkpoint("truncated container".into())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut &[u8]) -> Result<f32> {
    read_u32(r).map(f32::from_bits)
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    read_u64(r).map(f64::from_bits)
}

/// Loads the parameter entries named `param/<name>` into a fresh store.
pub fn params_from_container(c: &Container, registry: &ParamRegistry) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::zeros(registry);
    for (i, def) in registry.defs().iter().enumerate() {
        let t = c.f32(&format!("param/{}", def.name))?;
        if t.shape() != def.shape.as_slice() {
            return Err(Error::Checkpoint(format!("`{}` has shape {:?}, model expects {:?}", def.name, t.shape(), def.shape)));
        }
        *store.value_mut(crate::numerics::ParamId(i)) = t.clone();
    }
    Ok(store)
}

impl Trainer {
    pub fn to_container(&self, digest: u64) -> Container {
        let mut c = Container { entries: Vec::new(), digest };
        c.push("meta/step", Entry::scalar_u64(self.step));
        c.push("meta/adam_step", Entry::scalar_u64(self.opt.step));
        for (i, name) in self.params.names().iter().enumerate() {
            c.push(format!("param/{name}"), Entry::F32(self.params.value(crate::numerics::ParamId(i)).clone()));
        }
        for (prefix, moments) in [("adam_m", &self.opt.m), ("adam_v", &self.opt.v)] {
            for (name, t) in self.params.names().iter().zip(moments) {
                c.push(format!("{prefix}/{name}"), Entry::F32(t.clone()));
            }
        }
        c
    }

    pub fn save(&self, path: &Path, digest: u64) -> Result<()> {
        self.to_container(digest).save(path)
    }

    /// Restores parameters, moments and the step counter. A digest
    /// different from `digest` is an error unless `force` is set.
    pub fn restore(&mut self, c: &Container, digest: u64, force: bool) -> Result<()> {
        if c.digest != digest && !force {
            return Err(Error::Checkpoint(format!(
                "config digest {:016x} in checkpoint differs from current {:016x}",
                c.digest, digest
            )));
        }
        let registry = self.model.registry();
        let params = params_from_container(c, registry)?;
        let mut opt = AdamState::new(registry);
        opt.step = c.u64("meta/adam_step")?;
        for (prefix, moments) in [("adam_m", &mut opt.m), ("adam_v", &mut opt.v)] {
            for (def, slot) in registry.defs().iter().zip(moments.iter_mut()) {
                let t = c.f32(&format!("{prefix}/{}", def.name))?;
                if t.shape() != def.shape.as_slice() {
                    return Err(Error::Checkpoint(format!("moment `{}` has the wrong shape", def.name)));
                }
                *slot = t.clone();
            }
        }
        self.step = c.u64("meta/step")?;
        self.params = params;
        self.opt = opt;
        Ok(())
    }

    pub fn load(&mut self, path: &Path, digest: u64, force: bool) -> Result<()> {
        self.restore(&Container::load(path)?, digest, force)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IntervalPolicy, PairSampler, SynthManifest, SynthParams};
    use crate::decoders::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::training::TrainConfig;

    fn tiny() -> (ModelConfig, TrainConfig, PairSampler) {
        let model = ModelConfig {
            encoder: EncoderConfig { image_size: 16, dim: 32, depth: 1, ..EncoderConfig::desk() },
            decoder: DecoderConfig { dim: 16, heads: 2, spatial_depth: 1, temporal_depth: 1, ..DecoderConfig::desk() },
        };
        let train = TrainConfig {
            batch_size: 2,
            total_steps: 6,
            warmup_steps: 2,
            base_lr: 1e-3,
            crop: None,
            interval: IntervalPolicy::Fixed(2),
            ..TrainConfig::desk()
        };
        let clips = SynthManifest { seed: 3, n_clips: 3, params: SynthParams { length: 6, size: 16, ..Default::default() } }
            .generate()
            .unwrap();
        let sampler = PairSampler::new(clips, train.interval, train.crop, train.seed).unwrap();
        (model, train, sampler)
    }

    #[test]
    fn container_roundtrip_is_byte_identical() {
        let mut c = Container { digest: 0xdead_beef, ..Default::default() };
        c.push("a", Entry::F32(Tensor::from_fn(&[2, 3], |i| i as f32 - 1.5)));
        c.push("b", Entry::F64(Tensor::new(vec![1], vec![std::f64::consts::PI]).unwrap()));
        c.push("c", Entry::U64 { shape: vec![2], data: vec![7, u64::MAX] });
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let mut c = Container::default();
        c.push("x", Entry::F32(Tensor::zeros(&[4])));
        let bytes = c.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Container::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Container::from_bytes(&long).unwrap_err().to_string().contains("trailing"));
        assert!(Container::from_bytes(&[]).is_err());
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (model, train, sampler) = tiny();
        let mut t = Trainer::new(&model, train).unwrap();
        t.fit(&sampler, 2, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.stpc"), dir.path().join("b.stpc"));
        let digest = t.config_digest();
        t.save(&p1, digest).unwrap();
        let mut u = Trainer::new(&model, t.cfg.clone()).unwrap();
        u.load(&p1, digest, false).unwrap();
        u.save(&p2, digest).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(u.step, 2);
        assert_eq!(u.opt, t.opt);
    }

    #[test]
    fn digest_mismatch_needs_force() {
        let (model, train, _) = tiny();
        let t = Trainer::new(&model, train).unwrap();
        let c = t.to_container(1);
        let mut u = t.clone();
        assert!(u.restore(&c, 2, false).unwrap_err().to_string().contains("digest"));
        u.restore(&c, 2, true).unwrap();
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let (model, train, sampler) = tiny();
        let mut full = Trainer::new(&model, train.clone()).unwrap();
        let reference = full.fit(&sampler, 6, |_| {}).unwrap();

        let mut first = Trainer::new(&model, train.clone()).unwrap();
        first.fit(&sampler, 3, |_| {}).unwrap();
        let bytes = first.to_container(first.config_digest()).to_bytes();
        let mut resumed = Trainer::new(&model, train).unwrap();
        let digest = resumed.config_digest();
        resumed.restore(&Container::from_bytes(&bytes).unwrap(), digest, false).unwrap();
        let tail = resumed.fit(&sampler, 6, |_| {}).unwrap();
        assert_eq!(&reference[3..], tail.as_slice());
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn wrong_shapes_are_reported() {
        let (model, train, _) = tiny();
        let t = Trainer::new(&model, train.clone()).unwrap();
        let c = t.to_container(0);
        let other = ModelConfig { encoder: EncoderConfig { dim: 64, ..model.encoder.clone() }, ..model };
        let mut u = Trainer::new(&other, train).unwrap();
        assert!(u.restore(&c, 0, true).unwrap_err().to_string().contains("shape"));
    }
}
