//! Binary checkpoint: config snapshot, parameters, optimizer moments, RNG position
//! and step counter. All integers and floats little-endian.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamStore, Tensor};
use crate::{Error, Result};

use super::config::Config;
use super::optim::AdamState;

pub const CKPT_MAGIC: &[u8; 8] = b"GRCKPT01";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub config: Config,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "string is not utf-8"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for x in t.data() {
        out.extend(x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(CKPT_MAGIC);
        out.extend(CKPT_VERSION.to_le_bytes());
        out.push(self.stage);
        out.extend(self.step.to_le_bytes());
        put_str(&mut out, &self.config.to_text());
        out.extend(self.rng.get_seed());
        out.extend(self.rng.get_stream().to_le_bytes());
        out.extend(self.rng.get_word_pos().to_le_bytes());
        out.extend(self.adam.t.to_le_bytes());
        out.extend((self.params.len() as u32).to_le_bytes());
        for (i, (_, p)) in self.params.iter().enumerate() {
            put_str(&mut out, &p.name);
            out.extend((p.value.ndim() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend((d as u32).to_le_bytes());
            }
            put_floats(&mut out, &p.value);
            put_floats(&mut out, &self.adam.m[i]);
            put_floats(&mut out, &self.adam.v[i]);
        }
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::format(path, "not a checkpoint"));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let stage = r.take(1)?[0];
        let step = r.u64()?;
        let config = Config::parse(&r.string()?)?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let t = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            let name = r.string()?;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            params.add(name, Tensor::new(&shape, r.floats(numel)?)?)?;
            m.push(Tensor::new(&shape, r.floats(numel)?)?);
            v.push(Tensor::new(&shape, r.floats(numel)?)?);
        }
        if r.pos != buf.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        Ok(Self { stage, step, config, params, adam: AdamState { m, v, t }, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }

    /// Copies matching parameters (by name and shape) into `store`.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (_, p) in self.params.iter() {
            let id = store.id(&p.name).ok_or_else(|| Error::Invalid(format!("checkpoint parameter {} not in model", p.name)))?;
            store.set(id, (*p.value).clone())?;
        }
        Ok(())
    }
}
