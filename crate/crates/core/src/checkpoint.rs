//! Binary checkpoints: little-endian, length-prefixed, with an end marker.
//!
//! Layout: magic `AVD2VCKPT`, version u32, step u64, optimizer step u64, RNG
//! (seed 32 bytes, stream u64, word position u128), metadata string, then
//! named parameter stores and the marker `END!`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::pretrain::ModelState;
use crate::optim::AdamState;
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"AVD2VCKPT";
pub const VERSION: u32 = 1;
const END: &[u8; 4] = b"END!";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON, normally the resolved model configuration.
    pub meta: String,
    pub step: u64,
    pub opt_t: u64,
    pub rng: Rng64,
    pub stores: Vec<(String, ParamStore<f32>)>,
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Audio => 0,
        ParamGroup::Video => 1,
        ParamGroup::Fusion => 2,
        ParamGroup::Encoder => 3,
        ParamGroup::Decoder => 4,
    }
}

fn group_from(c: u8) -> Result<ParamGroup> {
    Ok(match c {
        0 => ParamGroup::Audio,
        1 => ParamGroup::Video,
        2 => ParamGroup::Fusion,
        3 => ParamGroup::Encoder,
        4 => ParamGroup::Decoder,
        _ => return Err(Error::format(format!("unknown parameter group code {c}"))),
    })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(format!("truncated checkpoint at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("invalid UTF-8 in checkpoint"))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        out.extend(self.opt_t.to_le_bytes());
        out.extend(self.rng.get_seed());
        out.extend(self.rng.get_stream().to_le_bytes());
        out.extend(self.rng.get_word_pos().to_le_bytes());
        put_str(&mut out, &self.meta);
        out.extend((self.stores.len() as u32).to_le_bytes());
        for (name, store) in &self.stores {
            put_str(&mut out, name);
            out.extend((store.len() as u32).to_le_bytes());
            for id in store.ids() {
                let t = store.get(id);
                put_str(&mut out, store.name(id));
                out.push(group_code(store.group(id)));
                out.extend((t.ndim() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend((d as u64).to_le_bytes());
                }
                for &x in t.data() {
                    out.extend(x.to_le_bytes());
                }
            }
        }
        out.extend(END);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let step = r.u64()?;
        let opt_t = r.u64()?;
        let mut rng = ChaCha8Rng::from_seed(r.arr::<32>()?);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(u128::from_le_bytes(r.arr()?));
        let meta = r.string()?;
        let n_stores = r.u32()? as usize;
        let mut stores = Vec::with_capacity(n_stores.min(64));
        for _ in 0..n_stores {
            let sname = r.string()?;
            let n = r.u32()? as usize;
            let mut store = ParamStore::new();
            for _ in 0..n {
                let pname = r.string()?;
                let group = group_from(r.u8()?)?;
                let nd = r.u32()? as usize;
                let mut shape = Vec::with_capacity(nd.min(8));
                for _ in 0..nd {
                    shape.push(r.u64()? as usize);
                }
                let numel: usize = shape.iter().product();
                let bytes = r.take(numel.checked_mul(4).ok_or_else(|| Error::format("parameter too large"))?)?;
                let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                if store.id_of(&pname).is_some() {
                    return Err(Error::format(format!("duplicate parameter {pname}")));
                }
                store.add(pname, group, Tensor::new(&shape, data)?);
            }
            stores.push((sname, store));
        }
        if r.take(END.len()).ok() != Some(END.as_slice()) {
            return Err(Error::format("checkpoint end marker missing"));
        }
        if r.pos != buf.len() {
            return Err(Error::format("trailing bytes after checkpoint end marker"));
        }
        Ok(Checkpoint { meta, step, opt_t, rng, stores })
    }

    /// Written to a sibling temporary file and renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn store(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.stores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::format(format!("checkpoint has no '{name}' parameters")))
    }

    fn take_store(&mut self, name: &str) -> Result<ParamStore<f32>> {
        let i = self
            .stores
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format(format!("checkpoint has no '{name}' parameters")))?;
        Ok(self.stores.remove(i).1)
    }
}

impl ModelState {
    pub fn to_checkpoint(&self, meta: &str) -> Checkpoint {
        Checkpoint {
            meta: meta.to_string(),
            step: self.step,
            opt_t: self.opt.t,
            rng: self.rng.clone(),
            stores: vec![
                ("student".into(), self.student.clone()),
                ("teacher".into(), self.teacher.clone()),
                ("adam_m".into(), self.opt.m.clone()),
                ("adam_v".into(), self.opt.v.clone()),
            ],
        }
    }

    pub fn from_checkpoint(mut ck: Checkpoint) -> Result<Self> {
        let student = ck.take_store("student")?;
        let teacher = ck.take_store("teacher")?;
        let m = ck.take_store("adam_m")?;
        let v = ck.take_store("adam_v")?;
        for other in [&teacher, &m, &v] {
            if !student.same_structure(other) {
                return Err(Error::format("checkpoint stores differ in structure"));
            }
        }
        Ok(ModelState { student, teacher, opt: AdamState { m, v, t: ck.opt_t }, step: ck.step, rng: ck.rng })
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        self.to_checkpoint(meta).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let ck = Checkpoint::load(path)?;
        let meta = ck.meta.clone();
        Ok((Self::from_checkpoint(ck)?, meta))
    }
}
