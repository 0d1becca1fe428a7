use super::tensor::{NnError, Tensor};
use rand::Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: parameter layouts are fixed by code.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(!self.lookup.contains_key(name), "duplicate parameter {name}");
        self.lookup.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], bound: f32, rng: &mut R) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 }).collect();
        self.add(name, Tensor::new(shape, data).expect("shape matches"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Copies values from `other`, which must have the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if other.names != self.names {
            return Err(NnError::Checkpoint("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(NnError::Checkpoint(format!("shape {:?} vs {:?}", dst.shape(), src.shape())));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"CNAVPRM\0";
const VERSION: u32 = 1;

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), NnError> {
    let mut buf = Vec::with_capacity(16 + store.scalar_count() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.names.iter().zip(&store.tensors) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, NnError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| NnError::Checkpoint("name is not utf-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 4)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if store.id(&name).is_some() {
            return Err(NnError::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.add(&name, Tensor::new(&shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_uniform("a.w", &[3, 4], 0.7, &mut rng);
        store.add("b", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.bin");
        save_checkpoint(&store, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.len(), 2);
        for id in store.ids() {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(store.get(id)), bits(back.get(id)));
            assert_eq!(store.name(id), back.name(id));
        }
        std::fs::write(&p, b"garbage").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
