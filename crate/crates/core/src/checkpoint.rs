//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "FAVICKPT"
//! version   u32      (currently 1)
//! arch      u32 length + UTF-8 architecture descriptor
//! count     u32      number of parameters
//! repeated: u32 length + UTF-8 name, u32 rank, rank × u64 dims, f64 values
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::ParamGraph;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FAVICKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub descriptor: String,
    pub params: ParamGraph,
}

pub fn encode(descriptor: &str, graph: &ParamGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * graph.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, descriptor);
    out.extend_from_slice(&(graph.len() as u32).to_le_bytes());
    for id in graph.ids() {
        put_str(&mut out, graph.name(id));
        let t = graph.value(id);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let descriptor = r.string()?;
    let count = r.u32()?;
    let mut params = ParamGraph::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(name, Tensor::new(&shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { descriptor, params })
}

pub fn save(path: &Path, descriptor: &str, graph: &ParamGraph) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(descriptor, graph))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Copies checkpoint values into an already-built graph, checking names and shapes.
pub fn restore_into(ckpt: &Checkpoint, graph: &mut ParamGraph) -> Result<()> {
    if ckpt.params.len() != graph.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match model ({})",
            ckpt.params.len(),
            graph.len()
        )));
    }
    for id in graph.ids() {
        let name = graph.name(id).to_string();
        let src = ckpt
            .params
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let v = ckpt.params.value(src);
        if v.shape() != graph.value(id).shape() {
            return Err(Error::shape("restore", graph.value(id).shape(), v.shape()));
        }
        *graph.value_mut(id) = v.clone();
    }
    graph.clear_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(any::<f64>(), 1..40),
            desc in "[a-z0-9:;=-]{0,30}",
        ) {
            let mut g = ParamGraph::new();
            g.add("a.weight", Tensor::vector(values.clone())).unwrap();
            g.add("b", Tensor::new(&[1, 2], vec![f64::MIN_POSITIVE, -0.0]).unwrap()).unwrap();
            let ck = decode(&encode(&desc, &g)).unwrap();
            prop_assert_eq!(&ck.descriptor, &desc);
            let back = ck.params.values()[0].data();
            for (a, b) in values.iter().zip(back) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(ck.params.values()[1].data()[1].to_bits(), (-0.0f64).to_bits());
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut g = ParamGraph::new();
        g.add("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let bytes = encode("x", &g);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn save_load_restore() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let mut g = ParamGraph::new();
        g.add("w", Tensor::vector(vec![0.1, 0.2])).unwrap();
        save(&path, "mlp", &g).unwrap();
        let ck = load(&path).unwrap();
        let mut fresh = ParamGraph::new();
        fresh.add("w", Tensor::zeros(&[2])).unwrap();
        restore_into(&ck, &mut fresh).unwrap();
        assert_eq!(fresh.values()[0].data(), &[0.1, 0.2]);
        let mut wrong = ParamGraph::new();
        wrong.add("v", Tensor::zeros(&[2])).unwrap();
        assert!(restore_into(&ck, &mut wrong).is_err());
    }
}
