//! Binary checkpoint files.
//!
//! Layout (little-endian): the 8-byte magic `LBCKPT1\n`, a `u32` length and
//! that many bytes of JSON header (network spec and binarization flags),
//! then a `u32` tensor count followed by each tensor as `u32` rank, `u32`
//! dims and `f32` values. Parameters come first in layer order, then
//! batch-norm running statistics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binarize::BinarizationState;
use crate::error::{Error, Result};
use crate::nn::network::Network;
use crate::nn::spec::NetworkSpec;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LBCKPT1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    binarization: String,
}

pub fn to_bytes(net: &Network<f32>) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        spec: net.spec().clone(),
        binarization: net.binarization().bitstring(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let tensors: Vec<&Tensor<f32>> = net.params().chain(net.buffers()).collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Data(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let header_len = r.u32()?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let spec = NetworkSpec::new(header.spec.input_shape, header.spec.layers)?;
    let mut net = Network::<f32>::new(spec, 0)?;
    net.set_binarization(BinarizationState::parse_bitstring(&header.binarization)?)?;

    let count = r.u32()?;
    let expected = net.param_count() + net.buffers().count();
    if count != expected {
        return Err(Error::Data(format!("checkpoint holds {count} tensors, network needs {expected}")));
    }
    let mut loaded = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Data("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        loaded.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    let mut loaded = loaded.into_iter();
    for slot in net.params_mut() {
        let t = loaded.next().unwrap();
        t.expect_shape(slot.shape(), "checkpoint parameter")?;
        *slot = t;
    }
    for slot in net.buffers_mut() {
        let t = loaded.next().unwrap();
        t.expect_shape(slot.shape(), "checkpoint buffer")?;
        *slot = t;
    }
    Ok(net)
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network<f32>> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::Mode;

    #[test]
    fn round_trip_preserves_predictions() {
        let spec = NetworkSpec::parse("c2-5-3", &[1, 4, 4]).unwrap();
        let mut net = Network::<f32>::new(spec, 9).unwrap();
        let x = Tensor::from_fn(&[4, 1, 4, 4], |i| (i % 7) as f32 * 0.2 - 0.5);
        net.forward(&x, Mode::Train).unwrap();
        net.set_binarization(BinarizationState::parse_bitstring("101").unwrap()).unwrap();
        let back = from_bytes(&to_bytes(&net)).unwrap();
        assert_eq!(back.binarization(), net.binarization());
        assert_eq!(back.predict(&x).unwrap(), net.predict(&x).unwrap());
        assert!(back.params().eq(net.params()));
        assert!(back.buffers().eq(net.buffers()));
    }

    #[test]
    fn rejects_damaged_files() {
        let net = Network::<f32>::new(NetworkSpec::parse("3-2", &[2]).unwrap(), 0).unwrap();
        let bytes = to_bytes(&net);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        assert!(from_bytes(b"nonsense").is_err());
    }
}
