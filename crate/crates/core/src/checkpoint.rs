//! Versioned binary checkpoints for adapters, routing logits and whole models.
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! magic    8 bytes   "TPOLYCKP"
//! version  u32       FORMAT_VERSION
//! kind     u8        1 = single adapter, 2 = model
//! method   u8        method tag 1..=6 (0 = empty adapter)
//! dims     7 x u64   d_in d_out r N R q_in q_out
//! body
//! ```
//!
//! A single-adapter body is one adapter record. A model body is
//! `modules u64 | temperature f64 | layers u32` followed per layer by the base
//! tensor, an adapter record and a routing record.
//!
//! * adapter record: `tag u8 | scale f64 | count u32 | tensor...`, tensors in
//!   `Parameterized::param_views` order
//! * routing record: `0u8`, or `1u8 | variant tag u8 | tensor`
//! * tensor: `ndim u32 | ndim x u64 shape | f64 payload`, row-major

use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayViewD, Ix2, Ix3, Ix4, IxDyn};

use crate::adapters::{Adapter, AdapterLayer, LoraAdapter, TLoraFactors};
use crate::error::{Error, Result};
use crate::harness::model::Model;
use crate::method::{Method, Parameterized, RoutingVariant};
use crate::routing::{PolyInventory, RoutingLogits, TensorPolyInventory, TensorTrainInventory};
use crate::tensor::{TensorDims, TensorTrainCores};

pub const MAGIC: &[u8; 8] = b"TPOLYCKP";
pub const FORMAT_VERSION: u32 = 1;
const KIND_ADAPTER: u8 = 1;
const KIND_MODEL: u8 = 2;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: ArrayViewD<'_, f64>) -> Result<()> {
        self.u32(t.ndim())?;
        t.shape().iter().for_each(|&d| self.u64(d));
        t.iter().for_each(|&v| self.f64(v));
        Ok(())
    }
    fn header(&mut self, kind: u8, method: Option<Method>, dims: &TensorDims) -> Result<()> {
        self.buf.extend_from_slice(MAGIC);
        self.u32(FORMAT_VERSION as usize)?;
        self.u8(kind);
        self.u8(method.map_or(0, Method::tag));
        for v in [dims.d_in, dims.d_out, dims.r, dims.order, dims.rank, dims.q_in, dims.q_out] {
            self.u64(v);
        }
        Ok(())
    }
    fn adapter(&mut self, adapter: &Adapter) -> Result<()> {
        self.u8(adapter.method().map_or(0, Method::tag));
        self.f64(adapter.scale());
        let views = adapter.param_views();
        self.u32(views.len())?;
        views.into_iter().try_for_each(|v| self.tensor(v))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in usize")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self) -> Result<ArrayD<f64>> {
        let ndim = self.u32()?;
        if ndim > 8 {
            return Err(Error::Format(format!("tensor with {ndim} axes")));
        }
        let shape = (0..ndim).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Format("tensor payload exceeds checkpoint".into()))?;
        let bytes = self.take(len * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Format(e.to_string()))
    }
    fn header(&mut self, kind: u8) -> Result<(Option<Method>, TensorDims)> {
        if self.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let k = self.u8()?;
        if k != kind {
            return Err(Error::Format(format!("checkpoint kind {k}, expected {kind}")));
        }
        let method = method_from_tag(self.u8()?)?;
        let v: Vec<usize> = (0..7).map(|_| self.u64()).collect::<Result<_>>()?;
        let dims = TensorDims::new(v[0], v[1], v[2], v[3], v[4])?;
        if (dims.q_in, dims.q_out) != (v[5], v[6]) {
            return Err(Error::Format("stored mode sizes disagree with dimensions".into()));
        }
        Ok((method, dims))
    }
    fn adapter(&mut self, dims: &TensorDims) -> Result<Adapter> {
        let method = method_from_tag(self.u8()?)?;
        let scale = self.f64()?;
        let count = self.u32()?;
        let tensors = (0..count).map(|_| self.tensor()).collect::<Result<Vec<_>>>()?;
        build_adapter(method, scale, tensors, dims)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn method_from_tag(tag: u8) -> Result<Option<Method>> {
    if tag == 0 {
        return Ok(None);
    }
    Method::from_tag(tag).map(Some).ok_or_else(|| Error::Format(format!("unknown method tag {tag}")))
}

fn dim<D: ndarray::Dimension>(t: ArrayD<f64>) -> Result<ndarray::Array<f64, D>> {
    t.into_dimensionality::<D>().map_err(|e| Error::Format(e.to_string()))
}

fn build_adapter(method: Option<Method>, scale: f64, tensors: Vec<ArrayD<f64>>, dims: &TensorDims) -> Result<Adapter> {
    let expect = |n: usize| -> Result<()> {
        if tensors.len() != n {
            return Err(Error::Format(format!("{method:?} adapter with {} tensors, expected {n}", tensors.len())));
        }
        Ok(())
    };
    let Some(method) = method else {
        expect(0)?;
        return Ok(Adapter::None);
    };
    if method == Method::Tpx {
        let cores: Vec<Array4<f64>> = tensors.into_iter().map(dim::<Ix4>).collect::<Result<_>>()?;
        return Ok(Adapter::TensorTrain(TensorTrainInventory::new(TensorTrainCores::new(cores)?, dims.d_in, dims.d_out, scale)?));
    }
    expect(2)?;
    let mut it = tensors.into_iter();
    let (a, b) = (it.next().expect("two tensors"), it.next().expect("two tensors"));
    Ok(match method {
        Method::Lora => Adapter::Lora(LoraAdapter::new(dim::<Ix2>(a)?, dim::<Ix2>(b)?, scale)?),
        Method::Poly => {
            let (a, b): (Array3<f64>, Array3<f64>) = (dim::<Ix3>(a)?, dim::<Ix3>(b)?);
            Adapter::Poly(PolyInventory::new(a, b, scale)?)
        }
        Method::Tlora | Method::Tp1 | Method::Tp2 => {
            let f = TLoraFactors::new(dim::<Ix4>(a)?, dim::<Ix4>(b)?, *dims, scale)?;
            match method {
                Method::Tlora => Adapter::Tlora(f),
                Method::Tp1 => Adapter::TensorPoly(TensorPolyInventory::new(f, RoutingVariant::Tp1)?),
                _ => Adapter::TensorPoly(TensorPolyInventory::new(f, RoutingVariant::Tp2)?),
            }
        }
        Method::Tpx => unreachable!(),
    })
}

/// Serializes one adapter together with its dimensions.
pub fn encode_adapter(adapter: &Adapter, dims: &TensorDims) -> Result<Vec<u8>> {
    if let Some((d_in, d_out)) = adapter.io_dims() {
        if (d_in, d_out) != (dims.d_in, dims.d_out) {
            return Err(Error::shape("adapter dimensions", &[dims.d_in, dims.d_out], &[d_in, d_out]));
        }
    }
    let mut w = Writer::default();
    w.header(KIND_ADAPTER, adapter.method(), dims)?;
    w.adapter(adapter)?;
    Ok(w.buf)
}

pub fn decode_adapter(bytes: &[u8]) -> Result<(Adapter, TensorDims)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let (method, dims) = r.header(KIND_ADAPTER)?;
    let adapter = r.adapter(&dims)?;
    if adapter.method() != method {
        return Err(Error::Format("adapter record disagrees with header method".into()));
    }
    if adapter.io_dims().is_some_and(|io| io != (dims.d_in, dims.d_out)) {
        return Err(Error::Format("adapter tensors disagree with header dimensions".into()));
    }
    r.finish()?;
    Ok((adapter, dims))
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.header(KIND_MODEL, Some(model.method), &model.dims)?;
    w.u64(model.modules);
    w.f64(model.temperature);
    w.u32(model.layers.len())?;
    for (layer, routing) in model.layers.iter().zip(&model.routing) {
        w.tensor(layer.w0().view().into_dyn())?;
        w.adapter(&layer.adapter)?;
        match routing {
            None => w.u8(0),
            Some(z) => {
                w.u8(1);
                w.u8(z.variant.tag());
                w.tensor(z.z.view())?;
            }
        }
    }
    Ok(w.buf)
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let (method, dims) = r.header(KIND_MODEL)?;
    let method = method.ok_or_else(|| Error::Format("model checkpoint without method".into()))?;
    let modules = r.u64()?;
    let temperature = r.f64()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    let mut routing = Vec::with_capacity(count.min(1024));
    for l in 0..count {
        let w0: Array2<f64> = dim::<Ix2>(r.tensor()?)?;
        let (d_out, d_in) = w0.dim();
        let layer_dims = TensorDims::new(d_in, d_out, dims.r, dims.order, dims.rank)?;
        let adapter = r.adapter(&layer_dims)?;
        layers.push(AdapterLayer::new(w0, adapter, l)?);
        routing.push(match r.u8()? {
            0 => None,
            1 => {
                let tag = r.u8()?;
                let variant = RoutingVariant::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown routing tag {tag}")))?;
                Some(RoutingLogits::new(variant, r.tensor()?)?)
            }
            other => return Err(Error::Format(format!("bad routing flag {other}"))),
        });
    }
    r.finish()?;
    Ok(Model {
        method,
        dims,
        modules,
        layers,
        routing,
        temperature,
    })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    decode_model(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::model::init_adapter;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(a: &Adapter) -> Vec<u64> {
        a.param_views().iter().flat_map(|v| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn adapters_roundtrip_bit_exact(tag in 1u8..=6, d_in in 2usize..12, d_out in 2usize..12, r in 1usize..4, n in 1usize..4, big_r in 1usize..4, seed in any::<u64>()) {
            let method = Method::from_tag(tag).unwrap();
            let n = if method == Method::Tpx { n.max(2) } else { n };
            let dims = TensorDims::new(d_in, d_out, r, n, big_r).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut adapter = init_adapter(method, dims, 3, 1.5, 0.3, &mut rng).unwrap();
            // include awkward payloads
            if let Some(mut v) = adapter.param_views_mut().into_iter().next() {
                let s = v.as_slice_mut().unwrap();
                s[0] = -0.0;
                if s.len() > 1 { s[1] = f64::MIN_POSITIVE / 3.0; }
            }
            let bytes = encode_adapter(&adapter, &dims).unwrap();
            let (back, back_dims) = decode_adapter(&bytes).unwrap();
            prop_assert_eq!(back_dims, dims);
            prop_assert_eq!(back.method(), adapter.method());
            prop_assert_eq!(bits(&back), bits(&adapter));
            prop_assert_eq!(encode_adapter(&back, &dims).unwrap(), bytes);
        }
    }

    #[test]
    fn model_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for method in Method::ALL {
            let dims = TensorDims::new(7, 5, 2, 2, 3).unwrap();
            let bases = vec![
                Array::from_shape_simple_fn((5, 7), || rng.random_range(-1.0..1.0)),
                Array::from_shape_simple_fn((5, 5), || rng.random_range(-1.0..1.0)),
            ];
            let mut m = Model::init(method, dims, 4, &bases, 3, 1.0, 0.2, 0.7, &mut rng).unwrap();
            if method == Method::Tp2 {
                m.routing[1] = None;
            }
            let bytes = encode_model(&m).unwrap();
            let back = decode_model(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode_model(&back).unwrap(), bytes);
            assert_eq!(back.base_checksum(), m.base_checksum());
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let dims = TensorDims::square(6, 1, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = init_adapter(Method::Tlora, dims, 1, 1.0, 0.1, &mut rng).unwrap();
        let bytes = encode_adapter(&a, &dims).unwrap();
        assert!(decode_adapter(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_adapter(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_adapter(&bad).is_err());
        let mut ver = bytes.clone();
        ver[8] = 9;
        assert!(decode_adapter(&ver).is_err());
        assert!(decode_model(&bytes).is_err());
        let mut huge = bytes;
        // first tensor's leading axis length
        let at = 8 + 4 + 2 + 56 + 1 + 8 + 4 + 4;
        huge[at..at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_adapter(&huge).is_err());
    }

    #[test]
    fn empty_adapter_roundtrip() {
        let dims = TensorDims::square(4, 1, 1, 1).unwrap();
        let bytes = encode_adapter(&Adapter::None, &dims).unwrap();
        assert_eq!(decode_adapter(&bytes).unwrap().0, Adapter::None);
    }
}
