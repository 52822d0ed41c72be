//! Named weight collections and the `MFWT0001` container format.
//!
//! A container is laid out as:
//!
//! ```text
//! "MFWT0001" | u64 LE header length N | N bytes of JSON | payload
//! ```
//!
//! The JSON header lists every tensor as `{name, dtype, shape, offset, nbytes}`
//! together with the producing architecture's `arch_id`. Offsets are relative to
//! the start of the payload; every tensor starts on an 8-byte boundary and gaps
//! are zero-filled. Weight tensors are always `f32`; mask tensors use the
//! bit-packed `"bit"` dtype (LSB first).

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 8] = b"MFWT0001";
const ALIGN: usize = 8;

/// A dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bit-level equality (distinguishes `-0.0` from `0.0`, equal NaN payloads compare equal).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!(
            "shape {shape:?} must be non-empty with positive dims"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} holds {n} elements, payload has {len}"
        )));
    }
    Ok(())
}

/// Ordered, named collection of parameter tensors for one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightSet {
    arch_id: String,
    tensors: IndexMap<String, Tensor>,
}

impl WeightSet {
    pub fn new(arch_id: impl Into<String>) -> Self {
        WeightSet {
            arch_id: arch_id.into(),
            tensors: IndexMap::new(),
        }
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn set_arch_id(&mut self, arch_id: impl Into<String>) {
        self.arch_id = arch_id.into();
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Shape(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Drop every tensor whose name fails `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }

    /// Identical name sets and shapes. An `arch_id` mismatch only warns.
    pub fn check_compatible(&self, other: &WeightSet) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(Error::incompatible(name, "missing from right-hand side")),
                Some(o) if o.shape != t.shape => {
                    return Err(Error::incompatible(
                        name,
                        format!("shape {:?} vs {:?}", t.shape, o.shape),
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::incompatible(extra, "missing from left-hand side"));
        }
        if self.arch_id != other.arch_id {
            log::warn!(
                "arch_id mismatch (`{}` vs `{}`); shapes agree, continuing",
                self.arch_id,
                other.arch_id
            );
        }
        Ok(())
    }

    /// Elementwise combination of two compatible sets, in `self`'s tensor order.
    pub fn zip_map(&self, other: &WeightSet, f: impl Fn(f32, f32) -> f32) -> Result<WeightSet> {
        self.check_compatible(other)?;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let o = &other.tensors[name];
                let data = t.data.iter().zip(&o.data).map(|(&x, &y)| f(x, y)).collect();
                (
                    name.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        Ok(WeightSet {
            arch_id: self.arch_id.clone(),
            tensors,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> WeightSet {
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data: t.data.iter().map(|&x| f(x)).collect(),
                    },
                )
            })
            .collect();
        WeightSet {
            arch_id: self.arch_id.clone(),
            tensors,
        }
    }

    /// Bit-level equality of every tensor, including names, order and `arch_id`.
    pub fn bit_eq(&self, other: &WeightSet) -> bool {
        self.arch_id == other.arch_id
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Merge the tensors of `other` into a copy of `self` (names must not collide).
    pub fn union(&self, other: &WeightSet) -> Result<WeightSet> {
        let mut out = self.clone();
        for (name, t) in &other.tensors {
            out.insert(name.clone(), t.clone())?;
        }
        Ok(out)
    }
}

/// `ws + a * other`, elementwise.
pub fn axpy(ws: &WeightSet, other: &WeightSet, a: f32) -> Result<WeightSet> {
    ws.zip_map(other, |x, y| x + a * y)
}

/// `alpha * a + (1 - alpha) * b`, elementwise. Coordinates where `a` and `b`
/// agree are copied through untouched so that interpolating a set with itself
/// is exact.
pub fn lerp(a: &WeightSet, b: &WeightSet, alpha: f32) -> Result<WeightSet> {
    let beta = 1.0 - alpha;
    a.zip_map(b, |x, y| if x == y { x } else { alpha * x + beta * y })
}

/// Global Euclidean distance between two compatible sets, accumulated in f64.
pub fn weight_distance(a: &WeightSet, b: &WeightSet) -> Result<f64> {
    a.check_compatible(b)?;
    let mut acc = 0.0f64;
    for (name, t) in &a.tensors {
        let o = &b.tensors[name];
        for (&x, &y) in t.data.iter().zip(&o.data) {
            let d = x as f64 - y as f64;
            acc += d * d;
        }
    }
    Ok(acc.sqrt())
}

/// Payload of a container entry.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    Bits(Vec<bool>),
}

impl Payload {
    fn dtype(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::Bits(_) => "bit",
        }
    }

    fn encoded_len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len() * 4,
            Payload::Bits(v) => v.len().div_ceil(8),
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::Bits(v) => {
                for chunk in v.chunks(8) {
                    let mut byte = 0u8;
                    for (i, &bit) in chunk.iter().enumerate() {
                        if bit {
                            byte |= 1 << i;
                        }
                    }
                    out.push(byte);
                }
            }
        }
    }
}

/// One named entry of a container.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch_id: String,
    tensors: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Encode entries into the container byte layout.
pub fn encode_container(arch_id: &str, entries: &[Entry]) -> Vec<u8> {
    let mut header = Header {
        arch_id: arch_id.to_string(),
        tensors: Vec::with_capacity(entries.len()),
    };
    let mut offset = 0;
    for e in entries {
        let nbytes = e.payload.encoded_len();
        header.tensors.push(HeaderEntry {
            name: e.name.clone(),
            dtype: e.payload.dtype().to_string(),
            shape: e.shape.clone(),
            offset,
            nbytes,
        });
        offset = align_up(offset + nbytes);
    }
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    // Pad so the payload itself starts 8-byte aligned in the file.
    while (16 + json.len()) % ALIGN != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let payload_start = out.len();
    for (e, h) in entries.iter().zip(&header.tensors) {
        out.resize(payload_start + h.offset, 0);
        e.payload.encode_into(&mut out);
    }
    out.resize(payload_start + offset, 0);
    out
}

/// Decode a container. `accept` lists the dtypes the caller understands.
pub fn decode_container(bytes: &[u8], accept: &[&str]) -> Result<(String, Vec<Entry>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(n)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| FormatError::MalformedHeader(format!("header length {n} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut entries = Vec::with_capacity(header.tensors.len());
    for h in header.tensors {
        if !accept.contains(&h.dtype.as_str()) {
            return Err(FormatError::UnsupportedDtype {
                name: h.name,
                dtype: h.dtype,
            }
            .into());
        }
        let count: usize = h.shape.iter().product();
        let expected = match h.dtype.as_str() {
            "f32" => count * 4,
            "bit" => count.div_ceil(8),
            _ => unreachable!("filtered by accept list"),
        };
        if h.shape.is_empty() || h.shape.contains(&0) || expected != h.nbytes {
            return Err(FormatError::ShapeMismatch {
                name: h.name,
                shape: h.shape,
                nbytes: h.nbytes,
            }
            .into());
        }
        let end = h.offset + h.nbytes;
        if end > payload.len() {
            return Err(FormatError::PayloadLength {
                name: h.name,
                expected: h.nbytes,
                actual: payload.len().saturating_sub(h.offset),
            }
            .into());
        }
        let raw = &payload[h.offset..end];
        let decoded = match h.dtype.as_str() {
            "f32" => Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            _ => Payload::Bits((0..count).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect()),
        };
        entries.push(Entry {
            name: h.name,
            shape: h.shape,
            payload: decoded,
        });
    }
    Ok((header.arch_id, entries))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Serialize a weight set to container bytes.
pub fn encode_weights(ws: &WeightSet) -> Vec<u8> {
    let entries: Vec<Entry> = ws
        .iter()
        .map(|(name, t)| Entry {
            name: name.to_string(),
            shape: t.shape.clone(),
            payload: Payload::F32(t.data.clone()),
        })
        .collect();
    encode_container(&ws.arch_id, &entries)
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightSet> {
    let (arch_id, entries) = decode_container(bytes, &["f32"])?;
    let mut ws = WeightSet::new(arch_id);
    for e in entries {
        let Payload::F32(data) = e.payload else {
            unreachable!("only f32 accepted")
        };
        ws.insert(e.name, Tensor { shape: e.shape, data })
            .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    }
    Ok(ws)
}

pub fn save_weights(ws: &WeightSet, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_weights(ws))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightSet> {
    decode_weights(&read_bytes(path.as_ref())?)
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical serialization of a weight set.
pub fn weights_hash(ws: &WeightSet) -> String {
    sha256_hex(&encode_weights(ws))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws1(vals: &[f32]) -> WeightSet {
        let mut ws = WeightSet::new("t");
        ws.insert("w", Tensor::from_vec(vals.to_vec())).unwrap();
        ws
    }

    #[test]
    fn round_trip_two_by_two() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mfwt");
        let mut ws = WeightSet::new("mlp");
        ws.insert("w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        save_weights(&ws, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back = load_weights(&path).unwrap();
        assert!(back.bit_eq(&ws));
        assert_eq!(encode_weights(&back), bytes);
    }

    #[test]
    fn empty_set_round_trips() {
        let ws = WeightSet::new("empty");
        let back = decode_weights(&encode_weights(&ws)).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.arch_id(), "empty");
    }

    #[test]
    fn special_values_keep_their_bits() {
        let vals = [1.5f32, -0.0, 3.0e-39, f32::NAN, f32::INFINITY];
        let ws = ws1(&vals);
        let back = decode_weights(&encode_weights(&ws)).unwrap();
        let got: Vec<u32> = back.get("w").unwrap().data().iter().map(|x| x.to_bits()).collect();
        let want: Vec<u32> = vals.iter().map(|x| x.to_bits()).collect();
        assert_eq!(got, want);
        assert!(3.0e-39f32.is_subnormal());
    }

    #[test]
    fn offsets_are_aligned_and_payload_starts_aligned() {
        let mut ws = WeightSet::new("x");
        ws.insert("a", Tensor::from_vec(vec![1.0; 3])).unwrap();
        ws.insert("b", Tensor::from_vec(vec![2.0; 5])).unwrap();
        let bytes = encode_weights(&ws);
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!((16 + n) % 8, 0);
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
        let offsets: Vec<u64> = header["tensors"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["offset"].as_u64().unwrap())
            .collect();
        assert_eq!(offsets, vec![0, 16]);
        // 12 bytes of `a`, 4 bytes zero pad, then `b`.
        assert_eq!(&bytes[16 + n + 12..16 + n + 16], &[0, 0, 0, 0]);
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let bytes = encode_weights(&ws1(&[1.0, 2.0, 3.0, 4.0]));
        let err = decode_weights(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(FormatError::PayloadLength { .. })));
    }

    #[test]
    fn f64_dtype_is_rejected() {
        let header = br#"{"arch_id":"a","tensors":[{"name":"w","dtype":"f64","shape":[1],"offset":0,"nbytes":8}]}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0; 8]);
        let err = decode_weights(&bytes).unwrap_err();
        match err {
            Error::Format(f @ FormatError::UnsupportedDtype { .. }) => assert_eq!(f.code(), 13),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_header_and_magic() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&3u64.to_le_bytes());
        bytes.extend_from_slice(b"{{{");
        assert!(matches!(
            decode_weights(&bytes),
            Err(Error::Format(FormatError::MalformedHeader(_)))
        ));
        assert!(matches!(
            decode_weights(b"NOTMAGIC00000000"),
            Err(Error::Format(FormatError::BadMagic))
        ));
    }

    #[test]
    fn shape_payload_mismatch() {
        let header = br#"{"arch_id":"a","tensors":[{"name":"w","dtype":"f32","shape":[3],"offset":0,"nbytes":8}]}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0; 16]);
        assert!(matches!(
            decode_weights(&bytes),
            Err(Error::Format(FormatError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn bits_pack_lsb_first() {
        let entries = vec![Entry {
            name: "m".into(),
            shape: vec![10],
            payload: Payload::Bits(vec![
                true, false, false, false, false, false, false, true, true, false,
            ]),
        }];
        let bytes = encode_container("a", &entries);
        let (_, back) = decode_container(&bytes, &["bit"]).unwrap();
        assert_eq!(back, entries);
        assert!(decode_weights(&bytes).is_err());
    }

    #[test]
    fn axpy_examples() {
        let a = ws1(&[1.0, 2.0]);
        let b = ws1(&[3.0, 4.0]);
        assert_eq!(axpy(&a, &b, -1.0).unwrap().get("w").unwrap().data(), &[-2.0, -2.0]);
        assert!(axpy(&a, &b, 0.0).unwrap().bit_eq(&a));
        let neg = a.map(|x| -x);
        assert!(axpy(&a, &neg, 1.0).unwrap().iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn incompatible_names_first_mismatch() {
        let a = ws1(&[1.0]);
        let mut b = WeightSet::new("t");
        b.insert("v", Tensor::from_vec(vec![1.0])).unwrap();
        match axpy(&a, &b, 1.0).unwrap_err() {
            Error::Incompatible { tensor, .. } => assert_eq!(tensor, "w"),
            e => panic!("{e:?}"),
        }
        let c = ws1(&[1.0, 2.0]);
        assert!(lerp(&a, &c, 0.5).is_err());
        assert!(weight_distance(&a, &c).is_err());
    }

    #[test]
    fn arch_id_mismatch_is_not_an_error() {
        let a = ws1(&[1.0]);
        let mut b = ws1(&[2.0]);
        b.set_arch_id("other");
        assert!(axpy(&a, &b, 1.0).is_ok());
    }

    #[test]
    fn lerp_examples() {
        let a = ws1(&[2.0]);
        let b = ws1(&[4.0]);
        assert_eq!(lerp(&a, &b, 0.5).unwrap().get("w").unwrap().data(), &[3.0]);
        assert!(lerp(&a, &b, 1.0).unwrap().bit_eq(&a));
        assert!(lerp(&a, &b, 0.0).unwrap().bit_eq(&b));
        assert!(lerp(&a, &a, 0.3).unwrap().bit_eq(&a));
    }

    #[test]
    fn distance_examples() {
        let a = ws1(&[3.0, 0.0]);
        let b = ws1(&[0.0, 4.0]);
        assert_eq!(weight_distance(&a, &b).unwrap(), 5.0);
        assert_eq!(weight_distance(&a, &a).unwrap(), 0.0);
    }
}
