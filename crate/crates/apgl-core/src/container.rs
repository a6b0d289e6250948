//! Versioned binary array container used for datasets, graphs, and
//! checkpoints.
//!
//! Layout: magic `APGL`, format version (u32 LE), then zero or more
//! entries of [name length u16 LE, name bytes (UTF-8), dtype tag u8
//! (0=f64, 1=f32, 2=u32, 3=u64), rank u8, dims (u64 LE each), raw
//! little-endian data]. Entries keep insertion order, so writing the
//! same logical content twice yields identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{CoreError, Result};
use crate::num::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"APGL";
pub const FORMAT_VERSION: u32 = 1;

/// Refuse to allocate absurd entry sizes from corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 33;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64 { dims: Vec<usize>, data: Vec<f64> },
    F32 { dims: Vec<usize>, data: Vec<f32> },
    U32 { dims: Vec<usize>, data: Vec<u32> },
    U64 { dims: Vec<usize>, data: Vec<u64> },
}

impl Entry {
    fn dtype_tag(&self) -> u8 {
        match self {
            Entry::F64 { .. } => 0,
            Entry::F32 { .. } => 1,
            Entry::U32 { .. } => 2,
            Entry::U64 { .. } => 3,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            Entry::F64 { dims, .. }
            | Entry::F32 { dims, .. }
            | Entry::U32 { dims, .. }
            | Entry::U64 { dims, .. } => dims,
        }
    }

    fn element_count(&self) -> usize {
        match self {
            Entry::F64 { data, .. } => data.len(),
            Entry::F32 { data, .. } => data.len(),
            Entry::U32 { data, .. } => data.len(),
            Entry::U64 { data, .. } => data.len(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: IndexMap<String, Entry>,
}

fn check_dims(name: &str, dims: &[usize], len: usize) -> Result<()> {
    let prod: usize = dims.iter().product();
    if prod != len {
        return Err(CoreError::Container(format!(
            "entry {name}: dims {dims:?} imply {prod} elements, data has {len}"
        )));
    }
    Ok(())
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    fn insert(&mut self, name: &str, entry: Entry) {
        assert!(
            !self.entries.contains_key(name),
            "container entry {name} inserted twice"
        );
        assert!(
            name.len() <= u16::MAX as usize,
            "entry name too long: {} bytes",
            name.len()
        );
        self.entries.insert(name.to_string(), entry);
    }

    pub fn put_tensor(&mut self, name: &str, t: &Tensor) {
        self.insert(
            name,
            Entry::F64 {
                dims: t.dims().to_vec(),
                data: t.data().to_vec(),
            },
        );
    }

    pub fn put_f64_scalar(&mut self, name: &str, v: f64) {
        self.insert(
            name,
            Entry::F64 {
                dims: vec![1],
                data: vec![v],
            },
        );
    }

    pub fn put_u64_scalar(&mut self, name: &str, v: u64) {
        self.insert(
            name,
            Entry::U64 {
                dims: vec![1],
                data: vec![v],
            },
        );
    }

    pub fn put_u32s(&mut self, name: &str, dims: &[usize], data: Vec<u32>) {
        check_dims(name, dims, data.len()).expect("u32 entry dims");
        self.insert(
            name,
            Entry::U32 {
                dims: dims.to_vec(),
                data,
            },
        );
    }

    pub fn put_u64s(&mut self, name: &str, dims: &[usize], data: Vec<u64>) {
        check_dims(name, dims, data.len()).expect("u64 entry dims");
        self.insert(
            name,
            Entry::U64 {
                dims: dims.to_vec(),
                data,
            },
        );
    }

    pub fn put_f32s(&mut self, name: &str, dims: &[usize], data: Vec<f32>) {
        check_dims(name, dims, data.len()).expect("f32 entry dims");
        self.insert(
            name,
            Entry::F32 {
                dims: dims.to_vec(),
                data,
            },
        );
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| CoreError::Container(format!("missing entry {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.entry(name)? {
            Entry::F64 { dims, data } => Ok(Tensor::from_vec(dims, data.clone())),
            other => Err(CoreError::Container(format!(
                "entry {name} is dtype tag {}, expected f64",
                other.dtype_tag()
            ))),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32]> {
        match self.entry(name)? {
            Entry::U32 { data, .. } => Ok(data),
            other => Err(CoreError::Container(format!(
                "entry {name} is dtype tag {}, expected u32",
                other.dtype_tag()
            ))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.entry(name)? {
            Entry::U64 { data, .. } => Ok(data),
            other => Err(CoreError::Container(format!(
                "entry {name} is dtype tag {}, expected u64",
                other.dtype_tag()
            ))),
        }
    }

    pub fn f64_scalar(&self, name: &str) -> Result<f64> {
        let t = self.tensor(name)?;
        if t.len() != 1 {
            return Err(CoreError::Container(format!(
                "entry {name} has {} elements, expected scalar",
                t.len()
            )));
        }
        Ok(t.data()[0])
    }

    pub fn u64_scalar(&self, name: &str) -> Result<u64> {
        let v = self.u64s(name)?;
        if v.len() != 1 {
            return Err(CoreError::Container(format!(
                "entry {name} has {} elements, expected scalar",
                v.len()
            )));
        }
        Ok(v[0])
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_bytes(&mut w).map_err(|e| CoreError::io(path, e))
    }

    fn write_bytes(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for (name, entry) in self.entries.iter() {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[entry.dtype_tag(), entry.dims().len() as u8])?;
            for &d in entry.dims() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match entry {
                Entry::F64 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Entry::F32 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Entry::U32 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Entry::U64 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()
    }

    pub fn read_from(path: &Path) -> Result<Container> {
        let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
        let mut r = BufReader::new(file);
        Container::read_bytes(&mut r)
    }

    fn read_bytes(r: &mut impl Read) -> Result<Container> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(CoreError::Container(format!(
                "bad magic {:02x?}, expected \"APGL\"",
                magic
            )));
        }
        let mut ver = [0u8; 4];
        read_exact(r, &mut ver, "format version")?;
        let version = u32::from_le_bytes(ver);
        if version != FORMAT_VERSION {
            return Err(CoreError::Container(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut out = Container::new();
        loop {
            let mut nl = [0u8; 2];
            match r.read(&mut nl[..1]) {
                Ok(0) => break, // clean EOF between entries
                Ok(_) => {}
                Err(e) => return Err(CoreError::Container(format!("read error: {e}"))),
            }
            read_exact(r, &mut nl[1..], "name length")?;
            let name_len = u16::from_le_bytes(nl) as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes, "entry name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| CoreError::Container("entry name is not UTF-8".into()))?;
            let mut hdr = [0u8; 2];
            read_exact(r, &mut hdr, "dtype/rank")?;
            let (dtype, rank) = (hdr[0], hdr[1] as usize);
            let mut dims = Vec::with_capacity(rank);
            let mut count: u64 = 1;
            for _ in 0..rank {
                let mut db = [0u8; 8];
                read_exact(r, &mut db, "dim")?;
                let d = u64::from_le_bytes(db);
                count = count.saturating_mul(d.max(1));
                dims.push(d as usize);
            }
            if count > MAX_ELEMENTS {
                return Err(CoreError::Container(format!(
                    "entry {name}: {count} elements exceeds limit"
                )));
            }
            let n: usize = dims.iter().product();
            let entry = match dtype {
                0 => {
                    let mut data = Vec::with_capacity(n);
                    let mut b = [0u8; 8];
                    for _ in 0..n {
                        read_exact(r, &mut b, "f64 data")?;
                        data.push(f64::from_le_bytes(b));
                    }
                    Entry::F64 { dims, data }
                }
                1 => {
                    let mut data = Vec::with_capacity(n);
                    let mut b = [0u8; 4];
                    for _ in 0..n {
                        read_exact(r, &mut b, "f32 data")?;
                        data.push(f32::from_le_bytes(b));
                    }
                    Entry::F32 { dims, data }
                }
                2 => {
                    let mut data = Vec::with_capacity(n);
                    let mut b = [0u8; 4];
                    for _ in 0..n {
                        read_exact(r, &mut b, "u32 data")?;
                        data.push(u32::from_le_bytes(b));
                    }
                    Entry::U32 { dims, data }
                }
                3 => {
                    let mut data = Vec::with_capacity(n);
                    let mut b = [0u8; 8];
                    for _ in 0..n {
                        read_exact(r, &mut b, "u64 data")?;
                        data.push(u64::from_le_bytes(b));
                    }
                    Entry::U64 { dims, data }
                }
                t => {
                    return Err(CoreError::Container(format!(
                        "entry {name}: unknown dtype tag {t}"
                    )))
                }
            };
            if out.entries.contains_key(&name) {
                return Err(CoreError::Container(format!("duplicate entry {name}")));
            }
            out.entries.insert(name, entry);
        }
        Ok(out)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.element_count()).sum()
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| CoreError::Container(format!("truncated while reading {what}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Container {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = Container::new();
        c.put_tensor("weights/w1", &Tensor::randn(&[3, 4], 1.0, &mut rng));
        c.put_u32s("ids", &[5], vec![1, 2, 3, 0, 7]);
        c.put_u64s("offsets", &[3], vec![0, 2, 5]);
        c.put_f32s("half", &[2, 2], vec![1.5, -2.5, 0.0, 3.25]);
        c.put_f64_scalar("alpha", 0.05);
        c.put_u64_scalar("n", 42);
        c
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.apgl");
        let c = sample();
        c.write_to(&path).unwrap();
        let back = Container::read_from(&path).unwrap();
        assert_eq!(c, back);
        let names: Vec<&str> = back.names().collect();
        assert_eq!(
            names,
            vec!["weights/w1", "ids", "offsets", "half", "alpha", "n"]
        );
        assert_eq!(back.u32s("ids").unwrap(), &[1, 2, 3, 0, 7]);
        assert_eq!(back.f64_scalar("alpha").unwrap(), 0.05);
        assert_eq!(back.u64_scalar("n").unwrap(), 42);
    }

    #[test]
    fn writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        sample().write_to(&p1).unwrap();
        sample().write_to(&p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn header_layout_is_as_documented() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.apgl");
        let mut c = Container::new();
        c.put_u32s("ab", &[2], vec![7, 9]);
        c.write_to(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"APGL");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u16.to_le_bytes()); // name length
        expect.extend_from_slice(b"ab");
        expect.push(2); // dtype u32
        expect.push(1); // rank
        expect.extend_from_slice(&2u64.to_le_bytes()); // dim
        expect.extend_from_slice(&7u32.to_le_bytes());
        expect.extend_from_slice(&9u32.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn empty_container_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.apgl");
        Container::new().write_to(&path).unwrap();
        let back = Container::read_from(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = Container::read_from(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "got: {err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"APGL");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = Container::read_from(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "got: {err}");
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc");
        sample().write_to(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        let err = Container::read_from(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got: {err}");
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dtype");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"APGL");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(7); // bogus dtype
        bytes.push(0); // rank 0
        std::fs::write(&path, bytes).unwrap();
        let err = Container::read_from(&path).unwrap_err();
        assert!(err.to_string().contains("dtype"), "got: {err}");
    }

    #[test]
    fn wrong_type_access_reports_clearly() {
        let c = sample();
        let err = c.tensor("ids").unwrap_err();
        assert!(err.to_string().contains("expected f64"), "got: {err}");
        assert!(c.tensor("missing").is_err());
    }

    #[test]
    fn oversized_header_is_rejected_without_allocation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("huge");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"APGL");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'h');
        bytes.push(0); // f64
        bytes.push(2); // rank 2
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = Container::read_from(&path).unwrap_err();
        assert!(err.to_string().contains("exceeds limit"), "got: {err}");
    }
}
