//! The `FMYC` binary container.
//!
//! Layout: magic `FMYC`, `u16` version, a length-prefixed kind tag, then the
//! kind-specific payload. Integers are little-endian; strings are a `u32` byte
//! length followed by UTF-8; real arrays are a `u64` element count followed by
//! the elements. Bulk tensors are stored as `f32` and widened on read.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::types::{FeatureMapRecord, HeadWeights};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMYC";
pub const CONTAINER_VERSION: u16 = 1;

pub const KIND_HEAD: &str = "head";
pub const KIND_FEATURE_MAPS: &str = "feature_maps";
pub const KIND_SCORER_STATE: &str = "scorer_state";

pub struct ContainerWriter<W: Write> {
    inner: W,
}

impl<W: Write> ContainerWriter<W> {
    pub fn new(mut inner: W, kind: &str) -> Result<Self> {
        inner.write_all(MAGIC)?;
        inner.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        let mut w = Self { inner };
        w.put_str(kind)?;
        Ok(w)
    }

    pub fn put_u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }

    pub fn put_u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn put_u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn put_f32(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&(v as f32).to_le_bytes())?;
        Ok(())
    }

    pub fn put_f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn put_str(&mut self, s: &str) -> Result<()> {
        let len = u32::try_from(s.len())
            .map_err(|_| Error::Input(format!("string of {} bytes too long", s.len())))?;
        self.put_u32(len)?;
        self.inner.write_all(s.as_bytes())?;
        Ok(())
    }

    /// Narrowing write: values are stored as `f32`.
    pub fn put_f32_array(&mut self, values: &[f64]) -> Result<()> {
        self.put_u64(values.len() as u64)?;
        for &v in values {
            self.put_f32(v)?;
        }
        Ok(())
    }

    pub fn put_f64_array(&mut self, values: &[f64]) -> Result<()> {
        self.put_u64(values.len() as u64)?;
        for &v in values {
            self.put_f64(v)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct ContainerReader<R: BufRead> {
    inner: R,
    label: String,
    pub version: u16,
    pub kind: String,
}

impl<R: BufRead> ContainerReader<R> {
    pub fn open(mut inner: R, label: &str, expected_kind: &str) -> Result<Self> {
        let mut magic = [0u8; 4];
        inner.read_exact(&mut magic).map_err(|_| {
            Error::Truncated(format!("{label}: file shorter than the container magic"))
        })?;
        if &magic != MAGIC {
            return Err(Error::Schema(format!("{label}: bad magic {magic:?}")));
        }
        let mut reader = Self {
            inner,
            label: label.to_owned(),
            version: 0,
            kind: String::new(),
        };
        reader.version = u16::from_le_bytes(reader.take::<2>("version")?);
        if reader.version != CONTAINER_VERSION {
            return Err(Error::Schema(format!(
                "{label}: unsupported container version {}",
                reader.version
            )));
        }
        reader.kind = reader.get_str("kind")?;
        if reader.kind != expected_kind {
            return Err(Error::Schema(format!(
                "{label}: container holds {:?}, expected {expected_kind:?}",
                reader.kind
            )));
        }
        Ok(reader)
    }

    fn truncated(&self, what: &str) -> Error {
        Error::Truncated(format!("{}: unexpected end of data reading {what}", self.label))
    }

    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.truncated(what))?;
        Ok(buf)
    }

    pub fn at_eof(&mut self) -> Result<bool> {
        Ok(self.inner.fill_buf()?.is_empty())
    }

    pub fn get_u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take::<1>(what)?[0])
    }

    pub fn get_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }

    pub fn get_u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(what)?))
    }

    pub fn get_f32(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from(f32::from_le_bytes(self.take(what)?)))
    }

    pub fn get_f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(what)?))
    }

    pub fn get_str(&mut self, what: &str) -> Result<String> {
        let len = self.get_u32(what)? as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.truncated(what))?;
        String::from_utf8(buf)
            .map_err(|_| Error::Schema(format!("{}: {what} is not valid UTF-8", self.label)))
    }

    fn get_array<const N: usize>(
        &mut self,
        what: &str,
        convert: fn([u8; N]) -> f64,
    ) -> Result<Vec<f64>> {
        let count = self.get_u64(what)?;
        let count = usize::try_from(count).map_err(|_| self.truncated(what))?;
        let mut out = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            out.push(convert(self.take::<N>(what)?));
        }
        Ok(out)
    }

    pub fn get_f32_array(&mut self, what: &str) -> Result<Vec<f64>> {
        self.get_array::<4>(what, |b| f64::from(f32::from_le_bytes(b)))
    }

    pub fn get_f64_array(&mut self, what: &str) -> Result<Vec<f64>> {
        self.get_array::<8>(what, f64::from_le_bytes)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

fn open_file(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Head weights
// ---------------------------------------------------------------------------

pub fn load_head(path: &Path) -> Result<HeadWeights> {
    read_head(open_file(path)?, &path.display().to_string())
}

/// Header `(|C|, d)` as two `u32`, then one `f32` array holding `W` row-major
/// followed by `b`.
pub fn read_head<R: BufRead>(reader: R, label: &str) -> Result<HeadWeights> {
    let mut r = ContainerReader::open(reader, label, KIND_HEAD)?;
    let classes = r.get_u32("class count")? as usize;
    let dim = r.get_u32("feature dimension")? as usize;
    let expected = classes * dim + classes;
    let declared = r.get_u64("payload length")? as usize;
    if declared != expected {
        return Err(Error::Truncated(format!(
            "{label}: header ({classes}, {dim}) needs {expected} floats, payload declares {declared}"
        )));
    }
    let mut payload = Vec::with_capacity(expected);
    for _ in 0..expected {
        payload.push(r.get_f32("head payload")?);
    }
    if !r.at_eof()? {
        return Err(Error::Truncated(format!(
            "{label}: trailing bytes after head payload"
        )));
    }
    let weights = DMatrix::from_row_slice(classes, dim, &payload[..classes * dim]);
    let bias = DVector::from_column_slice(&payload[classes * dim..]);
    HeadWeights::new(weights, bias)
}

pub fn write_head<W: Write>(writer: W, head: &HeadWeights) -> Result<W> {
    let mut w = ContainerWriter::new(writer, KIND_HEAD)?;
    w.put_u32(head.num_classes() as u32)?;
    w.put_u32(head.dim() as u32)?;
    let mut payload = Vec::with_capacity(head.num_classes() * (head.dim() + 1));
    for c in 0..head.num_classes() {
        payload.extend(head.weights.row(c).iter());
    }
    payload.extend(head.bias.iter());
    w.put_f32_array(&payload)?;
    w.finish()
}

pub fn save_head(path: &Path, head: &HeadWeights) -> Result<()> {
    write_head(create_file(path)?, head).map(|_| ())
}

// ---------------------------------------------------------------------------
// Feature maps
// ---------------------------------------------------------------------------

/// Streams feature-map records one at a time in file order.
pub struct FeatureMapStream<R: BufRead> {
    reader: ContainerReader<R>,
    done: bool,
}

impl<R: BufRead> FeatureMapStream<R> {
    pub fn new(reader: R, label: &str) -> Result<Self> {
        Ok(Self {
            reader: ContainerReader::open(reader, label, KIND_FEATURE_MAPS)?,
            done: false,
        })
    }

    fn read_one(&mut self) -> Result<FeatureMapRecord> {
        let r = &mut self.reader;
        let image_id = r.get_str("image_id")?;
        let layer_name = r.get_str("layer_name")?;
        let channels = r.get_u32("channels")? as usize;
        let height = r.get_u32("height")? as usize;
        let width = r.get_u32("width")? as usize;
        let spatial_scale = r.get_f32("spatial_scale")?;
        let declared = r.get_u64("data length")? as usize;
        if declared != channels * height * width {
            return Err(Error::Truncated(format!(
                "{}: map {image_id} shape ({channels}, {height}, {width}) needs {} floats, header declares {declared}",
                r.label(),
                channels * height * width
            )));
        }
        let mut data = Vec::with_capacity(declared);
        for _ in 0..declared {
            data.push(r.get_f32("feature map data")?);
        }
        let rec = FeatureMapRecord {
            image_id,
            layer_name,
            shape: (channels, height, width),
            data,
            spatial_scale,
        };
        rec.validate()?;
        Ok(rec)
    }
}

impl<R: BufRead> Iterator for FeatureMapStream<R> {
    type Item = Result<FeatureMapRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.reader.at_eof() {
            Ok(true) => {
                self.done = true;
                None
            }
            Ok(false) => {
                let item = self.read_one();
                if item.is_err() {
                    self.done = true;
                }
                Some(item)
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

pub fn load_feature_maps(path: &Path) -> Result<FeatureMapStream<BufReader<File>>> {
    FeatureMapStream::new(open_file(path)?, &path.display().to_string())
}

pub struct FeatureMapWriter<W: Write> {
    inner: ContainerWriter<W>,
}

impl<W: Write> FeatureMapWriter<W> {
    pub fn new(writer: W) -> Result<Self> {
        Ok(Self {
            inner: ContainerWriter::new(writer, KIND_FEATURE_MAPS)?,
        })
    }

    pub fn write(&mut self, map: &FeatureMapRecord) -> Result<()> {
        map.validate()?;
        let w = &mut self.inner;
        w.put_str(&map.image_id)?;
        w.put_str(&map.layer_name)?;
        w.put_u32(map.shape.0 as u32)?;
        w.put_u32(map.shape.1 as u32)?;
        w.put_u32(map.shape.2 as u32)?;
        w.put_f32(map.spatial_scale)?;
        w.put_f32_array(&map.data)
    }

    pub fn finish(self) -> Result<W> {
        self.inner.finish()
    }
}

pub fn save_feature_maps(path: &Path, maps: &[FeatureMapRecord]) -> Result<()> {
    let mut w = FeatureMapWriter::new(create_file(path)?)?;
    for m in maps {
        w.write(m)?;
    }
    w.finish().map(|_| ())
}

// ---------------------------------------------------------------------------
// Tagged key/value records (fitted scorer states)
// ---------------------------------------------------------------------------

/// A typed value in a tagged record. Fitted parameters keep full `f64`
/// precision so a reloaded state scores bit-identically to the in-memory one.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    U64(u64),
    F64(f64),
    Reals(Vec<f64>),
    Text(String),
}

const TAG_U64: u8 = 1;
const TAG_F64: u8 = 2;
const TAG_REALS: u8 = 3;
const TAG_TEXT: u8 = 4;

/// Method tag, state version, and an ordered map of named fields.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaggedRecord {
    pub tag: String,
    pub version: u32,
    pub fields: BTreeMap<String, FieldValue>,
}

impl TaggedRecord {
    pub fn new(tag: &str, version: u32) -> Self {
        Self {
            tag: tag.to_owned(),
            version,
            fields: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, name: &str, value: FieldValue) -> &mut Self {
        self.fields.insert(name.to_owned(), value);
        self
    }

    fn field(&self, name: &str) -> Result<&FieldValue> {
        self.fields.get(name).ok_or_else(|| {
            Error::Schema(format!("state {:?} is missing field {name:?}", self.tag))
        })
    }

    fn mismatch(&self, name: &str, want: &str) -> Error {
        Error::Schema(format!(
            "state {:?} field {name:?} is not {want}",
            self.tag
        ))
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.field(name)? {
            FieldValue::U64(v) => Ok(*v),
            _ => Err(self.mismatch(name, "an integer")),
        }
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        match self.field(name)? {
            FieldValue::F64(v) => Ok(*v),
            _ => Err(self.mismatch(name, "a real")),
        }
    }

    pub fn reals(&self, name: &str) -> Result<&[f64]> {
        match self.field(name)? {
            FieldValue::Reals(v) => Ok(v),
            _ => Err(self.mismatch(name, "a real array")),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.field(name)? {
            FieldValue::Text(v) => Ok(v),
            _ => Err(self.mismatch(name, "text")),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.fields.contains_key(name)
    }
}

pub fn write_tagged<W: Write>(writer: W, record: &TaggedRecord) -> Result<W> {
    let mut w = ContainerWriter::new(writer, KIND_SCORER_STATE)?;
    w.put_str(&record.tag)?;
    w.put_u32(record.version)?;
    w.put_u32(record.fields.len() as u32)?;
    for (name, value) in &record.fields {
        w.put_str(name)?;
        match value {
            FieldValue::U64(v) => {
                w.put_u8(TAG_U64)?;
                w.put_u64(*v)?;
            }
            FieldValue::F64(v) => {
                w.put_u8(TAG_F64)?;
                w.put_f64(*v)?;
            }
            FieldValue::Reals(v) => {
                w.put_u8(TAG_REALS)?;
                w.put_f64_array(v)?;
            }
            FieldValue::Text(v) => {
                w.put_u8(TAG_TEXT)?;
                w.put_str(v)?;
            }
        }
    }
    w.finish()
}

pub fn read_tagged<R: BufRead>(reader: R, label: &str) -> Result<TaggedRecord> {
    let mut r = ContainerReader::open(reader, label, KIND_SCORER_STATE)?;
    let tag = r.get_str("method tag")?;
    let version = r.get_u32("state version")?;
    let count = r.get_u32("field count")?;
    let mut fields = BTreeMap::new();
    for _ in 0..count {
        let name = r.get_str("field name")?;
        let value = match r.get_u8("field type")? {
            TAG_U64 => FieldValue::U64(r.get_u64(&name)?),
            TAG_F64 => FieldValue::F64(r.get_f64(&name)?),
            TAG_REALS => FieldValue::Reals(r.get_f64_array(&name)?),
            TAG_TEXT => FieldValue::Text(r.get_str(&name)?),
            other => {
                return Err(Error::Schema(format!(
                    "{label}: field {name:?} has unknown type tag {other}"
                )))
            }
        };
        fields.insert(name, value);
    }
    if !r.at_eof()? {
        return Err(Error::Truncated(format!("{label}: trailing bytes after state")));
    }
    Ok(TaggedRecord {
        tag,
        version,
        fields,
    })
}
