//! Persistent store of per-document representations at the split layer.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header (50 bytes)
//!   magic          4 bytes  "PTTR"
//!   version        u16      = 1
//!   comp_dim       u16      values per token
//!   precision      u8       1 = f32, 2 = f16
//!   split_layer    u8
//!   fingerprint    32 bytes model digest
//!   doc_count      u64
//! records, in write order
//!   id_len         u16
//!   id             id_len bytes UTF-8
//!   token_count    u16      ≥ 1
//!   payload        token_count × comp_dim values, row-major
//! offset table, in write order
//!   id_len         u16
//!   id             id_len bytes UTF-8
//!   offset         u64      byte offset of the record's id_len field
//! table_len        u64      byte length of the offset table
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::compression::{CompressedReps, Precision, RepValues};
use crate::error::{Error, Result};
use crate::model::{hex, Fingerprint, Model};
use crate::tensor::f16::f16;

pub const STORE_MAGIC: &[u8; 4] = b"PTTR";
pub const STORE_VERSION: u16 = 1;
pub const HEADER_BYTES: u64 = 50;
const DOC_COUNT_OFFSET: u64 = 42;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u16,
    pub comp_dim: u16,
    pub precision: Precision,
    pub split_layer: u8,
    pub fingerprint: Fingerprint,
    pub doc_count: u64,
}

impl StoreHeader {
    /// Header for representations produced by `model`.
    pub fn for_model(model: &Model, precision: Precision) -> Result<Self> {
        let cfg = model.config();
        let comp_dim = u16::try_from(cfg.stored_width())
            .map_err(|_| Error::Config(format!("width {} does not fit the store header", cfg.stored_width())))?;
        let split_layer = u8::try_from(cfg.split_layer)
            .map_err(|_| Error::Config(format!("split layer {} does not fit the store header", cfg.split_layer)))?;
        Ok(Self {
            version: STORE_VERSION,
            comp_dim,
            precision,
            split_layer,
            fingerprint: *model.fingerprint(),
            doc_count: 0,
        })
    }

    fn encode(&self) -> [u8; HEADER_BYTES as usize] {
        let mut b = [0u8; HEADER_BYTES as usize];
        b[0..4].copy_from_slice(STORE_MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..8].copy_from_slice(&self.comp_dim.to_le_bytes());
        b[8] = self.precision.code();
        b[9] = self.split_layer;
        b[10..42].copy_from_slice(&self.fingerprint);
        b[42..50].copy_from_slice(&self.doc_count.to_le_bytes());
        b
    }

    fn decode(b: &[u8; HEADER_BYTES as usize]) -> Result<Self> {
        if &b[0..4] != STORE_MAGIC {
            return Err(Error::Integrity("not a representation store (bad magic)".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != STORE_VERSION {
            return Err(Error::Integrity(format!("unsupported store version {version}")));
        }
        let precision = Precision::from_code(b[8])
            .ok_or_else(|| Error::Integrity(format!("unknown precision code {}", b[8])))?;
        let mut fingerprint = [0u8; 32];
        fingerprint.copy_from_slice(&b[10..42]);
        Ok(Self {
            version,
            comp_dim: u16::from_le_bytes([b[6], b[7]]),
            precision,
            split_layer: b[9],
            fingerprint,
            doc_count: u64::from_le_bytes(b[42..50].try_into().expect("8 bytes")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSummary {
    pub bytes_written: u64,
    pub doc_count: u64,
    pub payload_bytes: u64,
}

/// What to do when a candidate document is not in the store.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingDocPolicy {
    #[default]
    Error,
    /// Encode the document on the fly.
    Encode,
}

/// Size in bytes of a store holding records with the given
/// `(id byte length, token count)` pairs.
pub fn store_file_size(records: impl IntoIterator<Item = (usize, usize)>, comp_dim: usize, bytes_per_value: usize) -> u64 {
    let mut total = HEADER_BYTES + 8;
    for (id_len, tokens) in records {
        let id = id_len as u64;
        total += 2 + id + 2 + (tokens * comp_dim * bytes_per_value) as u64;
        total += 2 + id + 8;
    }
    total
}

/// Payload bytes for a collection: `docs × tokens × e × bytes_per_value`,
/// without record or table overhead.
pub fn estimate_storage(doc_count: f64, avg_tokens: f64, comp_dim: f64, bytes_per_value: f64) -> f64 {
    doc_count * avg_tokens * comp_dim * bytes_per_value
}

/// Average tokens per document implied by a payload size.
pub fn implied_avg_tokens(bytes: f64, doc_count: f64, comp_dim: f64, bytes_per_value: f64) -> f64 {
    bytes / (doc_count * comp_dim * bytes_per_value)
}

fn id_len(id: &str) -> Result<u16> {
    u16::try_from(id.len()).map_err(|_| Error::invalid(format!("document id of {} bytes is too long", id.len())))
}

/// Streaming writer. Records are appended in call order; the offset table
/// and the final document count are written by [`StoreWriter::finish`].
pub struct StoreWriter {
    out: BufWriter<File>,
    header: StoreHeader,
    offsets: Vec<(String, u64)>,
    seen: HashSet<String>,
    position: u64,
    payload: u64,
}

impl StoreWriter {
    pub fn create(path: impl AsRef<Path>, header: StoreHeader) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        let mut header = header;
        header.doc_count = 0;
        out.write_all(&header.encode())?;
        Ok(Self {
            out,
            header,
            offsets: Vec::new(),
            seen: HashSet::new(),
            position: HEADER_BYTES,
            payload: 0,
        })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn append(&mut self, doc_id: &str, reps: &CompressedReps) -> Result<()> {
        if reps.precision() != self.header.precision {
            return Err(Error::invalid(format!(
                "record in {:?}, store declares {:?}",
                reps.precision(),
                self.header.precision
            )));
        }
        if reps.width() != self.header.comp_dim as usize {
            return Err(Error::shape(
                "store append",
                format!("width {} vs store width {}", reps.width(), self.header.comp_dim),
            ));
        }
        let tokens = u16::try_from(reps.rows())
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| Error::invalid(format!("record with {} tokens", reps.rows())))?;
        let len = id_len(doc_id)?;
        if !self.seen.insert(doc_id.to_string()) {
            return Err(Error::invalid(format!("duplicate document id {doc_id:?}")));
        }
        self.offsets.push((doc_id.to_string(), self.position));
        self.out.write_all(&len.to_le_bytes())?;
        self.out.write_all(doc_id.as_bytes())?;
        self.out.write_all(&tokens.to_le_bytes())?;
        let bytes = match reps.values() {
            RepValues::F32(v) => {
                for x in v {
                    self.out.write_all(&x.to_le_bytes())?;
                }
                v.len() * 4
            }
            RepValues::F16(v) => {
                for x in v {
                    self.out.write_all(&x.to_bits().to_le_bytes())?;
                }
                v.len() * 2
            }
        };
        self.position += 4 + doc_id.len() as u64 + bytes as u64;
        self.payload += bytes as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<StoreSummary> {
        let mut table_len = 0u64;
        for (id, offset) in &self.offsets {
            self.out.write_all(&id_len(id)?.to_le_bytes())?;
            self.out.write_all(id.as_bytes())?;
            self.out.write_all(&offset.to_le_bytes())?;
            table_len += 2 + id.len() as u64 + 8;
        }
        self.out.write_all(&table_len.to_le_bytes())?;
        let doc_count = self.offsets.len() as u64;
        self.out.seek(SeekFrom::Start(DOC_COUNT_OFFSET))?;
        self.out.write_all(&doc_count.to_le_bytes())?;
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        Ok(StoreSummary {
            bytes_written: self.position + table_len + 8,
            doc_count,
            payload_bytes: self.payload,
        })
    }
}

/// Writes every record and finalizes the store.
pub fn write_store<'a>(
    path: impl AsRef<Path>,
    header: StoreHeader,
    records: impl IntoIterator<Item = (&'a str, &'a CompressedReps)>,
) -> Result<StoreSummary> {
    let mut w = StoreWriter::create(path, header)?;
    for (id, reps) in records {
        w.append(id, reps)?;
    }
    w.finish()
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Integrity("store is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Random-access reader. Safe to share between threads.
pub struct StoreReader {
    header: StoreHeader,
    ids: Vec<String>,
    offsets: HashMap<String, u64>,
    records_end: u64,
    file: Mutex<File>,
}

impl StoreReader {
    /// Opens a store and validates its header and offset table.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = File::open(path)?;
        let size = file.metadata()?.len();
        if size < HEADER_BYTES + 8 {
            return Err(Error::Integrity("store is truncated".into()));
        }
        let header = StoreHeader::decode(&read_array(&mut file)?)?;
        file.seek(SeekFrom::End(-8))?;
        let table_len = u64::from_le_bytes(read_array(&mut file)?);
        let records_end = size
            .checked_sub(8 + table_len)
            .filter(|&e| e >= HEADER_BYTES)
            .ok_or_else(|| Error::Integrity("offset table length exceeds file".into()))?;
        file.seek(SeekFrom::Start(records_end))?;
        let mut table = vec![0u8; table_len as usize];
        file.read_exact(&mut table).map_err(truncated)?;
        let mut cursor = table.as_slice();
        let mut ids = Vec::new();
        let mut offsets = HashMap::new();
        while !cursor.is_empty() {
            let len = u16::from_le_bytes(read_array(&mut cursor)?) as usize;
            if cursor.len() < len + 8 {
                return Err(Error::Integrity("offset table is malformed".into()));
            }
            let id = std::str::from_utf8(&cursor[..len])
                .map_err(|_| Error::Integrity("document id is not UTF-8".into()))?
                .to_string();
            cursor = &cursor[len..];
            let offset = u64::from_le_bytes(read_array(&mut cursor)?);
            if offset < HEADER_BYTES || offset >= records_end {
                return Err(Error::Integrity(format!("offset {offset} of {id:?} is outside the record area")));
            }
            if offsets.insert(id.clone(), offset).is_some() {
                return Err(Error::Integrity(format!("document id {id:?} appears twice")));
            }
            ids.push(id);
        }
        if ids.len() as u64 != header.doc_count {
            return Err(Error::Integrity(format!(
                "header declares {} documents, offset table has {}",
                header.doc_count,
                ids.len()
            )));
        }
        Ok(Self {
            header,
            ids,
            offsets,
            records_end,
            file: Mutex::new(file),
        })
    }

    /// Opens a store and refuses it unless it was built by `model`.
    pub fn open_for_model(path: impl AsRef<Path>, model: &Model) -> Result<Self> {
        let reader = Self::open(path)?;
        reader.check_model(model)?;
        Ok(reader)
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        let cfg = model.config();
        if &self.header.fingerprint != model.fingerprint() {
            return Err(Error::StaleRepresentation(format!(
                "store was built by model {}, serving model is {}",
                hex(&self.header.fingerprint),
                model.fingerprint_hex()
            )));
        }
        if self.header.split_layer as usize != cfg.split_layer || self.header.comp_dim as usize != cfg.stored_width() {
            return Err(Error::StaleRepresentation(format!(
                "store has l={} e={}, model has l={} e={}",
                self.header.split_layer,
                self.header.comp_dim,
                cfg.split_layer,
                cfg.stored_width()
            )));
        }
        Ok(())
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    /// Document ids in write order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.offsets.contains_key(doc_id)
    }

    pub fn read_doc(&self, doc_id: &str) -> Result<CompressedReps> {
        let &offset = self
            .offsets
            .get(doc_id)
            .ok_or_else(|| Error::NotFound(format!("document {doc_id:?} is not in the store")))?;
        let mut file = self.file.lock().expect("store file lock poisoned");
        file.seek(SeekFrom::Start(offset))?;
        let len = u16::from_le_bytes(read_array(&mut *file)?) as usize;
        let mut id = vec![0u8; len];
        file.read_exact(&mut id).map_err(truncated)?;
        if id != doc_id.as_bytes() {
            return Err(Error::Integrity(format!("offset of {doc_id:?} points at another record")));
        }
        let tokens = u16::from_le_bytes(read_array(&mut *file)?) as usize;
        if tokens == 0 {
            return Err(Error::Integrity(format!("record {doc_id:?} has no tokens")));
        }
        let width = self.header.comp_dim as usize;
        let count = tokens * width;
        let bpv = self.header.precision.bytes_per_value();
        let end = offset + 4 + len as u64 + (count * bpv) as u64;
        if end > self.records_end {
            return Err(Error::Integrity(format!("record {doc_id:?} runs past the record area")));
        }
        let mut raw = vec![0u8; count * bpv];
        file.read_exact(&mut raw).map_err(truncated)?;
        let values = match self.header.precision {
            Precision::F32 => RepValues::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Precision::F16 => RepValues::F16(
                raw.chunks_exact(2)
                    .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                    .collect(),
            ),
        };
        CompressedReps::new(tokens, width, values)
    }

    /// Every record, in write order.
    pub fn read_all(&self) -> Result<Vec<(String, CompressedReps)>> {
        self.ids.iter().map(|id| Ok((id.clone(), self.read_doc(id)?))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn header(precision: Precision, e: u16) -> StoreHeader {
        StoreHeader {
            version: STORE_VERSION,
            comp_dim: e,
            precision,
            split_layer: 1,
            fingerprint: [7; 32],
            doc_count: 0,
        }
    }

    #[test]
    fn empty_store_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.pttr");
        let s = write_store(&path, header(Precision::F32, 4), std::iter::empty()).unwrap();
        assert_eq!(s.doc_count, 0);
        assert_eq!(s.bytes_written, store_file_size([], 4, 4));
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 58);
        let r = StoreReader::open(&path).unwrap();
        assert!(r.ids().is_empty());
        assert!(matches!(r.read_doc("x"), Err(Error::NotFound(_))));
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut h = header(Precision::F16, 300);
        h.doc_count = 5;
        let b = h.encode();
        assert_eq!(&b[..4], b"PTTR");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[44, 1]);
        assert_eq!(b[8], 2);
        assert_eq!(b[9], 1);
        assert_eq!(&b[42..50], &[5, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(StoreHeader::decode(&b).unwrap(), h);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let reps = CompressedReps::from_matrix(Matrix::filled(2, 3, 1.0));
        let mut w = StoreWriter::create(dir.path().join("d.pttr"), header(Precision::F32, 3)).unwrap();
        w.append("a", &reps).unwrap();
        assert!(matches!(w.append("a", &reps), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn wrong_width_or_precision_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = StoreWriter::create(dir.path().join("d.pttr"), header(Precision::F16, 3)).unwrap();
        let f32_reps = CompressedReps::from_matrix(Matrix::filled(2, 3, 1.0));
        assert!(w.append("a", &f32_reps).is_err());
        let (wide, _) = crate::compression::quantize_reps(&CompressedReps::from_matrix(Matrix::filled(2, 4, 1.0)));
        assert!(w.append("b", &wide).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pttr");
        let reps = CompressedReps::from_matrix(Matrix::filled(2, 3, 0.5));
        write_store(&path, header(Precision::F32, 3), [("doc", &reps)]).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'Q';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(StoreReader::open(&path), Err(Error::Integrity(_))));

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 16] = 0xff;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(StoreReader::open(&path), Err(Error::Integrity(_))));

        std::fs::write(&path, &good[..good.len() - 20]).unwrap();
        assert!(StoreReader::open(&path).is_err());
    }

    #[test]
    fn estimator_is_linear() {
        let base = estimate_storage(1000.0, 100.0, 64.0, 4.0);
        assert_eq!(base, 25_600_000.0);
        assert_eq!(estimate_storage(1000.0, 100.0, 64.0, 2.0) * 2.0, base);
        assert_eq!(estimate_storage(3000.0, 100.0, 64.0, 4.0), 3.0 * base);
        assert!((implied_avg_tokens(base, 1000.0, 64.0, 4.0) - 100.0).abs() < 1e-9);
    }
}
