//! Embedding tables, catalogs, triplet datasets, and the chronological split.
//!
//! On-disk formats:
//! - embedding matrix: "JAMB" magic, u32 version=1, u32 rows, u32 dim
//!   (all little-endian), then rows*dim f32 LE row-major; a companion ids
//!   file holds one UTF-8 id per line in row order.
//! - triplets: JSON lines `{"user_id", "query_id", "item_ids", "timestamp",
//!   "query_text"?}`.
//! - catalog manifest: JSON `{"item_ids": path, "modalities": [{"name",
//!   "matrix"}, ...]}`, with relative paths resolved against the manifest.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{JamError, Result};
use crate::linalg::DenseMatrix;

const JAMB_MAGIC: &[u8; 4] = b"JAMB";
const JAMB_VERSION: u32 = 1;
const SECONDS_PER_DAY: i64 = 86_400;

/// Id-aligned dense embedding matrix, one row per id.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    matrix: DenseMatrix,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, matrix: DenseMatrix) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(JamError::Alignment(format!(
                "{} ids vs {} matrix rows",
                ids.len(),
                matrix.rows()
            )));
        }
        if matrix.cols() == 0 {
            return Err(JamError::Data("embedding dim must be > 0".into()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(JamError::Data(format!("duplicate id {id:?}")));
            }
        }
        Ok(Self { ids, matrix, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.matrix.row(i)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn lookup(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

/// Write a matrix in the JAMB binary format.
pub fn save_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(JAMB_MAGIC)?;
    w.write_all(&JAMB_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a matrix in the JAMB binary format, validating header vs payload.
pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| JamError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?,
    );
    read_matrix(&mut r, &path.display().to_string())
}

/// Read one JAMB block from an open reader (used by checkpoint files too).
pub fn read_matrix<R: Read>(r: &mut R, what: &str) -> Result<DenseMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| JamError::Format(format!("{what}: truncated header")))?;
    if &magic != JAMB_MAGIC {
        return Err(JamError::Format(format!("{what}: bad magic {magic:?}")));
    }
    let version = read_u32(r, what)?;
    if version != JAMB_VERSION {
        return Err(JamError::Format(format!("{what}: unsupported version {version}")));
    }
    let rows = read_u32(r, what)? as usize;
    let dim = read_u32(r, what)? as usize;
    let mut payload = vec![0u8; rows * dim * 4];
    r.read_exact(&mut payload).map_err(|_| {
        JamError::Format(format!(
            "{what}: payload shorter than declared {rows}x{dim}"
        ))
    })?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(JamError::Data(format!("{what}: non-finite entry {bad}")));
    }
    DenseMatrix::from_vec(rows, dim, data)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| JamError::Format(format!("{what}: truncated header")))?;
    Ok(u32::from_le_bytes(b))
}

/// Write one JAMB block to an open writer.
pub fn write_matrix<W: Write>(w: &mut W, m: &DenseMatrix) -> Result<()> {
    w.write_all(JAMB_MAGIC)?;
    w.write_all(&JAMB_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for &v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Load matrix + ids files into an aligned table.
pub fn load_embedding_table(matrix_path: &Path, ids_path: &Path) -> Result<EmbeddingTable> {
    let matrix = load_matrix(matrix_path)?;
    let ids = load_ids(ids_path)?;
    if ids.len() != matrix.rows() {
        return Err(JamError::Alignment(format!(
            "{}: {} ids vs {} rows in {}",
            ids_path.display(),
            ids.len(),
            matrix.rows(),
            matrix_path.display()
        )));
    }
    EmbeddingTable::new(ids, matrix)
}

pub fn save_embedding_table(
    table: &EmbeddingTable,
    matrix_path: &Path,
    ids_path: &Path,
) -> Result<()> {
    save_matrix(matrix_path, table.matrix())?;
    save_ids(ids_path, table.ids())
}

pub fn load_ids(path: &Path) -> Result<Vec<String>> {
    let r = BufReader::new(File::open(path)?);
    let mut ids = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.is_empty() {
            ids.push(line);
        }
    }
    Ok(ids)
}

pub fn save_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

/// Per-modality embedding tables over one shared item-id ordering.
#[derive(Debug, Clone)]
pub struct Catalog {
    item_ids: Vec<String>,
    modalities: Vec<EmbeddingTable>,
    modality_names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(modality_names: Vec<String>, modalities: Vec<EmbeddingTable>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(JamError::Config("catalog needs at least one modality".into()));
        }
        if modality_names.len() != modalities.len() {
            return Err(JamError::Config("modality names/tables length mismatch".into()));
        }
        let item_ids = modalities[0].ids().to_vec();
        for (name, t) in modality_names.iter().zip(&modalities) {
            if t.ids() != item_ids.as_slice() {
                return Err(JamError::Alignment(format!(
                    "modality {name:?} item ids differ from the first modality"
                )));
            }
        }
        let index = item_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self { item_ids, modalities, modality_names, index })
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn item_id(&self, i: usize) -> &str {
        &self.item_ids[i]
    }

    pub fn modality_names(&self) -> &[String] {
        &self.modality_names
    }

    pub fn modality(&self, m: usize) -> &EmbeddingTable {
        &self.modalities[m]
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        self.modalities.iter().map(EmbeddingTable::dim).collect()
    }

    /// Raw embedding of item `i` in modality `m`.
    pub fn item_row(&self, m: usize, i: usize) -> &[f32] {
        self.modalities[m].row(i)
    }

    pub fn lookup(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestModality {
    name: String,
    matrix: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    item_ids: String,
    modalities: Vec<ManifestModality>,
}

/// Load a catalog from its JSON manifest.
pub fn load_catalog(manifest_path: &Path) -> Result<Catalog> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| JamError::Format(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let ids_path = resolve(&manifest.item_ids);
    let mut names = Vec::new();
    let mut tables = Vec::new();
    for m in &manifest.modalities {
        names.push(m.name.clone());
        tables.push(load_embedding_table(&resolve(&m.matrix), &ids_path)?);
    }
    Catalog::new(names, tables)
}

/// Write a catalog manifest referring to already-written files.
pub fn save_catalog_manifest(
    manifest_path: &Path,
    item_ids_file: &str,
    modalities: &[(String, String)],
) -> Result<()> {
    let manifest = Manifest {
        item_ids: item_ids_file.to_string(),
        modalities: modalities
            .iter()
            .map(|(name, matrix)| ManifestModality { name: name.clone(), matrix: matrix.clone() })
            .collect(),
    };
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// One triplet-file line, before id resolution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RawTriplet {
    pub user_id: String,
    pub query_id: String,
    pub item_ids: Vec<String>,
    pub timestamp: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_text: Option<String>,
}

pub fn load_raw_triplets(path: &Path) -> Result<Vec<RawTriplet>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: RawTriplet = serde_json::from_str(&line).map_err(|e| {
            JamError::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(t);
    }
    Ok(out)
}

pub fn save_raw_triplets(path: &Path, triplets: &[RawTriplet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in triplets {
        serde_json::to_writer(&mut w, t)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// One (user, query) interaction with its relevant item set, id-resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletRecord {
    pub user_idx: usize,
    pub query_idx: usize,
    /// Sorted, duplicate-free, nonempty.
    pub relevant_items: Vec<usize>,
    pub timestamp: i64,
}

impl TripletRecord {
    pub fn is_relevant(&self, item: usize) -> bool {
        self.relevant_items.binary_search(&item).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct TripletDataset {
    pub records: Vec<TripletRecord>,
    pub split_tag: SplitTag,
}

impl TripletDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Resolve raw string ids against the loaded tables. Any unresolvable id is
/// a hard error; silently dropping records would bias popularity counts.
pub fn resolve_triplets(
    raw: &[RawTriplet],
    users: &EmbeddingTable,
    queries: &EmbeddingTable,
    catalog: &Catalog,
) -> Result<TripletDataset> {
    let mut records = Vec::with_capacity(raw.len());
    for (i, t) in raw.iter().enumerate() {
        let user_idx = users
            .lookup(&t.user_id)
            .ok_or_else(|| JamError::Data(format!("record {i}: unknown user_id {:?}", t.user_id)))?;
        let query_idx = queries.lookup(&t.query_id).ok_or_else(|| {
            JamError::Data(format!("record {i}: unknown query_id {:?}", t.query_id))
        })?;
        if t.item_ids.is_empty() {
            return Err(JamError::Data(format!("record {i}: empty item_ids")));
        }
        let mut relevant: BTreeSet<usize> = BTreeSet::new();
        for id in &t.item_ids {
            let idx = catalog
                .lookup(id)
                .ok_or_else(|| JamError::Data(format!("record {i}: unknown item_id {id:?}")))?;
            relevant.insert(idx);
        }
        records.push(TripletRecord {
            user_idx,
            query_idx,
            relevant_items: relevant.into_iter().collect(),
            timestamp: t.timestamp,
        });
    }
    Ok(TripletDataset { records, split_tag: SplitTag::Full })
}

/// UTC calendar day index of an epoch timestamp.
pub fn utc_day(timestamp: i64) -> i64 {
    timestamp.div_euclid(SECONDS_PER_DAY)
}

/// Partition timestamps by UTC day: everything on the last day is `test`,
/// the second-to-last day is `val`, all earlier days are `train`.
/// Returns per-element assignments. Requires >= 3 distinct days.
pub fn day_partition(timestamps: &[i64]) -> Result<Vec<SplitTag>> {
    let days: BTreeSet<i64> = timestamps.iter().map(|&t| utc_day(t)).collect();
    if days.len() < 3 {
        return Err(JamError::TemporalSpan(format!(
            "need >= 3 distinct UTC days, found {}",
            days.len()
        )));
    }
    let mut iter = days.iter().rev();
    let test_day = *iter.next().unwrap();
    let val_day = *iter.next().unwrap();
    Ok(timestamps
        .iter()
        .map(|&t| {
            let d = utc_day(t);
            if d == test_day {
                SplitTag::Test
            } else if d == val_day {
                SplitTag::Val
            } else {
                SplitTag::Train
            }
        })
        .collect())
}

/// Chronological split by UTC day. Record order within each part is
/// preserved from the input.
pub fn chronological_split(
    ds: &TripletDataset,
) -> Result<(TripletDataset, TripletDataset, TripletDataset)> {
    let stamps: Vec<i64> = ds.records.iter().map(|r| r.timestamp).collect();
    let tags = day_partition(&stamps)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (rec, tag) in ds.records.iter().zip(&tags) {
        match tag {
            SplitTag::Train => train.push(rec.clone()),
            SplitTag::Val => val.push(rec.clone()),
            SplitTag::Test => test.push(rec.clone()),
            SplitTag::Full => unreachable!(),
        }
    }
    Ok((
        TripletDataset { records: train, split_tag: SplitTag::Train },
        TripletDataset { records: val, split_tag: SplitTag::Val },
        TripletDataset { records: test, split_tag: SplitTag::Test },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;

    fn table(ids: &[&str], rows: &[Vec<f32>]) -> EmbeddingTable {
        EmbeddingTable::new(
            ids.iter().map(|s| s.to_string()).collect(),
            DenseMatrix::from_rows(rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn embedding_table_rejects_misalignment_and_duplicates() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let err = EmbeddingTable::new(vec!["a".into()], m.clone());
        assert!(matches!(err, Err(JamError::Alignment(_))));
        let err = EmbeddingTable::new(vec!["a".into(), "a".into()], m);
        assert!(matches!(err, Err(JamError::Data(_))));
    }

    #[test]
    fn jamb_load_respects_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("emb.jamb");
        let ipath = dir.path().join("emb.ids");
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        save_matrix(&mpath, &m).unwrap();
        save_ids(&ipath, &["r0".into(), "r1".into()]).unwrap();
        let t = load_embedding_table(&mpath, &ipath).unwrap();
        assert_eq!(t.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.lookup("r1"), Some(1));
    }

    #[test]
    fn jamb_id_count_mismatch_is_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("emb.jamb");
        let ipath = dir.path().join("emb.ids");
        save_matrix(&mpath, &DenseMatrix::zeros(2, 3)).unwrap();
        save_ids(&ipath, &["a".into(), "b".into(), "c".into()]).unwrap();
        match load_embedding_table(&mpath, &ipath) {
            Err(JamError::Alignment(_)) => {}
            other => panic!("expected Alignment, got {other:?}"),
        }
    }

    #[test]
    fn jamb_truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jamb");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"JAMB");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes()); // rows
        bytes.extend_from_slice(&4u32.to_le_bytes()); // dim declares 4 floats/row
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0] {
            bytes.extend_from_slice(&v.to_le_bytes()); // only 3 per row
        }
        std::fs::write(&path, bytes).unwrap();
        match load_matrix(&path) {
            Err(JamError::Format(_)) => {}
            other => panic!("expected Format, got {other:?}"),
        }
    }

    #[test]
    fn jamb_bad_magic_and_version_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jamb");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(load_matrix(&path), Err(JamError::Format(_))));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"JAMB");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_matrix(&path), Err(JamError::Format(_))));
    }

    #[test]
    fn jamb_nonfinite_entry_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.jamb");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"JAMB");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_matrix(&path), Err(JamError::Data(_))));
    }

    #[test]
    fn jamb_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(21);
        for case in 0..50 {
            let rows = 1 + rng.uniform_usize(12);
            let cols = 1 + rng.uniform_usize(12);
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| (rng.uniform_f64() * 2000.0 - 1000.0) as f32)
                .collect();
            let m = DenseMatrix::from_vec(rows, cols, data).unwrap();
            let ids: Vec<String> = (0..rows).map(|i| format!("row_{case}_{i}")).collect();
            let t = EmbeddingTable::new(ids, m).unwrap();
            let mpath = dir.path().join(format!("m{case}.jamb"));
            let ipath = dir.path().join(format!("m{case}.ids"));
            save_embedding_table(&t, &mpath, &ipath).unwrap();
            let back = load_embedding_table(&mpath, &ipath).unwrap();
            assert_eq!(t.matrix().data(), back.matrix().data());
            assert_eq!(
                (t.matrix().rows(), t.matrix().cols()),
                (back.matrix().rows(), back.matrix().cols())
            );
            assert_eq!(t.ids(), back.ids());
        }
    }

    #[test]
    fn catalog_requires_aligned_item_ids() {
        let a = table(&["i0", "i1"], &[vec![1.0], vec![2.0]]);
        let b = table(&["i1", "i0"], &[vec![1.0], vec![2.0]]);
        let err = Catalog::new(vec!["audio".into(), "lyrics".into()], vec![a, b]);
        assert!(matches!(err, Err(JamError::Alignment(_))));
    }

    #[test]
    fn resolve_rejects_unknown_ids() {
        let users = table(&["u0"], &[vec![1.0]]);
        let queries = table(&["q0"], &[vec![1.0]]);
        let items = table(&["i0"], &[vec![1.0]]);
        let catalog = Catalog::new(vec!["cf".into()], vec![items]).unwrap();
        let raw = vec![RawTriplet {
            user_id: "u0".into(),
            query_id: "q0".into(),
            item_ids: vec!["missing".into()],
            timestamp: 0,
            query_text: None,
        }];
        match resolve_triplets(&raw, &users, &queries, &catalog) {
            Err(JamError::Data(msg)) => assert!(msg.contains("missing")),
            other => panic!("expected Data, got {other:?}"),
        }
    }

    fn ds_with_days(days: &[i64]) -> TripletDataset {
        let records = days
            .iter()
            .enumerate()
            .map(|(i, &d)| TripletRecord {
                user_idx: i,
                query_idx: i,
                relevant_items: vec![i],
                timestamp: d * SECONDS_PER_DAY + (i as i64 * 977) % SECONDS_PER_DAY,
            })
            .collect();
        TripletDataset { records, split_tag: SplitTag::Full }
    }

    #[test]
    fn split_takes_last_day_as_test_and_previous_as_val() {
        let ds = ds_with_days(&[1, 2, 3, 4, 5, 6, 7, 7, 6, 1]);
        let (train, val, test) = chronological_split(&ds).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(val.len(), 2);
        assert_eq!(test.len(), 2);
        assert!(test.records.iter().all(|r| utc_day(r.timestamp) == 7));
        assert!(val.records.iter().all(|r| utc_day(r.timestamp) == 6));
        assert_eq!(train.split_tag, SplitTag::Train);
        assert_eq!(val.split_tag, SplitTag::Val);
        assert_eq!(test.split_tag, SplitTag::Test);
    }

    #[test]
    fn split_rejects_short_span() {
        let ds = ds_with_days(&[4, 4, 4]);
        assert!(matches!(chronological_split(&ds), Err(JamError::TemporalSpan(_))));
        let ds = ds_with_days(&[4, 5, 5, 4]);
        assert!(matches!(chronological_split(&ds), Err(JamError::TemporalSpan(_))));
    }

    #[test]
    fn split_three_days_one_record_each() {
        let ds = ds_with_days(&[10, 11, 12]);
        let (train, val, test) = chronological_split(&ds).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (1, 1, 1));
    }

    #[test]
    fn split_invariant_on_random_assignments() {
        let mut rng = SeededRng::new(33);
        for _ in 0..1000 {
            let n = 3 + rng.uniform_usize(40);
            // Sample until we get >= 3 distinct days.
            let days: Vec<i64> = loop {
                let cand: Vec<i64> = (0..n).map(|_| rng.uniform_usize(10) as i64).collect();
                let distinct: BTreeSet<i64> = cand.iter().copied().collect();
                if distinct.len() >= 3 {
                    break cand;
                }
            };
            let ds = ds_with_days(&days);
            let (train, val, test) = chronological_split(&ds).unwrap();
            assert_eq!(train.len() + val.len() + test.len(), ds.len());
            let max_train = train.records.iter().map(|r| utc_day(r.timestamp)).max().unwrap();
            let min_val = val.records.iter().map(|r| utc_day(r.timestamp)).min().unwrap();
            let max_val = val.records.iter().map(|r| utc_day(r.timestamp)).max().unwrap();
            let min_test = test.records.iter().map(|r| utc_day(r.timestamp)).min().unwrap();
            assert!(max_train < min_val);
            assert!(max_val < min_test);
            // No record lost or duplicated: compare multisets of user_idx.
            let mut orig: Vec<usize> = ds.records.iter().map(|r| r.user_idx).collect();
            let mut got: Vec<usize> = train
                .records
                .iter()
                .chain(&val.records)
                .chain(&test.records)
                .map(|r| r.user_idx)
                .collect();
            orig.sort_unstable();
            got.sort_unstable();
            assert_eq!(orig, got);
        }
    }

    #[test]
    fn raw_triplet_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let triplets = vec![
            RawTriplet {
                user_id: "u1".into(),
                query_id: "q1".into(),
                item_ids: vec!["i1".into(), "i2".into()],
                timestamp: 1_700_000_000,
                query_text: Some("sad piano songs".into()),
            },
            RawTriplet {
                user_id: "u2".into(),
                query_id: "q2".into(),
                item_ids: vec!["i3".into()],
                timestamp: 1_700_086_400,
                query_text: None,
            },
        ];
        save_raw_triplets(&path, &triplets).unwrap();
        let back = load_raw_triplets(&path).unwrap();
        assert_eq!(triplets, back);
    }
}
