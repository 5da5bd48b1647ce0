//! Columnar feature cache.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "EMWFEAT1"
//! 8       4     header length H, u32 little-endian
//! 12      H     header, UTF-8 JSON (see CacheHeader)
//! 12+H    ...   columns, each n_rows values, little-endian, in header order:
//!               f0..f{n_features-1}  f64
//!               record               u32  index into header.records
//!               window_index         u32
//!               cycle_index          u32
//!               start_s              f64
//!               temperature_c        f64
//!               skill                u32  index into header.skills
//!               record_label         u8   0 background, 1 normal, 2 attack
//!               attack               u8   0 or 1
//! ```
//!
//! Nothing follows the last column; a file whose length disagrees with the
//! header is rejected.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureLayout, FeatureTable, RowMeta};
use crate::emcorpus::RecordLabel;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EMWFEAT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub format_version: u32,
    pub layout: FeatureLayout,
    /// Hash of the configuration that produced the features.
    pub config_hash: String,
    pub n_rows: usize,
    pub n_features: usize,
    pub records: Vec<String>,
    pub skills: Vec<String>,
    pub columns: Vec<ColumnSpec>,
}

fn columns(n_features: usize) -> Vec<ColumnSpec> {
    let col = |name: String, dtype: &str| ColumnSpec { name, dtype: dtype.into() };
    let mut c: Vec<ColumnSpec> = (0..n_features).map(|i| col(format!("f{i}"), "f64")).collect();
    for (name, dtype) in [
        ("record", "u32"),
        ("window_index", "u32"),
        ("cycle_index", "u32"),
        ("start_s", "f64"),
        ("temperature_c", "f64"),
        ("skill", "u32"),
        ("record_label", "u8"),
        ("attack", "u8"),
    ] {
        c.push(col(name.into(), dtype));
    }
    c
}

fn intern(names: impl Iterator<Item = String>) -> (Vec<String>, HashMap<String, u32>) {
    let mut list = Vec::new();
    let mut map = HashMap::new();
    for n in names {
        map.entry(n.clone()).or_insert_with(|| {
            list.push(n);
            (list.len() - 1) as u32
        });
    }
    (list, map)
}

fn label_code(l: RecordLabel) -> u8 {
    RecordLabel::ALL.iter().position(|x| *x == l).unwrap() as u8
}

pub fn write_cache(path: &Path, table: &FeatureTable, config_hash: &str) -> Result<CacheHeader> {
    let (records, rmap) = intern(table.rows.iter().map(|r| r.record_id.clone()));
    let (skills, smap) = intern(table.rows.iter().map(|r| r.skill.clone()));
    let header = CacheHeader {
        format_version: FORMAT_VERSION,
        layout: FeatureLayout::v10().clone(),
        config_hash: config_hash.to_string(),
        n_rows: table.len(),
        n_features: table.n_features,
        records,
        skills,
        columns: columns(table.n_features),
    };
    let json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&(json.len() as u32).to_le_bytes())?;
    put(&json)?;
    let n = table.n_features;
    for f in 0..n {
        for i in 0..table.len() {
            put(&table.values[i * n + f].to_le_bytes())?;
        }
    }
    let rows = &table.rows;
    for r in rows {
        put(&rmap[&r.record_id].to_le_bytes())?;
    }
    for r in rows {
        put(&r.window_index.to_le_bytes())?;
    }
    for r in rows {
        put(&r.cycle_index.to_le_bytes())?;
    }
    for r in rows {
        put(&r.start_s.to_le_bytes())?;
    }
    for r in rows {
        put(&r.temperature_c.to_le_bytes())?;
    }
    for r in rows {
        put(&smap[&r.skill].to_le_bytes())?;
    }
    for r in rows {
        put(&[label_code(r.record_label)])?;
    }
    for r in rows {
        put(&[r.attack as u8])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(header)
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format(format!("{}: truncated feature cache", self.path.display())));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn read_header(path: &Path) -> Result<CacheHeader> {
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut pre = [0u8; 12];
    f.read_exact(&mut pre).map_err(|e| Error::io(path, e))?;
    if &pre[..8] != MAGIC {
        return Err(Error::Format(format!("{}: not a feature cache", path.display())));
    }
    let len = u32::from_le_bytes(pre[8..].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: CacheHeader = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: cache format {} unsupported",
            path.display(),
            header.format_version
        )));
    }
    Ok(header)
}

pub fn read_cache(path: &Path) -> Result<(CacheHeader, FeatureTable)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = read_header(path)?;
    let mut c = Cursor { buf: &buf, at: 12, path };
    c.take(u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize)?;
    let (n, nf) = (header.n_rows, header.n_features);
    let mut values = vec![0f64; n * nf];
    for f in 0..nf {
        for (i, v) in c.f64s(n)?.into_iter().enumerate() {
            values[i * nf + f] = v;
        }
    }
    let record = c.u32s(n)?;
    let window = c.u32s(n)?;
    let cycle = c.u32s(n)?;
    let start = c.f64s(n)?;
    let temp = c.f64s(n)?;
    let skill = c.u32s(n)?;
    let label = c.take(n)?.to_vec();
    let attack = c.take(n)?.to_vec();
    if c.at != buf.len() {
        return Err(Error::Format(format!("{}: trailing bytes after last column", path.display())));
    }
    let lookup = |table: &[String], i: u32| {
        table
            .get(i as usize)
            .cloned()
            .ok_or_else(|| Error::Format(format!("{}: string index {i} out of range", path.display())))
    };
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        rows.push(RowMeta {
            record_id: lookup(&header.records, record[i])?,
            window_index: window[i],
            cycle_index: cycle[i],
            start_s: start[i],
            temperature_c: temp[i],
            skill: lookup(&header.skills, skill[i])?,
            record_label: *RecordLabel::ALL
                .get(label[i] as usize)
                .ok_or_else(|| Error::Format(format!("{}: bad label code", path.display())))?,
            attack: attack[i] != 0,
        });
    }
    let table = FeatureTable { n_features: nf, values, rows };
    Ok((header, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> FeatureTable {
        let mut t = FeatureTable::new(3);
        for i in 0..4u32 {
            t.push(
                &[i as f64, -(i as f64) * 0.5, f64::MIN_POSITIVE],
                RowMeta {
                    record_id: format!("r{}", i / 2),
                    window_index: i % 2,
                    cycle_index: 7,
                    start_s: i as f64 * 0.25,
                    temperature_c: 45.125,
                    skill: if i < 2 { "a".into() } else { "b".into() },
                    record_label: RecordLabel::ALL[i as usize % 3],
                    attack: i == 3,
                },
            )
            .unwrap();
        }
        t
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let t = table();
        write_cache(&p, &t, "abc").unwrap();
        let (h, back) = read_cache(&p).unwrap();
        assert_eq!(h.config_hash, "abc");
        assert_eq!(h.records, vec!["r0", "r1"]);
        assert_eq!(back, t);
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_cache(&p, &table(), "abc").unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_cache(&p), Err(Error::Format(_))));
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_cache(&p), Err(Error::Format(_))));
    }
}
