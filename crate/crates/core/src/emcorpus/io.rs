//! On-disk corpus layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<record_id>__<receiver>__<carrier>MHz__<rate>sps.iq   raw interleaved int8 I,Q; no header
//! <dir>/<record_id>.events.jsonl                              {"t_s":…,"kind":…} per line
//! <dir>/<record_id>.temp.csv                                  header `t_s,celsius`
//! ```
//!
//! A 20 s capture at 20 MS/s is 800,000,000 bytes per receiver.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Event, IqRecord, Receiver, RecordLabel, TemperatureSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: Option<String>,
    pub records: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub skill_name: String,
    pub cycle_index: u32,
    pub label: RecordLabel,
    pub attack_skill: Option<String>,
    pub start_time_s: f64,
    pub sample_rate_hz: f64,
    pub n_samples: u64,
    pub carriers_mhz: [f64; 2],
    /// Indexed by [`Receiver::index`].
    pub iq_files: [String; 2],
    pub events_file: String,
    pub temperature_file: String,
}

impl ManifestEntry {
    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate_hz
    }
}

/// `<record_id>__<receiver>__<carrier>MHz__<rate>sps.iq`
pub fn iq_filename(record_id: &str, receiver: Receiver, carrier_mhz: f64, sample_rate_hz: f64) -> String {
    format!(
        "{record_id}__{}__{}MHz__{}sps.iq",
        receiver.name(),
        carrier_mhz,
        sample_rate_hz.round() as u64
    )
}

/// Inverse of [`iq_filename`].
pub fn parse_iq_filename(name: &str) -> Option<(String, Receiver, f64, f64)> {
    let stem = name.strip_suffix(".iq")?;
    let mut parts = stem.rsplitn(4, "__");
    let rate = parts.next()?.strip_suffix("sps")?.parse::<u64>().ok()? as f64;
    let carrier = parts.next()?.strip_suffix("MHz")?.parse::<f64>().ok()?;
    let receiver = Receiver::from_name(parts.next()?)?;
    let id = parts.next()?.to_string();
    Some((id, receiver, carrier, rate))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn as_bytes(samples: &[i8]) -> &[u8] {
    // SAFETY: i8 and u8 share size and alignment.
    unsafe { std::slice::from_raw_parts(samples.as_ptr().cast::<u8>(), samples.len()) }
}

/// Writes one record's IQ files and sidecars; returns its manifest entry.
pub fn write_record(record: &IqRecord, dir: &Path) -> Result<ManifestEntry> {
    let mut iq_files = [String::new(), String::new()];
    for rx in Receiver::BOTH {
        let name = iq_filename(
            &record.record_id,
            rx,
            record.carriers_mhz[rx.index()],
            record.sample_rate_hz,
        );
        write_file(&dir.join(&name), as_bytes(record.stream(rx)))?;
        iq_files[rx.index()] = name;
    }

    let events_file = format!("{}.events.jsonl", record.record_id);
    let mut ev = String::new();
    for e in &record.events {
        ev.push_str(&serde_json::to_string(e)?);
        ev.push('\n');
    }
    write_file(&dir.join(&events_file), ev.as_bytes())?;

    let temperature_file = format!("{}.temp.csv", record.record_id);
    let mut csv = String::from("t_s,celsius\n");
    for s in &record.temperature {
        csv.push_str(&format!("{},{}\n", s.t_s, s.celsius));
    }
    write_file(&dir.join(&temperature_file), csv.as_bytes())?;

    Ok(ManifestEntry {
        record_id: record.record_id.clone(),
        skill_name: record.skill_name.clone(),
        cycle_index: record.cycle_index,
        label: record.label,
        attack_skill: record.attack_skill.clone(),
        start_time_s: record.start_time_s,
        sample_rate_hz: record.sample_rate_hz,
        n_samples: record.n_samples() as u64,
        carriers_mhz: record.carriers_mhz,
        iq_files,
        events_file,
        temperature_file,
    })
}

pub fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)?;
    write_file(&path, text.as_bytes())
}

/// Persists `records` under `dir` (created if needed) and writes the manifest.
pub fn write_corpus(records: &[IqRecord], dir: &Path, config_hash: Option<&str>) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = records
        .iter()
        .map(|r| write_record(r, dir))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.map(str::to_string),
        records: entries,
    };
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::parse(
            &path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

/// Size in complex samples of an IQ file, checking byte-count parity.
pub fn iq_sample_count(path: &Path) -> Result<u64> {
    let len = fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    if len % 2 != 0 {
        return Err(Error::parse(
            path,
            format!("IQ byte count {len} is not a multiple of 2"),
        ));
    }
    Ok(len / 2)
}

fn check_entry(dir: &Path, entry: &ManifestEntry) -> Result<[PathBuf; 2]> {
    let mut paths = [PathBuf::new(), PathBuf::new()];
    for rx in Receiver::BOTH {
        let name = &entry.iq_files[rx.index()];
        let path = dir.join(name);
        let (id, parsed_rx, carrier, rate) = parse_iq_filename(name).ok_or_else(|| {
            Error::ManifestMismatch(format!("malformed IQ filename `{name}`"))
        })?;
        if id != entry.record_id
            || parsed_rx != rx
            || carrier != entry.carriers_mhz[rx.index()]
            || rate != entry.sample_rate_hz.round()
        {
            return Err(Error::ManifestMismatch(format!(
                "IQ filename `{name}` disagrees with manifest entry `{}`",
                entry.record_id
            )));
        }
        let n = iq_sample_count(&path)?;
        if n != entry.n_samples {
            return Err(Error::ManifestMismatch(format!(
                "`{name}` holds {n} samples, manifest says {}",
                entry.n_samples
            )));
        }
        paths[rx.index()] = path;
    }
    Ok(paths)
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: Event = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
        out.push(ev);
    }
    Ok(out)
}

pub fn read_temperature(path: &Path) -> Result<Vec<TemperatureSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "t_s,celsius" => {}
        _ => return Err(Error::parse(path, "expected header `t_s,celsius`")),
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::parse(path, format!("line {}: expected `t_s,celsius`", k + 2));
        let (t, c) = line.split_once(',').ok_or_else(bad)?;
        out.push(TemperatureSample {
            t_s: t.trim().parse().map_err(|_| bad())?,
            celsius: c.trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Loads the sidecars and (optionally) the full IQ streams of one entry.
pub fn load_record(dir: &Path, entry: &ManifestEntry, with_iq: bool) -> Result<IqRecord> {
    let paths = check_entry(dir, entry)?;
    let events = read_events(&dir.join(&entry.events_file))?;
    let temperature = read_temperature(&dir.join(&entry.temperature_file))?;
    let mut streams: [Vec<i8>; 2] = [Vec::new(), Vec::new()];
    if with_iq {
        for rx in Receiver::BOTH {
            let path = &paths[rx.index()];
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            streams[rx.index()] = bytes.into_iter().map(|b| b as i8).collect();
        }
    }
    let record = IqRecord {
        record_id: entry.record_id.clone(),
        skill_name: entry.skill_name.clone(),
        cycle_index: entry.cycle_index,
        start_time_s: entry.start_time_s,
        sample_rate_hz: entry.sample_rate_hz,
        carriers_mhz: entry.carriers_mhz,
        streams,
        events,
        temperature,
        label: entry.label,
        attack_skill: entry.attack_skill.clone(),
    };
    if with_iq {
        record.validate()?;
    }
    Ok(record)
}

/// Reads every record of a corpus, IQ included.
pub fn read_corpus(dir: &Path) -> Result<Vec<IqRecord>> {
    let manifest = read_manifest(dir)?;
    manifest
        .records
        .iter()
        .map(|e| load_record(dir, e, true))
        .collect()
}

/// Random-access reader over one IQ file; reads only the requested range so
/// window extraction runs in bounded memory.
pub struct IqFileReader {
    path: PathBuf,
    file: File,
    n_samples: u64,
}

impl IqFileReader {
    pub fn open(path: &Path) -> Result<Self> {
        let n_samples = iq_sample_count(path)?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(IqFileReader {
            path: path.to_path_buf(),
            file,
            n_samples,
        })
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    /// Reads `len` complex samples starting at sample `start` into `buf`.
    pub fn read_range(&mut self, start: u64, len: usize, buf: &mut Vec<i8>) -> Result<()> {
        if start + len as u64 > self.n_samples {
            return Err(Error::parse(
                &self.path,
                format!("range {start}+{len} past end ({} samples)", self.n_samples),
            ));
        }
        let mut bytes = vec![0u8; 2 * len];
        self.file
            .seek(SeekFrom::Start(2 * start))
            .and_then(|_| self.file.read_exact(&mut bytes))
            .map_err(|e| Error::io(&self.path, e))?;
        buf.clear();
        buf.extend(bytes.into_iter().map(|b| b as i8));
        Ok(())
    }
}

/// Buffered writer for producing an IQ file incrementally.
pub fn iq_writer(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

pub fn write_iq_chunk(w: &mut BufWriter<File>, path: &Path, samples: &[i8]) -> Result<()> {
    w.write_all(as_bytes(samples)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emcorpus::{EventKind, RecordLabel};

    fn tiny_record(id: &str, n: usize) -> IqRecord {
        IqRecord {
            record_id: id.to_string(),
            skill_name: "s".into(),
            cycle_index: 2,
            start_time_s: 1.5,
            sample_rate_hz: 1e6,
            carriers_mhz: [80.0, 800.0],
            streams: [
                (0..2 * n).map(|k| (k % 256) as u8 as i8).collect(),
                (0..2 * n).map(|k| (k * 7 % 256) as u8 as i8).collect(),
            ],
            events: vec![
                Event { t_s: 0.0, kind: EventKind::WorkStart },
                Event { t_s: n as f64 / 1e6, kind: EventKind::WorkEnd },
            ],
            temperature: vec![
                TemperatureSample { t_s: 0.0, celsius: 44.123_456_789 },
                TemperatureSample { t_s: 0.5, celsius: 44.2 },
            ],
            label: RecordLabel::Normal,
            attack_skill: None,
        }
    }

    #[test]
    fn filename_round_trips() {
        let name = iq_filename("db-c001-00ff", Receiver::RamBand, 800.0, 20e6);
        assert_eq!(name, "db-c001-00ff__ram_band__800MHz__20000000sps.iq");
        let (id, rx, c, r) = parse_iq_filename(&name).unwrap();
        assert_eq!((id.as_str(), rx, c, r), ("db-c001-00ff", Receiver::RamBand, 800.0, 20e6));
        assert_eq!(parse_iq_filename(&iq_filename("x", Receiver::CpuBand, 80.5, 1e6)).unwrap().2, 80.5);
    }

    #[test]
    fn reader_returns_requested_range() {
        let dir = tempfile::tempdir().unwrap();
        let rec = tiny_record("r", 100);
        let m = write_corpus(std::slice::from_ref(&rec), dir.path(), None).unwrap();
        let mut rd = IqFileReader::open(&dir.path().join(&m.records[0].iq_files[0])).unwrap();
        let mut buf = Vec::new();
        rd.read_range(10, 5, &mut buf).unwrap();
        assert_eq!(buf, rec.streams[0][20..30].to_vec());
        assert!(rd.read_range(98, 5, &mut buf).is_err());
    }

    #[test]
    fn malformed_sidecar_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let rec = tiny_record("r", 10);
        let m = write_corpus(std::slice::from_ref(&rec), dir.path(), None).unwrap();
        fs::write(dir.path().join(&m.records[0].events_file), "{not json}\n").unwrap();
        let err = read_corpus(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
    }

    #[test]
    fn sample_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let rec = tiny_record("r", 10);
        let m = write_corpus(std::slice::from_ref(&rec), dir.path(), None).unwrap();
        fs::write(dir.path().join(&m.records[0].iq_files[1]), [0u8; 8]).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::ManifestMismatch(_))));
    }
}
