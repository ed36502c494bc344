//! On-disk formats: binary CIR datasets (`CIRD`), preprocessed frames
//! (`CCPF`), model checkpoints, trajectory and CDF CSVs, run manifests.
//!
//! Binary files are little-endian. CIR samples are stored as complex64
//! (interleaved `f32` re/im) and widened to `f64` on read; everything else
//! is stored at full precision.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::TrajectoryEstimate;
use crate::geometry::Point2;
use crate::model::checkpoint::{read_checkpoint, write_checkpoint};
use crate::model::ChartModel;
use crate::pipeline::{PreprocessedFrame, TdoaVector};
use crate::scalar::Real;
use crate::scenario::{CirDataset, CirFrame, DisplacementPair, DisplacementSet, Scenario, SignalDomain};

pub const DATASET_MAGIC: &[u8; 4] = b"CIRD";
pub const DATASET_VERSION: u32 = 1;
pub const FRAMES_MAGIC: &[u8; 4] = b"CCPF";
pub const FRAMES_VERSION: u32 = 1;

const TAG_SCENARIO: &[u8; 4] = b"SCEN";
const TAG_LABELS: &[u8; 4] = b"LOSL";
const TAG_TRUTH: &[u8; 4] = b"TRUE";
const TAG_DISPLACEMENT: &[u8; 4] = b"DISP";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Little-endian primitive reader over an in-memory buffer.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format_err(self.path, format!("truncated at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| format_err(self.path, "count overflows usize"))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    /// Checks that `count` records of `size` bytes fit before allocating.
    fn expect(&self, count: usize, size: usize) -> Result<()> {
        match count.checked_mul(size) {
            Some(n) if n <= self.buf.len() - self.pos => Ok(()),
            _ => Err(format_err(self.path, format!("declared {count} records exceed the file size"))),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    put_u64(out, payload.len());
    out.extend_from_slice(payload);
}

/// Contents of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub scenario: Scenario,
    pub dataset: CirDataset,
    /// True 2D positions per frame.
    pub truth: Option<Vec<Point2>>,
    pub displacements: Option<DisplacementSet>,
}

impl DatasetFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let s = &self.scenario;
        let d = &self.dataset;
        d.validate()?;
        let (m, n) = (s.num_trps(), s.n_fft);
        if d.num_trps() != m {
            return Err(Error::ShapeMismatch { expected: format!("{m} TRPs"), got: format!("{}", d.num_trps()) });
        }
        if let Some(i) = d.frames.iter().position(|f| f.rows.ncols() != n) {
            return Err(Error::invalid(format!("frame {i} does not have {n} samples")));
        }
        let t = d.len();
        let mut out = Vec::with_capacity(64 + t * (8 + m * n * 8));
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION as usize);
        put_u32(&mut out, m);
        put_u32(&mut out, s.num_rus());
        for &ru in &s.ru_assignment {
            put_u32(&mut out, ru);
        }
        for &r in &s.ref_trp_per_ru {
            put_u32(&mut out, r);
        }
        put_u32(&mut out, n);
        put_f64(&mut out, s.sample_rate_hz);
        put_u64(&mut out, t);
        out.push(match d.domain {
            SignalDomain::Cir => 0,
            SignalDomain::Cfr => 1,
        });
        for (ts, f) in d.timestamps.iter().zip(&d.frames) {
            put_f64(&mut out, *ts);
            for v in f.rows.iter() {
                out.extend_from_slice(&(v.re as f32).to_le_bytes());
                out.extend_from_slice(&(v.im as f32).to_le_bytes());
            }
        }

        put_section(&mut out, TAG_SCENARIO, &serde_json::to_vec(s)?);
        let labels: Vec<u8> = d.los_labels.iter().map(|&b| b as u8).collect();
        put_section(&mut out, TAG_LABELS, &labels);
        if let Some(truth) = &self.truth {
            if truth.len() != t {
                return Err(Error::invalid("truth length differs from frame count"));
            }
            let mut p = Vec::with_capacity(16 * t);
            for q in truth {
                put_f64(&mut p, q[0]);
                put_f64(&mut p, q[1]);
            }
            put_section(&mut out, TAG_TRUTH, &p);
        }
        if let Some(ds) = &self.displacements {
            let mut p = Vec::with_capacity(32 + 24 * ds.pairs.len());
            put_f64(&mut p, ds.epsilon_s);
            put_f64(&mut p, ds.noise_sigma_m);
            put_f64(&mut p, ds.bias_rate_m_per_s);
            put_u64(&mut p, ds.pairs.len());
            for pair in &ds.pairs {
                if pair.i >= t || pair.j >= t {
                    return Err(Error::invalid("displacement pair refers to a missing frame"));
                }
                put_u64(&mut p, pair.i);
                put_u64(&mut p, pair.j);
                put_f64(&mut p, pair.d_hat);
            }
            put_section(&mut out, TAG_DISPLACEMENT, &p);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut c = Cursor { buf: bytes, pos: 0, path };
        if c.take(4)? != DATASET_MAGIC {
            return Err(format_err(path, "not a CIR dataset (bad magic)"));
        }
        let version = c.u32()?;
        if version != DATASET_VERSION {
            return Err(format_err(path, format!("unsupported dataset version {version}")));
        }
        let m = c.u32()? as usize;
        let k = c.u32()? as usize;
        c.expect(m + k, 4)?;
        let ru_assignment: Vec<usize> = (0..m).map(|_| c.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let ref_trp_per_ru: Vec<usize> = (0..k).map(|_| c.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let n = c.u32()? as usize;
        let fs = c.f64()?;
        let t = c.usize()?;
        let domain = match c.u8()? {
            0 => SignalDomain::Cir,
            1 => SignalDomain::Cfr,
            b => return Err(format_err(path, format!("unknown signal domain {b}"))),
        };
        c.expect(t, 8 + m * n * 8)?;
        let mut frames = Vec::with_capacity(t);
        let mut timestamps = Vec::with_capacity(t);
        for _ in 0..t {
            timestamps.push(c.f64()?);
            let mut rows = Array2::<Complex64>::zeros((m, n));
            for v in rows.iter_mut() {
                let re = c.f32()?;
                let im = c.f32()?;
                *v = Complex64::new(re as f64, im as f64);
            }
            frames.push(CirFrame { rows });
        }

        let mut scenario = None;
        let mut labels = None;
        let mut truth = None;
        let mut displacements = None;
        while !c.at_end() {
            let tag: [u8; 4] = c.take(4)?.try_into().unwrap();
            let len = c.usize()?;
            let payload = c.take(len)?;
            let mut p = Cursor { buf: payload, pos: 0, path };
            match &tag {
                TAG_SCENARIO => scenario = Some(serde_json::from_slice::<Scenario>(payload)?),
                TAG_LABELS => {
                    if len != m * t {
                        return Err(format_err(path, "label section length differs from M*T"));
                    }
                    labels = Some(Array2::from_shape_vec((m, t), payload.iter().map(|&b| b != 0).collect()).unwrap());
                }
                TAG_TRUTH => {
                    if len != 16 * t {
                        return Err(format_err(path, "truth section length differs from T"));
                    }
                    truth = Some((0..t).map(|_| Ok([p.f64()?, p.f64()?])).collect::<Result<Vec<_>>>()?);
                }
                TAG_DISPLACEMENT => {
                    let epsilon_s = p.f64()?;
                    let noise_sigma_m = p.f64()?;
                    let bias_rate_m_per_s = p.f64()?;
                    let count = p.usize()?;
                    p.expect(count, 24)?;
                    let mut pairs = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (i, j, d_hat) = (p.usize()?, p.usize()?, p.f64()?);
                        if i >= t || j >= t {
                            return Err(format_err(path, "displacement pair refers to a missing frame"));
                        }
                        pairs.push(DisplacementPair { i, j, d_hat });
                    }
                    if !p.at_end() {
                        return Err(format_err(path, "trailing bytes in displacement section"));
                    }
                    displacements = Some(DisplacementSet { pairs, epsilon_s, noise_sigma_m, bias_rate_m_per_s });
                }
                // sections from newer writers are skipped
                _ => {}
            }
        }

        let scenario = scenario.ok_or_else(|| format_err(path, "missing scenario section"))?;
        if scenario.num_trps() != m
            || scenario.ru_assignment != ru_assignment
            || scenario.ref_trp_per_ru != ref_trp_per_ru
            || scenario.n_fft != n
            || scenario.sample_rate_hz.to_bits() != fs.to_bits()
        {
            return Err(format_err(path, "header disagrees with the stored scenario"));
        }
        let dataset = CirDataset {
            frames,
            timestamps,
            los_labels: labels.unwrap_or_else(|| Array2::from_elem((m, t), true)),
            domain,
        };
        Ok(Self { scenario, dataset, truth, displacements })
    }
}

pub fn write_dataset(path: &Path, file: &DatasetFile) -> Result<()> {
    atomic_write(path, &file.encode()?)
}

pub fn read_dataset(path: &Path) -> Result<DatasetFile> {
    DatasetFile::decode(&fs::read(path)?, path)
}

/// Preprocessed frames with the normalization constant they were built with.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFile {
    pub alpha_norm: f64,
    pub frames: Vec<PreprocessedFrame>,
}

impl FrameFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let (m, c) = self.frames.first().map_or((0, 0), |f| f.h_norm.dim());
        let l = self.frames.first().map_or(0, |f| f.tdoa.len());
        if self.frames.iter().any(|f| f.h_norm.dim() != (m, c) || f.tdoa.len() != l || f.tdoa.valid.len() != l) {
            return Err(Error::invalid("frames have inconsistent shapes"));
        }
        let mut out = Vec::with_capacity(40 + self.frames.len() * (16 + 8 * m * c + 9 * l));
        out.extend_from_slice(FRAMES_MAGIC);
        put_u32(&mut out, FRAMES_VERSION as usize);
        put_u32(&mut out, m);
        put_u32(&mut out, c);
        put_u32(&mut out, l);
        put_f64(&mut out, self.alpha_norm);
        put_u64(&mut out, self.frames.len());
        for f in &self.frames {
            put_f64(&mut out, f.timestamp);
            put_u64(&mut out, f.source_index);
            for v in f.h_norm.iter() {
                put_f64(&mut out, *v);
            }
            for v in &f.tdoa.values {
                put_f64(&mut out, *v);
            }
            out.extend(f.tdoa.valid.iter().map(|&b| b as u8));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0, path };
        if r.take(4)? != FRAMES_MAGIC {
            return Err(format_err(path, "not a preprocessed frame file (bad magic)"));
        }
        let version = r.u32()?;
        if version != FRAMES_VERSION {
            return Err(format_err(path, format!("unsupported frame file version {version}")));
        }
        let (m, c, l) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let alpha_norm = r.f64()?;
        let t = r.usize()?;
        r.expect(t, 16 + 8 * m * c + 9 * l)?;
        let mut frames = Vec::with_capacity(t);
        for _ in 0..t {
            let timestamp = r.f64()?;
            let source_index = r.usize()?;
            let data = (0..m * c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let values = (0..l).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let valid = (0..l).map(|_| r.u8().map(|b| b != 0)).collect::<Result<Vec<_>>>()?;
            frames.push(PreprocessedFrame {
                h_norm: Array2::from_shape_vec((m, c), data).unwrap(),
                tdoa: TdoaVector { values, valid },
                timestamp,
                source_index,
            });
        }
        if !r.at_end() {
            return Err(format_err(path, "trailing bytes after the last frame"));
        }
        Ok(Self { alpha_norm, frames })
    }
}

pub fn write_frames(path: &Path, file: &FrameFile) -> Result<()> {
    atomic_write(path, &file.encode()?)
}

pub fn read_frames(path: &Path) -> Result<FrameFile> {
    FrameFile::decode(&fs::read(path)?, path)
}

pub fn write_model<T: Real>(path: &Path, model: &ChartModel<T>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    atomic_write(path, &buf)
}

pub fn read_model<T: Real>(path: &Path) -> Result<ChartModel<T>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    read_checkpoint(&mut r).map_err(|e| match e {
        Error::Format { msg, .. } => format_err(path, msg),
        e => e,
    })
}

/// Writes to a temporary file in the target directory, then renames it.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(path, e.to_string()))
}

fn csv_bytes(write: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        write(&mut w).map_err(|e| Error::invalid(e.to_string()))?;
        w.flush()?;
    }
    Ok(buf)
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    t: f64,
    x_m: Option<f64>,
    y_m: Option<f64>,
    gap: u8,
}

/// Trajectory CSV with columns `t, x_m, y_m, gap`; gap rows leave x/y empty.
pub fn write_trajectory_csv(path: &Path, estimate: &TrajectoryEstimate) -> Result<()> {
    let bytes = csv_bytes(|w| {
        for (t, p) in estimate.timestamps.iter().zip(&estimate.positions) {
            w.serialize(TrajectoryRow {
                t: *t,
                x_m: p.map(|p| p[0]),
                y_m: p.map(|p| p[1]),
                gap: p.is_none() as u8,
            })?;
        }
        Ok(())
    })?;
    atomic_write(path, &bytes)
}

/// Reads a trajectory CSV as `(timestamps, positions)`.
pub fn read_trajectory_csv(path: &Path) -> Result<(Vec<f64>, Vec<Option<Point2>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e.to_string()))?;
    let mut ts = Vec::new();
    let mut ps = Vec::new();
    for (line, row) in r.deserialize::<TrajectoryRow>().enumerate() {
        let row = row.map_err(|e| format_err(path, e.to_string()))?;
        ts.push(row.t);
        ps.push(match (row.gap, row.x_m, row.y_m) {
            (0, Some(x), Some(y)) => Some([x, y]),
            (1, _, _) => None,
            _ => return Err(format_err(path, format!("row {} is neither a position nor a gap", line + 1))),
        });
    }
    Ok((ts, ps))
}

/// Attaches source frame indices to a trajectory read from CSV by exact
/// timestamp match against the dataset.
pub fn match_timestamps(
    timestamps: Vec<f64>,
    positions: Vec<Option<Point2>>,
    dataset_timestamps: &[f64],
) -> Result<TrajectoryEstimate> {
    let mut source_index = Vec::with_capacity(timestamps.len());
    let mut k = 0;
    for &t in &timestamps {
        // estimates are in dataset order, so a forward scan suffices
        while k < dataset_timestamps.len() && dataset_timestamps[k].to_bits() != t.to_bits() {
            k += 1;
        }
        if k == dataset_timestamps.len() {
            return Err(Error::invalid(format!("estimate at t={t} has no frame in the dataset")));
        }
        source_index.push(k);
        k += 1;
    }
    Ok(TrajectoryEstimate { timestamps, source_index, positions })
}

/// CDF CSV with columns `error_m, fraction`.
pub fn write_cdf_csv(path: &Path, cdf: &[(f64, f64)]) -> Result<()> {
    let bytes = csv_bytes(|w| {
        w.write_record(["error_m", "fraction"])?;
        for (e, f) in cdf {
            w.serialize((e, f))?;
        }
        Ok(())
    })?;
    atomic_write(path, &bytes)
}

/// Loss history CSV with columns `epoch, tdoa_loss, disp_loss, total`.
pub fn write_history_csv(path: &Path, history: &[crate::trainer::LossRecord]) -> Result<()> {
    let bytes = csv_bytes(|w| {
        w.write_record(["epoch", "tdoa_loss", "disp_loss", "total"])?;
        for r in history {
            w.serialize((r.epoch, r.tdoa, r.displacement, r.total))?;
        }
        Ok(())
    })?;
    atomic_write(path, &bytes)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self { path: path.to_path_buf(), sha256: sha256_file(path)? })
    }
}

/// Self-describing record written beside every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Full effective configuration after defaults and overrides.
    pub config: serde_json::Value,
    pub seeds: Vec<(String, u64)>,
    pub alpha_norm: Option<f64>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds: Vec::new(),
            alpha_norm: None,
            lambda: None,
            beta: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Buffered writer for streaming text outputs.
pub fn create_buffered(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}
