//! On-disk formats: whitespace text for detections, a checksummed binary
//! dump for per-frame features, and a TSV log for track states.
//!
//! Floats are written in Rust's shortest round-trip form, so text round
//! trips are exact, not merely close.

use std::fmt::Write as _;
use std::path::Path;

use crc32fast::Hasher;

use crate::features::FeatureMap;
use crate::geometry::{BevGridSpec, BevIndex, Box3D};
use crate::memory::FrameRecord;
use crate::numerics::DenseArray;
use crate::radar::RadarPoint;

use super::HarnessError;

const MAGIC: &[u8; 4] = b"M3FR";
const VERSION: u16 = 1;

fn bad_line(path: &Path, line: usize, msg: impl Into<String>) -> HarnessError {
    HarnessError::BadLine { path: path.display().to_string(), line, msg: msg.into() }
}

/// One detection per line: `frame cls score x y z l w d theta`.
pub fn write_detections(path: &Path, frames: &[Vec<Box3D>]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for (t, frame) in frames.iter().enumerate() {
        for d in frame {
            writeln!(
                out,
                "{t} {} {} {} {} {} {} {} {} {}",
                d.cls, d.score, d.x, d.y, d.z, d.l, d.w, d.d, d.theta
            )
            .expect("string write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<Vec<Box3D>>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut frames: Vec<Vec<Box3D>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(bad_line(path, lineno, format!("{} fields, expected 10", fields.len())));
        }
        let t: usize = fields[0]
            .parse()
            .map_err(|_| bad_line(path, lineno, format!("bad frame {:?}", fields[0])))?;
        let cls: u32 = fields[1]
            .parse()
            .map_err(|_| bad_line(path, lineno, format!("bad class {:?}", fields[1])))?;
        let mut f = [0.0f64; 8];
        for (k, s) in fields[2..].iter().enumerate() {
            f[k] = s
                .parse()
                .map_err(|_| bad_line(path, lineno, format!("bad number {s:?}")))?;
        }
        let [score, x, y, z, l, w, d, theta] = f;
        let b = Box3D::new(x, y, z, l, w, d, theta, cls, score)
            .map_err(|e| bad_line(path, lineno, e.to_string()))?;
        if frames.len() <= t {
            frames.resize(t + 1, Vec::new());
        }
        frames[t].push(b);
    }
    Ok(frames)
}

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn grid(&mut self, g: &BevGridSpec) {
        for v in [g.x_min, g.x_max, g.y_min, g.y_max, g.cell_x, g.cell_y] {
            self.f64(v);
        }
    }
    fn map(&mut self, m: &FeatureMap) {
        self.grid(&m.grid);
        self.u32(m.channels() as u32);
        for &v in m.data.data() {
            self.f64(v);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        if self.pos + n > self.buf.len() {
            return Err(HarnessError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, HarnessError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, HarnessError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, HarnessError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, HarnessError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn grid(&mut self) -> Result<BevGridSpec, HarnessError> {
        let x_min = self.f64()?;
        let x_max = self.f64()?;
        let y_min = self.f64()?;
        let y_max = self.f64()?;
        let cell_x = self.f64()?;
        let cell_y = self.f64()?;
        Ok(BevGridSpec::new(x_min, x_max, y_min, y_max, cell_x, cell_y)?)
    }
    fn map(&mut self) -> Result<FeatureMap, HarnessError> {
        let grid = self.grid()?;
        let c = self.u32()? as usize;
        let n = c * grid.height * grid.width;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Ok(FeatureMap::from_array(
            grid,
            DenseArray::from_vec(&[c, grid.height, grid.width], data),
        )?)
    }
}

/// Binary frame dump: magic, version, little-endian headers, 64-bit
/// payloads, CRC32 trailer over everything before it.
pub fn write_frame_record(path: &Path, rec: &FrameRecord) -> Result<(), HarnessError> {
    std::fs::write(path, frame_record_bytes(rec))?;
    Ok(())
}

pub fn frame_record_bytes(rec: &FrameRecord) -> Vec<u8> {
    let mut w = ByteWriter(Vec::with_capacity(rec.payload_bytes() + 128));
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    w.u64(rec.frame_id);
    w.map(&rec.global);
    w.map(&rec.local);
    w.u32(rec.dets.len() as u32);
    for d in &rec.dets {
        w.u32(d.cls);
        for v in [d.x, d.y, d.z, d.l, d.w, d.d, d.theta, d.score] {
            w.f64(v);
        }
    }
    for i in &rec.indexes {
        w.i64(i.ix);
        w.i64(i.iy);
        w.f64(i.fx);
        w.f64(i.fy);
        w.u8(i.in_range as u8);
    }
    w.u32(rec.radar.len() as u32);
    for p in &rec.radar {
        for v in [p.x, p.y, p.z, p.vr, p.rcs] {
            w.f64(v);
        }
    }
    let mut h = Hasher::new();
    h.update(&w.0);
    let crc = h.finalize();
    w.u32(crc);
    w.0
}

pub fn read_frame_record(path: &Path) -> Result<FrameRecord, HarnessError> {
    let buf = std::fs::read(path)?;
    frame_record_from_bytes(&buf)
}

pub fn frame_record_from_bytes(buf: &[u8]) -> Result<FrameRecord, HarnessError> {
    if buf.len() < MAGIC.len() + 2 + 4 {
        return Err(HarnessError::Truncated);
    }
    if &buf[..4] != MAGIC {
        return Err(HarnessError::BadMagic);
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let mut h = Hasher::new();
    h.update(body);
    if h.finalize() != stored {
        return Err(HarnessError::BadChecksum);
    }
    let mut r = ByteReader { buf: body, pos: 4 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(HarnessError::BadVersion(version));
    }
    let frame_id = r.u64()?;
    let global = r.map()?;
    let local = r.map()?;
    let n_dets = r.u32()? as usize;
    let mut dets = Vec::with_capacity(n_dets);
    for _ in 0..n_dets {
        let cls = r.u32()?;
        let x = r.f64()?;
        let y = r.f64()?;
        let z = r.f64()?;
        let l = r.f64()?;
        let w = r.f64()?;
        let d = r.f64()?;
        let theta = r.f64()?;
        let score = r.f64()?;
        dets.push(Box3D::new(x, y, z, l, w, d, theta, cls, score)?);
    }
    let mut indexes = Vec::with_capacity(n_dets);
    for _ in 0..n_dets {
        let ix = r.i64()?;
        let iy = r.i64()?;
        let fx = r.f64()?;
        let fy = r.f64()?;
        let in_range = r.u8()? != 0;
        indexes.push(BevIndex { ix, iy, fx, fy, in_range });
    }
    let n_radar = r.u32()? as usize;
    let mut radar = Vec::with_capacity(n_radar);
    for _ in 0..n_radar {
        let x = r.f64()?;
        let y = r.f64()?;
        let z = r.f64()?;
        let vr = r.f64()?;
        let rcs = r.f64()?;
        radar.push(RadarPoint { x, y, z, vr, rcs });
    }
    if r.pos != body.len() {
        return Err(HarnessError::Truncated);
    }
    Ok(FrameRecord::new(frame_id, global, local, dets, indexes, radar)?)
}

/// One tracked object in one frame: the posterior box after that frame's
/// update (so an occluded frame carries the prediction), the reference
/// detection if any, and the candidate set as `(det index, score)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSnap {
    pub track_id: u64,
    pub frame_id: u64,
    pub posterior: Box3D,
    pub ref_det: Option<usize>,
    pub cands: Vec<(usize, f64)>,
}

/// TSV log: an `S` line per track per frame, `C` lines for its candidates.
pub fn write_track_log(path: &Path, snaps: &[TrackSnap]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for s in snaps {
        let b = &s.posterior;
        let r = s.ref_det.map_or("-".to_string(), |d| d.to_string());
        writeln!(
            out,
            "S\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{r}",
            s.track_id, s.frame_id, b.cls, b.score, b.x, b.y, b.z, b.l, b.w, b.d, b.theta
        )
        .expect("string write");
        for &(det, score) in &s.cands {
            writeln!(out, "C\t{}\t{}\t{}\t{}", s.track_id, s.frame_id, det, score)
                .expect("string write");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_track_log(path: &Path) -> Result<Vec<TrackSnap>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut snaps: Vec<TrackSnap> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_f = |s: &str| -> Result<f64, HarnessError> {
            s.parse().map_err(|_| bad_line(path, lineno, format!("bad number {s:?}")))
        };
        let parse_u = |s: &str| -> Result<u64, HarnessError> {
            s.parse().map_err(|_| bad_line(path, lineno, format!("bad integer {s:?}")))
        };
        match fields[0] {
            "S" => {
                if fields.len() != 13 {
                    return Err(bad_line(
                        path,
                        lineno,
                        format!("{} fields in state line, expected 13", fields.len()),
                    ));
                }
                let track_id = parse_u(fields[1])?;
                let frame_id = parse_u(fields[2])?;
                let cls = parse_u(fields[3])? as u32;
                let score = parse_f(fields[4])?;
                let x = parse_f(fields[5])?;
                let y = parse_f(fields[6])?;
                let z = parse_f(fields[7])?;
                let l = parse_f(fields[8])?;
                let w = parse_f(fields[9])?;
                let d = parse_f(fields[10])?;
                let theta = parse_f(fields[11])?;
                let ref_det = match fields[12] {
                    "-" => None,
                    s => Some(parse_u(s)? as usize),
                };
                let posterior = Box3D::new(x, y, z, l, w, d, theta, cls, score)
                    .map_err(|e| bad_line(path, lineno, e.to_string()))?;
                snaps.push(TrackSnap { track_id, frame_id, posterior, ref_det, cands: Vec::new() });
            }
            "C" => {
                if fields.len() != 5 {
                    return Err(bad_line(
                        path,
                        lineno,
                        format!("{} fields in candidate line, expected 5", fields.len()),
                    ));
                }
                let track_id = parse_u(fields[1])?;
                let frame_id = parse_u(fields[2])?;
                let det = parse_u(fields[3])? as usize;
                let score = parse_f(fields[4])?;
                let last = snaps.last_mut().ok_or_else(|| {
                    bad_line(path, lineno, "candidate before any state line")
                })?;
                if last.track_id != track_id || last.frame_id != frame_id {
                    return Err(bad_line(path, lineno, "candidate does not follow its state line"));
                }
                last.cands.push((det, score));
            }
            other => {
                return Err(bad_line(path, lineno, format!("unknown record type {other:?}")));
            }
        }
    }
    Ok(snaps)
}
