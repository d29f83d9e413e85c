//! Binary and text file formats: DPF1 depth, SEG1 labels, MSK1 masks, PGM
//! intensities, TUM trajectories, sparse depth text, match lists and the
//! frame-directory layout used by the command-line tool.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pixel, Pose};
use crate::metrics::Trajectory;
use crate::raster::{DepthMap, Image, MaskMap, SegMap};
use crate::sparse::{CorrespondenceSet, Match, SparseDepth, SparseSample};

/// Nine significant digits, used for every numeric value printed to stdout
/// or written to CSV.
pub fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

struct Reader<'a> {
    what: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(what: &'static str, buf: &'a [u8]) -> Self {
        Self { what, buf, pos: 0 }
    }

    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::format(self.what, offset, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(self.err(0, format!("bad magic, expected {:?}", std::str::from_utf8(m).unwrap())));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn dims(&mut self, elem: usize) -> Result<(usize, usize)> {
        let w = self.u32()?;
        let h = self.u32()?;
        let need = w.checked_mul(h).and_then(|n| n.checked_mul(elem));
        match need {
            Some(n) if n <= self.buf.len() - self.pos => Ok((w, h)),
            _ => Err(self.err(4, format!("{w}x{h} raster does not fit in {} payload bytes", self.buf.len() - self.pos))),
        }
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<(usize, f32)>> {
        let start = self.pos;
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(i, c)| (start + 4 * i, f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        Ok(self
            .take(2 * n)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(self.pos, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(magic: &[u8; 4], w: usize, h: usize, payload: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out
}

/// DPF1: values are stored as `f32`.
pub fn encode_depth(d: &DepthMap) -> Vec<u8> {
    let (w, h) = d.dims();
    let mut out = header(b"DPF1", w, h, 4 * w * h);
    for &v in d.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_depth(buf: &[u8]) -> Result<DepthMap> {
    let mut r = Reader::new("DPF1", buf);
    r.magic(b"DPF1")?;
    let (w, h) = r.dims(4)?;
    let mut values = Vec::with_capacity(w * h);
    for (off, v) in r.f32s(w * h)? {
        if !(v.is_finite() && v >= 0.0) {
            return Err(r.err(off, format!("invalid depth {v}")));
        }
        values.push(v as f64);
    }
    r.finish()?;
    DepthMap::new(w, h, values)
}

/// SEG1 with an optional trailing instance raster of the same size.
pub fn encode_seg(s: &SegMap) -> Vec<u8> {
    let (w, h) = s.dims();
    let extra = if s.instances().is_some() { 2 * w * h } else { 0 };
    let mut out = header(b"SEG1", w, h, 2 * w * h + extra);
    for &l in s.labels() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    if let Some(inst) = s.instances() {
        for &i in inst {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    out
}

pub fn decode_seg(buf: &[u8]) -> Result<SegMap> {
    let mut r = Reader::new("SEG1", buf);
    r.magic(b"SEG1")?;
    let (w, h) = r.dims(2)?;
    let labels = r.u16s(w * h)?;
    let rest = buf.len() - r.pos;
    let instances = if rest == 0 {
        None
    } else if rest == 2 * w * h {
        Some(r.u16s(w * h)?)
    } else {
        return Err(r.err(r.pos, format!("{rest} trailing bytes do not form an instance raster")));
    };
    r.finish()?;
    SegMap::new(w, h, labels, instances)
}

pub fn encode_mask(m: &MaskMap) -> Vec<u8> {
    let (w, h) = m.dims();
    let mut out = header(b"MSK1", w, h, 4 * w * h);
    for &v in m.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_mask(buf: &[u8]) -> Result<MaskMap> {
    let mut r = Reader::new("MSK1", buf);
    r.magic(b"MSK1")?;
    let (w, h) = r.dims(4)?;
    let mut values = Vec::with_capacity(w * h);
    for (off, v) in r.f32s(w * h)? {
        if !(0.0..=1.0).contains(&v) {
            return Err(r.err(off, format!("mask value {v} outside [0, 1]")));
        }
        values.push(v as f64);
    }
    r.finish()?;
    MaskMap::new(w, h, values)
}

/// Quantizes an intensity in `[0, 1]` to 8 bits.
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let (w, h) = img.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize8(v)));
    out
}

pub fn decode_pgm(buf: &[u8]) -> Result<Image> {
    let err = |off: usize, msg: &str| Error::format("PGM", off, msg);
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(err(0, "expected P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| err(start, "header field out of range"))?;
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos - 1, "only maxval 255 is supported"));
    }
    let n = w.checked_mul(h).ok_or_else(|| err(2, "image too large"))?;
    if buf.len() - pos != n {
        return Err(err(pos, &format!("expected {n} pixel bytes, found {}", buf.len() - pos)));
    }
    Image::new(w, h, buf[pos..].iter().map(|&b| b as f64 / 255.0).collect())
}

/// One TUM trajectory line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TumRecord {
    pub stamp: f64,
    pub translation: [f64; 3],
    /// `(qx, qy, qz, qw)`.
    pub quaternion: [f64; 4],
}

impl TumRecord {
    /// Record for a camera-to-world pose.
    pub fn from_pose(stamp: f64, pose: &Pose) -> Self {
        let q = pose.quaternion();
        let t = pose.translation();
        Self {
            stamp,
            translation: [t.x, t.y, t.z],
            quaternion: [q.i, q.j, q.k, q.w],
        }
    }

    pub fn pose(&self) -> Result<Pose> {
        let [x, y, z, w] = self.quaternion;
        let [tx, ty, tz] = self.translation;
        let q = Quaternion::new(w, x, y, z);
        if !(q.norm() > 1e-9) {
            return Err(Error::InvalidPose("zero quaternion".into()));
        }
        Ok(Pose::from_quaternion(UnitQuaternion::from_quaternion(q), Vector3::new(tx, ty, tz)))
    }
}

pub fn format_tum(records: &[TumRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let [tx, ty, tz] = r.translation;
        let [qx, qy, qz, qw] = r.quaternion;
        writeln!(out, "{} {tx} {ty} {tz} {qx} {qy} {qz} {qw}", r.stamp).unwrap();
    }
    out
}

/// Parses TUM text; `#` lines and blank lines are skipped.
pub fn parse_tum(text: &str) -> Result<Vec<TumRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() && !body.starts_with('#') {
            let vals: Vec<f64> = body
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("TUM", offset, "non-numeric field"))?;
            if vals.len() != 8 || vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::format("TUM", offset, "expected 8 finite fields"));
            }
            out.push(TumRecord {
                stamp: vals[0],
                translation: [vals[1], vals[2], vals[3]],
                quaternion: [vals[4], vals[5], vals[6], vals[7]],
            });
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn trajectory_to_tum(traj: &Trajectory) -> Vec<TumRecord> {
    traj.stamps.iter().zip(&traj.poses).map(|(&s, p)| TumRecord::from_pose(s, p)).collect()
}

pub fn tum_to_trajectory(records: &[TumRecord]) -> Result<Trajectory> {
    let poses = records.iter().map(TumRecord::pose).collect::<Result<Vec<_>>>()?;
    Trajectory::new(records.iter().map(|r| r.stamp).collect(), poses)
}

pub fn format_sparse(s: &SparseDepth) -> String {
    let mut out = format!("# frame {}\n", s.frame);
    for smp in s.samples() {
        writeln!(out, "{} {} {}", smp.pixel.u, smp.pixel.v, smp.depth).unwrap();
    }
    out
}

fn numeric_lines(what: &'static str, text: &str, fields: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() && !body.starts_with('#') {
            let vals: Vec<f64> = body
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(what, offset, "non-numeric field"))?;
            if vals.len() != fields {
                return Err(Error::format(what, offset, format!("expected {fields} fields, got {}", vals.len())));
            }
            out.push((offset, vals));
        }
        offset += line.len();
    }
    Ok(out)
}

pub fn parse_sparse(text: &str, width: usize, height: usize) -> Result<SparseDepth> {
    let first = text.lines().next().unwrap_or("");
    let frame = first
        .strip_prefix("# frame ")
        .and_then(|s| s.trim().parse::<u64>().ok())
        .ok_or_else(|| Error::format("sparse depth", 0, "expected '# frame <id>' header"))?;
    let rows = numeric_lines("sparse depth", text, 3)?;
    let samples = rows
        .into_iter()
        .map(|(_, v)| SparseSample {
            pixel: Pixel::new(v[0], v[1]),
            depth: v[2],
        })
        .collect();
    SparseDepth::new(frame, samples, width, height)
}

/// Match list text: header `# frames <a> <b>`, then `ua va ub vb` per line.
pub fn format_matches(c: &CorrespondenceSet) -> String {
    let mut out = format!("# frames {} {}\n", c.frame_a, c.frame_b);
    for m in c.matches() {
        writeln!(out, "{} {} {} {}", m.a.u, m.a.v, m.b.u, m.b.v).unwrap();
    }
    out
}

pub fn parse_matches(text: &str, k: &CameraIntrinsics) -> Result<CorrespondenceSet> {
    let first = text.lines().next().unwrap_or("");
    let ids: Vec<u64> = first
        .strip_prefix("# frames ")
        .map(|s| s.split_whitespace().filter_map(|t| t.parse().ok()).collect())
        .unwrap_or_default();
    if ids.len() != 2 {
        return Err(Error::format("matches", 0, "expected '# frames <a> <b>' header"));
    }
    let matches = numeric_lines("matches", text, 4)?
        .into_iter()
        .map(|(_, v)| Match::new(Pixel::new(v[0], v[1]), Pixel::new(v[2], v[3])))
        .collect();
    CorrespondenceSet::new(ids[0], ids[1], matches, k)
}

/// Camera description stored next to a frame sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub intrinsics: CameraIntrinsics,
    pub frame_interval: f64,
}

/// One frame of an on-disk sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredFrame {
    pub image: Image,
    pub seg: SegMap,
    pub depth: Option<DepthMap>,
    /// Matches from the previous frame into this one.
    pub matches: Option<CorrespondenceSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub camera: CameraFile,
    pub frames: Vec<StoredFrame>,
    /// Ground-truth camera-to-world poses when available.
    pub poses: Option<Vec<Pose>>,
}

impl Sequence {
    pub fn stamps(&self) -> Vec<f64> {
        (0..self.frames.len()).map(|i| i as f64 * self.camera.frame_interval).collect()
    }
}

pub fn frame_path(dir: &Path, kind: &str, index: usize) -> PathBuf {
    let ext = match kind {
        "image" => "pgm",
        "depth" => "dpf",
        "seg" => "seg",
        "mask" | "msc" | "mgc" | "dynamic" => "msk",
        "matches" => "txt",
        "sparse" => "txt",
        _ => "bin",
    };
    dir.join(format!("{kind}_{index:06}.{ext}"))
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    let camera = toml::to_string(&seq.camera).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("camera.toml"), camera)?;
    for (i, f) in seq.frames.iter().enumerate() {
        fs::write(frame_path(dir, "image", i), encode_pgm(&f.image))?;
        fs::write(frame_path(dir, "seg", i), encode_seg(&f.seg))?;
        if let Some(d) = &f.depth {
            fs::write(frame_path(dir, "depth", i), encode_depth(d))?;
        }
        if let Some(m) = &f.matches {
            fs::write(frame_path(dir, "matches", i), format_matches(m))?;
        }
    }
    if let Some(poses) = &seq.poses {
        let traj = Trajectory::new(seq.stamps(), poses.clone())?;
        fs::write(dir.join("groundtruth.tum"), format_tum(&trajectory_to_tum(&traj)))?;
    }
    Ok(())
}

fn read_optional(path: &Path) -> Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { what, offset, msg } => Error::Format {
            what,
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let cam_text = fs::read_to_string(dir.join("camera.toml"))?;
    let camera: CameraFile = toml::from_str(&cam_text).map_err(|e| Error::Config(e.to_string()))?;
    camera.intrinsics.validate()?;
    let k = camera.intrinsics;
    let mut frames = Vec::new();
    loop {
        let i = frames.len();
        let Some(img) = read_optional(&frame_path(dir, "image", i))? else {
            break;
        };
        let p = frame_path(dir, "image", i);
        let image = with_path(&p, decode_pgm(&img))?;
        let p = frame_path(dir, "seg", i);
        let seg = with_path(&p, decode_seg(&fs::read(&p)?))?;
        let p = frame_path(dir, "depth", i);
        let depth = read_optional(&p)?.map(|b| with_path(&p, decode_depth(&b))).transpose()?;
        let p = frame_path(dir, "matches", i);
        let matches = match read_optional(&p)? {
            Some(b) => {
                let text = String::from_utf8(b).map_err(|e| Error::format("matches", e.utf8_error().valid_up_to(), "invalid UTF-8"))?;
                Some(with_path(&p, parse_matches(&text, &k))?)
            }
            None => None,
        };
        for (what, dims) in [("image", image.dims()), ("seg", seg.dims())] {
            if dims != (k.width, k.height) {
                return Err(Error::InvalidArgument(format!("frame {i} {what} is {dims:?}, camera is {}x{}", k.width, k.height)));
            }
        }
        frames.push(StoredFrame {
            image,
            seg,
            depth,
            matches,
        });
    }
    if frames.is_empty() {
        return Err(Error::EmptyInput("frame directory"));
    }
    let poses = match read_optional(&dir.join("groundtruth.tum"))? {
        Some(b) => {
            let text = String::from_utf8_lossy(&b);
            let traj = tum_to_trajectory(&parse_tum(&text)?)?;
            Some(traj.poses)
        }
        None => None,
    };
    Ok(Sequence { camera, frames, poses })
}

/// One row of the per-step adaptation log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossLogRow {
    pub step: usize,
    pub frame: usize,
    pub l_p: f64,
    pub l_s: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub n_photometric: usize,
    pub n_smooth: usize,
    pub n_depth: usize,
    pub lr: f64,
    pub learned: bool,
    pub pose_ok: bool,
    pub stopped: bool,
}

pub const LOSS_LOG_HEADER: &str = "step,frame,l_p,l_s,l_g,l_d,l_total,n_photometric,n_smooth,n_depth,lr,learned,pose_ok,stopped";

pub fn format_loss_log(rows: &[LossLogRow]) -> String {
    let mut out = String::from(LOSS_LOG_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.frame,
            fmt9(r.l_p),
            fmt9(r.l_s),
            fmt9(r.l_g),
            fmt9(r.l_d),
            fmt9(r.l_total),
            r.n_photometric,
            r.n_smooth,
            r.n_depth,
            fmt9(r.lr),
            r.learned as u8,
            r.pose_ok as u8,
            r.stopped as u8
        )
        .unwrap();
    }
    out
}

pub fn parse_loss_log(text: &str) -> Result<Vec<LossLogRow>> {
    let mut lines = text.split_inclusive('\n');
    let head = lines.next().unwrap_or("");
    if head.trim_end() != LOSS_LOG_HEADER {
        return Err(Error::format("loss log", 0, "unexpected header"));
    }
    let mut offset = head.len();
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = || Error::format("loss log", offset, "malformed row");
        if f.len() != 14 {
            return Err(bad());
        }
        let u = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let x = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let b = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad()),
        };
        rows.push(LossLogRow {
            step: u(f[0])?,
            frame: u(f[1])?,
            l_p: x(f[2])?,
            l_s: x(f[3])?,
            l_g: x(f[4])?,
            l_d: x(f[5])?,
            l_total: x(f[6])?,
            n_photometric: u(f[7])?,
            n_smooth: u(f[8])?,
            n_depth: u(f[9])?,
            lr: x(f[10])?,
            learned: b(f[11])?,
            pose_ok: b(f[12])?,
            stopped: b(f[13])?,
        });
        offset += line.len();
    }
    Ok(rows)
}
