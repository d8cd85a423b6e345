//! Readers and writers for frames (PGM/PPM), flow fields (.flo), weights and text files.
//!
//! `.flo` and weight files are little-endian. 16-bit PGM samples are big-endian as
//! netpbm prescribes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::FusionConfig;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor;

pub const FLO_MAGIC: f32 = 202021.25;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"MAVW";
pub const WEIGHTS_VERSION: u32 = 1;

fn fmt_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(fmt_err(self.path, start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| fmt_err(self.path, start, format!("{what} out of range")))
    }
}

/// Decodes a binary PGM (`P5`) or PPM (`P6`) into a gray `H×W` image in `[0, 1]`.
/// Color is reduced to luma `0.299R + 0.587G + 0.114B`.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err(fmt_err(path, 0, "expected binary PGM (P5) or PPM (P6) magic"));
    }
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut r = HeaderReader { bytes, pos: 2, path };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(fmt_err(path, r.pos, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(fmt_err(path, r.pos, format!("maxval {maxval} outside 1..=65535")));
    }
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(fmt_err(path, r.pos, "expected single whitespace before raster"));
    }
    let start = r.pos + 1;
    let sample = if maxval < 256 { 1 } else { 2 };
    let need = width * height * channels * sample;
    if bytes.len() - start < need {
        return Err(fmt_err(
            path,
            bytes.len(),
            format!("truncated raster: expected {need} bytes, found {}", bytes.len() - start),
        ));
    }
    let raster = &bytes[start..start + need];
    let read = |i: usize| -> f64 {
        if sample == 1 {
            raster[i] as f64
        } else {
            u16::from_be_bytes([raster[2 * i], raster[2 * i + 1]]) as f64
        }
    };
    let m = maxval as f64;
    let data = (0..width * height)
        .map(|p| {
            if channels == 1 {
                (read(p) / m).min(1.0) as f32
            } else {
                let (rr, gg, bb) = (read(3 * p), read(3 * p + 1), read(3 * p + 2));
                ((0.299 * rr + 0.587 * gg + 0.114 * bb) / m).min(1.0) as f32
            }
        })
        .collect();
    Tensor::from_vec(&[height, width], data)
}

/// Encodes a gray image as 8-bit `P5`, rounding half up and clamping to `[0, 1]`.
pub fn encode_pgm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = img.hw()?;
    if !img.all_finite() {
        return Err(Error::NonFinite("image to be written".into()));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) as f64 * 255.0 + 0.5).floor() as u8));
    Ok(out)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    decode_pnm(&read_bytes(path)?, path)
}

pub fn write_pgm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    write_bytes(path, &encode_pgm(img)?)
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * flow.interleaved().len());
    out.extend(FLO_MAGIC.to_le_bytes());
    out.extend((flow.width() as i32).to_le_bytes());
    out.extend((flow.height() as i32).to_le_bytes());
    for v in flow.interleaved() {
        out.extend(v.to_le_bytes());
    }
    out
}

fn le4(bytes: &[u8], at: usize) -> [u8; 4] {
    bytes[at..at + 4].try_into().unwrap()
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    if bytes.len() < 4 || f32::from_le_bytes(le4(bytes, 0)) != FLO_MAGIC {
        return Err(fmt_err(path, 0, "not a .flo file"));
    }
    if bytes.len() < 12 {
        return Err(fmt_err(path, bytes.len(), "truncated .flo header"));
    }
    let w = i32::from_le_bytes(le4(bytes, 4));
    let h = i32::from_le_bytes(le4(bytes, 8));
    if w <= 0 || h <= 0 {
        return Err(fmt_err(path, 4, format!("invalid flow size {w}x{h}")));
    }
    let n = 2 * w as usize * h as usize;
    if bytes.len() < 12 + 4 * n {
        return Err(fmt_err(path, bytes.len(), format!("truncated flow payload: expected {} bytes", 4 * n)));
    }
    let data = (0..n).map(|i| f32::from_le_bytes(le4(bytes, 12 + 4 * i))).collect();
    FlowField::from_interleaved(w as usize, h as usize, data)
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&read_bytes(path)?, path)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    write_bytes(path, &encode_flo(flow))
}

/// Ordered named `f32` tensors with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<(String, Tensor<f32>)>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate weight name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(WEIGHTS_MAGIC);
        out.extend(WEIGHTS_VERSION.to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend((e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0usize;
        let u32_at = |pos: &mut usize, what: &str| -> Result<u32> {
            if bytes.len() < *pos + 4 {
                return Err(fmt_err(path, bytes.len(), format!("truncated while reading {what}")));
            }
            let v = u32::from_le_bytes(le4(bytes, *pos));
            *pos += 4;
            Ok(v)
        };
        if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(fmt_err(path, 0, "bad magic, expected MAVW"));
        }
        pos += 4;
        let version = u32_at(&mut pos, "version")?;
        if version != WEIGHTS_VERSION {
            return Err(fmt_err(path, 4, format!("unsupported version {version}")));
        }
        let count = u32_at(&mut pos, "tensor count")?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = u32_at(&mut pos, "name length")? as usize;
            if bytes.len() < pos + name_len {
                return Err(fmt_err(path, bytes.len(), "truncated tensor name"));
            }
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|_| fmt_err(path, pos, "tensor name is not UTF-8"))?
                .to_string();
            let name_at = pos;
            pos += name_len;
            let rank = u32_at(&mut pos, "rank")? as usize;
            if !(1..=4).contains(&rank) {
                return Err(fmt_err(path, pos - 4, format!("unsupported rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(&mut pos, "extent")? as usize);
            }
            let n: usize = shape.iter().product();
            if bytes.len() < pos + 4 * n {
                return Err(fmt_err(path, bytes.len(), format!("truncated values of `{name}`")));
            }
            let data = (0..n).map(|i| f32::from_le_bytes(le4(bytes, pos + 4 * i))).collect();
            pos += 4 * n;
            let t = Tensor::from_vec(&shape, data).map_err(|e| fmt_err(path, name_at, e.to_string()))?;
            store.insert(name, t).map_err(|e| fmt_err(path, name_at, e.to_string()))?;
        }
        Ok(store)
    }
}

pub fn save_weights(path: &Path, store: &WeightStore) -> Result<()> {
    write_bytes(path, &store.encode())
}

pub fn load_weights(path: &Path) -> Result<WeightStore> {
    WeightStore::decode(&read_bytes(path)?, path)
}

pub fn read_config(path: &Path) -> Result<FusionConfig> {
    FusionConfig::parse(&read_text(path)?, path)
}

pub fn write_config(path: &Path, cfg: &FusionConfig) -> Result<()> {
    write_text(path, &cfg.to_text())
}

/// Sorted `.pgm`/`.ppm` files of a directory.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|s| s.to_str()), Some("pgm" | "ppm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every frame of a directory in name order; all frames must share one size.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let files = list_frames(dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("{}: no .pgm/.ppm frames", dir.display())));
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let img = read_pgm(f)?;
        if let Some(first) = frames.first() {
            let first: &Tensor<f32> = first;
            if first.shape() != img.shape() {
                return Err(Error::invalid(format!(
                    "{}: size {:?} differs from first frame {:?}",
                    f.display(),
                    img.shape(),
                    first.shape()
                )));
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}.pgm")
}

pub fn write_frame_dir(dir: &Path, frames: &[Tensor<f32>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_pgm(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}

/// Flow from frame `t` toward `t+1` (`fwd`) or `t−1` (`bwd`).
pub fn flow_name(kind: &str, index: usize) -> String {
    format!("{kind}_{index:04}.flo")
}

/// Reads `fwd_XXXX.flo` / `bwd_XXXX.flo` for every frame of a `frames`-long sequence.
/// Missing boundary files (`bwd_0000`, last `fwd`) are zero flows.
pub fn read_flow_dir(dir: &Path, frames: usize, width: usize, height: usize) -> Result<(Vec<FlowField>, Vec<FlowField>)> {
    let mut fwd = Vec::with_capacity(frames);
    let mut bwd = Vec::with_capacity(frames);
    for t in 0..frames {
        for (kind, out, boundary) in [("fwd", &mut fwd, t + 1 == frames), ("bwd", &mut bwd, t == 0)] {
            let path = dir.join(flow_name(kind, t));
            let f = if boundary && !path.exists() {
                FlowField::zeros(width, height)
            } else {
                read_flo(&path)?
            };
            if f.width() != width || f.height() != height {
                return Err(Error::invalid(format!(
                    "{}: flow size {}x{} differs from frames {width}x{height}",
                    path.display(),
                    f.width(),
                    f.height()
                )));
            }
            out.push(f);
        }
    }
    Ok((fwd, bwd))
}
