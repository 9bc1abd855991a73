//! BLKD dataset container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BLKD" | version u32 | canvas u32 | fps f64 | class map | record count u32
//! class map: group count u8, then per group: name, class count u8, names
//!            (each name is a u8 length followed by UTF-8 bytes)
//! record:    byte length u64 | spec text (u32 length + UTF-8 TOML) | seed u64
//!            | T u32 | T*S*S*3 frame bytes | T*4 label bytes
//! ```
//!
//! Label bytes per frame are (left, right, intent, view) class indices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::render::SequenceSample;
use super::scene::SceneSpec;
use crate::error::{Error, Result};
use crate::semantics::{FrameLabel, IntentState, LightState, ViewFace};

pub const MAGIC: &[u8; 4] = b"BLKD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub canvas: u32,
    pub fps: f64,
    pub records: u32,
}

type ClassMap = Vec<(String, Vec<String>)>;

fn class_map() -> ClassMap {
    fn names<T: std::fmt::Display>(all: &[T]) -> Vec<String> {
        all.iter().map(|c| c.to_string()).collect()
    }
    vec![
        ("light".into(), names(LightState::ALL)),
        ("intent".into(), names(IntentState::ALL)),
        ("view".into(), names(ViewFace::ALL)),
    ]
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.push(name.len() as u8);
    out.extend_from_slice(name.as_bytes());
}

fn encode_header(header: &DatasetHeader) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header.canvas.to_le_bytes());
    out.extend_from_slice(&header.fps.to_le_bytes());
    let map = class_map();
    out.push(map.len() as u8);
    for (group, classes) in &map {
        put_name(&mut out, group);
        out.push(classes.len() as u8);
        for c in classes {
            put_name(&mut out, c);
        }
    }
    out.extend_from_slice(&header.records.to_le_bytes());
    out
}

fn encode_record(sample: &SequenceSample) -> Result<Vec<u8>> {
    let text = sample.spec.to_text()?;
    let t = sample.labels.len();
    if sample.frames.len() != t * sample.frame_bytes() {
        return Err(Error::LengthMismatch(format!(
            "{} frame bytes for {t} labels of a {}x{} canvas",
            sample.frames.len(),
            sample.canvas(),
            sample.canvas()
        )));
    }
    let mut body = Vec::with_capacity(16 + text.len() + sample.frames.len() + 4 * t);
    body.extend_from_slice(&(text.len() as u32).to_le_bytes());
    body.extend_from_slice(text.as_bytes());
    body.extend_from_slice(&sample.seed.to_le_bytes());
    body.extend_from_slice(&(t as u32).to_le_bytes());
    body.extend_from_slice(&sample.frames);
    for label in &sample.labels {
        body.extend_from_slice(&label.to_bytes());
    }
    let mut out = Vec::with_capacity(8 + body.len());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Writes `samples` to `path` atomically: the data goes to a sibling
/// temporary file that is renamed into place only once complete.
pub fn write_dataset(path: &Path, samples: &[SequenceSample]) -> Result<()> {
    let (canvas, fps) = match samples.first() {
        Some(s) => (s.spec.canvas, s.spec.fps),
        None => (0, 0.0),
    };
    if let Some(bad) = samples.iter().find(|s| s.spec.canvas != canvas || s.spec.fps != fps) {
        return Err(Error::Incompatible(format!(
            "record with canvas {} at {} fps in a {canvas} px, {fps} fps dataset",
            bad.spec.canvas, bad.spec.fps
        )));
    }
    let header = DatasetHeader {
        canvas,
        fps,
        records: samples.len() as u32,
    };
    let tmp = temp_path(path);
    let io = |e| Error::io(&tmp, e);
    let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
    w.write_all(&encode_header(&header)).map_err(io)?;
    for s in samples {
        w.write_all(&encode_record(s)?).map_err(io)?;
    }
    w.into_inner().map_err(|e| io(e.into_error()))?.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Byte reader that tracks its offset for error messages.
struct Cursor<R> {
    inner: R,
    offset: u64,
    path: PathBuf,
}

impl<R: Read> Cursor<R> {
    fn parse_error(&self, offset: u64, detail: impl Into<String>) -> Error {
        Error::DatasetParse {
            path: self.path.clone(),
            offset,
            detail: detail.into(),
        }
    }

    /// Fills `buf`, or returns `Ok(false)` on a clean end of file before the
    /// first byte.
    fn fill(&mut self, buf: &mut [u8], what: &str, eof_ok: bool) -> Result<bool> {
        let start = self.offset;
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    if got == 0 && eof_ok {
                        return Ok(false);
                    }
                    return Err(self.parse_error(
                        start + got as u64,
                        format!("truncated {what}: expected {} bytes, found {got}", buf.len()),
                    ));
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::io(&self.path, e)),
            }
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf, what, false)?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what, false)?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn name(&mut self, what: &str) -> Result<String> {
        let at = self.offset;
        let n = self.u8(what)? as usize;
        let raw = self.bytes(n, what)?;
        String::from_utf8(raw).map_err(|_| self.parse_error(at, format!("{what} is not UTF-8")))
    }
}

/// Streaming reader over the records of one dataset file.
pub struct DatasetReader {
    cursor: Cursor<BufReader<File>>,
    header: DatasetHeader,
    remaining: u32,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut cursor = Cursor {
            inner: BufReader::new(file),
            offset: 0,
            path: path.to_path_buf(),
        };
        let magic: [u8; 4] = cursor.array("magic")?;
        if &magic != MAGIC {
            return Err(cursor.parse_error(0, format!("bad magic {magic:?}, expected \"BLKD\"")));
        }
        let version = cursor.u32("version")?;
        if version > VERSION || version == 0 {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: VERSION,
            });
        }
        let canvas = cursor.u32("canvas")?;
        let fps = f64::from_le_bytes(cursor.array("fps")?);
        let map_at = cursor.offset;
        let groups = cursor.u8("class map")?;
        let mut map = ClassMap::new();
        for _ in 0..groups {
            let group = cursor.name("class group name")?;
            let n = cursor.u8("class count")?;
            let mut names = Vec::with_capacity(n as usize);
            for _ in 0..n {
                names.push(cursor.name("class name")?);
            }
            map.push((group, names));
        }
        if map != class_map() {
            return Err(cursor.parse_error(map_at, format!("class map {map:?} does not match this build")));
        }
        let records = cursor.u32("record count")?;
        Ok(DatasetReader {
            cursor,
            header: DatasetHeader { canvas, fps, records },
            remaining: records,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<SequenceSample> {
        let c = &mut self.cursor;
        let start = c.offset;
        let len = c.u64("record length")?;
        let body_start = c.offset;
        let text_at = c.offset;
        let text_len = c.u32("spec length")? as usize;
        let text = String::from_utf8(c.bytes(text_len, "spec text")?)
            .map_err(|_| c.parse_error(text_at, "spec text is not UTF-8"))?;
        let spec = SceneSpec::from_text(&text).map_err(|e| c.parse_error(text_at, e.to_string()))?;
        if spec.canvas != self.header.canvas || spec.fps != self.header.fps {
            return Err(c.parse_error(text_at, "record canvas/fps differ from the file header"));
        }
        let seed = c.u64("seed")?;
        let t = c.u32("frame count")? as usize;
        let s = spec.canvas as usize;
        let frames = c.bytes(t * s * s * 3, "frames")?;
        let labels_at = c.offset;
        let raw = c.bytes(t * 4, "labels")?;
        let mut labels = Vec::with_capacity(t);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let label = FrameLabel::from_bytes(b)
                .ok_or_else(|| c.parse_error(labels_at + 4 * i as u64, format!("label bytes {b:?} out of range")))?;
            labels.push(label);
        }
        if c.offset - body_start != len {
            return Err(c.parse_error(
                start,
                format!("record length {len} disagrees with its contents ({} bytes)", c.offset - body_start),
            ));
        }
        Ok(SequenceSample {
            spec,
            seed,
            frames,
            labels,
        })
    }

    /// Fails if bytes follow the last record.
    fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        if self.cursor.fill(&mut probe, "end of file", true)? {
            return Err(self.cursor.parse_error(self.cursor.offset - 1, "trailing bytes after the last record"));
        }
        Ok(())
    }
}

impl Iterator for DatasetReader {
    type Item = Result<SequenceSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let item = self.read_record().and_then(|r| {
            if self.remaining == 0 {
                self.expect_end()?;
            }
            Ok(r)
        });
        if item.is_err() {
            self.remaining = 0;
        }
        Some(item)
    }
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SequenceSample>)> {
    let reader = DatasetReader::open(path)?;
    let header = reader.header().clone();
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, samples))
}
