//! File form of streamed tensors.
//!
//! One file per tensor holding raw little-endian `f64` values, row-major
//! `[t, d]`, next to a `<file>.json` sidecar `{"L": .., "D": .., "dtype": "f64"}`.
//! Values are widened to `f64` on write regardless of the compute precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, PgfError, Result};
use crate::scalar::Scalar;
use crate::tose::{StreamSink, StreamSource};

const ELEM: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(rename = "L")]
    pub len: usize,
    #[serde(rename = "D")]
    pub width: usize,
    pub dtype: String,
}

impl Sidecar {
    fn f64(len: usize, width: usize) -> Self {
        Sidecar {
            len,
            width,
            dtype: "f64".into(),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(sidecar_path(path))?;
    let sc: Sidecar = serde_json::from_str(&text)?;
    if sc.dtype != "f64" {
        return Err(PgfError::Invalid(format!(
            "{}: unsupported dtype {:?}",
            path.display(),
            sc.dtype
        )));
    }
    Ok(sc)
}

fn write_sidecar(path: &Path, sc: &Sidecar) -> Result<()> {
    let mut text = serde_json::to_string(sc)?;
    text.push('\n');
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

fn encode<T: Scalar>(xs: &[T], out: &mut Vec<u8>) {
    out.clear();
    out.reserve(xs.len() * ELEM);
    for x in xs {
        out.extend_from_slice(&x.as_f64().to_le_bytes());
    }
}

fn decode<T: Scalar>(bytes: &[u8], out: &mut [T]) {
    for (x, chunk) in out.iter_mut().zip(bytes.chunks_exact(ELEM)) {
        *x = T::lit(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
}

/// Writes a whole `[len, width]` tensor plus sidecar.
pub fn write_tensor<T: Scalar>(path: &Path, width: usize, data: &[T]) -> Result<()> {
    if width == 0 || data.len() % width != 0 {
        return Err(PgfError::Shape {
            what: "tensor (L x D)",
            expected: width,
            got: data.len(),
        });
    }
    let mut buf = Vec::new();
    encode(data, &mut buf);
    std::fs::write(path, &buf)?;
    write_sidecar(path, &Sidecar::f64(data.len() / width, width))
}

/// Reads a whole tensor; returns `(width, data)`.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<(usize, Vec<T>)> {
    let sc = read_sidecar(path)?;
    let bytes = std::fs::read(path)?;
    check_len("tensor file bytes", sc.len * sc.width * ELEM, bytes.len())?;
    let mut out = vec![T::zero(); sc.len * sc.width];
    decode(&bytes, &mut out);
    Ok((sc.width, out))
}

/// Reads `u` and `du` block-wise from two tensor files.
pub struct FileSource {
    width: usize,
    len: usize,
    u: BufReader<File>,
    du: BufReader<File>,
    buf: Vec<u8>,
}

impl FileSource {
    pub fn open(u_path: &Path, du_path: &Path) -> Result<Self> {
        let su = read_sidecar(u_path)?;
        let sd = read_sidecar(du_path)?;
        check_len("du length", su.len, sd.len)?;
        check_len("du width", su.width, sd.width)?;
        Ok(FileSource {
            width: su.width,
            len: su.len,
            u: BufReader::new(File::open(u_path)?),
            du: BufReader::new(File::open(du_path)?),
            buf: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn read_rows<T: Scalar>(
    r: &mut BufReader<File>,
    buf: &mut Vec<u8>,
    offset: u64,
    out: &mut [T],
) -> Result<()> {
    r.seek(SeekFrom::Start(offset))?;
    buf.resize(out.len() * ELEM, 0);
    r.read_exact(buf)?;
    decode(buf, out);
    Ok(())
}

impl<T: Scalar> StreamSource<T> for FileSource {
    fn width(&self) -> usize {
        self.width
    }

    fn load(&mut self, start: usize, u: &mut [T], du: &mut [T]) -> Result<usize> {
        let steps = (u.len() / self.width).min(self.len.saturating_sub(start));
        let n = steps * self.width;
        let offset = (start * self.width * ELEM) as u64;
        read_rows(&mut self.u, &mut self.buf, offset, &mut u[..n])?;
        read_rows(&mut self.du, &mut self.buf, offset, &mut du[..n])?;
        Ok(steps)
    }
}

/// Appends `y` and `dy` to two tensor files; sidecars are written by
/// [`FileSink::finish`].
pub struct FileSink {
    width: usize,
    rows: usize,
    paths: [PathBuf; 2],
    out: [BufWriter<File>; 2],
    buf: Vec<u8>,
}

impl FileSink {
    pub fn create(y_path: &Path, dy_path: &Path, width: usize) -> Result<Self> {
        Ok(FileSink {
            width,
            rows: 0,
            paths: [y_path.to_path_buf(), dy_path.to_path_buf()],
            out: [
                BufWriter::new(File::create(y_path)?),
                BufWriter::new(File::create(dy_path)?),
            ],
            buf: Vec::new(),
        })
    }

    /// Flushes both files and writes their sidecars; returns the row count.
    pub fn finish(mut self) -> Result<usize> {
        for (w, p) in self.out.iter_mut().zip(&self.paths) {
            w.flush()?;
            write_sidecar(p, &Sidecar::f64(self.rows, self.width))?;
        }
        Ok(self.rows)
    }
}

impl<T: Scalar> StreamSink<T> for FileSink {
    fn consume(&mut self, start: usize, y: &[T], dy: &[T]) -> Result<()> {
        // appending only: blocks must arrive in order
        check_len("sink block start", self.rows, start)?;
        encode(y, &mut self.buf);
        self.out[0].write_all(&self.buf)?;
        encode(dy, &mut self.buf);
        self.out[1].write_all(&self.buf)?;
        self.rows += y.len() / self.width;
        Ok(())
    }
}
