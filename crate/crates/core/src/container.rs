//! Binary container for complex matrices.
//!
//! Layout (little-endian): a 64-byte header
//!
//! | offset | type  | field                         |
//! |-------:|-------|-------------------------------|
//! | 0      | [u8;4]| magic `SARC` (range data) or `SARI` (image) |
//! | 4      | u32   | format version                |
//! | 8      | u32   | rows                          |
//! | 12     | u32   | cols                          |
//! | 16     | f64   | carrier frequency, Hz         |
//! | 24     | f64   | bandwidth, Hz                 |
//! | 32     | f64   | pulse duration, s             |
//! | 40     | f64   | PRF, Hz                       |
//! | 48     | u32   | zero-pad factor               |
//! | 52     | u32   | window id                     |
//! | 56     | f64   | first slow time (`SARC`), 0 for `SARI` |
//!
//! followed by `rows * cols` row-major complex64 values (f32 re, f32 im).
//! For `SARC` rows are range bins and columns pulses; for `SARI` rows are
//! image rows (`y`) and columns image columns (`x`).

use std::io::{Read, Write};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::focus::FocusedImage;
use crate::matrix::ColumnMatrix;
use crate::signal::{FmcwParams, RangeCompressedMatrix, Window};

pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    RangeCompressed,
    Image,
}

impl Kind {
    fn magic(self) -> [u8; 4] {
        match self {
            Kind::RangeCompressed => *b"SARC",
            Kind::Image => *b"SARI",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub kind: Kind,
    pub version: u32,
    pub rows: u32,
    pub cols: u32,
    pub f0: f64,
    pub bandwidth: f64,
    pub pulse_duration: f64,
    pub prf: f64,
    pub zero_pad_factor: u32,
    pub window: u32,
    pub tau0: f64,
}

impl Header {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&self.kind.magic());
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.rows.to_le_bytes());
        b[12..16].copy_from_slice(&self.cols.to_le_bytes());
        b[16..24].copy_from_slice(&self.f0.to_le_bytes());
        b[24..32].copy_from_slice(&self.bandwidth.to_le_bytes());
        b[32..40].copy_from_slice(&self.pulse_duration.to_le_bytes());
        b[40..48].copy_from_slice(&self.prf.to_le_bytes());
        b[48..52].copy_from_slice(&self.zero_pad_factor.to_le_bytes());
        b[52..56].copy_from_slice(&self.window.to_le_bytes());
        b[56..64].copy_from_slice(&self.tau0.to_le_bytes());
        b
    }

    fn decode(b: &[u8; HEADER_LEN]) -> Result<Self> {
        let kind = match &b[0..4] {
            b"SARC" => Kind::RangeCompressed,
            b"SARI" => Kind::Image,
            other => return Err(format_error(format!("bad magic {other:?}"))),
        };
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(format_error(format!("unsupported version {version}")));
        }
        Ok(Header {
            kind,
            version,
            rows: u32_at(8),
            cols: u32_at(12),
            f0: f64_at(16),
            bandwidth: f64_at(24),
            pulse_duration: f64_at(32),
            prf: f64_at(40),
            zero_pad_factor: u32_at(48),
            window: u32_at(52),
            tau0: f64_at(56),
        })
    }
}

fn format_error(reason: String) -> Error {
    Error::Format {
        format: "container",
        reason,
    }
}

fn dim(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| format_error(format!("{what} {n} exceeds u32")))
}

fn write_body<W: Write>(out: &mut W, rows: usize, cols: usize, at: impl Fn(usize, usize) -> Complex64) -> Result<()> {
    let mut line = Vec::with_capacity(cols * 8);
    for r in 0..rows {
        line.clear();
        for c in 0..cols {
            let z = at(r, c);
            line.extend_from_slice(&(z.re as f32).to_le_bytes());
            line.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
        out.write_all(&line)?;
    }
    Ok(())
}

fn header_for(kind: Kind, rows: usize, cols: usize, params: &FmcwParams) -> Result<Header> {
    Ok(Header {
        kind,
        version: VERSION,
        rows: dim(rows, "rows")?,
        cols: dim(cols, "cols")?,
        f0: params.f0,
        bandwidth: params.bandwidth,
        pulse_duration: params.pulse_duration,
        prf: params.prf,
        zero_pad_factor: 0,
        window: 0,
        tau0: 0.0,
    })
}

pub fn write_rc<W: Write>(rc: &RangeCompressedMatrix, mut out: W) -> Result<()> {
    let mut h = header_for(Kind::RangeCompressed, rc.range_bins(), rc.pulses(), &rc.params)?;
    h.zero_pad_factor = rc.zero_pad_factor as u32;
    h.window = rc.window.id();
    h.tau0 = rc.taus.first().copied().unwrap_or(0.0);
    out.write_all(&h.encode())?;
    write_body(&mut out, rc.range_bins(), rc.pulses(), |r, c| rc.data.get(r, c))?;
    out.flush()?;
    Ok(())
}

/// Writes a focused image; `params` supplies the radar fields of the header.
pub fn write_image<W: Write>(img: &FocusedImage, params: &FmcwParams, mut out: W) -> Result<()> {
    let (nx, ny) = (img.grid.nx, img.grid.ny);
    let h = header_for(Kind::Image, ny, nx, params)?;
    out.write_all(&h.encode())?;
    write_body(&mut out, ny, nx, |r, c| img.pixels[r * nx + c])?;
    out.flush()?;
    Ok(())
}

/// Decoded container: header plus data in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Stored {
    pub header: Header,
    pub data: Vec<Complex64>,
}

pub fn read<R: Read>(mut input: R) -> Result<Stored> {
    let mut hb = [0u8; HEADER_LEN];
    input
        .read_exact(&mut hb)
        .map_err(|e| format_error(format!("short header: {e}")))?;
    let header = Header::decode(&hb)?;
    let n = header.rows as usize * header.cols as usize;
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() != n * 8 {
        return Err(format_error(format!(
            "expected {} data bytes, found {}",
            n * 8,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[0..4].try_into().unwrap());
            let im = f32::from_le_bytes(c[4..8].try_into().unwrap());
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    Ok(Stored { header, data })
}

impl Stored {
    /// Rebuilds range-compressed data. The header does not carry the range
    /// gate or sample count, so `params` must be supplied and agree with it.
    pub fn into_rc(self, params: &FmcwParams) -> Result<RangeCompressedMatrix> {
        let h = self.header;
        if h.kind != Kind::RangeCompressed {
            return Err(format_error("not a range-compressed container".into()));
        }
        let same = |a: f64, b: f64| a == b;
        if !(same(h.f0, params.f0)
            && same(h.bandwidth, params.bandwidth)
            && same(h.pulse_duration, params.pulse_duration)
            && same(h.prf, params.prf))
        {
            return Err(format_error("radar parameters differ from the configuration".into()));
        }
        let window = Window::from_id(h.window)?;
        let pad = h.zero_pad_factor as usize;
        let (rows, cols) = (h.rows as usize, h.cols as usize);
        let mut columns = vec![Complex64::new(0.0, 0.0); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                columns[c * rows + r] = self.data[r * cols + c];
            }
        }
        let taus = (0..cols).map(|k| h.tau0 + k as f64 / h.prf).collect();
        Ok(RangeCompressedMatrix {
            data: ColumnMatrix::from_columns(rows, cols, columns),
            range_spacing: params.bin_spacing(pad),
            taus,
            params: *params,
            window,
            zero_pad_factor: pad,
        })
    }
}
