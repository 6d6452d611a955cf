//! Binary checkpoint files.
//!
//! Layout (all little-endian): magic `AGLB`, `u32` format version, the
//! architecture descriptor, each layer as `u32 rows, u32 cols` followed by
//! `rows·cols` `f64` weights in row-major order, the `f64` gain, the `u64`
//! training step, the training RNG state, and finally one table per EMA
//! length holding `σ_rel`, the profile exponent, and a full set of averaged
//! weights and gain.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::netmodel::{ArchDescriptor, Head, ModelParams};
use crate::trainer::EmaTracker;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AGLB";
pub const VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub rng: RngState,
    pub emas: Vec<EmaTracker>,
}

impl Checkpoint {
    /// Parameters of the EMA table closest to `sigma_rel`, or the raw
    /// parameters when there are no tables.
    pub fn ema_params(&self, sigma_rel: f64) -> Option<&ModelParams> {
        self.emas
            .iter()
            .find(|e| (e.sigma_rel - sigma_rel).abs() < 1e-12)
            .map(|e| &e.averaged)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let a = self.params.arch;
        put_u32(&mut out, a.hidden_width as u32);
        put_u32(&mut out, a.hidden_layers as u32);
        out.push(match a.head {
            Head::Energy => 0,
            Head::DirectScore => 1,
        });
        put_u32(&mut out, a.class_count as u32);
        put_f64(&mut out, self.params.sigma_data);
        put_u32(&mut out, self.params.layers.len() as u32);
        for layer in &self.params.layers {
            put_u32(&mut out, layer.nrows() as u32);
            put_u32(&mut out, layer.ncols() as u32);
            layer.iter().for_each(|&v| put_f64(&mut out, v));
        }
        put_f64(&mut out, self.params.gain);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut out, self.emas.len() as u32);
        for ema in &self.emas {
            put_f64(&mut out, ema.sigma_rel);
            put_f64(&mut out, ema.exponent);
            for layer in &ema.averaged.layers {
                layer.iter().for_each(|&v| put_f64(&mut out, v));
            }
            put_f64(&mut out, ema.averaged.gain);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("missing AGLB magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hidden_width = r.u32()? as usize;
        let hidden_layers = r.u32()? as usize;
        let head = match r.take(1)?[0] {
            0 => Head::Energy,
            1 => Head::DirectScore,
            other => return Err(bad(format!("unknown head tag {other}"))),
        };
        let class_count = r.u32()? as usize;
        let arch = ArchDescriptor {
            hidden_width,
            hidden_layers,
            head,
            class_count,
        };
        arch.validate()?;
        let sigma_data = r.f64()?;
        let count = r.u32()? as usize;
        let expected = arch.layer_shapes();
        if count != expected.len() {
            return Err(bad(format!(
                "expected {} layers, found {count}",
                expected.len()
            )));
        }
        let mut layers = Vec::with_capacity(count);
        for &(er, ec) in &expected {
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            if (rows, cols) != (er, ec) {
                return Err(bad(format!(
                    "layer shape {rows}x{cols}, expected {er}x{ec}"
                )));
            }
            layers.push(r.matrix(rows, cols)?);
        }
        let gain = r.f64()?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let params = ModelParams {
            arch,
            layers,
            gain,
            sigma_data,
        };
        let n_ema = r.u32()? as usize;
        let mut emas = Vec::with_capacity(n_ema);
        for _ in 0..n_ema {
            let sigma_rel = r.f64()?;
            let exponent = r.f64()?;
            let mut averaged = params.zeros_like();
            for layer in averaged.layers.iter_mut() {
                *layer = r.matrix(layer.nrows(), layer.ncols())?;
            }
            averaged.gain = r.f64()?;
            emas.push(EmaTracker {
                sigma_rel,
                exponent,
                averaged,
            });
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            params,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            emas,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(bad("truncated file"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let data = (0..rows * cols)
            .map(|_| self.f64())
            .collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"))
    }
}
