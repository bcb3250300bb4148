//! Versioned binary checkpoint containers.
//!
//! Codec and denoiser checkpoints share one container family: an 8-byte
//! magic, a u32 version, a typed header, and a flat little-endian f64
//! weight payload that reloads bit-exactly. A bundle file stacks both
//! sections plus the schedule parameters and (optionally) the training
//! config and optimizer state needed to resume a run on its exact
//! trajectory.
//!
//! Decoding treats the input as untrusted: lengths are bounds-checked and
//! capped before any allocation.

use std::path::Path;

use crate::codec::{CodecConfig, CodecParams};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::pipeline::{TrainConfig, TrainState};

pub const CODEC_MAGIC: &[u8; 8] = b"FFCODC01";
pub const DENOISER_MAGIC: &[u8; 8] = b"FFDNSR01";
pub const BUNDLE_MAGIC: &[u8; 8] = b"FFBNDL01";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on any single payload, to keep hostile headers from
/// triggering huge allocations.
const MAX_PARAMS: u64 = 1 << 26;

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(
            self.bytes(8)?.try_into().unwrap(),
        )))
    }

    fn f64_vec(&mut self, n: u64) -> Result<Vec<f64>> {
        if n > MAX_PARAMS {
            return Err(Error::Checkpoint(format!(
                "payload of {n} values exceeds the {MAX_PARAMS} cap"
            )));
        }
        let n = n as usize;
        let raw = self.bytes(n * 8)?;
        let mut out = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(8) {
            out.push(f64::from_bits(u64::from_le_bytes(chunk.try_into().unwrap())));
        }
        Ok(out)
    }

    fn magic(&mut self, want: &[u8; 8], what: &str) -> Result<()> {
        let got = self.bytes(8)?;
        if got != want {
            return Err(Error::Checkpoint(format!(
                "bad {what} magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(want),
                String::from_utf8_lossy(got)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported {what} version {version} (expected {FORMAT_VERSION})"
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { out: Vec::new() }
    }

    fn magic(&mut self, m: &[u8; 8]) {
        self.out.extend_from_slice(m);
        self.u32(FORMAT_VERSION);
    }

    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn f64_slice(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.f64(*v);
        }
    }
}

fn usize_field(v: u32, name: &str, max: u32) -> Result<usize> {
    if v == 0 || v > max {
        return Err(Error::Checkpoint(format!(
            "header field {name} = {v} outside [1, {max}]"
        )));
    }
    Ok(v as usize)
}

// ------------------------------------------------------------------- codec

fn write_codec_section(w: &mut Writer, params: &CodecParams) {
    w.magic(CODEC_MAGIC);
    w.u32(params.cfg.stride as u32);
    w.u32(params.cfg.latent_channels as u32);
    w.u32(params.cfg.width as u32);
    w.f64_slice(&params.to_flat());
}

fn read_codec_section(r: &mut Reader) -> Result<CodecParams> {
    r.magic(CODEC_MAGIC, "codec")?;
    let cfg = CodecConfig {
        stride: usize_field(r.u32()?, "stride", 64)?,
        latent_channels: usize_field(r.u32()?, "latent_channels", 1024)?,
        width: usize_field(r.u32()?, "width", 4096)?,
    };
    let count = r.u64()?;
    let flat = r.f64_vec(count)?;
    CodecParams::from_flat(cfg, &flat)
}

pub fn encode_codec(params: &CodecParams) -> Vec<u8> {
    let mut w = Writer::new();
    write_codec_section(&mut w, params);
    w.out
}

pub fn decode_codec(bytes: &[u8]) -> Result<CodecParams> {
    let mut r = Reader::new(bytes);
    let p = read_codec_section(&mut r)?;
    r.finish()?;
    Ok(p)
}

// ---------------------------------------------------------------- denoiser

fn write_denoiser_section(w: &mut Writer, params: &DenoiserParams) {
    w.magic(DENOISER_MAGIC);
    w.u32(params.cfg.latent_channels as u32);
    w.u32(params.cfg.base_channels as u32);
    w.u32(params.cfg.ctx_channels as u32);
    w.u32(params.cfg.attn_dim as u32);
    w.u32(params.cfg.t_steps as u32);
    w.u32(params.cfg.n_global as u32);
    w.f64_slice(&params.to_flat());
}

fn read_denoiser_section(r: &mut Reader) -> Result<DenoiserParams> {
    r.magic(DENOISER_MAGIC, "denoiser")?;
    let cfg = DenoiserConfig {
        latent_channels: usize_field(r.u32()?, "latent_channels", 1024)?,
        base_channels: usize_field(r.u32()?, "base_channels", 4096)?,
        ctx_channels: usize_field(r.u32()?, "ctx_channels", 4096)?,
        attn_dim: usize_field(r.u32()?, "attn_dim", 4096)?,
        t_steps: usize_field(r.u32()?, "t_steps", 100_000)?,
        n_global: usize_field(r.u32()?, "n_global", 4096)?,
    };
    let count = r.u64()?;
    let flat = r.f64_vec(count)?;
    DenoiserParams::from_flat(cfg, &flat)
}

pub fn encode_denoiser(params: &DenoiserParams) -> Vec<u8> {
    let mut w = Writer::new();
    write_denoiser_section(&mut w, params);
    w.out
}

pub fn decode_denoiser(bytes: &[u8]) -> Result<DenoiserParams> {
    let mut r = Reader::new(bytes);
    let p = read_denoiser_section(&mut r)?;
    r.finish()?;
    Ok(p)
}

// ------------------------------------------------------------------ bundle

/// Everything a checkpoint needs to run inference, plus optional training
/// state for exact resume.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub codec: CodecParams,
    pub denoiser: DenoiserParams,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_cfg: Option<TrainConfig>,
    pub train_state: Option<TrainState>,
}

impl ModelBundle {
    pub fn schedule(&self) -> Result<crate::diffusion::DiffusionSchedule> {
        crate::diffusion::make_schedule(self.denoiser.cfg.t_steps, self.beta_start, self.beta_end)
    }
}

pub fn encode_bundle(bundle: &ModelBundle) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.magic(BUNDLE_MAGIC);
    write_codec_section(&mut w, &bundle.codec);
    write_denoiser_section(&mut w, &bundle.denoiser);
    w.f64(bundle.beta_start);
    w.f64(bundle.beta_end);
    match &bundle.train_cfg {
        Some(cfg) => {
            let json = serde_json::to_vec(cfg)?;
            w.u64(json.len() as u64);
            w.out.extend_from_slice(&json);
        }
        None => w.u64(0),
    }
    match &bundle.train_state {
        Some(state) => {
            w.out.push(1);
            w.u64(state.step as u64);
            w.u64(state.adam_t);
            w.f64_slice(&state.adam_m);
            w.f64_slice(&state.adam_v);
        }
        None => w.out.push(0),
    }
    Ok(w.out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader::new(bytes);
    r.magic(BUNDLE_MAGIC, "bundle")?;
    let codec = read_codec_section(&mut r)?;
    let denoiser = read_denoiser_section(&mut r)?;
    let beta_start = r.f64()?;
    let beta_end = r.f64()?;
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Checkpoint(format!(
            "invalid schedule betas [{beta_start}, {beta_end}]"
        )));
    }
    let json_len = r.u64()?;
    if json_len > (1 << 20) {
        return Err(Error::Checkpoint(format!(
            "train config blob of {json_len} bytes exceeds the 1 MiB cap"
        )));
    }
    let train_cfg = if json_len > 0 {
        let raw = r.bytes(json_len as usize)?;
        Some(serde_json::from_slice::<TrainConfig>(raw)?)
    } else {
        None
    };
    let flag = r.bytes(1)?[0];
    let train_state = match flag {
        0 => None,
        1 => {
            let step = r.u64()? as usize;
            let adam_t = r.u64()?;
            let mc = r.u64()?;
            let adam_m = r.f64_vec(mc)?;
            let vc = r.u64()?;
            let adam_v = r.f64_vec(vc)?;
            Some(TrainState {
                step,
                adam_t,
                adam_m,
                adam_v,
            })
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "invalid train-state flag {other}"
            )))
        }
    };
    r.finish()?;
    Ok(ModelBundle {
        codec,
        denoiser,
        beta_start,
        beta_end,
        train_cfg,
        train_state,
    })
}

pub fn save_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    std::fs::write(path, encode_bundle(bundle)?).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}

pub fn save_codec(path: &Path, params: &CodecParams) -> Result<()> {
    std::fs::write(path, encode_codec(params)).map_err(|e| Error::io(path, e))
}

pub fn load_codec(path: &Path) -> Result<CodecParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_codec(&bytes)
}

pub fn save_denoiser(path: &Path, params: &DenoiserParams) -> Result<()> {
    std::fs::write(path, encode_denoiser(params)).map_err(|e| Error::io(path, e))
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_denoiser(&bytes)
}
