//! `GQC1` checkpoints: normalisation constants, action space and tagged networks.
//!
//! ```text
//! magic "GQC1" | version u32 | step u64 | flags u32 (bit0 discrete) | d_s u32 | d_a u32 | action_count u32
//! state_mean d_s f32 | state_std d_s f32
//! action_low d_a f32 | action_high d_a f32          (continuous only)
//! network_count u32
//! per network: tag_len u32 | tag utf-8 | layer_count u32 | sizes u32 * layer_count | params f32 * sum((n_in+1)*n_out)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::approximator::{param_count, Mlp};
use crate::dataset::{ActionSpace, NormStats};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GQC1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const Q1: &str = "q1";
pub const Q2: &str = "q2";
pub const VALUE: &str = "v";
pub const ACTOR: &str = "actor";
pub const Q1_TARGET: &str = "q1_target";
pub const Q2_TARGET: &str = "q2_target";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub action_space: ActionSpace,
    pub norm: NormStats,
    /// Per-dimension clamp for continuous actor outputs; empty for discrete.
    pub action_low: Vec<f32>,
    pub action_high: Vec<f32>,
    pub networks: Vec<(String, Mlp<f32>)>,
}

impl Checkpoint {
    pub fn network(&self, tag: &str) -> Result<&Mlp<f32>> {
        self.networks
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, n)| n)
            .ok_or_else(|| Error::validation(format!("checkpoint has no network tagged '{tag}'")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u64::<LittleEndian>(self.step)?;
        let (flags, d_a, count) = match self.action_space {
            ActionSpace::Continuous { dim } => (0u32, dim, 0),
            ActionSpace::Discrete { count } => (1u32, 1, count),
        };
        w.write_u32::<LittleEndian>(flags)?;
        w.write_u32::<LittleEndian>(self.norm.dim() as u32)?;
        w.write_u32::<LittleEndian>(d_a as u32)?;
        w.write_u32::<LittleEndian>(count as u32)?;
        write_f32s(&mut w, &self.norm.state_mean)?;
        write_f32s(&mut w, &self.norm.state_std)?;
        if !self.action_space.is_discrete() {
            write_f32s(&mut w, &self.action_low)?;
            write_f32s(&mut w, &self.action_high)?;
        }
        w.write_u32::<LittleEndian>(self.networks.len() as u32)?;
        for (tag, net) in &self.networks {
            w.write_u32::<LittleEndian>(tag.len() as u32)?;
            w.write_all(tag.as_bytes())?;
            w.write_u32::<LittleEndian>(net.sizes().len() as u32)?;
            for &s in net.sizes() {
                w.write_u32::<LittleEndian>(s as u32)?;
            }
            write_f32s(&mut w, &net.flat_params())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("file too short for GQC1 header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!("bad magic {magic:?}, expected GQC1")));
        }
        let trunc = |_| Error::format("truncated GQC1 checkpoint");
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported GQC1 version {version}")));
        }
        let step = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let flags = r.read_u32::<LittleEndian>().map_err(trunc)?;
        let d_s = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let d_a = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let action_space = if flags & 1 == 1 {
            ActionSpace::Discrete { count }
        } else {
            ActionSpace::Continuous { dim: d_a }
        };
        let state_mean = read_f32s(&mut r, d_s).map_err(trunc)?;
        let state_std = read_f32s(&mut r, d_s).map_err(trunc)?;
        let (action_low, action_high) = if action_space.is_discrete() {
            (Vec::new(), Vec::new())
        } else {
            (read_f32s(&mut r, d_a).map_err(trunc)?, read_f32s(&mut r, d_a).map_err(trunc)?)
        };
        let n_nets = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut networks = Vec::with_capacity(n_nets);
        for _ in 0..n_nets {
            let tag_len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if tag_len > 256 {
                return Err(Error::format("network tag longer than 256 bytes"));
            }
            let mut tag = vec![0u8; tag_len];
            r.read_exact(&mut tag).map_err(trunc)?;
            let tag = String::from_utf8(tag).map_err(|_| Error::format("network tag is not utf-8"))?;
            let n_sizes = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if n_sizes > 64 {
                return Err(Error::format("too many layers in GQC1 network"));
            }
            let mut sizes = Vec::with_capacity(n_sizes);
            for _ in 0..n_sizes {
                sizes.push(r.read_u32::<LittleEndian>().map_err(trunc)? as usize);
            }
            let params = read_f32s(&mut r, param_count(&sizes)).map_err(trunc)?;
            networks.push((tag, Mlp::from_flat(&sizes, params)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after GQC1 checkpoint"));
        }
        Ok(Checkpoint {
            step,
            action_space,
            norm: NormStats { state_mean, state_std },
            action_low,
            action_high,
            networks,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    ck.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::read_from(BufReader::new(File::open(path.as_ref())?))
}
