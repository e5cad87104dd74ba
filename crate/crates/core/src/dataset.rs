//! Columnar transition storage and the `GQD1` on-disk format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "GQD1" | version u32 | flags u32 | N u64 | d_s u32 | d_a u32 | action_count u32
//! states        N*d_s f32
//! actions       N*d_a f32   (continuous)  or  N u32 (discrete, flags bit 0)
//! rewards       N f32
//! next_states   N*d_s f32
//! terminals     N u8
//! timeouts      N u8
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"GQD1";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_BYTES: usize = 32;
const FLAG_DISCRETE: u32 = 1;

/// Lower clamp applied to per-dimension state standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActionSpace {
    Continuous { dim: usize },
    Discrete { count: usize },
}

impl ActionSpace {
    /// Width of the action part of an embedding: `dim` for continuous, 1 for discrete.
    pub fn embed_dim(&self) -> usize {
        match *self {
            ActionSpace::Continuous { dim } => dim,
            ActionSpace::Discrete { .. } => 1,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Actions {
    /// Row-major `N x d_a`.
    Continuous(Vec<f32>),
    Discrete(Vec<u32>),
}

/// An action borrowed from a dataset row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionRef<'a> {
    Continuous(&'a [f32]),
    Discrete(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    state_dim: usize,
    action_space: ActionSpace,
    states: Vec<f32>,
    actions: Actions,
    rewards: Vec<f32>,
    next_states: Vec<f32>,
    terminals: Vec<bool>,
    timeouts: Vec<bool>,
}

impl TransitionDataset {
    /// Builds a dataset and checks every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        action_space: ActionSpace,
        states: Vec<f32>,
        actions: Actions,
        rewards: Vec<f32>,
        next_states: Vec<f32>,
        terminals: Vec<bool>,
        timeouts: Vec<bool>,
    ) -> Result<Self> {
        let ds = TransitionDataset {
            state_dim,
            action_space,
            states,
            actions,
            rewards,
            next_states,
            terminals,
            timeouts,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        if n == 0 {
            return Err(Error::validation("dataset must contain at least one transition"));
        }
        if self.state_dim == 0 {
            return Err(Error::validation("state dimension must be positive"));
        }
        let check_len = |name: &str, got: usize, expected: usize| {
            if got != expected {
                Err(Error::validation(format!(
                    "length mismatch in {name}: expected {expected}, got {got}"
                )))
            } else {
                Ok(())
            }
        };
        check_len("states", self.states.len(), n * self.state_dim)?;
        check_len("next_states", self.next_states.len(), n * self.state_dim)?;
        check_len("terminals", self.terminals.len(), n)?;
        check_len("timeouts", self.timeouts.len(), n)?;
        match (&self.action_space, &self.actions) {
            (ActionSpace::Continuous { dim }, Actions::Continuous(a)) => {
                if *dim == 0 {
                    return Err(Error::validation("continuous actions need d_a >= 1"));
                }
                check_len("actions", a.len(), n * dim)?;
                if let Some(i) = a.iter().position(|x| !x.is_finite()) {
                    return Err(Error::validation(format!(
                        "non-finite action at row {}",
                        i / dim
                    )));
                }
            }
            (ActionSpace::Discrete { count }, Actions::Discrete(a)) => {
                if *count == 0 {
                    return Err(Error::validation("discrete action_count must be positive"));
                }
                check_len("actions", a.len(), n)?;
                if let Some(i) = a.iter().position(|&x| x as usize >= *count) {
                    return Err(Error::validation(format!(
                        "action {} out of range [0, {count}) at row {i}",
                        a[i]
                    )));
                }
            }
            _ => return Err(Error::validation("action storage does not match action space")),
        }
        for (name, arr, width) in [
            ("states", &self.states, self.state_dim),
            ("next_states", &self.next_states, self.state_dim),
            ("rewards", &self.rewards, 1),
        ] {
            if let Some(i) = arr.iter().position(|x| !x.is_finite()) {
                return Err(Error::validation(format!(
                    "non-finite value in {name} at row {}",
                    i / width
                )));
            }
        }
        if let Some(i) = (0..n).find(|&i| self.terminals[i] && self.timeouts[i]) {
            return Err(Error::validation(format!(
                "row {i} is flagged both terminal and timeout"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn states(&self) -> &[f32] {
        &self.states
    }

    pub fn next_states(&self) -> &[f32] {
        &self.next_states
    }

    pub fn actions(&self) -> &Actions {
        &self.actions
    }

    pub fn rewards(&self) -> &[f32] {
        &self.rewards
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminals
    }

    pub fn timeouts(&self) -> &[bool] {
        &self.timeouts
    }

    pub fn state(&self, i: usize) -> &[f32] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f32] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> ActionRef<'_> {
        match &self.actions {
            Actions::Continuous(a) => {
                let d = self.action_space.embed_dim();
                ActionRef::Continuous(&a[i * d..(i + 1) * d])
            }
            Actions::Discrete(a) => ActionRef::Discrete(a[i]),
        }
    }

    /// Contiguous row ranges, each ending at a row flagged terminal or timeout.
    ///
    /// Fails when the final row closes no trajectory, or no boundary exists at all.
    pub fn trajectories(&self) -> Result<Vec<Range<usize>>> {
        let n = self.len();
        if !(self.terminals[n - 1] || self.timeouts[n - 1]) {
            return Err(Error::validation(
                "dataset has no trajectory boundary on its final row",
            ));
        }
        let mut out = Vec::new();
        let mut start = 0;
        for i in 0..n {
            if self.terminals[i] || self.timeouts[i] {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        Ok(out)
    }

    /// A new dataset holding rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let d = self.state_dim;
        let gather = |src: &[f32], w: usize| -> Vec<f32> {
            idx.iter().flat_map(|&i| src[i * w..(i + 1) * w].iter().copied()).collect()
        };
        let actions = match &self.actions {
            Actions::Continuous(a) => Actions::Continuous(gather(a, self.action_space.embed_dim())),
            Actions::Discrete(a) => Actions::Discrete(idx.iter().map(|&i| a[i]).collect()),
        };
        TransitionDataset::new(
            d,
            self.action_space,
            gather(&self.states, d),
            actions,
            idx.iter().map(|&i| self.rewards[i]).collect(),
            gather(&self.next_states, d),
            idx.iter().map(|&i| self.terminals[i]).collect(),
            idx.iter().map(|&i| self.timeouts[i]).collect(),
        )
    }

    /// Encoded size in bytes of a dataset with these dimensions.
    pub fn encoded_len(n: usize, state_dim: usize, action_space: ActionSpace) -> usize {
        let action_bytes = match action_space {
            ActionSpace::Continuous { dim } => n * dim * 4,
            ActionSpace::Discrete { .. } => n * 4,
        };
        DATASET_HEADER_BYTES + 2 * n * state_dim * 4 + action_bytes + n * 4 + 2 * n
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.len();
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(DATASET_VERSION)?;
        let (flags, d_a, count) = match self.action_space {
            ActionSpace::Continuous { dim } => (0, dim, 0),
            ActionSpace::Discrete { count } => (FLAG_DISCRETE, 1, count),
        };
        w.write_u32::<LittleEndian>(flags)?;
        w.write_u64::<LittleEndian>(n as u64)?;
        w.write_u32::<LittleEndian>(self.state_dim as u32)?;
        w.write_u32::<LittleEndian>(d_a as u32)?;
        w.write_u32::<LittleEndian>(count as u32)?;
        write_f32s(&mut w, &self.states)?;
        match &self.actions {
            Actions::Continuous(a) => write_f32s(&mut w, a)?,
            Actions::Discrete(a) => {
                for &x in a {
                    w.write_u32::<LittleEndian>(x)?;
                }
            }
        }
        write_f32s(&mut w, &self.rewards)?;
        write_f32s(&mut w, &self.next_states)?;
        for flags in [&self.terminals, &self.timeouts] {
            let bytes: Vec<u8> = flags.iter().map(|&b| b as u8).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("file too short for GQD1 header"))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::format(format!("bad magic {magic:?}, expected GQD1")));
        }
        let header = (|| -> std::io::Result<_> {
            Ok((
                r.read_u32::<LittleEndian>()?,
                r.read_u32::<LittleEndian>()?,
                r.read_u64::<LittleEndian>()?,
                r.read_u32::<LittleEndian>()?,
                r.read_u32::<LittleEndian>()?,
                r.read_u32::<LittleEndian>()?,
            ))
        })()
        .map_err(|_| Error::format("truncated GQD1 header"))?;
        let (version, flags, n, d_s, d_a, count) = header;
        if version != DATASET_VERSION {
            return Err(Error::format(format!("unsupported GQD1 version {version}")));
        }
        if flags & !FLAG_DISCRETE != 0 {
            return Err(Error::format(format!("unknown GQD1 flags {flags:#x}")));
        }
        let n = n as usize;
        let d_s = d_s as usize;
        let discrete = flags & FLAG_DISCRETE != 0;
        let action_space = if discrete {
            if d_a != 1 {
                return Err(Error::format("discrete GQD1 file must declare d_a = 1"));
            }
            ActionSpace::Discrete { count: count as usize }
        } else {
            if count != 0 {
                return Err(Error::format("continuous GQD1 file must declare action_count = 0"));
            }
            ActionSpace::Continuous { dim: d_a as usize }
        };
        let truncated = |_| Error::validation("length mismatch: payload shorter than header declares");
        let states = read_f32s(&mut r, n * d_s).map_err(truncated)?;
        let actions = if discrete {
            let mut a = vec![0u32; n];
            r.read_u32_into::<LittleEndian>(&mut a).map_err(truncated)?;
            Actions::Discrete(a)
        } else {
            Actions::Continuous(read_f32s(&mut r, n * d_a as usize).map_err(truncated)?)
        };
        let rewards = read_f32s(&mut r, n).map_err(truncated)?;
        let next_states = read_f32s(&mut r, n * d_s).map_err(truncated)?;
        let terminals = read_flags(&mut r, n).map_err(truncated)?;
        let timeouts = read_flags(&mut r, n).map_err(truncated)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::validation("length mismatch: trailing bytes after payload"));
        }
        TransitionDataset::new(
            d_s,
            action_space,
            states,
            actions,
            rewards,
            next_states,
            terminals,
            timeouts,
        )
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

fn read_flags<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<bool>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    buf.into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "flag byte not 0/1")),
        })
        .collect()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<TransitionDataset> {
    let f = File::open(path.as_ref())?;
    TransitionDataset::read_from(BufReader::new(f))
}

pub fn save_dataset(ds: &TransitionDataset, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path.as_ref())?;
    let mut w = BufWriter::new(f);
    ds.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Per-dimension Gaussian normalisation constants for states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f32>,
    pub state_std: Vec<f32>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn normalize_into(&self, s: &[f32], out: &mut [f32]) {
        for ((o, &x), (&m, &sd)) in out
            .iter_mut()
            .zip(s)
            .zip(self.state_mean.iter().zip(&self.state_std))
        {
            *o = (x - m) / sd;
        }
    }

    pub fn normalize_f64<'a>(&'a self, s: &'a [f32]) -> impl Iterator<Item = f64> + 'a {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(&x, (&m, &sd))| (x as f64 - m as f64) / sd as f64)
    }
}

/// Mean and population standard deviation of `ds.states()` (Welford update).
pub fn compute_norm_stats(ds: &TransitionDataset) -> NormStats {
    let d = ds.state_dim();
    let mut mean = vec![0f64; d];
    let mut m2 = vec![0f64; d];
    for (i, row) in ds.states().chunks_exact(d).enumerate() {
        let count = (i + 1) as f64;
        for j in 0..d {
            let x = row[j] as f64;
            let delta = x - mean[j];
            mean[j] += delta / count;
            m2[j] += delta * (x - mean[j]);
        }
    }
    let n = ds.len() as f64;
    NormStats {
        state_mean: mean.iter().map(|&m| m as f32).collect(),
        state_std: m2
            .iter()
            .map(|&v| (v / n).sqrt().max(STD_FLOOR) as f32)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn continuous(n: usize, d_s: usize, d_a: usize) -> TransitionDataset {
        let states: Vec<f32> = (0..n * d_s).map(|i| i as f32 * 0.5).collect();
        let next_states: Vec<f32> = states.iter().map(|x| x + 1.0).collect();
        TransitionDataset::new(
            d_s,
            ActionSpace::Continuous { dim: d_a },
            states,
            Actions::Continuous((0..n * d_a).map(|i| -(i as f32)).collect()),
            (0..n).map(|i| i as f32).collect(),
            next_states,
            (0..n).map(|i| i == n - 1).collect(),
            vec![false; n],
        )
        .unwrap()
    }

    fn roundtrip(ds: &TransitionDataset) -> TransitionDataset {
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        TransitionDataset::read_from(buf.as_slice()).unwrap()
    }

    #[test]
    fn small_roundtrip_keeps_dims() {
        let ds = continuous(3, 2, 1);
        let back = roundtrip(&ds);
        assert_eq!(back.len(), 3);
        assert_eq!(back.state_dim(), 2);
        assert_eq!(back.action_space(), ActionSpace::Continuous { dim: 1 });
        assert_eq!(back, ds);
    }

    #[test]
    fn single_row_file_size() {
        let ds = continuous(1, 3, 2);
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        // header + states + actions + rewards + next_states + 2 flag bytes
        assert_eq!(buf.len(), 32 + 12 + 8 + 4 + 12 + 2);
        assert_eq!(buf.len(), TransitionDataset::encoded_len(1, 3, ds.action_space()));
    }

    #[test]
    fn discrete_actions_survive() {
        let n = 5;
        let ds = TransitionDataset::new(
            1,
            ActionSpace::Discrete { count: 25 },
            vec![0.0; n],
            Actions::Discrete(vec![0, 24, 3, 7, 24]),
            vec![0.0; n],
            vec![0.0; n],
            vec![false, false, true, false, false],
            vec![false, false, false, false, true],
        )
        .unwrap();
        let back = roundtrip(&ds);
        assert_eq!(back.actions(), &Actions::Discrete(vec![0, 24, 3, 7, 24]));
    }

    #[test]
    fn nan_reward_names_row() {
        let ds = continuous(10, 2, 1);
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        // rewards start after header, states (10*2) and actions (10*1)
        let off = 32 + 4 * 20 + 4 * 10 + 4 * 7;
        buf[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = TransitionDataset::read_from(buf.as_slice()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("row 7"), "{msg}");
    }

    #[test]
    fn terminal_and_timeout_rejected() {
        let err = TransitionDataset::new(
            1,
            ActionSpace::Continuous { dim: 1 },
            vec![0.0],
            Actions::Continuous(vec![0.0]),
            vec![0.0],
            vec![0.0],
            vec![true],
            vec![true],
        )
        .unwrap_err();
        assert!(err.to_string().contains("row 0"));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let ds = continuous(4, 2, 1);
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            TransitionDataset::read_from(bad.as_slice()),
            Err(Error::Format(_))
        ));
        let mut bad_version = buf.clone();
        bad_version[4] = 2;
        assert!(matches!(
            TransitionDataset::read_from(bad_version.as_slice()),
            Err(Error::Format(_))
        ));
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            TransitionDataset::read_from(buf.as_slice()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn out_of_range_discrete_action() {
        let err = TransitionDataset::new(
            1,
            ActionSpace::Discrete { count: 4 },
            vec![0.0; 2],
            Actions::Discrete(vec![1, 4]),
            vec![0.0; 2],
            vec![0.0; 2],
            vec![false, true],
            vec![false; 2],
        )
        .unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn norm_stats_two_points() {
        let ds = TransitionDataset::new(
            1,
            ActionSpace::Continuous { dim: 1 },
            vec![0.0, 2.0],
            Actions::Continuous(vec![0.0, 0.0]),
            vec![0.0; 2],
            vec![0.0; 2],
            vec![false, true],
            vec![false; 2],
        )
        .unwrap();
        let ns = compute_norm_stats(&ds);
        assert_eq!(ns.state_mean, vec![1.0]);
        assert_eq!(ns.state_std, vec![1.0]);
    }

    #[test]
    fn norm_stats_clamps_constant_states() {
        let n = 4;
        let ds = TransitionDataset::new(
            2,
            ActionSpace::Continuous { dim: 1 },
            vec![3.0; 2 * n],
            Actions::Continuous(vec![0.0; n]),
            vec![0.0; n],
            vec![0.0; 2 * n],
            vec![false; n],
            vec![false; n],
        )
        .unwrap();
        let ns = compute_norm_stats(&ds);
        assert_eq!(ns.state_std, vec![1e-6f32; 2]);
    }

    #[test]
    fn trajectories_split_on_flags() {
        let mut ds = continuous(6, 1, 1);
        ds.terminals = vec![false, true, false, false, false, false];
        ds.timeouts = vec![false, false, false, true, false, true];
        assert_eq!(ds.trajectories().unwrap(), vec![0..2, 2..4, 4..6]);
        ds.timeouts[5] = false;
        assert!(ds.trajectories().is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_lossless(
            rows in prop::collection::vec(
                (prop::collection::vec(-1e6f32..1e6, 3), 0u32..7, -10f32..10f32, any::<bool>()),
                1..60,
            )
        ) {
            let n = rows.len();
            let states: Vec<f32> = rows.iter().flat_map(|r| r.0.clone()).collect();
            let next_states: Vec<f32> = states.iter().map(|x| x * 0.5).collect();
            let ds = TransitionDataset::new(
                3,
                ActionSpace::Discrete { count: 7 },
                states,
                Actions::Discrete(rows.iter().map(|r| r.1).collect()),
                rows.iter().map(|r| r.2).collect(),
                next_states,
                rows.iter().map(|r| r.3).collect(),
                rows.iter().map(|r| !r.3 && n % 2 == 0).collect(),
            ).unwrap();
            let back = roundtrip(&ds);
            prop_assert_eq!(&back, &ds);
            let mut bytes = Vec::new();
            back.write_to(&mut bytes).unwrap();
            prop_assert_eq!(bytes.len(), TransitionDataset::encoded_len(n, 3, ds.action_space()));
        }

        #[test]
        fn normalized_states_are_standard(
            raw in prop::collection::vec(prop::collection::vec(-50f32..50f32, 2), 20..200)
        ) {
            let n = raw.len();
            let states: Vec<f32> = raw.iter().flatten().copied().collect();
            let ds = TransitionDataset::new(
                2,
                ActionSpace::Continuous { dim: 1 },
                states.clone(),
                Actions::Continuous(vec![0.0; n]),
                vec![0.0; n],
                states,
                vec![false; n],
                vec![false; n],
            ).unwrap();
            let ns = compute_norm_stats(&ds);
            for j in 0..2 {
                prop_assume!(ns.state_std[j] > 1e-2);
                let z: Vec<f64> = (0..n)
                    .map(|i| ns.normalize_f64(ds.state(i)).nth(j).unwrap())
                    .collect();
                let m = z.iter().sum::<f64>() / n as f64;
                let v = z.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
                prop_assert!(m.abs() < 1e-4, "mean {}", m);
                prop_assert!((v.sqrt() - 1.0).abs() < 1e-3, "std {}", v.sqrt());
            }
        }
    }
}
