//! "STMD v1" little-endian trajectory files.
//!
//! Layout: magic `STMD`, `u32` version (1), `u32` N, `u32` L, `u32` flags
//! (bit 0: per-frame strides), then either one `f64` uniform stride or
//! `L - 1` `f64` strides (ns), then `L * N` records of seven `f64`:
//! `tx ty tz` (Å) and `qw qx qy qz`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::se3::{FrameSet, RigidFrame, Rotation, Strides, Trajectory, Vec3};

pub const MAGIC: [u8; 4] = *b"STMD";
pub const VERSION: u32 = 1;
pub const FLAG_PER_FRAME_STRIDES: u32 = 1;
/// Maximum deviation of a stored quaternion norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    pub renormalize: bool,
}

pub fn write_trajectory<W: Write>(traj: &Trajectory, mut w: W) -> Result<()> {
    let n = traj.residue_count() as u32;
    let l = traj.len() as u32;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&l.to_le_bytes())?;
    match traj.strides() {
        Strides::Uniform(dt) => {
            w.write_all(&0u32.to_le_bytes())?;
            w.write_all(&dt.to_le_bytes())?;
        }
        Strides::PerFrame(v) => {
            w.write_all(&FLAG_PER_FRAME_STRIDES.to_le_bytes())?;
            for dt in v {
                w.write_all(&dt.to_le_bytes())?;
            }
        }
    }
    for fs in traj.frames() {
        for f in fs.frames() {
            let q = f.rotation.quaternion();
            let t = f.translation;
            for v in [t.x, t.y, t.z, q[0], q[1], q[2], q[3]] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn to_bytes(traj: &Trajectory) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trajectory(traj, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated body: {e}")))?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_trajectory<R: Read>(mut r: R, opts: ReadOptions) -> Result<Trajectory> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Format(format!("missing magic: {e}")))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let l = read_u32(&mut r)? as usize;
    let flags = read_u32(&mut r)?;
    if flags & !FLAG_PER_FRAME_STRIDES != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#x}")));
    }
    if l == 0 {
        return Err(Error::Format("zero frames".into()));
    }
    let strides = if flags & FLAG_PER_FRAME_STRIDES != 0 {
        Strides::PerFrame((0..l - 1).map(|_| read_f64(&mut r)).collect::<Result<_>>()?)
    } else {
        Strides::Uniform(read_f64(&mut r)?)
    };
    let mut frames = Vec::with_capacity(l);
    for li in 0..l {
        let mut residues = Vec::with_capacity(n);
        for i in 0..n {
            let mut rec = [0.0; 7];
            for v in rec.iter_mut() {
                *v = read_f64(&mut r)?;
            }
            if rec.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("non-finite record at frame {li}, residue {i}")));
            }
            let norm = (rec[3] * rec[3] + rec[4] * rec[4] + rec[5] * rec[5] + rec[6] * rec[6]).sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE && !opts.renormalize {
                return Err(Error::Format(format!(
                    "non-unit quaternion (norm {norm}) at frame {li}, residue {i}"
                )));
            }
            let rot = Rotation::from_stored_quaternion(rec[3], rec[4], rec[5], rec[6])
                .map_err(|e| Error::Format(e.to_string()))?;
            residues.push(RigidFrame::new(rot, Vec3::new(rec[0], rec[1], rec[2])));
        }
        frames.push(FrameSet::new(residues).map_err(|e| Error::Format(e.to_string()))?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Trajectory::new(frames, strides).map_err(|e| Error::Format(e.to_string()))
}

pub fn save(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    write_trajectory(traj, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>, opts: ReadOptions) -> Result<Trajectory> {
    read_trajectory(BufReader::new(File::open(path)?), opts)
}
