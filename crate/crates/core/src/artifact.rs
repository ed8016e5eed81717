//! Artifact emission: PGM channel dumps, raw float latents, hashing.
//!
//! Every writer here is deterministic — fixed value mapping, no
//! timestamps — so re-running a command with the same configuration and
//! seed reproduces artifacts byte for byte.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::Tensor;
use crate::toyldm::Latent;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixed affine mapping of latent values into 8-bit gray: [-2, 2] spans
/// the byte range, clamped outside.
fn to_gray(v: f64) -> u8 {
    let scaled = ((v + 2.0) / 4.0 * 255.0).round();
    scaled.clamp(0.0, 255.0) as u8
}

/// Writes one channel of a latent as a binary PGM with the given comment
/// lines (`#`-prefixed in the header).
pub fn write_channel_pgm(
    latent: &Latent,
    channel: usize,
    path: &Path,
    comments: &[String],
) -> Result<()> {
    let shape = latent.tensor().shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if channel >= c {
        return Err(Error::Index(format!("channel {channel} out of range for {c} channels")));
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"P5\n");
    for line in comments {
        bytes.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    bytes.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            bytes.push(to_gray(latent.tensor().data()[(y * w + x) * c + channel]));
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Dumps every channel of a latent as `stem_c<channel>.pgm` files.
pub fn write_latent_pgms(
    latent: &Latent,
    dir: &Path,
    stem: &str,
    comments: &[String],
) -> Result<Vec<String>> {
    let channels = latent.tensor().shape()[2];
    let mut names = Vec::with_capacity(channels);
    for ch in 0..channels {
        let name = format!("{stem}_c{ch}.pgm");
        write_channel_pgm(latent, ch, &dir.join(&name), comments)?;
        names.push(name);
    }
    Ok(names)
}

/// Raw little-endian f64 dump of a tensor, no header.
pub fn write_raw_f64(tensor: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, tensor.bytes_le())?;
    Ok(())
}

/// Reads a raw f64 file back under a known shape.
pub fn read_raw_f64(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::Integrity(format!(
            "raw latent file holds {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            n * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::from_vec(shape, data)
}
