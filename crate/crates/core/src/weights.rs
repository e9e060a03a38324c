//! Binary weight files and per-segment weight transfer.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "SDW1"                                  magic, 4 bytes
//! u32   segment count
//! per segment:
//!   u8    name length, then name bytes
//!   u32   parameter count
//!   per parameter:
//!     u32   rank, then rank x u32 dims
//!     raw f32 data (product(dims) values)
//! ```
//!
//! Round trips are bit-exact; loading copies raw f32 bit patterns.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{DetectorNet, SegmentName};

/// One segment as stored on disk, independent of any live network.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBlob {
    pub name: String,
    /// (shape, values) per parameter, in network order.
    pub params: Vec<(Vec<usize>, Vec<f32>)>,
}

const MAGIC: &[u8; 4] = b"SDW1";

pub fn save_weights(net: &DetectorNet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let segments = net.segments();
    buf.extend_from_slice(&(segments.len() as u32).to_le_bytes());
    for seg in segments {
        let name = seg.name.as_str().as_bytes();
        buf.push(name.len() as u8);
        buf.extend_from_slice(name);
        let params = seg.params();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                msg: format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Parse a weight file into raw segment blobs without needing a network.
pub fn read_segments(path: &Path) -> Result<Vec<SegmentBlob>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "bad magic, not a weight file".into(),
        });
    }
    let seg_count = cur.u32()? as usize;
    let mut segments = Vec::with_capacity(seg_count);
    for _ in 0..seg_count {
        let name_len = cur.u8()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            msg: "segment name is not utf-8".into(),
        })?;
        let param_count = cur.u32()? as usize;
        let mut params = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            params.push((shape, cur.f32s(n)?));
        }
        segments.push(SegmentBlob { name, params });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "{} trailing bytes after last segment",
                bytes.len() - cur.pos
            ),
        });
    }
    Ok(segments)
}

/// Replace the named segments of `dst` with values from a weight file.
/// Unnamed segments keep their current parameters. Shapes must match
/// exactly; a mismatch reports the offending segment.
pub fn transfer_weights(
    dst: &mut DetectorNet,
    src_file: &Path,
    segments: &[SegmentName],
) -> Result<()> {
    let blobs = read_segments(src_file)?;
    for &name in segments {
        let blob = blobs
            .iter()
            .find(|b| b.name == name.as_str())
            .ok_or_else(|| Error::Format {
                path: src_file.to_path_buf(),
                msg: format!("segment {name:?} not present in file"),
            })?;
        let seg = dst.segment_mut(name);
        let mut params = seg.params_mut();
        if params.len() != blob.params.len() {
            return Err(Error::Format {
                path: src_file.to_path_buf(),
                msg: format!(
                    "segment \"{name}\": file has {} parameters, network expects {}",
                    blob.params.len(),
                    params.len()
                ),
            });
        }
        for (i, ((shape, values), p)) in blob.params.iter().zip(params.iter_mut()).enumerate() {
            if *shape != p.shape {
                return Err(Error::Format {
                    path: src_file.to_path_buf(),
                    msg: format!(
                        "segment \"{name}\" parameter {i}: file shape {shape:?}, network shape {:?}",
                        p.shape
                    ),
                });
            }
            p.data.copy_from_slice(values);
        }
    }
    Ok(())
}

/// Load every segment (full checkpoint restore).
pub fn load_weights(net: &mut DetectorNet, path: &Path) -> Result<()> {
    transfer_weights(net, path, &SegmentName::ALL)
}

/// Reconstruct the architecture a weight file was saved from. The file only
/// stores tensor shapes, so the two quantities they cannot pin down come
/// from the caller: `input_size` (convolutions are extent-agnostic) and
/// `boxes_per_cell` (the head channel count is the product B*(5+K)).
pub fn infer_net_config(
    path: &Path,
    input_size: usize,
    boxes_per_cell: usize,
) -> Result<crate::net::NetConfig> {
    let blobs = read_segments(path)?;
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let seg = |name: SegmentName| {
        blobs
            .iter()
            .find(|b| b.name == name.as_str())
            .ok_or_else(|| fail(format!("segment {name:?} not present in file")))
    };
    let conv_out = |blob: &SegmentBlob, layer: usize| -> Result<usize> {
        blob.params
            .get(layer * 2)
            .filter(|(shape, _)| shape.len() == 4)
            .map(|(shape, _)| shape[0])
            .ok_or_else(|| {
                fail(format!(
                    "segment \"{}\" lacks conv layer {layer}",
                    blob.name
                ))
            })
    };
    let backbone = seg(SegmentName::Backbone)?;
    let backbone_channels = [
        conv_out(backbone, 0)?,
        conv_out(backbone, 1)?,
        conv_out(backbone, 2)?,
    ];
    let neck_channels = conv_out(seg(SegmentName::Neck)?, 0)?;
    let head_channels = conv_out(seg(SegmentName::Head)?, 0)?;
    if boxes_per_cell == 0 || head_channels % boxes_per_cell != 0 {
        return Err(fail(format!(
            "head channel count {head_channels} is not a multiple of {boxes_per_cell} slots"
        )));
    }
    let per_slot = head_channels / boxes_per_cell;
    if per_slot <= 5 {
        return Err(fail(format!(
            "head channels per slot {per_slot} leave no class scores"
        )));
    }
    let config = crate::net::NetConfig {
        input_size,
        backbone_channels,
        neck_channels,
        boxes_per_cell,
        classes: per_slot - 5,
    };
    config.validate()?;
    Ok(config)
}
