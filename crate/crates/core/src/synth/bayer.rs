//! Bayer mosaics and RGBG packing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{Frame, Layout, VideoSequence};

/// Colour filter array phase, named by the top-left 2x2 block in row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum CfaPhase {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl CfaPhase {
    /// Offsets `(dy, dx)` inside the 2x2 block of R, G1, B, G2. G1 shares a
    /// row with R.
    fn offsets(self) -> [(usize, usize); 4] {
        match self {
            CfaPhase::Rggb => [(0, 0), (0, 1), (1, 1), (1, 0)],
            CfaPhase::Bggr => [(1, 1), (1, 0), (0, 0), (0, 1)],
            CfaPhase::Grbg => [(0, 1), (0, 0), (1, 0), (1, 1)],
            CfaPhase::Gbrg => [(1, 0), (1, 1), (0, 1), (0, 0)],
        }
    }
}

/// Samples an RGB frame through the colour filter array.
pub fn mosaic(rgb: &Frame, phase: CfaPhase) -> Result<Frame> {
    let (c, h, w) = rgb.dims();
    if c != 3 {
        return Err(Error::Input(format!("mosaic needs 3 channels, got {c}")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Input(format!("mosaic needs even dimensions, got {h}x{w}")));
    }
    // Colour channel sampled by each packed plane: R, G, B, G.
    let colour = [0usize, 1, 2, 1];
    let mut out = Frame::zeros(1, h, w);
    for (plane, &(dy, dx)) in phase.offsets().iter().enumerate() {
        for y in (dy..h).step_by(2) {
            for x in (dx..w).step_by(2) {
                out.set(0, y, x, rgb.get(colour[plane], y, x));
            }
        }
    }
    Ok(out)
}

fn pack_frame(f: &Frame, phase: CfaPhase) -> Result<Frame> {
    let (c, h, w) = f.dims();
    if c != 1 {
        return Err(Error::Input(format!("packing needs a single-channel mosaic, got {c} channels")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Input(format!("packing needs even dimensions, got {h}x{w}")));
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Frame::zeros(4, ph, pw);
    for (plane, &(dy, dx)) in phase.offsets().iter().enumerate() {
        for y in 0..ph {
            for x in 0..pw {
                out.set(plane, y, x, f.get(0, 2 * y + dy, 2 * x + dx));
            }
        }
    }
    Ok(out)
}

fn unpack_frame(f: &Frame, phase: CfaPhase) -> Result<Frame> {
    let (c, ph, pw) = f.dims();
    if c != 4 {
        return Err(Error::Input(format!("unpacking needs 4 channels, got {c}")));
    }
    let mut out = Frame::zeros(1, 2 * ph, 2 * pw);
    for (plane, &(dy, dx)) in phase.offsets().iter().enumerate() {
        for y in 0..ph {
            for x in 0..pw {
                out.set(0, 2 * y + dy, 2 * x + dx, f.get(plane, y, x));
            }
        }
    }
    Ok(out)
}

/// Bayer mosaic sequence to half-resolution `(R, G1, B, G2)` planes.
pub fn pack_rgbg(bayer: &VideoSequence, phase: CfaPhase) -> Result<VideoSequence> {
    let frames = bayer.frames().iter().map(|f| pack_frame(f, phase)).collect::<Result<Vec<_>>>()?;
    let mut out = VideoSequence::new(bayer.id.clone(), Layout::RgbgPacked, frames)?;
    out.noise_meta = bayer.noise_meta;
    Ok(out)
}

pub fn unpack_rgbg(packed: &VideoSequence, phase: CfaPhase) -> Result<VideoSequence> {
    let frames = packed.frames().iter().map(|f| unpack_frame(f, phase)).collect::<Result<Vec<_>>>()?;
    let mut out = VideoSequence::new(packed.id.clone(), Layout::Srgb, frames)?;
    out.noise_meta = packed.noise_meta;
    Ok(out)
}

/// Bilinear demosaic of a packed frame to full-resolution RGB, for previews.
pub fn demosaic_preview(packed: &Frame, phase: CfaPhase) -> Result<Frame> {
    let bayer = unpack_frame(packed, phase)?;
    let (_, h, w) = bayer.dims();
    let offsets = phase.offsets();
    let colour_of = |y: usize, x: usize| -> usize {
        let pos = (y % 2, x % 2);
        match offsets.iter().position(|&o| o == pos).expect("every site has a colour") {
            0 => 0,
            2 => 2,
            _ => 1,
        }
    };
    let mut out = Frame::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let mut sum = [0.0f32; 3];
            let mut cnt = [0u32; 3];
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i32 || xx >= w as i32 {
                        continue;
                    }
                    let col = colour_of(yy as usize, xx as usize);
                    sum[col] += bayer.get(0, yy as usize, xx as usize);
                    cnt[col] += 1;
                }
            }
            let own = colour_of(y, x);
            for c in 0..3 {
                let v = if c == own {
                    bayer.get(0, y, x)
                } else if cnt[c] > 0 {
                    sum[c] / cnt[c] as f32
                } else {
                    0.0
                };
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}
