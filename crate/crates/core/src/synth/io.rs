//! Frame-folder clips (`<root>/<id>/<frame%05d>.png`) and flow folders
//! (`<root>/<id>/<src>_<dst>.flo`).

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, LumaA, Rgb, Rgba};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::synth::scene::GroundTruthFlow;
use crate::video::{Frame, Layout, VideoSequence};

/// Rounds to the 16-bit code grid so a PNG round trip is lossless.
pub fn quantize16(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16 as f32 / 65535.0
}

fn code16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes a frame as a 16-bit PNG, clipping to `[0, 1]`.
pub fn write_frame_png(frame: &Frame, path: &Path) -> Result<()> {
    let (c, h, w) = frame.dims();
    let (h32, w32) = (h as u32, w as u32);
    let px = |y: u32, x: u32, ch: usize| code16(frame.get(ch, y as usize, x as usize));
    let res = match c {
        1 => ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w32, h32, |x, y| Luma([px(y, x, 0)])).save(path),
        2 => ImageBuffer::<LumaA<u16>, Vec<u16>>::from_fn(w32, h32, |x, y| LumaA([px(y, x, 0), px(y, x, 1)])).save(path),
        3 => ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w32, h32, |x, y| Rgb([px(y, x, 0), px(y, x, 1), px(y, x, 2)])).save(path),
        4 => ImageBuffer::<Rgba<u16>, Vec<u16>>::from_fn(w32, h32, |x, y| {
            Rgba([px(y, x, 0), px(y, x, 1), px(y, x, 2), px(y, x, 3)])
        })
        .save(path),
        _ => return Err(Error::Input(format!("cannot export a {c}-channel frame as PNG"))),
    };
    res.map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an 8/16-bit image normalised by its maximum code value.
pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw, scale): (usize, Vec<f32>, f32) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(f32::from).collect(), 255.0),
        DynamicImage::ImageLumaA8(b) => (2, b.into_raw().into_iter().map(f32::from).collect(), 255.0),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(f32::from).collect(), 255.0),
        DynamicImage::ImageRgba8(b) => (4, b.into_raw().into_iter().map(f32::from).collect(), 255.0),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(f32::from).collect(), 65535.0),
        DynamicImage::ImageLumaA16(b) => (2, b.into_raw().into_iter().map(f32::from).collect(), 65535.0),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(f32::from).collect(), 65535.0),
        DynamicImage::ImageRgba16(b) => (4, b.into_raw().into_iter().map(f32::from).collect(), 65535.0),
        other => (3, other.to_rgb32f().into_raw(), 1.0),
    };
    // Interleaved HWC to planar CHW.
    let mut data = vec![0.0f32; c * h * w];
    for i in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + i] = raw[i * c + ch] / scale;
        }
    }
    Frame::new(c, h, w, data)
}

fn frame_index(path: &Path) -> Option<u64> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !matches!(ext.as_str(), "png" | "tif" | "tiff") {
        return None;
    }
    path.file_stem()?.to_str()?.parse().ok()
}

/// Reads a clip directory of numerically named frames.
pub fn read_clip_dir(dir: &Path, layout: Layout) -> Result<VideoSequence> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| frame_index(&p).map(|i| (i, p)))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no frames found in {}", dir.display())));
    }
    let frames = files.iter().map(|(_, p)| read_frame(p)).collect::<Result<Vec<_>>>()?;
    let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
    VideoSequence::new(id, layout, frames)
}

/// Every clip directory under `root`, sorted by id.
pub fn read_clips_root(root: &Path, layout: Layout) -> Result<Vec<VideoSequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_clip_dir(d, layout)).collect()
}

pub fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("{k:05}.png"))
}

/// Writes a clip as `<dir>/<frame%05d>.png`; returns the written paths.
pub fn write_clip_dir(seq: &VideoSequence, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    seq.frames()
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let p = frame_path(dir, k);
            write_frame_png(f, &p).map(|_| p)
        })
        .collect()
}

pub fn write_flows(gt: &GroundTruthFlow, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (&(src, dst), (flow, occ)) in gt.pairs() {
        let p = dir.join(format!("{src}_{dst}.flo"));
        flow.write_flo(&p)?;
        written.push(p);
        let m = dir.join(format!("{src}_{dst}_occ.png"));
        write_frame_png(occ, &m)?;
        written.push(m);
    }
    Ok(written)
}

pub fn read_flows(dir: &Path, radius: usize) -> Result<GroundTruthFlow> {
    let mut pairs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) != Some("flo") {
            continue;
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let parsed = stem.split_once('_').and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
        let Some((src, dst)) = parsed else {
            return Err(Error::format(&p, "flow file name is not <src>_<dst>.flo"));
        };
        pairs.push((src, dst, p));
    }
    pairs.sort();
    let Some((_, _, first)) = pairs.first() else {
        return Err(Error::Input(format!("no flow files in {}", dir.display())));
    };
    let probe = FlowField::read_flo(first)?;
    let mut gt = GroundTruthFlow::new(probe.height(), probe.width(), radius);
    for (src, dst, p) in pairs {
        let flow = FlowField::read_flo(&p)?;
        let occ = read_frame(&dir.join(format!("{src}_{dst}_occ.png")))?;
        gt.insert(src, dst, flow, occ);
    }
    Ok(gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_on_code_grid() {
        let dir = tempfile::tempdir().unwrap();
        for c in 1..=4 {
            let data: Vec<f32> = (0..c * 5 * 3).map(|i| quantize16(i as f32 / 50.0)).collect();
            let f = Frame::new(c, 5, 3, data).unwrap();
            let p = dir.path().join(format!("{c}.png"));
            write_frame_png(&f, &p).unwrap();
            assert_eq!(read_frame(&p).unwrap(), f);
        }
    }

    #[test]
    fn eight_bit_images_are_normalised() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("00000.png");
        ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(2, 1, |x, _| Luma([if x == 0 { 0 } else { 255 }])).save(&p).unwrap();
        let f = read_frame(&p).unwrap();
        assert_eq!(f.data(), &[0.0, 1.0]);
    }

    #[test]
    fn clip_dirs_sort_numerically() {
        let dir = tempfile::tempdir().unwrap();
        let clip = dir.path().join("a");
        fs::create_dir_all(&clip).unwrap();
        for (k, name) in [(2, "10.png"), (1, "9.png"), (0, "0.png")] {
            write_frame_png(&Frame::filled(1, 2, 2, quantize16(k as f32 / 4.0)), &clip.join(name)).unwrap();
        }
        fs::write(clip.join("notes.txt"), "x").unwrap();
        let seq = read_clip_dir(&clip, Layout::Srgb).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.id, "a");
        let firsts: Vec<f32> = seq.frames().iter().map(|f| f.get(0, 0, 0)).collect();
        assert!(firsts[0] < firsts[1] && firsts[1] < firsts[2]);
    }
}
