//! Binary container for pre-extracted clip frames.
//!
//! Layout (little endian): magic `GANOCLIP`, `u32` version, `u32` channels,
//! frame count, height, width, still height, still width, `f64` fps, then
//! 8-bit pixels (channel-first) for every frame followed by the still frame.
//! Pixel values are stored as `round(v * 255)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{Frame, VideoClip};

const MAGIC: &[u8; 8] = b"GANOCLIP";
const VERSION: u32 = 1;

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_clip(clip: &VideoClip) -> Vec<u8> {
    let (h, w) = clip.frame_size();
    let c = clip.frames.first().map_or(clip.last_frame_hi.channels, |f| f.channels);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        c as u32,
        clip.frames.len() as u32,
        h as u32,
        w as u32,
        clip.last_frame_hi.height as u32,
        clip.last_frame_hi.width as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&clip.fps.to_le_bytes());
    for f in clip.frames.iter().chain(std::iter::once(&clip.last_frame_hi)) {
        out.extend(f.pixels.iter().map(|&v| quantize(v)));
    }
    out
}

pub fn decode_clip(bytes: &[u8]) -> Result<VideoClip> {
    let bad = |m: &str| Error::Shape(format!("clip file: {m}"));
    if bytes.len() < 44 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != VERSION as usize {
        return Err(bad(&format!("unsupported version {}", word(0))));
    }
    let (c, t, h, w, sh, sw) = (word(1), word(2), word(3), word(4), word(5), word(6));
    let fps = f64::from_le_bytes(bytes[36..44].try_into().unwrap());
    let expected = 44 + c * (t * h * w + sh * sw);
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut cursor = 44;
    let mut take = |fh: usize, fw: usize| {
        let n = c * fh * fw;
        let px = bytes[cursor..cursor + n].iter().map(|&b| b as f64 / 255.0).collect();
        cursor += n;
        Frame::new(c, fh, fw, px)
    };
    let frames = (0..t).map(|_| take(h, w)).collect();
    let last_frame_hi = take(sh, sw);
    Ok(VideoClip {
        frames,
        fps,
        last_frame_hi,
    })
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    fs::write(path, encode_clip(clip)).map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip(&bytes)
}
