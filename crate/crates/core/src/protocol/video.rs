use super::ProtocolError;
use crate::raster::{DepthImage, Image};

/// seq `u32`, camera id `u8`, width `u16`, height `u16`, encoding `u8`.
pub const VIDEO_HEADER_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Encoding {
    /// Row-major 8-bit RGB.
    Rgb8 = 0,
    /// Row-major `f32` little-endian meters.
    DepthF32 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VideoPixels {
    Rgb8(Vec<u8>),
    Depth(DepthImage),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrame {
    pub seq: u32,
    pub camera_id: u8,
    pub width: u16,
    pub height: u16,
    pub pixels: VideoPixels,
}

impl VideoFrame {
    /// The color image, if this is an RGB frame.
    pub fn image(&self) -> Option<Image> {
        match &self.pixels {
            VideoPixels::Rgb8(b) => Image::from_rgb8(self.width as u32, self.height as u32, b).ok(),
            VideoPixels::Depth(_) => None,
        }
    }
}

fn header(seq: u32, camera_id: u8, w: u32, h: u32, enc: Encoding, body: usize) -> Result<Vec<u8>, ProtocolError> {
    let w16 = u16::try_from(w).map_err(|_| ProtocolError::ImageTooLarge(w))?;
    let h16 = u16::try_from(h).map_err(|_| ProtocolError::ImageTooLarge(h))?;
    let mut out = Vec::with_capacity(VIDEO_HEADER_LEN + body);
    out.extend_from_slice(&seq.to_le_bytes());
    out.push(camera_id);
    out.extend_from_slice(&w16.to_le_bytes());
    out.extend_from_slice(&h16.to_le_bytes());
    out.push(enc as u8);
    Ok(out)
}

/// Quantizes to RGB8 with [`Image::to_rgb8`].
pub fn encode_video(image: &Image, seq: u32, camera_id: u8) -> Result<Vec<u8>, ProtocolError> {
    let mut out = header(seq, camera_id, image.width, image.height, Encoding::Rgb8, image.pixels.len())?;
    out.extend(image.to_rgb8());
    Ok(out)
}

pub fn encode_depth(depth: &DepthImage, seq: u32, camera_id: u8) -> Result<Vec<u8>, ProtocolError> {
    let mut out = header(seq, camera_id, depth.width, depth.height, Encoding::DepthF32, depth.depth.len() * 4)?;
    for d in &depth.depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_video(payload: &[u8]) -> Result<VideoFrame, ProtocolError> {
    if payload.len() < VIDEO_HEADER_LEN {
        return Err(ProtocolError::SizeMismatch { expected: VIDEO_HEADER_LEN, actual: payload.len() });
    }
    let seq = u32::from_le_bytes(payload[0..4].try_into().unwrap());
    let camera_id = payload[4];
    let width = u16::from_le_bytes([payload[5], payload[6]]);
    let height = u16::from_le_bytes([payload[7], payload[8]]);
    let body = &payload[VIDEO_HEADER_LEN..];
    let n = width as usize * height as usize;
    let pixels = match payload[9] {
        0 => {
            if body.len() != n * 3 {
                return Err(ProtocolError::SizeMismatch { expected: n * 3, actual: body.len() });
            }
            VideoPixels::Rgb8(body.to_vec())
        }
        1 => {
            if body.len() != n * 4 {
                return Err(ProtocolError::SizeMismatch { expected: n * 4, actual: body.len() });
            }
            let depth = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            VideoPixels::Depth(DepthImage { width: width as u32, height: height as u32, depth })
        }
        other => return Err(ProtocolError::BadEncoding(other)),
    };
    Ok(VideoFrame { seq, camera_id, width, height, pixels })
}
