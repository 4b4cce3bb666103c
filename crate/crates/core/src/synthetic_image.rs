//! Mock images: a small PNG preview that carries its synthetic embedding in
//! a `tEXt` chunk, so image files stay self-describing for the synthetic
//! scorer.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use crate::error::{Error, Result};

pub const EMBEDDING_KEYWORD: &str = "homodiv-embedding";

const SIDE: u32 = 16;

/// Renders `embedding` as a `16 x 16` RGB swatch grid and embeds the raw
/// vector.
pub fn encode_png(embedding: &[f32], caption: &str) -> Result<Vec<u8>> {
    let mut pixels = Vec::with_capacity((SIDE * SIDE * 3) as usize);
    for i in 0..(SIDE * SIDE) as usize {
        for c in 0..3 {
            let v = embedding
                .get((i * 3 + c) % embedding.len().max(1))
                .copied()
                .unwrap_or(0.0);
            // Gaussian-ish components land mostly inside +-3/sqrt(d); scale
            // for visible contrast.
            let scaled = 128.0 + v * 128.0 * (embedding.len() as f32).sqrt() / 3.0;
            pixels.push(scaled.clamp(0.0, 255.0) as u8);
        }
    }
    let raw: Vec<u8> = embedding.iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, SIDE, SIDE);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let ascii: String = caption
            .chars()
            .filter(|c| c.is_ascii() && !c.is_ascii_control())
            .take(512)
            .collect();
        enc.add_text_chunk("Description".into(), ascii)
            .map_err(png_err)?;
        enc.add_text_chunk(EMBEDDING_KEYWORD.into(), B64.encode(raw))
            .map_err(png_err)?;
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&pixels).map_err(png_err)?;
    }
    Ok(out)
}

/// The embedded vector, if `bytes` is a PNG carrying one. `Ok(None)` for any
/// other content, including PNGs without the chunk.
pub fn embedded_vector(bytes: &[u8]) -> Result<Option<Vec<f32>>> {
    if !bytes.starts_with(b"\x89PNG") {
        return Ok(None);
    }
    let Ok(reader) = png::Decoder::new(Cursor::new(bytes)).read_info() else {
        return Ok(None);
    };
    let Some(chunk) = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == EMBEDDING_KEYWORD)
    else {
        return Ok(None);
    };
    let raw = B64
        .decode(chunk.text.as_bytes())
        .map_err(|e| Error::Schema(format!("embedded vector is not base64: {e}")))?;
    if raw.len() % 4 != 0 {
        return Err(Error::Schema("embedded vector length not a multiple of 4".into()));
    }
    Ok(Some(
        raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    ))
}

fn png_err(e: png::EncodingError) -> Error {
    Error::InvalidState(format!("png encoding failed: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_survives_png_roundtrip() {
        let v: Vec<f32> = (0..40).map(|i| (i as f32 - 20.0) / 37.0).collect();
        let png = encode_png(&v, "a dog").unwrap();
        assert_eq!(embedded_vector(&png).unwrap(), Some(v));
    }

    #[test]
    fn non_png_has_no_vector() {
        assert_eq!(embedded_vector(b"GIF89a....").unwrap(), None);
    }
}
