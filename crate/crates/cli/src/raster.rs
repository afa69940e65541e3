//! Lossless PNG encoding of study rasters.

use base64::Engine as _;
use tripf_core::study::Raster;

use crate::error::{CliError, CliResult};

/// 16-bit grayscale PNG with no ancillary chunks, so two rasters of the
/// same size differ only in their pixel data.
pub fn encode_png(r: &Raster) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width as u32, r.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc
            .write_header()
            .map_err(|e| CliError::Server(format!("png header: {e}")))?;
        let bytes: Vec<u8> = r.pixels.iter().flat_map(|p| p.to_be_bytes()).collect();
        w.write_image_data(&bytes)
            .map_err(|e| CliError::Server(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn png_base64(r: &Raster) -> CliResult<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_png(r)?))
}

/// PNG of a `[0, 1]` slice.
pub fn slice_png(values: &[f64], height: usize, width: usize) -> CliResult<Vec<u8>> {
    encode_png(&Raster::from_unit(values, height, width)?)
}
