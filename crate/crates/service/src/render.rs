use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use ndarray::ArrayView1;

/// Encode one sample as a base64 grayscale PNG. Image samples use their
/// `(rows, cols)` shape with values in [0, 1]; other vectors become a
/// one-pixel-high strip scaled to their own range.
pub fn sample_png(x: ArrayView1<f64>, shape: Option<(usize, usize)>) -> Result<String, png::EncodingError> {
    let (rows, cols, pixels) = match shape {
        Some((r, c)) => (r, c, x.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()),
        None => {
            let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            (1, x.len(), x.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8).collect::<Vec<u8>>())
        }
    };
    let mut bytes = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut bytes, cols as u32, rows as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(&pixels)?;
    }
    Ok(STANDARD.encode(bytes))
}
