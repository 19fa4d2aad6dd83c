//! Image buffers (f64, row-major) and 8-bit PNG / PPM input-output.
//!
//! Values live in `[0, 1]` and map linearly to bytes; `write` then `read`
//! agrees with the original up to 8-bit quantization.

use nalgebra::Vector3;
use std::io::BufWriter;
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ImageIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
}

/// An RGB image with one `Vector3` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vector3<f64>>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![Vector3::zeros(); width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: Vector3<f64>) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Vector3<f64>) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at a continuous pixel coordinate (pixel centers at
    /// integers); coordinates are clamped to the valid range.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Vector3<f64> {
        let (x0, y0, x1, y1, fx, fy) = bilinear_setup(u, v, self.width, self.height);
        self.get(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + self.get(x1, y0) * fx * (1.0 - fy)
            + self.get(x0, y1) * (1.0 - fx) * fy
            + self.get(x1, y1) * fx * fy
    }
}

/// A single-channel image (depth maps, alpha maps, SSIM fields).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn sample_bilinear(&self, u: f64, v: f64) -> f64 {
        let (x0, y0, x1, y1, fx, fy) = bilinear_setup(u, v, self.width, self.height);
        self.get(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + self.get(x1, y0) * fx * (1.0 - fy)
            + self.get(x0, y1) * (1.0 - fx) * fy
            + self.get(x1, y1) * fx * fy
    }

    /// Corner indices and weights used by `sample_bilinear`; exposed so
    /// gradients can be scattered back to the same four pixels.
    pub fn bilinear_footprint(&self, u: f64, v: f64) -> [(usize, usize, f64); 4] {
        let (x0, y0, x1, y1, fx, fy) = bilinear_setup(u, v, self.width, self.height);
        [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ]
    }
}

fn bilinear_setup(u: f64, v: f64, width: usize, height: usize) -> (usize, usize, usize, usize, f64, f64) {
    let u = u.clamp(0.0, (width - 1) as f64);
    let v = v.clamp(0.0, (height - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    (x0, y0, x1, y1, u - x0 as f64, v - y0 as f64)
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_bytes(img: &Image) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(img.data.len() * 3);
    for px in &img.data {
        bytes.push(to_u8(px.x));
        bytes.push(to_u8(px.y));
        bytes.push(to_u8(px.z));
    }
    bytes
}

fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Image {
    let mut img = Image::new(width, height);
    for (px, chunk) in img.data.iter_mut().zip(bytes.chunks_exact(3)) {
        *px = Vector3::new(
            chunk[0] as f64 / 255.0,
            chunk[1] as f64 / 255.0,
            chunk[2] as f64 / 255.0,
        );
    }
    img
}

/// Write an image as 8-bit PNG or PPM (P6), selected by file extension.
pub fn write_image(path: &Path, img: &Image) -> Result<(), ImageIoError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, img),
        Some("ppm") => write_ppm(path, img),
        other => Err(ImageIoError::UnsupportedFormat(format!(
            "extension {other:?} (want .png or .ppm)"
        ))),
    }
}

/// Read an 8-bit PNG or PPM (P3/P6) image, sniffing the header.
pub fn read_image(path: &Path) -> Result<Image, ImageIoError> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        read_png(&bytes)
    } else if bytes.starts_with(b"P3") || bytes.starts_with(b"P6") {
        read_ppm(&bytes)
    } else {
        Err(ImageIoError::UnsupportedFormat(
            "not a PNG or PPM file".into(),
        ))
    }
}

fn write_png(path: &Path, img: &Image) -> Result<(), ImageIoError> {
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| ImageIoError::Parse(e.to_string()))?;
    writer
        .write_image_data(&to_bytes(img))
        .map_err(|e| ImageIoError::Parse(e.to_string()))?;
    Ok(())
}

fn read_png(bytes: &[u8]) -> Result<Image, ImageIoError> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| ImageIoError::Parse(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().expect("png buffer size")];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageIoError::Parse(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageIoError::UnsupportedFormat("png bit depth".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf[..info.buffer_size()].to_vec(),
        png::ColorType::Rgba => buf[..info.buffer_size()]
            .chunks_exact(4)
            .flat_map(|c| [c[0], c[1], c[2]])
            .collect(),
        png::ColorType::Grayscale => buf[..info.buffer_size()]
            .iter()
            .flat_map(|&g| [g, g, g])
            .collect(),
        other => {
            return Err(ImageIoError::UnsupportedFormat(format!(
                "png color type {other:?}"
            )))
        }
    };
    Ok(from_bytes(w, h, &rgb))
}

fn write_ppm(path: &Path, img: &Image) -> Result<(), ImageIoError> {
    let mut out = Vec::with_capacity(img.data.len() * 3 + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend_from_slice(&to_bytes(img));
    std::fs::write(path, out)?;
    Ok(())
}

fn read_ppm(bytes: &[u8]) -> Result<Image, ImageIoError> {
    let binary = bytes.starts_with(b"P6");
    // Header tokens (magic, width, height, maxval) allow comments and any
    // whitespace; the pixel payload of P6 starts right after a single
    // whitespace byte following maxval.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageIoError::Parse("truncated ppm header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| ImageIoError::Parse("non-utf8 ppm header".into()))?
            .parse()
            .map_err(|_| ImageIoError::Parse("bad ppm header number".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImageIoError::UnsupportedFormat(format!(
            "ppm maxval {maxval} (only 255 supported)"
        )));
    }
    let n = width * height * 3;
    let raw: Vec<u8> = if binary {
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(ImageIoError::Parse("missing whitespace before ppm payload".into()));
        }
        pos += 1;
        if bytes.len() < pos + n {
            return Err(ImageIoError::Parse("truncated ppm payload".into()));
        }
        bytes[pos..pos + n].to_vec()
    } else {
        let text = std::str::from_utf8(&bytes[pos..])
            .map_err(|_| ImageIoError::Parse("non-utf8 ppm payload".into()))?;
        let values: Result<Vec<u8>, _> = text.split_ascii_whitespace().map(str::parse).collect();
        let values = values.map_err(|_| ImageIoError::Parse("bad ppm sample".into()))?;
        if values.len() < n {
            return Err(ImageIoError::Parse("truncated ppm payload".into()));
        }
        values[..n].to_vec()
    };
    Ok(from_bytes(width, height, &raw))
}

// ---------------------------------------------------------------------------
// Depth maps: raw little-endian f64 payload with a small header.
// ---------------------------------------------------------------------------

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

pub fn write_depth(path: &Path, depth: &ScalarImage) -> Result<(), ImageIoError> {
    let mut out = Vec::with_capacity(16 + depth.data.len() * 8);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for v in &depth.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<ScalarImage, ImageIoError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
        return Err(ImageIoError::Parse("bad depth file header".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = width * height;
    if bytes.len() != 12 + n * 8 {
        return Err(ImageIoError::Parse("depth payload size mismatch".into()));
    }
    let mut img = ScalarImage::new(width, height);
    for (i, chunk) in bytes[12..].chunks_exact(8).enumerate() {
        img.data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(img)
}

/// Map `[0, 1]` to a fixed black - purple - orange - yellow ramp (piecewise
/// linear between the four anchors).
pub fn colormap(t: f64) -> Vector3<f64> {
    const STOPS: [(f64, [f64; 3]); 4] = [
        (0.0, [0.0, 0.0, 0.05]),
        (0.33, [0.45, 0.05, 0.5]),
        (0.66, [0.95, 0.45, 0.1]),
        (1.0, [1.0, 0.98, 0.7]),
    ];
    let t = t.clamp(0.0, 1.0);
    for w in STOPS.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = (t - t0) / (t1 - t0);
            return Vector3::new(
                c0[0] + f * (c1[0] - c0[0]),
                c0[1] + f * (c1[1] - c0[1]),
                c0[2] + f * (c1[2] - c0[2]),
            );
        }
    }
    Vector3::new(1.0, 0.98, 0.7)
}

/// Render a scalar map to a colormapped image, normalizing over the positive
/// values (zeros stay at the bottom of the ramp).
pub fn colormap_image(map: &ScalarImage) -> Image {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in &map.data {
        if v > 0.0 {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = Image::new(map.width, map.height);
    for (out, &v) in img.data.iter_mut().zip(map.data.iter()) {
        *out = if v > 0.0 {
            colormap((v - lo) / span)
        } else {
            Vector3::zeros()
        };
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut img = Image::new(w, h);
        for px in &mut img.data {
            *px = Vector3::new(rng.random(), rng.random(), rng.random());
        }
        img
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let img = random_image(13, 9, 1);
        let dir = std::env::temp_dir().join("scgs_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.png");
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.width, 13);
        assert_eq!(back.height, 9);
        let bound = 0.5 / 255.0 + 1e-9;
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).amax() <= bound, "quantization error too large");
        }
    }

    #[test]
    fn ppm_round_trip_within_quantization() {
        let img = random_image(7, 5, 2);
        let dir = std::env::temp_dir().join("scgs_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        let bound = 0.5 / 255.0 + 1e-9;
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            assert!((a - b).amax() <= bound);
        }
    }

    #[test]
    fn ascii_ppm_single_pixel() {
        let dir = std::env::temp_dir().join("scgs_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("one.ppm");
        std::fs::write(&path, b"P3 1 1 255 255 0 0").unwrap();
        let img = read_image(&path).unwrap();
        assert_eq!(img.width, 1);
        assert_eq!(img.get(0, 0), Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = std::env::temp_dir().join("scgs_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ppm");
        std::fs::write(&path, b"P6 4 4 255 \x01\x02").unwrap();
        assert!(matches!(read_image(&path), Err(ImageIoError::Parse(_))));
    }

    #[test]
    fn depth_round_trip_is_bit_exact() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut depth = ScalarImage::new(6, 4);
        for v in &mut depth.data {
            *v = rng.random_range(0.0..10.0);
        }
        let dir = std::env::temp_dir().join("scgs_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.bin");
        write_depth(&path, &depth).unwrap();
        let back = read_depth(&path).unwrap();
        assert_eq!(depth, back);
    }

    #[test]
    fn bilinear_interpolates_between_pixels() {
        let mut img = ScalarImage::new(2, 1);
        img.set(0, 0, 1.0);
        img.set(1, 0, 3.0);
        assert!((img.sample_bilinear(0.5, 0.0) - 2.0).abs() < 1e-12);
        assert!((img.sample_bilinear(0.0, 0.0) - 1.0).abs() < 1e-12);
    }
}
