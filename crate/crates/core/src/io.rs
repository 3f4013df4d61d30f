//! File formats.
//!
//! All binary containers are little-endian and start with a four-byte magic
//! followed by a `u32` version:
//!
//! - `.feat` (`EPIF`): `grid_h, grid_w, E, P: u32`, `dtype: u8 = 1` (f32),
//!   then `grid_h * grid_w * E` f32 values, patch-major with the descriptor innermost.
//! - `.dpt` (`EPID`): `H, W: u32`, then `H * W` f32 values row-major; NaN is invalid.
//! - checkpoint (`EPIW`): `E, heads, mlp_ratio: u32`, `ln_eps: f64`,
//!   `count: u32`, then per tensor `name_len: u32`, UTF-8 name, `dtype: u8 = 2` (f64),
//!   `ndim: u32`, `ndim` dims as `u32`, then the values.
//!
//! Writers go through a temporary file and a rename so readers never see a
//! partially written file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::embedding::{AdaptationParams, BlockConfig, FeatureMap, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::geometry::Pixel;
use crate::raster::{DepthMap, Image};

pub const FEATURE_MAGIC: &[u8; 4] = b"EPIF";
pub const DEPTH_MAGIC: &[u8; 4] = b"EPID";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPIW";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

/// Writes `bytes` to `path` via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(Error::format(
                field,
                format!("file truncated: need {n} bytes at offset {}, {remaining} left", self.pos),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                "magic",
                format!(
                    "expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        Ok(())
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        let b = self.take(8, field)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::format("version", format!("unsupported version {v}")));
        }
        Ok(())
    }

    /// Reads exactly `count` elements of `width` bytes; the payload must end the file.
    fn payload(&mut self, count: usize, width: usize, field: &str) -> Result<&'a [u8]> {
        let expected = count
            .checked_mul(width)
            .ok_or_else(|| Error::format(field, "declared size overflows"))?;
        let remaining = self.buf.len() - self.pos;
        if remaining != expected {
            return Err(Error::format(
                field,
                format!("payload length is {remaining} bytes, header implies {expected}"),
            ));
        }
        self.take(expected, field)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                "trailer",
                format!("{} unexpected trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize, field: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{field} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_features(f: &FeatureMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(25 + f.data().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_u32(&mut out, f.grid_h(), "grid_h")?;
    push_u32(&mut out, f.grid_w(), "grid_w")?;
    push_u32(&mut out, f.embed_dim(), "embed_dim")?;
    push_u32(&mut out, f.patch_size(), "patch_size")?;
    out.push(DTYPE_F32);
    for v in f.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version()?;
    let gh = r.u32("grid_h")? as usize;
    let gw = r.u32("grid_w")? as usize;
    let e = r.u32("embed_dim")? as usize;
    let p = r.u32("patch_size")? as usize;
    for (name, v) in [("grid_h", gh), ("grid_w", gw), ("embed_dim", e), ("patch_size", p)] {
        if v == 0 {
            return Err(Error::format(name, "must be positive"));
        }
    }
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format("dtype", format!("unsupported dtype {dtype}")));
    }
    let payload = r.payload(gh * gw * e, 4, "payload")?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("payload", "non-finite feature value"));
    }
    FeatureMap::new(gh, gw, e, p, data)
}

pub fn write_features(f: &FeatureMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_features(f)?)
}

pub fn read_features(path: &Path) -> Result<FeatureMap> {
    decode_features(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn encode_depth(d: &DepthMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + d.data().len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_u32(&mut out, d.height(), "height")?;
    push_u32(&mut out, d.width(), "width")?;
    for &v in d.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    let mut r = Reader::new(bytes);
    r.magic(DEPTH_MAGIC)?;
    r.version()?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if h == 0 || w == 0 {
        return Err(Error::format("shape", "depth dimensions must be positive"));
    }
    let payload = r.payload(h * w, 4, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    DepthMap::new(h, w, data).map_err(|e| Error::format("payload", e.to_string()))
}

pub fn write_depth(d: &DepthMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_depth(d)?)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    decode_depth(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn encode_checkpoint(p: &AdaptationParams) -> Result<Vec<u8>> {
    let cfg = p.config();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_u32(&mut out, cfg.embed_dim, "embed_dim")?;
    push_u32(&mut out, cfg.heads, "heads")?;
    push_u32(&mut out, cfg.mlp_ratio, "mlp_ratio")?;
    out.extend_from_slice(&cfg.ln_eps.to_le_bytes());
    push_u32(&mut out, PARAM_NAMES.len(), "count")?;
    for ((name, shape), data) in PARAM_NAMES
        .iter()
        .zip(AdaptationParams::shapes(cfg))
        .zip(p.tensors())
    {
        push_u32(&mut out, name.len(), "name_len")?;
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        push_u32(&mut out, shape.len(), "ndim")?;
        for d in shape {
            push_u32(&mut out, d, "dim")?;
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AdaptationParams> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let cfg = BlockConfig {
        embed_dim: r.u32("embed_dim")? as usize,
        heads: r.u32("heads")? as usize,
        mlp_ratio: r.u32("mlp_ratio")? as usize,
        ln_eps: r.f64("ln_eps")?,
    };
    cfg.validate().map_err(|e| Error::format("config", e.to_string()))?;
    let count = r.u32("count")? as usize;
    if count != PARAM_NAMES.len() {
        return Err(Error::format("count", format!("expected {} tensors, found {count}", PARAM_NAMES.len())));
    }
    let shapes = AdaptationParams::shapes(&cfg);
    let mut tensors = Vec::with_capacity(count);
    for (expected_name, shape) in PARAM_NAMES.iter().zip(shapes) {
        let len = r.u32("name_len")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("name", "tensor name is not UTF-8"))?;
        if name != *expected_name {
            return Err(Error::format("name", format!("expected tensor {expected_name}, found {name}")));
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::format(format!("{name}.dtype"), format!("unsupported dtype {dtype}")));
        }
        let ndim = r.u32("ndim")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::format(
                format!("{name}.shape"),
                format!("expected {shape:?}, found {dims:?}"),
            ));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8, name)?;
        tensors.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    r.finish()?;
    AdaptationParams::from_tensors(cfg, tensors).map_err(|e| Error::format("tensors", e.to_string()))
}

pub fn write_checkpoint(p: &AdaptationParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(p)?)
}

pub fn read_checkpoint(path: &Path) -> Result<AdaptationParams> {
    decode_checkpoint(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { field, detail } => Error::Format {
            field,
            detail: format!("{detail} ({})", path.display()),
        },
        other => other,
    }
}

/// Loads an 8-bit PNG (or any format the decoder knows) as RGB in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                detail: other.to_string(),
            },
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, data)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &raw,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::Image {
        path: PathBuf::new(),
        detail: e.to_string(),
    })?;
    Ok(out)
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

/// `us,vs,ut,vt` rows with six decimals.
pub fn correspondences_csv(pairs: &[(Pixel, Pixel)]) -> String {
    let mut s = String::from("us,vs,ut,vt\n");
    for (a, b) in pairs {
        s.push_str(&format!("{:.6},{:.6},{:.6},{:.6}\n", a.u, a.v, b.u, b.v));
    }
    s
}

/// A parsed correspondence row; `score` is absent in ground-truth dumps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsvMatch {
    pub p_s: Pixel,
    pub p_t: Pixel,
    pub score: Option<f64>,
}

/// Parses `us,vs,ut,vt[,score]` CSV text. Errors name the 1-based line.
pub fn parse_match_csv(text: &str, source: &Path) -> Result<Vec<CsvMatch>> {
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l.trim().to_string())
        .ok_or_else(|| Error::format(format!("{}:1", source.display()), "empty file"))?;
    let with_score = match header.as_str() {
        "us,vs,ut,vt" => false,
        "us,vs,ut,vt,score" => true,
        _ => {
            return Err(Error::format(
                format!("{}:1", source.display()),
                format!("unexpected header {header:?}"),
            ))
        }
    };
    let width = if with_score { 5 } else { 4 };
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::format(format!("{}:{}", source.display(), i + 1), detail);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(bad(format!("expected {width} fields, found {}", fields.len())));
        }
        let nums = fields
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| bad(format!("non-numeric value in {line:?}")))?;
        out.push(CsvMatch {
            p_s: Pixel::new(nums[0], nums[1]),
            p_t: Pixel::new(nums[2], nums[3]),
            score: with_score.then(|| nums[4]),
        });
    }
    Ok(out)
}

pub fn read_match_csv(path: &Path) -> Result<Vec<CsvMatch>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_match_csv(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_map(gh: usize, gw: usize, e: usize, s: u64) -> FeatureMap {
        let mut rng = seed::rng(s);
        let data = (0..gh * gw * e).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        FeatureMap::new(gh, gw, e, 14, data).unwrap()
    }

    #[test]
    fn feature_round_trip_many_shapes() {
        let mut rng = seed::rng(99);
        for i in 0..100 {
            let f = random_map(rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..40), i);
            let back = decode_features(&encode_features(&f).unwrap()).unwrap();
            assert_eq!(back.data().len(), f.data().len());
            assert!(back.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(back, f);
        }
    }

    #[test]
    fn truncated_and_short_payload_are_format_errors() {
        let f = random_map(2, 2, 768, 1);
        let bytes = encode_features(&f).unwrap();
        for cut in [0, 3, 10, 24] {
            assert!(matches!(decode_features(&bytes[..cut]), Err(Error::Format { .. })));
        }
        match decode_features(&bytes[..bytes.len() - 8]) {
            Err(Error::Format { field, detail }) => {
                assert_eq!(field, "payload");
                assert!(detail.contains("payload length"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::Format { field, .. }) if field == "magic"));
        let mut bad = bytes;
        bad[4] = 7;
        assert!(matches!(decode_features(&bad), Err(Error::Format { field, .. }) if field == "version"));
    }

    #[test]
    fn depth_round_trip_keeps_invalid() {
        let d = DepthMap::new(2, 3, vec![1.0, f64::NAN, 2.5, 3.0, 4.0, f64::NAN]).unwrap();
        let back = decode_depth(&encode_depth(&d).unwrap()).unwrap();
        assert_eq!(back, d);
        let bytes = encode_depth(&d).unwrap();
        assert_eq!(&bytes[..4], b"EPID");
        assert!(decode_depth(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let p = AdaptationParams::init(BlockConfig::new(8, 2), 3).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..4 * 5 * 3).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let img = Image::new(4, 5, data).unwrap();
        let path = dir.path().join("a.png");
        write_png(&img, &path).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
        assert!(matches!(read_png(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn match_csv_parsing() {
        let text = "us,vs,ut,vt,score\n1.000000,2.000000,3.000000,4.000000,0.990000\n";
        let rows = parse_match_csv(text, Path::new("m.csv")).unwrap();
        assert_eq!(rows[0].score, Some(0.99));
        let bad = "us,vs,ut,vt\n1,2,3,4\n1,2,x,4\n";
        match parse_match_csv(bad, Path::new("m.csv")) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "m.csv:3"),
            other => panic!("unexpected {other:?}"),
        }
        let csv = correspondences_csv(&[(Pixel::new(1.0, 2.0), Pixel::new(3.5, 4.25))]);
        assert_eq!(csv, "us,vs,ut,vt\n1.000000,2.000000,3.500000,4.250000\n");
    }

    proptest! {
        #[test]
        fn decoding_arbitrary_bytes_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode_features(&bytes);
            let _ = decode_depth(&bytes);
            let _ = decode_checkpoint(&bytes);
        }
    }
}
