use super::FeatureMap;
use crate::error::{Error, Result};

/// Bilinear resampling of the descriptor grid by an integer `factor`.
///
/// Output cell `k` along an axis samples the input at fractional index
/// `(k + 0.5) / factor - 0.5` (clamped), so output and input patch centres
/// coincide in pixel space. The effective patch size becomes `P / factor`.
pub fn upsample_features(features: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(Error::invalid("upsampling factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(features.clone());
    }
    let p = features.patch_size();
    if p % factor != 0 {
        return Err(Error::invalid(format!(
            "patch size {p} is not divisible by upsampling factor {factor}"
        )));
    }
    let (gh, gw, e) = (features.grid_h(), features.grid_w(), features.embed_dim());
    let (oh, ow) = (gh * factor, gw * factor);
    let sample = |k: usize, n: usize| -> (usize, usize, f64) {
        let pos = ((k as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let src = features.data();
    let mut data = vec![0f32; oh * ow * e];
    for r in 0..oh {
        let (r0, r1, fr) = sample(r, gh);
        for c in 0..ow {
            let (c0, c1, fc) = sample(c, gw);
            let weights = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c1, (1.0 - fr) * fc),
                (r1, c0, fr * (1.0 - fc)),
                (r1, c1, fr * fc),
            ];
            let out = &mut data[(r * ow + c) * e..(r * ow + c + 1) * e];
            for (d, slot) in out.iter_mut().enumerate() {
                let v: f64 = weights
                    .iter()
                    .map(|&(rr, cc, w)| w * src[(rr * gw + cc) * e + d] as f64)
                    .sum();
                *slot = v as f32;
            }
        }
    }
    FeatureMap::new(oh, ow, e, p / factor, data)
}
