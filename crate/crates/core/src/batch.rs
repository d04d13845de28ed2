//! Conversions between faces/factors and batched tensors.

use candle_core::{Device, Tensor};

use crate::data::FaceImage;
use crate::error::{Error, Result};
use crate::factors::{ExternalFactor, EXTERNAL_DIM};

/// Stacks images into an `(N, 3, H, W)` tensor.
pub fn images(faces: &[&FaceImage]) -> Result<Tensor> {
    let size = faces
        .first()
        .ok_or_else(|| Error::Argument("empty image batch".into()))?
        .size();
    let mut data: Vec<f32> = Vec::with_capacity(faces.len() * 3 * size * size);
    for f in faces {
        if f.size() != size {
            return Err(Error::Shape(format!("mixed resolutions {} and {size}", f.size())));
        }
        for c in 0..3 {
            data.extend(f.pixels().iter().skip(c).step_by(3));
        }
    }
    Ok(Tensor::from_vec(data, (faces.len(), 3, size, size), &Device::Cpu)?)
}

/// Splits an `(N, 3, H, W)` tensor back into faces, clamping into `[-1, 1]`.
pub fn to_images(t: &Tensor) -> Result<Vec<FaceImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 || h != w {
        return Err(Error::Shape(format!("cannot view {:?} as RGB images", t.dims())));
    }
    let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plane = h * w;
    (0..n)
        .map(|i| {
            let base = i * 3 * plane;
            let mut px = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for ch in 0..3 {
                    px.push(data[base + ch * plane + p].clamp(-1.0, 1.0));
                }
            }
            FaceImage::new(h, px)
        })
        .collect()
}

pub fn rows(rows: &[&[f32]]) -> Result<Tensor> {
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("ragged rows".into()));
    }
    let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (rows.len(), width), &Device::Cpu)?)
}

pub fn externals(es: &[&ExternalFactor]) -> Result<Tensor> {
    let data: Vec<f32> = es.iter().flat_map(|e| e.as_f32()).collect();
    Ok(Tensor::from_vec(data, (es.len(), EXTERNAL_DIM), &Device::Cpu)?)
}

pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_layout_round_trips() {
        let px: Vec<f32> = (0..16 * 16 * 3).map(|i| ((i % 7) as f32) / 7.0 - 0.5).collect();
        let face = FaceImage::new(16, px).unwrap();
        let t = images(&[&face, &face]).unwrap();
        assert_eq!(t.dims(), &[2, 3, 16, 16]);
        let back = to_images(&t).unwrap();
        assert_eq!(back[1], face);
    }
}
