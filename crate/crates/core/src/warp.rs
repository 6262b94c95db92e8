//! Bilinear image warping by affine maps on normalized coordinates.

use candle_core::{DType, Tensor};

use crate::error::Result;
use crate::keypoints::{pixel_center, to_pixel, AffineParams};

/// Warps `(N, C, H, W)` images so that content at `p` moves to `t(p)`.
///
/// Each output pixel `q` samples the input at `t⁻¹(q)` bilinearly; samples
/// falling outside the image read zero. The result is differentiable with
/// respect to `images`. `transforms` holds one map per batch element, or a
/// single map shared by all of them.
pub fn warp_images(images: &Tensor, transforms: &[AffineParams]) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    let per_element: Vec<AffineParams> = match transforms.len() {
        1 => vec![transforms[0]; n],
        len if len == n => transforms.to_vec(),
        len => {
            return Err(crate::JokrError::ShapeMismatch(format!(
                "{len} transforms for a batch of {n}"
            )))
        }
    };
    let hw = h * w;
    let mut idx = vec![vec![0u32; n * hw]; 4];
    let mut wts = vec![vec![0f64; n * hw]; 4];
    for (b, t) in per_element.iter().enumerate() {
        let inv = t.inverse()?;
        for i in 0..h {
            for j in 0..w {
                let p = inv.apply_point([pixel_center(j, w), pixel_center(i, h)]);
                let x = snap(to_pixel(p[0], w));
                let y = snap(to_pixel(p[1], h));
                let x0 = x.floor();
                let y0 = y.floor();
                let fx = x - x0;
                let fy = y - y0;
                let corners = [
                    (y0, x0, (1.0 - fx) * (1.0 - fy)),
                    (y0, x0 + 1.0, fx * (1.0 - fy)),
                    (y0 + 1.0, x0, (1.0 - fx) * fy),
                    (y0 + 1.0, x0 + 1.0, fx * fy),
                ];
                let out = b * hw + i * w + j;
                for (corner, (yy, xx, wt)) in corners.into_iter().enumerate() {
                    if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
                        idx[corner][out] = (yy as usize * w + xx as usize) as u32;
                        wts[corner][out] = wt;
                    }
                }
            }
        }
    }
    let flat = images.reshape((n, c, hw))?;
    let mut out: Option<Tensor> = None;
    for (corner_idx, corner_w) in idx.into_iter().zip(wts) {
        let index = Tensor::from_vec(corner_idx, (n, 1, hw), images.device())?
            .broadcast_as((n, c, hw))?
            .contiguous()?;
        let weight = Tensor::from_vec(corner_w, (n, 1, hw), images.device())?.to_dtype(images.dtype())?;
        let term = flat.gather(&index, 2)?.broadcast_mul(&weight)?;
        out = Some(match out {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    let out = out.expect("four bilinear corners");
    Ok(out.reshape((n, c, h, w))?)
}

// Round-off from the coordinate round trip would otherwise split an exact
// pixel hit across two neighbours.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Warps a heatmap stack and renormalizes each channel to unit mass.
pub fn warp_heatmaps(maps: &Tensor, transforms: &[AffineParams]) -> Result<Tensor> {
    let warped = warp_images(maps, transforms)?;
    let mass = warped.sum_keepdim((2, 3))?;
    let floor = match maps.dtype() {
        DType::F64 => 1e-300,
        _ => 1e-30,
    };
    Ok(warped.broadcast_div(&mass.maximum(floor)?)?)
}
