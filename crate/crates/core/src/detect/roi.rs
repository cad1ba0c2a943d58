//! Quantized max RoI pooling.

use super::geometry::BBox;
use super::DetectError;
use crate::tensor::Tensor;

/// Pooled features plus, per output cell, the flat feature index that won the max.
#[derive(Debug, Clone)]
pub struct RoiPoolOutput {
    pub pooled: Tensor,
    pub argmax: Vec<usize>,
}

/// Pools a `[C, H, W]` feature map over `region` (feature-map coordinates) into `[C, k, k]`.
///
/// The region is clipped to the map and split into `k x k` equal sub-intervals;
/// each bin covers the cells from `floor(start)` to `ceil(end)`, at least one cell.
pub fn roi_pool(features: &Tensor, region: &BBox, k: usize) -> Result<RoiPoolOutput, DetectError> {
    let shape = features.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let r = region.clip(w as f64, h as f64);
    if !(r.width() > 0.0 && r.height() > 0.0) || k == 0 {
        return Err(DetectError::EmptyBox);
    }
    let xs = bin_bounds(r.x_min, r.width(), k, w);
    let ys = bin_bounds(r.y_min, r.height(), k, h);
    let data = features.data();
    let mut pooled = Tensor::zeros(&[c, k, k]);
    let mut argmax = vec![0usize; c * k * k];
    let out = pooled.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        for (by, &(y0, y1)) in ys.iter().enumerate() {
            for (bx, &(x0, x1)) in xs.iter().enumerate() {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + y0 * w + x0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = base + y * w + x;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * k + by) * k + bx;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok(RoiPoolOutput { pooled, argmax })
}

fn bin_bounds(start: f64, extent: f64, k: usize, limit: usize) -> Vec<(usize, usize)> {
    let step = extent / k as f64;
    (0..k)
        .map(|i| {
            let lo = (start + i as f64 * step).floor().max(0.0) as usize;
            let hi = (start + (i + 1) as f64 * step).ceil() as usize;
            let lo = lo.min(limit - 1);
            let hi = hi.clamp(lo + 1, limit);
            (lo, hi)
        })
        .collect()
}

/// Routes pooled-output gradients back to the winning feature cells.
pub fn roi_pool_backward(grad_pooled: &[f64], argmax: &[usize], grad_features: &mut [f64]) {
    for (g, &idx) in grad_pooled.iter().zip(argmax) {
        grad_features[idx] += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_map_at_native_size_is_identity() {
        let f = Tensor::from_vec(&[2, 3, 3], (0..18).map(|v| (v as f64 * 7.3).sin()).collect());
        let out = roi_pool(&f, &BBox::new(0.0, 0.0, 3.0, 3.0), 3).unwrap();
        assert_eq!(out.pooled.data(), f.data());
    }

    #[test]
    fn constant_map_gives_constant_output() {
        let f = Tensor::from_vec(&[1, 5, 4], vec![2.5; 20]);
        let out = roi_pool(&f, &BBox::new(0.3, 1.2, 3.1, 4.9), 2).unwrap();
        assert!(out.pooled.data().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn empty_after_clipping() {
        let f = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(roi_pool(&f, &BBox::new(5.0, 0.0, 7.0, 2.0), 2), Err(DetectError::EmptyBox)));
        assert!(matches!(roi_pool(&f, &BBox::new(1.0, 1.0, 1.0, 2.0), 2), Err(DetectError::EmptyBox)));
    }

    #[test]
    fn tiny_region_covers_one_cell() {
        let f = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = roi_pool(&f, &BBox::new(1.2, 1.2, 1.4, 1.4), 2).unwrap();
        assert_eq!(out.pooled.data(), &[4.0; 4]);
    }

    #[test]
    fn backward_scatters_to_argmax() {
        let f = Tensor::from_vec(&[1, 2, 2], vec![1.0, 5.0, 3.0, 4.0]);
        let out = roi_pool(&f, &BBox::new(0.0, 0.0, 2.0, 2.0), 1).unwrap();
        let mut g = vec![0.0; 4];
        roi_pool_backward(&[2.0], &out.argmax, &mut g);
        assert_eq!(g, vec![0.0, 2.0, 0.0, 0.0]);
    }
}
