//! Grad-CAM activation maps, perturbation difference maps with 8-bit
//! min-max rendering, and the saliency-overlap statistic for synthetic
//! data where the true salient mask is known.

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::rng::PrngState;
use crate::tensor::{Element, Tape, Tensor};

/// Non-negative spatial saliency grid at a named layer's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap<E: Element = f32> {
    pub values: Vec<E>,
    /// `values / max`, in [0, 1]; all zeros when the map is identically zero.
    pub normalized: Vec<E>,
    pub h: usize,
    pub w: usize,
    pub class_index: usize,
    pub layer: String,
}

impl<E: Element> ActivationMap<E> {
    fn from_values(values: Vec<E>, h: usize, w: usize, class_index: usize, layer: String) -> Self {
        let mut max = E::ZERO;
        for &v in &values {
            max = max.maximum(v);
        }
        let normalized = if max > E::ZERO {
            values.iter().map(|&v| v / max).collect()
        } else {
            vec![E::ZERO; values.len()]
        };
        ActivationMap {
            values,
            normalized,
            h,
            w,
            class_index,
            layer,
        }
    }

    /// Normalized map scaled to 0..=255 for PGM export.
    pub fn to_gray(&self) -> Vec<u8> {
        self.normalized
            .iter()
            .map(|v| (v.to_f64() * 255.0).round() as u8)
            .collect()
    }
}

/// Channel weights are the spatial mean of d(logit_class)/d(feature);
/// the map is relu of the weighted channel sum, eval mode throughout.
pub fn grad_cam<E: Element>(
    model: &ModelGraph<E>,
    image: &Tensor<E>,
    class_index: usize,
    target_layer: &str,
) -> Result<ActivationMap<E>> {
    if class_index >= model.config().class_count {
        return Err(Error::LabelOutOfRange {
            label: class_index,
            class_count: model.config().class_count,
        });
    }
    let batch = match image.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            Tensor::from_vec(&shape, image.data().to_vec())?
        }
        4 if image.shape()[0] == 1 => image.clone(),
        _ => {
            return Err(Error::RankMismatch {
                op: "grad_cam",
                expected: 3,
                got: image.rank(),
            })
        }
    };

    let mut tape = Tape::new();
    let binding = model.bind(&mut tape, false);
    // gradients flow from the input so intermediate maps are on the path
    let input_id = tape.leaf(batch.with_grad());
    let mut rng = PrngState::new(0);
    let trace = model.forward_traced(&mut tape, &binding, input_id, false, &mut rng)?;

    let feature_id = trace
        .named_id(target_layer)
        .ok_or_else(|| Error::UnknownLayer {
            name: target_layer.to_string(),
            available: model.layer_names(),
        })?;

    let picked = tape.pick(trace.logits, class_index)?;
    tape.backward(picked)?;

    let features = tape.value(feature_id).clone();
    let grads = tape
        .grad(feature_id)
        .expect("feature map on gradient path")
        .to_vec();
    let (_, c, h, w) = features.dims4("grad_cam")?;
    let plane = h * w;
    let inv_plane = E::ONE / E::from_f64(plane as f64);

    let mut map = vec![E::ZERO; plane];
    for ci in 0..c {
        let mut weight = E::ZERO;
        for i in 0..plane {
            weight += grads[ci * plane + i];
        }
        weight *= inv_plane;
        for (m, &f) in map
            .iter_mut()
            .zip(&features.data()[ci * plane..(ci + 1) * plane])
        {
            *m += weight * f;
        }
    }
    for v in &mut map {
        *v = v.maximum(E::ZERO);
    }
    Ok(ActivationMap::from_values(
        map,
        h,
        w,
        class_index,
        target_layer.to_string(),
    ))
}

/// Bilinear upsampling with the aligned-corners convention.
pub fn upsample_map<E: Element>(
    map: &ActivationMap<E>,
    out_h: usize,
    out_w: usize,
) -> Result<ActivationMap<E>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "upsample_map",
            "target extents must be positive",
        ));
    }
    let (h, w) = (map.h, map.w);
    let scale = |out_i: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n <= 1 || in_n <= 1 {
            0.0
        } else {
            out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
        }
    };
    let mut out = vec![E::ZERO; out_h * out_w];
    for oi in 0..out_h {
        let fi = scale(oi, out_h, h);
        let i0 = fi.floor() as usize;
        let i1 = (i0 + 1).min(h - 1);
        let di = E::from_f64(fi - i0 as f64);
        for oj in 0..out_w {
            let fj = scale(oj, out_w, w);
            let j0 = fj.floor() as usize;
            let j1 = (j0 + 1).min(w - 1);
            let dj = E::from_f64(fj - j0 as f64);
            let one = E::ONE;
            let v00 = map.values[i0 * w + j0];
            let v01 = map.values[i0 * w + j1];
            let v10 = map.values[i1 * w + j0];
            let v11 = map.values[i1 * w + j1];
            out[oi * out_w + oj] = v00 * (one - di) * (one - dj)
                + v01 * (one - di) * dj
                + v10 * di * (one - dj)
                + v11 * di * dj;
        }
    }
    Ok(ActivationMap::from_values(
        out,
        out_h,
        out_w,
        map.class_index,
        map.layer.clone(),
    ))
}

/// Signed perturbation and its 8-bit min-max rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMap<E: Element = f32> {
    pub perturbation: Tensor<E>,
    /// `round(255 * (p - min) / (max - min))` with a global min/max;
    /// a constant perturbation renders mid-gray 128.
    pub rendered: Vec<u8>,
}

impl<E: Element> DifferenceMap<E> {
    /// Channel-averaged rendering for single-grid export. Exact for C = 1.
    pub fn to_gray(&self) -> Vec<u8> {
        let shape = self.perturbation.shape();
        let (c, plane) = match shape.len() {
            3 => (shape[0], shape[1] * shape[2]),
            2 => (1, shape[0] * shape[1]),
            _ => (shape[0], self.perturbation.len() / shape[0].max(1)),
        };
        if c == 1 {
            return self.rendered.clone();
        }
        (0..plane)
            .map(|i| {
                let sum: u32 = (0..c).map(|ch| self.rendered[ch * plane + i] as u32).sum();
                (sum as f64 / c as f64).round() as u8
            })
            .collect()
    }
}

pub fn difference_map<E: Element>(x: &Tensor<E>, x_adv: &Tensor<E>) -> Result<DifferenceMap<E>> {
    if x.shape() != x_adv.shape() {
        return Err(Error::ShapeMismatch {
            op: "difference_map",
            axis: "elements",
            expected: x.len(),
            got: x_adv.len(),
        });
    }
    let p: Vec<E> = x_adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| a - b)
        .collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in &p {
        let v = v.to_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let rendered = if hi > lo {
        let span = hi - lo;
        p.iter()
            .map(|v| (255.0 * (v.to_f64() - lo) / span).round() as u8)
            .collect()
    } else {
        vec![128u8; p.len()]
    };
    Ok(DifferenceMap {
        perturbation: Tensor::from_vec(x.shape(), p)?,
        rendered,
    })
}

/// Fraction of total absolute perturbation inside the binary mask.
pub fn saliency_overlap<E: Element>(
    diff: &DifferenceMap<E>,
    mask: &[u8],
    h: usize,
    w: usize,
) -> Result<f64> {
    let shape = diff.perturbation.shape();
    let (sh, sw) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 => (shape[1], shape[2]),
        4 => (shape[2], shape[3]),
        _ => {
            return Err(Error::RankMismatch {
                op: "saliency_overlap",
                expected: 3,
                got: shape.len(),
            })
        }
    };
    if sh != h || sw != w || mask.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "saliency_overlap",
            axis: "spatial",
            expected: sh * sw,
            got: mask.len(),
        });
    }
    if mask.iter().all(|&m| m == 0) {
        return Err(Error::EmptyMask);
    }
    let plane = h * w;
    let channels = diff.perturbation.len() / plane;
    let mut inside = 0.0f64;
    let mut total = 0.0f64;
    for c in 0..channels {
        let channel = &diff.perturbation.data()[c * plane..(c + 1) * plane];
        for (&v, &m) in channel.iter().zip(mask) {
            let v = v.to_f64().abs();
            total += v;
            if m != 0 {
                inside += v;
            }
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(inside / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_perturbation_renders_mid_gray() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f32 * 0.01);
        let d = difference_map(&x, &x).unwrap();
        assert!(d.rendered.iter().all(|&v| v == 128));
    }

    #[test]
    fn two_valued_perturbation_renders_full_range() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let adv = Tensor::from_vec(&[1, 2, 2], vec![0.1f32, -0.1, 0.1, -0.1]).unwrap();
        let d = difference_map(&x, &adv).unwrap();
        let mut seen: Vec<u8> = d.rendered.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 255]);
    }

    #[test]
    fn rendering_invariant_under_constant_shift() {
        let x = Tensor::zeros(&[1, 3, 3]);
        let adv = Tensor::from_fn(&[1, 3, 3], |i| (i as f32 * 0.37).sin() * 0.01);
        let shifted = Tensor::from_fn(&[1, 3, 3], |i| (i as f32 * 0.37).sin() * 0.01 + 0.5);
        let base = Tensor::filled(&[1, 3, 3], 0.5f32);
        let a = difference_map(&x, &adv).unwrap();
        let b = difference_map(&base, &shifted).unwrap();
        // same p in both cases, so identical difference maps, and adding a
        // constant to p cannot change the rendering either
        assert_eq!(a.rendered, b.rendered);
    }

    #[test]
    fn constant_map_upsamples_to_constant() {
        let m = ActivationMap::from_values(vec![0.4f64; 4], 2, 2, 0, "t".into());
        let up = upsample_map(&m, 7, 5).unwrap();
        assert!(up.values.iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn identity_scale_upsample_is_unchanged() {
        let m = ActivationMap::from_values(vec![1.0f64, 2.0, 3.0, 4.0], 2, 2, 0, "t".into());
        let up = upsample_map(&m, 2, 2).unwrap();
        assert_eq!(up.values, m.values);
    }

    #[test]
    fn aligned_corners_preserved_on_2x_upsample() {
        let m = ActivationMap::from_values(vec![1.0f64, 2.0, 3.0, 4.0], 2, 2, 0, "t".into());
        let up = upsample_map(&m, 4, 4).unwrap();
        assert_eq!(up.values[0], 1.0);
        assert_eq!(up.values[3], 2.0);
        assert_eq!(up.values[12], 3.0);
        assert_eq!(up.values[15], 4.0);
    }

    #[test]
    fn upsample_rejects_zero_target() {
        let m = ActivationMap::from_values(vec![0.0f64], 1, 1, 0, "t".into());
        assert!(upsample_map(&m, 0, 3).is_err());
    }

    #[test]
    fn overlap_is_one_when_all_perturbation_inside() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let adv = Tensor::from_vec(&[1, 2, 2], vec![0.3f32, 0.0, 0.0, 0.0]).unwrap();
        let d = difference_map(&x, &adv).unwrap();
        let mask = [1u8, 0, 0, 0];
        assert_eq!(saliency_overlap(&d, &mask, 2, 2).unwrap(), 1.0);
    }

    #[test]
    fn overlap_is_half_for_uniform_magnitude_half_mask() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let adv = Tensor::from_vec(&[1, 2, 2], vec![0.1f32, -0.1, 0.1, -0.1]).unwrap();
        let d = difference_map(&x, &adv).unwrap();
        let mask = [1u8, 1, 0, 0];
        assert!((saliency_overlap(&d, &mask, 2, 2).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        let d = difference_map(&x, &x).unwrap();
        assert!(matches!(
            saliency_overlap(&d, &[0u8; 4], 2, 2),
            Err(Error::EmptyMask)
        ));
    }
}
