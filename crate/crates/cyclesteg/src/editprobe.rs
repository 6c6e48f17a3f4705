//! Edit experiments: paste a synthetic tree into a photo, extract the map
//! delta, recombine deltas, scan the linear regime, and transfer deltas
//! across images.
//!
//! Photos enter in [0,1]; maps and deltas are kept in model space [-1,1].
//! Feature scores are reported in [0,1] pixel units.

use crate::error::{Error, Result};
use crate::tensor::{chw, Tensor};
use crate::trainer::to_model;

/// Margin added around the paste circle when splitting local from non-local
/// energy: patch edges blur under convolution.
pub const LOCALITY_MARGIN: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EditSpec {
    /// Paste center.
    pub cx: usize,
    pub cy: usize,
    pub radius: usize,
}

/// Half-open pixel box [x0,x1) x [y0,y1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn expand(&self, margin: usize, h: usize, w: usize) -> BBox {
        BBox {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(w),
            y1: (self.y1 + margin).min(h),
        }
    }
}

impl EditSpec {
    /// Tight box around the paste circle.
    pub fn bbox(&self) -> BBox {
        BBox {
            x0: self.cx - self.radius,
            y0: self.cy - self.radius,
            x1: self.cx + self.radius + 1,
            y1: self.cy + self.radius + 1,
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.cx < self.radius
            || self.cy < self.radius
            || self.cx + self.radius + 1 > w
            || self.cy + self.radius + 1 > h
        {
            return Err(Error::InvalidConfig(format!(
                "paste at ({},{}) radius {} leaves a {h}x{w} image",
                self.cx, self.cy, self.radius
            )));
        }
        Ok(())
    }
}

/// Paste a round tree canopy (dark green, radially shaded) into a [0,1]
/// photo. The result differs from the input only inside the paste circle.
pub fn paste_feature(photo01: &Tensor, spec: &EditSpec) -> Result<Tensor> {
    let (c, h, w) = (photo01.shape()[0], photo01.shape()[1], photo01.shape()[2]);
    if c != 3 {
        return Err(Error::ShapeMismatch {
            context: "paste_feature",
            expected: vec![3, h, w],
            got: photo01.shape().to_vec(),
        });
    }
    spec.validate(h, w)?;
    let mut out = photo01.clone();
    let r = spec.radius as f64;
    for dy in -(spec.radius as i64)..=spec.radius as i64 {
        for dx in -(spec.radius as i64)..=spec.radius as i64 {
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 > r * r {
                continue;
            }
            let y = (spec.cy as i64 + dy) as usize;
            let x = (spec.cx as i64 + dx) as usize;
            // darker rim, lighter crown
            let shade = 1.0 - 0.5 * (d2 / (r * r));
            let color = [0.08 + 0.10 * shade, 0.22 + 0.18 * shade, 0.07 + 0.08 * shade];
            for (ci, &col) in color.iter().enumerate() {
                out.data_mut()[chw(ci, y, x, h, w)] = col;
            }
        }
    }
    Ok(out)
}

/// Delta between the maps of an edited and an unedited photo, with norms and
/// the locality split. Maps are stored so composites can reuse them exactly.
#[derive(Clone, Debug)]
pub struct DeltaReport {
    pub delta: Tensor,
    pub linf: f64,
    pub l1: f64,
    /// Fraction of |delta| mass outside the (margin-expanded) paste box.
    pub nonlocality: f64,
    pub bbox: BBox,
    pub map_base: Tensor,
    pub map_edited: Tensor,
}

/// Delta = Fx' - Fx for a paste described by `bbox` (tight box; the margin
/// is applied internally for the locality split).
pub fn map_delta(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    photo01: &Tensor,
    edited01: &Tensor,
    bbox: BBox,
) -> Result<DeltaReport> {
    if !photo01.same_shape(edited01) {
        return Err(Error::ShapeMismatch {
            context: "map_delta",
            expected: photo01.shape().to_vec(),
            got: edited01.shape().to_vec(),
        });
    }
    let map_base = f(&to_model(photo01))?;
    let map_edited = f(&to_model(edited01))?;
    let delta = map_edited.sub(&map_base)?;
    let (h, w) = (delta.shape()[1], delta.shape()[2]);
    let expanded = bbox.expand(LOCALITY_MARGIN, h, w);
    let mut inside = 0.0;
    let mut total = 0.0;
    let (ch, _, _) = (delta.shape()[0], h, w);
    for ci in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let v = delta.data()[chw(ci, y, x, h, w)].abs();
                total += v;
                if expanded.contains(y, x) {
                    inside += v;
                }
            }
        }
    }
    let nonlocality = if total > 0.0 { (total - inside) / total } else { 0.0 };
    Ok(DeltaReport {
        linf: delta.max_abs(),
        l1: delta.mean_abs(),
        nonlocality,
        bbox,
        map_base,
        map_edited,
        delta,
    })
}

/// Mean L1 between two model-space images inside a box, in [0,1] units.
pub fn site_score(a: &Tensor, b: &Tensor, bbox: &BBox) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut acc = 0.0f64;
    let mut cnt = 0.0f64;
    for ci in 0..c {
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                acc += (a.data()[chw(ci, y, x, h, w)] - b.data()[chw(ci, y, x, h, w)]).abs();
                cnt += 1.0;
            }
        }
    }
    acc / cnt.max(1.0) / 2.0
}

#[derive(Clone, Debug)]
pub struct CompositeResult {
    pub image: Tensor,
    /// Per-delta feature score inside its paste box, against G(base_map).
    pub site_scores: Vec<f64>,
}

/// G(base_map + sum of (optionally box-masked) deltas). `mask_to_box` may be
/// empty (no masking) or give one flag per delta. A single unmasked delta
/// whose base map equals `base_map` short-circuits to G(map_edited), making
/// the identity G(Fx + (Fx' - Fx)) = G(Fx') hold exactly.
pub fn composite_reconstruct(
    g: &dyn Fn(&Tensor) -> Result<Tensor>,
    base_map: &Tensor,
    deltas: &[&DeltaReport],
    mask_to_box: &[bool],
) -> Result<CompositeResult> {
    if !mask_to_box.is_empty() && mask_to_box.len() != deltas.len() {
        return Err(Error::InvalidConfig(
            "mask_to_box must be empty or one flag per delta".into(),
        ));
    }
    let masked = |i: usize| mask_to_box.get(i).copied().unwrap_or(false);
    let image = if deltas.len() == 1 && !masked(0) && *base_map == deltas[0].map_base {
        g(&deltas[0].map_edited)?
    } else {
        let (h, w) = (base_map.shape()[1], base_map.shape()[2]);
        let mut acc = base_map.clone();
        for (i, d) in deltas.iter().enumerate() {
            if !acc.same_shape(&d.delta) {
                return Err(Error::ShapeMismatch {
                    context: "composite_reconstruct",
                    expected: acc.shape().to_vec(),
                    got: d.delta.shape().to_vec(),
                });
            }
            let keep = d.bbox.expand(LOCALITY_MARGIN, h, w);
            let c = acc.shape()[0];
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        if !masked(i) || keep.contains(y, x) {
                            acc.data_mut()[chw(ci, y, x, h, w)] +=
                                d.delta.data()[chw(ci, y, x, h, w)];
                        }
                    }
                }
            }
        }
        g(&acc)?
    };
    let baseline = g(base_map)?;
    let site_scores = deltas
        .iter()
        .map(|d| site_score(&image, &baseline, &d.bbox))
        .collect();
    Ok(CompositeResult { image, site_scores })
}

/// Max relative deviation of G(base + eps * delta) from per-pixel linearity
/// in eps. Deviation = max over the grid of |residual|_1 / |G(base+delta) -
/// G(base)|_1 after a least-squares linear fit per pixel. A zero delta (or a
/// G that ignores it) returns 0 by convention.
pub fn linearity_scan(
    g: &dyn Fn(&Tensor) -> Result<Tensor>,
    base_map: &Tensor,
    delta: &Tensor,
    eps_grid: &[f64],
) -> Result<f64> {
    if eps_grid.len() < 3 {
        return Err(Error::InvalidConfig("eps grid needs >= 3 points".into()));
    }
    let eps_max = eps_grid.iter().cloned().fold(f64::NAN, f64::max);
    let span = eps_max - eps_grid.iter().cloned().fold(f64::NAN, f64::min);
    if !(span > 0.0) {
        return Err(Error::InvalidConfig("degenerate eps grid".into()));
    }
    let outputs: Vec<Tensor> = eps_grid
        .iter()
        .map(|&e| g(&base_map.add(&delta.scale(e))?))
        .collect::<Result<Vec<_>>>()?;
    // full-excursion reference; for the default [0,1] grid this is
    // |G(base+delta) - G(base)| and it makes the scan invariant to
    // rescaling delta against the grid
    let denom = g(&base_map.add(&delta.scale(eps_max))?)?
        .sub(&g(base_map)?)?
        .data()
        .iter()
        .map(|v| v.abs())
        .sum::<f64>();
    if denom == 0.0 {
        return Ok(0.0);
    }
    // least-squares line per pixel across the grid
    let m = eps_grid.len() as f64;
    let se: f64 = eps_grid.iter().sum();
    let see: f64 = eps_grid.iter().map(|e| e * e).sum();
    let det = m * see - se * se;
    let numel = base_map.numel();
    let mut worst = 0.0f64;
    let mut residual_l1 = vec![0.0f64; eps_grid.len()];
    for p in 0..numel {
        let mut sy = 0.0;
        let mut sey = 0.0;
        for (o, &e) in outputs.iter().zip(eps_grid) {
            let y = o.data()[p];
            sy += y;
            sey += e * y;
        }
        let b = (m * sey - se * sy) / det;
        let a = (sy - b * se) / m;
        for ((o, &e), r) in outputs.iter().zip(eps_grid).zip(residual_l1.iter_mut()) {
            *r += (o.data()[p] - (a + b * e)).abs();
        }
    }
    for r in residual_l1 {
        worst = worst.max(r / denom);
    }
    Ok(worst)
}

/// Add a delta to a different map: G(other + delta) plus the feature score at
/// the original paste site (against G(other)).
pub fn cross_image_transfer(
    g: &dyn Fn(&Tensor) -> Result<Tensor>,
    other_map: &Tensor,
    delta: &DeltaReport,
) -> Result<(Tensor, f64)> {
    if !other_map.same_shape(&delta.delta) {
        return Err(Error::ShapeMismatch {
            context: "cross_image_transfer",
            expected: other_map.shape().to_vec(),
            got: delta.delta.shape().to_vec(),
        });
    }
    let recon = g(&other_map.add(&delta.delta)?)?;
    let score = site_score(&recon, &g(other_map)?, &delta.bbox);
    Ok((recon, score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{render_photo, sample_scene, SceneGenParams};

    fn id(x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn photo() -> Tensor {
        render_photo(&sample_scene(42, &SceneGenParams::default()))
    }

    #[test]
    fn paste_difference_supported_inside_bbox() {
        let x = photo();
        let spec = EditSpec { cx: 24, cy: 24, radius: 5 };
        let xp = paste_feature(&x, &spec).unwrap();
        let bbox = spec.bbox();
        let (h, w) = (48, 48);
        for ci in 0..3 {
            for y in 0..h {
                for x_ in 0..w {
                    let d = xp.data()[chw(ci, y, x_, h, w)] - x.data()[chw(ci, y, x_, h, w)];
                    if !bbox.contains(y, x_) {
                        assert_eq!(d, 0.0, "leak at ({y},{x_})");
                    }
                }
            }
        }
    }

    #[test]
    fn disjoint_pastes_commute() {
        let x = photo();
        let a = EditSpec { cx: 10, cy: 10, radius: 4 };
        let b = EditSpec { cx: 36, cy: 36, radius: 4 };
        let ab = paste_feature(&paste_feature(&x, &a).unwrap(), &b).unwrap();
        let ba = paste_feature(&paste_feature(&x, &b).unwrap(), &a).unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn pasted_feature_is_visible() {
        let x = photo();
        let spec = EditSpec { cx: 24, cy: 24, radius: 5 };
        let xp = paste_feature(&x, &spec).unwrap();
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for i in 0..x.numel() {
            if x.data()[i] != xp.data()[i] {
                acc += (x.data()[i] - xp.data()[i]).abs();
                cnt += 1.0;
            }
        }
        assert!(acc / cnt >= 0.05, "mean change {}", acc / cnt);
    }

    #[test]
    fn paste_out_of_bounds_rejected() {
        let x = photo();
        assert!(paste_feature(&x, &EditSpec { cx: 2, cy: 24, radius: 5 }).is_err());
        assert!(paste_feature(&x, &EditSpec { cx: 24, cy: 46, radius: 5 }).is_err());
    }

    #[test]
    fn map_delta_of_unedited_photo_is_zero() {
        let x = photo();
        let spec = EditSpec { cx: 24, cy: 24, radius: 5 };
        let rep = map_delta(&id, &x, &x, spec.bbox()).unwrap();
        assert_eq!(rep.l1, 0.0);
        assert_eq!(rep.linf, 0.0);
        assert_eq!(rep.nonlocality, 0.0);
    }

    #[test]
    fn identity_stub_delta_is_local() {
        let x = photo();
        let spec = EditSpec { cx: 24, cy: 24, radius: 5 };
        let xp = paste_feature(&x, &spec).unwrap();
        let rep = map_delta(&id, &x, &xp, spec.bbox()).unwrap();
        assert!(rep.l1 > 0.0);
        assert_eq!(rep.nonlocality, 0.0);
    }

    #[test]
    fn nonlocality_ratio_stays_in_unit_interval() {
        // a stub that smears everything: global mean image
        let smear = |x: &Tensor| -> Result<Tensor> {
            let m = x.data().iter().sum::<f64>() / x.numel() as f64;
            Ok(Tensor::full(x.shape(), m))
        };
        let x = photo();
        let spec = EditSpec { cx: 24, cy: 24, radius: 5 };
        let xp = paste_feature(&x, &spec).unwrap();
        let rep = map_delta(&smear, &x, &xp, spec.bbox()).unwrap();
        assert!((0.0..=1.0).contains(&rep.nonlocality));
        assert!(rep.nonlocality > 0.9, "smeared delta should be nonlocal");
    }

    #[test]
    fn composite_with_no_deltas_is_exact() {
        let tanh_stub = |x: &Tensor| Ok(x.map(f64::tanh));
        let base = to_model(&photo());
        let r = composite_reconstruct(&tanh_stub, &base, &[], &[]).unwrap();
        assert_eq!(r.image, base.map(f64::tanh));
        assert!(r.site_scores.is_empty());
    }

    #[test]
    fn single_unmasked_delta_reproduces_direct_evaluation_exactly() {
        // a nonlinear stub: float addition does not round-trip, so this
        // equality only holds through the stored-map path
        let tanh_stub = |x: &Tensor| Ok(x.map(f64::tanh));
        let x = photo();
        let spec = EditSpec { cx: 24, cy: 24, radius: 5 };
        let xp = paste_feature(&x, &spec).unwrap();
        let nonlinear_f = |t: &Tensor| Ok(t.map(|v| (1.3 * v).sin()));
        let rep = map_delta(&nonlinear_f, &x, &xp, spec.bbox()).unwrap();
        let r = composite_reconstruct(&tanh_stub, &rep.map_base, &[&rep], &[]).unwrap();
        let direct = tanh_stub(&rep.map_edited).unwrap();
        assert_eq!(r.image, direct);
    }

    #[test]
    fn linearity_zero_for_affine_stub() {
        let affine = |x: &Tensor| Ok(x.scale(0.7).map(|v| v + 0.1));
        let base = to_model(&photo());
        let delta = Tensor::from_fn(base.shape(), |i| ((i * 7) % 13) as f64 / 13.0 - 0.5);
        let dev = linearity_scan(&affine, &base, &delta, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        assert!(dev <= 1e-6, "deviation {dev}");
    }

    #[test]
    fn linearity_zero_delta_is_zero_by_convention() {
        let tanh_stub = |x: &Tensor| Ok(x.map(f64::tanh));
        let base = to_model(&photo());
        let delta = Tensor::zeros(base.shape());
        let dev = linearity_scan(&tanh_stub, &base, &delta, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn linearity_invariant_under_reparameterization() {
        let tanh_stub = |x: &Tensor| Ok(x.map(f64::tanh));
        let base = to_model(&photo());
        let delta = Tensor::from_fn(base.shape(), |i| ((i * 11) % 17) as f64 / 17.0 - 0.5);
        let grid: Vec<f64> = vec![0.0, 0.25, 0.5, 0.75, 1.0];
        let a = linearity_scan(&tanh_stub, &base, &delta, &grid).unwrap();
        let scaled: Vec<f64> = grid.iter().map(|e| e / 2.0).collect();
        let b = linearity_scan(&tanh_stub, &base, &delta.scale(2.0), &scaled).unwrap();
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }

    #[test]
    fn linearity_rejects_bad_grids() {
        let base = to_model(&photo());
        let delta = Tensor::zeros(base.shape());
        assert!(linearity_scan(&id, &base, &delta, &[0.0, 1.0]).is_err());
        assert!(linearity_scan(&id, &base, &delta, &[0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn transfer_of_zero_delta_is_identity() {
        let x = photo();
        let spec = EditSpec { cx: 24, cy: 24, radius: 5 };
        let rep = map_delta(&id, &x, &x, spec.bbox()).unwrap();
        let other = to_model(&render_photo(&sample_scene(7, &SceneGenParams::default())));
        let (recon, score) = cross_image_transfer(&id, &other, &rep).unwrap();
        assert_eq!(recon, other);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn identity_stub_transfer_score_is_delta_box_energy() {
        let x = photo();
        let spec = EditSpec { cx: 24, cy: 24, radius: 5 };
        let xp = paste_feature(&x, &spec).unwrap();
        let rep = map_delta(&id, &x, &xp, spec.bbox()).unwrap();
        let other = to_model(&render_photo(&sample_scene(7, &SceneGenParams::default())));
        let (_, score) = cross_image_transfer(&id, &other, &rep).unwrap();
        let expected = site_score(&rep.map_edited, &rep.map_base, &rep.bbox);
        assert!((score - expected).abs() < 1e-15);
    }
}
