//! Segmentation and perfusion evaluation: ROC AUC, Dice/Jaccard, HD95 and
//! Bland-Altman volume agreement.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::lesion::binarize;
use crate::math;
use crate::volume::{BinaryMask3D, ScalarMap3D};

/// Voxel-level AUC for separating `gt` from the rest of the valid mask,
/// scoring by `−rcbf` with midranks for ties.
pub fn roc_auc(rcbf: &ScalarMap3D, gt: &BinaryMask3D) -> Result<f64> {
    gt.check_dims(rcbf.dims())?;
    let mut scored: Vec<(f64, bool)> = rcbf
        .values()
        .iter()
        .zip(gt.as_slice())
        .zip(rcbf.valid_mask().as_slice())
        .filter(|(_, &m)| m)
        .map(|((&r, &g), _)| (-r, g))
        .collect();
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both lesion and healthy voxels"));
    }
    if scored.iter().any(|s| s.0.is_nan()) {
        return Err(Error::NonFinite("rCBF"));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // rank sums doubled so that midranks stay integral
    let mut pos_rank2 = 0u64;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        let pos = scored[i..=j].iter().filter(|s| s.1).count() as u64;
        pos_rank2 += mid2 * pos;
        i = j + 1;
    }
    let (p, q) = (n_pos as u64, n_neg as u64);
    let u2 = pos_rank2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

pub fn dice(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    let (inter, a, b) = overlap(pred, gt)?;
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

pub fn jaccard(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    let (inter, a, b) = overlap(pred, gt)?;
    let union = a + b - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

fn overlap(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<(usize, usize, usize)> {
    gt.check_dims(pred.dims())?;
    let inter = pred.and(gt)?.count();
    Ok((inter, pred.count(), gt.count()))
}

/// Mask voxels with at least one face neighbor outside the mask or the grid.
pub fn boundary_voxels(mask: &BinaryMask3D) -> Vec<usize> {
    let d = mask.dims();
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d.z
            && (y as usize) < d.y
            && (x as usize) < d.x
            && mask.get(d.index(z as usize, y as usize, x as usize))
    };
    (0..d.len())
        .filter(|&i| {
            if !mask.get(i) {
                return false;
            }
            let (z, y, x) = d.coords(i);
            let (z, y, x) = (z as isize, y as isize, x as isize);
            [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                .iter()
                .any(|(dz, dy, dx)| !inside(z + dz, y + dy, x + dx))
        })
        .collect()
}

/// Type-7 percentile of already sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn points_mm(mask: &BinaryMask3D, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let d = mask.dims();
    boundary_voxels(mask)
        .into_iter()
        .map(|i| {
            let (z, y, x) = d.coords(i);
            [z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]
        })
        .collect()
}

fn sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (u, v, w) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    u * u + v * v + w * w
}

/// Nearest-neighbor distances from each of `from` to the set `to`, using a
/// sort along the last axis and pruning on that coordinate.
fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    let mut sorted: Vec<[f64; 3]> = to.to_vec();
    sorted.sort_by(|a, b| a[2].total_cmp(&b[2]));
    let keys: Vec<f64> = sorted.iter().map(|p| p[2]).collect();
    let mut out: Vec<f64> = from
        .iter()
        .map(|p| {
            let start = keys.partition_point(|&k| k < p[2]);
            let mut best = f64::INFINITY;
            for q in sorted[start..].iter() {
                let dx = q[2] - p[2];
                if dx * dx > best {
                    break;
                }
                best = best.min(sq(p, q));
            }
            for q in sorted[..start].iter().rev() {
                let dx = p[2] - q[2];
                if dx * dx > best {
                    break;
                }
                best = best.min(sq(p, q));
            }
            math::sqrt(best)
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// 95th-percentile symmetric Hausdorff distance between mask boundaries, in
/// the units of `spacing` (`z, y, x`).
pub fn hausdorff95(pred: &BinaryMask3D, gt: &BinaryMask3D, spacing: [f64; 3]) -> Result<f64> {
    gt.check_dims(pred.dims())?;
    if !pred.any() || !gt.any() {
        return Err(Error::UndefinedMetric("HD95 needs two nonempty masks"));
    }
    let a = points_mm(pred, spacing);
    let b = points_mm(gt, spacing);
    let ab = percentile_sorted(&directed(&a, &b), 0.95);
    let ba = percentile_sorted(&directed(&b, &a), 0.95);
    Ok(ab.max(ba))
}

pub fn volume_ml(mask: &BinaryMask3D, spacing: [f64; 3]) -> f64 {
    mask.count() as f64 * (spacing[0] * spacing[1] * spacing[2]) / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlandAltmanSummary {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Takes `(predicted_ml, reference_ml)` pairs.
pub fn bland_altman(cases: &[(f64, f64)]) -> Result<BlandAltmanSummary> {
    if cases.len() < 2 {
        return Err(Error::Size {
            what: "Bland-Altman cases",
            expected: 2,
            actual: cases.len(),
        });
    }
    let n = cases.len() as f64;
    let d: Vec<f64> = cases.iter().map(|(p, g)| p - g).collect();
    let bias = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - bias) * (x - bias)).sum::<f64>() / (n - 1.0);
    let sd = math::sqrt(var);
    Ok(BlandAltmanSummary {
        bias,
        sd,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub auc: Option<f64>,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95_mm: Option<f64>,
    pub volume_pred_ml: f64,
    pub volume_gt_ml: f64,
    /// Both masks empty; dice and jaccard are 1 by convention.
    pub both_empty: bool,
    /// `(metric, reason)` for each metric left undefined.
    pub undefined: Vec<(&'static str, String)>,
}

pub fn evaluate(rcbf: &ScalarMap3D, gt: &BinaryMask3D, cutoff: f64, spacing: [f64; 3]) -> Result<EvaluationReport> {
    gt.check_dims(rcbf.dims())?;
    let gt = gt.and(rcbf.valid_mask())?;
    let pred = binarize(rcbf, cutoff)?;
    let mut undefined = Vec::new();
    let mut keep = |name: &'static str, r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(why)) => {
            undefined.push((name, String::from(why)));
            Ok(None)
        }
        Err(e) => Err(e),
    };
    let auc = keep("auc", roc_auc(rcbf, &gt))?;
    let hd95_mm = keep("hd95_mm", hausdorff95(&pred, &gt, spacing))?;
    Ok(EvaluationReport {
        auc,
        dice: dice(&pred, &gt)?,
        jaccard: jaccard(&pred, &gt)?,
        hd95_mm,
        volume_pred_ml: volume_ml(&pred, spacing),
        volume_gt_ml: volume_ml(&gt, spacing),
        both_empty: !pred.any() && !gt.any(),
        undefined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims3;
    use proptest::prelude::*;

    fn line(bits: &[bool]) -> BinaryMask3D {
        BinaryMask3D::new(Dims3::new(1, 1, bits.len()).unwrap(), bits.to_vec()).unwrap()
    }

    fn rmap(values: &[f64]) -> ScalarMap3D {
        let d = Dims3::new(1, 1, values.len()).unwrap();
        ScalarMap3D::new(values.to_vec(), BinaryMask3D::full(d)).unwrap()
    }

    #[test]
    fn auc_examples() {
        let gt = line(&[true, true, false, true, false, false]);
        let auc = roc_auc(&rmap(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), &gt).unwrap();
        assert!((auc - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(roc_auc(&rmap(&[0.7; 6]), &gt).unwrap(), 0.5);
        let perfect = rmap(&[0.1, 0.1, 0.9, 0.2, 1.0, 0.8]);
        assert_eq!(roc_auc(&perfect, &gt).unwrap(), 1.0);
        assert!(matches!(roc_auc(&rmap(&[0.1; 6]), &line(&[true; 6])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn dice_jaccard_examples() {
        let a = line(&[true, true, true, true, false, false]);
        let b = line(&[false, false, true, true, true, true]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        let c = line(&[false, false, false, false, true, true]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &c).unwrap(), 0.0);
        let e = line(&[false; 6]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn hd95_examples() {
        let d = Dims3::new(1, 1, 6).unwrap();
        let a = line(&[false, true, false, false, false, false]);
        let b = line(&[false, false, false, false, true, false]);
        assert!((hausdorff95(&a, &b, [1.0, 1.0, 2.0]).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(hausdorff95(&a, &a, [1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            hausdorff95(&a, &BinaryMask3D::empty(d), [1.0; 3]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn boundary_of_solid_cube_excludes_center() {
        let d = Dims3::new(3, 3, 3).unwrap();
        let b = boundary_voxels(&BinaryMask3D::full(d));
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&d.index(1, 1, 1)));
    }

    #[test]
    fn percentile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&v, 0.5), 3.0);
        assert!((percentile_sorted(&v, 0.95) - 4.8).abs() < 1e-12);
        assert_eq!(percentile_sorted(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn bland_altman_examples() {
        let s = bland_altman(&[(2.0, 1.0), (1.0, 2.0)]).unwrap();
        assert_eq!(s.bias, 0.0);
        assert!((s.sd - 2f64.sqrt()).abs() < 1e-15);
        assert!((s.loa_high - 2.771_858_6).abs() < 1e-6);
        assert_eq!(s.loa_low, -s.loa_high);
        let z = bland_altman(&[(1.0, 1.0), (3.0, 3.0), (0.5, 0.5)]).unwrap();
        assert_eq!((z.bias, z.loa_low, z.loa_high), (0.0, 0.0, 0.0));
        assert!(matches!(bland_altman(&[(1.0, 1.0)]), Err(Error::Size { .. })));
    }

    #[test]
    fn volume_examples() {
        assert_eq!(volume_ml(&BinaryMask3D::empty(Dims3::new(1, 1, 4).unwrap()), [1.0; 3]), 0.0);
        let m = BinaryMask3D::full(Dims3::new(10, 10, 10).unwrap());
        assert_eq!(volume_ml(&m, [1.0; 3]), 1.0);
        let m = BinaryMask3D::full(Dims3::new(5, 10, 10).unwrap());
        assert_eq!(volume_ml(&m, [1.0, 1.0, 2.0]), 1.0);
    }

    #[test]
    fn evaluate_flags_undefined_metrics() {
        let r = rmap(&[0.9, 0.8, 1.0]);
        let rep = evaluate(&r, &line(&[false; 3]), 0.38, [1.0; 3]).unwrap();
        assert!(rep.both_empty);
        assert_eq!(rep.dice, 1.0);
        assert_eq!(rep.auc, None);
        assert_eq!(rep.hd95_mm, None);
        assert_eq!(rep.undefined.len(), 2);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_transform(values in prop::collection::vec(0.0f64..2.0, 4..30), bits in prop::collection::vec(any::<bool>(), 30)) {
            let n = values.len();
            let gt = line(&bits[..n]);
            prop_assume!(gt.any() && gt.count() < n);
            let a = roc_auc(&rmap(&values), &gt).unwrap();
            let t: Vec<f64> = values.iter().map(|v| libm::exp(3.0 * v) + 1.0).collect();
            prop_assert_eq!(a, roc_auc(&rmap(&t), &gt).unwrap());
        }

        #[test]
        fn hd95_symmetric(a in prop::collection::vec(any::<bool>(), 32), b in prop::collection::vec(any::<bool>(), 32)) {
            let d = Dims3::new(2, 4, 4).unwrap();
            let a = BinaryMask3D::new(d, a).unwrap();
            let b = BinaryMask3D::new(d, b).unwrap();
            prop_assume!(a.any() && b.any());
            let s = [1.5, 1.0, 0.7];
            prop_assert_eq!(hausdorff95(&a, &b, s).unwrap(), hausdorff95(&b, &a, s).unwrap());
        }

        #[test]
        fn jaccard_dice_identity(a in prop::collection::vec(any::<bool>(), 20), b in prop::collection::vec(any::<bool>(), 20)) {
            let (a, b) = (line(&a), line(&b));
            let d = dice(&a, &b).unwrap();
            prop_assert!((jaccard(&a, &b).unwrap() - d / (2.0 - d)).abs() <= 1e-12);
        }
    }
}
