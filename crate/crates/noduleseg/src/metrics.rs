//! Challenge-style evaluation: segmentation agreement metrics, the
//! normalized leaderboard score, weighted kappa, balanced accuracy and
//! precision.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One leaderboard row. All six entries are oriented so lower is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationScores {
    /// 1 - Jaccard.
    pub j_star: f64,
    pub mad_mm: f64,
    pub hd_mm: f64,
    /// 1 - Pearson correlation of volumes.
    pub c_star: f64,
    pub bias_mm3: f64,
    pub std_mm3: f64,
}

impl SegmentationScores {
    fn columns(&self) -> [f64; 6] {
        [self.j_star, self.mad_mm, self.hd_mm, self.c_star, self.bias_mm3, self.std_mm3]
    }
}

/// Rows index the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k < 2 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidShape("confusion matrix must be square with K >= 2".into()));
        }
        Ok(ConfusionMatrix { k, counts: rows.iter().flatten().copied().collect() })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.k).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }
}

fn mask_dims(m: &Tensor<f32>) -> Result<[usize; 3]> {
    if m.shape().len() != 3 {
        return Err(Error::InvalidShape(format!(
            "masks must be [D, H, W], got rank {}",
            m.shape().len()
        )));
    }
    Ok([m.shape()[0], m.shape()[1], m.shape()[2]])
}

fn on(v: f32) -> bool {
    v > 0.5
}

/// |A n B| / |A u B|; a pair of empty masks counts as perfect agreement.
pub fn jaccard(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    mask_dims(a)?;
    if a.shape() != b.shape() {
        return Err(Error::InvalidShape(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (on(x) && on(y)) as u64;
        union += (on(x) || on(y)) as u64;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Voxel centers (in mm, via `spacing`) of all 1-voxels with at least one
/// 0-valued 6-neighbor; out-of-bounds neighbors count as 0.
pub fn surface_voxels(mask: &Tensor<f32>, spacing: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    let [d, h, w] = mask_dims(mask)?;
    let at = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            return false;
        }
        on(mask.data()[(z as usize * h + y as usize) * w + x as usize])
    };
    let mut pts = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !at(z, y, x) {
                    continue;
                }
                let boundary = !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                if boundary {
                    pts.push([z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]);
                }
            }
        }
    }
    Ok(pts)
}

fn dist(p: [f64; 3], q: [f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn min_dist(p: [f64; 3], set: &[[f64; 3]]) -> f64 {
    set.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

fn surfaces(a: &Tensor<f32>, b: &Tensor<f32>, spacing: [f64; 3]) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    let sa = surface_voxels(a, spacing)?;
    let sb = surface_voxels(b, spacing)?;
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedMetric(
            "surface distance is undefined for an empty mask".into(),
        ));
    }
    Ok((sa, sb))
}

/// Symmetric mean surface distance in mm:
/// (sum_{p in dA} d(p, dB) + sum_{q in dB} d(q, dA)) / (|dA| + |dB|).
pub fn mean_avg_surface_distance(a: &Tensor<f32>, b: &Tensor<f32>, spacing: [f64; 3]) -> Result<f64> {
    let (sa, sb) = surfaces(a, b, spacing)?;
    let sum_a: f64 = sa.iter().map(|&p| min_dist(p, &sb)).sum();
    let sum_b: f64 = sb.iter().map(|&q| min_dist(q, &sa)).sum();
    Ok((sum_a + sum_b) / (sa.len() + sb.len()) as f64)
}

/// max(max_{p in dA} d(p, dB), max_{q in dB} d(q, dA)) in mm.
pub fn hausdorff_distance(a: &Tensor<f32>, b: &Tensor<f32>, spacing: [f64; 3]) -> Result<f64> {
    let (sa, sb) = surfaces(a, b, spacing)?;
    let max_a = sa.iter().map(|&p| min_dist(p, &sb)).fold(0.0, f64::max);
    let max_b = sb.iter().map(|&q| min_dist(q, &sa)).fold(0.0, f64::max);
    Ok(max_a.max(max_b))
}

#[derive(Debug, Clone, Copy)]
pub struct VolumeAgreement {
    pub pearson: Option<f64>,
    /// Mean absolute volume difference.
    pub bias_mm3: f64,
    /// Mean signed difference, reported alongside the absolute reading.
    pub bias_signed_mm3: f64,
    /// Sample standard deviation of signed differences.
    pub std_mm3: f64,
}

/// Cohort-level volume statistics. `pearson` is `None` when either vector
/// is constant; the difference statistics are always defined.
pub fn volume_agreement(v_pred: &[f64], v_gt: &[f64]) -> Result<VolumeAgreement> {
    if v_pred.len() != v_gt.len() || v_pred.len() < 2 {
        return Err(Error::InvalidShape(format!(
            "volume vectors need equal lengths >= 2, got {} and {}",
            v_pred.len(),
            v_gt.len()
        )));
    }
    let n = v_pred.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mp, mg) = (mean(v_pred), mean(v_gt));
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_g = 0.0;
    for (&p, &g) in v_pred.iter().zip(v_gt) {
        cov += (p - mp) * (g - mg);
        var_p += (p - mp).powi(2);
        var_g += (g - mg).powi(2);
    }
    let pearson = if var_p == 0.0 || var_g == 0.0 {
        None
    } else {
        Some(cov / (var_p.sqrt() * var_g.sqrt()))
    };
    let diffs: Vec<f64> = v_pred.iter().zip(v_gt).map(|(&p, &g)| p - g).collect();
    let bias_mm3 = diffs.iter().map(|d| d.abs()).sum::<f64>() / n;
    let bias_signed_mm3 = diffs.iter().sum::<f64>() / n;
    let md = bias_signed_mm3;
    let std_mm3 = (diffs.iter().map(|d| (d - md).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok(VolumeAgreement { pearson, bias_mm3, bias_signed_mm3, std_mm3 })
}

/// Per row: mean over the six metrics of value / column-max. Lower is
/// better; columns whose max is 0 contribute 0.
pub fn leaderboard_score(rows: &[SegmentationScores]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("leaderboard needs at least one row".into()));
    }
    let mut col_max = [0.0f64; 6];
    for r in rows {
        for (m, v) in col_max.iter_mut().zip(r.columns()) {
            *m = m.max(v);
        }
    }
    Ok(rows
        .iter()
        .map(|r| {
            r.columns()
                .iter()
                .zip(&col_max)
                .map(|(&v, &m)| if m > 0.0 { v / m } else { 0.0 })
                .sum::<f64>()
                / 6.0
        })
        .collect())
}

/// Quadratic agreement weights w_ij = 1 - ((i-j)/(K-1))^2;
/// kappa = (p_o - p_e) / (1 - p_e).
pub fn fleiss_cohen_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::UndefinedMetric("kappa of an empty confusion matrix".into()));
    }
    let k = cm.classes();
    let weight = |i: usize, j: usize| {
        let d = (i as f64 - j as f64) / (k as f64 - 1.0);
        1.0 - d * d
    };
    let nf = n as f64;
    let mut p_o = 0.0;
    let mut p_e = 0.0;
    for i in 0..k {
        for j in 0..k {
            p_o += weight(i, j) * cm.get(i, j) as f64 / nf;
            p_e += weight(i, j) * cm.row_sum(i) as f64 * cm.col_sum(j) as f64 / (nf * nf);
        }
    }
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(if (1.0 - p_o).abs() < 1e-15 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Mean over true classes of per-class recall.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.classes();
    let mut acc = 0.0;
    for i in 0..k {
        let row = cm.row_sum(i);
        if row == 0 {
            return Err(Error::UndefinedMetric(format!("true class {} has no samples", i)));
        }
        acc += cm.get(i, i) as f64 / row as f64;
    }
    Ok(acc / k as f64)
}

/// TP / (TP + FP) for the given positive class.
pub fn precision(cm: &ConfusionMatrix, positive_class: usize) -> Result<f64> {
    if positive_class >= cm.classes() {
        return Err(Error::InvalidInput(format!(
            "positive class {} out of range for K={}",
            positive_class,
            cm.classes()
        )));
    }
    let predicted = cm.col_sum(positive_class);
    if predicted == 0 {
        return Err(Error::UndefinedMetric("no predicted positives".into()));
    }
    Ok(cm.get(positive_class, positive_class) as f64 / predicted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(dims: [usize; 3], ones: &[[usize; 3]]) -> Tensor<f32> {
        let mut t = Tensor::zeros(&dims);
        for &[z, y, x] in ones {
            t.data_mut()[(z * dims[1] + y) * dims[2] + x] = 1.0;
        }
        t
    }

    fn rand_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], p: f64) -> Tensor<f32> {
        let mut t = Tensor::zeros(&dims);
        for v in t.data_mut() {
            *v = if rng.gen_bool(p) { 1.0 } else { 0.0 };
        }
        t
    }

    #[test]
    fn jaccard_cases() {
        let a = mask_from([2, 2, 2], &[[0, 0, 0], [1, 1, 1]]);
        let b = mask_from([2, 2, 2], &[[0, 0, 0]]);
        let c = mask_from([2, 2, 2], &[[0, 1, 0]]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&b, &c).unwrap(), 0.0);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.5);
        let e = Tensor::<f32>::zeros(&[2, 2, 2]);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn surface_of_solid_cube_excludes_interior() {
        let mut ones = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    ones.push([z, y, x]);
                }
            }
        }
        let m = mask_from([5, 5, 5], &ones);
        let s = surface_voxels(&m, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2.0, 2.0, 2.0]));
        let single = mask_from([3, 3, 3], &[[1, 2, 0]]);
        assert_eq!(surface_voxels(&single, [2.0, 1.0, 0.5]).unwrap(), vec![[2.0, 2.0, 0.0]]);
        assert!(surface_voxels(&Tensor::zeros(&[3, 3, 3]), [1.0; 3]).unwrap().is_empty());
    }

    #[test]
    fn surface_distance_two_point_cases() {
        let a = mask_from([4, 4, 4], &[[0, 0, 0]]);
        let b = mask_from([4, 4, 4], &[[3, 0, 0]]);
        let sp = [1.0, 1.0, 1.0];
        assert_eq!(mean_avg_surface_distance(&a, &a, sp).unwrap(), 0.0);
        assert_eq!(hausdorff_distance(&a, &a, sp).unwrap(), 0.0);
        assert_eq!(mean_avg_surface_distance(&a, &b, sp).unwrap(), 3.0);
        assert_eq!(hausdorff_distance(&a, &b, sp).unwrap(), 3.0);
        let e = Tensor::<f32>::zeros(&[4, 4, 4]);
        assert!(matches!(
            mean_avg_surface_distance(&a, &e, sp),
            Err(Error::UndefinedMetric(_))
        ));
    }

    /// Independent pairwise-distance oracle over every surface pair.
    fn oracle_mad_hd(a: &Tensor<f32>, b: &Tensor<f32>, sp: [f64; 3]) -> (f64, f64) {
        let sa = surface_voxels(a, sp).unwrap();
        let sb = surface_voxels(b, sp).unwrap();
        let d = |p: [f64; 3], q: [f64; 3]| {
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        };
        let mut sum = 0.0;
        let mut hd = 0.0f64;
        for &p in &sa {
            let m = sb.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min);
            sum += m;
            hd = hd.max(m);
        }
        for &q in &sb {
            let m = sa.iter().map(|&p| d(p, q)).fold(f64::INFINITY, f64::min);
            sum += m;
            hd = hd.max(m);
        }
        (sum / (sa.len() + sb.len()) as f64, hd)
    }

    #[test]
    fn distances_match_brute_force_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let sp = [1.25, 1.0, 0.75];
        for _ in 0..100 {
            let dims = [
                rng.gen_range(3..=8usize),
                rng.gen_range(3..=8usize),
                rng.gen_range(3..=8usize),
            ];
            let a = rand_mask(&mut rng, dims, 0.4);
            let b = rand_mask(&mut rng, dims, 0.4);
            if surface_voxels(&a, sp).unwrap().is_empty() || surface_voxels(&b, sp).unwrap().is_empty() {
                continue;
            }
            let (mad_o, hd_o) = oracle_mad_hd(&a, &b, sp);
            let mad = mean_avg_surface_distance(&a, &b, sp).unwrap();
            let hd = hausdorff_distance(&a, &b, sp).unwrap();
            assert!((mad - mad_o).abs() < 1e-9);
            assert!((hd - hd_o).abs() < 1e-9);
            assert!(hd >= mad);
            assert!((mad - mean_avg_surface_distance(&b, &a, sp).unwrap()).abs() < 1e-12);
            assert!((hd - hausdorff_distance(&b, &a, sp).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn volume_agreement_cases() {
        let v = [10.0, 25.0, 40.0];
        let exact = volume_agreement(&v, &v).unwrap();
        assert!((exact.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(exact.bias_mm3, 0.0);
        assert_eq!(exact.std_mm3, 0.0);

        // v_pred = 2 v_gt on [1,2,3]: diffs [1,2,3], bias 2, sample std 1.
        let gt = [1.0, 2.0, 3.0];
        let pred = [2.0, 4.0, 6.0];
        let a = volume_agreement(&pred, &gt).unwrap();
        assert!((a.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert!((a.bias_mm3 - 2.0).abs() < 1e-12);
        assert!((a.bias_signed_mm3 - 2.0).abs() < 1e-12);
        assert!((a.std_mm3 - 1.0).abs() < 1e-12);

        let neg = volume_agreement(&[-1.0, -2.0, -3.0], &gt).unwrap();
        assert!((neg.pearson.unwrap() + 1.0).abs() < 1e-12);

        let flat = volume_agreement(&[5.0, 5.0], &[1.0, 2.0]).unwrap();
        assert!(flat.pearson.is_none());
        assert!((flat.bias_mm3 - 3.5).abs() < 1e-12);
    }

    fn table_rows() -> [SegmentationScores; 3] {
        [
            SegmentationScores { j_star: 0.4779, mad_mm: 0.4203, hd_mm: 2.0275, c_star: 0.055, bias_mm3: 44.2826, std_mm3: 86.3227 },
            SegmentationScores { j_star: 0.468, mad_mm: 0.4686, hd_mm: 2.1371, c_star: 0.081, bias_mm3: 40.701, std_mm3: 98.741 },
            SegmentationScores { j_star: 0.4447, mad_mm: 0.4115, hd_mm: 2.0618, c_star: 0.1452, bias_mm3: 41.4341, std_mm3: 129.47 },
        ]
    }

    #[test]
    fn leaderboard_single_row_scores_one() {
        let rows = [table_rows()[0]];
        assert_eq!(leaderboard_score(&rows).unwrap(), vec![1.0]);
    }

    #[test]
    fn leaderboard_ranks_published_rows() {
        let rows = table_rows();
        let scores = leaderboard_score(&rows).unwrap();
        assert!(scores[0] < scores[1]);
        assert!(scores[0] < scores[2]);
    }

    #[test]
    fn leaderboard_duplicate_row_is_score_stable() {
        let rows = table_rows();
        let base = leaderboard_score(&rows).unwrap();
        let mut dup = rows.to_vec();
        dup.push(rows[1]);
        let with_dup = leaderboard_score(&dup).unwrap();
        for i in 0..3 {
            assert!((base[i] - with_dup[i]).abs() < 1e-15);
        }
        assert!((with_dup[1] - with_dup[3]).abs() < 1e-15);
    }

    #[test]
    fn kappa_cases() {
        let perfect = ConfusionMatrix::from_rows(&[vec![3, 0, 0], vec![0, 7, 0], vec![0, 0, 2]]).unwrap();
        assert_eq!(fleiss_cohen_weighted_kappa(&perfect).unwrap(), 1.0);

        // [[2,1],[1,2]]: p_o = 4/6, p_e = 1/2, kappa = 1/3.
        let cm = ConfusionMatrix::from_rows(&[vec![2, 1], vec![1, 2]]).unwrap();
        assert!((fleiss_cohen_weighted_kappa(&cm).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let uniform = ConfusionMatrix::from_rows(&[vec![5, 5, 5], vec![5, 5, 5], vec![5, 5, 5]]).unwrap();
        assert!(fleiss_cohen_weighted_kappa(&uniform).unwrap().abs() < 1e-12);

        let empty = ConfusionMatrix::new(3);
        assert!(matches!(fleiss_cohen_weighted_kappa(&empty), Err(Error::UndefinedMetric(_))));
    }

    /// With K=2 the quadratic weights are the 0/1 identity weights, so
    /// the weighted kappa must equal plain Cohen's kappa.
    #[test]
    fn binary_weighted_kappa_equals_cohen() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let cm = ConfusionMatrix::from_rows(&[
                vec![rng.gen_range(0..20), rng.gen_range(0..20)],
                vec![rng.gen_range(0..20), rng.gen_range(1..20)],
            ])
            .unwrap();
            let n = cm.total() as f64;
            let p_o = (cm.get(0, 0) + cm.get(1, 1)) as f64 / n;
            let p_e = (cm.row_sum(0) as f64 * cm.col_sum(0) as f64
                + cm.row_sum(1) as f64 * cm.col_sum(1) as f64)
                / (n * n);
            let cohen = if (1.0 - p_e).abs() < 1e-15 {
                if (1.0 - p_o).abs() < 1e-15 { 1.0 } else { 0.0 }
            } else {
                (p_o - p_e) / (1.0 - p_e)
            };
            let wk = fleiss_cohen_weighted_kappa(&cm).unwrap();
            assert!((wk - cohen).abs() < 1e-12, "weighted {} vs cohen {}", wk, cohen);
        }
    }

    #[test]
    fn balanced_accuracy_cases() {
        let perfect = ConfusionMatrix::from_rows(&[vec![4, 0], vec![0, 9]]).unwrap();
        assert_eq!(balanced_accuracy(&perfect).unwrap(), 1.0);
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0], vec![3, 3]]).unwrap();
        assert_eq!(balanced_accuracy(&cm).unwrap(), 0.75);
        let missing = ConfusionMatrix::from_rows(&[vec![4, 0], vec![0, 0]]).unwrap();
        assert!(matches!(balanced_accuracy(&missing), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn balanced_accuracy_invariant_under_class_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let rows = vec![
                vec![rng.gen_range(1..10), rng.gen_range(0..10), rng.gen_range(0..10)],
                vec![rng.gen_range(0..10), rng.gen_range(1..10), rng.gen_range(0..10)],
                vec![rng.gen_range(0..10), rng.gen_range(0..10), rng.gen_range(1..10)],
            ];
            let base = balanced_accuracy(&ConfusionMatrix::from_rows(&rows).unwrap()).unwrap();
            let mut doubled = rows.clone();
            for v in doubled[1].iter_mut() {
                *v *= 2;
            }
            let dup = balanced_accuracy(&ConfusionMatrix::from_rows(&doubled).unwrap()).unwrap();
            assert!((base - dup).abs() < 1e-12);
        }
    }

    #[test]
    fn precision_cases() {
        let perfect = ConfusionMatrix::from_rows(&[vec![4, 0], vec![0, 9]]).unwrap();
        assert_eq!(precision(&perfect, 1).unwrap(), 1.0);
        // TP=3 at (1,1), FP=1 at (0,1).
        let cm = ConfusionMatrix::from_rows(&[vec![5, 1], vec![2, 3]]).unwrap();
        assert_eq!(precision(&cm, 1).unwrap(), 0.75);
        let none = ConfusionMatrix::from_rows(&[vec![5, 0], vec![2, 0]]).unwrap();
        assert!(matches!(precision(&none, 1), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn precision_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let truth: Vec<usize> = (0..60).map(|_| rng.gen_range(0..2)).collect();
            let pred: Vec<usize> = (0..60).map(|_| rng.gen_range(0..2)).collect();
            let mut cm = ConfusionMatrix::new(2);
            for (&t, &p) in truth.iter().zip(&pred) {
                cm.record(t, p);
            }
            let tp = truth.iter().zip(&pred).filter(|&(&t, &p)| t == 1 && p == 1).count();
            let fp = truth.iter().zip(&pred).filter(|&(&t, &p)| t == 0 && p == 1).count();
            if tp + fp == 0 {
                continue;
            }
            assert_eq!(precision(&cm, 1).unwrap(), tp as f64 / (tp + fp) as f64);
        }
    }

    #[test]
    fn jaccard_symmetry_and_j_star() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let a = rand_mask(&mut rng, [5, 5, 5], 0.3);
            let b = rand_mask(&mut rng, [5, 5, 5], 0.3);
            let j = jaccard(&a, &b).unwrap();
            assert_eq!(j, jaccard(&b, &a).unwrap());
            assert!((0.0..=1.0).contains(&(1.0 - j)));
        }
    }
}
