//! Grid geometry, coarse/fine aggregation, the block-sum conservation check,
//! and the MSE/MAE/MAPE evaluation metrics.
//!
//! Flow maps are stored in `f32`; aggregation, the conservation residual, and
//! all metric accumulation run in `f64` so verification stays tight.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Guard added to the denominator of masked MAPE.
pub const MAPE_MASKED_EPS: f64 = 1e-6;
/// Guard added to the denominator of guarded (all-cells) MAPE.
pub const MAPE_GUARDED_EPS: f64 = 1.0;

/// A nonnegative 2-D grid of flow volumes at one spatial granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    values: Array2<f32>,
}

impl FlowMap {
    /// Builds a flow map, rejecting negative or non-finite cells.
    pub fn new(values: Array2<f32>) -> Result<Self> {
        for &v in values.iter() {
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite flow value {v}")));
            }
            if v < 0.0 {
                return Err(Error::InvalidInput(format!("negative flow value {v}")));
            }
        }
        Ok(FlowMap { values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowMap {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        Self::new(Array2::from_shape_fn((height, width), |(i, j)| f(i, j)))
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[(i, j)]
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }
}

/// Relation between a coarse grid and the fine grid it aggregates.
///
/// The upscale factor is a power of two: the model decomposes an N-times
/// upsampling into log2(N) sequential 2x stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridRelation {
    upscale: usize,
    coarse: (usize, usize),
}

impl GridRelation {
    pub fn new(coarse_shape: (usize, usize), upscale: usize) -> Result<Self> {
        if coarse_shape.0 == 0 || coarse_shape.1 == 0 {
            return Err(Error::Config("coarse shape must be positive".into()));
        }
        if upscale < 2 || !upscale.is_power_of_two() {
            return Err(Error::Config(format!(
                "upscale factor must be a power of two >= 2, got {upscale}"
            )));
        }
        Ok(GridRelation {
            upscale,
            coarse: coarse_shape,
        })
    }

    pub fn upscale_factor(&self) -> usize {
        self.upscale
    }

    /// Number of 2x upsampling stages, log2(N).
    pub fn stages(&self) -> usize {
        self.upscale.trailing_zeros() as usize
    }

    pub fn coarse_shape(&self) -> (usize, usize) {
        self.coarse
    }

    pub fn fine_shape(&self) -> (usize, usize) {
        (self.coarse.0 * self.upscale, self.coarse.1 * self.upscale)
    }
}

/// Sums each N x N fine block into its parent coarse cell.
///
/// Accumulation is in `f64`, rounded once to `f32` per coarse cell.
pub fn aggregate(fine: &FlowMap, relation: &GridRelation) -> Result<FlowMap> {
    if fine.shape() != relation.fine_shape() {
        return Err(Error::shape(
            format!("{:?}", relation.fine_shape()),
            format!("{:?}", fine.shape()),
        ));
    }
    let n = relation.upscale_factor();
    let (ch, cw) = relation.coarse_shape();
    let mut coarse = Array2::<f32>::zeros((ch, cw));
    for i in 0..ch {
        for j in 0..cw {
            let mut sum = 0.0f64;
            for di in 0..n {
                for dj in 0..n {
                    sum += fine.get(i * n + di, j * n + dj) as f64;
                }
            }
            coarse[(i, j)] = sum as f32;
        }
    }
    FlowMap::new(coarse)
}

/// Worst-case relative violation of the block-sum constraint.
///
/// Returns `max_ij |aggregate(fine)[i,j] - coarse[i,j]| / (coarse[i,j] + 1)`;
/// zero means the pair is perfectly conserved.
pub fn conservation_residual(
    fine: &FlowMap,
    coarse: &FlowMap,
    relation: &GridRelation,
) -> Result<f64> {
    if coarse.shape() != relation.coarse_shape() {
        return Err(Error::shape(
            format!("{:?}", relation.coarse_shape()),
            format!("{:?}", coarse.shape()),
        ));
    }
    if fine.shape() != relation.fine_shape() {
        return Err(Error::shape(
            format!("{:?}", relation.fine_shape()),
            format!("{:?}", fine.shape()),
        ));
    }
    let n = relation.upscale_factor();
    let (ch, cw) = relation.coarse_shape();
    let mut worst = 0.0f64;
    for i in 0..ch {
        for j in 0..cw {
            let mut sum = 0.0f64;
            for di in 0..n {
                for dj in 0..n {
                    sum += fine.get(i * n + di, j * n + dj) as f64;
                }
            }
            let c = coarse.get(i, j) as f64;
            let residual = (sum - c).abs() / (c + 1.0);
            worst = worst.max(residual);
        }
    }
    Ok(worst)
}

/// Cell-selection rule for MAPE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MapeMode {
    /// Only cells with truth > 0 count, denominator guard 1e-6.
    #[default]
    Masked,
    /// All cells count, denominator guard 1.0.
    Guarded,
}

/// MSE / MAE / MAPE plus the MAPE cell count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    /// Reported as a fraction, not a percentage.
    pub mape: f64,
    pub cells_evaluated: usize,
    /// Set when the MAPE mask selected no cells (mape is then 0).
    pub mape_mask_empty: bool,
}

/// Streaming accumulator so split-level metrics average over every cell of
/// every sample, not over per-sample means.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccumulator {
    sq_err: f64,
    abs_err: f64,
    ape: f64,
    cells: usize,
    mape_cells: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, pred: &FlowMap, truth: &FlowMap, mode: MapeMode) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::shape(
                format!("{:?}", truth.shape()),
                format!("{:?}", pred.shape()),
            ));
        }
        for (p, t) in pred.values().iter().zip(truth.values().iter()) {
            let p = *p as f64;
            let t = *t as f64;
            let err = p - t;
            self.sq_err += err * err;
            self.abs_err += err.abs();
            self.cells += 1;
            match mode {
                MapeMode::Masked => {
                    if t > 0.0 {
                        self.ape += (err / (t + MAPE_MASKED_EPS)).abs();
                        self.mape_cells += 1;
                    }
                }
                MapeMode::Guarded => {
                    self.ape += (err / (t + MAPE_GUARDED_EPS)).abs();
                    self.mape_cells += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let cells = self.cells.max(1) as f64;
        let mape_mask_empty = self.mape_cells == 0;
        MetricReport {
            mse: self.sq_err / cells,
            mae: self.abs_err / cells,
            mape: if mape_mask_empty {
                0.0
            } else {
                self.ape / self.mape_cells as f64
            },
            cells_evaluated: self.mape_cells,
            mape_mask_empty,
        }
    }
}

/// MSE, MAE, and MAPE of a prediction against the ground truth.
pub fn compute_metrics(pred: &FlowMap, truth: &FlowMap, mode: MapeMode) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    acc.update(pred, truth, mode)?;
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f32) -> FlowMap {
        FlowMap::from_fn(h, w, |_, _| rng.gen::<f32>() * scale).unwrap()
    }

    /// Independent nested-loop oracle for block sums, f64 throughout.
    fn block_sum_oracle(fine: &FlowMap, n: usize) -> Array2<f64> {
        let (fh, fw) = fine.shape();
        let (ch, cw) = (fh / n, fw / n);
        let mut out = Array2::<f64>::zeros((ch, cw));
        for fi in 0..fh {
            for fj in 0..fw {
                out[(fi / n, fj / n)] += fine.get(fi, fj) as f64;
            }
        }
        out
    }

    #[test]
    fn rejects_negative_values() {
        assert!(FlowMap::new(array![[1.0, -0.5]]).is_err());
        assert!(FlowMap::new(array![[f32::NAN]]).is_err());
    }

    #[test]
    fn relation_requires_power_of_two() {
        assert!(GridRelation::new((4, 4), 3).is_err());
        assert!(GridRelation::new((4, 4), 1).is_err());
        assert!(GridRelation::new((0, 4), 2).is_err());
        let rel = GridRelation::new((4, 6), 8).unwrap();
        assert_eq!(rel.fine_shape(), (32, 48));
        assert_eq!(rel.stages(), 3);
    }

    #[test]
    fn aggregate_zero_map() {
        let rel = GridRelation::new((2, 2), 2).unwrap();
        let fine = FlowMap::zeros(4, 4);
        let coarse = aggregate(&fine, &rel).unwrap();
        assert_eq!(coarse.values(), &Array2::<f32>::zeros((2, 2)));
    }

    #[test]
    fn aggregate_constant_map() {
        let rel = GridRelation::new((2, 2), 2).unwrap();
        let fine = FlowMap::from_fn(4, 4, |_, _| 1.0).unwrap();
        let coarse = aggregate(&fine, &rel).unwrap();
        for &v in coarse.values() {
            assert_eq!(v, 4.0);
        }
    }

    #[test]
    fn aggregate_matches_block_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rel = GridRelation::new((32, 32), 4).unwrap();
        let fine = random_map(&mut rng, 128, 128, 50.0);
        let coarse = aggregate(&fine, &rel).unwrap();
        let oracle = block_sum_oracle(&fine, 4);
        for i in 0..32 {
            for j in 0..32 {
                let got = coarse.get(i, j) as f64;
                let want = oracle[(i, j)];
                assert!(
                    (got - want).abs() <= want.abs() * 1e-6 + 1e-6,
                    "cell ({i},{j}): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn aggregate_rejects_shape_mismatch() {
        let rel = GridRelation::new((2, 2), 2).unwrap();
        let fine = FlowMap::zeros(4, 6);
        assert!(matches!(
            aggregate(&fine, &rel),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn residual_zero_for_consistent_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rel = GridRelation::new((5, 7), 2).unwrap();
        let fine = random_map(&mut rng, 10, 14, 20.0);
        let coarse = aggregate(&fine, &rel).unwrap();
        let r = conservation_residual(&fine, &coarse, &rel).unwrap();
        assert!(r < 1e-6, "residual {r}");
    }

    #[test]
    fn residual_unit_perturbation_at_zero_cell() {
        let rel = GridRelation::new((2, 2), 2).unwrap();
        let fine = FlowMap::zeros(4, 4);
        let mut coarse = Array2::<f32>::zeros((2, 2));
        coarse[(0, 1)] = 1.0;
        let coarse = FlowMap::new(coarse).unwrap();
        let r = conservation_residual(&fine, &coarse, &rel).unwrap();
        // Perturbed cell: aggregate 0, coarse 1 -> |0 - 1| / (1 + 1) = 0.5.
        assert!((r - 0.5).abs() < 1e-12, "residual {r}");
    }

    #[test]
    fn residual_doubled_coarse_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rel = GridRelation::new((3, 3), 2).unwrap();
        let fine = random_map(&mut rng, 6, 6, 10.0);
        let agg = aggregate(&fine, &rel).unwrap();
        let doubled =
            FlowMap::new(agg.values().mapv(|v| v * 2.0)).unwrap();
        let got = conservation_residual(&fine, &doubled, &rel).unwrap();
        // Scalar oracle: residual per cell is |s - 2s| / (2s + 1).
        let mut want = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let s = block_sum_oracle(&fine, 2)[(i, j)];
                let c = doubled.get(i, j) as f64;
                want = want.max((s - c).abs() / (c + 1.0));
            }
        }
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn metrics_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_map(&mut rng, 4, 4, 10.0);
        let rep = compute_metrics(&m, &m, MapeMode::Masked).unwrap();
        assert_eq!(rep.mse, 0.0);
        assert_eq!(rep.mae, 0.0);
        assert_eq!(rep.mape, 0.0);
    }

    #[test]
    fn metrics_unit_offset_on_ones() {
        let truth = FlowMap::from_fn(2, 2, |_, _| 1.0).unwrap();
        let pred = FlowMap::from_fn(2, 2, |_, _| 2.0).unwrap();
        let rep = compute_metrics(&pred, &truth, MapeMode::Masked).unwrap();
        assert!((rep.mse - 1.0).abs() < 1e-12);
        assert!((rep.mae - 1.0).abs() < 1e-12);
        // Per-cell APE is |pred - truth| / (truth + 1e-6) = 1 / (1 + 1e-6).
        let want = 1.0 / (1.0 + MAPE_MASKED_EPS);
        assert!((rep.mape - want).abs() < 1e-12, "{} vs {want}", rep.mape);
        assert_eq!(rep.cells_evaluated, 4);
        assert!(!rep.mape_mask_empty);
    }

    #[test]
    fn metrics_empty_mask_flag() {
        let truth = FlowMap::zeros(2, 2);
        let pred = FlowMap::from_fn(2, 2, |_, _| 1.0).unwrap();
        let rep = compute_metrics(&pred, &truth, MapeMode::Masked).unwrap();
        assert_eq!(rep.mape, 0.0);
        assert_eq!(rep.cells_evaluated, 0);
        assert!(rep.mape_mask_empty);
        // Guarded mode evaluates every cell: |1 - 0| / (0 + 1) = 1.
        let rep = compute_metrics(&pred, &truth, MapeMode::Guarded).unwrap();
        assert!((rep.mape - 1.0).abs() < 1e-12);
        assert_eq!(rep.cells_evaluated, 4);
    }

    #[test]
    fn metrics_shape_mismatch() {
        let a = FlowMap::zeros(2, 2);
        let b = FlowMap::zeros(2, 3);
        assert!(compute_metrics(&a, &b, MapeMode::Masked).is_err());
    }

    /// Double-loop scalar oracle used by the acceptance metric criterion.
    fn metrics_oracle(pred: &FlowMap, truth: &FlowMap, mode: MapeMode) -> (f64, f64, f64) {
        let (h, w) = truth.shape();
        let m = (h * w) as f64;
        let (mut sse, mut sae, mut sape, mut npe) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for i in 0..h {
            for j in 0..w {
                let p = pred.get(i, j) as f64;
                let t = truth.get(i, j) as f64;
                sse += (p - t) * (p - t);
                sae += (p - t).abs();
                match mode {
                    MapeMode::Masked if t > 0.0 => {
                        sape += ((t - p) / (t + MAPE_MASKED_EPS)).abs();
                        npe += 1;
                    }
                    MapeMode::Guarded => {
                        sape += ((t - p) / (t + MAPE_GUARDED_EPS)).abs();
                        npe += 1;
                    }
                    _ => {}
                }
            }
        }
        (sse / m, sae / m, if npe == 0 { 0.0 } else { sape / npe as f64 })
    }

    #[test]
    fn metrics_match_loop_oracle_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let h = rng.gen_range(1..=16);
            let w = rng.gen_range(1..=16);
            let pred = random_map(&mut rng, h, w, 30.0);
            let truth = random_map(&mut rng, h, w, 30.0);
            for mode in [MapeMode::Masked, MapeMode::Guarded] {
                let rep = compute_metrics(&pred, &truth, mode).unwrap();
                let (mse, mae, mape) = metrics_oracle(&pred, &truth, mode);
                assert!((rep.mse - mse).abs() <= mse.abs() * 1e-9 + 1e-12);
                assert!((rep.mae - mae).abs() <= mae.abs() * 1e-9 + 1e-12);
                assert!((rep.mape - mape).abs() <= mape.abs() * 1e-9 + 1e-12);
            }
        }
    }

    proptest! {
        /// aggregate(a*F1 + b*F2) == a*aggregate(F1) + b*aggregate(F2).
        #[test]
        fn aggregate_is_linear(seed in 0u64..1000, a in 0.0f32..4.0, b in 0.0f32..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rel = GridRelation::new((3, 4), 2).unwrap();
            let f1 = random_map(&mut rng, 6, 8, 10.0);
            let f2 = random_map(&mut rng, 6, 8, 10.0);
            let mixed = FlowMap::new(f1.values() * a + f2.values() * b).unwrap();
            let left = aggregate(&mixed, &rel).unwrap();
            let right = aggregate(&f1, &rel).unwrap().values() * a
                + aggregate(&f2, &rel).unwrap().values() * b;
            for (l, r) in left.values().iter().zip(right.iter()) {
                let tol = (r.abs() as f64) * 1e-6 + 1e-6;
                prop_assert!(((l - r).abs() as f64) <= tol, "{l} vs {r}");
            }
        }

        #[test]
        fn metrics_nonnegative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = random_map(&mut rng, 5, 5, 20.0);
            let truth = random_map(&mut rng, 5, 5, 20.0);
            let rep = compute_metrics(&pred, &truth, MapeMode::Masked).unwrap();
            prop_assert!(rep.mse >= 0.0 && rep.mae >= 0.0 && rep.mape >= 0.0);
        }
    }
}
