use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-increasing depth discretisation: bin widths grow linearly with
/// depth, so bins near the sensor are finest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
}

impl DepthBinSpec {
    pub fn new(d_min: f64, d_max: f64, bins: usize) -> Result<Self> {
        let spec = Self { d_min, d_max, bins };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::Config("depth bins: bin count must be >= 1".into()));
        }
        if !(self.d_min >= 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::Config(format!(
                "depth bins: need 0 <= d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    /// The `bins + 1` edges `d_min + (d_max - d_min) * i(i+1) / (R(R+1))`.
    pub fn edges(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let r = self.bins as f64;
        let span = self.d_max - self.d_min;
        let mut edges: Vec<f64> = (0..=self.bins)
            .map(|i| {
                let i = i as f64;
                self.d_min + span * i * (i + 1.0) / (r * (r + 1.0))
            })
            .collect();
        // Pin the last edge so the closed form's rounding cannot move it.
        edges[self.bins] = self.d_max;
        Ok(edges)
    }

    /// Bin containing `depth` under half-open bins with the last edge
    /// inclusive; `None` outside `[d_min, d_max]` or for non-finite input.
    pub fn bin_of(&self, edges: &[f64], depth: f64) -> Option<usize> {
        if !(depth >= self.d_min && depth <= self.d_max) {
            return None;
        }
        let i = edges.partition_point(|&e| e <= depth);
        Some(i.saturating_sub(1).min(self.bins - 1))
    }

    /// Continuous position along the bin axis: `i + t` where `t` in `[0, 1]`
    /// is the fractional position of `depth` inside bin `i`.
    pub fn continuous_index(&self, edges: &[f64], depth: f64) -> Option<f64> {
        let i = self.bin_of(edges, depth)?;
        let (lo, hi) = (edges[i], edges[i + 1]);
        Some(i as f64 + (depth - lo) / (hi - lo))
    }
}

/// One-hot encoding of `depth`'s bin; all zeros when out of range.
pub fn depth_to_onehot(depth: f64, spec: &DepthBinSpec) -> Result<Vec<f64>> {
    let edges = spec.edges()?;
    let mut out = vec![0.0; spec.bins];
    if let Some(i) = spec.bin_of(&edges, depth) {
        out[i] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_examples() {
        let e = DepthBinSpec::new(0.0, 10.0, 4).unwrap().edges().unwrap();
        assert_eq!(e, vec![0.0, 1.0, 3.0, 6.0, 10.0]);
        let e = DepthBinSpec::new(0.0, 7.5, 1).unwrap().edges().unwrap();
        assert_eq!(e, vec![0.0, 7.5]);
    }

    #[test]
    fn kitti_range_widths_increase() {
        let e = DepthBinSpec::new(0.0, 70.4, 80).unwrap().edges().unwrap();
        let widths: Vec<f64> = e.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(widths.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_bins_rejected() {
        assert!(DepthBinSpec::new(0.0, 10.0, 0).is_err());
        let spec = DepthBinSpec { d_min: 0.0, d_max: 1.0, bins: 0 };
        assert!(spec.edges().is_err());
        assert!(DepthBinSpec::new(5.0, 5.0, 2).is_err());
    }

    #[test]
    fn onehot_examples() {
        let s = DepthBinSpec::new(0.0, 10.0, 4).unwrap();
        assert_eq!(depth_to_onehot(2.0, &s).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(depth_to_onehot(-0.1, &s).unwrap(), vec![0.0; 4]);
        assert_eq!(depth_to_onehot(10.0, &s).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(depth_to_onehot(10.01, &s).unwrap(), vec![0.0; 4]);
        // Interior edges belong to the bin above.
        assert_eq!(depth_to_onehot(3.0, &s).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(depth_to_onehot(f64::NAN, &s).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn continuous_index_is_piecewise_linear() {
        let s = DepthBinSpec::new(0.0, 10.0, 4).unwrap();
        let e = s.edges().unwrap();
        assert_eq!(s.continuous_index(&e, 0.0), Some(0.0));
        assert_eq!(s.continuous_index(&e, 2.0), Some(1.5));
        assert_eq!(s.continuous_index(&e, 8.0), Some(3.5));
        assert_eq!(s.continuous_index(&e, 10.0), Some(4.0));
        assert_eq!(s.continuous_index(&e, 11.0), None);
    }

    proptest! {
        #[test]
        fn edges_monotone_with_exact_endpoints(
            d_min in 0.0f64..20.0, span in 0.01f64..100.0, bins in 1usize..200,
        ) {
            let s = DepthBinSpec::new(d_min, d_min + span, bins).unwrap();
            let e = s.edges().unwrap();
            prop_assert_eq!(e.len(), bins + 1);
            prop_assert_eq!(e[0], d_min);
            prop_assert_eq!(e[bins], d_min + span);
            prop_assert!(e.windows(2).all(|w| w[1] > w[0]));
            let widths: Vec<f64> = e.windows(2).map(|w| w[1] - w[0]).collect();
            prop_assert!(widths.windows(2).all(|w| w[1] >= w[0] - 1e-12 * span));
        }

        #[test]
        fn onehot_sums_to_zero_or_one(depth in -10.0f64..120.0, bins in 1usize..100) {
            let s = DepthBinSpec::new(0.0, 70.4, bins).unwrap();
            let total: f64 = depth_to_onehot(depth, &s).unwrap().iter().sum();
            prop_assert!(total == 0.0 || total == 1.0);
            prop_assert_eq!(total == 1.0, (0.0..=70.4).contains(&depth));
        }
    }
}
