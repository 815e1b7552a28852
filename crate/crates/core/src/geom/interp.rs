use crate::error::{Error, Result};

/// The eight lattice corners around a continuous query and their weights.
/// Corners may lie outside the lattice; they keep their weight but read
/// zero features.
#[derive(Debug, Clone, Copy)]
pub struct TrilinearTaps {
    pub corners: [([i64; 3], f64); 8],
}

impl TrilinearTaps {
    /// Taps for `pos` in continuous index space where lattice nodes sit at
    /// integers. `None` outside `[-0.5, dim - 0.5]` on any axis.
    pub fn new(dims: [usize; 3], pos: [f64; 3]) -> Result<Option<Self>> {
        if pos.iter().any(|x| x.is_nan()) {
            return Err(Error::numeric("trilinear_sample", format!("NaN index {pos:?}")));
        }
        if (0..3).any(|a| !(pos[a] >= -0.5 && pos[a] <= dims[a] as f64 - 0.5)) {
            return Ok(None);
        }
        let base: [i64; 3] = std::array::from_fn(|a| pos[a].floor() as i64);
        let frac: [f64; 3] = std::array::from_fn(|a| pos[a] - base[a] as f64);
        let corners = std::array::from_fn(|n| {
            let bit = |a: usize| (n >> (2 - a)) & 1;
            let idx = std::array::from_fn(|a| base[a] + bit(a) as i64);
            let w = (0..3)
                .map(|a| if bit(a) == 1 { frac[a] } else { 1.0 - frac[a] })
                .product();
            (idx, w)
        });
        Ok(Some(Self { corners }))
    }

    /// In-lattice corners as row-major flat indices.
    pub fn in_lattice(&self, dims: [usize; 3]) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.corners.iter().filter_map(move |&(idx, w)| {
            let inside = (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < dims[a]);
            inside.then(|| {
                let [i, j, k] = idx.map(|x| x as usize);
                ((i * dims[1] + j) * dims[2] + k, w)
            })
        })
    }

    pub fn weight_sum(&self) -> f64 {
        self.corners.iter().map(|c| c.1).sum()
    }
}

/// Trilinear sample of a `dims x channels` row-major block at `pos`.
/// Queries outside the lattice range give the zero vector.
pub fn trilinear_sample(data: &[f64], dims: [usize; 3], channels: usize, pos: [f64; 3]) -> Result<Vec<f64>> {
    let expected = dims.iter().product::<usize>() * channels;
    if data.len() != expected {
        return Err(Error::shape(
            "trilinear_sample",
            format!("{} values for dims {dims:?} x {channels}", data.len()),
        ));
    }
    let mut out = vec![0.0; channels];
    if let Some(taps) = TrilinearTaps::new(dims, pos)? {
        for (flat, w) in taps.in_lattice(dims) {
            let row = &data[flat * channels..(flat + 1) * channels];
            out.iter_mut().zip(row).for_each(|(o, x)| *o += w * x);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(dims: [usize; 3], f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    out.push(f(i as f64, j as f64, k as f64));
                }
            }
        }
        out
    }

    #[test]
    fn reproduces_nodes() {
        let dims = [3, 4, 5];
        let g = field(dims, |u, v, r| u * 100.0 + v * 10.0 + r);
        assert_eq!(trilinear_sample(&g, dims, 1, [2.0, 1.0, 3.0]).unwrap(), vec![213.0]);
    }

    #[test]
    fn cell_centre_is_corner_mean() {
        let dims = [2, 2, 2];
        let g: Vec<f64> = (0..8).map(|i| (i * i) as f64).collect();
        let s = trilinear_sample(&g, dims, 1, [0.5, 0.5, 0.5]).unwrap();
        assert!((s[0] - g.iter().sum::<f64>() / 8.0).abs() < 1e-12);
    }

    #[test]
    fn exact_on_affine_field() {
        let dims = [6, 5, 7];
        let f = |u: f64, v: f64, r: f64| 2.0 * u - v + 3.0 * r;
        let g = field(dims, f);
        for pos in [[0.3, 2.7, 5.9], [4.999, 0.0, 1.25], [2.5, 3.5, 0.5]] {
            let s = trilinear_sample(&g, dims, 1, pos).unwrap();
            assert!((s[0] - f(pos[0], pos[1], pos[2])).abs() < 1e-10);
        }
    }

    #[test]
    fn outside_range_is_zero_and_nan_errors() {
        let dims = [2, 2, 2];
        let g = vec![1.0; 8];
        assert_eq!(trilinear_sample(&g, dims, 1, [-0.6, 0.0, 0.0]).unwrap(), vec![0.0]);
        assert_eq!(trilinear_sample(&g, dims, 1, [0.0, 1.51, 0.0]).unwrap(), vec![0.0]);
        // Half a cell past the last node: half the weight falls off the lattice.
        assert_eq!(trilinear_sample(&g, dims, 1, [1.5, 0.0, 0.0]).unwrap(), vec![0.5]);
        assert!(trilinear_sample(&g, dims, 1, [f64::NAN, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(u in -0.5f64..3.5, v in -0.5f64..2.5, r in -0.5f64..4.5) {
            let taps = TrilinearTaps::new([4, 3, 5], [u, v, r]).unwrap().unwrap();
            prop_assert!((taps.weight_sum() - 1.0).abs() < 1e-12);
            prop_assert!(taps.corners.iter().all(|c| c.1 >= 0.0));
        }

        #[test]
        fn linear_in_data(seed in 0u64..1000, u in -0.5f64..2.5, v in -0.5f64..2.5, r in -0.5f64..2.5) {
            let dims = [3, 3, 3];
            let a: Vec<f64> = (0..54).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
            let b: Vec<f64> = (0..54).map(|i| ((i as u64 * 7 + seed * 3) % 13) as f64).collect();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let sa = trilinear_sample(&a, dims, 2, [u, v, r]).unwrap();
            let sb = trilinear_sample(&b, dims, 2, [u, v, r]).unwrap();
            let ss = trilinear_sample(&sum, dims, 2, [u, v, r]).unwrap();
            for c in 0..2 {
                prop_assert!((ss[c] - sa[c] - sb[c]).abs() < 1e-10);
            }
        }
    }
}
