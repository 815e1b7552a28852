//! Query fusion: every non-empty LiDAR voxel attends over max-pooled image
//! voxels with multi-head attention, and the attended features are
//! concatenated back onto the LiDAR features in the dense grid.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dense::{DenseGrid, SparseGrid};
use crate::error::{Error, Result};
use crate::geom::GridSpec;
use crate::numgrad::{BoundParams, GatherPlan, LinearMap, ParamStore, Value};

/// Occupied voxels and their feature rows.
#[derive(Debug, Clone)]
pub struct SparseVoxelSet {
    pub indices: Vec<[usize; 3]>,
    /// `[M x C]`
    pub features: Value,
    pub grid: GridSpec,
}

impl SparseVoxelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub lambda: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            d_k: 64,
            d_v: 64,
            lambda: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k == 0 || self.d_v == 0 || self.lambda == 0 {
            return Err(Error::Config(format!(
                "attention: heads, d_k, d_v and lambda must all be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Voxels with any nonzero channel, in lexicographic index order.
pub fn select_nonempty(grid: &DenseGrid) -> Result<SparseVoxelSet> {
    let c = grid.channels();
    let vals = grid.data.values();
    let rows: Vec<usize> = (0..grid.spec.num_voxels())
        .filter(|&i| vals[i * c..(i + 1) * c].iter().any(|&x| x != 0.0))
        .collect();
    let plan = Rc::new(GatherPlan::select(grid.spec.num_voxels(), &rows));
    let features = grid.data.gather(&plan, c)?;
    Ok(SparseVoxelSet {
        indices: rows.iter().map(|&i| grid.spec.unlinear(i)).collect(),
        features,
        grid: grid.spec,
    })
}

/// Channelwise max over `lambda`-cubed blocks, flattened to `[L x C]`.
pub fn pool_and_flatten(image: &DenseGrid, lambda: usize) -> Result<Value> {
    image.data.max_pool3d(lambda)
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub query: LinearMap,
    pub key: LinearMap,
    pub value: LinearMap,
}

/// Per-head projections plus the output map `W^O`.
#[derive(Debug, Clone)]
pub struct QfmParams {
    pub heads: Vec<HeadParams>,
    pub output: LinearMap,
    pub d_k: usize,
}

impl QfmParams {
    /// Registers `wq_i`, `wk_i`, `wv_i`, `wo` and `wo_bias` in `store`.
    pub fn init(store: &mut ParamStore, channels: usize, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let heads = (0..cfg.heads)
            .map(|i| HeadParams {
                query: LinearMap::init(store, &format!("wq_{i}"), channels, cfg.d_k, false, rng),
                key: LinearMap::init(store, &format!("wk_{i}"), channels, cfg.d_k, false, rng),
                value: LinearMap::init(store, &format!("wv_{i}"), channels, cfg.d_v, false, rng),
            })
            .collect();
        let output = LinearMap::init(store, "wo", cfg.heads * cfg.d_v, channels, true, rng);
        Ok(Self {
            heads,
            output,
            d_k: cfg.d_k,
        })
    }

    /// Looks up tensors named as by [`QfmParams::init`]; the head count is
    /// the number of consecutive `wq_i` entries.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let need = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Config(format!("parameter bundle lacks `{name}`")))
        };
        let mut heads = Vec::new();
        while store.find(&format!("wq_{}", heads.len())).is_some() {
            let i = heads.len();
            heads.push(HeadParams {
                query: LinearMap::from_store(store, need(&format!("wq_{i}"))?, None)?,
                key: LinearMap::from_store(store, need(&format!("wk_{i}"))?, None)?,
                value: LinearMap::from_store(store, need(&format!("wv_{i}"))?, None)?,
            });
        }
        if heads.is_empty() {
            return Err(Error::Config("parameter bundle has no attention heads".into()));
        }
        let output = LinearMap::from_store(store, need("wo")?, store.find("wo_bias"))?;
        let d_k = heads[0].query.out_dim;
        let d_v_total: usize = heads.iter().map(|h| h.value.out_dim).sum();
        for h in &heads {
            let c = h.query.in_dim;
            if h.key.out_dim != d_k || h.query.out_dim != d_k || h.key.in_dim != c || h.value.in_dim != c {
                return Err(Error::shape("qfm_params", "inconsistent head projection shapes"));
            }
        }
        if output.in_dim != d_v_total {
            return Err(Error::shape(
                "qfm_params",
                format!("wo expects {} inputs, heads produce {d_v_total}", output.in_dim),
            ));
        }
        Ok(Self { heads, output, d_k })
    }

    pub fn channels(&self) -> usize {
        self.output.out_dim
    }
}

/// Attention output with the per-head intermediates exposed for auditing.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    /// `A_M`, `[M x C]`.
    pub output: Value,
    /// Scaled logits `Q K^T / sqrt(d_k)` per head.
    pub logits: Vec<Value>,
    /// Row-stochastic attention weights per head.
    pub attention: Vec<Value>,
}

/// Multi-head attention with LiDAR voxel rows as queries and pooled image
/// voxel rows as keys and values.
pub fn fuse(lidar: &Value, image: &Value, params: &QfmParams, bound: &BoundParams) -> Result<Value> {
    Ok(fuse_traced(lidar, image, params, bound)?.output)
}

pub fn fuse_traced(lidar: &Value, image: &Value, params: &QfmParams, bound: &BoundParams) -> Result<FusionTrace> {
    let c = params.channels();
    let (m, l) = match (lidar.shape(), image.shape()) {
        (&[m, cp], &[l, ci]) if cp == c && ci == c => (m, l),
        (a, b) => {
            return Err(Error::shape(
                "fuse",
                format!("queries {a:?} and keys {b:?} must both have {c} channels"),
            ))
        }
    };
    if l == 0 {
        return Err(Error::Contract("fuse: no image voxels to attend over".into()));
    }
    let scale = 1.0 / (params.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads.len());
    let mut logits = Vec::with_capacity(params.heads.len());
    let mut attention = Vec::with_capacity(params.heads.len());
    for h in &params.heads {
        let q = h.query.forward(lidar, bound)?;
        let k = h.key.forward(image, bound)?;
        let v = h.value.forward(image, bound)?;
        let s = q.matmul(&k.transpose()?)?.scale(scale);
        let a = s.softmax_rows()?;
        heads.push(a.matmul(&v)?);
        logits.push(s);
        attention.push(a);
    }
    let output = params.output.forward(&Value::concat_cols(&heads)?, bound)?;
    debug_assert_eq!(output.shape(), &[m, c]);
    Ok(FusionTrace {
        output,
        logits,
        attention,
    })
}

/// Scatters `[F_P | A_M]` back to the occupied voxels of a zero grid with
/// twice the channels.
pub fn concat_restore(attended: &Value, lidar: &SparseVoxelSet) -> Result<DenseGrid> {
    concat_sparse(attended, lidar)?.to_dense()
}

/// [`concat_restore`] without the scatter: the fused rows stay attached to
/// their voxels.
pub fn concat_sparse(attended: &Value, lidar: &SparseVoxelSet) -> Result<SparseGrid> {
    if attended.shape().first() != Some(&lidar.len()) {
        return Err(Error::shape(
            "concat_restore",
            format!("{:?} attended rows for {} voxels", attended.shape(), lidar.len()),
        ));
    }
    let fused = Value::concat_cols(&[lidar.features.clone(), attended.clone()])?;
    let linear = lidar.indices.iter().map(|&i| lidar.grid.linear(i)).collect();
    SparseGrid::new(lidar.grid, fused, linear).map_err(|e| match e {
        Error::Contract(msg) => Error::Contract(format!("internal: {msg}")),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{grad_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3]) -> GridSpec {
        GridSpec::new([0.0; 3], [1.0; 3], dims).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn select_examples() {
        let g = DenseGrid::zeros(grid([3, 3, 4]), 2);
        assert_eq!(select_nonempty(&g).unwrap().len(), 0);

        let mut t = Tensor::zeros(&[3, 3, 4, 2]);
        let off = t.offset(&[1, 2, 3, 1]);
        t.data_mut()[off] = -0.5;
        let s = select_nonempty(&DenseGrid::from_tensor(grid([3, 3, 4]), t).unwrap()).unwrap();
        assert_eq!(s.indices, vec![[1, 2, 3]]);
        assert_eq!(s.features.values(), &[0.0, -0.5]);
    }

    #[test]
    fn select_matches_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = grid([5, 4, 3]);
        let t = Tensor::from_fn(&[5, 4, 3, 3], |_| if rng.random_bool(0.2) { rng.random_range(-1.0..1.0) } else { 0.0 });
        let s = select_nonempty(&DenseGrid::from_tensor(spec, t.clone()).unwrap()).unwrap();
        let mut expect = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                for k in 0..3 {
                    if (0..3).any(|c| t.at(&[i, j, k, c]) != 0.0) {
                        expect.push([i, j, k]);
                    }
                }
            }
        }
        assert_eq!(s.indices, expect);
    }

    #[test]
    fn pooling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_t(&mut rng, &[3, 2, 5, 2]);
        let g = DenseGrid::from_tensor(grid([3, 2, 5]), t.clone()).unwrap();
        assert_eq!(pool_and_flatten(&g, 1).unwrap().values(), t.data());

        let g = DenseGrid::from_tensor(grid([5, 5, 5]), Tensor::full(&[5, 5, 5, 2], 3.0)).unwrap();
        let p = pool_and_flatten(&g, 4).unwrap();
        assert_eq!(p.shape(), &[8, 2]);
        assert!(p.values().iter().all(|&x| x == 3.0));

        let mut t = Tensor::zeros(&[4, 4, 4, 2]);
        let a = t.offset(&[0, 3, 1, 0]);
        let b = t.offset(&[2, 2, 2, 1]);
        t.data_mut()[a] = 5.0;
        t.data_mut()[b] = 7.0;
        let p = pool_and_flatten(&DenseGrid::from_tensor(grid([4, 4, 4]), t).unwrap(), 4).unwrap();
        assert_eq!(p.values(), &[5.0, 7.0]);
    }

    #[test]
    fn partial_blocks_ignore_missing_voxels() {
        // All-negative features: zero padding would wrongly report 0.
        let g = DenseGrid::from_tensor(grid([5, 1, 1]), Tensor::full(&[5, 1, 1, 1], -2.0)).unwrap();
        let p = pool_and_flatten(&g, 4).unwrap();
        assert_eq!(p.values(), &[-2.0, -2.0]);
    }

    fn setup(heads: usize, d: usize, c: usize, seed: u64) -> (ParamStore, QfmParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig { heads, d_k: d, d_v: d, lambda: 2 };
        let p = QfmParams::init(&mut store, c, &cfg, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn single_key_broadcasts_value_row() {
        let (store, p) = setup(2, 3, 4, 0);
        let b = store.bind();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fp = Value::constant(rand_t(&mut rng, &[5, 4]));
        let fi = Value::constant(rand_t(&mut rng, &[1, 4]));
        let tr = fuse_traced(&fp, &fi, &p, &b).unwrap();
        for a in &tr.attention {
            assert!(a.values().iter().all(|&x| x == 1.0));
        }
        let row0 = &tr.output.values()[..4];
        for r in 1..5 {
            assert_eq!(&tr.output.values()[r * 4..(r + 1) * 4], row0);
        }
    }

    #[test]
    fn duplicated_keys_do_not_change_output() {
        let (store, p) = setup(3, 4, 4, 2);
        let b = store.bind();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fp = Value::constant(rand_t(&mut rng, &[3, 4]));
        let row = rand_t(&mut rng, &[4]);
        let dup = |l: usize| Value::constant(Tensor::from_fn(&[l, 4], |i| row.data()[i % 4]));
        let a = fuse(&fp, &dup(1), &p, &b).unwrap();
        let c = fuse(&fp, &dup(7), &p, &b).unwrap();
        assert!(a.data().max_abs_diff(c.data()) < 1e-12);
    }

    #[test]
    fn empty_queries_and_keys() {
        let (store, p) = setup(1, 2, 3, 0);
        let b = store.bind();
        let fi = Value::constant(Tensor::zeros(&[4, 3]));
        let out = fuse(&Value::constant(Tensor::zeros(&[0, 3])), &fi, &p, &b).unwrap();
        assert_eq!(out.shape(), &[0, 3]);
        let err = fuse(&Value::constant(Tensor::zeros(&[2, 3])), &Value::constant(Tensor::zeros(&[0, 3])), &p, &b);
        assert!(matches!(err, Err(Error::Contract(_))));
        assert!(fuse(&Value::constant(Tensor::zeros(&[2, 5])), &fi, &p, &b).is_err());
    }

    #[test]
    fn logits_scale_quadratically_with_query_and_key_scaling() {
        let (store, p) = setup(2, 3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fp = rand_t(&mut rng, &[3, 4]);
        let fi = rand_t(&mut rng, &[5, 4]);
        let b = store.bind();
        let base = fuse_traced(&Value::constant(fp.clone()), &Value::constant(fi.clone()), &p, &b).unwrap();
        // Scaling both inputs by c scales Q and K by c (no bias on projections).
        let c = 1.7;
        let sc = |t: &Tensor| Value::constant(Tensor::from_fn(t.shape(), |i| c * t.data()[i]));
        let scaled = fuse_traced(&sc(&fp), &sc(&fi), &p, &b).unwrap();
        for (l0, l1) in base.logits.iter().zip(&scaled.logits) {
            for (x, y) in l0.values().iter().zip(l1.values()) {
                assert!((y - c * c * x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn restore_layout_and_reselection() {
        let (mut store, p) = setup(2, 3, 2, 7);
        let bias = store.find("wo_bias").unwrap();
        store.get_mut(bias).data_mut().copy_from_slice(&[0.5, -0.25]);
        let b = store.bind();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = grid([4, 3, 2]);
        let t = Tensor::from_fn(&[4, 3, 2, 2], |_| if rng.random_bool(0.3) { rng.random_range(0.1..1.0) } else { 0.0 });
        let pgrid = DenseGrid::from_tensor(spec, t.clone()).unwrap();
        let sparse = select_nonempty(&pgrid).unwrap();
        let fi = Value::constant(rand_t(&mut rng, &[3, 2]));
        let am = fuse(&sparse.features, &fi, &p, &b).unwrap();
        let fused = concat_restore(&am, &sparse).unwrap();
        assert_eq!(fused.channels(), 4);
        assert_eq!(select_nonempty(&fused).unwrap().indices, sparse.indices);
        for &idx in &sparse.indices {
            assert_eq!(&fused.voxel(idx)[..2], pgrid.voxel(idx));
        }

        let empty = select_nonempty(&DenseGrid::zeros(spec, 2)).unwrap();
        let am = fuse(&empty.features, &fi, &p, &b).unwrap();
        let z = concat_restore(&am, &empty).unwrap();
        assert_eq!(z.channels(), 4);
        assert!(z.data.values().iter().all(|&x| x == 0.0));
        assert!(concat_restore(&Value::constant(Tensor::zeros(&[1, 2])), &empty).is_err());
    }

    #[test]
    fn params_round_trip_through_store_names() {
        let (store, p) = setup(3, 5, 4, 1);
        let q = QfmParams::from_store(&store).unwrap();
        assert_eq!(q.heads.len(), 3);
        assert_eq!(q.d_k, p.d_k);
        assert!(q.output.bias.is_some());
    }

    #[test]
    fn fuse_gradients_match_differences() {
        let (store, p) = setup(2, 3, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fp = rand_t(&mut rng, &[3, 4]);
        let fi = Value::constant(rand_t(&mut rng, &[5, 4]));
        let w = Value::constant(rand_t(&mut rng, &[3, 4]));
        let err = grad_check(
            |x| Ok(fuse(x, &fi, &p, &store.bind_frozen())?.mul(&w)?.sum()),
            &fp,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err:e}");
    }
}
