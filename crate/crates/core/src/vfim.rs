//! Object-level interaction between the LiDAR and image voxel grids: RoI
//! features pooled from both grids for the same proposal are pushed
//! together with a symmetric stop-gradient cosine objective.


use rand::seq::SliceRandom;
use rand::Rng;

use crate::dense::VoxelFeatures;
use crate::error::{Error, Result};
use crate::geom::{iou_3d, Box3D, GridSpec, TrilinearTaps, Vector3};
use crate::numgrad::{pairwise_sum, BoundParams, GatherPlan, LinearMap, ParamStore, Tensor, Value};

/// Sub-cells per box axis used by RoI pooling.
pub const DEFAULT_POOL_SIZE: usize = 6;
/// Hidden and output width of the encoder and predictor.
pub const DEFAULT_HEAD_WIDTH: usize = 256;

/// Fixed-length descriptor of one box: `pool³ x C` values, sub-cells in
/// lexicographic order with channels innermost.
#[derive(Debug, Clone)]
pub struct RoIFeature {
    pub data: Value,
    pub source_box: Box3D,
}

/// Centres of the `pool³` sub-cells of `b`, in the box's rotated frame.
pub fn subcell_centers(b: &Box3D, pool: usize) -> Vec<Vector3<f64>> {
    let g = pool as f64;
    let mut out = Vec::with_capacity(pool * pool * pool);
    for i in 0..pool {
        for j in 0..pool {
            for k in 0..pool {
                let local = Vector3::new(
                    ((i as f64 + 0.5) / g - 0.5) * b.size[0],
                    ((j as f64 + 0.5) / g - 0.5) * b.size[1],
                    ((k as f64 + 0.5) / g - 0.5) * b.size[2],
                );
                out.push(b.to_world(&local));
            }
        }
    }
    out
}

fn roi_plan(spec: &GridSpec, boxes: &[Box3D], pool: usize) -> Result<GatherPlan> {
    let dims = spec.dims;
    let mut plan = GatherPlan::new(spec.num_voxels());
    for b in boxes {
        for p in subcell_centers(b, pool) {
            match TrilinearTaps::new(dims, spec.lattice_coords(&p))? {
                Some(t) => plan.push_row(t.in_lattice(dims)),
                None => plan.push_row([]),
            }
        }
    }
    Ok(plan)
}

/// Pools every box at once into a `[K x pool³·C]` matrix. Differentiable
/// in the grid's features.
pub fn voxel_roi_pool_batch(grid: &(impl VoxelFeatures + ?Sized), boxes: &[Box3D], pool: usize) -> Result<Value> {
    if pool == 0 {
        return Err(Error::Config("RoI pool size must be >= 1".into()));
    }
    let c = grid.channels();
    grid.gather_voxels(roi_plan(grid.spec(), boxes, pool)?)?
        .reshape(&[boxes.len(), pool * pool * pool * c])
}

/// Samples the grid trilinearly at each sub-cell centre of `b`; sub-cells
/// outside the grid read zero.
pub fn voxel_roi_pool(grid: &(impl VoxelFeatures + ?Sized), b: &Box3D, pool: usize) -> Result<RoIFeature> {
    let m = voxel_roi_pool_batch(grid, std::slice::from_ref(b), pool)?;
    let n = m.len();
    Ok(RoIFeature {
        data: m.reshape(&[n])?,
        source_box: *b,
    })
}

/// Encoder `Ω` and predictor `Ψ`, each two affine layers with a ReLU
/// between.
#[derive(Debug, Clone, Copy)]
pub struct InteractionHeads {
    pub encoder: [LinearMap; 2],
    pub predictor: [LinearMap; 2],
}

impl InteractionHeads {
    pub fn init(store: &mut ParamStore, in_dim: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            encoder: [
                LinearMap::init(store, "vfim_enc_0", in_dim, width, true, rng),
                LinearMap::init(store, "vfim_enc_1", width, width, true, rng),
            ],
            predictor: [
                LinearMap::init(store, "vfim_pred_0", width, width, true, rng),
                LinearMap::init(store, "vfim_pred_1", width, width, true, rng),
            ],
        }
    }

    fn mlp(layers: &[LinearMap; 2], x: &Value, bound: &BoundParams) -> Result<Value> {
        layers[1].forward(&layers[0].forward(x, bound)?.relu(), bound)
    }

    pub fn encode(&self, x: &Value, bound: &BoundParams) -> Result<Value> {
        Self::mlp(&self.encoder, x, bound)
    }

    pub fn predict(&self, z: &Value, bound: &BoundParams) -> Result<Value> {
        Self::mlp(&self.predictor, z, bound)
    }
}

/// `CosSim(p, e) = -<p/|p|, e/|e|>` row by row, as a `[K]` vector.
pub fn neg_cosine_rows(p: &Value, e: &Value) -> Result<Value> {
    Ok(p.l2_normalize_rows()?
        .mul(&e.l2_normalize_rows()?)?
        .sum_rows()?
        .scale(-1.0))
}

#[derive(Debug, Clone)]
pub struct VfimOutput {
    pub loss: Value,
    /// Mean raw cosine between `Ω(P_B)` and `Ω(I_B)`.
    pub encoded_cosine: f64,
}

/// Symmetric stop-gradient loss over paired batches `[K x D]`:
/// `mean_k ½·CosSim(Ψ(Ω(P)), sg(Ω(I))) + ½·CosSim(Ψ(Ω(I)), sg(Ω(P)))`.
/// An empty batch gives zero.
pub fn vfim_loss_batched(
    lidar: &Value,
    image: &Value,
    heads: &InteractionHeads,
    bound: &BoundParams,
) -> Result<VfimOutput> {
    if lidar.shape() != image.shape() {
        return Err(Error::Contract(format!(
            "vfim: paired RoI batches differ: {:?} vs {:?}",
            lidar.shape(),
            image.shape()
        )));
    }
    if lidar.shape().first().copied().unwrap_or(0) == 0 {
        return Ok(VfimOutput {
            loss: Value::constant(Tensor::scalar(0.0)),
            encoded_cosine: 0.0,
        });
    }
    let e_p = heads.encode(lidar, bound)?;
    let e_i = heads.encode(image, bound)?;
    let p_p = heads.predict(&e_p, bound)?;
    let p_i = heads.predict(&e_i, bound)?;
    let lidar_term = neg_cosine_rows(&p_p, &e_i.stop_grad())?.mean();
    let image_term = neg_cosine_rows(&p_i, &e_p.stop_grad())?.mean();
    let loss = lidar_term.scale(0.5).add(&image_term.scale(0.5))?;

    let raw = neg_cosine_rows(&e_p.stop_grad(), &e_i.stop_grad())?;
    let encoded_cosine = -pairwise_sum(raw.values()) / raw.len() as f64;
    Ok(VfimOutput {
        loss,
        encoded_cosine,
    })
}

/// List form of [`vfim_loss_batched`].
pub fn vfim_loss(
    lidar: &[RoIFeature],
    image: &[RoIFeature],
    heads: &InteractionHeads,
    bound: &BoundParams,
) -> Result<Value> {
    if lidar.len() != image.len() {
        return Err(Error::Contract(format!(
            "vfim: {} LiDAR RoIs paired with {} image RoIs",
            lidar.len(),
            image.len()
        )));
    }
    if lidar.is_empty() {
        return Ok(Value::constant(Tensor::scalar(0.0)));
    }
    let stack = |rs: &[RoIFeature]| Value::concat_rows(&rs.iter().map(|r| r.data.clone()).collect::<Vec<_>>());
    Ok(vfim_loss_batched(&stack(lidar)?, &stack(image)?, heads, bound)?.loss)
}

/// A proposal chosen for the second stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledProposal {
    pub boxed: Box3D,
    pub max_iou: f64,
    /// Ground truth with the highest IoU, if any ground truth exists.
    pub gt_index: Option<usize>,
    pub positive: bool,
}

/// Draws up to `n` proposals: at most `n/2` positives (best IoU with any
/// ground truth above `pos_iou`), the rest negatives.
pub fn sample_proposals(
    proposals: &[(Box3D, f64)],
    gt: &[Box3D],
    n: usize,
    pos_iou: f64,
    rng: &mut impl Rng,
) -> Result<Vec<SampledProposal>> {
    if n % 2 != 0 {
        return Err(Error::Contract(format!("sample_proposals: N must be even, got {n}")));
    }
    let labelled: Vec<SampledProposal> = proposals
        .iter()
        .map(|(b, _)| {
            let best = gt
                .iter()
                .enumerate()
                .map(|(i, g)| (i, iou_3d(b, g)))
                .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((i, v)),
                });
            let max_iou = best.map_or(0.0, |b| b.1);
            SampledProposal {
                boxed: *b,
                max_iou,
                gt_index: best.map(|b| b.0),
                positive: max_iou > pos_iou,
            }
        })
        .collect();
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = labelled.into_iter().partition(|p| p.positive);
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(n / 2);
    let rest = n - pos.len();
    neg.truncate(rest);
    pos.extend(neg);
    Ok(pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::DenseGrid;
    use crate::numgrad::{grad_check, Sgd, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Heads whose encoder and predictor act as the identity on positive
    /// inputs.
    fn identity_heads(dim: usize) -> (ParamStore, InteractionHeads) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let heads = InteractionHeads::init(&mut store, dim, dim, &mut rng);
        let eye = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        for l in heads.encoder.iter().chain(&heads.predictor) {
            *store.get_mut(l.weight) = eye.clone();
        }
        (store, heads)
    }

    fn feat(v: Vec<f64>) -> RoIFeature {
        RoIFeature {
            data: Value::constant(Tensor::vector(v)),
            source_box: Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap(),
        }
    }

    #[test]
    fn identical_pairs_give_minus_one() {
        let (store, heads) = identity_heads(3);
        let b = store.bind();
        let loss = vfim_loss(&[feat(vec![1.0, 2.0, 0.5])], &[feat(vec![1.0, 2.0, 0.5])], &heads, &b).unwrap();
        assert!((loss.item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pairs_give_zero() {
        let (store, heads) = identity_heads(3);
        let b = store.bind();
        let loss = vfim_loss(&[feat(vec![1.0, 0.0, 0.0])], &[feat(vec![0.0, 2.0, 0.0])], &heads, &b).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_batches() {
        let (store, heads) = identity_heads(2);
        let b = store.bind();
        assert_eq!(vfim_loss(&[], &[], &heads, &b).unwrap().item(), 0.0);
        assert!(matches!(
            vfim_loss(&[feat(vec![1.0, 0.0])], &[], &heads, &b),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let p = Value::constant(Tensor::new(vec![1, 3], vec![0.2, -1.0, 0.7]).unwrap());
        let e = Value::constant(Tensor::new(vec![1, 3], vec![1.5, 0.3, -0.4]).unwrap());
        let a = neg_cosine_rows(&p, &e).unwrap().item();
        let b = neg_cosine_rows(&p.scale(37.0), &e).unwrap().item();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn swapping_modalities_is_bit_identical() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let heads = InteractionHeads::init(&mut store, 6, 8, &mut rng);
        let x = Value::constant(Tensor::from_fn(&[4, 6], |_| rng.random_range(-1.0..1.0)));
        let y = Value::constant(Tensor::from_fn(&[4, 6], |_| rng.random_range(-1.0..1.0)));
        let b = store.bind();
        let l1 = vfim_loss_batched(&x, &y, &heads, &b).unwrap().loss.item();
        let l2 = vfim_loss_batched(&y, &x, &heads, &b).unwrap().loss.item();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn detached_branch_receives_no_gradient() {
        // Only the stop-gradient targets depend on `target`, so its gradient
        // must be exactly zero; the predictor branch matches differences.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads = InteractionHeads::init(&mut store, 4, 6, &mut rng);
        let b = store.bind_frozen();
        let x0 = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        let t0 = Tensor::from_fn(&[3, 6], |_| rng.random_range(-1.0..1.0));
        let loss_of = |x: &Value, t: &Value| -> Result<Value> {
            let p = heads.predict(&heads.encode(x, &b)?, &b)?;
            Ok(neg_cosine_rows(&p, &t.stop_grad())?.mean())
        };
        let x = Value::param(x0.clone());
        let t = Value::param(t0.clone());
        loss_of(&x, &t).unwrap().backward().unwrap();
        assert!(t.grad().is_none());
        assert!(x.grad().is_some());
        let tc = Value::constant(t0);
        assert!(grad_check(|x| loss_of(x, &tc), &x0, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn roi_pool_constant_grid() {
        let spec = GridSpec::new([0.0; 3], [0.5; 3], [8, 8, 8]).unwrap();
        let g = DenseGrid::from_tensor(spec, Tensor::full(&[8, 8, 8, 2], 1.25)).unwrap();
        let b = Box3D::new([2.0, 2.0, 2.0], [1.5, 1.0, 0.8], 0.4).unwrap();
        let r = voxel_roi_pool(&g, &b, 6).unwrap();
        assert_eq!(r.data.len(), 6 * 6 * 6 * 2);
        assert!(r.data.values().iter().all(|&x| (x - 1.25).abs() < 1e-12));
    }

    #[test]
    fn roi_pool_translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::from_fn(&[6, 6, 6, 2], |_| rng.random_range(-1.0..1.0));
        let g0 = DenseGrid::from_tensor(GridSpec::new([0.0; 3], [0.5; 3], [6, 6, 6]).unwrap(), t.clone()).unwrap();
        let g1 = DenseGrid::from_tensor(GridSpec::new([0.5, 0.0, 0.0], [0.5; 3], [6, 6, 6]).unwrap(), t).unwrap();
        let b0 = Box3D::new([1.5, 1.25, 1.5], [1.0, 1.5, 1.0], 0.0).unwrap();
        let b1 = Box3D::new([2.0, 1.25, 1.5], [1.0, 1.5, 1.0], 0.0).unwrap();
        let r0 = voxel_roi_pool(&g0, &b0, 4).unwrap();
        let r1 = voxel_roi_pool(&g1, &b1, 4).unwrap();
        assert_eq!(r0.data.values(), r1.data.values());
    }

    #[test]
    fn roi_pool_matches_linear_field() {
        let spec = GridSpec::new([-2.0, -3.0, -1.0], [0.25, 0.5, 0.2], [24, 16, 12]).unwrap();
        let f = |p: &Vector3<f64>| 0.5 * p.x - 2.0 * p.y + 3.0 * p.z + 1.0;
        let mut t = Tensor::zeros(&[24, 16, 12, 1]);
        for i in 0..spec.num_voxels() {
            let c = spec.voxel_center(spec.unlinear(i).map(|x| x as i64)).unwrap();
            t.data_mut()[i] = f(&c);
        }
        let g = DenseGrid::from_tensor(spec, t).unwrap();
        let b = Box3D::new([1.0, 0.5, 0.3], [2.0, 3.0, 1.0], 0.0).unwrap();
        let r = voxel_roi_pool(&g, &b, 6).unwrap();
        for (v, c) in r.data.values().iter().zip(subcell_centers(&b, 6)) {
            assert!((v - f(&c)).abs() < 1e-10);
        }
    }

    #[test]
    fn roi_pool_outside_grid_is_zero() {
        let spec = GridSpec::new([0.0; 3], [1.0; 3], [4, 4, 4]).unwrap();
        let g = DenseGrid::from_tensor(spec, Tensor::full(&[4, 4, 4, 1], 1.0)).unwrap();
        let b = Box3D::new([50.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        assert!(voxel_roi_pool(&g, &b, 3).unwrap().data.values().iter().all(|&x| x == 0.0));
    }

    fn car(x: f64, y: f64) -> Box3D {
        Box3D::new([x, y, -1.0], [3.9, 1.6, 1.56], 0.0).unwrap()
    }

    #[test]
    fn sampling_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = vec![car(10.0, 0.0)];
        let props: Vec<(Box3D, f64)> = (0..10).map(|_| (gt[0], 0.5)).collect();
        let s = sample_proposals(&props, &gt, 8, 0.55, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|p| p.positive));

        let props: Vec<(Box3D, f64)> = (0..10).map(|i| (car(i as f64, 3.0), 0.1)).collect();
        let s = sample_proposals(&props, &[], 8, 0.55, &mut rng).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|p| !p.positive && p.gt_index.is_none()));

        assert!(sample_proposals(&[], &gt, 8, 0.55, &mut rng).unwrap().is_empty());
        assert!(sample_proposals(&props, &gt, 7, 0.55, &mut rng).is_err());
    }

    #[test]
    fn sampling_partition_matches_iou_labels() {
        let gt = vec![car(10.0, 0.0), car(20.0, 5.0)];
        // Shifts along the heading give IoUs on both sides of 0.55.
        let props: Vec<(Box3D, f64)> = (0..16)
            .map(|i| (car(10.0 + 0.2 * i as f64, 0.0), 1.0))
            .chain((0..8).map(|i| (car(20.0, 5.0 + 0.15 * i as f64), 1.0)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample_proposals(&props, &gt, 64, 0.55, &mut rng).unwrap();
        assert_eq!(s.len(), props.len());
        for p in &s {
            let best = gt.iter().map(|g| iou_3d(&p.boxed, g)).fold(0.0, f64::max);
            assert_eq!(p.positive, best > 0.55);
            assert_eq!(p.max_iou, best);
        }
        let npos = s.iter().filter(|p| p.positive).count();
        assert!(npos > 0 && npos < s.len());
        let again = sample_proposals(&props, &gt, 64, 0.55, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn training_on_a_fixed_batch_aligns_the_encodings() {
        for seed in 0..6u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = if seed % 2 == 0 { 0.5 } else { 2.0 };
            let base = Tensor::from_fn(&[8, 24], |_| rng.random_range(-1.0..1.0));
            let view = |rng: &mut ChaCha8Rng| {
                Value::constant(Tensor::from_fn(&[8, 24], |i| base.data()[i] + noise * rng.random_range(-1.0..1.0)))
            };
            let (p, i) = (view(&mut rng), view(&mut rng));
            let mut store = ParamStore::new();
            let heads = InteractionHeads::init(&mut store, 24, 256, &mut rng);
            let sgd = Sgd { lr: 0.01 };
            let mut first = None;
            let mut last = (0.0, 0.0);
            for _ in 0..500 {
                let bound = store.bind();
                let out = vfim_loss_batched(&p, &i, &heads, &bound).unwrap();
                out.loss.backward().unwrap();
                sgd.step(&mut store, &bound);
                last = (out.loss.item(), out.encoded_cosine);
                first.get_or_insert(last);
            }
            let end = vfim_loss_batched(&p, &i, &heads, &store.bind_frozen()).unwrap();
            let (l0, c0) = first.unwrap();
            assert!(end.loss.item() < l0 && last.0 < l0, "seed {seed}: loss {l0} -> {}", end.loss.item());
            assert!(end.encoded_cosine > c0, "seed {seed}: cosine {c0} -> {}", end.encoded_cosine);
        }
    }
}
