//! End-to-end training demo: synthetic scene, voxelisation, image lifting,
//! query fusion, proposal and refinement heads, and the VFIM term, trained
//! with plain SGD.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dense::{DenseGrid, SparseGrid, VoxelFeatures};
use crate::detector::{assign_anchors, propose, ProposalHead, RefineHead};
use crate::error::{Error, Result};
use crate::geom::{Box3D, Calibration};
use crate::ivlm::{build_frustum, depth_bins_from_points, lift_plan, lift_with_plan, LiftPlan};
use crate::losses::{encode_box, rcnn_loss_graph, rpn_loss_graph, total_loss_graph, AnchorTargets};
use crate::numgrad::{vxf, BoundParams, GatherPlan, ParamStore, Sgd, Value};
use crate::qfm::{concat_sparse, fuse, pool_and_flatten, select_nonempty, QfmParams, SparseVoxelSet};
use crate::vfim::{sample_proposals, vfim_loss_batched, voxel_roi_pool_batch, InteractionHeads, VfimOutput};

use super::config::RunConfig;
use super::scene::{gen_scene, voxelize_points, SyntheticScene};

/// Independent generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PARAM_STREAM: u64 = 0;
const SCENE_STREAM: u64 = 1;
const SAMPLE_STREAM_BASE: u64 = 1 << 32;

/// Seed of the `k`-th training scene of a run.
pub fn scene_seed(run_seed: u64, k: usize) -> u64 {
    let mut rng = stream_rng(run_seed, SCENE_STREAM);
    let mut s = 0;
    for _ in 0..=k {
        s = rng.next_u64();
    }
    s
}

/// All learnable parts of the demo detector.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub qfm: QfmParams,
    pub rpn: ProposalHead,
    pub refine: RefineHead,
    pub vfim: InteractionHeads,
}

impl Model {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, PARAM_STREAM);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let qfm = QfmParams::init(&mut store, c, &cfg.qfm, &mut rng)?;
        let rpn = ProposalHead::init(&mut store, 2 * c, cfg.anchor, &mut rng);
        let refine = RefineHead::init(&mut store, 2 * c, cfg.train.pool, &mut rng);
        let vfim = InteractionHeads::init(&mut store, cfg.train.pool.pow(3) * c, cfg.train.head_width, &mut rng);
        Ok(Self {
            store,
            qfm,
            rpn,
            refine,
            vfim,
        })
    }
}

/// Everything about a scene that does not depend on parameters.
pub struct PreparedScene {
    /// Position in the run's scene cycle.
    pub index: usize,
    pub scene: SyntheticScene,
    /// Occupied LiDAR voxels, as fusion queries and as a pooling grid.
    pub lidar: SparseVoxelSet,
    pub lidar_grid: SparseGrid,
    pub image: DenseGrid,
    pub image_rows: Value,
    pub anchor_targets: AnchorTargets,
}

/// Lifts the scene's image features into the image voxel grid.
pub fn lift_scene(cfg: &RunConfig, scene: &SyntheticScene, plan: &LiftPlan) -> Result<DenseGrid> {
    let (w, h) = cfg.camera.feature_dims();
    let depth = depth_bins_from_points(&scene.points, &scene.calib, (w, h), scene.image_features.stride, &cfg.depth)?;
    let frustum = build_frustum(&scene.image_features, &depth)?;
    lift_with_plan(&frustum, plan, &cfg.image_grid)
}

pub fn scene_lift_plan(cfg: &RunConfig, calib: &Calibration) -> Result<LiftPlan> {
    let (w, h) = cfg.camera.feature_dims();
    lift_plan([w, h, cfg.depth.bins], &cfg.depth, cfg.camera.stride as f64, calib, &cfg.image_grid)
}

pub fn prepare_scene(cfg: &RunConfig, index: usize, plan: &LiftPlan) -> Result<PreparedScene> {
    let scene = gen_scene(cfg, scene_seed(cfg.seed, index))?;
    let dense = voxelize_points(&scene.points, &cfg.lidar_grid, cfg.channels, cfg.count_norm)?;
    let lidar = select_nonempty(&dense)?;
    let linear = lidar.indices.iter().map(|&i| cfg.lidar_grid.linear(i)).collect();
    let lidar_grid = SparseGrid::new(cfg.lidar_grid, lidar.features.clone(), linear)?;
    let image = lift_scene(cfg, &scene, plan)?;
    let image_rows = pool_and_flatten(&image, cfg.qfm.lambda)?;
    let anchors = cfg.anchor.anchors(&cfg.lidar_grid);
    let anchor_targets = assign_anchors(&anchors, &scene.gt_boxes, &cfg.anchor);
    Ok(PreparedScene {
        index,
        scene,
        lidar,
        lidar_grid,
        image,
        image_rows,
        anchor_targets,
    })
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    #[serde(rename = "L_total")]
    pub total: f64,
    #[serde(rename = "L_rpn")]
    pub rpn: f64,
    #[serde(rename = "L_rcnn")]
    pub rcnn: f64,
    #[serde(rename = "L_vfim")]
    pub vfim: f64,
    /// Mean raw cosine of the encoded RoI pairs in this step's batch.
    #[serde(skip)]
    pub encoded_cosine: f64,
}

pub struct StepGraph {
    pub total: Value,
    pub row: LossRow,
    pub vfim: VfimOutput,
}

/// Keeps pairs whose pooled features are nonzero in both modalities.
fn nonzero_pairs(lidar: &Value, image: &Value) -> Result<(Value, Value)> {
    let k = lidar.shape()[0];
    let d = lidar.shape()[1];
    let live = |v: &Value, r: usize| v.values()[r * d..(r + 1) * d].iter().any(|&x| x != 0.0);
    let rows: Vec<usize> = (0..k).filter(|&r| live(lidar, r) && live(image, r)).collect();
    if rows.len() == k {
        return Ok((lidar.clone(), image.clone()));
    }
    let plan = Rc::new(GatherPlan::select(k, &rows));
    Ok((lidar.gather(&plan, d)?, image.gather(&plan, d)?))
}

/// VFIM on paired RoI pools of the LiDAR and image grids.
pub fn vfim_on_boxes(
    cfg: &RunConfig,
    model: &Model,
    bound: &BoundParams,
    lidar: &(impl VoxelFeatures + ?Sized),
    image: &(impl VoxelFeatures + ?Sized),
    boxes: &[Box3D],
) -> Result<VfimOutput> {
    let p = voxel_roi_pool_batch(lidar, boxes, cfg.train.pool)?;
    let i = voxel_roi_pool_batch(image, boxes, cfg.train.pool)?;
    let (p, i) = nonzero_pairs(&p, &i)?;
    vfim_loss_batched(&p, &i, &model.vfim, bound)
}

fn check_finite(step: usize, name: &str, v: &Value) -> Result<f64> {
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::numeric("train_demo", format!("step {step}: {name} is {x}")));
    }
    Ok(x)
}

/// Builds the full loss graph for one step.
pub fn forward_step(cfg: &RunConfig, model: &Model, bound: &BoundParams, prep: &PreparedScene, step: usize) -> Result<StepGraph> {
    let scene = &prep.scene;
    let attended = fuse(&prep.lidar.features, &prep.image_rows, &model.qfm, bound)?;
    let fused = concat_sparse(&attended, &prep.lidar)?;

    let rpn_out = model.rpn.forward(&fused, bound)?;
    let rpn = rpn_loss_graph(&rpn_out.logits, &rpn_out.residuals, &prep.anchor_targets, &cfg.loss)?;

    let mut candidates: Vec<(Box3D, f64)> = propose(&fused, &model.rpn, bound, cfg.train.top_k)?
        .into_iter()
        .map(|p| (p.boxed, p.score))
        .collect();
    if cfg.train.gt_proposals {
        candidates.extend(scene.gt_boxes.iter().map(|b| (*b, 1.0)));
    }
    // Seeded by scene rather than step, so a frozen model sees identical
    // batches each time a scene comes round.
    let mut rng = stream_rng(cfg.seed, SAMPLE_STREAM_BASE + prep.index as u64);
    let sampled = sample_proposals(&candidates, &scene.gt_boxes, cfg.train.samples, cfg.train.pos_iou, &mut rng)?;
    let boxes: Vec<Box3D> = sampled.iter().map(|s| s.boxed).collect();

    let rcnn = if boxes.is_empty() {
        Value::constant(crate::numgrad::Tensor::scalar(0.0))
    } else {
        let out = model.refine.forward(&fused, &boxes, bound)?;
        let ious: Vec<f64> = sampled.iter().map(|s| s.max_iou).collect();
        let targets: Vec<(usize, [f64; 7])> = sampled
            .iter()
            .enumerate()
            .filter(|(_, s)| s.positive)
            .map(|(k, s)| (k, encode_box(&scene.gt_boxes[s.gt_index.expect("positives match a box")], &s.boxed)))
            .collect();
        rcnn_loss_graph(&out.iou_logits, &ious, &out.residuals, &targets)?.total
    };

    let vfim = vfim_on_boxes(cfg, model, bound, &prep.lidar_grid, &prep.image, &boxes)?;
    let row = LossRow {
        step,
        total: f64::NAN,
        rpn: check_finite(step, "L_rpn", &rpn.total)?,
        rcnn: check_finite(step, "L_rcnn", &rcnn)?,
        vfim: check_finite(step, "L_vfim", &vfim.loss)?,
        encoded_cosine: vfim.encoded_cosine,
    };
    let total = total_loss_graph(&rpn.total, &rcnn, &vfim.loss, cfg.loss.gamma_vfim)?;
    let row = LossRow {
        total: check_finite(step, "L_total", &total)?,
        ..row
    };
    Ok(StepGraph { total, row, vfim })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<LossRow>,
    /// Mean raw cosine between encoded LiDAR and image RoI features of the
    /// ground-truth boxes of every training scene, after the last update.
    pub final_cosine: f64,
    pub model: Model,
}

/// Runs `cfg.train.steps` SGD steps, cycling through `cfg.train.scenes`
/// scenes. `on_step` sees each row as it is produced.
pub fn train_demo_with(cfg: &RunConfig, mut on_step: impl FnMut(&LossRow)) -> Result<TrainReport> {
    cfg.validate()?;
    let mut model = Model::init(cfg)?;
    let calib = cfg.camera.calibration()?;
    let plan = scene_lift_plan(cfg, &calib)?;
    let scenes = (0..cfg.train.scenes)
        .map(|k| prepare_scene(cfg, k, &plan))
        .collect::<Result<Vec<_>>>()?;
    let sgd = Sgd { lr: cfg.train.lr };
    let mut rows = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let bound = model.store.bind();
        let g = forward_step(cfg, &model, &bound, &scenes[step % scenes.len()], step)?;
        g.total.backward()?;
        sgd.step(&mut model.store, &bound);
        if model.store.iter().any(|(_, _, t)| t.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::numeric("train_demo", format!("step {step}: parameters diverged")));
        }
        on_step(&g.row);
        rows.push(g.row);
    }
    let bound = model.store.bind_frozen();
    let mut cosines = Vec::new();
    for prep in &scenes {
        let out = vfim_on_boxes(cfg, &model, &bound, &prep.lidar_grid, &prep.image, &prep.scene.gt_boxes)?;
        if !prep.scene.gt_boxes.is_empty() {
            cosines.push(out.encoded_cosine);
        }
    }
    let final_cosine = if cosines.is_empty() {
        0.0
    } else {
        cosines.iter().sum::<f64>() / cosines.len() as f64
    };
    Ok(TrainReport {
        rows,
        final_cosine,
        model,
    })
}

pub fn train_demo(cfg: &RunConfig) -> Result<TrainReport> {
    train_demo_with(cfg, |_| {})
}

/// Writes the curve with header `step,L_total,L_rpn,L_rcnn,L_vfim`.
pub fn write_loss_csv(rows: &[LossRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Container(format!("losses.csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("losses.csv", e))
}

/// Writes every parameter as `<dir>/<name>.vxf`.
pub fn save_params(store: &ParamStore, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (_, name, t) in store.iter() {
        vxf::write(dir.join(format!("{name}.vxf")), t)?;
    }
    Ok(())
}

/// Reads every `*.vxf` file of `dir`, in file-name order.
pub fn load_params(dir: &Path) -> Result<ParamStore> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vxf"))
        .collect();
    paths.sort();
    let mut store = ParamStore::new();
    for p in paths {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        store.add(name, vxf::read(&p)?);
    }
    Ok(store)
}

/// Final-cosine results of one seed under each VFIM weight.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub with_vfim: f64,
    pub without_vfim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub mean_with: f64,
    pub mean_without: f64,
    /// Seeds where the VFIM run ends with the higher cosine.
    pub wins: usize,
    /// One-sided sign-test p-value of `wins` out of the seeds.
    pub p_value: f64,
}

/// `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

/// Trains each seed with `gamma` and with the VFIM term switched off,
/// seeds in parallel.
pub fn ablation(cfg: &RunConfig, seeds: &[u64], gamma: f64) -> Result<AblationReport> {
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let mut on = *cfg;
            on.seed = seed;
            on.loss.gamma_vfim = gamma;
            let mut off = on;
            off.loss.gamma_vfim = 0.0;
            Ok(AblationRun {
                seed,
                with_vfim: train_demo(&on)?.final_cosine,
                without_vfim: train_demo(&off)?.final_cosine,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len().max(1) as f64;
    let wins = runs.iter().filter(|r| r.with_vfim > r.without_vfim).count();
    Ok(AblationReport {
        mean_with: runs.iter().map(|r| r.with_vfim).sum::<f64>() / n,
        mean_without: runs.iter().map(|r| r.without_vfim).sum::<f64>() / n,
        wins,
        p_value: sign_test_p(wins, runs.len()),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small() -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.train.steps = 3;
        cfg.train.scenes = 1;
        cfg
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(10, 10) - 1.0 / 1024.0).abs() < 1e-15);
        assert!((sign_test_p(9, 10) - 11.0 / 1024.0).abs() < 1e-15);
        assert_eq!(sign_test_p(0, 10), 1.0);
    }

    #[test]
    fn zero_learning_rate_gives_flat_curve() {
        let mut cfg = small();
        cfg.train.lr = 0.0;
        let r = train_demo(&cfg).unwrap();
        assert_eq!(r.rows.len(), 3);
        for row in &r.rows[1..] {
            assert_eq!(row.rpn, r.rows[0].rpn);
            assert_eq!(row.vfim, r.rows[0].vfim);
        }
    }

    #[test]
    fn ablation_changes_only_the_vfim_pathway() {
        let cfg = small();
        let mut off = cfg;
        off.loss.gamma_vfim = 0.0;
        let a = train_demo(&cfg).unwrap();
        let b = train_demo(&off).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.rpn, y.rpn);
            assert_eq!(x.rcnn, y.rcnn);
        }
        assert_eq!(a.rows[0].vfim, b.rows[0].vfim);
        assert_ne!(a.rows[2].vfim, b.rows[2].vfim);
        assert_eq!(b.rows[2].total, b.rows[2].rpn + b.rows[2].rcnn);
    }

    #[test]
    fn params_round_trip_through_a_bundle() {
        let cfg = small();
        let model = Model::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_params(&model.store, dir.path()).unwrap();
        let back = load_params(dir.path()).unwrap();
        assert_eq!(back.len(), model.store.len());
        let q = QfmParams::from_store(&back).unwrap();
        assert_eq!(q.heads.len(), cfg.qfm.heads);
        let id = back.find("wo").unwrap();
        assert_eq!(back.get(id), model.store.get(model.qfm.output.weight));
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        let row = LossRow {
            step: 0,
            total: 1.5,
            rpn: 1.0,
            rcnn: 0.5,
            vfim: -0.25,
            encoded_cosine: 0.0,
        };
        write_loss_csv(&[row], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,L_total,L_rpn,L_rcnn,L_vfim\n0,1.5,1.0,0.5,-0.25\n");
    }
}
