//! Point-set networks over MKPs: a per-pair selection scorer and rotation
//! and translation regressors.
//!
//! All three share the PointNet layout without input or feature transform
//! subnetworks: a per-pair MLP over the six MKP coordinates, max pooling,
//! and a dense head. Rotation is regressed as the quaternion vector part
//! `(b, c, d)` of the pose mapping frame `i` into frame `i+1`; the scalar is
//! recovered on the `a ≥ 0` hemisphere.

pub mod checkpoint;
pub mod net;

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{Adam, Dense, PointNet, Trace};

use crate::error::{Error, Result};
use crate::geometry::{yaw_matrix, Pose, UnitQuaternion};
use crate::keypoints::MkpSet;

pub const MKP_WIDTH: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSpec {
    /// Per-pair layer widths after the 6-wide input; the last is the pooled
    /// feature width.
    pub point_widths: Vec<usize>,
    /// Hidden head widths between the pooled feature and the output.
    pub head_widths: Vec<usize>,
    /// Coordinates are multiplied by this before entering the network.
    pub input_scale: f64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            point_widths: vec![64, 128, 256],
            head_widths: vec![128],
            input_scale: 0.05,
        }
    }
}

impl MlpSpec {
    /// Pooled width 1024 with a 512-256 head.
    pub fn wide() -> Self {
        Self {
            point_widths: vec![64, 128, 1024],
            head_widths: vec![512, 256],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.point_widths.is_empty()
            || self.point_widths.contains(&0)
            || self.head_widths.contains(&0)
        {
            return Err(Error::Config(
                "network widths must be non-empty and positive".into(),
            ));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::Config("input_scale must be positive".into()));
        }
        Ok(())
    }
}

/// The three networks and the `MlpSpec` they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub spec: MlpSpec,
    pub selection: PointNet,
    pub rotation: PointNet,
    pub translation: PointNet,
}

impl RegressionModel {
    pub fn random(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, h) = (&spec.point_widths, &spec.head_widths);
        Self {
            spec: spec.clone(),
            selection: PointNet::random(MKP_WIDTH, p, h, 1, true, &mut rng),
            rotation: PointNet::random(MKP_WIDTH, p, h, 3, false, &mut rng),
            translation: PointNet::random(MKP_WIDTH, p, h, 3, false, &mut rng),
        }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let (p, h) = (&spec.point_widths, &spec.head_widths);
        Self {
            spec: spec.clone(),
            selection: PointNet::zeros(MKP_WIDTH, p, h, 1, true),
            rotation: PointNet::zeros(MKP_WIDTH, p, h, 3, false),
            translation: PointNet::zeros(MKP_WIDTH, p, h, 3, false),
        }
    }

    pub fn nets(&self) -> [(&'static str, &PointNet); 3] {
        [
            ("selection", &self.selection),
            ("rotation", &self.rotation),
            ("translation", &self.translation),
        ]
    }

    /// Selects the top `k` pairs and regresses the pose mapping frame `i`
    /// into frame `i+1`. Returns the pose and whether the quaternion vector
    /// had to be clamped onto the unit sphere.
    pub fn estimate(&self, mkps: &MkpSet, k: usize) -> Result<(Pose, bool)> {
        if mkps.is_empty() {
            return Err(Error::InvalidInput("no MKPs to regress from".into()));
        }
        let sel = selection_forward(&self.selection, mkps, k, self.spec.input_scale);
        let chosen = mkps.select(&sel.top_k);
        let v = rotation_forward(&self.rotation, &chosen, self.spec.input_scale);
        let t = translation_forward(&self.translation, &chosen, self.spec.input_scale);
        let rec = UnitQuaternion::recover(&v);
        Ok((
            Pose::from_parts(rec.quaternion.to_rotation(), t),
            rec.clamped,
        ))
    }
}

/// Flattens MKP rows into the network input.
pub fn network_input(mkps: &MkpSet, scale: f64) -> Vec<f64> {
    mkps.pairs
        .iter()
        .flat_map(|p| p.iter().map(move |v| v * scale))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutput {
    /// Per-pair probability in `[0, 1]`.
    pub scores: Vec<f64>,
    /// Indices of the `min(k, m)` largest scores; ties go to the lower index.
    pub top_k: Vec<usize>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

pub fn selection_forward(
    net: &PointNet,
    mkps: &MkpSet,
    k: usize,
    input_scale: f64,
) -> SelectionOutput {
    assert!(
        net.segmentation,
        "selection needs a segmentation-mode network"
    );
    let trace = net.forward(&network_input(mkps, input_scale), mkps.len());
    let scores: Vec<f64> = trace.output().iter().map(|&z| sigmoid(z)).collect();
    let top_k = top_k_indices(&scores, k);
    SelectionOutput { scores, top_k }
}

fn pooled_forward(net: &PointNet, selected: &MkpSet, input_scale: f64) -> Vector3<f64> {
    assert!(
        !net.segmentation && net.output_width() == 3,
        "expected a pooled 3-output network"
    );
    let trace = net.forward(&network_input(selected, input_scale), selected.len());
    Vector3::from_column_slice(trace.output())
}

/// Quaternion vector part of the motion between the two frames.
pub fn rotation_forward(net: &PointNet, selected: &MkpSet, input_scale: f64) -> Vector3<f64> {
    pooled_forward(net, selected, input_scale)
}

pub fn translation_forward(net: &PointNet, selected: &MkpSet, input_scale: f64) -> Vector3<f64> {
    pooled_forward(net, selected, input_scale)
}

/// `‖pred − v(gt)‖²` against the canonical quaternion's vector part.
pub fn rotation_loss(pred: &Vector3<f64>, gt: &UnitQuaternion) -> f64 {
    (pred - gt.vector_part()).norm_squared()
}

pub fn translation_loss(pred: &Vector3<f64>, gt: &Vector3<f64>) -> f64 {
    (pred - gt).norm_squared()
}

/// Mean binary cross-entropy of per-pair logits against 0/1 labels,
/// evaluated in the numerically stable logit form.
pub fn selection_loss(logits: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    let sum: f64 = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * f64::from(y) + (-z.abs()).exp().ln_1p())
        .sum();
    sum / logits.len() as f64
}

/// Loss and parameter gradient of a pooled regressor for one sample.
pub fn regression_loss_grad(
    net: &PointNet,
    input: &[f64],
    rows: usize,
    target: &Vector3<f64>,
) -> (f64, PointNet) {
    let trace = net.forward(input, rows);
    let out = trace.output();
    let diff: Vec<f64> = (0..3).map(|i| out[i] - target[i]).collect();
    let loss = diff.iter().map(|d| d * d).sum();
    let d_out: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
    let mut grad = net.zeros_like();
    net.backward(&trace, &d_out, &mut grad);
    (loss, grad)
}

/// Mean BCE and parameter gradient of the selection network for one sample.
pub fn selection_loss_grad(net: &PointNet, input: &[f64], labels: &[u8]) -> (f64, PointNet) {
    let rows = labels.len();
    let trace = net.forward(input, rows);
    let logits = trace.output();
    let loss = selection_loss(logits, labels);
    let d_out: Vec<f64> = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (sigmoid(z) - f64::from(y)) / rows as f64)
        .collect();
    let mut grad = net.zeros_like();
    net.backward(&trace, &d_out, &mut grad);
    (loss, grad)
}

/// Rotates the frame `i+1` side of every pair by a random yaw `β` drawn
/// uniformly from `(−β_max, β_max)` and composes the same yaw into `gt`, so
/// pairs exact under `gt` stay exact under the returned pose.
pub fn augment_rotation(
    mkps: &MkpSet,
    gt: &Pose,
    beta_max: f64,
    seed: u64,
) -> Result<(MkpSet, Pose)> {
    if !(beta_max >= 0.0 && beta_max.is_finite()) {
        return Err(Error::InvalidInput(
            "beta_max must be finite and non-negative".into(),
        ));
    }
    if beta_max == 0.0 {
        return Ok((mkps.clone(), *gt));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = loop {
        let b = rng.random_range(-beta_max..beta_max);
        if b != -beta_max {
            break b;
        }
    };
    Ok(apply_yaw(mkps, gt, beta))
}

fn apply_yaw(mkps: &MkpSet, gt: &Pose, beta: f64) -> (MkpSet, Pose) {
    let tr1 = Pose::from_parts(yaw_matrix(beta), Vector3::zeros());
    let mut out = mkps.clone();
    for (i, row) in out.pairs.iter_mut().enumerate() {
        let y = tr1.apply(&mkps.right(i));
        row[3..].copy_from_slice(y.as_slice());
    }
    (out, tr1.compose(gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs per stage: the selector trains first, then both regressors.
    pub epochs: usize,
    /// Fraction of each rotation batch replaced by yaw-augmented copies.
    pub augmentation_ratio: f64,
    pub beta_max_deg: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-4,
            epochs: 20,
            augmentation_ratio: 0.05,
            beta_max_deg: 3.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.augmentation_ratio) {
            return Err(Error::Config(
                "augmentation_ratio must lie in [0, 1]".into(),
            ));
        }
        if !(self.beta_max_deg >= 0.0 && self.beta_max_deg.is_finite()) {
            return Err(Error::Config("beta_max_deg must be non-negative".into()));
        }
        Ok(())
    }
}

/// Labelled MKPs of one frame pair with the pose mapping frame `i` into
/// frame `i+1`.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub mkps: MkpSet,
    pub gt: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Selection,
    Regression,
}

/// Mean training losses of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub stage: Stage,
    pub epoch: usize,
    pub selection: Option<f64>,
    pub rotation: Option<f64>,
    pub translation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RegressionModel,
    pub curve: Vec<EpochLoss>,
}

/// `stage,epoch,selection_bce,rotation_l2,translation_l2`; losses not
/// trained in a stage are left empty.
pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("stage,epoch,selection_bce,rotation_l2,translation_l2\n");
    let f = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for e in curve {
        let stage = match e.stage {
            Stage::Selection => "selection",
            Stage::Regression => "regression",
        };
        let _ = writeln!(
            s,
            "{stage},{},{},{},{}",
            e.epoch,
            f(e.selection),
            f(e.rotation),
            f(e.translation)
        );
    }
    s
}

fn check_finite(loss: f64, epoch: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            detail: format!("{what} loss became {loss}"),
        })
    }
}

fn batches(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Trains the selector on the per-pair labels, then the rotation and
/// translation regressors on the selector's top `k` pairs of every sample.
pub fn train(
    dataset: &[TrainSample],
    cfg: &TrainConfig,
    spec: &MlpSpec,
    k: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput(
            "selection size k must be positive".into(),
        ));
    }
    for (i, s) in dataset.iter().enumerate() {
        s.mkps.validate()?;
        if s.mkps.is_empty() {
            return Err(Error::InvalidInput(format!("sample {i} has no MKPs")));
        }
        match &s.mkps.labels {
            Some(l) if l.len() == s.mkps.len() => {}
            _ => return Err(Error::InvalidInput(format!("sample {i} is not labelled"))),
        }
    }

    let scale = spec.input_scale;
    let mut model = RegressionModel::random(spec, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f7a_1e00);
    let mut curve = Vec::new();
    let inputs: Vec<Vec<f64>> = dataset
        .iter()
        .map(|s| network_input(&s.mkps, scale))
        .collect();

    let mut opt = Adam::new(&model.selection, cfg.learning_rate);
    for epoch in 1..=cfg.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for batch in batches(&mut rng, dataset.len(), cfg.batch_size) {
            let mut grad = model.selection.zeros_like();
            for &i in &batch {
                let labels = dataset[i].mkps.labels.as_ref().expect("checked");
                let (loss, g) = selection_loss_grad(&model.selection, &inputs[i], labels);
                check_finite(loss, epoch, "selection")?;
                grad.add_scaled(&g, 1.0 / batch.len() as f64);
                total += loss;
                count += 1;
            }
            opt.step(&mut model.selection, &grad);
        }
        curve.push(EpochLoss {
            stage: Stage::Selection,
            epoch,
            selection: Some(total / count as f64),
            rotation: None,
            translation: None,
        });
    }

    let selected: Vec<TrainSample> = dataset
        .iter()
        .map(|s| {
            let top = selection_forward(&model.selection, &s.mkps, k, scale).top_k;
            TrainSample {
                mkps: s.mkps.select(&top),
                gt: s.gt,
            }
        })
        .collect();
    let sel_inputs: Vec<Vec<f64>> = selected
        .iter()
        .map(|s| network_input(&s.mkps, scale))
        .collect();
    let beta_max = cfg.beta_max_deg.to_radians();

    let mut opt_r = Adam::new(&model.rotation, cfg.learning_rate);
    let mut opt_t = Adam::new(&model.translation, cfg.learning_rate);
    for epoch in 1..=cfg.epochs {
        let (mut total_r, mut total_t, mut count) = (0.0, 0.0, 0usize);
        for batch in batches(&mut rng, selected.len(), cfg.batch_size) {
            let n_aug = (cfg.augmentation_ratio * batch.len() as f64).round() as usize;
            let mut aug_slots: Vec<usize> = (0..batch.len()).collect();
            aug_slots.shuffle(&mut rng);
            aug_slots.truncate(n_aug);
            let w = 1.0 / batch.len() as f64;
            let mut grad_r = model.rotation.zeros_like();
            let mut grad_t = model.translation.zeros_like();
            for (slot, &i) in batch.iter().enumerate() {
                let s = &selected[i];
                let rows = s.mkps.len();
                let (loss_r, g_r) = if aug_slots.contains(&slot) {
                    let (mkps, gt) = augment_rotation(&s.mkps, &s.gt, beta_max, rng.random())?;
                    let target = UnitQuaternion::from_pose(&gt).vector_part();
                    regression_loss_grad(
                        &model.rotation,
                        &network_input(&mkps, scale),
                        rows,
                        &target,
                    )
                } else {
                    let target = UnitQuaternion::from_pose(&s.gt).vector_part();
                    regression_loss_grad(&model.rotation, &sel_inputs[i], rows, &target)
                };
                let (loss_t, g_t) = regression_loss_grad(
                    &model.translation,
                    &sel_inputs[i],
                    rows,
                    &s.gt.translation,
                );
                check_finite(loss_r, epoch, "rotation")?;
                check_finite(loss_t, epoch, "translation")?;
                grad_r.add_scaled(&g_r, w);
                grad_t.add_scaled(&g_t, w);
                total_r += loss_r;
                total_t += loss_t;
                count += 1;
            }
            opt_r.step(&mut model.rotation, &grad_r);
            opt_t.step(&mut model.translation, &grad_t);
        }
        curve.push(EpochLoss {
            stage: Stage::Regression,
            epoch,
            selection: None,
            rotation: Some(total_r / count as f64),
            translation: Some(total_t / count as f64),
        });
    }
    Ok(TrainOutcome { model, curve })
}

/// Mean angle in degrees between regressed and true rotations, using every
/// pair of each sample.
pub fn rotation_error_deg(net: &PointNet, samples: &[TrainSample], input_scale: f64) -> f64 {
    let sum: f64 = samples
        .iter()
        .map(|s| {
            let v = rotation_forward(net, &s.mkps, input_scale);
            let r = UnitQuaternion::recover(&v).quaternion.to_rotation();
            crate::geometry::rotation_angle(&(r.transpose() * s.gt.rotation)).to_degrees()
        })
        .sum();
    sum / samples.len() as f64
}

/// Random labelled frame pairs: `m` pairs per sample seen from a sensor
/// moving forward with a small random yaw, with `outlier_ratio` of the
/// right-hand points displaced by 0.5–3 m.
pub fn synthetic_samples(
    count: usize,
    m: usize,
    outlier_ratio: f64,
    seed: u64,
) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let yaw = rng.random_range(-2.0f64..2.0).to_radians();
            let t = Vector3::new(
                rng.random_range(0.0..1.5),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.05..0.05),
            );
            let gt = Pose::from_parts(yaw_matrix(yaw), t);
            let n_out = (outlier_ratio * m as f64).round() as usize;
            let mut labels = Vec::with_capacity(m);
            let pairs = (0..m)
                .map(|i| {
                    let r = rng.random_range(4.0..40.0);
                    let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                    let x = Vector3::new(r * az.cos(), r * az.sin(), rng.random_range(-1.7..1.0));
                    let mut y = gt.apply(&x);
                    if i < n_out {
                        let dir = Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        );
                        y += dir.normalize() * rng.random_range(0.5..3.0);
                        labels.push(0);
                    } else {
                        labels.push(1);
                    }
                    (x, y)
                })
                .collect::<Vec<_>>();
            let mut mkps = MkpSet::from_points(pairs);
            mkps.labels = Some(labels);
            TrainSample { mkps, gt }
        })
        .collect()
}

#[cfg(test)]
mod tests;
