//! Training orchestration: source pretraining, then alternating clustering
//! and refinement on the target domain.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aulm::{adaptive_erase, random_points, EraseConfig};
use crate::config::RunConfig;
use crate::datagen::{make_pk_batch, stack_images, SampleRecord, TargetView};
use crate::ema::{ema_update, init_teacher, TeacherState};
use crate::error::{HliError, Result};
use crate::eval::{evaluate, RetrievalResult};
use crate::losses::{
    adaptation_loss, pretrain_loss, AdaptLossInputs, LossBreakdown,
};
use crate::model::{backward, compute_cam, forward, most_informative_point, ModelParams};
use crate::optim::Adam;
use crate::pseudo::{cluster_targets, relabel_dataset};

const EMBED_CHUNK: usize = 32;

fn derive(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(tag).rotate_left(17) ^ tag
}

/// Per-channel mean over a set of images, for the dataset_mean erase fill.
pub fn dataset_mean_rgb(images: &[&Array3<f64>]) -> Vec<f64> {
    let mut sums = vec![0.0; 3];
    let mut count = 0.0;
    for img in images {
        let (_, h, w) = img.dim();
        for c in 0..3 {
            sums[c] += img.index_axis(Axis(0), c).sum();
        }
        count += (h * w) as f64;
    }
    sums.iter().map(|s| s / count).collect()
}

/// Embed a list of images in chunks; returns N x D embeddings and
/// N x num_classes logits.
pub fn embed_all(params: &ModelParams, images: &[&Array3<f64>]) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = images.len();
    let d = params.config.embed_dim();
    let k = params.config.num_classes;
    let mut emb = Array2::<f64>::zeros((n, d));
    let mut logits = Array2::<f64>::zeros((n, k));
    let mut start = 0;
    while start < n {
        let end = (start + EMBED_CHUNK).min(n);
        let batch = stack_images(&images[start..end]);
        let (bundle, _) = forward(params, &batch)?;
        emb.slice_mut(ndarray::s![start..end, ..]).assign(&bundle.embedding);
        logits
            .slice_mut(ndarray::s![start..end, ..])
            .assign(&bundle.logits);
        start = end;
    }
    Ok((emb, logits))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub step_rows: Vec<(usize, LossBreakdown)>,
    /// Top-1 classification accuracy on the source training set.
    pub source_accuracy: f64,
}

impl PretrainOutcome {
    pub fn losses_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for (step, b) in &self.step_rows {
            out.push_str(&b.csv_row(*step));
            out.push('\n');
        }
        out
    }
}

/// Stage 1: supervised pretraining on the labeled source domain with
/// l_id + l_tri over PK batches.
pub fn pretrain_source(source: &[SampleRecord], cfg: &RunConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let images: Vec<&Array3<f64>> = source.iter().map(|r| &r.image).collect();
    let labels: Vec<usize> = source.iter().map(|r| r.identity).collect();
    let num_classes = labels.iter().max().map(|m| m + 1).unwrap_or(1);
    let model_cfg = cfg.model_config(num_classes);
    let mut params = ModelParams::init(&model_cfg, derive(cfg.seed, 1))?;
    let mut opt = Adam::new(&params, cfg.train.learning_rate, cfg.train.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 2));
    let mut step_rows = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=cfg.train.epochs_pretrain {
        let lr_scale = cfg.lr_multiplier(epoch);
        for _ in 0..cfg.train.steps_per_epoch {
            step += 1;
            let batch = make_pk_batch(&images, &labels, cfg.train.p, cfg.train.k, &mut rng)?;
            let (bundle, trace) = forward(&params, &batch.images)?;
            let (l_id, l_tri, g_emb, g_logits) = pretrain_loss(
                &bundle.embedding.view(),
                &bundle.logits.view(),
                &batch.labels,
                cfg.loss.triplet_margin,
            )?;
            let breakdown = LossBreakdown {
                l_id,
                l_tri,
                total: l_id + l_tri,
                ..LossBreakdown::default()
            };
            breakdown.check_finite(step)?;
            let grads = backward(&params, &trace, &g_emb, &g_logits);
            opt.step(&mut params, &grads, lr_scale);
            step_rows.push((step, breakdown));
        }
    }
    // Final source top-1 accuracy.
    let (_, logits) = embed_all(&params, &images)?;
    let correct = logits
        .rows()
        .into_iter()
        .zip(&labels)
        .filter(|(row, &lab)| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            best == lab
        })
        .count();
    Ok(PretrainOutcome {
        params,
        step_rows,
        source_accuracy: correct as f64 / labels.len() as f64,
    })
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub student_map: f64,
    pub student_top1: f64,
    pub student_top5: f64,
    pub teacher_map: f64,
    pub teacher_top1: f64,
    pub teacher_top5: f64,
    pub inertia: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,l_id,l_sid,l_tri,l_stri,l_mim,l_exp,l_sd,total,student_map,student_top1,student_top5,teacher_map,teacher_top1,teacher_top5,inertia";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let b = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            b.l_id,
            b.l_sid,
            b.l_tri,
            b.l_stri,
            b.l_mim,
            b.l_exp,
            b.l_sd,
            b.total,
            self.student_map,
            self.student_top1,
            self.student_top5,
            self.teacher_map,
            self.teacher_top1,
            self.teacher_top5,
            self.inertia
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BestRole {
    Student,
    Teacher,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub student: ModelParams,
    pub teacher: TeacherState,
    pub epochs: Vec<EpochMetrics>,
    pub step_rows: Vec<(usize, LossBreakdown)>,
    /// Best-scoring parameters over all epochs: student or teacher,
    /// whichever reached the higher target mAP.
    pub best_params: ModelParams,
    pub best_role: BestRole,
    pub best_epoch: usize,
    pub best_map: f64,
}

impl AdaptOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&e.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn losses_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for (step, b) in &self.step_rows {
            out.push_str(&b.csv_row(*step));
            out.push('\n');
        }
        out
    }
}

fn retrieval_metrics(
    params: &ModelParams,
    view: &TargetView,
) -> Result<RetrievalResult> {
    let images = view.images();
    let (emb, _) = embed_all(params, &images)?;
    evaluate(&emb.view(), view.ground_truth(), view.nuisance_ids())
}

/// Stages 2-3: alternate clustering and refinement for a fixed epoch budget.
/// Ground-truth target labels are touched only inside the evaluation calls;
/// pass `eval_enabled = false` to run the gradient path with zero
/// ground-truth reads.
pub fn adapt(
    student_init: &ModelParams,
    target: &mut TargetView,
    cfg: &RunConfig,
    eval_enabled: bool,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.len() < cfg.train.m_t {
        return Err(HliError::Clustering(format!(
            "{} target samples for M_t = {}",
            target.len(),
            cfg.train.m_t
        )));
    }
    let mut student = student_init.clone();
    // Fresh target head sized to the cluster count.
    student.reset_head(cfg.train.m_t, derive(cfg.seed, 3));
    let mut teacher = init_teacher(&student, cfg.train.momentum_ema);
    let mut opt = Adam::new(&student, cfg.train.learning_rate, cfg.train.weight_decay);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 4));
    let mut erase_rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 5));

    let mean_rgb = dataset_mean_rgb(&target.images());
    let erase_cfg = EraseConfig {
        mean_rgb,
        ..cfg.erase.clone()
    };

    let mut epochs = Vec::new();
    let mut step_rows = Vec::new();
    let mut best: Option<(ModelParams, BestRole, usize, f64)> = None;

    // Epoch 0: evaluation of the pretrain-only model.
    if eval_enabled {
        let s = retrieval_metrics(&student, target)?;
        let t = retrieval_metrics(&teacher.params, target)?;
        epochs.push(EpochMetrics {
            epoch: 0,
            losses: LossBreakdown::default(),
            student_map: s.map,
            student_top1: s.top_k(1),
            student_top5: s.top_k(5),
            teacher_map: t.map,
            teacher_top1: t.top_k(1),
            teacher_top5: t.top_k(5),
            inertia: 0.0,
        });
        if s.map >= t.map {
            best = Some((student.clone(), BestRole::Student, 0, s.map));
        } else {
            best = Some((teacher.params.clone(), BestRole::Teacher, 0, t.map));
        }
    }

    let mut step = 0usize;
    for epoch in 1..=cfg.train.epochs_adapt {
        // (a) Teacher embeds every target sample; (b) cluster into pseudo ids.
        let images = target.images();
        let (teacher_emb, _) = embed_all(&teacher.params, &images)?;
        let labeling = cluster_targets(
            &teacher_emb.view(),
            cfg.train.m_t,
            derive(cfg.seed, 100 + epoch as u64),
        )?;
        let inertia = labeling.inertia;
        relabel_dataset(target, &labeling)?;
        // Cluster indices permute across epochs, so both classifier heads are
        // re-seeded from the centroids: logits become centroid similarities
        // and the teacher's argmax agrees with the assignment for samples
        // near their centroid.
        set_head_from_centroids(&mut student, &labeling.centroids);
        set_head_from_centroids(&mut teacher.params, &labeling.centroids);

        // CAM points from the epoch-start student snapshot, cached per sample.
        let points = if cfg.random_erase_points {
            random_points(
                target.len(),
                cfg.dataset.image_height,
                cfg.dataset.image_width,
                &mut erase_rng,
            )
        } else {
            compute_cam_points(&student, target)?
        };

        // (c) Refinement steps.
        let mut epoch_losses = LossBreakdown::default();
        for _ in 0..cfg.train.steps_per_epoch {
            step += 1;
            let batch = make_pk_batch(
                &target.images(),
                target.pseudo_labels(),
                cfg.train.p,
                cfg.train.k,
                &mut batch_rng,
            )?;
            let batch_points: Vec<(usize, usize)> =
                batch.indices.iter().map(|&i| points[i]).collect();
            let student_view =
                adaptive_erase(&batch.images, &batch_points, &erase_cfg, &mut erase_rng)?;

            let (s_bundle, trace) = forward(&student, &student_view)?;
            let (t_bundle, _) = forward(&teacher.params, &batch.images)?;
            let inputs = AdaptLossInputs {
                student_emb: s_bundle.embedding.view(),
                student_logits: s_bundle.logits.view(),
                teacher_emb: t_bundle.embedding.view(),
                teacher_logits: t_bundle.logits.view(),
                labels: &batch.labels,
                margin: cfg.loss.triplet_margin,
                repulsion_clamp: cfg.loss.clamp_value(),
            };
            let (breakdown, d_emb, d_logits) = adaptation_loss(&inputs, &cfg.loss.weights())?;
            breakdown.check_finite(step)?;
            let grads = backward(&student, &trace, &d_emb, &d_logits);
            opt.step(&mut student, &grads, 1.0);
            ema_update(&mut teacher, &student)?;

            accumulate(&mut epoch_losses, &breakdown);
            step_rows.push((step, breakdown));
        }
        scale(&mut epoch_losses, 1.0 / cfg.train.steps_per_epoch as f64);

        // (d) Evaluate and log.
        if eval_enabled {
            let s = retrieval_metrics(&student, target)?;
            let t = retrieval_metrics(&teacher.params, target)?;
            epochs.push(EpochMetrics {
                epoch,
                losses: epoch_losses,
                student_map: s.map,
                student_top1: s.top_k(1),
                student_top5: s.top_k(5),
                teacher_map: t.map,
                teacher_top1: t.top_k(1),
                teacher_top5: t.top_k(5),
                inertia,
            });
            let (cand_map, cand_role, cand) = if s.map >= t.map {
                (s.map, BestRole::Student, &student)
            } else {
                (t.map, BestRole::Teacher, &teacher.params)
            };
            if best.as_ref().is_none_or(|(_, _, _, m)| cand_map > *m) {
                best = Some((cand.clone(), cand_role, epoch, cand_map));
            }
        }
    }

    let (best_params, best_role, best_epoch, best_map) = best.unwrap_or((
        student.clone(),
        BestRole::Student,
        cfg.train.epochs_adapt,
        f64::NAN,
    ));
    Ok(AdaptOutcome {
        student,
        teacher,
        epochs,
        step_rows,
        best_params,
        best_role,
        best_epoch,
        best_map,
    })
}

/// Centroid-similarity logits: head weight rows are the cluster centroids,
/// sharpened by a fixed scale; bias zero.
const CENTROID_LOGIT_SCALE: f64 = 6.0;

fn set_head_from_centroids(params: &mut ModelParams, centroids: &Array2<f64>) {
    let w = params.get_mut("head.w");
    for (mut row, c_row) in w
        .view_mut()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .rows_mut()
        .into_iter()
        .zip(centroids.rows())
    {
        for (v, &c) in row.iter_mut().zip(c_row) {
            *v = CENTROID_LOGIT_SCALE * c;
        }
    }
    params.get_mut("head.b").fill(0.0);
}

/// One CAM argmax point per target sample, from the given parameter snapshot
/// and the current pseudo labels.
pub fn compute_cam_points(params: &ModelParams, target: &TargetView) -> Result<Vec<(usize, usize)>> {
    let images = target.images();
    let labels = target.pseudo_labels().to_vec();
    let n = images.len();
    let (h, w) = (params.config.input_h, params.config.input_w);
    let mut points = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EMBED_CHUNK).min(n);
        let batch = stack_images(&images[start..end]);
        let (bundle, _) = forward(params, &batch)?;
        let heat = compute_cam(&bundle, params, &labels[start..end])?;
        points.extend(most_informative_point(&heat, (h, w)));
        start = end;
    }
    Ok(points)
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.l_id += b.l_id;
    acc.l_sid += b.l_sid;
    acc.l_tri += b.l_tri;
    acc.l_stri += b.l_stri;
    acc.l_mim += b.l_mim;
    acc.l_exp += b.l_exp;
    acc.l_sd += b.l_sd;
    acc.total += b.total;
}

fn scale(acc: &mut LossBreakdown, s: f64) {
    acc.l_id *= s;
    acc.l_sid *= s;
    acc.l_tri *= s;
    acc.l_stri *= s;
    acc.l_mim *= s;
    acc.l_exp *= s;
    acc.l_sd *= s;
    acc.total *= s;
}

/// Evaluate a parameter snapshot on a target view (used by the eval command).
pub fn evaluate_checkpoint(params: &ModelParams, view: &TargetView) -> Result<RetrievalResult> {
    retrieval_metrics(params, view)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_domain_pair, DatasetSpec};

    fn quick_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dataset = DatasetSpec {
            n_identities_source: 4,
            n_identities_target: 4,
            samples_per_identity: 4,
            image_height: 16,
            image_width: 16,
            shift_magnitude: 0.4,
            seed: 1,
        };
        cfg.model.block_channels = vec![4, 8];
        cfg.train.epochs_pretrain = 1;
        cfg.train.epochs_adapt = 1;
        cfg.train.steps_per_epoch = 2;
        cfg.train.p = 2;
        cfg.train.k = 2;
        cfg.train.m_t = 4;
        cfg.erase.erase_h = 4;
        cfg.erase.erase_w = 4;
        cfg
    }

    #[test]
    fn zero_learning_rate_pretrain_keeps_init() {
        let mut cfg = quick_cfg();
        cfg.train.learning_rate = 1e-300; // validation requires > 0
        cfg.train.weight_decay = 0.0;
        let (source, _) = generate_domain_pair(&cfg.dataset).unwrap();
        let out = pretrain_source(&source, &cfg).unwrap();
        let init = ModelParams::init(&cfg.model_config(4), derive(cfg.seed, 1)).unwrap();
        for (a, b) in out.params.tensors().iter().zip(init.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pretrain_is_deterministic() {
        let cfg = quick_cfg();
        let (source, _) = generate_domain_pair(&cfg.dataset).unwrap();
        let o1 = pretrain_source(&source, &cfg).unwrap();
        let o2 = pretrain_source(&source, &cfg).unwrap();
        assert_eq!(o1.losses_csv(), o2.losses_csv());
        for (a, b) in o1.params.tensors().iter().zip(o2.params.tensors()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adapt_zero_epochs_returns_input_student() {
        let mut cfg = quick_cfg();
        cfg.train.epochs_adapt = 0;
        let (source, target) = generate_domain_pair(&cfg.dataset).unwrap();
        let pre = pretrain_source(&source, &cfg).unwrap();
        let mut view = TargetView::new(&target);
        let out = adapt(&pre.params, &mut view, &cfg, true).unwrap();
        // Head was reset, but the backbone equals the input.
        for (name, (a, b)) in out
            .student
            .names()
            .iter()
            .zip(out.student.tensors().iter().zip(pre.params.tensors()))
        {
            if name.starts_with("head") {
                continue;
            }
            assert_eq!(a, b, "{name}");
        }
        // Single evaluation row for epoch 0.
        assert_eq!(out.epochs.len(), 1);
        assert_eq!(out.epochs[0].epoch, 0);
    }

    #[test]
    fn adapt_is_deterministic_and_runs() {
        let cfg = quick_cfg();
        let (source, target) = generate_domain_pair(&cfg.dataset).unwrap();
        let pre = pretrain_source(&source, &cfg).unwrap();
        let mut v1 = TargetView::new(&target);
        let mut v2 = TargetView::new(&target);
        let o1 = adapt(&pre.params, &mut v1, &cfg, true).unwrap();
        let o2 = adapt(&pre.params, &mut v2, &cfg, true).unwrap();
        assert_eq!(o1.metrics_csv(), o2.metrics_csv());
        assert_eq!(o1.losses_csv(), o2.losses_csv());
        assert_eq!(o1.epochs.len(), 2);
    }

    #[test]
    fn gradient_path_reads_no_ground_truth() {
        let cfg = quick_cfg();
        let (source, target) = generate_domain_pair(&cfg.dataset).unwrap();
        let pre = pretrain_source(&source, &cfg).unwrap();
        let mut view = TargetView::new(&target);
        let _ = adapt(&pre.params, &mut view, &cfg, false).unwrap();
        assert_eq!(view.ground_truth_read_count(), 0);
    }

    #[test]
    fn cam_points_differ_across_images_and_snapshots() {
        // Adaptivity: different images get different peaks, and the same
        // image gets a different peak under different parameters.
        let cfg = quick_cfg();
        let (source, target) = generate_domain_pair(&cfg.dataset).unwrap();
        let pre = pretrain_source(&source, &cfg).unwrap();
        let mut view = TargetView::new(&target);
        let mut params = pre.params.clone();
        params.reset_head(cfg.train.m_t, 1);
        let (emb, _) = embed_all(&params, &view.images()).unwrap();
        let labeling = cluster_targets(&emb.view(), cfg.train.m_t, 5).unwrap();
        relabel_dataset(&mut view, &labeling).unwrap();

        let p1 = compute_cam_points(&params, &view).unwrap();
        assert!(p1.iter().any(|&p| p != p1[0]), "all CAM peaks identical");

        let mut params2 = params.clone();
        params2.reset_head(cfg.train.m_t, 99);
        let p2 = compute_cam_points(&params2, &view).unwrap();
        assert_ne!(p1, p2, "CAM peaks identical across parameter snapshots");
    }
}
