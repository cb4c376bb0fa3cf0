//! Training objectives.
//!
//! Selective imitation (mimic + exploitation), relation-matrix structure
//! distillation, and the MMT-style base terms (hard/soft identity and
//! hard/soft triplet). Every loss returns its value together with analytic
//! gradients with respect to the student's embeddings and/or logits; teacher
//! quantities are always treated as constants.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{HliError, Result};

/// Per-sample flag: true iff the teacher's argmax logit equals the sample's
/// (pseudo) label. Computed from teacher outputs only.
#[derive(Debug, Clone)]
pub struct CorrectnessMask(pub Vec<bool>);

impl CorrectnessMask {
    pub fn from_teacher_logits(teacher_logits: &ArrayView2<f64>, labels: &[usize]) -> Self {
        let mask = teacher_logits
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &lab)| {
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
            .collect();
        CorrectnessMask(mask)
    }
}

/// N x N pairwise affinity matrix over a batch.
#[derive(Debug, Clone)]
pub struct RelationMatrix {
    pub values: Array2<f64>,
}

/// Weights of the total objective and of the imitation combination.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_id_t: f64,
    pub lambda_tri_t: f64,
    pub lambda_imi_t: f64,
    pub lambda_sd_t: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_id_t: 0.5,
            lambda_tri_t: 1.0,
            lambda_imi_t: 0.5,
            lambda_sd_t: 1.0,
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_id_t", self.lambda_id_t),
            ("lambda_tri_t", self.lambda_tri_t),
            ("lambda_imi_t", self.lambda_imi_t),
            ("lambda_sd_t", self.lambda_sd_t),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(HliError::Config {
                    field: name.into(),
                    reason: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

fn check_same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(HliError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean squared error between student and teacher embeddings over the
/// correctly-predicted samples. Zero when no sample is correct.
pub fn mimic_loss(
    student_emb: &ArrayView2<f64>,
    teacher_emb: &ArrayView2<f64>,
    mask: &CorrectnessMask,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(student_emb, teacher_emb)?;
    let (n, d) = student_emb.dim();
    if mask.0.len() != n {
        return Err(HliError::ShapeMismatch("mask length".into()));
    }
    let count = mask.0.iter().filter(|&&m| m).count();
    let mut grad = Array2::<f64>::zeros((n, d));
    if count == 0 {
        return Ok((0.0, grad));
    }
    let denom = (count * d) as f64;
    let mut loss = 0.0;
    for i in 0..n {
        if !mask.0[i] {
            continue;
        }
        for j in 0..d {
            let diff = student_emb[[i, j]] - teacher_emb[[i, j]];
            loss += diff * diff;
            grad[[i, j]] = 2.0 * diff / denom;
        }
    }
    Ok((loss / denom, grad))
}

/// Exploitation loss over the samples the teacher got wrong: a repulsion
/// term away from the wrong teacher embedding plus an attraction toward the
/// teacher's average response on same-identity samples it got right. The
/// repulsion MSE is clamped at `repulsion_clamp` to bound the loss below
/// (pass `f64::INFINITY` for the unclamped form). Zero when the mask is all
/// true.
pub fn exploitation_loss(
    student_emb: &ArrayView2<f64>,
    teacher_emb: &ArrayView2<f64>,
    mask: &CorrectnessMask,
    identities: &[usize],
    repulsion_clamp: f64,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(student_emb, teacher_emb)?;
    let (n, d) = student_emb.dim();
    if identities.len() != n || mask.0.len() != n {
        return Err(HliError::ShapeMismatch("identity/mask length".into()));
    }
    let wrong: Vec<usize> = (0..n).filter(|&i| !mask.0[i]).collect();
    let mut grad = Array2::<f64>::zeros((n, d));
    if wrong.is_empty() {
        return Ok((0.0, grad));
    }
    let w = wrong.len() as f64;
    let df = d as f64;
    let mut loss = 0.0;
    for &i in &wrong {
        // Repulsion away from the teacher's wrong response.
        let mut mse_inc = 0.0;
        for j in 0..d {
            let diff = student_emb[[i, j]] - teacher_emb[[i, j]];
            mse_inc += diff * diff;
        }
        mse_inc /= df;
        if mse_inc < repulsion_clamp {
            loss -= mse_inc;
            for j in 0..d {
                let diff = student_emb[[i, j]] - teacher_emb[[i, j]];
                grad[[i, j]] -= 2.0 * diff / (df * w);
            }
        } else {
            loss -= repulsion_clamp;
        }

        // Attraction toward the average correct teacher response of the
        // same identity, when one exists.
        let peers: Vec<usize> = (0..n)
            .filter(|&j| identities[j] == identities[i] && mask.0[j])
            .collect();
        if !peers.is_empty() {
            let mut avg = Array1::<f64>::zeros(d);
            for &p in &peers {
                avg += &teacher_emb.row(p);
            }
            avg.mapv_inplace(|v| v / peers.len() as f64);
            for j in 0..d {
                let diff = student_emb[[i, j]] - avg[j];
                loss += diff * diff / df;
                grad[[i, j]] += 2.0 * diff / (df * w);
            }
        }
    }
    Ok((loss / w, grad))
}

/// Weighted combination of the mimic and exploitation terms.
pub fn imitation_loss(mim: f64, exp: f64, weights: &LossWeights) -> f64 {
    weights.alpha * mim + weights.beta * exp
}

/// Pairwise affinity matrix: embeddings are L2-normalized, then
/// A_ij = 1 / (1 + ||f_i - f_j||).
pub fn relation_matrix(emb: &ArrayView2<f64>) -> Result<RelationMatrix> {
    let (n, _d) = emb.dim();
    if n < 2 {
        return Err(HliError::InvalidArgument("relation matrix needs N >= 2".into()));
    }
    if emb.iter().any(|v| !v.is_finite()) {
        return Err(HliError::InvalidArgument("non-finite embeddings".into()));
    }
    let f = normalize_rows_checked(emb)?;
    let mut values = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        values[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let d = row_dist(&f, i, j);
            let a = 1.0 / (1.0 + d);
            values[[i, j]] = a;
            values[[j, i]] = a;
        }
    }
    Ok(RelationMatrix { values })
}

fn normalize_rows_checked(emb: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut f = emb.to_owned();
    for mut row in f.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(HliError::InvalidArgument(
                "zero-norm embedding (dead feature)".into(),
            ));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(f)
}

fn row_dist(f: &Array2<f64>, i: usize, j: usize) -> f64 {
    f.row(i)
        .iter()
        .zip(f.row(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Elementwise MSE over all N^2 entries of the two relation matrices.
pub fn structure_distillation_loss(a_s: &RelationMatrix, a_t: &RelationMatrix) -> Result<f64> {
    check_same_shape(&a_s.values.view(), &a_t.values.view())?;
    let n2 = a_s.values.len() as f64;
    Ok(a_s
        .values
        .iter()
        .zip(a_t.values.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n2)
}

/// Structure distillation with the gradient with respect to the raw student
/// embeddings, chaining through L2 normalization and 1/(1+d).
pub fn structure_distillation_grad(
    student_emb: &ArrayView2<f64>,
    a_t: &RelationMatrix,
) -> Result<(f64, Array2<f64>)> {
    let (n, d) = student_emb.dim();
    let a_s = relation_matrix(student_emb)?;
    let loss = structure_distillation_loss(&a_s, a_t)?;
    let f = normalize_rows_checked(student_emb)?;
    let n2 = (n * n) as f64;
    // Gradient with respect to the normalized embeddings.
    let mut g_f = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dist = row_dist(&f, i, j);
            if dist < 1e-12 {
                continue; // affinity at its max; subgradient 0
            }
            let a = a_s.values[[i, j]];
            // Both A_ij and A_ji depend on f_i and the matrices are
            // symmetric, so each pair contributes twice.
            let dl_da = 4.0 * (a - a_t.values[[i, j]]) / n2;
            let da_dd = -a * a;
            let coeff = dl_da * da_dd / dist;
            for k in 0..d {
                g_f[[i, k]] += coeff * (f[[i, k]] - f[[j, k]]);
            }
        }
    }
    // Chain through normalization: de = (g_f - f * (f . g_f)) / ||e||.
    let mut grad = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let norm = student_emb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = f.row(i).iter().zip(g_f.row(i).iter()).map(|(a, b)| a * b).sum();
        for k in 0..d {
            grad[[i, k]] = (g_f[[i, k]] - f[[i, k]] * dot) / norm;
        }
    }
    Ok((loss, grad))
}

fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Hard-label cross-entropy, mean over the batch.
pub fn id_loss(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if labels.len() != n {
        return Err(HliError::ShapeMismatch("labels length".into()));
    }
    for &lab in labels {
        if lab >= k {
            return Err(HliError::InvalidArgument(format!(
                "label {lab} out of range for {k} classes"
            )));
        }
    }
    let p = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = p.clone();
    for i in 0..n {
        loss -= p[[i, labels[i]]].max(1e-300).ln();
        grad[[i, labels[i]]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n as f64);
    Ok((loss / n as f64, grad))
}

/// Soft-label cross-entropy of the student's logits against the teacher's
/// softmax distribution, mean over the batch.
pub fn soft_id_loss(
    student_logits: &ArrayView2<f64>,
    teacher_logits: &ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(student_logits, teacher_logits)?;
    let n = student_logits.dim().0;
    let p_s = softmax_rows(student_logits);
    let p_t = softmax_rows(teacher_logits);
    let mut loss = 0.0;
    for (ps, pt) in p_s.rows().into_iter().zip(p_t.rows()) {
        for (&a, &b) in ps.iter().zip(pt.iter()) {
            loss -= b * a.max(1e-300).ln();
        }
    }
    let grad = (&p_s - &p_t) / n as f64;
    Ok((loss / n as f64, grad))
}

/// Hardest positive/negative indices per anchor on the given distance matrix.
fn mine_hard_pairs(dist: &Array2<f64>, labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let n = labels.len();
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if hp.is_none_or(|p| dist[[i, j]] > dist[[i, p]]) {
                    hp = Some(j);
                }
            } else if hn.is_none_or(|q| dist[[i, j]] < dist[[i, q]]) {
                hn = Some(j);
            }
        }
        match (hp, hn) {
            (Some(p), Some(q)) => pairs.push((p, q)),
            _ => {
                return Err(HliError::InvalidArgument(
                    "triplet loss needs >= 2 identities and >= 2 samples per identity".into(),
                ))
            }
        }
    }
    Ok(pairs)
}

fn pairwise_dist(emb: &ArrayView2<f64>) -> Array2<f64> {
    let n = emb.dim().0;
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = emb
                .row(i)
                .iter()
                .zip(emb.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    dist
}

const DIST_EPS: f64 = 1e-12;

/// Batch-hard triplet loss with margin on raw student embeddings.
pub fn triplet_loss(
    emb: &ArrayView2<f64>,
    labels: &[usize],
    margin: f64,
) -> Result<(f64, Array2<f64>)> {
    let (n, d) = emb.dim();
    if labels.len() != n {
        return Err(HliError::ShapeMismatch("labels length".into()));
    }
    let dist = pairwise_dist(emb);
    let pairs = mine_hard_pairs(&dist, labels)?;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((n, d));
    let nf = n as f64;
    for (i, &(p, q)) in pairs.iter().enumerate() {
        let term = margin + dist[[i, p]] - dist[[i, q]];
        if term <= 0.0 {
            continue;
        }
        loss += term;
        if dist[[i, p]] > DIST_EPS {
            for k in 0..d {
                let u = (emb[[i, k]] - emb[[p, k]]) / dist[[i, p]];
                grad[[i, k]] += u / nf;
                grad[[p, k]] -= u / nf;
            }
        }
        if dist[[i, q]] > DIST_EPS {
            for k in 0..d {
                let u = (emb[[i, k]] - emb[[q, k]]) / dist[[i, q]];
                grad[[i, k]] -= u / nf;
                grad[[q, k]] += u / nf;
            }
        }
    }
    Ok((loss / nf, grad))
}

/// Soft triplet: binary cross-entropy between the student's and teacher's
/// hardest-positive/hardest-negative softmax ratios. Pairs are mined on the
/// student's distances; the teacher's ratio on the same pairs is the soft
/// target.
pub fn soft_triplet_loss(
    student_emb: &ArrayView2<f64>,
    teacher_emb: &ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(student_emb, teacher_emb)?;
    let (n, d) = student_emb.dim();
    if labels.len() != n {
        return Err(HliError::ShapeMismatch("labels length".into()));
    }
    let dist_s = pairwise_dist(student_emb);
    let dist_t = pairwise_dist(teacher_emb);
    let pairs = mine_hard_pairs(&dist_s, labels)?;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((n, d));
    let nf = n as f64;
    for (i, &(p, q)) in pairs.iter().enumerate() {
        // q_i = sigma(d_an - d_ap): probability mass on "positive is closer".
        let z_s = dist_s[[i, q]] - dist_s[[i, p]];
        let z_t = dist_t[[i, q]] - dist_t[[i, p]];
        let qs = sigmoid(z_s);
        let qt = sigmoid(z_t);
        loss -= qt * qs.max(1e-300).ln() + (1.0 - qt) * (1.0 - qs).max(1e-300).ln();
        // dL/dz_s = qs - qt; z_s = d_an - d_ap.
        let dz = (qs - qt) / nf;
        if dist_s[[i, q]] > DIST_EPS {
            for k in 0..d {
                let u = (student_emb[[i, k]] - student_emb[[q, k]]) / dist_s[[i, q]];
                grad[[i, k]] += dz * u;
                grad[[q, k]] -= dz * u;
            }
        }
        if dist_s[[i, p]] > DIST_EPS {
            for k in 0..d {
                let u = (student_emb[[i, k]] - student_emb[[p, k]]) / dist_s[[i, p]];
                grad[[i, k]] -= dz * u;
                grad[[p, k]] += dz * u;
            }
        }
    }
    Ok((loss / nf, grad))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-term values of one training step, in CSV column order.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub l_id: f64,
    pub l_sid: f64,
    pub l_tri: f64,
    pub l_stri: f64,
    pub l_mim: f64,
    pub l_exp: f64,
    pub l_sd: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,l_id,l_sid,l_tri,l_stri,l_mim,l_exp,l_sd,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            step, self.l_id, self.l_sid, self.l_tri, self.l_stri, self.l_mim, self.l_exp,
            self.l_sd, self.total
        )
    }

    /// Fail loudly on the first non-finite term.
    pub fn check_finite(&self, step: usize) -> Result<()> {
        let terms = [
            ("l_id", self.l_id),
            ("l_sid", self.l_sid),
            ("l_tri", self.l_tri),
            ("l_stri", self.l_stri),
            ("l_mim", self.l_mim),
            ("l_exp", self.l_exp),
            ("l_sd", self.l_sd),
            ("total", self.total),
        ];
        for (name, v) in terms {
            if !v.is_finite() {
                return Err(HliError::NonFinite {
                    term: name.into(),
                    step,
                });
            }
        }
        Ok(())
    }
}

/// Total objective: (1-l_id_w) id + l_id_w sid + (1-l_tri_w) tri
/// + l_tri_w stri + l_imi_w (alpha mim + beta exp) + l_sd_w sd.
pub fn total_loss(breakdown: &LossBreakdown, weights: &LossWeights) -> f64 {
    (1.0 - weights.lambda_id_t) * breakdown.l_id
        + weights.lambda_id_t * breakdown.l_sid
        + (1.0 - weights.lambda_tri_t) * breakdown.l_tri
        + weights.lambda_tri_t * breakdown.l_stri
        + weights.lambda_imi_t * imitation_loss(breakdown.l_mim, breakdown.l_exp, weights)
        + weights.lambda_sd_t * breakdown.l_sd
}

/// All adaptation-time loss terms with the combined gradient with respect to
/// the student's embeddings and logits.
pub struct AdaptLossInputs<'a> {
    pub student_emb: ArrayView2<'a, f64>,
    pub student_logits: ArrayView2<'a, f64>,
    pub teacher_emb: ArrayView2<'a, f64>,
    pub teacher_logits: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub margin: f64,
    pub repulsion_clamp: f64,
}

pub fn adaptation_loss(
    inputs: &AdaptLossInputs,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    let mask = CorrectnessMask::from_teacher_logits(&inputs.teacher_logits, inputs.labels);
    let (l_id, g_id) = id_loss(&inputs.student_logits, inputs.labels)?;
    let (l_sid, g_sid) = soft_id_loss(&inputs.student_logits, &inputs.teacher_logits)?;
    let (l_tri, g_tri) = triplet_loss(&inputs.student_emb, inputs.labels, inputs.margin)?;
    let (l_stri, g_stri) =
        soft_triplet_loss(&inputs.student_emb, &inputs.teacher_emb, inputs.labels)?;
    let (l_mim, g_mim) = mimic_loss(&inputs.student_emb, &inputs.teacher_emb, &mask)?;
    let (l_exp, g_exp) = exploitation_loss(
        &inputs.student_emb,
        &inputs.teacher_emb,
        &mask,
        inputs.labels,
        inputs.repulsion_clamp,
    )?;
    let a_t = relation_matrix(&inputs.teacher_emb)?;
    let (l_sd, g_sd) = structure_distillation_grad(&inputs.student_emb, &a_t)?;

    let mut breakdown = LossBreakdown {
        l_id,
        l_sid,
        l_tri,
        l_stri,
        l_mim,
        l_exp,
        l_sd,
        total: 0.0,
    };
    breakdown.total = total_loss(&breakdown, weights);

    let w = weights;
    let d_logits = g_id.mapv(|v| v * (1.0 - w.lambda_id_t)) + g_sid.mapv(|v| v * w.lambda_id_t);
    let d_emb = g_tri.mapv(|v| v * (1.0 - w.lambda_tri_t))
        + g_stri.mapv(|v| v * w.lambda_tri_t)
        + g_mim.mapv(|v| v * w.lambda_imi_t * w.alpha)
        + g_exp.mapv(|v| v * w.lambda_imi_t * w.beta)
        + g_sd.mapv(|v| v * w.lambda_sd_t);
    Ok((breakdown, d_emb, d_logits))
}

/// Pretraining objective on labeled source batches: l_id + l_tri.
pub fn pretrain_loss(
    emb: &ArrayView2<f64>,
    logits: &ArrayView2<f64>,
    labels: &[usize],
    margin: f64,
) -> Result<(f64, f64, Array2<f64>, Array2<f64>)> {
    let (l_id, g_id) = id_loss(logits, labels)?;
    let (l_tri, g_tri) = triplet_loss(emb, labels, margin)?;
    Ok((l_id, l_tri, g_tri, g_id))
}
