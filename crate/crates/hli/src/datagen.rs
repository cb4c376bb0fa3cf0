//! Synthetic source/target dataset pairs with a controllable domain shift.
//!
//! Each identity is rendered as a deterministic parametric glyph (a body
//! silhouette with identity-specific shape and colors). Per-sample nuisance
//! variation stands in for pose and camera effects; target samples
//! additionally pass through a global domain transform whose strength is
//! controlled by `shift_magnitude`.

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{HliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

/// One image with its identity label and synthetic "camera" id.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    /// C×H×W, values in [0,1].
    pub image: Array3<f64>,
    pub identity: usize,
    pub domain: Domain,
    pub nuisance_id: usize,
}

/// Full description of a reproducible dataset pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_identities_source: usize,
    pub n_identities_target: usize,
    pub samples_per_identity: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub shift_magnitude: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_identities_source: 16,
            n_identities_target: 16,
            samples_per_identity: 8,
            image_height: 64,
            image_width: 32,
            shift_magnitude: 0.6,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities_source == 0 || self.n_identities_target == 0 {
            return Err(HliError::InvalidSpec("zero identities".into()));
        }
        if self.samples_per_identity == 0 {
            return Err(HliError::InvalidSpec("zero samples per identity".into()));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(HliError::InvalidSpec("zero-area images".into()));
        }
        if !(0.0..=1.0).contains(&self.shift_magnitude) {
            return Err(HliError::InvalidSpec(format!(
                "shift_magnitude {} outside [0,1]",
                self.shift_magnitude
            )));
        }
        Ok(())
    }
}

const N_CAMERAS: usize = 4;
const N_SHAPES: usize = 4;

/// Identity-determined rendering parameters.
struct Glyph {
    shape: usize,
    body_color: [f64; 3],
    head_color: [f64; 3],
    bg_color: [f64; 3],
    aspect: f64,
}

fn split_mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, tag: u64, a: u64, b: u64) -> u64 {
    split_mix(split_mix(split_mix(base ^ tag).wrapping_add(a)).wrapping_add(b))
}

fn glyph_for(seed: u64, domain: Domain, identity: usize) -> Glyph {
    let tag = match domain {
        Domain::Source => 0x5_0000,
        Domain::Target => 0x7_0000,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, identity as u64, 0));
    let shape = rng.gen_range(0..N_SHAPES);
    let mut color = || {
        [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
        ]
    };
    let body_color = color();
    let head_color = color();
    let bg_color = color();
    let aspect = rng.gen_range(0.5..0.9);
    Glyph {
        shape,
        body_color,
        head_color,
        bg_color,
        aspect,
    }
}

/// Render one sample: glyph plus per-sample nuisance (pose jitter,
/// brightness, noise, camera tint).
fn render_sample(
    spec: &DatasetSpec,
    glyph: &Glyph,
    rng: &mut ChaCha8Rng,
    nuisance_id: usize,
) -> Array3<f64> {
    let (h, w) = (spec.image_height, spec.image_width);
    let mut img = Array3::<f64>::zeros((3, h, w));

    // Pose jitter: shift and scale of the silhouette.
    let dx = rng.gen_range(-0.18..0.18);
    let dy = rng.gen_range(-0.15..0.15);
    let scale = rng.gen_range(0.7..1.25);
    let brightness = rng.gen_range(0.7..1.3);
    // Fixed per-camera tint so "cameras" are a real nuisance factor.
    let tint = [
        1.0 + 0.15 * ((nuisance_id % N_CAMERAS) as f64 - 1.5),
        1.0 - 0.10 * ((nuisance_id % N_CAMERAS) as f64 - 1.5),
        1.0 + 0.12 * (((nuisance_id * 7) % N_CAMERAS) as f64 - 1.5),
    ];

    let cx = 0.5 + dx;
    let body_cy = 0.62 + dy;
    let head_cy = 0.25 + dy;
    let body_rx = 0.30 * glyph.aspect * scale;
    let body_ry = 0.28 * scale;
    let head_r = 0.11 * scale;

    for y in 0..h {
        for x in 0..w {
            // Normalized coordinates in [0,1].
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let bu = (u - cx) / body_rx;
            let bv = (v - body_cy) / body_ry;
            let in_body = match glyph.shape {
                0 => bu * bu + bv * bv <= 1.0,                    // ellipse
                1 => bu.abs() <= 0.85 && bv.abs() <= 0.85,        // rectangle
                2 => bu.abs() + bv.abs() <= 1.0,                  // diamond
                _ => bv >= -1.0 && bv <= 1.0 && bu.abs() <= (bv + 1.0) / 2.0, // triangle
            };
            let hu = (u - cx) / head_r * glyph.aspect;
            let hv = (v - head_cy) / head_r * 2.0;
            let in_head = hu * hu + hv * hv <= 1.0;

            let base = if in_head {
                glyph.head_color
            } else if in_body {
                glyph.body_color
            } else {
                glyph.bg_color
            };
            for c in 0..3 {
                let noise = rng.gen_range(-0.06..0.06);
                img[[c, y, x]] = (base[c] * brightness * tint[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Global domain transform applied to target samples: affine color mix,
/// contrast change, additive noise and a background-like gradient overlay,
/// all interpolated by `magnitude`. At magnitude 0 this is the identity.
pub fn domain_transform(image: &Array3<f64>, magnitude: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    if magnitude == 0.0 {
        return image.clone();
    }
    let (c_n, h, w) = image.dim();
    debug_assert_eq!(c_n, 3);
    let m = magnitude;
    // Channel-mixing matrix: lerp(identity, near-luminance collapse, m).
    // At high magnitude the channels almost coincide, so color cues learned
    // on the source domain stop working on the target.
    let hue: [[f64; 3]; 3] = [
        [0.34, 0.33, 0.33],
        [0.33, 0.34, 0.33],
        [0.33, 0.33, 0.34],
    ];
    let mut mix = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            mix[i][j] = (1.0 - m) * id + m * hue[i][j];
        }
    }
    let contrast = 1.0 - 0.8 * m;
    let noise_sigma = 0.12 * m;
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            // Background texture swap: a diagonal gradient blended in.
            let grad = 0.5 * ((x as f64 / w as f64) + (y as f64 / h as f64));
            for i in 0..3 {
                let mut v = 0.0;
                for j in 0..3 {
                    v += mix[i][j] * image[[j, y, x]];
                }
                v = (v - 0.5) * contrast + 0.5;
                v += m * 0.3 * (grad - 0.5);
                v += noise_sigma * (rng.gen::<f64>() * 2.0 - 1.0);
                v = v.clamp(0.0, 1.0);
                // Tone-curve shift: nonlinear, so it cannot be undone by the
                // per-map normalization inside the network.
                out[[i, y, x]] = v.powf(1.0 + 2.0 * m);
            }
        }
    }
    out
}

/// Generate the source/target pair. Source identities are
/// `0..n_identities_source`; target identities are offset past them so the
/// identity sets are disjoint.
pub fn generate_domain_pair(spec: &DatasetSpec) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    spec.validate()?;
    let mut source = Vec::with_capacity(spec.n_identities_source * spec.samples_per_identity);
    for id in 0..spec.n_identities_source {
        let glyph = glyph_for(spec.seed, Domain::Source, id);
        for s in 0..spec.samples_per_identity {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x51, id as u64, s as u64));
            let nuisance_id = (id + s) % N_CAMERAS;
            let image = render_sample(spec, &glyph, &mut rng, nuisance_id);
            source.push(SampleRecord {
                image,
                identity: id,
                domain: Domain::Source,
                nuisance_id,
            });
        }
    }
    let offset = spec.n_identities_source;
    let mut target = Vec::with_capacity(spec.n_identities_target * spec.samples_per_identity);
    for id in 0..spec.n_identities_target {
        let glyph = glyph_for(spec.seed, Domain::Target, id);
        for s in 0..spec.samples_per_identity {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x71, id as u64, s as u64));
            let nuisance_id = (id + 2 * s + 1) % N_CAMERAS;
            let image = render_sample(spec, &glyph, &mut rng, nuisance_id);
            let image = domain_transform(&image, spec.shift_magnitude, &mut rng);
            target.push(SampleRecord {
                image,
                identity: offset + id,
                domain: Domain::Target,
                nuisance_id,
            });
        }
    }
    Ok((source, target))
}

/// A PK batch: images plus the labels training is allowed to see.
#[derive(Debug, Clone)]
pub struct Batch {
    /// N×C×H×W.
    pub images: Array4<f64>,
    /// Source identity or target pseudo label, per sample.
    pub labels: Vec<usize>,
    /// Index of each batch element in the originating dataset.
    pub indices: Vec<usize>,
}

pub fn stack_images(images: &[&Array3<f64>]) -> Array4<f64> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), n).assign(img);
    }
    out
}

/// Draw a PK batch: P distinct identities, K samples each; identities with
/// fewer than K samples are sampled with replacement.
pub fn make_pk_batch(
    images: &[&Array3<f64>],
    labels: &[usize],
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if p < 2 || k < 2 {
        return Err(HliError::InvalidArgument("PK batch requires P >= 2, K >= 2".into()));
    }
    if images.is_empty() {
        return Err(HliError::InvalidArgument("empty dataset".into()));
    }
    let mut by_id: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &lab) in labels.iter().enumerate() {
        match by_id.iter_mut().find(|(l, _)| *l == lab) {
            Some((_, v)) => v.push(i),
            None => by_id.push((lab, vec![i])),
        }
    }
    if by_id.len() < p {
        return Err(HliError::InvalidArgument(format!(
            "dataset has {} distinct identities, need P={}",
            by_id.len(),
            p
        )));
    }
    // Choose P distinct identities via partial Fisher-Yates.
    let mut order: Vec<usize> = (0..by_id.len()).collect();
    for i in 0..p {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    let mut picked_images = Vec::with_capacity(p * k);
    let mut picked_labels = Vec::with_capacity(p * k);
    let mut picked_indices = Vec::with_capacity(p * k);
    for &idp in order.iter().take(p) {
        let (lab, members) = &by_id[idp];
        if members.len() >= k {
            // Without replacement.
            let mut midx: Vec<usize> = (0..members.len()).collect();
            for i in 0..k {
                let j = rng.gen_range(i..midx.len());
                midx.swap(i, j);
            }
            for &mi in midx.iter().take(k) {
                let idx = members[mi];
                picked_images.push(images[idx]);
                picked_labels.push(*lab);
                picked_indices.push(idx);
            }
        } else {
            for _ in 0..k {
                let idx = members[rng.gen_range(0..members.len())];
                picked_images.push(images[idx]);
                picked_labels.push(*lab);
                picked_indices.push(idx);
            }
        }
    }
    Ok(Batch {
        images: stack_images(&picked_images),
        labels: picked_labels,
        indices: picked_indices,
    })
}

/// Target-domain dataset view that withholds ground-truth identities from
/// training. Reads of the true labels go through [`TargetView::ground_truth`]
/// only, which counts every access so tests can audit label hygiene.
pub struct TargetView {
    images: Vec<Array3<f64>>,
    nuisance_ids: Vec<usize>,
    pseudo_labels: Vec<usize>,
    withheld_identities: Vec<usize>,
    gt_reads: AtomicU64,
}

impl TargetView {
    pub fn new(records: &[SampleRecord]) -> Self {
        Self {
            images: records.iter().map(|r| r.image.clone()).collect(),
            nuisance_ids: records.iter().map(|r| r.nuisance_id).collect(),
            pseudo_labels: vec![0; records.len()],
            withheld_identities: records.iter().map(|r| r.identity).collect(),
            gt_reads: AtomicU64::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> Vec<&Array3<f64>> {
        self.images.iter().collect()
    }

    pub fn image(&self, i: usize) -> &Array3<f64> {
        &self.images[i]
    }

    pub fn nuisance_ids(&self) -> &[usize] {
        &self.nuisance_ids
    }

    pub fn pseudo_labels(&self) -> &[usize] {
        &self.pseudo_labels
    }

    pub fn set_pseudo_labels(&mut self, labels: Vec<usize>) -> Result<()> {
        if labels.len() != self.images.len() {
            return Err(HliError::ShapeMismatch(format!(
                "{} pseudo labels for {} samples",
                labels.len(),
                self.images.len()
            )));
        }
        self.pseudo_labels = labels;
        Ok(())
    }

    /// Ground-truth identities, for evaluation only. Every call is counted.
    pub fn ground_truth(&self) -> &[usize] {
        self.gt_reads.fetch_add(1, Ordering::SeqCst);
        &self.withheld_identities
    }

    /// Number of ground-truth label reads so far.
    pub fn ground_truth_read_count(&self) -> u64 {
        self.gt_reads.load(Ordering::SeqCst)
    }
}

/// Dump a dataset as PNGs plus a CSV manifest (path, identity, domain, nuisance_id).
pub fn dump_dataset(records: &[SampleRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("path,identity,domain,nuisance_id\n");
    for (i, rec) in records.iter().enumerate() {
        let (_, h, w) = rec.image.dim();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (rec.image[[0, y, x]] * 255.0).round() as u8,
                    (rec.image[[1, y, x]] * 255.0).round() as u8,
                    (rec.image[[2, y, x]] * 255.0).round() as u8,
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let name = format!("{:05}.png", i);
        buf.save(dir.join(&name))
            .map_err(|e| HliError::Io(std::io::Error::other(e)))?;
        let dom = match rec.domain {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        manifest.push_str(&format!("{},{},{},{}\n", name, rec.identity, dom, rec.nuisance_id));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Load a dataset dumped by [`dump_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
    let mut records = Vec::new();
    for line in manifest.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(HliError::InvalidArgument(format!("bad manifest line: {line}")));
        }
        let img = image::open(dir.join(parts[0]))
            .map_err(|e| HliError::Io(std::io::Error::other(e)))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut arr = Array3::<f64>::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    arr[[c, y, x]] = px[c] as f64 / 255.0;
                }
            }
        }
        let domain = match parts[2] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(HliError::InvalidArgument(format!("bad domain: {other}"))),
        };
        records.push(SampleRecord {
            image: arr,
            identity: parts[1].parse().map_err(|_| {
                HliError::InvalidArgument(format!("bad identity: {}", parts[1]))
            })?,
            domain,
            nuisance_id: parts[3].parse().map_err(|_| {
                HliError::InvalidArgument(format!("bad nuisance_id: {}", parts[3]))
            })?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_identities_source: 8,
            n_identities_target: 4,
            samples_per_identity: 10,
            image_height: 32,
            image_width: 16,
            shift_magnitude: 0.5,
            seed: 7,
        }
    }

    #[test]
    fn same_spec_is_bit_identical() {
        let spec = small_spec();
        let (s1, t1) = generate_domain_pair(&spec).unwrap();
        let (s2, t2) = generate_domain_pair(&spec).unwrap();
        for (a, b) in s1.iter().zip(&s2).chain(t1.iter().zip(&t2)) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.nuisance_id, b.nuisance_id);
        }
    }

    #[test]
    fn counts_and_disjoint_identities() {
        let spec = small_spec();
        let (source, target) = generate_domain_pair(&spec).unwrap();
        assert_eq!(source.len(), 80);
        assert_eq!(target.len(), 40);
        let max_src = source.iter().map(|r| r.identity).max().unwrap();
        let min_tgt = target.iter().map(|r| r.identity).min().unwrap();
        assert!(min_tgt > max_src);
    }

    #[test]
    fn pixel_range_is_clipped() {
        let (source, target) = generate_domain_pair(&small_spec()).unwrap();
        for rec in source.iter().chain(&target) {
            for &v in rec.image.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn zero_shift_transform_is_identity() {
        let (_, target) = generate_domain_pair(&DatasetSpec {
            shift_magnitude: 0.0,
            ..small_spec()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = domain_transform(&target[0].image, 0.0, &mut rng);
        assert_eq!(out, target[0].image);
    }

    #[test]
    fn rejects_degenerate_specs() {
        let mut spec = small_spec();
        spec.n_identities_source = 0;
        assert!(generate_domain_pair(&spec).is_err());
        let mut spec = small_spec();
        spec.image_width = 0;
        assert!(generate_domain_pair(&spec).is_err());
        let mut spec = small_spec();
        spec.shift_magnitude = 1.5;
        assert!(generate_domain_pair(&spec).is_err());
    }

    #[test]
    fn pk_batch_shape_and_composition() {
        let (source, _) = generate_domain_pair(&small_spec()).unwrap();
        let images: Vec<&Array3<f64>> = source.iter().map(|r| &r.image).collect();
        let labels: Vec<usize> = source.iter().map(|r| r.identity).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let batch = make_pk_batch(&images, &labels, 4, 4, &mut rng).unwrap();
            assert_eq!(batch.images.dim().0, 16);
            let mut ids: Vec<usize> = batch.labels.clone();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 4);
            for &id in &ids {
                assert_eq!(batch.labels.iter().filter(|&&l| l == id).count(), 4);
            }
        }
    }

    #[test]
    fn pk_batch_paper_size() {
        let spec = DatasetSpec {
            n_identities_source: 20,
            samples_per_identity: 6,
            ..small_spec()
        };
        let (source, _) = generate_domain_pair(&spec).unwrap();
        let images: Vec<&Array3<f64>> = source.iter().map(|r| &r.image).collect();
        let labels: Vec<usize> = source.iter().map(|r| r.identity).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = make_pk_batch(&images, &labels, 16, 4, &mut rng).unwrap();
        assert_eq!(batch.images.dim().0, 64);
    }

    #[test]
    fn pk_batch_samples_with_replacement_when_short() {
        // One identity with only 2 samples, K = 4.
        let spec = DatasetSpec {
            n_identities_source: 3,
            samples_per_identity: 2,
            ..small_spec()
        };
        let (source, _) = generate_domain_pair(&spec).unwrap();
        let images: Vec<&Array3<f64>> = source.iter().map(|r| &r.image).collect();
        let labels: Vec<usize> = source.iter().map(|r| r.identity).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = make_pk_batch(&images, &labels, 2, 4, &mut rng).unwrap();
        assert_eq!(batch.images.dim().0, 8);
        for lab in [0usize, 1, 2] {
            let n = batch.labels.iter().filter(|&&l| l == lab).count();
            assert!(n == 0 || n == 4);
        }
    }

    #[test]
    fn pk_batch_rejects_too_few_identities() {
        let spec = DatasetSpec {
            n_identities_source: 3,
            ..small_spec()
        };
        let (source, _) = generate_domain_pair(&spec).unwrap();
        let images: Vec<&Array3<f64>> = source.iter().map(|r| &r.image).collect();
        let labels: Vec<usize> = source.iter().map(|r| r.identity).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(make_pk_batch(&images, &labels, 8, 4, &mut rng).is_err());
    }

    #[test]
    fn target_view_counts_ground_truth_reads() {
        let (_, target) = generate_domain_pair(&small_spec()).unwrap();
        let view = TargetView::new(&target);
        assert_eq!(view.ground_truth_read_count(), 0);
        let _ = view.pseudo_labels();
        let _ = view.images();
        assert_eq!(view.ground_truth_read_count(), 0);
        let _ = view.ground_truth();
        assert_eq!(view.ground_truth_read_count(), 1);
    }

    #[test]
    fn dump_load_round_trip_metadata() {
        let spec = DatasetSpec {
            n_identities_source: 2,
            samples_per_identity: 2,
            ..small_spec()
        };
        let (source, _) = generate_domain_pair(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        dump_dataset(&source, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), source.len());
        for (a, b) in loaded.iter().zip(&source) {
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.nuisance_id, b.nuisance_id);
            assert_eq!(a.image.dim(), b.image.dim());
            // 8-bit quantization on the pixels.
            for (x, y) in a.image.iter().zip(b.image.iter()) {
                assert!((x - y).abs() < 1.0 / 255.0 + 1e-9);
            }
        }
    }
}
