//! The end-to-end recipe and the three studies built on it. One run:
//! take a source image and its label, pull the classifier's parameter
//! gradient, invert it back into an image, standardize, and hand the
//! result to the sampler as its starting noise, once per target class.
//! Everything downstream (masks, IoU, centroid offsets, paired tests)
//! measures whether the object stayed where the noise put it.

use std::path::Path;

use crate::diffusion::{sample_loop, NoiseSchedule, SampleOptions, SnapshotPolicy, Trajectory};
use crate::error::{Error, Result};
use crate::mask::{iou, Mask};
use crate::nets::{Classifier, Denoiser, LossModel};
use crate::noise::{
    feature_map_saliency, fgsm_map, hflip, invert_gradients, rotate90, saliency_mask,
    seeded_unit_noise, InvertConfig, NoiseMethod, SaliencyNoise,
};
use crate::pipeline::archive::{
    load_archive, save_archive, take_tensor, ArchiveElement, NamedTensor,
};
use crate::pipeline::metrics::{centroid_offset, object_mask_of_output};
use crate::pipeline::pgm::encode_pgm;
use crate::pipeline::report::{aggregate, fmt_f64, sign_test_greater, write_csv, Aggregate, SignTest};
use crate::rng::sub_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ── Generation records ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GenerationRecord<E: Scalar> {
    pub source_image: String,
    pub source_class: usize,
    pub target_class: usize,
    pub noise: SaliencyNoise<E>,
    pub trajectory: Trajectory<E>,
    pub output_mask: Mask,
    pub blank_output: bool,
    /// IoU between the noise saliency mask and the output object mask.
    pub saliency_iou: f64,
    /// Distance between those masks' centroids; NaN when the output is blank.
    pub centroid_offset: f64,
    /// Percentile the stored metrics were computed at.
    pub mask_percentile: f64,
}

pub struct RecordMetrics {
    pub output_mask: Mask,
    pub blank: bool,
    pub iou: f64,
    pub offset: f64,
}

/// The metric rule in one place so stored values and recomputations cannot
/// drift apart.
pub fn record_metrics<E: Scalar>(
    noise_values: &Tensor<E>,
    x0: &Tensor<E>,
    percentile: f64,
) -> Result<RecordMetrics> {
    let noise_mask = saliency_mask(noise_values, percentile)?;
    let out = object_mask_of_output(x0)?;
    let score = iou(&noise_mask, &out.mask)?;
    let offset = match (noise_mask.centroid(), out.mask.centroid()) {
        (Some(a), Some(b)) => centroid_offset(a, b),
        _ => f64::NAN,
    };
    Ok(RecordMetrics { output_mask: out.mask, blank: out.blank, iou: score, offset })
}

impl<E: Scalar> GenerationRecord<E> {
    /// Recompute (iou, offset, blank) from the stored tensors; must agree
    /// with the stored metrics bit for bit.
    pub fn recomputed_metrics(&self) -> Result<RecordMetrics> {
        record_metrics(&self.noise.values, self.trajectory.x0(), self.mask_percentile)
    }
}

/// Sample with the given noise as the starting image and measure the run.
pub fn make_generation_record<E: Scalar>(
    den: &Denoiser<E>,
    sched: &NoiseSchedule,
    noise: SaliencyNoise<E>,
    target_class: usize,
    sample_seed: u64,
    percentile: f64,
    policy: SnapshotPolicy,
) -> Result<GenerationRecord<E>> {
    let opts = SampleOptions {
        snapshots: policy,
        zero_reverse_noise: false,
        source: noise.method.name().to_string(),
    };
    let shape = noise.values.shape().to_vec();
    let traj = sample_loop(den, sched, target_class, Some(&noise.values), &shape, sample_seed, &opts)?;
    let m = record_metrics(&noise.values, traj.x0(), percentile)?;
    Ok(GenerationRecord {
        source_image: noise.source_image.clone(),
        source_class: noise.source_class,
        target_class,
        noise,
        trajectory: traj,
        output_mask: m.output_mask,
        blank_output: m.blank,
        saliency_iou: m.iou,
        centroid_offset: m.offset,
        mask_percentile: percentile,
    })
}

/// Gradient → inversion → standardization, as a reusable noise object.
pub fn osn_noise<E: Scalar>(
    clf: &Classifier<E>,
    x_star: &Tensor<E>,
    source_id: &str,
    y: usize,
    steps: usize,
    base: &InvertConfig,
) -> Result<SaliencyNoise<E>> {
    let g_star = clf.param_gradient(x_star, y)?;
    let cfg = InvertConfig { steps, snapshots: Vec::new(), ..base.clone() };
    let out = invert_gradients(clf, &g_star, y, &cfg)?;
    SaliencyNoise::standardized(
        out.final_iterate(),
        NoiseMethod::InvertingGradients,
        steps,
        source_id,
        y,
        base.seed,
    )
}

pub fn baseline_noise<E: Scalar>(
    shape: &[usize],
    y: usize,
    seed: u64,
) -> Result<SaliencyNoise<E>> {
    let draw: Tensor<E> = seeded_unit_noise(shape, seed);
    SaliencyNoise::standardized(&draw, NoiseMethod::GaussianBaseline, 0, "gaussian", y, seed)
}

/// One source image, one inversion, one record per target class. Every
/// record reuses the identical standardized noise; only the conditioning
/// class differs.
#[allow(clippy::too_many_arguments)]
pub fn generate_conditioned<E: Scalar>(
    clf: &Classifier<E>,
    den: &Denoiser<E>,
    sched: &NoiseSchedule,
    x_star: &Tensor<E>,
    source_id: &str,
    y: usize,
    steps: usize,
    targets: &[usize],
    base: &InvertConfig,
    percentile: f64,
    policy: SnapshotPolicy,
    sample_seed: u64,
) -> Result<Vec<GenerationRecord<E>>> {
    let noise = osn_noise(clf, x_star, source_id, y, steps, base)?;
    targets
        .iter()
        .map(|&t| {
            make_generation_record(den, sched, noise.clone(), t, sample_seed, percentile, policy)
        })
        .collect()
}

/// Class-conditional samples from plain noise, scored by a classifier the
/// denoiser never saw during training. Returns overall accuracy.
pub fn sample_accuracy<E: Scalar>(
    clf: &Classifier<E>,
    den: &Denoiser<E>,
    sched: &NoiseSchedule,
    per_class: usize,
    seed: u64,
) -> Result<f64> {
    if per_class == 0 {
        return Err(Error::contract("need at least one sample per class".to_string()));
    }
    let shape = clf.input_shape();
    let classes = clf.arch().classes;
    let mut hits = 0usize;
    for class in 0..classes {
        for i in 0..per_class {
            let s = sub_seed(seed, (class * per_class + i) as u64);
            let traj = sample_loop(den, sched, class, None, &shape, s, &SampleOptions::default())?;
            let (pred, _) = clf.predict(traj.x0())?;
            if pred == class {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (classes * per_class) as f64)
}

// ── Localization evaluation ────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub group: String,
    pub index: usize,
    pub source_image: String,
    pub target_class: usize,
    pub iou: f64,
    pub offset: f64,
    pub blank: bool,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub osn: Aggregate,
    pub baseline: Aggregate,
    pub test: SignTest,
}

fn eval_rows<E: Scalar>(group: &str, records: &[GenerationRecord<E>]) -> Vec<EvalRow> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| EvalRow {
            group: group.to_string(),
            index: i,
            source_image: r.source_image.clone(),
            target_class: r.target_class,
            iou: r.saliency_iou,
            offset: r.centroid_offset,
            blank: r.blank_output,
        })
        .collect()
}

fn aggregate_rows(rows: &[EvalRow]) -> Result<Aggregate> {
    let ious: Vec<f64> = rows.iter().map(|r| r.iou).collect();
    let offsets: Vec<f64> = rows.iter().filter(|r| !r.blank).map(|r| r.offset).collect();
    let blanks = rows.iter().filter(|r| r.blank).count();
    aggregate(&ious, &offsets, blanks)
}

/// Paired comparison of saliency-noise records against baseline records:
/// per-record metrics, per-group aggregates, one-sided sign test of the
/// hypothesis that the saliency records' IoU exceeds the baseline's.
pub fn evaluate_localization<E: Scalar>(
    records: &[GenerationRecord<E>],
    baseline: &[GenerationRecord<E>],
) -> Result<EvalReport> {
    if records.is_empty() || baseline.is_empty() {
        return Err(Error::contract("evaluation needs nonempty record lists".to_string()));
    }
    if records.len() != baseline.len() {
        return Err(Error::contract(format!(
            "paired evaluation needs equal list lengths, got {} and {}",
            records.len(),
            baseline.len()
        )));
    }
    let shape = records[0].noise.values.shape();
    for r in records.iter().chain(baseline) {
        if r.noise.values.shape() != shape {
            return Err(Error::shape("records mix image shapes".to_string()));
        }
    }
    let osn_rows = eval_rows("osn", records);
    let base_rows = eval_rows("baseline", baseline);
    let osn_iou: Vec<f64> = osn_rows.iter().map(|r| r.iou).collect();
    let base_iou: Vec<f64> = base_rows.iter().map(|r| r.iou).collect();
    let test = sign_test_greater(&osn_iou, &base_iou)?;
    let osn = aggregate_rows(&osn_rows)?;
    let baseline_agg = aggregate_rows(&base_rows)?;
    let mut rows = osn_rows;
    rows.extend(base_rows);
    Ok(EvalReport { rows, osn, baseline: baseline_agg, test })
}

// ── Step study ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct StepStudyRow<E: Scalar> {
    pub step: usize,
    /// Inversion objective at this iterate.
    pub objective: f64,
    pub record: GenerationRecord<E>,
}

/// One inversion run, snapshot at each requested step count, one
/// generation per snapshot. All snapshots share the run, so rows differ
/// only in how long the inversion was allowed to work.
#[allow(clippy::too_many_arguments)]
pub fn run_step_study<E: Scalar>(
    clf: &Classifier<E>,
    den: &Denoiser<E>,
    sched: &NoiseSchedule,
    x_star: &Tensor<E>,
    source_id: &str,
    y: usize,
    target: usize,
    steps: &[usize],
    base: &InvertConfig,
    percentile: f64,
    sample_seed: u64,
) -> Result<Vec<StepStudyRow<E>>> {
    if steps.is_empty() {
        return Err(Error::contract("step study needs at least one step count".to_string()));
    }
    let g_star = clf.param_gradient(x_star, y)?;
    let cfg = InvertConfig {
        steps: *steps.last().unwrap(),
        snapshots: steps.to_vec(),
        ..base.clone()
    };
    let out = invert_gradients(clf, &g_star, y, &cfg)?;
    let mut rows = Vec::with_capacity(steps.len());
    for &s in steps {
        let iterate = out
            .at_step(s)
            .ok_or_else(|| Error::contract(format!("missing snapshot at step {s}")))?;
        let noise = SaliencyNoise::standardized(
            iterate,
            NoiseMethod::InvertingGradients,
            s,
            source_id,
            y,
            base.seed,
        )?;
        let record =
            make_generation_record(den, sched, noise, target, sample_seed, percentile, SnapshotPolicy::Endpoints)?;
        rows.push(StepStudyRow {
            step: s,
            objective: out.objective_at(s).expect("objective kept with snapshot"),
            record,
        });
    }
    Ok(rows)
}

// ── Manipulation study ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Manipulation {
    Hflip,
    Rotate90,
}

impl Manipulation {
    pub fn name(self) -> &'static str {
        match self {
            Manipulation::Hflip => "hflip",
            Manipulation::Rotate90 => "rotate90",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hflip" => Some(Manipulation::Hflip),
            "rotate90" => Some(Manipulation::Rotate90),
            _ => None,
        }
    }

    pub fn apply_tensor<E: Scalar>(self, x: &Tensor<E>) -> Result<Tensor<E>> {
        match self {
            Manipulation::Hflip => hflip(x),
            Manipulation::Rotate90 => rotate90(x),
        }
    }

    pub fn apply_mask(self, m: &Mask) -> Mask {
        match self {
            Manipulation::Hflip => m.hflip(),
            Manipulation::Rotate90 => m.rotate90(),
        }
    }

    /// Where a centroid lands under the manipulation of an h×w image.
    pub fn map_centroid(self, c: (f64, f64), h: usize, w: usize) -> (f64, f64) {
        match self {
            Manipulation::Hflip => (c.0, (w - 1) as f64 - c.1),
            Manipulation::Rotate90 => (c.1, (h - 1) as f64 - c.0),
        }
    }
}

/// Apply a spatial manipulation to a noise object. Both manipulations
/// permute pixels, so standardization stats survive untouched.
pub fn manipulated_noise<E: Scalar>(
    noise: &SaliencyNoise<E>,
    manip: Manipulation,
) -> Result<SaliencyNoise<E>> {
    Ok(SaliencyNoise {
        values: manip.apply_tensor(&noise.values)?,
        ..noise.clone()
    })
}

#[derive(Clone, Debug)]
pub struct ManipPair<E: Scalar> {
    pub manipulation: Manipulation,
    pub plain: GenerationRecord<E>,
    pub manipulated: GenerationRecord<E>,
    /// Plain output centroid pushed through the manipulation.
    pub predicted_centroid: Option<(f64, f64)>,
    pub manipulated_centroid: Option<(f64, f64)>,
    /// Output centroid of the manipulated run is closer to the predicted
    /// centroid than to the unmoved one. None when a centroid is missing
    /// or the two distances tie.
    pub follows_noise: Option<bool>,
}

/// Generate once from the noise and once from its manipulated copy, all
/// else identical, and ask whether the object moved the way the noise did.
pub fn run_manipulation_study<E: Scalar>(
    den: &Denoiser<E>,
    sched: &NoiseSchedule,
    noise: &SaliencyNoise<E>,
    manip: Manipulation,
    target: usize,
    sample_seed: u64,
    percentile: f64,
) -> Result<ManipPair<E>> {
    let plain = make_generation_record(
        den,
        sched,
        noise.clone(),
        target,
        sample_seed,
        percentile,
        SnapshotPolicy::Endpoints,
    )?;
    let moved = make_generation_record(
        den,
        sched,
        manipulated_noise(noise, manip)?,
        target,
        sample_seed,
        percentile,
        SnapshotPolicy::Endpoints,
    )?;
    let (h, w) = (noise.values.shape()[1], noise.values.shape()[2]);
    let plain_c = plain.output_mask.centroid();
    let moved_c = moved.output_mask.centroid();
    let predicted = plain_c.map(|c| manip.map_centroid(c, h, w));
    let follows = match (moved_c, predicted, plain_c) {
        (Some(m), Some(p), Some(u)) => {
            let to_predicted = centroid_offset(m, p);
            let to_unmoved = centroid_offset(m, u);
            if to_predicted == to_unmoved {
                None
            } else {
                Some(to_predicted < to_unmoved)
            }
        }
        _ => None,
    };
    Ok(ManipPair {
        manipulation: manip,
        plain,
        manipulated: moved,
        predicted_centroid: predicted,
        manipulated_centroid: moved_c,
        follows_noise: follows,
    })
}

// ── Alternative-map study ──────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AltmapRow<E: Scalar> {
    pub method: NoiseMethod,
    pub standardized: bool,
    pub record: GenerationRecord<E>,
}

/// One comparison table: inversion noise, FGSM and feature maps in both
/// raw and standardized form, and the Gaussian baseline, all fed to the
/// identical sampler and metrics. Raw maps go in exactly as produced; the
/// standardized variants answer whether range alone explains differences.
#[allow(clippy::too_many_arguments)]
pub fn run_altmaps_study<E: Scalar>(
    clf: &Classifier<E>,
    den: &Denoiser<E>,
    sched: &NoiseSchedule,
    x_star: &Tensor<E>,
    source_id: &str,
    y: usize,
    target: usize,
    steps: usize,
    base: &InvertConfig,
    fgsm_eps: f64,
    feature_layer: usize,
    percentile: f64,
    sample_seed: u64,
) -> Result<Vec<AltmapRow<E>>> {
    let seed = base.seed;
    let shape = x_star.shape().to_vec();

    let fgsm_raw = fgsm_map(clf, x_star, y, fgsm_eps)?;
    let feat_flat = feature_map_saliency(clf, x_star, feature_layer)?;
    let feat_raw = feat_flat.reshaped(shape.clone())?;

    let noises: Vec<SaliencyNoise<E>> = vec![
        osn_noise(clf, x_star, source_id, y, steps, base)?,
        SaliencyNoise::raw(fgsm_raw.clone(), NoiseMethod::Fgsm, 0, source_id, y, seed)?,
        SaliencyNoise::standardized(&fgsm_raw, NoiseMethod::Fgsm, 0, source_id, y, seed)?,
        SaliencyNoise::raw(feat_raw.clone(), NoiseMethod::FeatureMap, 0, source_id, y, seed)?,
        SaliencyNoise::standardized(&feat_raw, NoiseMethod::FeatureMap, 0, source_id, y, seed)?,
        baseline_noise(&shape, y, seed)?,
    ];
    noises
        .into_iter()
        .map(|n| {
            let method = n.method;
            let standardized = n.standardized;
            let record = make_generation_record(
                den,
                sched,
                n,
                target,
                sample_seed,
                percentile,
                SnapshotPolicy::Endpoints,
            )?;
            Ok(AltmapRow { method, standardized, record })
        })
        .collect()
}

// ── Persistence ────────────────────────────────────────────────────────

pub const RECORDS_CSV: &str = "records.csv";
pub const RECORDS_ARCHIVE: &str = "records.osnar";

const RECORD_COLUMNS: [&str; 13] = [
    "index",
    "source_image",
    "source_class",
    "target_class",
    "method",
    "steps_k",
    "standardized",
    "mu",
    "sigma",
    "seed",
    "blank",
    "iou",
    "centroid_offset",
];

/// Write records as a CSV of metadata plus an archive of the exact noise
/// and output tensors (PGM copies alongside, for eyes only). Loading the
/// pair reconstructs everything the evaluator needs, bit for bit.
pub fn save_records<E: Scalar + ArchiveElement>(
    dir: &Path,
    records: &[GenerationRecord<E>],
    percentile: f64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if let Some(r) = records.iter().find(|r| r.mask_percentile != percentile) {
        return Err(Error::contract(format!(
            "record for {} was scored at percentile {}, saving at {percentile}",
            r.source_image, r.mask_percentile
        )));
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut tensors = Vec::with_capacity(2 * records.len());
    for (i, r) in records.iter().enumerate() {
        rows.push(vec![
            i.to_string(),
            r.source_image.clone(),
            r.source_class.to_string(),
            r.target_class.to_string(),
            r.noise.method.name().to_string(),
            r.noise.steps_k.to_string(),
            r.noise.standardized.to_string(),
            fmt_f64(r.noise.mu),
            fmt_f64(r.noise.sigma),
            r.noise.seed.to_string(),
            r.blank_output.to_string(),
            fmt_f64(r.saliency_iou),
            fmt_f64(r.centroid_offset),
        ]);
        tensors.push(NamedTensor {
            name: format!("noise/{i}"),
            data: E::wrap(r.noise.values.clone()),
        });
        tensors.push(NamedTensor {
            name: format!("output/{i}"),
            data: E::wrap(r.trajectory.x0().clone()),
        });
        encode_pgm(&r.noise.values, &dir.join(format!("noise_{i:03}.pgm")))?;
        encode_pgm(r.trajectory.x0(), &dir.join(format!("output_{i:03}.pgm")))?;
    }
    // the percentile rides along so evaluate reproduces the stored metrics
    tensors.push(NamedTensor::f64("meta/mask_percentile", Tensor::scalar(percentile)));
    write_csv(&dir.join(RECORDS_CSV), &RECORD_COLUMNS, &rows)?;
    save_archive(&tensors, &dir.join(RECORDS_ARCHIVE))?;
    Ok(())
}

fn parse_cell<T: std::str::FromStr>(cell: &str, what: &str) -> Result<T> {
    cell.parse()
        .map_err(|_| Error::Config(format!("records.csv: bad {what} {cell:?}")))
}

pub fn load_records<E: Scalar + ArchiveElement>(dir: &Path) -> Result<Vec<GenerationRecord<E>>> {
    let text = std::fs::read_to_string(dir.join(RECORDS_CSV))?;
    let tensors = load_archive(&dir.join(RECORDS_ARCHIVE))?;
    let percentile = crate::pipeline::archive::take_f64_scalar(&tensors, "meta/mask_percentile")?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != RECORD_COLUMNS.join(",") {
        return Err(Error::Config(format!("records.csv: unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != RECORD_COLUMNS.len() {
            return Err(Error::Config(format!("records.csv: bad row {line:?}")));
        }
        let i: usize = parse_cell(cells[0], "index")?;
        let values: Tensor<E> = take_tensor(&tensors, &format!("noise/{i}"))?;
        let x0: Tensor<E> = take_tensor(&tensors, &format!("output/{i}"))?;
        let method = NoiseMethod::parse(cells[4])
            .ok_or_else(|| Error::Config(format!("records.csv: unknown method {:?}", cells[4])))?;
        let target_class: usize = parse_cell(cells[3], "target class")?;
        let seed: u64 = parse_cell(cells[9], "seed")?;
        let noise = SaliencyNoise {
            values,
            method,
            steps_k: parse_cell(cells[5], "step count")?,
            source_image: cells[1].to_string(),
            source_class: parse_cell(cells[2], "source class")?,
            standardized: parse_cell(cells[6], "standardized flag")?,
            mu: parse_cell(cells[7], "mu")?,
            sigma: parse_cell(cells[8], "sigma")?,
            seed,
        };
        let m = record_metrics(&noise.values, &x0, percentile)?;
        let stored_iou: f64 = parse_cell(cells[11], "iou")?;
        let stored_offset: f64 = parse_cell(cells[12], "centroid offset")?;
        let stored_blank: bool = parse_cell(cells[10], "blank flag")?;
        if stored_iou != m.iou
            || stored_blank != m.blank
            || (stored_offset != m.offset && !(stored_offset.is_nan() && m.offset.is_nan()))
        {
            return Err(Error::contract(format!(
                "record {i}: stored metrics disagree with recomputation"
            )));
        }
        out.push(GenerationRecord {
            source_image: noise.source_image.clone(),
            source_class: noise.source_class,
            target_class,
            noise,
            trajectory: Trajectory {
                class: target_class,
                seed,
                source: method.name().to_string(),
                snapshots: vec![(0, x0)],
            },
            output_mask: m.output_mask,
            blank_output: m.blank,
            saliency_iou: m.iou,
            centroid_offset: m.offset,
            mask_percentile: percentile,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::nets::{
        build_classifier, build_denoiser, ClassifierArch, ConvSpec, DenoiserArch,
    };
    use crate::scalar::Dtype;

    struct Rig {
        clf: Classifier<f64>,
        den: Denoiser<f64>,
        sched: NoiseSchedule,
        x_star: Tensor<f64>,
    }

    /// Tiny untrained models: the orchestration contracts (sharing,
    /// determinism, involution, persistence) hold regardless of training.
    fn rig() -> Rig {
        let carch = ClassifierArch {
            in_channels: 1,
            height: 8,
            width: 8,
            classes: 2,
            convs: vec![ConvSpec { out_channels: 3, kernel: 3 }],
        };
        let darch = DenoiserArch {
            in_channels: 1,
            hidden_channels: 4,
            layers: 2,
            kernel: 3,
            embed_dim: 6,
            classes: 2,
            t_max: 10,
        };
        let sched = make_schedule(10, crate::diffusion::ScheduleKind::Linear, 1e-3, 0.2).unwrap();
        let clf = build_classifier(&carch, 21).unwrap();
        let den = build_denoiser(&darch, 22).unwrap();
        let mut vals = vec![0.0f64; 64];
        for r in 2..6 {
            for c in 1..5 {
                vals[r * 8 + c] = 0.9;
            }
        }
        let x_star = Tensor::from_f64s(&[1, 8, 8], &vals).unwrap();
        Rig { clf, den, sched, x_star }
    }

    fn quick_cfg(seed: u64) -> InvertConfig {
        InvertConfig { steps: 3, seed, ..Default::default() }
    }

    #[test]
    fn records_share_identical_noise_across_targets() {
        let r = rig();
        let recs = generate_conditioned(
            &r.clf,
            &r.den,
            &r.sched,
            &r.x_star,
            "probe-0",
            0,
            3,
            &[0, 1],
            &quick_cfg(5),
            80.0,
            SnapshotPolicy::Endpoints,
            40,
        )
        .unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[0].noise.values.bit_eq(&recs[1].noise.values));
        assert_eq!(recs[0].target_class, 0);
        assert_eq!(recs[1].target_class, 1);
        // stored metrics must equal a recomputation
        for rec in &recs {
            let m = rec.recomputed_metrics().unwrap();
            assert_eq!(m.iou, rec.saliency_iou);
            assert_eq!(m.blank, rec.blank_output);
        }
        // trajectory actually starts at the shared noise
        assert!(recs[0].trajectory.snapshots[0].1.bit_eq(&recs[0].noise.values));
    }

    #[test]
    fn zero_step_generation_degenerates_to_the_baseline_draw() {
        let r = rig();
        let osn = osn_noise(&r.clf, &r.x_star, "probe-0", 1, 0, &quick_cfg(9)).unwrap();
        let base: SaliencyNoise<f64> = baseline_noise(&[1, 8, 8], 1, 9).unwrap();
        assert!(osn.values.bit_eq(&base.values));
        assert_eq!(osn.steps_k, 0);
        assert_eq!(base.method, NoiseMethod::GaussianBaseline);
    }

    #[test]
    fn step_study_shares_one_inversion_run() {
        let r = rig();
        let rows = run_step_study(
            &r.clf,
            &r.den,
            &r.sched,
            &r.x_star,
            "probe-0",
            0,
            1,
            &[0, 2, 4],
            &quick_cfg(3),
            80.0,
            17,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].step, 0);
        // the step-4 row equals an independent 4-step inversion: same run
        let four = osn_noise(&r.clf, &r.x_star, "probe-0", 0, 4, &quick_cfg(3)).unwrap();
        assert!(rows[2].record.noise.values.bit_eq(&four.values));
        for row in &rows {
            assert!(row.objective.is_finite());
        }
    }

    #[test]
    fn manipulation_round_trip_is_bit_identical() {
        let r = rig();
        let noise = osn_noise(&r.clf, &r.x_star, "probe-0", 0, 2, &quick_cfg(6)).unwrap();
        let once = manipulated_noise(&noise, Manipulation::Hflip).unwrap();
        let twice = manipulated_noise(&once, Manipulation::Hflip).unwrap();
        assert!(twice.values.bit_eq(&noise.values));
        // and the full generated record is therefore identical too
        let a = make_generation_record(&r.den, &r.sched, noise, 0, 8, 80.0, SnapshotPolicy::Endpoints)
            .unwrap();
        let b = make_generation_record(&r.den, &r.sched, twice, 0, 8, 80.0, SnapshotPolicy::Endpoints)
            .unwrap();
        assert!(a.trajectory.x0().bit_eq(b.trajectory.x0()));
        assert_eq!(a.saliency_iou, b.saliency_iou);
    }

    #[test]
    fn manipulated_noise_keeps_standardization_valid() {
        let r = rig();
        let noise = osn_noise(&r.clf, &r.x_star, "probe-0", 0, 2, &quick_cfg(2)).unwrap();
        for m in [Manipulation::Hflip, Manipulation::Rotate90] {
            manipulated_noise(&noise, m).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn centroid_prediction_matches_mask_transform() {
        let mut mask = Mask::empty(8, 8);
        for (r, c) in [(1, 2), (1, 3), (2, 2), (2, 3), (3, 3)] {
            mask.set(r, c, true);
        }
        let c0 = mask.centroid().unwrap();
        for m in [Manipulation::Hflip, Manipulation::Rotate90] {
            let moved = m.apply_mask(&mask).centroid().unwrap();
            let predicted = m.map_centroid(c0, 8, 8);
            assert!((moved.0 - predicted.0).abs() < 1e-9, "{m:?}");
            assert!((moved.1 - predicted.1).abs() < 1e-9, "{m:?}");
        }
    }

    #[test]
    fn manipulation_study_reports_prediction_agreement() {
        let r = rig();
        let noise = osn_noise(&r.clf, &r.x_star, "probe-0", 0, 2, &quick_cfg(12)).unwrap();
        let pair = run_manipulation_study(&r.den, &r.sched, &noise, Manipulation::Rotate90, 0, 33, 80.0)
            .unwrap();
        // untrained denoiser: no claim about which way agreement goes,
        // only that the report is complete and self-consistent
        assert_eq!(pair.manipulation, Manipulation::Rotate90);
        let expect = Manipulation::Rotate90.apply_tensor(&noise.values).unwrap();
        assert!(pair.manipulated.noise.values.bit_eq(&expect));
        if let (Some(p), Some(c)) = (pair.predicted_centroid, pair.plain.output_mask.centroid()) {
            let again = Manipulation::Rotate90.map_centroid(c, 8, 8);
            assert_eq!(p, again);
        }
    }

    #[test]
    fn altmaps_study_is_complete_and_deterministic() {
        let r = rig();
        let run = || {
            run_altmaps_study(
                &r.clf,
                &r.den,
                &r.sched,
                &r.x_star,
                "probe-0",
                0,
                1,
                2,
                &quick_cfg(4),
                0.1,
                0,
                80.0,
                51,
            )
            .unwrap()
        };
        let rows = run();
        let labels: Vec<(NoiseMethod, bool)> =
            rows.iter().map(|r| (r.method, r.standardized)).collect();
        assert_eq!(
            labels,
            vec![
                (NoiseMethod::InvertingGradients, true),
                (NoiseMethod::Fgsm, false),
                (NoiseMethod::Fgsm, true),
                (NoiseMethod::FeatureMap, false),
                (NoiseMethod::FeatureMap, true),
                (NoiseMethod::GaussianBaseline, true),
            ]
        );
        let again = run();
        for (a, b) in rows.iter().zip(&again) {
            assert!(a.record.trajectory.x0().bit_eq(b.record.trajectory.x0()));
            assert_eq!(a.record.saliency_iou, b.record.saliency_iou);
        }
    }

    #[test]
    fn evaluation_on_identical_lists_is_uninformative() {
        let r = rig();
        let recs = generate_conditioned(
            &r.clf,
            &r.den,
            &r.sched,
            &r.x_star,
            "probe-0",
            0,
            1,
            &[0, 1, 0],
            &quick_cfg(7),
            80.0,
            SnapshotPolicy::Endpoints,
            60,
        )
        .unwrap();
        let report = evaluate_localization(&recs, &recs).unwrap();
        assert_eq!(report.test.p_value, 1.0);
        assert_eq!(report.test.ties, 3);
        assert_eq!(report.rows.len(), 6);
        assert!(evaluate_localization(&recs, &recs[..2]).is_err());
        assert!(evaluate_localization::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn records_survive_the_disk_round_trip() {
        let r = rig();
        let mut recs = generate_conditioned(
            &r.clf,
            &r.den,
            &r.sched,
            &r.x_star,
            "probe-0",
            1,
            2,
            &[0, 1],
            &quick_cfg(14),
            80.0,
            SnapshotPolicy::Endpoints,
            70,
        )
        .unwrap();
        recs.push(
            make_generation_record(
                &r.den,
                &r.sched,
                baseline_noise(&[1, 8, 8], 1, 14).unwrap(),
                1,
                70,
                80.0,
                SnapshotPolicy::Endpoints,
            )
            .unwrap(),
        );
        let dir = tempfile::tempdir().unwrap();
        save_records(dir.path(), &recs, 80.0).unwrap();
        let back: Vec<GenerationRecord<f64>> = load_records(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in recs.iter().zip(&back) {
            assert!(a.noise.values.bit_eq(&b.noise.values));
            assert!(a.trajectory.x0().bit_eq(b.trajectory.x0()));
            assert_eq!(a.saliency_iou, b.saliency_iou);
            assert_eq!(a.noise.method, b.noise.method);
            assert_eq!(a.noise.mu, b.noise.mu);
        }
        // wrong precision is refused, not cast
        assert!(load_records::<f32>(dir.path()).is_err());
        assert_eq!(Dtype::F64, f64::DTYPE);

        // a tampered metric no longer matches its recomputation
        let csv_path = dir.path().join(RECORDS_CSV);
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let stored = fmt_f64(recs[0].saliency_iou);
        let tampered = text.replacen(&stored, "0.123456", 1);
        assert_ne!(text, tampered, "tamper target not found");
        std::fs::write(&csv_path, tampered).unwrap();
        assert!(load_records::<f64>(dir.path()).is_err());
    }

    #[test]
    fn eval_report_files_are_deterministic() {
        let r = rig();
        let recs = generate_conditioned(
            &r.clf,
            &r.den,
            &r.sched,
            &r.x_star,
            "probe-0",
            0,
            1,
            &[0, 1],
            &quick_cfg(8),
            80.0,
            SnapshotPolicy::Endpoints,
            90,
        )
        .unwrap();
        let base: Vec<GenerationRecord<f64>> = (0..2u64)
            .map(|s| {
                make_generation_record(
                    &r.den,
                    &r.sched,
                    baseline_noise(&[1, 8, 8], 0, 100 + s).unwrap(),
                    0,
                    90,
                    80.0,
                    SnapshotPolicy::Endpoints,
                )
                .unwrap()
            })
            .collect();
        let report = evaluate_localization(&recs, &base).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_eval_report(dir.path(), &report).unwrap();
        let csv1 = std::fs::read(dir.path().join("eval.csv")).unwrap();
        let sum1 = std::fs::read(dir.path().join("summary.txt")).unwrap();
        let report2 = evaluate_localization(&recs, &base).unwrap();
        write_eval_report(dir.path(), &report2).unwrap();
        assert_eq!(csv1, std::fs::read(dir.path().join("eval.csv")).unwrap());
        assert_eq!(sum1, std::fs::read(dir.path().join("summary.txt")).unwrap());
    }
}

pub fn write_eval_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.group.clone(),
                r.index.to_string(),
                r.source_image.clone(),
                r.target_class.to_string(),
                fmt_f64(r.iou),
                fmt_f64(r.offset),
                r.blank.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("eval.csv"),
        &["group", "index", "source_image", "target_class", "iou", "centroid_offset", "blank"],
        &rows,
    )?;
    let s = &report.test;
    let text = format!(
        "saliency noise:  median IoU {} (IQR {} .. {}), median centroid offset {}, {} blank\n\
         gaussian noise:  median IoU {} (IQR {} .. {}), median centroid offset {}, {} blank\n\
         sign test (saliency > gaussian, one-sided): {} wins / {} losses / {} ties, p = {}\n",
        fmt_f64(report.osn.median_iou),
        fmt_f64(report.osn.iou_q1),
        fmt_f64(report.osn.iou_q3),
        fmt_f64(report.osn.median_offset),
        report.osn.blank_count,
        fmt_f64(report.baseline.median_iou),
        fmt_f64(report.baseline.iou_q1),
        fmt_f64(report.baseline.iou_q3),
        fmt_f64(report.baseline.median_offset),
        report.baseline.blank_count,
        s.wins,
        s.losses,
        s.ties,
        fmt_f64(s.p_value),
    );
    std::fs::write(dir.join("summary.txt"), text)?;
    Ok(())
}
