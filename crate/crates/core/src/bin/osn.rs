//! Command-line front end: dataset generation, the two training runs,
//! gradient inversion, conditioned generation, the three studies, and
//! offline evaluation of stored records. Every command is a pure function
//! of (config file, seed, precision): rerunning one overwrites its outputs
//! with byte-identical files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use osn::diffusion::{train_denoiser, NoiseSchedule};
use osn::nets::{train_classifier, Classifier, Denoiser, LossModel};
use osn::noise::{invert_gradients, InvertConfig, NoiseMethod};
use osn::pipeline::archive::ArchiveElement;
use osn::pipeline::checkpoint::{
    load_classifier, load_denoiser, save_classifier, save_denoiser,
};
use osn::pipeline::dataset::{labelled_images, make_shapes_dataset, Sample};
use osn::pipeline::report::{fmt_f64, median, sign_test_greater, write_csv};
use osn::pipeline::studies::{
    baseline_noise, evaluate_localization, generate_conditioned, load_records,
    make_generation_record, osn_noise, run_altmaps_study, run_manipulation_study, run_step_study,
    save_records, write_eval_report, GenerationRecord, Manipulation,
};
use osn::pipeline::{encode_pgm, RunConfig};
use osn::rng::sub_seed;
use osn::scalar::Scalar;
use osn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "osn",
    about = "Saliency-noise control of a class-conditional DDPM on a synthetic shapes domain"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Flat `key = value` config file; defaults apply where absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Working directory: models are written to and read from here.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Element type for every tensor in the run. f64 is the default: a
    /// well-trained classifier is extremely confident on far-off-manifold
    /// inputs, and the parameter gradients there sit near the bottom of
    /// f32 range. f32 is fine for small configurations.
    #[arg(long, global = true, default_value = "f64")]
    precision: String,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the shapes dataset to PGM files plus an index CSV.
    MakeDataset,
    /// Train the conv classifier and save its checkpoint.
    TrainClassifier,
    /// Train the conditional denoiser and save its checkpoint.
    TrainDdpm,
    /// Run gradient inversion from one dataset image; save snapshots.
    Invert {
        /// Dataset sample to take the target gradient from.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Full recipe on one image: invert, standardize, sample per target.
    Generate {
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Localization quality as a function of inversion step count.
    StudySteps,
    /// Flip or rotate the noise and test whether the object follows.
    StudyManip {
        /// "hflip" or "rotate90".
        #[arg(long, default_value = "hflip")]
        manipulation: String,
    },
    /// Alternative saliency maps (FGSM, feature maps), raw and standardized.
    StudyAltmaps,
    /// Recompute metrics and the paired report from stored records.
    Evaluate {
        /// Directory holding records.csv + records.osnar (default: <out>/generate).
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.precision.as_str() {
        "f32" => run::<f32>(&cli),
        "f64" => run::<f64>(&cli),
        other => Err(Error::Config(format!("unknown precision {other:?}, want f32 or f64"))),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

struct Ctx<E: Scalar> {
    cfg: RunConfig,
    out: PathBuf,
    samples: Vec<Sample<E>>,
}

impl<E: Scalar + ArchiveElement> Ctx<E> {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        let samples = make_shapes_dataset::<E>(&cfg.dataset_spec())?;
        std::fs::create_dir_all(&cli.out)?;
        Ok(Ctx { cfg, out: cli.out.clone(), samples })
    }

    fn sample(&self, index: usize) -> Result<&Sample<E>> {
        self.samples.get(index).ok_or_else(|| {
            Error::contract(format!(
                "sample index {index} out of range, dataset has {}",
                self.samples.len()
            ))
        })
    }

    fn classifier_path(&self) -> PathBuf {
        self.out.join(format!("classifier_{}.osnar", E::DTYPE.name()))
    }

    fn denoiser_path(&self) -> PathBuf {
        self.out.join(format!("denoiser_{}.osnar", E::DTYPE.name()))
    }

    fn load_models(&self) -> Result<(Classifier<E>, Denoiser<E>, NoiseSchedule)> {
        let need = |path: &Path, cmd: &str| -> Result<()> {
            if !path.exists() {
                return Err(Error::contract(format!(
                    "missing {}; run `osn {cmd}` first (same --out and --precision)",
                    path.display()
                )));
            }
            Ok(())
        };
        need(&self.classifier_path(), "train-classifier")?;
        need(&self.denoiser_path(), "train-ddpm")?;
        let clf = load_classifier(&self.classifier_path())?;
        let den = load_denoiser(&self.denoiser_path())?;
        let sched = self.cfg.noise_schedule()?;
        if den.arch().t_max != sched.t_max() {
            return Err(Error::contract(format!(
                "checkpoint was trained for t_max {}, config says {}",
                den.arch().t_max,
                sched.t_max()
            )));
        }
        Ok((clf, den, sched))
    }

    /// Study cell i: source sample plus the inversion and sampling seeds.
    fn study_cell(&self, i: usize) -> (&Sample<E>, InvertConfig, u64) {
        let sample = &self.samples[i % self.samples.len()];
        let invert = self.cfg.invert_config(sub_seed(self.cfg.seed, 100 + i as u64));
        let sample_seed = sub_seed(self.cfg.seed, 200 + i as u64);
        (sample, invert, sample_seed)
    }
}

fn run<E: Scalar + ArchiveElement>(cli: &Cli) -> Result<()> {
    let ctx: Ctx<E> = Ctx::new(cli)?;
    match &cli.cmd {
        Cmd::MakeDataset => make_dataset(&ctx),
        Cmd::TrainClassifier => cmd_train_classifier(&ctx),
        Cmd::TrainDdpm => cmd_train_ddpm(&ctx),
        Cmd::Invert { index } => cmd_invert(&ctx, *index),
        Cmd::Generate { index } => cmd_generate(&ctx, *index),
        Cmd::StudySteps => cmd_study_steps(&ctx),
        Cmd::StudyManip { manipulation } => {
            let manip = Manipulation::parse(manipulation).ok_or_else(|| {
                Error::Config(format!("unknown manipulation {manipulation:?}, want hflip or rotate90"))
            })?;
            cmd_study_manip(&ctx, manip)
        }
        Cmd::StudyAltmaps => cmd_study_altmaps(&ctx),
        Cmd::Evaluate { records } => {
            let dir = records.clone().unwrap_or_else(|| ctx.out.join("generate"));
            cmd_evaluate::<E>(&dir)
        }
    }
}

fn make_dataset<E: Scalar + ArchiveElement>(ctx: &Ctx<E>) -> Result<()> {
    let dir = ctx.out.join("dataset");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::with_capacity(ctx.samples.len());
    for (i, s) in ctx.samples.iter().enumerate() {
        encode_pgm(&s.image, &dir.join(format!("img_{i:04}.pgm")))?;
        rows.push(vec![
            i.to_string(),
            s.id.clone(),
            s.label.to_string(),
            fmt_f64(s.centroid.0),
            fmt_f64(s.centroid.1),
            s.mask.count().to_string(),
        ]);
    }
    write_csv(
        &dir.join("index.csv"),
        &["index", "id", "label", "centroid_row", "centroid_col", "object_pixels"],
        &rows,
    )?;
    println!("dataset: {} samples in {}", ctx.samples.len(), dir.display());
    Ok(())
}

fn cmd_train_classifier<E: Scalar + ArchiveElement>(ctx: &Ctx<E>) -> Result<()> {
    let cfg = ctx.cfg.classifier_train(sub_seed(ctx.cfg.seed, 1));
    let data = labelled_images(&ctx.samples);
    let (clf, fit) = train_classifier(&data, &ctx.cfg.classifier_arch(), &cfg)?;
    save_classifier(&clf, &ctx.classifier_path())?;
    let acc = fit.holdout_accuracy.unwrap_or(f64::NAN);
    write_csv(
        &ctx.out.join("classifier_fit.csv"),
        &["epochs", "final_train_loss", "holdout_accuracy"],
        &[vec![fit.epochs.to_string(), fmt_f64(fit.final_train_loss), fmt_f64(acc)]],
    )?;
    println!(
        "classifier: loss {} holdout accuracy {} -> {}",
        fmt_f64(fit.final_train_loss),
        fmt_f64(acc),
        ctx.classifier_path().display()
    );
    Ok(())
}

fn cmd_train_ddpm<E: Scalar + ArchiveElement>(ctx: &Ctx<E>) -> Result<()> {
    let cfg = ctx.cfg.denoiser_train(sub_seed(ctx.cfg.seed, 2));
    let sched = ctx.cfg.noise_schedule()?;
    let data = labelled_images(&ctx.samples);
    let (den, fit) = train_denoiser(&data, &ctx.cfg.denoiser_arch(), &sched, &cfg)?;
    save_denoiser(&den, &ctx.denoiser_path())?;
    let rows: Vec<Vec<String>> = fit
        .epoch_mse
        .iter()
        .enumerate()
        .map(|(e, m)| vec![(e + 1).to_string(), fmt_f64(*m)])
        .collect();
    write_csv(&ctx.out.join("denoiser_fit.csv"), &["epoch", "train_mse"], &rows)?;
    println!(
        "denoiser: {} epochs, final train mse {} -> {}",
        fit.epoch_mse.len(),
        fmt_f64(*fit.epoch_mse.last().unwrap_or(&f64::NAN)),
        ctx.denoiser_path().display()
    );
    Ok(())
}

fn cmd_invert<E: Scalar + ArchiveElement>(ctx: &Ctx<E>, index: usize) -> Result<()> {
    let (clf, _, _) = ctx.load_models()?;
    let s = ctx.sample(index)?;
    let g_star = clf.param_gradient(&s.image, s.label)?;
    let mut cfg = ctx.cfg.invert_config(sub_seed(ctx.cfg.seed, 3));
    cfg.snapshots = ctx.cfg.snapshot_steps.clone();
    let out = invert_gradients(&clf, &g_star, s.label, &cfg)?;
    let dir = ctx.out.join("invert");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    for ((step, x), (_, obj)) in out.snapshots.iter().zip(&out.objectives) {
        encode_pgm(x, &dir.join(format!("step_{step:05}.pgm")))?;
        rows.push(vec![step.to_string(), fmt_f64(*obj)]);
    }
    write_csv(&dir.join("objectives.csv"), &["step", "cosine_distance"], &rows)?;
    println!(
        "inversion of {}: objective {} -> {} over {} steps",
        s.id,
        fmt_f64(out.objectives.first().map(|p| p.1).unwrap_or(f64::NAN)),
        fmt_f64(out.objectives.last().map(|p| p.1).unwrap_or(f64::NAN)),
        cfg.steps
    );
    Ok(())
}

fn cmd_generate<E: Scalar + ArchiveElement>(ctx: &Ctx<E>, index: usize) -> Result<()> {
    let (clf, den, sched) = ctx.load_models()?;
    let s = ctx.sample(index)?;
    let invert = ctx.cfg.invert_config(sub_seed(ctx.cfg.seed, 3));
    let sample_seed = sub_seed(ctx.cfg.seed, 4);
    let mut records = generate_conditioned(
        &clf,
        &den,
        &sched,
        &s.image,
        &s.id,
        s.label,
        ctx.cfg.invert_steps,
        &ctx.cfg.targets,
        &invert,
        ctx.cfg.mask_percentile,
        ctx.cfg.trajectory,
        sample_seed,
    )?;
    // paired baseline: same seeds, plain standardized Gaussian noise
    let shape = s.image.shape().to_vec();
    let base = baseline_noise::<E>(&shape, s.label, invert.seed)?;
    for &t in &ctx.cfg.targets {
        records.push(make_generation_record(
            &den,
            &sched,
            base.clone(),
            t,
            sample_seed,
            ctx.cfg.mask_percentile,
            ctx.cfg.trajectory,
        )?);
    }
    let dir = ctx.out.join("generate");
    save_records(&dir, &records, ctx.cfg.mask_percentile)?;
    println!("generate: {} records in {}", records.len(), dir.display());
    Ok(())
}

fn cmd_study_steps<E: Scalar + ArchiveElement>(ctx: &Ctx<E>) -> Result<()> {
    let (clf, den, sched) = ctx.load_models()?;
    let steps = &ctx.cfg.snapshot_steps;
    if steps.len() < 2 {
        return Err(Error::contract("step study needs at least two step counts".to_string()));
    }
    let dir = ctx.out.join("study_steps");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    let mut per_step: Vec<Vec<f64>> = vec![Vec::new(); steps.len()];
    for i in 0..ctx.cfg.study_pairs {
        let (s, invert, sample_seed) = ctx.study_cell(i);
        let cells = run_step_study(
            &clf,
            &den,
            &sched,
            &s.image,
            &s.id,
            s.label,
            s.label,
            steps,
            &invert,
            ctx.cfg.mask_percentile,
            sample_seed,
        )?;
        for (j, row) in cells.iter().enumerate() {
            per_step[j].push(row.record.saliency_iou);
            rows.push(vec![
                i.to_string(),
                s.id.clone(),
                row.step.to_string(),
                fmt_f64(row.objective),
                fmt_f64(row.record.saliency_iou),
                fmt_f64(row.record.centroid_offset),
                row.record.blank_output.to_string(),
            ]);
        }
    }
    write_csv(
        &dir.join("steps.csv"),
        &["pair", "source_image", "step", "objective", "iou", "centroid_offset", "blank"],
        &rows,
    )?;
    let mut summary = String::new();
    for (j, &s) in steps.iter().enumerate() {
        summary.push_str(&format!("step {s}: median IoU {}\n", fmt_f64(median(&per_step[j])?)));
    }
    let hi = steps.len() - 1;
    let lo = steps.len() - 2;
    let test = sign_test_greater(&per_step[hi], &per_step[lo])?;
    summary.push_str(&format!(
        "sign test (step {} > step {}, one-sided): {} wins / {} losses / {} ties, p = {}\n",
        steps[hi],
        steps[lo],
        test.wins,
        test.losses,
        test.ties,
        fmt_f64(test.p_value),
    ));
    std::fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_study_manip<E: Scalar + ArchiveElement>(ctx: &Ctx<E>, manip: Manipulation) -> Result<()> {
    let (clf, den, sched) = ctx.load_models()?;
    let dir = ctx.out.join("study_manip");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    let mut follows = 0usize;
    let mut decided = 0usize;
    for i in 0..ctx.cfg.study_pairs {
        let (s, invert, sample_seed) = ctx.study_cell(i);
        let noise = osn_noise(&clf, &s.image, &s.id, s.label, ctx.cfg.invert_steps, &invert)?;
        let pair = run_manipulation_study(
            &den,
            &sched,
            &noise,
            manip,
            s.label,
            sample_seed,
            ctx.cfg.mask_percentile,
        )?;
        let fmt_c = |c: Option<(f64, f64)>| match c {
            Some((r, q)) => format!("{}|{}", fmt_f64(r), fmt_f64(q)),
            None => "none".to_string(),
        };
        if let Some(f) = pair.follows_noise {
            decided += 1;
            if f {
                follows += 1;
            }
        }
        rows.push(vec![
            i.to_string(),
            s.id.clone(),
            manip.name().to_string(),
            fmt_c(pair.plain.output_mask.centroid()),
            fmt_c(pair.manipulated_centroid),
            fmt_c(pair.predicted_centroid),
            pair.follows_noise.map(|f| f.to_string()).unwrap_or_else(|| "none".to_string()),
        ]);
    }
    write_csv(
        &dir.join(format!("manip_{}.csv", manip.name())),
        &["pair", "source_image", "manipulation", "plain_centroid", "moved_centroid", "predicted_centroid", "follows_noise"],
        &rows,
    )?;
    let summary = format!(
        "{}: output followed the noise in {follows} of {decided} decided pairs ({} undecided)\n",
        manip.name(),
        ctx.cfg.study_pairs - decided
    );
    std::fs::write(dir.join(format!("summary_{}.txt", manip.name())), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_study_altmaps<E: Scalar + ArchiveElement>(ctx: &Ctx<E>) -> Result<()> {
    let (clf, den, sched) = ctx.load_models()?;
    let dir = ctx.out.join("study_altmaps");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    let mut by_method: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for i in 0..ctx.cfg.study_pairs {
        let (s, invert, sample_seed) = ctx.study_cell(i);
        let cells = run_altmaps_study(
            &clf,
            &den,
            &sched,
            &s.image,
            &s.id,
            s.label,
            s.label,
            ctx.cfg.invert_steps,
            &invert,
            ctx.cfg.fgsm_eps,
            ctx.cfg.feature_layer,
            ctx.cfg.mask_percentile,
            sample_seed,
        )?;
        for cell in &cells {
            let tag = format!(
                "{}/{}",
                cell.method.name(),
                if cell.standardized { "standardized" } else { "raw" }
            );
            by_method.entry(tag.clone()).or_default().push(cell.record.saliency_iou);
            rows.push(vec![
                i.to_string(),
                s.id.clone(),
                cell.method.name().to_string(),
                cell.standardized.to_string(),
                fmt_f64(cell.record.saliency_iou),
                fmt_f64(cell.record.centroid_offset),
                cell.record.blank_output.to_string(),
            ]);
        }
    }
    write_csv(
        &dir.join("altmaps.csv"),
        &["pair", "source_image", "method", "standardized", "iou", "centroid_offset", "blank"],
        &rows,
    )?;
    let mut summary = String::new();
    for (tag, ious) in &by_method {
        summary.push_str(&format!("{tag}: median IoU {}\n", fmt_f64(median(ious)?)));
    }
    std::fs::write(dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_evaluate<E: Scalar + ArchiveElement>(dir: &Path) -> Result<()> {
    let records: Vec<GenerationRecord<E>> = load_records(dir)?;
    let (osn_recs, base_recs): (Vec<_>, Vec<_>) = records
        .into_iter()
        .partition(|r| r.noise.method != NoiseMethod::GaussianBaseline);
    if base_recs.is_empty() {
        return Err(Error::contract(
            "no gaussian-baseline records to compare against".to_string(),
        ));
    }
    let report = evaluate_localization(&osn_recs, &base_recs)?;
    write_eval_report(dir, &report)?;
    println!(
        "evaluate: {} pairs, saliency median IoU {}, baseline {}, p = {}",
        osn_recs.len(),
        fmt_f64(report.osn.median_iou),
        fmt_f64(report.baseline.median_iou),
        fmt_f64(report.test.p_value)
    );
    Ok(())
}
