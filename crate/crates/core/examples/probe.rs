//! Scratch probe: inspect conditional sample quality directly. Trains the
//! candidate config once, caches checkpoints in /tmp, then renders samples
//! and measures how strongly the predicted noise depends on the class id.

use std::path::Path;

use osn::diffusion::{sample_loop, train_denoiser, SampleOptions};
use osn::nets::{train_classifier, Classifier, Denoiser};
use osn::pipeline::checkpoint::{load_classifier, load_denoiser, save_classifier, save_denoiser};
use osn::pipeline::dataset::{labelled_images, make_shapes_dataset};
use osn::pipeline::RunConfig;
use osn::rng::{rng_from, sub_seed};
use osn::Tensor;

fn cfg_d() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.min_object = 5;
    cfg.denoiser_epochs = 120;
    cfg
}

fn ascii(img: &Tensor<f64>) -> String {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = String::new();
    for r in 0..h {
        for c in 0..w {
            let v = img.data()[r * w + c];
            out.push(match v {
                v if v < 0.15 => ' ',
                v if v < 0.35 => '.',
                v if v < 0.60 => '+',
                v if v < 0.85 => '#',
                _ => '@',
            });
        }
        out.push('\n');
    }
    out
}

fn main() -> osn::Result<()> {
    let cfg = cfg_d();
    let dir = Path::new("/tmp/osn_probe");
    std::fs::create_dir_all(dir).unwrap();
    let spath = dir.join("scorer.osnar");
    let dpath = dir.join("den.osnar");

    let (scorer, den): (Classifier<f64>, Denoiser<f64>) = if spath.exists() && dpath.exists() {
        println!("loading cached checkpoints");
        (load_classifier(&spath)?, load_denoiser(&dpath)?)
    } else {
        let ds = make_shapes_dataset::<f64>(&cfg.dataset_spec())?;
        let data = labelled_images(&ds);
        let (scorer, sfit) = train_classifier(
            &data,
            &cfg.classifier_arch(),
            &cfg.classifier_train(sub_seed(7, 91)),
        )?;
        println!("scorer holdout {:?}", sfit.holdout_accuracy);
        let sched = cfg.noise_schedule()?;
        let (den, fit) = train_denoiser(
            &data,
            &cfg.denoiser_arch(),
            &sched,
            &cfg.denoiser_train(sub_seed(7, 2)),
        )?;
        println!("denoiser mse {:?}", fit.epoch_mse.last());
        save_classifier(&scorer, &spath)?;
        save_denoiser(&den, &dpath)?;
        (scorer, den)
    };
    let sched = cfg.noise_schedule()?;

    // 1. how much does the predicted noise depend on the class id?
    let mut rng = rng_from(999);
    for t in [200usize, 150, 100, 50, 10] {
        let x = osn::rng::normal_tensor::<f64>(&[1, 24, 24], &mut rng);
        let e0 = den.predict(&x, t, 0)?;
        let e1 = den.predict(&x, t, 1)?;
        let n0: f64 = e0.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = e0
            .data()
            .iter()
            .zip(e1.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        println!("t={t:3}  |eps0|={n0:.3}  |eps0-eps1|={diff:.3}  rel={:.3}", diff / n0);
    }

    // 2. render three samples per class with scorer probabilities
    for class in 0..2usize {
        for i in 0..3usize {
            let s = sub_seed(7, 0x5a000 + (class * 20 + i) as u64);
            let traj = sample_loop(&den, &sched, class, None, &[1, 24, 24], s, &SampleOptions::default())?;
            let x0 = traj.x0();
            let (pred, probs) = scorer.predict(x0)?;
            let lo = x0.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x0.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!(
                "\n== class {class} sample {i}: scorer pred {pred} probs {:.3}/{:.3} range {lo:.2}..{hi:.2}",
                probs[0], probs[1]
            );
            println!("{}", ascii(x0));
        }
    }
    Ok(())
}
