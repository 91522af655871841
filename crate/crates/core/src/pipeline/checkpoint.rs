//! Model checkpoints on top of the archive format: architecture numbers
//! ride along as an f64 metadata vector, parameters as dtype-tagged
//! tensors in flattening order, so a load rebuilds the exact network or
//! refuses loudly (wrong kind, wrong precision, wrong shapes).

use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{Classifier, ClassifierArch, ConvSpec, Denoiser, DenoiserArch, LossModel};
use crate::pipeline::archive::{
    load_archive, save_archive, take_tensor, ArchiveElement, NamedTensor,
};
use crate::tensor::Tensor;

const CLASSIFIER_META: &str = "meta/classifier_arch";
const DENOISER_META: &str = "meta/denoiser_arch";

fn param_name(i: usize) -> String {
    format!("param/{i:03}")
}

fn meta_tensor(name: &str, values: Vec<f64>) -> NamedTensor {
    let n = values.len();
    NamedTensor::f64(name, Tensor::from_vec(vec![n], values).expect("length matches"))
}

fn param_tensors<E: ArchiveElement>(params: &[Tensor<E>]) -> Vec<NamedTensor> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| NamedTensor { name: param_name(i), data: E::wrap(p.clone()) })
        .collect()
}

fn load_params<E: ArchiveElement>(
    tensors: &[NamedTensor],
    count: usize,
) -> Result<Vec<Tensor<E>>> {
    (0..count).map(|i| take_tensor(tensors, &param_name(i))).collect()
}

fn meta_usize(v: &[f64], i: usize, what: &str) -> Result<usize> {
    let raw = *v
        .get(i)
        .ok_or_else(|| Error::ArchiveManifest(format!("architecture vector missing {what}")))?;
    if raw.fract() != 0.0 || raw < 0.0 {
        return Err(Error::ArchiveManifest(format!("architecture field {what} = {raw}")));
    }
    Ok(raw as usize)
}

pub fn save_classifier<E: ArchiveElement>(clf: &Classifier<E>, path: &Path) -> Result<()> {
    let a = clf.arch();
    let mut meta = vec![
        a.in_channels as f64,
        a.height as f64,
        a.width as f64,
        a.classes as f64,
        a.convs.len() as f64,
    ];
    for c in &a.convs {
        meta.push(c.out_channels as f64);
        meta.push(c.kernel as f64);
    }
    let mut tensors = vec![meta_tensor(CLASSIFIER_META, meta)];
    tensors.extend(param_tensors(clf.params()));
    save_archive(&tensors, path)
}

pub fn load_classifier<E: ArchiveElement>(path: &Path) -> Result<Classifier<E>> {
    let tensors = load_archive(path)?;
    let meta: Tensor<f64> = take_tensor(&tensors, CLASSIFIER_META)?;
    let v = meta.to_f64_vec();
    let n_convs = meta_usize(&v, 4, "conv count")?;
    let mut convs = Vec::with_capacity(n_convs);
    for i in 0..n_convs {
        convs.push(ConvSpec {
            out_channels: meta_usize(&v, 5 + 2 * i, "conv channels")?,
            kernel: meta_usize(&v, 6 + 2 * i, "conv kernel")?,
        });
    }
    let arch = ClassifierArch {
        in_channels: meta_usize(&v, 0, "input channels")?,
        height: meta_usize(&v, 1, "height")?,
        width: meta_usize(&v, 2, "width")?,
        classes: meta_usize(&v, 3, "classes")?,
        convs,
    };
    let params = load_params(&tensors, arch.param_shapes().len())?;
    Classifier::from_parts(arch, params)
}

pub fn save_denoiser<E: ArchiveElement>(den: &Denoiser<E>, path: &Path) -> Result<()> {
    let a = den.arch();
    let meta = vec![
        a.in_channels as f64,
        a.hidden_channels as f64,
        a.layers as f64,
        a.kernel as f64,
        a.embed_dim as f64,
        a.classes as f64,
        a.t_max as f64,
    ];
    let mut tensors = vec![meta_tensor(DENOISER_META, meta)];
    tensors.extend(param_tensors(den.params()));
    save_archive(&tensors, path)
}

pub fn load_denoiser<E: ArchiveElement>(path: &Path) -> Result<Denoiser<E>> {
    let tensors = load_archive(path)?;
    let meta: Tensor<f64> = take_tensor(&tensors, DENOISER_META)?;
    let v = meta.to_f64_vec();
    let arch = DenoiserArch {
        in_channels: meta_usize(&v, 0, "input channels")?,
        hidden_channels: meta_usize(&v, 1, "hidden channels")?,
        layers: meta_usize(&v, 2, "layers")?,
        kernel: meta_usize(&v, 3, "kernel")?,
        embed_dim: meta_usize(&v, 4, "embedding dim")?,
        classes: meta_usize(&v, 5, "classes")?,
        t_max: meta_usize(&v, 6, "t_max")?,
    };
    let params = load_params(&tensors, arch.param_shapes().len())?;
    Denoiser::from_parts(arch, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_classifier, build_denoiser};

    fn small_classifier() -> Classifier<f64> {
        let arch = ClassifierArch {
            in_channels: 1,
            height: 8,
            width: 8,
            classes: 2,
            convs: vec![ConvSpec { out_channels: 3, kernel: 3 }],
        };
        build_classifier(&arch, 5).unwrap()
    }

    #[test]
    fn classifier_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.osnar");
        let clf = small_classifier();
        save_classifier(&clf, &path).unwrap();
        let back: Classifier<f64> = load_classifier(&path).unwrap();
        assert_eq!(back.arch().convs.len(), 1);
        assert_eq!(back.arch().height, 8);
        for (a, b) in clf.params().iter().zip(back.params()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn denoiser_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("den.osnar");
        let arch = DenoiserArch {
            in_channels: 1,
            hidden_channels: 4,
            layers: 2,
            kernel: 3,
            embed_dim: 6,
            classes: 2,
            t_max: 10,
        };
        let den = build_denoiser::<f32>(&arch, 6).unwrap();
        save_denoiser(&den, &path).unwrap();
        let back: Denoiser<f32> = load_denoiser(&path).unwrap();
        assert_eq!(back.arch().t_max, 10);
        for (a, b) in den.params().iter().zip(back.params()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn wrong_kind_and_wrong_precision_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.osnar");
        save_classifier(&small_classifier(), &path).unwrap();
        assert!(load_denoiser::<f64>(&path).is_err());
        match load_classifier::<f32>(&path) {
            Err(Error::Contract(msg)) => assert!(msg.contains("f32"), "{msg}"),
            other => panic!("expected precision refusal, got {other:?}"),
        }
    }
}
