//! Python bindings. Images cross the boundary as `(shape, values)` tuples
//! of plain lists; everything computes in f64. The surface mirrors the
//! pipeline: config -> dataset -> train -> invert -> standardize -> sample.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use osn::diffusion::{sample_loop, train_denoiser, NoiseSchedule, SampleOptions, SnapshotPolicy};
use osn::nets::{train_classifier, LossModel};
use osn::noise::{invert_gradients, standardize as standardize_tensor, InvertConfig};
use osn::pipeline::checkpoint::{load_classifier, load_denoiser, save_classifier, save_denoiser};
use osn::pipeline::dataset::{labelled_images, make_shapes_dataset, Sample};
use osn::pipeline::studies::generate_conditioned;
use osn::pipeline::RunConfig;
use osn::scalar::Scalar;
use osn::Tensor;

type PyImage = (Vec<usize>, Vec<f64>);

fn err(e: osn::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_tensor(img: &PyImage) -> PyResult<Tensor<f64>> {
    Tensor::from_f64s(&img.0, &img.1).map_err(err)
}

fn from_tensor(t: &Tensor<f64>) -> PyImage {
    (t.shape().to_vec(), t.data().iter().map(|v| v.as_f64()).collect())
}

/// Flat `key = value` run configuration with the desk-scale defaults.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Config { inner: RunConfig::parse_str(text).map_err(err)? })
    }

    /// Override one key, same syntax as a config-file line.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.apply(key, value).map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn invert_steps(&self) -> usize {
        self.inner.invert_steps
    }

    #[getter]
    fn targets(&self) -> Vec<usize> {
        self.inner.targets.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(image_size={}, t_max={}, invert_steps={}, seed={})",
            self.inner.image_size, self.inner.t_max, self.inner.invert_steps, self.inner.seed
        )
    }
}

/// The rendered shapes dataset for a config: images, labels, centroids.
#[pyclass]
struct Dataset {
    samples: Vec<Sample<f64>>,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(cfg: &Config) -> PyResult<Self> {
        let samples = make_shapes_dataset::<f64>(&cfg.inner.dataset_spec()).map_err(err)?;
        Ok(Dataset { samples })
    }

    fn __len__(&self) -> usize {
        self.samples.len()
    }

    fn image(&self, i: usize) -> PyResult<PyImage> {
        self.get(i).map(|s| from_tensor(&s.image))
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        self.get(i).map(|s| s.label)
    }

    fn id(&self, i: usize) -> PyResult<String> {
        self.get(i).map(|s| s.id.clone())
    }

    fn centroid(&self, i: usize) -> PyResult<(f64, f64)> {
        self.get(i).map(|s| s.centroid)
    }
}

impl Dataset {
    fn get(&self, i: usize) -> PyResult<&Sample<f64>> {
        self.samples
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("sample index {i} out of range")))
    }
}

/// Conv classifier; the gradient source for noise inversion.
#[pyclass]
struct Classifier {
    inner: osn::nets::Classifier<f64>,
}

#[pymethods]
impl Classifier {
    /// Train on the config's dataset. Deterministic in (config, seed).
    #[staticmethod]
    fn train(cfg: &Config, seed: u64) -> PyResult<Self> {
        let ds = make_shapes_dataset::<f64>(&cfg.inner.dataset_spec()).map_err(err)?;
        let data = labelled_images(&ds);
        let (clf, _) =
            train_classifier(&data, &cfg.inner.classifier_arch(), &cfg.inner.classifier_train(seed))
                .map_err(err)?;
        Ok(Classifier { inner: clf })
    }

    fn predict(&self, image: PyImage) -> PyResult<(usize, Vec<f64>)> {
        self.inner.predict(&to_tensor(&image)?).map_err(err)
    }

    /// Flat parameter gradient of the training loss at (image, label).
    fn param_gradient(&self, image: PyImage, label: usize) -> PyResult<Vec<f64>> {
        let g = self.inner.param_gradient(&to_tensor(&image)?, label).map_err(err)?;
        Ok(g.data().iter().map(|v| v.as_f64()).collect())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_classifier(&self.inner, std::path::Path::new(path)).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Classifier { inner: load_classifier(std::path::Path::new(path)).map_err(err)? })
    }
}

/// Class-conditional denoiser bundled with its schedule and image shape.
#[pyclass]
struct Denoiser {
    inner: osn::nets::Denoiser<f64>,
    sched: NoiseSchedule,
    shape: Vec<usize>,
}

#[pymethods]
impl Denoiser {
    /// Train on the config's dataset. Deterministic in (config, seed).
    #[staticmethod]
    fn train(cfg: &Config, seed: u64) -> PyResult<Self> {
        let ds = make_shapes_dataset::<f64>(&cfg.inner.dataset_spec()).map_err(err)?;
        let data = labelled_images(&ds);
        let sched = cfg.inner.noise_schedule().map_err(err)?;
        let (den, _) = train_denoiser(
            &data,
            &cfg.inner.denoiser_arch(),
            &sched,
            &cfg.inner.denoiser_train(seed),
        )
        .map_err(err)?;
        let n = cfg.inner.image_size;
        Ok(Denoiser { inner: den, sched, shape: vec![1, n, n] })
    }

    /// Reverse process from `x_start` (or a seeded Gaussian when omitted)
    /// down to the final image.
    #[pyo3(signature = (target, seed, x_start = None))]
    fn sample(&self, target: usize, seed: u64, x_start: Option<PyImage>) -> PyResult<PyImage> {
        let start = x_start.as_ref().map(to_tensor).transpose()?;
        let traj = sample_loop(
            &self.inner,
            &self.sched,
            target,
            start.as_ref(),
            &self.shape,
            seed,
            &SampleOptions::default(),
        )
        .map_err(err)?;
        Ok(from_tensor(traj.x0()))
    }

    fn t_max(&self) -> usize {
        self.sched.t_max()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_denoiser(&self.inner, std::path::Path::new(path)).map_err(err)
    }

    /// Load a checkpoint; schedule and image shape come from the config.
    #[staticmethod]
    fn load(path: &str, cfg: &Config) -> PyResult<Self> {
        let inner = load_denoiser(std::path::Path::new(path)).map_err(err)?;
        let sched = cfg.inner.noise_schedule().map_err(err)?;
        let n = cfg.inner.image_size;
        Ok(Denoiser { inner, sched, shape: vec![1, n, n] })
    }
}

/// One generated output with its localization metrics.
#[pyclass]
struct Record {
    #[pyo3(get)]
    target: usize,
    #[pyo3(get)]
    iou: f64,
    #[pyo3(get)]
    centroid_offset: f64,
    #[pyo3(get)]
    blank: bool,
    #[pyo3(get)]
    noise: PyImage,
    #[pyo3(get)]
    output: PyImage,
}

#[pymethods]
impl Record {
    fn __repr__(&self) -> String {
        format!(
            "Record(target={}, iou={:.3}, blank={})",
            self.target, self.iou, self.blank
        )
    }
}

/// Gradient inversion: iterates an image toward the parameter gradient of
/// (image, label). Returns the raw final iterate and the objective curve
/// as (step, cosine distance) pairs.
#[pyfunction]
#[pyo3(signature = (clf, image, label, steps, seed, learning_rate = 0.1))]
fn invert(
    clf: &Classifier,
    image: PyImage,
    label: usize,
    steps: usize,
    seed: u64,
    learning_rate: f64,
) -> PyResult<(PyImage, Vec<(usize, f64)>)> {
    let x_star = to_tensor(&image)?;
    let g_star = clf.inner.param_gradient(&x_star, label).map_err(err)?;
    let cfg = InvertConfig { steps, learning_rate, seed, ..InvertConfig::default() };
    let out = invert_gradients(&clf.inner, &g_star, label, &cfg).map_err(err)?;
    Ok((from_tensor(out.final_iterate()), out.objectives.clone()))
}

/// Zero mean, unit variance; returns (standardized, mu, sigma).
#[pyfunction]
fn standardize(image: PyImage) -> PyResult<(PyImage, f64, f64)> {
    let (t, mu, sigma) = standardize_tensor(&to_tensor(&image)?).map_err(err)?;
    Ok((from_tensor(&t), mu, sigma))
}

/// The full recipe on one image: invert its gradient, standardize, then
/// sample once per target class reusing the identical noise.
#[pyfunction]
#[pyo3(signature = (clf, den, image, label, targets, steps, seed, percentile = 80.0))]
#[allow(clippy::too_many_arguments)]
fn generate(
    clf: &Classifier,
    den: &Denoiser,
    image: PyImage,
    label: usize,
    targets: Vec<usize>,
    steps: usize,
    seed: u64,
    percentile: f64,
) -> PyResult<Vec<Record>> {
    let x_star = to_tensor(&image)?;
    let base = InvertConfig { steps, seed: osn::rng::sub_seed(seed, 1), ..InvertConfig::default() };
    let records = generate_conditioned(
        &clf.inner,
        &den.inner,
        &den.sched,
        &x_star,
        "python",
        label,
        steps,
        &targets,
        &base,
        percentile,
        SnapshotPolicy::Endpoints,
        osn::rng::sub_seed(seed, 2),
    )
    .map_err(err)?;
    Ok(records
        .into_iter()
        .map(|r| Record {
            target: r.target_class,
            iou: r.saliency_iou,
            centroid_offset: r.centroid_offset,
            blank: r.blank_output,
            noise: from_tensor(&r.noise.values),
            output: from_tensor(r.trajectory.x0()),
        })
        .collect())
}

#[pymodule]
fn osn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Classifier>()?;
    m.add_class::<Denoiser>()?;
    m.add_class::<Record>()?;
    m.add_function(wrap_pyfunction!(invert, m)?)?;
    m.add_function(wrap_pyfunction!(standardize, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
