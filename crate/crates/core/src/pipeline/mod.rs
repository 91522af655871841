//! Everything between the math and the shell: the shapes dataset, output
//! masks and localization metrics, study orchestration, statistics and
//! reports, checkpoint archives, PGM image I/O, and the run configuration.

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod pgm;
pub mod report;
pub mod studies;

pub use archive::{load_archive, save_archive, NamedTensor, TensorData};
pub use checkpoint::{load_classifier, load_denoiser, save_classifier, save_denoiser};
pub use config::RunConfig;
pub use dataset::{make_shapes_dataset, DatasetSpec, Sample};
pub use metrics::{centroid_offset, object_mask_of_output, OutputMask};
pub use pgm::{decode_pgm, encode_pgm};
pub use report::{iqr, median, sign_test_greater, SignTest};
pub use studies::{
    evaluate_localization, generate_conditioned, run_altmaps_study, run_manipulation_study,
    run_step_study, sample_accuracy, EvalReport, GenerationRecord, Manipulation,
};
