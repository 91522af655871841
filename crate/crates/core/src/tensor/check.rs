//! Randomized gradient verification: every public op kind against the
//! central-difference oracle. Used by unit tests and re-run by the
//! acceptance suite with its pinned trial count.

use crate::error::Result;
use crate::rng::{rng_from, uniform_usize};
use crate::scalar::Scalar;
use crate::tensor::finite_diff::{finite_diff_gradient, max_rel_err};
use crate::tensor::record::{ConvMode, OpSpec, Record};
use crate::tensor::Tensor;

use rand::Rng;

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub trials: usize,
    pub cases: usize,
    pub max_rel_err: f64,
}

/// Scalar head: sum(op_output * probe) with a fixed random probe, so the
/// check exercises the full output cotangent rather than just ones.
fn scalar_head<E: Scalar>(
    op: &OpSpec,
    inputs: &[Tensor<E>],
    probe: &Tensor<E>,
    wrt: usize,
    at: &Tensor<E>,
) -> Result<E> {
    let mut rec = Record::<E>::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| if i == wrt { rec.leaf(at) } else { rec.leaf(t) })
        .collect();
    let out = rec.apply(op, &ids)?;
    let out_flat = rec.reshape(out, vec![rec.shape_of(out).iter().product()])?;
    let probe_id = rec.leaf(probe);
    let s = rec.dot(out_flat, probe_id)?;
    rec.scalar_value_of(s)
}

fn rand_tensor<E: Scalar>(shape: &[usize], rng: &mut crate::rng::SeededRng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    // kept away from relu/abs kinks: magnitudes in [0.15, 1.15]
    let data: Vec<E> = (0..n)
        .map(|_| {
            let mag: f64 = rng.random_range(0.15..1.15);
            let sgn = if rng.random_range(0..2u32) == 0 { -1.0 } else { 1.0 };
            E::from_f64(mag * sgn)
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Runs `trials` randomized first-order checks of every op kind against the
/// finite-difference oracle (f64, h = 1e-4), shapes up to 6x6, and returns
/// the worst relative error seen.
pub fn first_order_sweep(trials: usize, seed: u64) -> Result<SweepOutcome> {
    let mut rng = rng_from(seed);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    let h = 1e-4;

    for _ in 0..trials {
        let m = uniform_usize(&mut rng, 2, 6);
        let n = uniform_usize(&mut rng, 2, 6);
        let k = uniform_usize(&mut rng, 2, 6);

        // (op, inputs); one case per differentiable input is checked below
        let mut cases_this_trial: Vec<(OpSpec, Vec<Tensor<f64>>)> = Vec::new();

        let a = rand_tensor::<f64>(&[m, n], &mut rng);
        let b = rand_tensor::<f64>(&[m, n], &mut rng);
        cases_this_trial.push((OpSpec::Add, vec![a.clone(), b.clone()]));
        cases_this_trial.push((OpSpec::Sub, vec![a.clone(), b.clone()]));
        cases_this_trial.push((OpSpec::Mul, vec![a.clone(), b.clone()]));
        cases_this_trial.push((OpSpec::Scale(rng.random_range(-2.0..2.0)), vec![a.clone()]));
        cases_this_trial.push((OpSpec::Relu, vec![a.clone()]));
        cases_this_trial.push((OpSpec::Sum, vec![a.clone()]));
        cases_this_trial.push((OpSpec::Mean, vec![a.clone()]));
        cases_this_trial.push((OpSpec::Reshape(vec![n, m]), vec![a.clone()]));
        cases_this_trial.push((OpSpec::Pad(vec![(1, 0), (0, 2)]), vec![a.clone()]));

        let am = rand_tensor::<f64>(&[m, k], &mut rng);
        let bm = rand_tensor::<f64>(&[k, n], &mut rng);
        cases_this_trial.push((OpSpec::Matmul, vec![am, bm]));

        let v1 = rand_tensor::<f64>(&[k], &mut rng);
        let v2 = rand_tensor::<f64>(&[k], &mut rng);
        cases_this_trial.push((OpSpec::L2Norm, vec![v1.clone()]));
        cases_this_trial.push((OpSpec::Dot, vec![v1.clone(), v2]));
        cases_this_trial.push((
            OpSpec::SoftmaxCrossEntropy {
                label: uniform_usize(&mut rng, 0, k - 1),
            },
            vec![v1.clone()],
        ));

        let ci = uniform_usize(&mut rng, 1, 2);
        let co = uniform_usize(&mut rng, 1, 2);
        let hs = uniform_usize(&mut rng, 3, 6);
        let ws = uniform_usize(&mut rng, 3, 6);
        let x = rand_tensor::<f64>(&[ci, hs, ws], &mut rng);
        let kr = rand_tensor::<f64>(&[co, ci, 3, 3], &mut rng);
        cases_this_trial.push((OpSpec::Conv2d(ConvMode::Valid), vec![x.clone(), kr.clone()]));
        cases_this_trial.push((OpSpec::Conv2d(ConvMode::Same), vec![x, kr]));

        let table = rand_tensor::<f64>(&[3, k], &mut rng);
        cases_this_trial.push((
            OpSpec::EmbedLookup {
                row: uniform_usize(&mut rng, 0, 2),
            },
            vec![table],
        ));

        for (op, inputs) in cases_this_trial {
            // probe sized to the op output
            let out = crate::tensor::record::eval(
                &op,
                &inputs.iter().collect::<Vec<_>>(),
            )?;
            let probe = rand_tensor::<f64>(&[out.numel()], &mut rng);

            for wrt in 0..inputs.len() {
                let analytic = {
                    let mut rec = Record::<f64>::new();
                    let ids: Vec<_> = inputs.iter().map(|t| rec.leaf(t)).collect();
                    let o = rec.apply(&op, &ids)?;
                    let flat = rec.reshape(o, vec![rec.shape_of(o).iter().product()])?;
                    let p = rec.leaf(&probe);
                    let s = rec.dot(flat, p)?;
                    rec.gradient(s, &[ids[wrt]])?.pop().unwrap()
                };
                let oracle = finite_diff_gradient(
                    &mut |xt| scalar_head(&op, &inputs, &probe, wrt, xt),
                    &inputs[wrt],
                    h,
                )?;
                let err = max_rel_err(&analytic, &oracle);
                if err > worst {
                    worst = err;
                }
                cases += 1;
            }
        }
    }

    Ok(SweepOutcome {
        trials,
        cases,
        max_rel_err: worst,
    })
}
