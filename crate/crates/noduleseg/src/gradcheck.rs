//! Central finite-difference checking of every differentiable operation
//! and composite block, in 64-bit mode.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{self, JointModelConfig};
use crate::tensor::{fill_uniform, Activation, Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Relative error with a unit floor so near-zero gradients are compared
/// absolutely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Check the analytic gradients of `build` (a scalar-loss graph over the
/// given leaf inputs) against central finite differences. Returns the
/// maximum relative error over all input elements.
pub fn finite_diff_check<F>(inputs: &[Tensor<f64>], build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(inputs, build, None)
}

/// As [`finite_diff_check`], with an optional corruption applied to the
/// analytic gradients before comparison (negative control for the suite).
pub fn finite_diff_check_with<F>(
    inputs: &[Tensor<f64>],
    build: F,
    corrupt: Option<&dyn Fn(&mut [Tensor<f64>])>,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_core(inputs, build, corrupt, None)
}

/// As [`finite_diff_check`], but compares only `budget` coordinates drawn
/// without replacement from the concatenation of all input tensors. The
/// analytic gradient is still computed in full; only the finite-difference
/// side is sampled, which keeps composite-block checks affordable.
pub fn finite_diff_check_sampled<F>(
    inputs: &[Tensor<f64>],
    build: F,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    use rand::seq::SliceRandom;
    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |j| (ti, j)))
        .collect();
    coords.shuffle(rng);
    coords.truncate(budget);
    finite_diff_core(inputs, build, None, Some(coords))
}

fn finite_diff_core<F>(
    inputs: &[Tensor<f64>],
    build: F,
    corrupt: Option<&dyn Fn(&mut [Tensor<f64>])>,
    coords: Option<Vec<(usize, usize)>>,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();
    if let Some(f) = corrupt {
        f(&mut analytic);
    }
    let analytic = analytic;

    let coords: Vec<(usize, usize)> = coords.unwrap_or_else(|| {
        analytic
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.numel()).map(move |j| (ti, j)))
            .collect()
    });

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for &(ti, j) in &coords {
        let orig = work[ti].data()[j];
        let mut central = |h: f64| -> Result<f64> {
            work[ti].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let mut err = rel_err(analytic[ti].data()[j], central(FD_STEP)?);
        // A step straddling a max-op tie (pooling argmax, channel max)
        // gives an O(1) error that vanishes once the step is smaller than
        // the distance to the tie, while a wrong analytic gradient fails
        // at every step size. Refine before declaring failure.
        for &h in &[FD_STEP / 8.0, FD_STEP / 64.0] {
            if err < REL_TOL {
                break;
            }
            err = err.min(rel_err(analytic[ti].data()[j], central(h)?));
        }
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    fill_uniform(&mut t, rng, -1.0, 1.0);
    t
}

/// Random tensor whose values are pairwise separated by much more than
/// the finite-difference step, so max-based ops cannot change their
/// argmax under perturbation: a shuffled equally-spaced grid on [-1, 1].
fn rand_tensor_distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let mut t = Tensor::zeros(shape);
    let n = t.numel();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    for (v, &r) in t.data_mut().iter_mut().zip(&ranks) {
        *v = -1.0 + 2.0 * (r as f64 + 0.5) / n as f64;
    }
    t
}

/// Random spatial extent in 2..=4 (even, so pooling stays valid).
fn rand_even(rng: &mut ChaCha8Rng) -> usize {
    2 * rng.gen_range(1..=2)
}

fn report(name: &str, trials: usize, max_rel_err: f64) -> OpReport {
    OpReport { name: name.to_string(), trials, max_rel_err, pass: max_rel_err < REL_TOL }
}

/// Random-weighted sum of all output elements, making a scalar loss that
/// exercises every output gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.leaf(weights.clone(), false);
    let prod = g.mul_elem(out, w)?;
    Ok(g.sum(prod))
}

macro_rules! op_trials {
    ($name:expr, $trials:expr, $rng:expr, $body:expr) => {{
        let mut max_err = 0.0f64;
        for _ in 0..$trials {
            let e: Result<f64> = $body($rng);
            max_err = max_err.max(e?);
        }
        report($name, $trials, max_err)
    }};
}

/// Gradient checks for every primitive operation.
pub fn check_ops(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut reports = Vec::new();

    reports.push(op_trials!("conv3d", trials, r, |r: &mut ChaCha8Rng| {
        let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (d, h, w) = (r.gen_range(2..=4), r.gen_range(2..=4), r.gen_range(2..=4));
        let x = rand_tensor(r, &[1, ci, d, h, w]);
        let wt = rand_tensor(r, &[co, ci, 3, 3, 3]);
        let b = rand_tensor(r, &[co]);
        let lw = rand_tensor(r, &[1, co, d, h, w]);
        finite_diff_check(&[x, wt, b], |g, vars| {
            let out = g.conv3d(vars[0], vars[1], vars[2], 1, 1)?;
            weighted_sum(g, out, &lw)
        })
    }));

    reports.push(op_trials!("upsample_nearest_2x", trials, r, |r: &mut ChaCha8Rng| {
        let (c, d, h, w) = (r.gen_range(1..=3), r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2));
        let x = rand_tensor(r, &[1, c, d, h, w]);
        let lw = rand_tensor(r, &[1, c, 2 * d, 2 * h, 2 * w]);
        finite_diff_check(&[x], |g, vars| {
            let out = g.upsample_nearest_2x(vars[0])?;
            weighted_sum(g, out, &lw)
        })
    }));

    reports.push(op_trials!("maxpool3d_2x", trials, r, |r: &mut ChaCha8Rng| {
        let (c, d, h, w) = (r.gen_range(1..=2), rand_even(r), rand_even(r), rand_even(r));
        let x = rand_tensor_distinct(r, &[1, c, d, h, w]);
        let lw = rand_tensor(r, &[1, c, d / 2, h / 2, w / 2]);
        finite_diff_check(&[x], |g, vars| {
            let out = g.maxpool3d_2x(vars[0])?;
            weighted_sum(g, out, &lw)
        })
    }));

    reports.push(op_trials!("global_avg_pool", trials, r, |r: &mut ChaCha8Rng| {
        let (c, d, h, w) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        let x = rand_tensor(r, &[2, c, d, h, w]);
        let lw = rand_tensor(r, &[2, c]);
        finite_diff_check(&[x], |g, vars| {
            let out = g.global_avg_pool(vars[0])?;
            weighted_sum(g, out, &lw)
        })
    }));

    for (name, act) in [("elu", Activation::Elu), ("relu", Activation::Relu), ("sigmoid", Activation::Sigmoid)] {
        reports.push(op_trials!(name, trials, r, |r: &mut ChaCha8Rng| {
            let n = r.gen_range(2..=4);
            // keep values away from the ReLU/ELU kink at 0, where finite
            // differences straddle the non-smooth point
            let mut x = rand_tensor(r, &[n, n]);
            for v in x.data_mut() {
                if v.abs() < 0.05 {
                    *v = 0.1 * v.signum() + *v;
                }
            }
            let lw = rand_tensor(r, &[n, n]);
            finite_diff_check(&[x], |g, vars| {
                let out = g.activation(vars[0], act, 1.0);
                weighted_sum(g, out, &lw)
            })
        }));
    }

    reports.push(op_trials!("softmax", trials, r, |r: &mut ChaCha8Rng| {
        let (n, k) = (r.gen_range(1..=3), r.gen_range(2..=4));
        let x = rand_tensor(r, &[n, k]);
        let lw = rand_tensor(r, &[n, k]);
        finite_diff_check(&[x], |g, vars| {
            let out = g.softmax(vars[0])?;
            weighted_sum(g, out, &lw)
        })
    }));

    reports.push(op_trials!("group_norm", trials, r, |r: &mut ChaCha8Rng| {
        let groups = r.gen_range(1..=2);
        let c = groups * r.gen_range(1..=2);
        let (d, h, w) = (r.gen_range(2..=4), r.gen_range(2..=4), r.gen_range(2..=4));
        let x = rand_tensor(r, &[2, c, d, h, w]);
        let gamma = rand_tensor(r, &[c]);
        let beta = rand_tensor(r, &[c]);
        let lw = rand_tensor(r, &[2, c, d, h, w]);
        finite_diff_check(&[x, gamma, beta], |g, vars| {
            let out = g.group_norm(vars[0], vars[1], vars[2], groups, 1e-5)?;
            weighted_sum(g, out, &lw)
        })
    }));

    reports.push(op_trials!("linear", trials, r, |r: &mut ChaCha8Rng| {
        let (n, f, o) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4));
        let x = rand_tensor(r, &[n, f]);
        let w = rand_tensor(r, &[f, o]);
        let b = rand_tensor(r, &[o]);
        let lw = rand_tensor(r, &[n, o]);
        finite_diff_check(&[x, w, b], |g, vars| {
            let out = g.linear(vars[0], vars[1], vars[2])?;
            weighted_sum(g, out, &lw)
        })
    }));

    reports.push(op_trials!("dropout", trials, r, |r: &mut ChaCha8Rng| {
        let n = r.gen_range(2..=4);
        let x = rand_tensor(r, &[n, n]);
        let lw = rand_tensor(r, &[n, n]);
        let seed = r.gen::<u64>();
        finite_diff_check(&[x], |g, vars| {
            let out = g.dropout(vars[0], 0.4, true, seed)?;
            weighted_sum(g, out, &lw)
        })
    }));

    reports.push(op_trials!("concat_channels", trials, r, |r: &mut ChaCha8Rng| {
        let (ca, cb) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (d, h, w) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3));
        let a = rand_tensor(r, &[1, ca, d, h, w]);
        let b = rand_tensor(r, &[1, cb, d, h, w]);
        let lw = rand_tensor(r, &[1, ca + cb, d, h, w]);
        finite_diff_check(&[a, b], |g, vars| {
            let out = g.concat_channels(vars[0], vars[1])?;
            weighted_sum(g, out, &lw)
        })
    }));

    reports.push(op_trials!("add", trials, r, |r: &mut ChaCha8Rng| {
        let n = r.gen_range(2..=4);
        let a = rand_tensor(r, &[n, n]);
        let b = rand_tensor(r, &[n, n]);
        let lw = rand_tensor(r, &[n, n]);
        finite_diff_check(&[a, b], |g, vars| {
            let out = g.add(vars[0], vars[1])?;
            weighted_sum(g, out, &lw)
        })
    }));

    reports.push(op_trials!("soft_dice_loss", trials, r, |r: &mut ChaCha8Rng| {
        let (n, d) = (r.gen_range(1..=2), r.gen_range(2..=4));
        let mut pred = rand_tensor(r, &[n, 1, d, d, d]);
        for v in pred.data_mut() {
            *v = 0.05 + 0.9 * (*v + 1.0) / 2.0; // probabilities in (0, 1)
        }
        let mut target = Tensor::zeros(&[n, 1, d, d, d]);
        for v in target.data_mut() {
            *v = if r.gen::<bool>() { 1.0 } else { 0.0 };
        }
        finite_diff_check(&[pred], |g, vars| g.soft_dice_loss(vars[0], &target, 1e-6))
    }));

    reports.push(op_trials!("weighted_cross_entropy", trials, r, |r: &mut ChaCha8Rng| {
        let (n, k) = (r.gen_range(2..=4), 3usize);
        let x = rand_tensor(r, &[n, k]);
        let labels: Vec<Option<usize>> = (0..n).map(|_| Some(r.gen_range(0..k))).collect();
        let weights: Vec<f64> = (0..k).map(|_| r.gen_range(0.5..2.0)).collect();
        finite_diff_check(&[x], |g, vars| {
            let probs = g.softmax(vars[0])?;
            g.weighted_cross_entropy(probs, &labels, &weights)
        })
    }));

    Ok(reports)
}

/// Gradient checks for composite blocks and the full joint model.
pub fn check_blocks(trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut reports = Vec::new();

    let tiny = JointModelConfig {
        base_features: 4,
        groups: 2,
        stages: 2,
        dropout_rate: 0.5,
        texture_classes: 3,
        ..Default::default()
    };

    reports.push(op_trials!("residual_block", trials, r, |r: &mut ChaCha8Rng| {
        let params = nn::init_parameters::<f64>(&tiny, r.gen(), false)?;
        let params = params_with_prefix(&params, "enc0.");
        let x = rand_tensor(r, &[1, 4, 4, 4, 4]);
        let lw = rand_tensor(r, &[1, 4, 4, 4, 4]);
        check_params_and_input(&params, &x, None, |g, bindings, xv| {
            let out = nn::residual_block(g, bindings, "enc0", xv, &tiny)?;
            Ok((out, lw.clone()))
        })
    }));

    let cbam_cfg = JointModelConfig { use_cbam: true, ..tiny };
    reports.push(op_trials!("cbam3d", trials, r, |r: &mut ChaCha8Rng| {
        let params = nn::init_parameters::<f64>(&cbam_cfg, r.gen(), false)?;
        let params = params_with_prefix(&params, "enc0.cbam.");
        let x = rand_tensor_distinct(r, &[1, 4, 4, 4, 4]);
        let lw = rand_tensor(r, &[1, 4, 4, 4, 4]);
        check_params_and_input(&params, &x, None, |g, bindings, xv| {
            let out = nn::cbam3d(g, bindings, "enc0.cbam", xv)?;
            Ok((out, lw.clone()))
        })
    }));

    reports.push(op_trials!("segmentation_head", trials, r, |r: &mut ChaCha8Rng| {
        let params = nn::init_parameters::<f64>(&tiny, r.gen(), false)?;
        let params = params_with_prefix(&params, "seg");
        let x = rand_tensor(r, &[1, 4, 4, 4, 4]);
        let lw = rand_tensor(r, &[1, 1, 4, 4, 4]);
        check_params_and_input(&params, &x, None, |g, bindings, xv| {
            let out = nn::segmentation_head(g, bindings, xv)?;
            Ok((out, lw.clone()))
        })
    }));

    reports.push(op_trials!("classification_head", trials, r, |r: &mut ChaCha8Rng| {
        let params = nn::init_parameters::<f64>(&tiny, r.gen(), false)?;
        let params = params_with_prefix(&params, "cls.");
        let x = rand_tensor(r, &[1, 8, 2, 2, 2]);
        let lw = rand_tensor(r, &[1, 3]);
        check_params_and_input(&params, &x, None, |g, bindings, xv| {
            let out = nn::classification_head(g, bindings, &tiny, xv, false, 0)?;
            Ok((out, lw.clone()))
        })
    }));

    // Full joint model: a full sweep would perturb every parameter twice
    // per coordinate, so sample a fixed coordinate budget per trial. Over
    // 20 trials that still covers thousands of distinct coordinates.
    reports.push(op_trials!("joint_model", trials, r, |r: &mut ChaCha8Rng| {
        let params = nn::init_parameters::<f64>(&tiny, r.gen(), false)?;
        let x = rand_tensor(r, &[1, 1, 8, 8, 8]);
        let target = {
            let mut t = Tensor::zeros(&[1, 1, 8, 8, 8]);
            for v in t.data_mut() {
                *v = if r.gen::<bool>() { 1.0 } else { 0.0 };
            }
            t
        };
        let labels = vec![Some(r.gen_range(0..3))];
        let mut coord_rng = ChaCha8Rng::seed_from_u64(r.gen());
        check_params_and_input(&params, &x, Some((400, &mut coord_rng)), |g, bindings, xv| {
            let (mask, class) = nn::joint_forward(g, bindings, &tiny, xv, false, 0)?;
            let dice = g.soft_dice_loss(mask, &target, 1e-6)?;
            let ce = g.weighted_cross_entropy(class, &labels, &[1.0, 1.0, 1.0])?;
            let loss = g.affine_combine(&[(0.5, dice), (0.1, ce)])?;
            Ok((loss, Tensor::scalar(1.0)))
        })
    }));

    Ok(reports)
}

/// Finite-difference check over all named parameters plus the input
/// tensor. `build` returns the output node and the loss weighting. With
/// `budget` set, only that many randomly sampled coordinates get the
/// finite-difference comparison.
fn check_params_and_input<F>(
    params: &nn::Parameters<f64>,
    input: &Tensor<f64>,
    budget: Option<(usize, &mut ChaCha8Rng)>,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Var>, Var) -> Result<(Var, Tensor<f64>)>,
{
    let names: Vec<String> = params.keys().cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = names.iter().map(|n| params[n].clone()).collect();
    inputs.push(input.clone());
    let graph_build = |g: &mut Graph<f64>, vars: &[Var]| {
        let bindings: BTreeMap<String, Var> =
            names.iter().cloned().zip(vars[..names.len()].iter().copied()).collect();
        let (out, lw) = build(g, &bindings, vars[names.len()])?;
        if g.value(out).is_scalar() {
            return Ok(out);
        }
        weighted_sum(g, out, &lw)
    };
    match budget {
        Some((n, rng)) => finite_diff_check_sampled(&inputs, graph_build, n, rng),
        None => finite_diff_check(&inputs, graph_build),
    }
}

/// Parameters whose names start with `prefix`, so single-block checks do
/// not pay for perturbing the rest of the model.
fn params_with_prefix(params: &nn::Parameters<f64>, prefix: &str) -> nn::Parameters<f64> {
    params
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Negative control: re-run one conv3d trial with a deliberately
/// corrupted weight gradient. The resulting report must fail.
pub fn negative_control(seed: u64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let x = rand_tensor(r, &[1, 2, 4, 4, 4]);
    let wt = rand_tensor(r, &[2, 2, 3, 3, 3]);
    let b = rand_tensor(r, &[2]);
    let lw = rand_tensor(r, &[1, 2, 4, 4, 4]);
    let err = finite_diff_check_with(
        &[x, wt, b],
        |g, vars| {
            let out = g.conv3d(vars[0], vars[1], vars[2], 1, 1)?;
            weighted_sum(g, out, &lw)
        },
        Some(&|grads: &mut [Tensor<f64>]| {
            for v in grads[1].data_mut() {
                *v = *v * 1.5 + 0.01;
            }
        }),
    )?;
    Ok(OpReport {
        name: "conv3d (corrupted backward, must fail)".into(),
        trials: 1,
        max_rel_err: err,
        pass: err < REL_TOL,
    })
}

/// Run the requested scope of the suite, returning all reports.
pub fn run_suite(scope: &str, trials: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    if scope == "ops" || scope == "all" {
        reports.extend(check_ops(trials, seed)?);
    }
    if scope == "blocks" || scope == "model" || scope == "all" {
        reports.extend(check_blocks(trials, seed + 1)?);
    }
    Ok(reports)
}
