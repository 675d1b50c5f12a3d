//! Central finite-difference gradient checks for every differentiable op
//! and the fused loss ops.
//!
//! The oracle side only ever calls the forward path: a scalar objective is
//! re-evaluated at `x ± h` per coordinate and compared against the tape
//! gradient. Checks run on the default 64-bit build; tolerances are
//! meaningless at 32-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::{
    cosine_embedding_loss, softmax_cross_entropy, ClassMap, InstanceLabelMap, NeighborhoodSpec,
};
use crate::tape::{PadMode, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: Real,
    pub tolerance: Real,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<40} max rel err {:10.3e} (tol {:.0e})\n",
                if c.passed { "[pass]" } else { "[FAIL]" },
                c.name,
                c.max_rel_err,
                c.tolerance
            ));
        }
        out
    }
}

/// Relative error with an absolute floor so zero-gradient coordinates do
/// not blow up the ratio.
fn rel_err(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Checks `d objective / d leaf[i]` for every tracked leaf against central
/// finite differences. `build` receives the tape and the leaf vars (in the
/// order of `leaves`) and must return a scalar var.
pub fn check_gradients(
    name: &str,
    leaves: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    h: Real,
    tolerance: Real,
) -> CheckResult {
    let eval = |tensors: &[Tensor]| -> (Real, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = build(&mut tape, &vars);
        let value = tape.value(root).item();
        tape.backward(root);
        let grads = vars.iter().map(|&v| tape.grad(v).unwrap_or_else(|| {
            Tensor::zeros(tape.value(v).shape())
        })).collect();
        (value, grads)
    };

    let (_, analytic) = eval(leaves);

    let mut max_err: Real = 0.0;
    let mut perturbed: Vec<Tensor> = leaves.to_vec();
    for (ti, leaf) in leaves.iter().enumerate() {
        for i in 0..leaf.len() {
            let orig = leaf.data()[i];
            perturbed[ti].data_mut()[i] = orig + h;
            let (fp, _) = forward_only(&perturbed, &build);
            perturbed[ti].data_mut()[i] = orig - h;
            let (fm, _) = forward_only(&perturbed, &build);
            perturbed[ti].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic[ti].data()[i], fd);
            if err > max_err {
                max_err = err;
            }
        }
    }
    CheckResult {
        name: name.to_string(),
        max_rel_err: max_err,
        tolerance,
        passed: max_err <= tolerance,
    }
}

fn forward_only(tensors: &[Tensor], build: &impl Fn(&mut Tape, &[Var]) -> Var) -> (Real, ()) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let root = build(&mut tape, &vars);
    (tape.value(root).item(), ())
}

/// Projects a tensor-valued op to a scalar with fixed random weights so
/// every output element influences the objective differently.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

const H: Real = 1e-4;
const TOL: Real = 1e-4;

/// Runs the finite-difference suite over every op with several random
/// instances each. `instances` is the number of random repetitions.
pub fn run_suite(seed: u64, instances: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();

    for inst in 0..instances {
        // conv2d, both paddings, random odd kernel sizes
        for pad in [PadMode::Zero, PadMode::Mirror] {
            let (cin, cout) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let (h_, w_) = (rng.gen_range(4..7), rng.gen_range(4..7));
            let x = rand_tensor(&[1, cin, h_, w_], &mut rng);
            let w = rand_tensor(&[cout, cin, 3, 3], &mut rng);
            let b = rand_tensor(&[cout], &mut rng);
            let proj = rand_tensor(&[1, cout, h_, w_], &mut rng);
            report.checks.push(check_gradients(
                &format!("conv2d/{pad:?}/{inst}"),
                &[x, w, b],
                |tape, vars| {
                    let out = tape.conv2d(vars[0], vars[1], Some(vars[2]), pad);
                    project(tape, out, &proj)
                },
                H,
                TOL,
            ));
        }

        // max_pool2d: nudge inputs away from window ties so the finite
        // difference does not cross an argmax switch.
        {
            let mut x = rand_tensor(&[1, 2, 4, 4], &mut rng);
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                *v += ((i % 7) as Real) * 0.11;
            }
            let proj = rand_tensor(&[1, 2, 2, 2], &mut rng);
            report.checks.push(check_gradients(
                &format!("max_pool2d/{inst}"),
                &[x],
                |tape, vars| {
                    let out = tape.max_pool2d(vars[0]);
                    project(tape, out, &proj)
                },
                H,
                TOL,
            ));
        }

        // upsample2x
        {
            let x = rand_tensor(&[1, 2, 3, 3], &mut rng);
            let proj = rand_tensor(&[1, 2, 6, 6], &mut rng);
            report.checks.push(check_gradients(
                &format!("upsample2x/{inst}"),
                &[x],
                |tape, vars| {
                    let out = tape.upsample2x(vars[0]);
                    project(tape, out, &proj)
                },
                H,
                TOL,
            ));
        }

        // pointwise: relu (inputs pushed away from the kink), sigmoid, tanh
        {
            let mut x = rand_tensor(&[1, 1, 3, 5], &mut rng);
            for v in x.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1;
                }
            }
            let proj = rand_tensor(&[1, 1, 3, 5], &mut rng);
            report.checks.push(check_gradients(
                &format!("relu/{inst}"),
                &[x.clone()],
                |tape, vars| {
                    let out = tape.relu(vars[0]);
                    project(tape, out, &proj)
                },
                H,
                TOL,
            ));
            report.checks.push(check_gradients(
                &format!("sigmoid/{inst}"),
                &[x.clone()],
                |tape, vars| {
                    let out = tape.sigmoid(vars[0]);
                    project(tape, out, &proj)
                },
                H,
                TOL,
            ));
            report.checks.push(check_gradients(
                &format!("tanh/{inst}"),
                &[x],
                |tape, vars| {
                    let out = tape.tanh(vars[0]);
                    project(tape, out, &proj)
                },
                H,
                TOL,
            ));
        }

        // elementwise add/sub/mul and affine
        {
            let a = rand_tensor(&[1, 2, 2, 3], &mut rng);
            let b = rand_tensor(&[1, 2, 2, 3], &mut rng);
            let proj = rand_tensor(&[1, 2, 2, 3], &mut rng);
            report.checks.push(check_gradients(
                &format!("add_sub_mul_affine/{inst}"),
                &[a, b],
                |tape, vars| {
                    let s = tape.add(vars[0], vars[1]);
                    let d = tape.sub(s, vars[1]);
                    let m = tape.mul(d, vars[1]);
                    let af = tape.affine(m, 0.7, -0.2);
                    project(tape, af, &proj)
                },
                H,
                TOL,
            ));
        }

        // concat + slice
        {
            let a = rand_tensor(&[1, 2, 2, 2], &mut rng);
            let b = rand_tensor(&[1, 1, 2, 2], &mut rng);
            let proj = rand_tensor(&[1, 2, 2, 2], &mut rng);
            report.checks.push(check_gradients(
                &format!("concat_slice/{inst}"),
                &[a, b],
                |tape, vars| {
                    let cat = tape.concat_channels(vars[0], vars[1]);
                    let sl = tape.slice_channels(cat, 1, 2);
                    project(tape, sl, &proj)
                },
                H,
                TOL,
            ));
        }

        // mean reduction
        {
            let x = rand_tensor(&[1, 1, 4, 4], &mut rng);
            report.checks.push(check_gradients(
                &format!("mean/{inst}"),
                &[x],
                |tape, vars| tape.mean(vars[0]),
                H,
                TOL,
            ));
        }

        // full cosine embedding loss on a random instance layout
        {
            let (d, h_, w_) = (3, 6, 6);
            let emb = rand_tensor(&[1, d, h_, w_], &mut rng);
            let labels: Vec<u32> = (0..h_ * w_)
                .map(|p| {
                    let (y, x) = (p / w_, p % w_);
                    if y < 3 && x < 3 {
                        1
                    } else if y >= 3 && x >= 3 {
                        2
                    } else {
                        0
                    }
                })
                .collect();
            let map = InstanceLabelMap::new(h_, w_, labels);
            let spec = NeighborhoodSpec::new(2.5, 32);
            report.checks.push(check_gradients(
                &format!("cosine_embedding_loss/{inst}"),
                &[emb],
                |tape, vars| {
                    cosine_embedding_loss::<ChaCha8Rng>(tape, vars[0], &[map.clone()], &spec, None)
                },
                H,
                TOL,
            ));
        }

        // softmax cross-entropy with a masked stripe
        {
            let (k, h_, w_) = (3, 4, 4);
            let logits = rand_tensor(&[1, k, h_, w_], &mut rng);
            let classes: Vec<u32> = (0..h_ * w_).map(|_| rng.gen_range(0..k as u32)).collect();
            let mut valid = vec![true; h_ * w_];
            valid[0] = false;
            valid[5] = false;
            let map = ClassMap { height: h_, width: w_, classes, valid };
            report.checks.push(check_gradients(
                &format!("softmax_cross_entropy/{inst}"),
                &[logits],
                |tape, vars| softmax_cross_entropy(tape, vars[0], &[map.clone()]),
                H,
                TOL,
            ));
        }
    }

    report
}
