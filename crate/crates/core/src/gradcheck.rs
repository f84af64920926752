//! Central finite-difference verification of every analytic gradient:
//! the loss library plus both network forwards, on tiny, enumerable
//! architectures. Shared by the test suite and the `gradcheck` CLI command.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{
    grad_gen_total, grad_kd_kl_student, grad_student_ce, loss_gen_total, loss_kd_kl,
    loss_student_ce, softmax, GenLossWeights,
};
use crate::models::{Classifier, ClassifierArch, Generator, GeneratorArch, ModelWeights};
use crate::optim::Optimizer;
use crate::rng::stream;

/// Relative-error gate the whole suite is judged against.
pub const DEFAULT_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
/// Architectures in the suite stay at or below this many parameters.
pub const MAX_SUITE_PARAMS: usize = 500;

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    /// What was differentiated, e.g. "student_ce/dlogits".
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub num_configs: usize,
    pub tol: f64,
    pub checks: Vec<CheckOutcome>,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        StandardNormal.sample(rng)
    })
}

/// Max relative error between an analytic gradient array and central
/// differences of `f` over every coordinate of `x`.
fn fd_all(
    x: &mut Array2<f64>,
    analytic: &Array2<f64>,
    mut f: impl FnMut(&Array2<f64>) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let shape = (x.nrows(), x.ncols());
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            let orig = x[(i, j)];
            x[(i, j)] = orig + FD_STEP;
            let up = f(x);
            x[(i, j)] = orig - FD_STEP;
            let dn = f(x);
            x[(i, j)] = orig;
            let fd = (up - dn) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, analytic[(i, j)]));
        }
    }
    worst
}

/// FD over the loss library: student CE, KD-KL (student side), and the
/// combined generator objective in both its logit and feature arguments.
fn check_losses(rng: &mut impl Rng, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let b = rng.random_range(2..6usize);
    let c = rng.random_range(3..7usize);
    let fdim = rng.random_range(4..9usize);

    // Cross-entropy wrt student logits.
    let mut logits = randn(b, c, rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let analytic = grad_student_ce(&logits, &labels)?;
    let err = fd_all(&mut logits, &analytic, |l| {
        loss_student_ce(l, &labels).unwrap()
    });
    out.push(CheckOutcome { name: "student_ce/dlogits".into(), max_rel_err: err });

    // KL(teacher || student) wrt student logits; teacher fixed.
    let teacher = randn(b, c, rng);
    let mut student = randn(b, c, rng);
    let analytic = grad_kd_kl_student(&teacher, &student);
    let err = fd_all(&mut student, &analytic, |s| loss_kd_kl(&teacher, s));
    out.push(CheckOutcome { name: "kd_kl/dstudent".into(), max_rel_err: err });

    // Generator objective wrt teacher logits and features. The loss API
    // takes probabilities; the gradient API takes raw logits.
    let gw = GenLossWeights {
        lambda1: rng.random_range(0.2..2.0),
        lambda2: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.2..2.0) },
    };
    let mut tl = randn(b, c, rng);
    let mut tf = randn(b, fdim, rng);
    let (dlogits, dfeat, _) = grad_gen_total(&tl, &tf, &gw);
    let tf_fixed = tf.clone();
    let err = fd_all(&mut tl, &dlogits, |l| {
        loss_gen_total(&softmax(l), &tf_fixed, &gw).total
    });
    out.push(CheckOutcome { name: "gen_total/dlogits".into(), max_rel_err: err });
    let tl_fixed = tl.clone();
    let err = fd_all(&mut tf, &dfeat, |f| {
        loss_gen_total(&softmax(&tl_fixed), f, &gw).total
    });
    out.push(CheckOutcome { name: "gen_total/dfeatures".into(), max_rel_err: err });
    Ok(())
}

/// Recover the analytic parameter gradient as `w - sgd_step(w)` with unit
/// learning rate, then compare against central differences of the scalar
/// probe `phi(w) = sum(R .* logits(w))` over every parameter coordinate.
fn check_classifier_params(
    arch: &ClassifierArch,
    seed: u64,
    rng: &mut impl Rng,
    out: &mut Vec<CheckOutcome>,
) -> Result<()> {
    let w0 = crate::models::init_classifier(arch.clone(), seed)?;
    if w0.num_params() > MAX_SUITE_PARAMS {
        return Err(Error::config(format!(
            "suite arch {} has {} params (> {MAX_SUITE_PARAMS})",
            arch.arch_id(),
            w0.num_params()
        )));
    }
    let b = rng.random_range(2..5usize);
    let x = Array2::from_shape_fn((b, arch.input_dim()), |_| rng.random::<f64>());
    let r = randn(b, arch.num_classes(), rng);

    let mut clf = Classifier::from_weights(arch.clone(), &w0)?;
    let (_logits, _feats) = clf.forward(&x, true);
    let dx = clf.backward(&r, None);
    let mut opt = Optimizer::sgd(1.0, 0.0);
    opt.step(&mut clf);
    let stepped = clf.weights();

    let mut worst = 0.0f64;
    let phi = |w: &ModelWeights| -> Result<f64> {
        let mut c = Classifier::from_weights(arch.clone(), w)?;
        let (l, _) = c.forward(&x, false);
        Ok((&l * &r).sum())
    };
    for (name, arr) in w0.entries.iter() {
        let n = arr.len();
        // Every coordinate for small tensors, a strided sample for larger.
        let step = (n / 25).max(1);
        for flat in (0..n).step_by(step) {
            let mut wp = w0.clone();
            {
                let a = wp.entries.get_mut(name).unwrap();
                a.as_slice_mut().unwrap()[flat] += FD_STEP;
            }
            let up = phi(&wp)?;
            {
                let a = wp.entries.get_mut(name).unwrap();
                a.as_slice_mut().unwrap()[flat] -= 2.0 * FD_STEP;
            }
            let dn = phi(&wp)?;
            let fd = (up - dn) / (2.0 * FD_STEP);
            let analytic = w0.entries[name].as_slice().unwrap()[flat]
                - stepped.entries[name].as_slice().unwrap()[flat];
            worst = worst.max(rel_err(fd, analytic));
        }
    }
    out.push(CheckOutcome {
        name: format!("classifier_params/{}", arch.arch_id()),
        max_rel_err: worst,
    });

    // Input gradient from the same backward pass.
    let mut xm = x.clone();
    let err = fd_all(&mut xm, &dx, |xx| {
        let mut c = Classifier::from_weights(arch.clone(), &w0).unwrap();
        let (l, _) = c.forward(xx, false);
        (&l * &r).sum()
    });
    out.push(CheckOutcome {
        name: format!("classifier_input/{}", arch.arch_id()),
        max_rel_err: err,
    });
    Ok(())
}

/// Same scalar-probe scheme for the generator: phi(theta) = sum(R .* G(z)).
fn check_generator_params(
    arch: &GeneratorArch,
    seed: u64,
    rng: &mut impl Rng,
    out: &mut Vec<CheckOutcome>,
) -> Result<()> {
    let w0 = crate::models::init_generator(arch.clone(), seed)?;
    if w0.num_params() > MAX_SUITE_PARAMS {
        return Err(Error::config(format!(
            "suite arch {} has {} params (> {MAX_SUITE_PARAMS})",
            arch.arch_id(),
            w0.num_params()
        )));
    }
    let b = rng.random_range(2..5usize);
    let z = randn(b, arch.noise_dim(), rng);
    let r = randn(b, arch.output_dim(), rng);

    let mut gen = Generator::from_weights(arch.clone(), &w0)?;
    let _x = gen.forward(&z, true)?;
    gen.backward(&r);
    let mut opt = Optimizer::sgd(1.0, 0.0);
    opt.step(&mut gen);
    let stepped = gen.weights();

    let mut worst = 0.0f64;
    for (name, arr) in w0.entries.iter() {
        let n = arr.len();
        let step = (n / 25).max(1);
        for flat in (0..n).step_by(step) {
            let mut wp = w0.clone();
            {
                let a = wp.entries.get_mut(name).unwrap();
                a.as_slice_mut().unwrap()[flat] += FD_STEP;
            }
            let mut g = Generator::from_weights(arch.clone(), &wp)?;
            let up = (&g.forward(&z, false)? * &r).sum();
            {
                let a = wp.entries.get_mut(name).unwrap();
                a.as_slice_mut().unwrap()[flat] -= 2.0 * FD_STEP;
            }
            let mut g = Generator::from_weights(arch.clone(), &wp)?;
            let dn = (&g.forward(&z, false)? * &r).sum();
            let fd = (up - dn) / (2.0 * FD_STEP);
            let analytic = w0.entries[name].as_slice().unwrap()[flat]
                - stepped.entries[name].as_slice().unwrap()[flat];
            worst = worst.max(rel_err(fd, analytic));
        }
    }
    out.push(CheckOutcome {
        name: format!("generator_params/{}", arch.arch_id()),
        max_rel_err: worst,
    });
    Ok(())
}

/// Run the full battery over `num_configs` random configurations.
pub fn run_suite(num_configs: usize, seed: u64, tol: f64) -> Result<SuiteReport> {
    if num_configs == 0 {
        return Err(Error::config("gradcheck needs at least one configuration"));
    }
    let mut checks = Vec::new();
    for cfg in 0..num_configs {
        let mut rng = stream(seed, "gradcheck", &[cfg as u64]);
        check_losses(&mut rng, &mut checks)?;

        let c_arch = ClassifierArch::TinyMlp {
            input_dim: rng.random_range(4..9usize),
            hidden: rng.random_range(3..7usize),
            num_classes: rng.random_range(3..6usize),
        };
        check_classifier_params(&c_arch, seed ^ (cfg as u64), &mut rng, &mut checks)?;

        let g_arch = GeneratorArch::TinyGen {
            output_dim: rng.random_range(4..9usize),
            noise_dim: rng.random_range(3..7usize),
            hidden: rng.random_range(3..7usize),
        };
        check_generator_params(&g_arch, seed ^ (cfg as u64), &mut rng, &mut checks)?;
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(SuiteReport {
        num_configs,
        tol,
        checks,
        max_rel_err,
        passed: max_rel_err < tol,
    })
}
