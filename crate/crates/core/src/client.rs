//! Client-side local training.
//!
//! Implements the knowledge-fusion client update: each optimization step
//! first trains the on-client generator against the frozen teacher (one
//! adaptive step on the generator loss), then takes one SGD step on the
//! student that combines local cross-entropy with KL distillation from the
//! teacher on the freshly generated pseudo-batch. With the generator
//! disabled and `gamma = 0` the update reduces exactly to plain mini-batch
//! SGD on the local data (the FedAvg client).
//!
//! Determinism contract: everything a client does is a pure function of
//! `(weights in, data shard, hyperparams, seed)`. Batch order comes from the
//! `"data"` stream of the client seed, noise from per-step `"noise"` streams,
//! and the generator is freshly re-initialized from the `"gen"` stream on
//! every call — no generator state survives across rounds.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    grad_gen_total, grad_kd_kl_student, grad_student_ce, loss_kd_kl, loss_student_ce,
    FusionWeights, GenLossParts, GenLossWeights,
};
use crate::models::{Classifier, ClassifierArch, Generator, GeneratorArch, ModelWeights};
use crate::optim::Optimizer;
use crate::rng::{derive_seed, stream, stream_tag};

/// Hyperparameters of one client's local optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientHyperparams {
    /// Local epochs E.
    pub epochs: usize,
    /// Mini-batch size B.
    pub batch_size: usize,
    /// Student learning rate (plain SGD).
    pub eta: f64,
    /// Generator learning rate (adaptive step).
    pub beta: f64,
    pub gen_weights: GenLossWeights,
    pub fusion: FusionWeights,
}

impl ClientHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta must be a positive finite number"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta must be a positive finite number"));
        }
        for (name, v) in [
            ("lambda1", self.gen_weights.lambda1),
            ("lambda2", self.gen_weights.lambda2),
            ("gamma", self.fusion.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// One optimization step's losses. `gen_loss` is present only when the
/// generator is enabled for this client.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceStep {
    pub gen_loss: Option<f64>,
    pub student_loss: f64,
}

/// Outcome of one client's local round.
#[derive(Debug, Clone)]
pub struct ClientUpdateResult {
    /// Trained student weights (the upload).
    pub weights: ModelWeights,
    /// One entry per optimization step: E * ceil(n_train / B) entries.
    pub trace: Vec<TraceStep>,
    /// Number of local training samples (the aggregation weight n_k).
    pub n_train: usize,
}

impl ClientUpdateResult {
    pub fn mean_student_loss(&self) -> f64 {
        if self.trace.is_empty() {
            return 0.0;
        }
        self.trace.iter().map(|s| s.student_loss).sum::<f64>() / self.trace.len() as f64
    }

    pub fn mean_gen_loss(&self) -> Option<f64> {
        let vals: Vec<f64> = self.trace.iter().filter_map(|s| s.gen_loss).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// One gradient step on the generator against a frozen teacher.
///
/// Forwards `z` through the generator, scores the pseudo-batch with the
/// teacher, backpropagates the generator loss (information entropy +
/// pseudo-label CE + activation) through the teacher *as input gradients
/// only*, and applies `opt` to the generator. Teacher weights are never
/// stepped; any parameter gradients accumulated on it are cleared before
/// returning.
pub fn generator_step(
    gen: &mut Generator,
    teacher: &mut Classifier,
    z: &Array2<f64>,
    gw: &GenLossWeights,
    opt: &mut Optimizer,
) -> Result<GenLossParts> {
    let x = gen.forward(z, true)?;
    let (t_logits, t_feats) = teacher.forward(&x, true);
    let (dlogits, dfeats, parts) = grad_gen_total(&t_logits, &t_feats, gw);
    if !parts.total.is_finite() {
        return Err(Error::data(format!(
            "generator loss diverged (ie={}, ce={}, act={})",
            parts.ie, parts.ce, parts.act
        )));
    }
    let dx = teacher.backward(&dlogits, Some(&dfeats));
    teacher.zero_grads();
    gen.backward(&dx);
    opt.step(gen);
    gen.zero_grads();
    Ok(parts)
}

/// One gradient step on the student.
///
/// The loss is CE on the local batch plus, when `pseudo` is given,
/// `gamma` * KL(teacher || student) on the pseudo-batch
/// (`pseudo = (x_pseudo, teacher_logits)`, both held fixed). Returns the
/// total loss value before the step.
pub fn student_step(
    student: &mut Classifier,
    x: &Array2<f64>,
    y: &[usize],
    pseudo: Option<(&Array2<f64>, &Array2<f64>)>,
    gamma: f64,
    opt: &mut Optimizer,
) -> Result<f64> {
    let (logits, _) = student.forward(x, true);
    let ce = loss_student_ce(&logits, y)?;
    let d_ce = grad_student_ce(&logits, y)?;
    student.backward(&d_ce, None);

    let mut total = ce;
    if let Some((x_pseudo, t_logits)) = pseudo {
        if gamma > 0.0 {
            let (s_logits, _) = student.forward(x_pseudo, true);
            let kl = loss_kd_kl(t_logits, &s_logits);
            let d_kl = grad_kd_kl_student(t_logits, &s_logits).mapv(|g| gamma * g);
            student.backward(&d_kl, None);
            total += gamma * kl;
        }
    }
    if !total.is_finite() {
        return Err(Error::data(format!("student loss diverged ({total})")));
    }
    opt.step(student);
    student.zero_grads();
    Ok(total)
}

/// Draw an (n, noise_dim) matrix of i.i.d. standard-normal noise vectors.
pub fn sample_noise(n: usize, noise_dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, noise_dim), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Run one client's full local round.
///
/// * `teacher_w` — the broadcast global/teacher model (never modified).
/// * `student_w` — the broadcast student initialization.
/// * `gen_arch` — `Some` enables the data-free distillation path; the
///   generator is re-initialized from the client seed on every call.
/// * `train_idx` — this client's training indices into `data`.
/// * `seed` — the per-(round, client) seed; all local randomness derives
///   from it via named streams.
///
/// The local data is shuffled once and split into `B`-sized batches (the
/// final short batch is kept). Each epoch walks the same batch sequence;
/// per batch the client takes one generator step (when enabled) and one
/// student step, reusing the step's noise batch for distillation.
#[allow(clippy::too_many_arguments)]
pub fn client_update(
    k: usize,
    arch: &ClassifierArch,
    teacher_w: &ModelWeights,
    student_w: &ModelWeights,
    gen_arch: Option<&GeneratorArch>,
    data: &Dataset,
    train_idx: &[usize],
    hp: &ClientHyperparams,
    seed: u64,
) -> Result<ClientUpdateResult> {
    hp.validate()?;
    if train_idx.is_empty() {
        return Err(Error::data(format!("client {k} has no training samples")));
    }
    if hp.fusion.gamma > 0.0 && gen_arch.is_none() {
        return Err(Error::config(
            "knowledge fusion (gamma > 0) requires a generator architecture",
        ));
    }

    let mut student = Classifier::from_weights(arch.clone(), student_w)?;
    let mut student_opt = Optimizer::sgd(hp.eta, 0.0);

    // Distillation state: fresh generator per call, teacher rebuilt from the
    // broadcast weights (and never stepped).
    let mut distill = match gen_arch {
        Some(ga) => {
            let gen_seed = derive_seed(seed, &[stream_tag("gen")]);
            let gen = Generator::init(ga.clone(), gen_seed)?;
            let teacher = Classifier::from_weights(arch.clone(), teacher_w)?;
            let gen_opt = Optimizer::adam_gan(hp.beta);
            Some((gen, teacher, gen_opt))
        }
        None => None,
    };

    // c3: shuffle once, then fixed B-sized batches reused across epochs.
    let mut order: Vec<usize> = train_idx.to_vec();
    {
        let mut rng = stream(seed, "data", &[]);
        // Fisher-Yates via rand's slice shuffle.
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
    }
    let batches: Vec<&[usize]> = order.chunks(hp.batch_size).collect();

    let mut trace = Vec::with_capacity(hp.epochs * batches.len());
    for e in 0..hp.epochs {
        for (bi, batch) in batches.iter().enumerate() {
            let (x, y) = data.batch(batch);
            let mut gen_loss = None;
            let mut pseudo: Option<(Array2<f64>, Array2<f64>)> = None;

            if let Some((gen, teacher, gen_opt)) = distill.as_mut() {
                // c4: one noise vector per local sample in the batch.
                let mut zrng = stream(seed, "noise", &[e as u64, bi as u64]);
                let z = sample_noise(batch.len(), gen.arch.noise_dim(), &mut zrng);
                // c5: generator step against the frozen teacher.
                let parts = generator_step(gen, teacher, &z, &hp.gen_weights, gen_opt)
                    .map_err(|err| Error::data(format!("client {k}: {err}")))?;
                gen_loss = Some(parts.total);
                // c6 inputs: pseudo-batch from the *updated* generator on the
                // same noise, scored by the frozen teacher.
                if hp.fusion.gamma > 0.0 {
                    let x_pseudo = gen.forward(&z, false)?;
                    let (t_logits, _) = teacher.forward(&x_pseudo, false);
                    pseudo = Some((x_pseudo, t_logits));
                }
            }

            let pseudo_ref = pseudo.as_ref().map(|(a, b)| (a, b));
            let ls = student_step(
                &mut student,
                &x,
                &y,
                pseudo_ref,
                hp.fusion.gamma,
                &mut student_opt,
            )
            .map_err(|err| Error::data(format!("client {k}: {err}")))?;
            trace.push(TraceStep {
                gen_loss,
                student_loss: ls,
            });
        }
    }

    let weights = student.weights();
    if !weights.all_finite() {
        return Err(Error::data(format!(
            "client {k}: non-finite weights after local training"
        )));
    }
    Ok(ClientUpdateResult {
        weights,
        trace,
        n_train: train_idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::models::ImageShape;

    fn tiny_arch() -> ClassifierArch {
        ClassifierArch::TinyMlp {
            input_dim: 16,
            hidden: 8,
            num_classes: 4,
        }
    }

    fn tiny_gen() -> GeneratorArch {
        GeneratorArch::TinyGen {
            output_dim: 16,
            noise_dim: 6,
            hidden: 10,
        }
    }

    fn hp(gamma: f64) -> ClientHyperparams {
        ClientHyperparams {
            epochs: 2,
            batch_size: 4,
            eta: 0.05,
            beta: 0.001,
            gen_weights: GenLossWeights {
                lambda1: 1.0,
                lambda2: 0.3,
            },
            fusion: FusionWeights { gamma },
        }
    }

    fn blob_data() -> Dataset {
        synthetic_blobs(40, 16, 4, 2.0, 99)
    }

    #[test]
    fn trace_length_is_epochs_times_ceil_batches() {
        let data = blob_data();
        let idx: Vec<usize> = (0..10).collect(); // ceil(10/4) = 3 batches
        let arch = tiny_arch();
        let w = crate::models::init_classifier(arch.clone(), 7).unwrap();
        let res = client_update(
            0,
            &arch,
            &w,
            &w,
            Some(&tiny_gen()),
            &data,
            &idx,
            &hp(1.0),
            42,
        )
        .unwrap();
        assert_eq!(res.trace.len(), 2 * 3);
        assert_eq!(res.n_train, 10);
        assert!(res.trace.iter().all(|s| s.gen_loss.is_some()));
        assert!(res.weights.all_finite());
    }

    #[test]
    fn zero_epochs_returns_student_unchanged() {
        let data = blob_data();
        let idx: Vec<usize> = (0..8).collect();
        let arch = tiny_arch();
        let w = crate::models::init_classifier(arch.clone(), 7).unwrap();
        let mut h = hp(0.0);
        h.epochs = 0;
        let res = client_update(0, &arch, &w, &w, None, &data, &idx, &h, 42).unwrap();
        assert!(res.trace.is_empty());
        assert_eq!(res.weights.max_abs_diff(&w).unwrap(), 0.0);
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let data = blob_data();
        let idx: Vec<usize> = (0..12).collect();
        let arch = tiny_arch();
        let teacher = crate::models::init_classifier(arch.clone(), 1).unwrap();
        let student = crate::models::init_classifier(arch.clone(), 2).unwrap();
        let h = hp(0.5);
        let a = client_update(
            3,
            &arch,
            &teacher,
            &student,
            Some(&tiny_gen()),
            &data,
            &idx,
            &h,
            11,
        )
        .unwrap();
        let b = client_update(
            3,
            &arch,
            &teacher,
            &student,
            Some(&tiny_gen()),
            &data,
            &idx,
            &h,
            11,
        )
        .unwrap();
        assert_eq!(a.weights.max_abs_diff(&b.weights).unwrap(), 0.0);
        assert_eq!(a.trace.len(), b.trace.len());
        for (sa, sb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(sa.student_loss, sb.student_loss);
            assert_eq!(sa.gen_loss, sb.gen_loss);
        }
    }

    #[test]
    fn gamma_zero_no_generator_is_plain_sgd() {
        // Hand-rolled mini-batch SGD must match client_update exactly when
        // the distillation path is disabled.
        let data = blob_data();
        let idx: Vec<usize> = (0..10).collect();
        let arch = tiny_arch();
        let w0 = crate::models::init_classifier(arch.clone(), 5).unwrap();
        let h = hp(0.0);
        let res = client_update(0, &arch, &w0, &w0, None, &data, &idx, &h, 77).unwrap();

        // Reference loop: same shuffle stream, same batching, plain SGD.
        let mut clf = Classifier::from_weights(arch.clone(), &w0).unwrap();
        let mut order = idx.clone();
        {
            use rand::seq::SliceRandom;
            let mut rng = stream(77, "data", &[]);
            order.shuffle(&mut rng);
        }
        for _ in 0..h.epochs {
            for batch in order.chunks(h.batch_size) {
                let (x, y) = data.batch(batch);
                let (logits, _) = clf.forward(&x, true);
                let d = grad_student_ce(&logits, &y).unwrap();
                clf.backward(&d, None);
                let mut opt = Optimizer::sgd(h.eta, 0.0);
                opt.step(&mut clf);
                clf.zero_grads();
            }
        }
        let reference = clf.weights();
        assert!(res.weights.max_abs_diff(&reference).unwrap() < 1e-12);
    }

    #[test]
    fn generator_step_never_touches_teacher_weights() {
        let arch = tiny_arch();
        let tw = crate::models::init_classifier(arch.clone(), 3).unwrap();
        let mut teacher = Classifier::from_weights(arch.clone(), &tw).unwrap();
        let mut gen = Generator::init(tiny_gen(), 9).unwrap();
        let mut opt = Optimizer::adam_gan(0.001);
        let mut rng = stream(1, "noise", &[]);
        for _ in 0..3 {
            let z = sample_noise(5, 6, &mut rng);
            generator_step(
                &mut gen,
                &mut teacher,
                &z,
                &GenLossWeights {
                    lambda1: 1.0,
                    lambda2: 0.5,
                },
                &mut opt,
            )
            .unwrap();
        }
        assert_eq!(teacher.weights().max_abs_diff(&tw).unwrap(), 0.0);
    }

    #[test]
    fn generator_step_plain_gradient_matches_finite_differences() {
        // With plain SGD, w_after = w_before - lr * dL_G/dtheta; recover the
        // step and compare against central finite differences of L_G(theta).
        let arch = tiny_arch();
        let tw = crate::models::init_classifier(arch.clone(), 3).unwrap();
        let gw = GenLossWeights {
            lambda1: 0.7,
            lambda2: 0.2,
        };
        let mut rng = stream(4, "noise", &[]);
        let z = sample_noise(6, 6, &mut rng);
        let lr = 1e-3;

        let gen0 = Generator::init(tiny_gen(), 21).unwrap();
        let w_before = gen0.weights();

        // Pseudo-labels at the unperturbed point; the CE term's argmax is
        // detached, so the FD objective must hold them fixed.
        let y0: Vec<usize> = {
            let mut g = Generator::from_weights(tiny_gen(), &w_before).unwrap();
            let mut t = Classifier::from_weights(arch.clone(), &tw).unwrap();
            let x = g.forward(&z, false).unwrap();
            let (tl, _) = t.forward(&x, false);
            crate::losses::argmax_rows(&tl)
        };

        let mut gen = Generator::from_weights(tiny_gen(), &w_before).unwrap();
        let mut teacher = Classifier::from_weights(arch.clone(), &tw).unwrap();
        let mut opt = Optimizer::sgd(lr, 0.0);
        generator_step(&mut gen, &mut teacher, &z, &gw, &mut opt).unwrap();
        let w_after = gen.weights();

        // L_G as a function of generator weights, with frozen pseudo-labels.
        // loss_gen_ie is defined on probabilities; the CE term via
        // loss_student_ce takes logits directly.
        let eval = |w: &ModelWeights| -> f64 {
            let mut g = Generator::from_weights(tiny_gen(), w).unwrap();
            let mut t = Classifier::from_weights(arch.clone(), &tw).unwrap();
            let x = g.forward(&z, false).unwrap();
            let (tl, tf) = t.forward(&x, false);
            crate::losses::loss_gen_ie(&crate::losses::softmax(&tl))
                + gw.lambda1 * loss_student_ce(&tl, &y0).unwrap()
                + gw.lambda2 * crate::losses::loss_gen_act(&tf)
        };

        let eps = 1e-5;
        let mut checked = 0usize;
        for (name, arr) in w_before.entries.iter() {
            let flat: Vec<f64> = arr.iter().copied().collect();
            for (i, &v) in flat.iter().enumerate().step_by(7) {
                let mut wp = w_before.clone();
                let mut wm = w_before.clone();
                {
                    let a = wp.entries.get_mut(name).unwrap();
                    a.as_slice_mut().unwrap()[i] = v + eps;
                }
                {
                    let a = wm.entries.get_mut(name).unwrap();
                    a.as_slice_mut().unwrap()[i] = v - eps;
                }
                let g_fd = (eval(&wp) - eval(&wm)) / (2.0 * eps);
                let actual_step =
                    v - w_after.entries[name].as_slice().unwrap()[i];
                let g_opt = actual_step / lr;
                let denom = g_fd.abs().max(g_opt.abs()).max(1e-6);
                assert!(
                    (g_fd - g_opt).abs() / denom < 1e-4,
                    "{name}[{i}]: fd={g_fd} opt={g_opt}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn student_step_plain_gradient_matches_finite_differences() {
        let arch = tiny_arch();
        let data = blob_data();
        let idx: Vec<usize> = (0..6).collect();
        let (x, y) = data.batch(&idx);
        let gamma = 0.8;
        let lr = 1e-3;

        // Fixed pseudo inputs + teacher logits.
        let mut zrng = stream(8, "noise", &[]);
        let x_pseudo = Array2::from_shape_fn((5, 16), |_| {
            zrng.sample::<f64, _>(StandardNormal) * 0.25 + 0.5
        });
        let tw = crate::models::init_classifier(arch.clone(), 31).unwrap();
        let mut teacher = Classifier::from_weights(arch.clone(), &tw).unwrap();
        let (t_logits, _) = teacher.forward(&x_pseudo, false);

        let w_before = crate::models::init_classifier(arch.clone(), 17).unwrap();
        let mut student = Classifier::from_weights(arch.clone(), &w_before).unwrap();
        let mut opt = Optimizer::sgd(lr, 0.0);
        student_step(
            &mut student,
            &x,
            &y,
            Some((&x_pseudo, &t_logits)),
            gamma,
            &mut opt,
        )
        .unwrap();
        let w_after = student.weights();

        let eval = |w: &ModelWeights| -> f64 {
            let mut s = Classifier::from_weights(arch.clone(), w).unwrap();
            let (logits, _) = s.forward(&x, false);
            let ce = loss_student_ce(&logits, &y).unwrap();
            let (sl, _) = s.forward(&x_pseudo, false);
            ce + gamma * loss_kd_kl(&t_logits, &sl)
        };

        let eps = 1e-5;
        let mut checked = 0usize;
        for (name, arr) in w_before.entries.iter() {
            let flat: Vec<f64> = arr.iter().copied().collect();
            for (i, &v) in flat.iter().enumerate().step_by(5) {
                let mut wp = w_before.clone();
                let mut wm = w_before.clone();
                wp.entries.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = v + eps;
                wm.entries.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = v - eps;
                let g_fd = (eval(&wp) - eval(&wm)) / (2.0 * eps);
                let g_opt =
                    (v - w_after.entries[name].as_slice().unwrap()[i]) / lr;
                let denom = g_fd.abs().max(g_opt.abs()).max(1e-6);
                assert!(
                    (g_fd - g_opt).abs() / denom < 1e-4,
                    "{name}[{i}]: fd={g_fd} opt={g_opt}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn generator_loss_decreases_over_steps() {
        let arch = tiny_arch();
        let tw = crate::models::init_classifier(arch.clone(), 3).unwrap();
        let mut teacher = Classifier::from_weights(arch.clone(), &tw).unwrap();
        let mut gen = Generator::init(tiny_gen(), 5).unwrap();
        let gw = GenLossWeights {
            lambda1: 1.0,
            lambda2: 0.1,
        };
        let mut rng = stream(2, "noise", &[]);
        let z = sample_noise(16, 6, &mut rng);
        let mut opt = Optimizer::sgd(0.05, 0.0);
        let first = generator_step(&mut gen, &mut teacher, &z, &gw, &mut opt)
            .unwrap()
            .total;
        let mut last = first;
        for _ in 0..40 {
            last = generator_step(&mut gen, &mut teacher, &z, &gw, &mut opt)
                .unwrap()
                .total;
        }
        assert!(
            last < first,
            "L_G did not decrease: first={first} last={last}"
        );
    }

    #[test]
    fn student_step_moves_student_toward_teacher() {
        // Knowledge-fusion direction: with gamma > 0 and labels matching the
        // teacher's pseudo-labels, one small step reduces KL(teacher||student)
        // on the same pseudo-batch.
        let arch = tiny_arch();
        let tw = crate::models::init_classifier(arch.clone(), 41).unwrap();
        let sw = crate::models::init_classifier(arch.clone(), 42).unwrap();
        let mut teacher = Classifier::from_weights(arch.clone(), &tw).unwrap();
        let mut zrng = stream(6, "noise", &[]);
        let x_pseudo = Array2::from_shape_fn((12, 16), |_| {
            zrng.sample::<f64, _>(StandardNormal) * 0.25 + 0.5
        });
        let (t_logits, _) = teacher.forward(&x_pseudo, false);
        let y: Vec<usize> = crate::losses::argmax_rows(&t_logits);

        let mut student = Classifier::from_weights(arch.clone(), &sw).unwrap();
        let (s0, _) = student.forward(&x_pseudo, false);
        let kl_before = loss_kd_kl(&t_logits, &s0);

        let mut opt = Optimizer::sgd(0.02, 0.0);
        student_step(
            &mut student,
            &x_pseudo,
            &y,
            Some((&x_pseudo, &t_logits)),
            1.0,
            &mut opt,
        )
        .unwrap();
        let (s1, _) = student.forward(&x_pseudo, false);
        let kl_after = loss_kd_kl(&t_logits, &s1);
        assert!(
            kl_after < kl_before,
            "KL did not shrink: {kl_before} -> {kl_after}"
        );
    }

    #[test]
    fn gamma_without_generator_is_rejected() {
        let data = blob_data();
        let idx: Vec<usize> = (0..8).collect();
        let arch = tiny_arch();
        let w = crate::models::init_classifier(arch.clone(), 7).unwrap();
        let err = client_update(0, &arch, &w, &w, None, &data, &idx, &hp(0.5), 1)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn empty_shard_is_rejected() {
        let data = blob_data();
        let arch = tiny_arch();
        let w = crate::models::init_classifier(arch.clone(), 7).unwrap();
        let err = client_update(0, &arch, &w, &w, None, &data, &[], &hp(0.0), 1).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn image_batch_shapes_flow_through_conv_generator() {
        // End-to-end smoke: dcgen + lenet5 on a 1x8x8 toy image problem.
        let shape = ImageShape::new(1, 12, 12);
        let arch = ClassifierArch::Lenet5 {
            input: shape,
            num_classes: 3,
        };
        let ga = GeneratorArch::Dcgen {
            output: shape,
            noise_dim: 8,
            ngf: 4,
        };
        let mut images = Array2::zeros((9, 144));
        let mut rng = stream(3, "noise", &[]);
        for v in images.iter_mut() {
            *v = rng.random::<f64>();
        }
        let data = Dataset {
            name: "toy".into(),
            images,
            labels: vec![0, 1, 2, 0, 1, 2, 0, 1, 2],
            input: shape,
            num_classes: 3,
        };
        let w = crate::models::init_classifier(arch.clone(), 7).unwrap();
        let mut h = hp(0.7);
        h.epochs = 1;
        h.batch_size = 5;
        let idx: Vec<usize> = (0..9).collect();
        let res = client_update(0, &arch, &w, &w, Some(&ga), &data, &idx, &h, 8).unwrap();
        assert_eq!(res.trace.len(), 2); // ceil(9/5) = 2
        assert!(res.weights.all_finite());
    }
}

