//! The federated server: client selection, cache-slot bookkeeping, the two
//! aggregations (active-only ACA and all-slots OCA), and the round loop
//! shared by every algorithm in the lab.
//!
//! Privacy boundary: nothing in this module accepts client samples — the
//! only things that cross the client→server interface are `ModelWeights`,
//! training-set sizes, and (for q-FFL) a weight-derived scalar loss.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    fedgkd_teacher, local_train, qffl_aggregate, AlgorithmName, AlgorithmSpec, GlobalModelBuffer,
    LocalRegularizer,
};
use crate::client::{client_update, ClientHyperparams, ClientUpdateResult};
use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::metrics::{amp, evaluate_profile, fm, wlp};
use crate::models::{
    save_checkpoint, weighted_mean, Classifier, ClassifierArch, GeneratorArch, ModelWeights,
};
use crate::records::{append_record, read_records, RoundRecord};
use crate::rng::{derive_seed, stream};

/// Fraction of clients active per round; m = max(1, round(tau*K)).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPolicy {
    pub tau: f64,
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config(format!(
                "selection rate tau must be in (0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }

    pub fn num_active(&self, num_clients: usize) -> usize {
        ((self.tau * num_clients as f64).round() as usize).max(1)
    }
}

/// Uniform without-replacement draw of `m` distinct client ids, deterministic
/// in `(rng_seed, t)` and independent of client execution order. Returned
/// sorted ascending.
pub fn select_active_ids(
    num_clients: usize,
    m: usize,
    rng_seed: u64,
    t: u64,
) -> Result<Vec<usize>> {
    if m == 0 || m > num_clients {
        return Err(Error::config(format!(
            "cannot select {m} of {num_clients} clients"
        )));
    }
    let mut rng = stream(rng_seed, "select", &[t]);
    let mut ids = rand::seq::index::sample(&mut rng, num_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Weighted mean over all K cache slots (the teacher / final model).
pub fn aggregate_oca(cache: &[ModelWeights], sizes: &[usize]) -> Result<ModelWeights> {
    if cache.is_empty() || cache.len() != sizes.len() {
        return Err(Error::config(format!(
            "OCA needs matching non-empty cache/sizes, got {}/{}",
            cache.len(),
            sizes.len()
        )));
    }
    let items: Vec<(f64, &ModelWeights)> = cache
        .iter()
        .zip(sizes)
        .map(|(w, &n)| (n as f64, w))
        .collect();
    weighted_mean(&items)
}

/// Weighted mean over the current round's uploads only (the student).
pub fn aggregate_aca(active_weights: &[&ModelWeights], sizes: &[usize]) -> Result<ModelWeights> {
    if active_weights.is_empty() || active_weights.len() != sizes.len() {
        return Err(Error::config(format!(
            "ACA needs matching non-empty weights/sizes, got {}/{}",
            active_weights.len(),
            sizes.len()
        )));
    }
    let items: Vec<(f64, &ModelWeights)> = active_weights
        .iter()
        .zip(sizes)
        .map(|(w, &n)| (n as f64, *w))
        .collect();
    weighted_mean(&items)
}

/// Cache-slot server state: one slot per client, each initialized to w_0 and
/// thereafter holding that client's most recent upload.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub cache: Vec<ModelWeights>,
    /// OCA aggregate (teacher; the final deliverable).
    pub w_teacher: ModelWeights,
    /// ACA aggregate (student broadcast).
    pub w_student: ModelWeights,
    /// Completed rounds.
    pub round: u64,
    /// Aggregation weight n_k per client (training-set sizes).
    pub sizes: Vec<usize>,
    pub rng_seed: u64,
    /// S_t of the round in flight; empty between rounds.
    active: Vec<usize>,
}

impl ServerState {
    pub fn new(w0: ModelWeights, sizes: Vec<usize>, rng_seed: u64) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::config("server needs at least one client"));
        }
        if sizes.iter().any(|&n| n == 0) {
            return Err(Error::config("every client needs at least one sample"));
        }
        Ok(ServerState {
            cache: vec![w0.clone(); sizes.len()],
            w_teacher: w0.clone(),
            w_student: w0,
            round: 0,
            sizes,
            rng_seed,
            active: Vec::new(),
        })
    }

    pub fn num_clients(&self) -> usize {
        self.sizes.len()
    }

    /// Start round t = round+1: draw and remember S_t.
    pub fn select_active(&mut self, policy: &SelectionPolicy) -> Result<(u64, Vec<usize>)> {
        policy.validate()?;
        let t = self.round + 1;
        let m = policy.num_active(self.num_clients());
        let active = select_active_ids(self.num_clients(), m, self.rng_seed, t)?;
        self.active = active.clone();
        Ok((t, active))
    }

    /// Store client k's upload in its slot. k must be in the round's S_t and
    /// the upload must match the cached architecture.
    pub fn update_cache(&mut self, k: usize, w: ModelWeights) -> Result<()> {
        if !self.active.contains(&k) {
            return Err(Error::protocol(format!(
                "client {k} is not in the active set of round {}",
                self.round + 1
            )));
        }
        self.cache[k]
            .check_compatible(&w)
            .map_err(|e| Error::protocol(format!("cache slot {k}: {e}")))?;
        self.cache[k] = w;
        Ok(())
    }

    /// Step s6: recompute ACA over the clients that actually uploaded and
    /// OCA over all K slots, then advance the round counter.
    pub fn complete_round(&mut self, uploaded: &[usize]) -> Result<()> {
        if uploaded.is_empty() {
            return Err(Error::data(format!(
                "round {}: no client uploads to aggregate",
                self.round + 1
            )));
        }
        for &k in uploaded {
            if !self.active.contains(&k) {
                return Err(Error::protocol(format!(
                    "upload list contains non-active client {k}"
                )));
            }
        }
        let ws: Vec<&ModelWeights> = uploaded.iter().map(|&k| &self.cache[k]).collect();
        let sz: Vec<usize> = uploaded.iter().map(|&k| self.sizes[k]).collect();
        self.w_student = aggregate_aca(&ws, &sz)?;
        self.w_teacher = aggregate_oca(&self.cache, &self.sizes)?;
        self.round += 1;
        self.active.clear();
        Ok(())
    }
}

/// What to do when a client's local update fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailurePolicy {
    /// Abort the run with the failing client's error (default).
    Abort,
    /// Drop the client from the round with a warning; aggregation
    /// renormalizes over the survivors.
    Drop,
}

/// Everything a training run needs, fully resolved.
pub struct TrainSetup<'a> {
    pub data: &'a Dataset,
    pub partition: &'a Partition,
    pub arch: ClassifierArch,
    pub gen_arch: Option<GeneratorArch>,
    pub algo: AlgorithmSpec,
    pub hp: ClientHyperparams,
    pub selection: SelectionPolicy,
    /// Communication rounds T.
    pub rounds: u64,
    /// Run seed: model init, selection, and per-client seeds derive from it.
    pub seed: u64,
    /// Evaluate (and record) every this many rounds; the final round is
    /// always evaluated.
    pub eval_every: u64,
    pub failure_policy: FailurePolicy,
    /// Checkpoint the eval model + exact resume state every N rounds
    /// (requires `out_dir`).
    pub checkpoint_every: Option<u64>,
    /// Run directory for records.jsonl / checkpoints/ / state/.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/state` if present.
    pub resume: bool,
}

enum AggState {
    Slots(ServerState),
    Plain { global: ModelWeights, round: u64 },
}

impl AggState {
    fn eval_weights(&self) -> &ModelWeights {
        match self {
            AggState::Slots(st) => &st.w_teacher,
            AggState::Plain { global, .. } => global,
        }
    }

    fn round(&self) -> u64 {
        match self {
            AggState::Slots(st) => st.round,
            AggState::Plain { round, .. } => *round,
        }
    }
}

struct Upload {
    k: usize,
    result: ClientUpdateResult,
    /// q-FFL's F_k: mean train CE at the broadcast weights, pre-update.
    pre_loss: Option<f64>,
}

/// Run Algorithm 1 (or a baseline) for T rounds. Returns the final model —
/// the OCA aggregate for slot-based runs, the last global otherwise — and
/// the evaluated round records.
pub fn run_training(setup: &TrainSetup) -> Result<(ModelWeights, Vec<RoundRecord>)> {
    setup.algo.validate()?;
    setup.hp.validate()?;
    setup.selection.validate()?;
    if setup.eval_every == 0 {
        return Err(Error::config("eval_every must be >= 1"));
    }
    let partition = setup.partition;
    let num_clients = partition.shards.len();
    if num_clients == 0 {
        return Err(Error::config("partition has no clients"));
    }
    if setup.checkpoint_every == Some(0) {
        return Err(Error::config("checkpoint_every must be >= 1"));
    }
    if (setup.checkpoint_every.is_some() || setup.resume) && setup.out_dir.is_none() {
        return Err(Error::config(
            "checkpointing/resume requires an output directory",
        ));
    }

    let name = setup.algo.name;
    let mut hp = setup.hp.clone();
    let gen_arch = match name {
        AlgorithmName::FedKf => {
            hp.gen_weights = setup.algo.gen_weights()?;
            hp.fusion = setup.algo.fusion()?;
            if hp.fusion.gamma > 0.0 && setup.gen_arch.is_none() {
                return Err(Error::config(
                    "fedkf with gamma > 0 requires a generator architecture",
                ));
            }
            setup.gen_arch.as_ref()
        }
        _ => None,
    };
    if let Some(ga) = gen_arch {
        if ga.output_dim() != setup.arch.input_dim() {
            return Err(Error::config(format!(
                "generator output dim {} does not match classifier input dim {}",
                ga.output_dim(),
                setup.arch.input_dim()
            )));
        }
    }

    // n_k is the local *training*-set size.
    let sizes: Vec<usize> = partition.shards.iter().map(|s| s.train.len()).collect();
    let w0 = crate::models::init_classifier(setup.arch.clone(), setup.seed)?;

    let mut buffer = match name {
        AlgorithmName::FedGkd => Some(GlobalModelBuffer::new(setup.algo.buffer_size()?)),
        _ => None,
    };
    let mut agg = if setup.algo.uses_slots() {
        AggState::Slots(ServerState::new(w0.clone(), sizes.clone(), setup.seed)?)
    } else {
        AggState::Plain {
            global: w0.clone(),
            round: 0,
        }
    };

    // Resume: restore exact f64 state and truncate records past it.
    let mut records: Vec<RoundRecord> = Vec::new();
    if setup.resume {
        let out = setup.out_dir.as_ref().unwrap();
        let state_dir = out.join("state");
        if !state_dir.exists() {
            return Err(Error::config(format!(
                "nothing to resume: {} does not exist",
                state_dir.display()
            )));
        }
        let (r0, restored_agg, restored_buffer) =
            load_state(&state_dir, setup, &w0, &sizes)?;
        agg = restored_agg;
        if let (Some(buf), Some(restored)) = (buffer.as_mut(), restored_buffer) {
            *buf = restored;
        }
        let rec_path = out.join("records.jsonl");
        if rec_path.exists() {
            let old = read_records(&rec_path)?;
            records = old.into_iter().filter(|r| r.round <= r0).collect();
            let mut body = String::new();
            for r in &records {
                body.push_str(&serde_json::to_string(r)?);
                body.push('\n');
            }
            std::fs::write(&rec_path, body)?;
        }
    }

    if let Some(out) = &setup.out_dir {
        std::fs::create_dir_all(out)?;
    }

    let start_round = agg.round();
    for t in (start_round + 1)..=setup.rounds {
        let tick = Instant::now();

        // Broadcast models for this round.
        let (teacher_w, start_w): (Option<ModelWeights>, ModelWeights) = match (&agg, name) {
            (AggState::Slots(st), AlgorithmName::FedKf) => {
                (Some(st.w_teacher.clone()), st.w_student.clone())
            }
            // +T1 baselines broadcast the OCA aggregate as the global model.
            (AggState::Slots(st), _) => (None, st.w_teacher.clone()),
            (AggState::Plain { global, .. }, _) => (None, global.clone()),
        };

        let active = match &mut agg {
            AggState::Slots(st) => {
                let (tt, active) = st.select_active(&setup.selection)?;
                debug_assert_eq!(tt, t);
                active
            }
            AggState::Plain { .. } => {
                let m = setup.selection.num_active(num_clients);
                select_active_ids(num_clients, m, setup.seed, t)?
            }
        };

        // FedGKD's teacher for this round (shared by all active clients).
        let gkd_teacher = match (&buffer, name) {
            (Some(buf), AlgorithmName::FedGkd) => Some(fedgkd_teacher(buf, &start_w)?),
            _ => None,
        };

        // Pure, order-independent client updates.
        let results: Vec<(usize, Result<Upload>)> = active
            .par_iter()
            .map(|&k| {
                let cseed = derive_seed(setup.seed, &[t, k as u64]);
                let shard = &partition.shards[k];
                let out = (|| -> Result<Upload> {
                    match name {
                        AlgorithmName::FedKf => {
                            let result = client_update(
                                k,
                                &setup.arch,
                                teacher_w.as_ref().expect("fedkf broadcasts a teacher"),
                                &start_w,
                                gen_arch,
                                setup.data,
                                &shard.train,
                                &hp,
                                cseed,
                            )?;
                            Ok(Upload { k, result, pre_loss: None })
                        }
                        AlgorithmName::FedAvg => {
                            let result = local_train(
                                k,
                                &setup.arch,
                                &start_w,
                                setup.data,
                                &shard.train,
                                &hp,
                                cseed,
                                LocalRegularizer::None,
                            )?;
                            Ok(Upload { k, result, pre_loss: None })
                        }
                        AlgorithmName::FedProx => {
                            let result = local_train(
                                k,
                                &setup.arch,
                                &start_w,
                                setup.data,
                                &shard.train,
                                &hp,
                                cseed,
                                LocalRegularizer::Prox {
                                    mu: setup.algo.mu()?,
                                    anchor: &start_w,
                                },
                            )?;
                            Ok(Upload { k, result, pre_loss: None })
                        }
                        AlgorithmName::FedGkd => {
                            let result = local_train(
                                k,
                                &setup.arch,
                                &start_w,
                                setup.data,
                                &shard.train,
                                &hp,
                                cseed,
                                LocalRegularizer::Distill {
                                    teacher: gkd_teacher.as_ref().expect("fedgkd teacher"),
                                    gamma: setup.algo.gamma()?,
                                },
                            )?;
                            Ok(Upload { k, result, pre_loss: None })
                        }
                        AlgorithmName::Qffl => {
                            let mut probe =
                                Classifier::from_weights(setup.arch.clone(), &start_w)?;
                            let f_k = crate::metrics::mean_ce_on(
                                &mut probe,
                                setup.data,
                                &shard.train,
                            )?;
                            let result = local_train(
                                k,
                                &setup.arch,
                                &start_w,
                                setup.data,
                                &shard.train,
                                &hp,
                                cseed,
                                LocalRegularizer::None,
                            )?;
                            Ok(Upload { k, result, pre_loss: Some(f_k) })
                        }
                    }
                })();
                (k, out)
            })
            .collect();

        // Single-writer aggregation after all updates finish.
        let mut uploads: Vec<Upload> = Vec::with_capacity(results.len());
        for (k, res) in results {
            match res {
                Ok(u) => uploads.push(u),
                Err(e) => match setup.failure_policy {
                    FailurePolicy::Abort => {
                        return Err(Error::ClientFailure {
                            client: k,
                            round: t as usize,
                            msg: e.to_string(),
                        })
                    }
                    FailurePolicy::Drop => {
                        eprintln!("warning: round {t}: dropping client {k}: {e}");
                    }
                },
            }
        }
        if uploads.is_empty() {
            return Err(Error::data(format!(
                "round {t}: every active client failed"
            )));
        }

        match &mut agg {
            AggState::Slots(st) => {
                let mut uploaded_ids = Vec::with_capacity(uploads.len());
                for u in &uploads {
                    st.update_cache(u.k, u.result.weights.clone())?;
                    uploaded_ids.push(u.k);
                }
                st.complete_round(&uploaded_ids)?;
            }
            AggState::Plain { global, round } => {
                let new_global = match name {
                    AlgorithmName::Qffl => {
                        let items: Vec<(&ModelWeights, f64)> = uploads
                            .iter()
                            .map(|u| {
                                (&u.result.weights, u.pre_loss.expect("qffl records F_k"))
                            })
                            .collect();
                        qffl_aggregate(global, &items, setup.algo.q()?, hp.eta)?
                    }
                    _ => {
                        let items: Vec<(f64, &ModelWeights)> = uploads
                            .iter()
                            .map(|u| (u.result.n_train as f64, &u.result.weights))
                            .collect();
                        weighted_mean(&items)?
                    }
                };
                *global = new_global;
                *round = t;
            }
        }

        if let Some(buf) = buffer.as_mut() {
            buf.push(agg.eval_weights().clone());
        }

        // Evaluate + record.
        if t % setup.eval_every == 0 || t == setup.rounds {
            let mut clf = Classifier::from_weights(setup.arch.clone(), agg.eval_weights())?;
            let profile = evaluate_profile(&mut clf, setup.data, &partition.shards)?;
            let mean_student_loss = uploads
                .iter()
                .map(|u| u.result.mean_student_loss())
                .sum::<f64>()
                / uploads.len() as f64;
            let gen_losses: Vec<f64> = uploads
                .iter()
                .filter_map(|u| u.result.mean_gen_loss())
                .collect();
            let mean_gen_loss = if gen_losses.is_empty() {
                None
            } else {
                Some(gen_losses.iter().sum::<f64>() / gen_losses.len() as f64)
            };
            let rec = RoundRecord {
                round: t,
                amp: amp(&profile),
                fm: fm(&profile),
                wlp: wlp(&profile),
                per_client_acc: profile.per_client_acc.clone(),
                mean_student_loss,
                mean_gen_loss,
                wall_seconds: tick.elapsed().as_secs_f64(),
            };
            rec.validate()?;
            if let Some(out) = &setup.out_dir {
                append_record(&out.join("records.jsonl"), &rec)?;
            }
            records.push(rec);
        }

        // Checkpoint the eval model (pinned f32 format) + exact f64 state.
        if let (Some(every), Some(out)) = (setup.checkpoint_every, &setup.out_dir) {
            if t % every == 0 || t == setup.rounds {
                let ck = out.join("checkpoints").join(format!("round_{t:04}"));
                save_checkpoint(&ck, agg.eval_weights(), t as usize)?;
                save_state(&out.join("state"), setup, t, &agg, buffer.as_ref())?;
            }
        }
    }

    Ok((agg.eval_weights().clone(), records))
}

// ---------------------------------------------------------------------------
// Exact resume state: raw little-endian f64 blobs + a small JSON manifest.
// (Model checkpoints use the quantized f32 format; resuming from those would
// perturb the trajectory, so run state keeps full precision.)

#[derive(Serialize, Deserialize)]
struct StateManifest {
    round: u64,
    algorithm: String,
    use_t1: bool,
    seed: u64,
    num_clients: usize,
    buffer_len: usize,
}

fn weights_to_f64_bytes(w: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(w.num_params() * 8);
    for (_, arr) in w.entries.iter() {
        for v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn weights_from_f64_bytes(template: &ModelWeights, bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() != template.num_params() * 8 {
        return Err(Error::Checkpoint(format!(
            "state blob has {} bytes, expected {}",
            bytes.len(),
            template.num_params() * 8
        )));
    }
    let mut w = template.clone();
    let mut off = 0;
    for (_, arr) in w.entries.iter_mut() {
        for v in arr.iter_mut() {
            *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
        }
    }
    Ok(w)
}

fn write_blob(dir: &Path, name: &str, w: &ModelWeights) -> Result<()> {
    std::fs::write(dir.join(name), weights_to_f64_bytes(w))?;
    Ok(())
}

fn read_blob(dir: &Path, name: &str, template: &ModelWeights) -> Result<ModelWeights> {
    let bytes = std::fs::read(dir.join(name))?;
    weights_from_f64_bytes(template, &bytes)
}

fn save_state(
    dir: &Path,
    setup: &TrainSetup,
    round: u64,
    agg: &AggState,
    buffer: Option<&GlobalModelBuffer>,
) -> Result<()> {
    // Write into a temp dir, then swap, so a crash mid-write cannot corrupt
    // the only resume point.
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    match agg {
        AggState::Slots(st) => {
            write_blob(&tmp, "oca.f64", &st.w_teacher)?;
            write_blob(&tmp, "aca.f64", &st.w_student)?;
            for (k, w) in st.cache.iter().enumerate() {
                write_blob(&tmp, &format!("slot_{k:04}.f64"), w)?;
            }
        }
        AggState::Plain { global, .. } => {
            write_blob(&tmp, "global.f64", global)?;
        }
    }
    let buffer_len = buffer.map_or(0, |b| b.len());
    if let Some(buf) = buffer {
        for (i, w) in buf.iter().enumerate() {
            write_blob(&tmp, &format!("buffer_{i:02}.f64"), w)?;
        }
    }
    let manifest = StateManifest {
        round,
        algorithm: setup.algo.name.as_str().to_string(),
        use_t1: setup.algo.use_t1,
        seed: setup.seed,
        num_clients: setup.partition.shards.len(),
        buffer_len,
    };
    std::fs::write(
        tmp.join("state.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

fn load_state(
    dir: &Path,
    setup: &TrainSetup,
    template: &ModelWeights,
    sizes: &[usize],
) -> Result<(u64, AggState, Option<GlobalModelBuffer>)> {
    let manifest: StateManifest =
        serde_json::from_slice(&std::fs::read(dir.join("state.json"))?)?;
    if manifest.algorithm != setup.algo.name.as_str()
        || manifest.use_t1 != setup.algo.use_t1
        || manifest.seed != setup.seed
        || manifest.num_clients != setup.partition.shards.len()
    {
        return Err(Error::config(format!(
            "resume state was produced by a different run \
             (algorithm {} t1={} seed {} K={})",
            manifest.algorithm, manifest.use_t1, manifest.seed, manifest.num_clients
        )));
    }
    let agg = if setup.algo.uses_slots() {
        let mut st = ServerState::new(template.clone(), sizes.to_vec(), setup.seed)?;
        st.w_teacher = read_blob(dir, "oca.f64", template)?;
        st.w_student = read_blob(dir, "aca.f64", template)?;
        for k in 0..st.num_clients() {
            st.cache[k] = read_blob(dir, &format!("slot_{k:04}.f64"), template)?;
        }
        st.round = manifest.round;
        AggState::Slots(st)
    } else {
        AggState::Plain {
            global: read_blob(dir, "global.f64", template)?,
            round: manifest.round,
        }
    };
    let buffer = if manifest.buffer_len > 0 {
        let mut buf = GlobalModelBuffer::new(
            setup
                .algo
                .buffer_size()
                .unwrap_or(manifest.buffer_len.max(1)),
        );
        for i in 0..manifest.buffer_len {
            buf.push(read_blob(dir, &format!("buffer_{i:02}.f64"), template)?);
        }
        Some(buf)
    } else {
        None
    };
    Ok((manifest.round, agg, buffer))
}
