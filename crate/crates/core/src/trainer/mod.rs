//! Episodic meta-training: task sampling, the end-to-end differentiable
//! -ARI loss, the Adam loop with validation-based early stopping, and
//! batch evaluation.

pub mod adam;
pub mod proto;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState, StepOutcome};
pub use proto::{proto_pretrain, proto_query_accuracy, ProtoReport};

use crate::autodiff::{GradientMap, Graph, ParamMap, Tensor, Var};
use crate::dataio::LabeledDataset;
use crate::encoder::{
    self, log_softmax_rows, watch_params, EncoderConfig, EncoderParams, ForwardMode,
};
use crate::error::{Error, Result};
use crate::metrics::{self, SoftDistance};
use crate::vb::{self, VbConfig};
use crate::{parallel, rng};

/// Category count range used for validation/test episodes.
const EVAL_K_RANGE: (usize, usize) = (2, 10);

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Full,
    NoFrInit,
    EmInference,
    ProbDistance,
    IdentityEncoder,
}

impl PipelineMode {
    pub fn distance(self) -> SoftDistance {
        match self {
            PipelineMode::ProbDistance => SoftDistance::Probability,
            _ => SoftDistance::TotalVariation,
        }
    }

    pub fn uses_encoder(self) -> bool {
        self != PipelineMode::IdentityEncoder
    }

    /// Whether initial assignments come from f_R (vs random simplex rows).
    pub fn uses_fr_init(self) -> bool {
        matches!(self, PipelineMode::Full | PipelineMode::EmInference | PipelineMode::ProbDistance)
    }
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PipelineMode::Full => "full",
            PipelineMode::NoFrInit => "no_fR_init",
            PipelineMode::EmInference => "em_inference",
            PipelineMode::ProbDistance => "prob_distance",
            PipelineMode::IdentityEncoder => "identity_encoder",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    /// validation evaluations without improvement before stopping
    pub patience: usize,
    pub validation_interval: usize,
    pub validation_tasks: usize,
    pub n_max_per_category: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub mode: PipelineMode,
    pub proto_pretrain: bool,
    pub proto_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            max_epochs: 1000,
            patience: 50,
            validation_interval: 10,
            validation_tasks: 50,
            n_max_per_category: 20,
            grad_clip: Some(10.0),
            seed: 0,
            mode: PipelineMode::Full,
            proto_pretrain: true,
            proto_epochs: 300,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.patience == 0 || self.validation_interval == 0 {
            return Err(Error::Config("patience and validation_interval must be >= 1".into()));
        }
        if self.n_max_per_category == 0 {
            return Err(Error::Config("n_max_per_category must be >= 1".into()));
        }
        Ok(())
    }
}

/// One sampled clustering episode.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub x: Tensor,
    pub y: Option<Vec<usize>>,
    pub task_id: usize,
    /// original category ids inside the task, in selection order
    pub categories: Vec<usize>,
    pub seed: u64,
}

impl TaskBatch {
    pub fn n(&self) -> usize {
        self.x.rows()
    }
}

fn sample_episode_inner(
    datasets: &[LabeledDataset],
    k_lo: usize,
    k_hi_cap: usize,
    n_max_per_category: usize,
    rng_outer: &mut ChaCha8Rng,
) -> Result<TaskBatch> {
    if datasets.is_empty() {
        return Err(Error::Contract("cannot sample an episode from an empty dataset list".into()));
    }
    let episode_seed: u64 = rng_outer.gen();
    let mut er = rng::seeded(episode_seed);

    let task_id = er.gen_range(0..datasets.len());
    let ds = &datasets[task_id];
    let k_t = ds.n_categories();
    if k_t == 0 {
        return Err(Error::Contract(format!("task {} has no categories", task_id)));
    }
    let hi = k_hi_cap.min(k_t);
    if hi < k_lo {
        return Err(Error::Contract(format!(
            "task {} has {} categories, need at least {}",
            task_id, k_t, k_lo
        )));
    }
    let k = er.gen_range(k_lo..=hi);

    let mut cats: Vec<usize> = (0..k_t).collect();
    cats.shuffle(&mut er);
    cats.truncate(k);

    let rows_by_cat = ds.category_rows();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (new_label, &c) in cats.iter().enumerate() {
        let rows = &rows_by_cat[c];
        let chosen: Vec<usize> = if rows.len() > n_max_per_category {
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut er);
            shuffled.truncate(n_max_per_category);
            shuffled
        } else {
            rows.clone()
        };
        for &i in &chosen {
            data.extend_from_slice(ds.x.row(i));
            labels.push(new_label);
        }
    }
    let n = labels.len();
    Ok(TaskBatch {
        x: Tensor::matrix(n, ds.dim(), data)?,
        y: Some(labels),
        task_id,
        categories: cats,
        seed: episode_seed,
    })
}

/// Training episode: task uniform, K uniform in {1, ..., min(K', K_t)},
/// categories without replacement, at most `n_max_per_category` instances
/// per category, labels remapped to 0..K-1.
pub fn sample_episode(
    datasets: &[LabeledDataset],
    k_max: usize,
    n_max_per_category: usize,
    rng_outer: &mut ChaCha8Rng,
) -> Result<TaskBatch> {
    sample_episode_inner(datasets, 1, k_max, n_max_per_category, rng_outer)
}

/// Evaluation episode: K uniform in {2, ..., 10}, clipped to the available
/// categories.
pub fn sample_eval_episode(
    datasets: &[LabeledDataset],
    n_max_per_category: usize,
    rng_outer: &mut ChaCha8Rng,
) -> Result<TaskBatch> {
    sample_episode_inner(datasets, EVAL_K_RANGE.0, EVAL_K_RANGE.1, n_max_per_category, rng_outer)
}

/// Random initial assignments for the ablations: standard Gaussian logits
/// pushed through the row softmax.
fn random_initial_assignments(
    g: &mut Graph,
    n: usize,
    k: usize,
    rng_eps: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    let data: Vec<f64> = (0..n * k)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng_eps))
        .collect();
    let logits = g.leaf(Tensor::matrix(n, k, data)?);
    log_softmax_rows(g, logits)
}

/// Forward pipeline shared by training and inference. Returns the final
/// soft assignments and the ELBO (or log-likelihood) trace.
struct PipelineOutput {
    r: Var,
    trace: Vec<f64>,
    watched: bool,
}

#[allow(clippy::too_many_arguments)]
fn forward_pipeline(
    g: &mut Graph,
    params: Option<&EncoderParams>,
    enc_cfg: &EncoderConfig,
    vb_cfg: &VbConfig,
    mode: PipelineMode,
    x: &Tensor,
    train_mode: bool,
    rng_eps: &mut ChaCha8Rng,
) -> Result<PipelineOutput> {
    let n = x.rows();
    let xv = g.leaf(x.clone());

    let (z, r0, log_r0, watched) = if mode.uses_encoder() {
        let params = params.ok_or_else(|| {
            Error::Contract(format!("mode {} requires encoder parameters", mode))
        })?;
        let vars = watch_params(g, params)?;
        let mut fmode =
            if train_mode { ForwardMode::Train { rng: rng_eps } } else { ForwardMode::Eval };
        let z = encoder::encode_instances(g, &vars, enc_cfg, xv, &mut fmode)?;
        if mode.uses_fr_init() {
            let u = encoder::task_representation(g, &vars, enc_cfg, z, &mut fmode)?;
            let (r0, log_r0) = encoder::initial_assignments(g, &vars, enc_cfg, z, u, &mut fmode)?;
            (z, r0, log_r0, true)
        } else {
            drop(fmode);
            let (r0, log_r0) = random_initial_assignments(g, n, vb_cfg.k_max, rng_eps)?;
            (z, r0, log_r0, true)
        }
    } else {
        let (r0, log_r0) = random_initial_assignments(g, n, vb_cfg.k_max, rng_eps)?;
        (xv, r0, log_r0, false)
    };

    match mode {
        PipelineMode::EmInference => {
            let out = vb::run_em(g, z, r0, vb_cfg.steps)?;
            Ok(PipelineOutput { r: out.r, trace: out.log_lik, watched })
        }
        _ => {
            let (state, trace) = vb::run_vb(g, z, r0, Some(log_r0), vb_cfg)?;
            Ok(PipelineOutput {
                r: state.r,
                trace: trace.into_iter().map(|s| s.value).collect(),
                watched,
            })
        }
    }
}

/// Loss, gradients and diagnostics of one training episode.
pub struct EpisodeOutcome {
    pub loss: f64,
    pub cont_ari: f64,
    pub grads: Option<GradientMap>,
    pub degenerate: bool,
    pub soft: Tensor,
    pub trace: Vec<f64>,
}

/// Differentiable -ARI of one labeled episode under the configured mode.
/// Degenerate episodes (vanishing ARI denominator) report loss 0 with a
/// flag and contribute an all-zero gradient.
pub fn episode_loss(
    params: &EncoderParams,
    batch: &TaskBatch,
    enc_cfg: &EncoderConfig,
    vb_cfg: &VbConfig,
    cfg: &TrainConfig,
    rng_eps: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome> {
    let y = batch
        .y
        .as_ref()
        .ok_or_else(|| Error::Contract("episode_loss requires a labeled batch".into()))?;
    if batch.n() < 2 {
        return Err(Error::Contract(format!("episode_loss requires N >= 2, got {}", batch.n())));
    }

    let mut g = Graph::new();
    let encoder_params = cfg.mode.uses_encoder().then_some(params);
    let out =
        forward_pipeline(&mut g, encoder_params, enc_cfg, vb_cfg, cfg.mode, &batch.x, true, rng_eps)?;

    let soft_ari = metrics::soft_ari_graph(&mut g, y, out.r, cfg.mode.distance())?;
    let soft = g.value(out.r).clone();

    if soft_ari.degenerate {
        let grads = out.watched.then(|| {
            params
                .to_param_map()
                .into_iter()
                .map(|(k, t)| (k, Tensor::zeros(t.shape())))
                .collect()
        });
        return Ok(EpisodeOutcome {
            loss: 0.0,
            cont_ari: 0.0,
            grads,
            degenerate: true,
            soft,
            trace: out.trace,
        });
    }

    let loss = g.neg(soft_ari.score)?;
    let loss_value = g.scalar_value(loss);
    let grads = if out.watched { Some(g.backward_all(loss)?) } else { None };
    Ok(EpisodeOutcome {
        loss: loss_value,
        cont_ari: g.scalar_value(soft_ari.score),
        grads,
        degenerate: false,
        soft,
        trace: out.trace,
    })
}

/// Inference result for one episode (evaluation mode, no dropout).
#[derive(Clone, Debug, Serialize)]
pub struct EpisodeResult {
    pub soft: Tensor,
    pub hard: Vec<usize>,
    /// clusters carrying more than one expected instance of mass
    pub populated: usize,
    pub trace: Vec<f64>,
    pub cont_ari: Option<f64>,
    pub hard_ari: Option<f64>,
    pub degenerate: bool,
}

/// Cluster one episode with the full pipeline in evaluation mode.
pub fn cluster_episode(
    encoder: Option<(&EncoderParams, &EncoderConfig)>,
    x: &Tensor,
    y: Option<&[usize]>,
    vb_cfg: &VbConfig,
    mode: PipelineMode,
    rng_eps: &mut ChaCha8Rng,
) -> Result<EpisodeResult> {
    let mut g = Graph::new();
    let (params, enc_cfg_opt) = match encoder {
        Some((p, c)) => (Some(p), Some(c)),
        None => (None, None),
    };
    let default_cfg = EncoderConfig::default();
    let enc_cfg = enc_cfg_opt.unwrap_or(&default_cfg);
    let out = forward_pipeline(&mut g, params, enc_cfg, vb_cfg, mode, x, false, rng_eps)?;

    let soft = g.value(out.r).clone();
    let hard = vb::hard_assignments(&soft);
    let populated = vb::populated_clusters(&soft, 1.0);

    let (cont_ari, hard_ari, degenerate) = match y {
        Some(labels) if labels.len() == x.rows() && x.rows() >= 2 => {
            let counts = metrics::soft_pair_counts(labels, &soft, mode.distance())?;
            let c = metrics::continuous_ari(&counts);
            let h = metrics::ari_labels(labels, &hard)?;
            let den = (counts.n1 + counts.n2) * (counts.n3 + counts.n4)
                + (counts.n1 + counts.n3) * (counts.n2 + counts.n4);
            (Some(c), Some(h), den.abs() < metrics::ARI_DENOM_EPS)
        }
        _ => (None, None, false),
    };

    Ok(EpisodeResult { soft, hard, populated, trace: out.trace, cont_ari, hard_ari, degenerate })
}

// ---- training loop -----------------------------------------------------------

/// One JSONL record per epoch.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub validation_ari: Option<f64>,
    /// cumulative degenerate-episode count
    pub degenerate_count: u64,
    pub wall_clock_ms: u64,
}

/// Serializable mid-training snapshot; training resumes from it exactly.
#[derive(Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub params: ParamMap,
    pub adam_m: ParamMap,
    pub adam_v: ParamMap,
    pub adam_step: u64,
    pub skipped_non_finite: u64,
    pub best_params: ParamMap,
    pub best_validation_ari: Option<f64>,
    pub evals_since_improvement: usize,
    pub degenerate_count: u64,
    pub rng: ChaCha8Rng,
}

pub struct TrainOutput {
    /// best-validation snapshot (current parameters when validation never ran)
    pub params: EncoderParams,
    pub log: Vec<EpochRecord>,
    pub initial_validation_ari: Option<f64>,
    pub best_validation_ari: Option<f64>,
    pub state: TrainerState,
}

fn validation_mean_ari(
    params: &EncoderParams,
    val_data: &[LabeledDataset],
    enc_cfg: &EncoderConfig,
    vb_cfg: &VbConfig,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let eval_vb = VbConfig { assignment_floor: 0.0, ..vb_cfg.clone() };
    let salt = cfg.seed ^ 0x5EED_0F00_u64;
    let results: Vec<Result<f64>> = parallel::map_indexed(cfg.validation_tasks, |i| {
        let mut er = rng::derive(salt, ((epoch as u64) << 20) | i as u64);
        let batch = sample_eval_episode(val_data, cfg.n_max_per_category, &mut er)?;
        let res = cluster_episode(
            Some((params, enc_cfg)),
            &batch.x,
            batch.y.as_deref(),
            &eval_vb,
            cfg.mode,
            &mut er,
        )?;
        Ok(res.hard_ari.unwrap_or(0.0))
    });
    let mut total = 0.0;
    for r in results {
        total += r?;
    }
    Ok(total / cfg.validation_tasks.max(1) as f64)
}

/// Episodic training (one episode per epoch) with periodic validation and
/// early stopping on the best validation mean ARI.
pub fn train(
    train_data: &[LabeledDataset],
    val_data: &[LabeledDataset],
    enc_cfg: &EncoderConfig,
    vb_cfg: &VbConfig,
    cfg: &TrainConfig,
    init: EncoderParams,
    resume: Option<TrainerState>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    enc_cfg.validate()?;
    vb_cfg.validate()?;
    if enc_cfg.k_max != vb_cfg.k_max {
        return Err(Error::Config(format!(
            "encoder k_max {} and vb k_max {} must agree",
            enc_cfg.k_max, vb_cfg.k_max
        )));
    }

    let template = init.clone();
    let adam_cfg = cfg.adam();
    let validate_enabled = !val_data.is_empty() && cfg.max_epochs > 0;

    let mut state = match resume {
        Some(s) => s,
        None => {
            let params = init.to_param_map();
            let adam = AdamState::new(&params);
            TrainerState {
                epoch: 0,
                best_params: params.clone(),
                params,
                adam_m: adam.m,
                adam_v: adam.v,
                adam_step: 0,
                skipped_non_finite: 0,
                best_validation_ari: None,
                evals_since_improvement: 0,
                degenerate_count: 0,
                rng: rng::seeded(cfg.seed),
            }
        }
    };

    let initial_validation_ari = if validate_enabled && state.epoch == 0 {
        let p = EncoderParams::from_param_map(&template, &state.params)?;
        let v = validation_mean_ari(&p, val_data, enc_cfg, vb_cfg, cfg, 0)?;
        if state.best_validation_ari.is_none() {
            state.best_validation_ari = Some(v);
            state.best_params = state.params.clone();
        }
        Some(v)
    } else {
        state.best_validation_ari
    };

    let mut log = Vec::new();
    while state.epoch < cfg.max_epochs {
        let t0 = Instant::now();
        state.epoch += 1;

        let params = EncoderParams::from_param_map(&template, &state.params)?;
        let batch = sample_episode(train_data, vb_cfg.k_max, cfg.n_max_per_category, &mut state.rng)?;
        let outcome = episode_loss(&params, &batch, enc_cfg, vb_cfg, cfg, &mut state.rng)?;
        if outcome.degenerate {
            state.degenerate_count += 1;
        }

        if let Some(mut grads) = outcome.grads {
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            let mut adam = AdamState {
                m: std::mem::take(&mut state.adam_m),
                v: std::mem::take(&mut state.adam_v),
                step: state.adam_step,
                skipped_non_finite: state.skipped_non_finite,
            };
            adam_step(&mut state.params, &grads, &mut adam, &adam_cfg)?;
            state.adam_m = adam.m;
            state.adam_v = adam.v;
            state.adam_step = adam.step;
            state.skipped_non_finite = adam.skipped_non_finite;
        }

        let mut validation_ari = None;
        if validate_enabled && state.epoch % cfg.validation_interval == 0 {
            let p = EncoderParams::from_param_map(&template, &state.params)?;
            let v = validation_mean_ari(&p, val_data, enc_cfg, vb_cfg, cfg, state.epoch)?;
            validation_ari = Some(v);
            let improved = state.best_validation_ari.map_or(true, |best| v > best);
            if improved {
                state.best_validation_ari = Some(v);
                state.best_params = state.params.clone();
                state.evals_since_improvement = 0;
            } else {
                state.evals_since_improvement += 1;
            }
        }

        log.push(EpochRecord {
            epoch: state.epoch,
            loss: outcome.loss,
            validation_ari,
            degenerate_count: state.degenerate_count,
            wall_clock_ms: t0.elapsed().as_millis() as u64,
        });

        if validate_enabled && state.evals_since_improvement >= cfg.patience {
            break;
        }
    }

    let final_params = if validate_enabled {
        EncoderParams::from_param_map(&template, &state.best_params)?
    } else {
        EncoderParams::from_param_map(&template, &state.params)?
    };
    Ok(TrainOutput {
        params: final_params,
        log,
        initial_validation_ari,
        best_validation_ari: state.best_validation_ari,
        state,
    })
}

/// Optional prototypical pretraining of f_Z followed by episodic training.
pub fn fit(
    train_data: &[LabeledDataset],
    val_data: &[LabeledDataset],
    enc_cfg: &EncoderConfig,
    vb_cfg: &VbConfig,
    cfg: &TrainConfig,
) -> Result<(TrainOutput, Option<ProtoReport>)> {
    let mut init = EncoderParams::init(enc_cfg, cfg.seed)?;
    let proto = if cfg.proto_pretrain && cfg.mode.uses_encoder() && cfg.proto_epochs > 0 {
        let report = proto_pretrain(train_data, enc_cfg, cfg)?;
        init.fz = report.fz.clone();
        Some(report)
    } else {
        None
    };
    let out = train(train_data, val_data, enc_cfg, vb_cfg, cfg, init, None)?;
    Ok((out, proto))
}

// ---- evaluation ---------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task: Vec<f64>,
    pub mean: f64,
    /// Bessel-corrected sample std over sqrt(n); undefined for one task
    pub std_error: Option<f64>,
    pub degenerate: usize,
    pub n_tasks: usize,
}

/// Mean hard ARI over freshly sampled evaluation episodes (no dropout,
/// assignment floor 0), reduced in episode order.
pub fn evaluate(
    encoder: Option<(&EncoderParams, &EncoderConfig)>,
    data: &[LabeledDataset],
    vb_cfg: &VbConfig,
    mode: PipelineMode,
    n_tasks: usize,
    n_max_per_category: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_tasks == 0 {
        return Err(Error::Contract("evaluate requires n_tasks >= 1".into()));
    }
    let eval_vb = VbConfig { assignment_floor: 0.0, ..vb_cfg.clone() };
    let results: Vec<Result<(f64, bool)>> = parallel::map_indexed(n_tasks, |i| {
        let mut er = rng::derive(seed, i as u64);
        let batch = sample_eval_episode(data, n_max_per_category, &mut er)?;
        let res = cluster_episode(encoder, &batch.x, batch.y.as_deref(), &eval_vb, mode, &mut er)?;
        Ok((res.hard_ari.unwrap_or(0.0), res.degenerate))
    });

    let mut per_task = Vec::with_capacity(n_tasks);
    let mut degenerate = 0usize;
    for r in results {
        let (score, deg) = r?;
        per_task.push(score);
        if deg {
            degenerate += 1;
        }
    }
    let mean = per_task.iter().sum::<f64>() / n_tasks as f64;
    let std_error = if n_tasks > 1 {
        let var =
            per_task.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_tasks - 1) as f64;
        Some((var / n_tasks as f64).sqrt())
    } else {
        None
    };
    Ok(EvalReport { per_task, mean, std_error, degenerate, n_tasks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, SyntheticSpec};

    fn blob_data(categories: usize, per: usize, seed: u64) -> LabeledDataset {
        let spec = SyntheticSpec {
            categories,
            per_category: per,
            ambient_dim: 3,
            separation: 10.0,
            ..Default::default()
        };
        let ds = gen_synthetic(&spec, seed).unwrap();
        let st = crate::dataio::Standardizer::fit(&ds.x).unwrap();
        LabeledDataset::new(ds.name.clone(), st.transform(&ds.x).unwrap(), ds.y.clone(), ds.label_names.clone())
            .unwrap()
    }

    fn tiny_enc(input_dim: usize, k_max: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            repr_dim: 3,
            hidden: 8,
            depth: 2,
            dropout_rate: 0.0,
            k_max,
            task_repr_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn sampling_is_reproducible_per_rng_state() {
        let data = [blob_data(4, 6, 0)];
        let a = sample_episode(&data, 10, 20, &mut rng::seeded(5)).unwrap();
        let b = sample_episode(&data, 10, 20, &mut rng::seeded(5)).unwrap();
        assert_eq!(a.x.data(), b.x.data());
        assert_eq!(a.y, b.y);
        assert_eq!(a.seed, b.seed);
    }

    #[test]
    fn single_category_episode_has_all_zero_labels() {
        let spec = SyntheticSpec { categories: 1, per_category: 5, ..Default::default() };
        let ds = gen_synthetic(&spec, 3).unwrap();
        let batch = sample_episode(&[ds], 10, 20, &mut rng::seeded(0)).unwrap();
        assert_eq!(batch.n(), 5);
        assert!(batch.y.as_ref().unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn per_category_cap_is_enforced() {
        let data = [blob_data(3, 30, 1)];
        let batch = sample_episode(&data, 10, 7, &mut rng::seeded(2)).unwrap();
        let y = batch.y.as_ref().unwrap();
        for label in 0..3 {
            assert!(y.iter().filter(|&&l| l == label).count() <= 7);
        }
    }

    #[test]
    fn task_selection_is_roughly_uniform() {
        let data = [blob_data(3, 4, 0), blob_data(3, 4, 1), blob_data(3, 4, 2)];
        let mut counts = [0usize; 3];
        let mut r = rng::seeded(11);
        let trials = 1000;
        for _ in 0..trials {
            let b = sample_episode(&data, 10, 20, &mut r).unwrap();
            counts[b.task_id] += 1;
        }
        // 3 sigma band around uniform
        let p = 1.0 / 3.0;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                ((c as f64) - trials as f64 * p).abs() < 3.0 * sigma,
                "task counts {:?} deviate from uniform",
                counts
            );
        }
    }

    #[test]
    fn degenerate_single_category_episode_gives_zero_loss() {
        let spec = SyntheticSpec { categories: 1, per_category: 6, ..Default::default() };
        let ds = gen_synthetic(&spec, 9).unwrap();
        let enc_cfg = tiny_enc(ds.dim(), 4);
        let vb_cfg = VbConfig { k_max: 4, steps: 2, ..Default::default() };
        let cfg = TrainConfig { mode: PipelineMode::Full, ..Default::default() };
        let params = EncoderParams::init(&enc_cfg, 0).unwrap();
        let batch = sample_episode(&[ds], 4, 20, &mut rng::seeded(1)).unwrap();
        let out = episode_loss(&params, &batch, &enc_cfg, &vb_cfg, &cfg, &mut rng::seeded(2)).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.loss, 0.0);
        let grads = out.grads.unwrap();
        assert!(grads.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn loss_is_bounded_by_one() {
        let data = [blob_data(4, 5, 3)];
        let enc_cfg = tiny_enc(data[0].dim(), 5);
        let vb_cfg = VbConfig { k_max: 5, steps: 3, ..Default::default() };
        let cfg = TrainConfig::default();
        let params = EncoderParams::init(&enc_cfg, 1).unwrap();
        let mut r = rng::seeded(4);
        for _ in 0..5 {
            let batch = sample_episode(&data, 5, 10, &mut r).unwrap();
            let out = episode_loss(&params, &batch, &enc_cfg, &vb_cfg, &cfg, &mut r).unwrap();
            assert!(out.loss >= -1.0 - 1e-9 && out.loss <= 1.0 + 1e-9, "loss {}", out.loss);
        }
    }

    #[test]
    fn identity_mode_on_separated_blobs_reaches_high_ari() {
        let data = blob_data(3, 15, 7);
        let vb_cfg = VbConfig { k_max: 8, steps: 30, assignment_floor: 0.0, ..Default::default() };
        let mut er = rng::seeded(3);
        let res = cluster_episode(
            None,
            &data.x,
            Some(&data.y),
            &vb_cfg,
            PipelineMode::IdentityEncoder,
            &mut er,
        )
        .unwrap();
        let score = res.hard_ari.unwrap();
        assert!(score >= 0.95, "identity VB ARI {}", score);
        assert!(res.cont_ari.unwrap() >= 0.9);
    }

    #[test]
    fn max_epochs_zero_returns_initial_params() {
        let data = [blob_data(3, 4, 5)];
        let enc_cfg = tiny_enc(data[0].dim(), 3);
        let vb_cfg = VbConfig { k_max: 3, steps: 2, ..Default::default() };
        let cfg = TrainConfig { max_epochs: 0, ..Default::default() };
        let init = EncoderParams::init(&enc_cfg, 8).unwrap();
        let out = train(&data, &data, &enc_cfg, &vb_cfg, &cfg, init.clone(), None).unwrap();
        assert_eq!(out.params, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = [blob_data(4, 5, 6)];
        let enc_cfg = tiny_enc(data[0].dim(), 4);
        let vb_cfg = VbConfig { k_max: 4, steps: 2, ..Default::default() };
        let cfg = TrainConfig {
            max_epochs: 6,
            validation_interval: 3,
            validation_tasks: 2,
            proto_pretrain: false,
            seed: 42,
            ..Default::default()
        };
        let run = || {
            let init = EncoderParams::init(&enc_cfg, cfg.seed).unwrap();
            train(&data, &data, &enc_cfg, &vb_cfg, &cfg, init, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.params, b.params);
        let strip = |log: &[EpochRecord]| -> Vec<(usize, u64, Option<u64>)> {
            log.iter()
                .map(|r| (r.epoch, r.loss.to_bits(), r.validation_ari.map(f64::to_bits)))
                .collect()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
    }

    #[test]
    fn returned_params_match_best_validation() {
        let data = [blob_data(5, 6, 10)];
        let enc_cfg = tiny_enc(data[0].dim(), 4);
        let vb_cfg = VbConfig { k_max: 4, steps: 3, ..Default::default() };
        let cfg = TrainConfig {
            max_epochs: 12,
            validation_interval: 4,
            validation_tasks: 3,
            proto_pretrain: false,
            seed: 2,
            ..Default::default()
        };
        let init = EncoderParams::init(&enc_cfg, 3).unwrap();
        let out = train(&data, &data, &enc_cfg, &vb_cfg, &cfg, init, None).unwrap();
        let recorded_max = out
            .log
            .iter()
            .filter_map(|r| r.validation_ari)
            .chain(out.initial_validation_ari)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_validation_ari.unwrap(), recorded_max);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = [blob_data(4, 5, 12)];
        let enc_cfg = tiny_enc(data[0].dim(), 3);
        let vb_cfg = VbConfig { k_max: 3, steps: 2, ..Default::default() };
        let base = TrainConfig {
            max_epochs: 8,
            validation_interval: 2,
            validation_tasks: 2,
            proto_pretrain: false,
            seed: 7,
            ..Default::default()
        };
        let init = EncoderParams::init(&enc_cfg, 1).unwrap();
        let full = train(&data, &data, &enc_cfg, &vb_cfg, &base, init.clone(), None).unwrap();

        let half_cfg = TrainConfig { max_epochs: 4, ..base.clone() };
        let half = train(&data, &data, &enc_cfg, &vb_cfg, &half_cfg, init.clone(), None).unwrap();
        // round-trip the checkpoint through JSON like the CLI does
        let json = serde_json::to_string(&half.state).unwrap();
        let restored: TrainerState = serde_json::from_str(&json).unwrap();
        let resumed = train(&data, &data, &enc_cfg, &vb_cfg, &base, init, Some(restored)).unwrap();
        assert_eq!(full.params, resumed.params);
    }

    #[test]
    fn eval_std_error_definition() {
        let data = [blob_data(4, 6, 20)];
        let vb_cfg = VbConfig { k_max: 6, steps: 10, ..Default::default() };
        let report =
            evaluate(None, &data, &vb_cfg, PipelineMode::IdentityEncoder, 8, 10, 3).unwrap();
        let mean = report.per_task.iter().sum::<f64>() / 8.0;
        let var = report.per_task.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 7.0;
        approx::assert_abs_diff_eq!(report.std_error.unwrap(), (var / 8.0).sqrt(), epsilon = 1e-12);

        let single =
            evaluate(None, &data, &vb_cfg, PipelineMode::IdentityEncoder, 1, 10, 3).unwrap();
        assert!(single.std_error.is_none());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = [blob_data(4, 6, 21)];
        let vb_cfg = VbConfig { k_max: 6, steps: 10, ..Default::default() };
        let a = evaluate(None, &data, &vb_cfg, PipelineMode::IdentityEncoder, 6, 10, 9).unwrap();
        let b = evaluate(None, &data, &vb_cfg, PipelineMode::IdentityEncoder, 6, 10, 9).unwrap();
        assert_eq!(a.per_task, b.per_task);
    }

    #[test]
    fn chance_level_without_inference_or_learned_init() {
        // vb_steps = 0 and random init: the pipeline must carry no label
        // leakage, so ARI sits at chance
        let data = [blob_data(5, 8, 30)];
        let vb_cfg = VbConfig { k_max: 10, steps: 0, ..Default::default() };
        let report =
            evaluate(None, &data, &vb_cfg, PipelineMode::IdentityEncoder, 200, 10, 17).unwrap();
        assert!(report.mean.abs() < 0.05, "chance-level mean ARI {}", report.mean);
    }
}
