//! Prototypical-network pretraining for the instance encoder: episodes are
//! split into support/query halves per category, queries are classified by
//! proximity to support centroids, and f_Z minimizes the cross-entropy.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::dataio::LabeledDataset;
use crate::encoder::{mlp_forward, EncoderConfig, EncoderParams, ForwardMode, LayerVars, Mlp};
use crate::error::Result;
use crate::rng;
use crate::trainer::adam::{adam_step, clip_global_norm, AdamState};
use crate::trainer::{sample_eval_episode, TrainConfig};

pub struct ProtoReport {
    pub fz: Mlp,
    pub loss_trace: Vec<f64>,
    pub skipped_episodes: usize,
}

struct ProtoEpisode {
    /// K x N centroid-averaging matrix over support rows
    support_avg: Tensor,
    /// Q x N query-selection matrix
    query_select: Tensor,
    /// Q x K one-hot query labels
    query_onehot: Tensor,
    n_query: usize,
}

/// Split each category 50/50 into support and query; categories with fewer
/// than two sampled instances are dropped, episodes with fewer than two
/// surviving categories are skipped.
fn build_proto_episode(y: &[usize], er: &mut ChaCha8Rng) -> Option<ProtoEpisode> {
    let n = y.len();
    let k_all = y.iter().max().map_or(0, |&m| m + 1);
    let mut by_cat: Vec<Vec<usize>> = vec![Vec::new(); k_all];
    for (i, &c) in y.iter().enumerate() {
        by_cat[c].push(i);
    }
    let kept: Vec<Vec<usize>> = by_cat.into_iter().filter(|rows| rows.len() >= 2).collect();
    if kept.len() < 2 {
        return None;
    }
    let k = kept.len();

    let mut support_avg = vec![0.0; k * n];
    let mut query_rows: Vec<(usize, usize)> = Vec::new(); // (row, class)
    for (class, rows) in kept.iter().enumerate() {
        let mut shuffled = rows.clone();
        shuffled.shuffle(er);
        let n_support = shuffled.len() / 2;
        let (support, query) = shuffled.split_at(n_support.max(1));
        for &i in support {
            support_avg[class * n + i] = 1.0 / support.len() as f64;
        }
        for &i in query {
            query_rows.push((i, class));
        }
    }
    let q = query_rows.len();
    if q == 0 {
        return None;
    }
    let mut query_select = vec![0.0; q * n];
    let mut query_onehot = vec![0.0; q * k];
    for (qi, &(row, class)) in query_rows.iter().enumerate() {
        query_select[qi * n + row] = 1.0;
        query_onehot[qi * k + class] = 1.0;
    }
    Some(ProtoEpisode {
        support_avg: Tensor::matrix(k, n, support_avg).expect("mask shape"),
        query_select: Tensor::matrix(q, n, query_select).expect("mask shape"),
        query_onehot: Tensor::matrix(q, k, query_onehot).expect("mask shape"),
        n_query: q,
    })
}

fn proto_loss_graph(
    g: &mut Graph,
    fz_vars: &[LayerVars],
    enc_cfg: &EncoderConfig,
    x: &Tensor,
    episode: &ProtoEpisode,
    mode: &mut ForwardMode,
) -> Result<crate::autodiff::Var> {
    let xv = g.leaf(x.clone());
    let rate = if enc_cfg.dropout_fz { enc_cfg.dropout_rate } else { 0.0 };
    let z = mlp_forward(g, fz_vars, xv, rate, mode)?;
    let avg = g.leaf(episode.support_avg.clone());
    let centroids = g.matmul(avg, z)?;
    let select = g.leaf(episode.query_select.clone());
    let queries = g.matmul(select, z)?;
    let dist = g.pairwise_sq_dist(queries, centroids)?;
    let logits = g.neg(dist)?;
    let lse = g.log_sum_exp_rows(logits)?;
    let lse_sum = g.sum_all(lse)?;
    let onehot = g.leaf(episode.query_onehot.clone());
    let picked = g.mul(logits, onehot)?;
    let picked_sum = g.sum_all(picked)?;
    let nll = g.sub(lse_sum, picked_sum)?;
    g.scale(nll, 1.0 / episode.n_query as f64)
}

/// Episodic pretraining of f_Z; returns the trained network and the
/// per-episode loss trace.
pub fn proto_pretrain(
    train_data: &[LabeledDataset],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<ProtoReport> {
    let init = EncoderParams::init(enc_cfg, cfg.seed.wrapping_add(0x9e3779b9))?;
    let mut params: crate::autodiff::ParamMap = init
        .named()
        .into_iter()
        .filter(|(name, _)| name.starts_with("fZ."))
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut adam = AdamState::new(&params);
    let adam_cfg = cfg.adam();
    let mut r = rng::seeded(cfg.seed.wrapping_add(0x517cc1b7));

    let mut full = init.clone();
    let mut loss_trace = Vec::with_capacity(cfg.proto_epochs);
    let mut skipped = 0usize;
    for _ in 0..cfg.proto_epochs {
        let batch = match sample_eval_episode(train_data, cfg.n_max_per_category, &mut r) {
            Ok(b) => b,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let y = batch.y.as_ref().expect("sampled episodes are labeled");
        let Some(episode) = build_proto_episode(y, &mut r) else {
            skipped += 1;
            continue;
        };

        // splice current fZ weights into the template for the forward pass
        let mut merged = full.to_param_map();
        for (k, v) in &params {
            merged.insert(k.clone(), v.clone());
        }
        full = EncoderParams::from_param_map(&init, &merged)?;

        let mut g = Graph::new();
        let mut fz_vars = Vec::new();
        for (i, layer) in full.fz.layers.iter().enumerate() {
            let w = g.param(format!("fZ.{}.W", i), layer.w.clone())?;
            let b = g.param(format!("fZ.{}.b", i), layer.b.clone())?;
            fz_vars.push(LayerVars { w, b });
        }
        let mut mode = ForwardMode::Train { rng: &mut r };
        let loss = proto_loss_graph(&mut g, &fz_vars, enc_cfg, &batch.x, &episode, &mut mode)?;
        loss_trace.push(g.scalar_value(loss));
        let mut grads = g.backward_all(loss)?;
        if let Some(max_norm) = cfg.grad_clip {
            clip_global_norm(&mut grads, max_norm);
        }
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
    }

    let mut merged = full.to_param_map();
    for (k, v) in &params {
        merged.insert(k.clone(), v.clone());
    }
    let full = EncoderParams::from_param_map(&init, &merged)?;
    Ok(ProtoReport { fz: full.fz, loss_trace, skipped_episodes: skipped })
}

/// Nearest-centroid accuracy of held-out episodes under a trained f_Z.
pub fn proto_query_accuracy(
    fz: &Mlp,
    data: &[LabeledDataset],
    n_episodes: usize,
    n_max_per_category: usize,
    seed: u64,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..n_episodes {
        let mut er = rng::derive(seed, i as u64);
        let batch = sample_eval_episode(data, n_max_per_category, &mut er)?;
        let y = batch.y.as_ref().unwrap();
        let Some(episode) = build_proto_episode(y, &mut er) else { continue };

        let mut g = Graph::new();
        let mut fz_vars = Vec::new();
        for (i, layer) in fz.layers.iter().enumerate() {
            let w = g.param(format!("fZ.{}.W", i), layer.w.clone())?;
            let b = g.param(format!("fZ.{}.b", i), layer.b.clone())?;
            fz_vars.push(LayerVars { w, b });
        }
        let xv = g.leaf(batch.x.clone());
        let mut mode = ForwardMode::Eval;
        let z = mlp_forward(&mut g, &fz_vars, xv, 0.0, &mut mode)?;
        let avg = g.leaf(episode.support_avg.clone());
        let centroids = g.matmul(avg, z)?;
        let select = g.leaf(episode.query_select.clone());
        let queries = g.matmul(select, z)?;
        let dist = g.pairwise_sq_dist(queries, centroids)?;
        let d = g.value(dist);
        for qi in 0..episode.n_query {
            let row = d.row(qi);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] < row[best] {
                    best = j;
                }
            }
            let truth = episode
                .query_onehot
                .row(qi)
                .iter()
                .position(|&v| v == 1.0)
                .expect("one-hot row");
            if best == truth {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Contract("no usable proto evaluation episodes".into()));
    }
    Ok(correct as f64 / total as f64)
}

use crate::error::Error;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic, Standardizer, SyntheticSpec};

    fn blobs(categories: usize, per: usize, seed: u64) -> LabeledDataset {
        let spec = SyntheticSpec {
            categories,
            per_category: per,
            ambient_dim: 3,
            separation: 10.0,
            ..Default::default()
        };
        let ds = gen_synthetic(&spec, seed).unwrap();
        let st = Standardizer::fit(&ds.x).unwrap();
        LabeledDataset::new(
            ds.name.clone(),
            st.transform(&ds.x).unwrap(),
            ds.y.clone(),
            ds.label_names.clone(),
        )
        .unwrap()
    }

    #[test]
    fn pretraining_reaches_high_query_accuracy_on_blobs() {
        let train = [blobs(6, 12, 0)];
        let held_out = [blobs(6, 12, 99)];
        let enc_cfg = EncoderConfig {
            input_dim: 3,
            repr_dim: 3,
            hidden: 16,
            depth: 2,
            dropout_rate: 0.0,
            k_max: 6,
            task_repr_dim: 8,
            ..Default::default()
        };
        let cfg = TrainConfig { proto_epochs: 120, seed: 5, ..Default::default() };
        let report = proto_pretrain(&train, &enc_cfg, &cfg).unwrap();
        let acc = proto_query_accuracy(&report.fz, &held_out, 20, 10, 3).unwrap();
        assert!(acc > 0.95, "proto query accuracy {}", acc);
    }

    #[test]
    fn single_category_episodes_are_skipped() {
        let spec = SyntheticSpec { categories: 1, per_category: 8, ..Default::default() };
        let ds = gen_synthetic(&spec, 1).unwrap();
        let enc_cfg = EncoderConfig {
            input_dim: ds.dim(),
            repr_dim: 2,
            hidden: 4,
            depth: 2,
            dropout_rate: 0.0,
            k_max: 3,
            task_repr_dim: 4,
            ..Default::default()
        };
        let cfg = TrainConfig { proto_epochs: 10, ..Default::default() };
        let report = proto_pretrain(&[ds], &enc_cfg, &cfg).unwrap();
        assert_eq!(report.skipped_episodes, 10);
        assert!(report.loss_trace.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let train = [blobs(4, 8, 2)];
        let enc_cfg = EncoderConfig {
            input_dim: 3,
            repr_dim: 2,
            hidden: 8,
            depth: 2,
            dropout_rate: 0.1,
            k_max: 4,
            task_repr_dim: 4,
            ..Default::default()
        };
        let cfg = TrainConfig { proto_epochs: 15, seed: 9, ..Default::default() };
        let a = proto_pretrain(&train, &enc_cfg, &cfg).unwrap();
        let b = proto_pretrain(&train, &enc_cfg, &cfg).unwrap();
        assert_eq!(a.fz, b.fz);
        assert_eq!(a.loss_trace, b.loss_trace);
    }
}
