//! The four feed-forward networks of the model: per-instance encoder,
//! the permutation-invariant task representation, and the network
//! producing initial soft cluster assignments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamMap, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Feature dimensionality of the raw instances. 0 means "set from data".
    pub input_dim: usize,
    /// Dimensionality S of the representation space.
    pub repr_dim: usize,
    /// Width of every hidden layer and of the pooled set features.
    pub hidden: usize,
    /// Number of weight layers per network (rectifiers on all but the last).
    pub depth: usize,
    pub dropout_rate: f64,
    /// Truncation level K'; output extent of the assignment network.
    pub k_max: usize,
    /// Output extent of the pooled task representation.
    pub task_repr_dim: usize,
    pub dropout_fz: bool,
    pub dropout_fu: bool,
    pub dropout_gu: bool,
    pub dropout_fr: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 0,
            repr_dim: 10,
            hidden: 256,
            depth: 3,
            dropout_rate: 0.1,
            k_max: 10,
            task_repr_dim: 256,
            dropout_fz: true,
            dropout_fu: true,
            dropout_gu: true,
            dropout_fr: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("encoder input_dim must be set from the data".into()));
        }
        if self.repr_dim == 0 || self.depth == 0 || self.k_max == 0 {
            return Err(Error::Config("repr_dim, depth and k_max must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    fn layer_dims(&self, input: usize, output: usize) -> Vec<(usize, usize)> {
        // (out, in) per weight layer
        let mut dims = Vec::with_capacity(self.depth);
        let mut prev = input;
        for _ in 0..self.depth.saturating_sub(1) {
            dims.push((self.hidden, prev));
            prev = self.hidden;
        }
        dims.push((output, prev));
        dims
    }
}

/// One affine layer: weight matrix (out x in) and bias vector (out).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.shape()[0])
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.shape()[1])
    }
}

/// Which of the four networks a parameter belongs to.
const NET_NAMES: [&str; 4] = ["fZ", "fU", "gU", "fR"];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub fz: Mlp,
    pub fu: Mlp,
    pub gu: Mlp,
    pub fr: Mlp,
}

fn init_mlp(dims: &[(usize, usize)], rng: &mut ChaCha8Rng) -> Mlp {
    let mut layers = Vec::with_capacity(dims.len());
    for &(out, input) in dims {
        let bound = 1.0 / (input as f64).sqrt();
        let data: Vec<f64> = (0..out * input).map(|_| rng.gen_range(-bound..bound)).collect();
        layers.push(DenseLayer {
            w: Tensor::matrix(out, input, data).expect("consistent init shape"),
            b: Tensor::vector(vec![0.0; out]),
        });
    }
    Mlp { layers }
}

impl EncoderParams {
    /// Deterministic initialization: weights uniform in ±1/sqrt(fan_in),
    /// biases zero.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::seeded(seed);
        let fz = init_mlp(&cfg.layer_dims(cfg.input_dim, cfg.repr_dim), &mut rng);
        let fu = init_mlp(&cfg.layer_dims(cfg.repr_dim, cfg.hidden), &mut rng);
        let gu = init_mlp(&cfg.layer_dims(cfg.hidden, cfg.task_repr_dim), &mut rng);
        let fr = init_mlp(&cfg.layer_dims(cfg.repr_dim + cfg.task_repr_dim, cfg.k_max), &mut rng);
        Ok(EncoderParams { fz, fu, gu, fr })
    }

    fn nets(&self) -> [&Mlp; 4] {
        [&self.fz, &self.fu, &self.gu, &self.fr]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.fz, &mut self.fu, &mut self.gu, &mut self.fr]
    }

    /// Canonical (name, tensor) pairs: "fZ.0.W", "fZ.0.b", ...
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (net, mlp) in NET_NAMES.iter().zip(self.nets()) {
            for (i, layer) in mlp.layers.iter().enumerate() {
                out.push((format!("{}.{}.W", net, i), &layer.w));
                out.push((format!("{}.{}.b", net, i), &layer.b));
            }
        }
        out
    }

    pub fn to_param_map(&self) -> ParamMap {
        self.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn from_param_map(template: &EncoderParams, map: &ParamMap) -> Result<Self> {
        let mut out = template.clone();
        for (net, mlp) in NET_NAMES.iter().zip(out.nets_mut()) {
            for (i, layer) in mlp.layers.iter_mut().enumerate() {
                for (suffix, slot) in [("W", &mut layer.w), ("b", &mut layer.b)] {
                    let key = format!("{}.{}.{}", net, i, suffix);
                    let t = map
                        .get(&key)
                        .ok_or_else(|| Error::Contract(format!("missing parameter {:?}", key)))?;
                    if t.shape() != slot.shape() {
                        return Err(Error::shape(
                            "from_param_map",
                            format!("{}: {:?} vs {:?}", key, t.shape(), slot.shape()),
                        ));
                    }
                    *slot = t.clone();
                }
            }
        }
        Ok(out)
    }

    /// Add `delta[name] * coeff` to every parameter in place.
    pub fn apply_delta(&mut self, delta: &ParamMap, coeff: f64) {
        for (net, mlp) in NET_NAMES.iter().zip(self.nets_mut()) {
            for (i, layer) in mlp.layers.iter_mut().enumerate() {
                for (suffix, slot) in [("W", &mut layer.w), ("b", &mut layer.b)] {
                    let key = format!("{}.{}.{}", net, i, suffix);
                    if let Some(d) = delta.get(&key) {
                        for (x, &dx) in slot.data_mut().iter_mut().zip(d.data()) {
                            *x += coeff * dx;
                        }
                    }
                }
            }
        }
    }
}

/// Graph handles for one network's layers.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub fz: Vec<LayerVars>,
    pub fu: Vec<LayerVars>,
    pub gu: Vec<LayerVars>,
    pub fr: Vec<LayerVars>,
}

/// Register every encoder parameter on the graph under its canonical name.
pub fn watch_params(g: &mut Graph, params: &EncoderParams) -> Result<EncoderVars> {
    let mut watch_net = |net: &str, mlp: &Mlp| -> Result<Vec<LayerVars>> {
        let mut vars = Vec::with_capacity(mlp.layers.len());
        for (i, layer) in mlp.layers.iter().enumerate() {
            let w = g.param(format!("{}.{}.W", net, i), layer.w.clone())?;
            let b = g.param(format!("{}.{}.b", net, i), layer.b.clone())?;
            vars.push(LayerVars { w, b });
        }
        Ok(vars)
    };
    Ok(EncoderVars {
        fz: watch_net("fZ", &params.fz)?,
        fu: watch_net("fU", &params.fu)?,
        gu: watch_net("gU", &params.gu)?,
        fr: watch_net("fR", &params.fr)?,
    })
}

/// Forward mode: evaluation is deterministic, training draws inverted
/// dropout masks from the supplied stream.
pub enum ForwardMode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

impl ForwardMode<'_> {
    fn dropout_mask(&mut self, shape: &[usize], rate: f64) -> Option<Tensor> {
        match self {
            ForwardMode::Eval => None,
            ForwardMode::Train { rng } => {
                if rate <= 0.0 {
                    return None;
                }
                let keep = 1.0 - rate;
                let scale = 1.0 / keep;
                let n: usize = shape.iter().product();
                let data: Vec<f64> =
                    (0..n).map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 }).collect();
                Some(Tensor::new(shape.to_vec(), data).expect("mask shape"))
            }
        }
    }
}

/// x @ W^T + b for a batch of rows.
fn affine(g: &mut Graph, layer: &LayerVars, x: Var) -> Result<Var> {
    let wt = g.transpose(layer.w)?;
    let xw = g.matmul(x, wt)?;
    let n = g.value(xw).rows();
    let brow = g.repeat_row(layer.b, n)?;
    g.add(xw, brow)
}

/// Multi-layer forward pass: rectifier (and optional inverted dropout) on
/// every hidden layer, affine output.
pub fn mlp_forward(
    g: &mut Graph,
    layers: &[LayerVars],
    x: Var,
    dropout_rate: f64,
    mode: &mut ForwardMode,
) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        h = affine(g, layer, h)?;
        if i + 1 < layers.len() {
            h = g.relu(h)?;
            if let Some(mask) = mode.dropout_mask(g.value(h).shape(), dropout_rate) {
                let m = g.leaf(mask);
                h = g.mul(h, m)?;
            }
        }
    }
    Ok(h)
}

/// Instance representations Z = f_Z(X), one row per instance.
pub fn encode_instances(
    g: &mut Graph,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    x: Var,
    mode: &mut ForwardMode,
) -> Result<Var> {
    let d = g.value(x).cols();
    let expected = g.value(vars.fz[0].w).cols();
    if d != expected {
        return Err(Error::shape(
            "encode_instances",
            format!("input has {} features, f_Z expects {}", d, expected),
        ));
    }
    let rate = if cfg.dropout_fz { cfg.dropout_rate } else { 0.0 };
    mlp_forward(g, &vars.fz, x, rate, mode)
}

/// Permutation-invariant task representation u = g_U(mean_n f_U(z_n)),
/// returned as a 1 x task_repr_dim matrix.
pub fn task_representation(
    g: &mut Graph,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    z: Var,
    mode: &mut ForwardMode,
) -> Result<Var> {
    let fu_rate = if cfg.dropout_fu { cfg.dropout_rate } else { 0.0 };
    let pooled_in = mlp_forward(g, &vars.fu, z, fu_rate, mode)?;
    let mean = g.mean_rows(pooled_in)?;
    let mean_row = g.repeat_row(mean, 1)?;
    let gu_rate = if cfg.dropout_gu { cfg.dropout_rate } else { 0.0 };
    mlp_forward(g, &vars.gu, mean_row, gu_rate, mode)
}

/// Initial soft assignments: row-wise softmax of f_R([z_n, u]) computed via
/// log-sum-exp. Returns (r0, log_r0).
pub fn initial_assignments(
    g: &mut Graph,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    z: Var,
    u: Var,
    mode: &mut ForwardMode,
) -> Result<(Var, Var)> {
    let n = g.value(z).rows();
    let u_rows = g.repeat_row(u, n)?;
    let zu = g.concat_cols(z, u_rows)?;
    let fr_rate = if cfg.dropout_fr { cfg.dropout_rate } else { 0.0 };
    let logits = mlp_forward(g, &vars.fr, zu, fr_rate, mode)?;
    log_softmax_rows(g, logits)
}

/// Row-wise (softmax, log-softmax) of a logits matrix.
pub fn log_softmax_rows(g: &mut Graph, logits: Var) -> Result<(Var, Var)> {
    let k = g.value(logits).cols();
    let lse = g.log_sum_exp_rows(logits)?;
    let lse_cols = g.repeat_col(lse, k)?;
    let log_r = g.sub(logits, lse_cols)?;
    let r = g.exp(log_r)?;
    Ok((r, log_r))
}

// ---- checkpoint serialization ----------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    config: EncoderConfig,
    tensors: std::collections::BTreeMap<String, Vec<f64>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize parameters with a config echo; flat arrays keyed "fZ.0.W", ...
pub fn checkpoint_to_json(params: &EncoderParams, cfg: &EncoderConfig) -> Result<String> {
    let tensors = params
        .named()
        .into_iter()
        .map(|(name, t)| (name, t.data().to_vec()))
        .collect();
    let doc = CheckpointDoc { version: CHECKPOINT_VERSION, config: cfg.clone(), tensors };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Rebuild parameters from a checkpoint document; shapes come from the
/// echoed config.
pub fn checkpoint_from_json(json: &str) -> Result<(EncoderParams, EncoderConfig)> {
    let doc: CheckpointDoc = serde_json::from_str(json)?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {}", doc.version)));
    }
    let template = EncoderParams::init(&doc.config, 0)?;
    let mut map = ParamMap::new();
    for (name, t) in template.named() {
        let data = doc
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint missing tensor {:?}", name)))?;
        if data.len() != t.len() {
            return Err(Error::Config(format!(
                "checkpoint tensor {:?} has {} values, expected {}",
                name,
                data.len(),
                t.len()
            )));
        }
        map.insert(name, Tensor::new(t.shape().to_vec(), data.clone())?);
    }
    let params = EncoderParams::from_param_map(&template, &map)?;
    Ok((params, doc.config))
}
