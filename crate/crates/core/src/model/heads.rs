//! Projection and classifier heads on top of the 1024-d encoder output.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{init_bias, init_weight, GradStore, ParamStore};

use super::{ClassifierConfig, ProjectionHeadConfig};

// ---------------------------------------------------------------------------
// Projection head: dense -> ReLU -> dense -> L2 normalize
// ---------------------------------------------------------------------------

pub fn projection_init_params(
    store: &mut ParamStore,
    config: &ProjectionHeadConfig,
    prefix: &str,
    seed: u64,
) {
    init_weight(
        store,
        &format!("{prefix}.fc1.weight"),
        &[config.input_dim, config.hidden_dim],
        config.input_dim,
        seed,
    );
    init_bias(store, &format!("{prefix}.fc1.bias"), config.hidden_dim);
    init_weight(
        store,
        &format!("{prefix}.fc2.weight"),
        &[config.hidden_dim, config.output_dim],
        config.hidden_dim,
        seed,
    );
    init_bias(store, &format!("{prefix}.fc2.bias"), config.output_dim);
}

pub fn projection_param_count(config: &ProjectionHeadConfig) -> usize {
    config.input_dim * config.hidden_dim
        + config.hidden_dim
        + config.hidden_dim * config.output_dim
        + config.output_dim
}

#[derive(Debug, Clone)]
pub struct ProjectionOutput {
    /// The unit-norm embedding (or the zero vector when flagged).
    pub embedding: Array1<f64>,
    /// Set when the pre-normalization vector had zero norm; such embeddings
    /// are rejected downstream by the contrastive loss.
    pub zero_norm: bool,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    input: Array1<f64>,
    z1: Array1<f64>,
    a1: Array1<f64>,
    z2: Array1<f64>,
    normalized: Array1<f64>,
    norm: f64,
}

impl ProjectionCache {
    pub fn output(&self) -> &Array1<f64> {
        &self.normalized
    }

    pub fn zero_norm(&self) -> bool {
        self.norm == 0.0
    }
}

fn check_vector(input: &Array1<f64>, expected: usize, op: &str) -> Result<()> {
    if input.len() != expected {
        return Err(Error::Config(format!(
            "{op} expects input of length {expected}, got {}",
            input.len()
        )));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{op}: non-finite input")));
    }
    Ok(())
}

pub fn projection_forward_cached(
    input: &Array1<f64>,
    config: &ProjectionHeadConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<ProjectionCache> {
    config.validate()?;
    check_vector(input, config.input_dim, "projection_forward")?;
    let w1 = params.get(&format!("{prefix}.fc1.weight"))?;
    let b1 = params.get(&format!("{prefix}.fc1.bias"))?;
    let w2 = params.get(&format!("{prefix}.fc2.weight"))?;
    let b2 = params.get(&format!("{prefix}.fc2.bias"))?;

    let z1 = ops::dense_forward(
        input.view(),
        ops::as_matrix(w1, "fc1.weight")?,
        ops::as_vector(b1, "fc1.bias")?,
    );
    let a1 = ops::relu(&z1);
    let z2 = ops::dense_forward(
        a1.view(),
        ops::as_matrix(w2, "fc2.weight")?,
        ops::as_vector(b2, "fc2.bias")?,
    );
    let (normalized, norm) = ops::l2_normalize_forward(z2.view());
    Ok(ProjectionCache { input: input.clone(), z1, a1, z2, normalized, norm })
}

/// Maps a 1024-d feature vector to a unit-norm embedding. A zero
/// pre-normalization vector is passed through as zeros with the flag set
/// rather than dividing by zero.
pub fn projection_forward(
    input: &Array1<f64>,
    config: &ProjectionHeadConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<ProjectionOutput> {
    let cache = projection_forward_cached(input, config, params, prefix)?;
    Ok(ProjectionOutput { zero_norm: cache.zero_norm(), embedding: cache.normalized })
}

/// Returns the gradient w.r.t. the 1024-d input.
pub fn projection_backward(
    cache: &ProjectionCache,
    dz: &Array1<f64>,
    params: &ParamStore,
    prefix: &str,
    grads: &mut GradStore,
) -> Result<Array1<f64>> {
    let dz2 = ops::l2_normalize_backward(&cache.normalized, cache.norm, dz);

    let w2_name = format!("{prefix}.fc2.weight");
    let w2 = params.get(&w2_name)?;
    let (da1, dw2, db2) =
        ops::dense_backward(cache.a1.view(), ops::as_matrix(w2, "fc2.weight")?, dz2.view());
    grads.accumulate(&w2_name, dw2.into_dyn());
    grads.accumulate(&format!("{prefix}.fc2.bias"), db2.into_dyn());

    let dz1 = ops::relu_backward(&cache.z1, &da1);
    let w1_name = format!("{prefix}.fc1.weight");
    let w1 = params.get(&w1_name)?;
    let (dinput, dw1, db1) =
        ops::dense_backward(cache.input.view(), ops::as_matrix(w1, "fc1.weight")?, dz1.view());
    grads.accumulate(&w1_name, dw1.into_dyn());
    grads.accumulate(&format!("{prefix}.fc1.bias"), db1.into_dyn());
    Ok(dinput)
}

// ---------------------------------------------------------------------------
// Classifier: three dense layers, ReLU between, softmax at the end
// ---------------------------------------------------------------------------

pub fn classifier_init_params(
    store: &mut ParamStore,
    config: &ClassifierConfig,
    prefix: &str,
    seed: u64,
) {
    let mut in_dim = config.input_dim;
    for (k, &out_dim) in config.layer_dims.iter().enumerate() {
        let layer = k + 1;
        init_weight(
            store,
            &format!("{prefix}.fc{layer}.weight"),
            &[in_dim, out_dim],
            in_dim,
            seed,
        );
        init_bias(store, &format!("{prefix}.fc{layer}.bias"), out_dim);
        in_dim = out_dim;
    }
}

pub fn classifier_param_count(config: &ClassifierConfig) -> usize {
    let mut total = 0;
    let mut in_dim = config.input_dim;
    for &out_dim in &config.layer_dims {
        total += in_dim * out_dim + out_dim;
        in_dim = out_dim;
    }
    total
}

#[derive(Debug, Clone)]
pub struct ClassifierCache {
    /// Input to each dense layer.
    inputs: Vec<Array1<f64>>,
    /// Pre-activations of the hidden layers (ReLU masks).
    hidden_pre: Vec<Array1<f64>>,
    logits: Array1<f64>,
    probabilities: Array1<f64>,
}

impl ClassifierCache {
    pub fn probabilities(&self) -> &Array1<f64> {
        &self.probabilities
    }

    pub fn logits(&self) -> &Array1<f64> {
        &self.logits
    }
}

pub fn classifier_forward_cached(
    input: &Array1<f64>,
    config: &ClassifierConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<ClassifierCache> {
    config.validate()?;
    check_vector(input, config.input_dim, "classifier_forward")?;
    let layers = config.layer_dims.len();
    let mut inputs = Vec::with_capacity(layers);
    let mut hidden_pre = Vec::with_capacity(layers - 1);
    let mut current = input.clone();
    let mut logits = None;
    for k in 0..layers {
        let layer = k + 1;
        let w = params.get(&format!("{prefix}.fc{layer}.weight"))?;
        let b = params.get(&format!("{prefix}.fc{layer}.bias"))?;
        let z = ops::dense_forward(
            current.view(),
            ops::as_matrix(w, "classifier weight")?,
            ops::as_vector(b, "classifier bias")?,
        );
        inputs.push(current);
        if k + 1 == layers {
            logits = Some(z);
            break;
        }
        let a = ops::relu(&z);
        hidden_pre.push(z);
        current = a;
    }
    let logits = logits.expect("at least one layer");
    let probabilities = ops::softmax_forward(logits.view());
    Ok(ClassifierCache { inputs, hidden_pre, logits, probabilities })
}

/// Maps a 1024-d feature vector to a probability vector over the classes
/// (entries in [0,1], summing to 1).
pub fn classifier_forward(
    input: &Array1<f64>,
    config: &ClassifierConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<Array1<f64>> {
    Ok(classifier_forward_cached(input, config, params, prefix)?.probabilities)
}

/// Backpropagates a gradient w.r.t. the output probabilities. Returns the
/// gradient w.r.t. the 1024-d input.
pub fn classifier_backward(
    cache: &ClassifierCache,
    dprob: &Array1<f64>,
    config: &ClassifierConfig,
    params: &ParamStore,
    prefix: &str,
    grads: &mut GradStore,
) -> Result<Array1<f64>> {
    let dlogits = ops::softmax_backward(&cache.probabilities, dprob);
    classifier_backward_from_logits(cache, &dlogits, config, params, prefix, grads)
}

/// Backpropagates a gradient w.r.t. the pre-softmax logits (the natural
/// entry point when composing with cross entropy).
pub fn classifier_backward_from_logits(
    cache: &ClassifierCache,
    dlogits: &Array1<f64>,
    config: &ClassifierConfig,
    params: &ParamStore,
    prefix: &str,
    grads: &mut GradStore,
) -> Result<Array1<f64>> {
    let layers = config.layer_dims.len();
    let mut grad = dlogits.clone();
    for k in (0..layers).rev() {
        let layer = k + 1;
        if k + 1 < layers {
            grad = ops::relu_backward(&cache.hidden_pre[k], &grad);
        }
        let w_name = format!("{prefix}.fc{layer}.weight");
        let w = params.get(&w_name)?;
        let (dx, dw, db) = ops::dense_backward(
            cache.inputs[k].view(),
            ops::as_matrix(w, "classifier weight")?,
            grad.view(),
        );
        grads.accumulate(&w_name, dw.into_dyn());
        grads.accumulate(&format!("{prefix}.fc{layer}.bias"), db.into_dyn());
        grad = dx;
    }
    Ok(grad)
}
