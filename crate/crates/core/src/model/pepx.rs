//! The PEPX block: project, expand depthwise, project, extend.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{init_bias, init_weight, GradStore, ParamStore};
use crate::tensor::FeatureMap;

use super::PEPXConfig;

/// Channel widths of the five convolutions, in order: (in -> proj1),
/// (proj1 -> expand), depthwise at expand, (expand -> proj2),
/// (proj2 -> out).
fn layer_plan(config: &PEPXConfig) -> [(usize, usize); 5] {
    [
        (config.in_channels, config.proj1_channels),
        (config.proj1_channels, config.expand_channels),
        (config.expand_channels, config.expand_channels),
        (config.expand_channels, config.proj2_channels),
        (config.proj2_channels, config.out_channels),
    ]
}

/// Registers the block's parameters under `prefix.conv{1..5}`.
pub fn pepx_init_params(store: &mut ParamStore, config: &PEPXConfig, prefix: &str, seed: u64) {
    let plan = layer_plan(config);
    for (k, (cin, cout)) in plan.iter().enumerate() {
        let conv = k + 1;
        let wname = format!("{prefix}.conv{conv}.weight");
        let bname = format!("{prefix}.conv{conv}.bias");
        if conv == 3 {
            // Depthwise 3x3: one 3x3 kernel per channel.
            init_weight(store, &wname, &[3, 3, *cin], 9, seed);
            init_bias(store, &bname, *cin);
        } else {
            init_weight(store, &wname, &[*cin, *cout], *cin, seed);
            init_bias(store, &bname, *cout);
        }
    }
}

/// Weight scalars only (no biases), as enumerated over the five tensors.
pub fn pepx_weight_count(config: &PEPXConfig) -> usize {
    let plan = layer_plan(config);
    plan.iter()
        .enumerate()
        .map(|(k, (cin, cout))| if k == 2 { 9 * cin } else { cin * cout })
        .sum()
}

/// Total scalar parameters including biases.
pub fn pepx_param_count(config: &PEPXConfig) -> usize {
    let plan = layer_plan(config);
    let biases: usize = plan.iter().map(|(_, cout)| *cout).sum();
    pepx_weight_count(config) + biases
}

#[derive(Debug, Clone)]
pub struct PepxCache {
    /// Input to each of the five convolutions.
    inputs: [Array3<f64>; 5],
    /// Pre-activation output of each convolution (ReLU masks).
    pre_acts: [Array3<f64>; 5],
    output: Array3<f64>,
}

impl PepxCache {
    pub fn output(&self) -> &Array3<f64> {
        &self.output
    }
}

fn check_input(x: &FeatureMap, config: &PEPXConfig) -> Result<()> {
    config.validate()?;
    if x.channels() != config.in_channels {
        return Err(Error::Config(format!(
            "PEPX expects {} input channels, got {}",
            config.in_channels,
            x.channels()
        )));
    }
    x.ensure_finite("pepx_forward input")?;
    Ok(())
}

/// Forward pass keeping the caches needed for [`pepx_backward`].
pub fn pepx_forward_cached(
    x: &FeatureMap,
    config: &PEPXConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<PepxCache> {
    check_input(x, config)?;
    let mut inputs: Vec<Array3<f64>> = Vec::with_capacity(5);
    let mut pre_acts: Vec<Array3<f64>> = Vec::with_capacity(5);
    let mut current = x.values().clone();
    for conv in 1..=5usize {
        let w = params.get(&format!("{prefix}.conv{conv}.weight"))?;
        let b = params.get(&format!("{prefix}.conv{conv}.bias"))?;
        let bias = ops::as_vector(b, &format!("{prefix}.conv{conv}.bias"))?;
        let z = if conv == 3 {
            let kernel = ops::as_rank3(w, &format!("{prefix}.conv{conv}.weight"))?;
            ops::dwconv3x3_forward(&current, kernel, bias)
        } else {
            let weight = ops::as_matrix(w, &format!("{prefix}.conv{conv}.weight"))?;
            ops::conv1x1_forward(&current, weight, bias)
        };
        let a = ops::relu(&z);
        inputs.push(current);
        pre_acts.push(z);
        current = a;
    }
    let output = current;
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("pepx_forward produced non-finite output".into()));
    }
    Ok(PepxCache {
        inputs: inputs.try_into().expect("five layers"),
        pre_acts: pre_acts.try_into().expect("five layers"),
        output,
    })
}

/// Spatial dims are preserved; channels become `config.out_channels`.
pub fn pepx_forward(
    x: &FeatureMap,
    config: &PEPXConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<FeatureMap> {
    let cache = pepx_forward_cached(x, config, params, prefix)?;
    FeatureMap::new(cache.output)
}

/// Propagates `dy` back through the block, accumulating parameter gradients
/// under the block's prefix. Returns the gradient w.r.t. the block input.
pub fn pepx_backward(
    cache: &PepxCache,
    dy: &Array3<f64>,
    params: &ParamStore,
    prefix: &str,
    grads: &mut GradStore,
) -> Result<Array3<f64>> {
    let mut grad = dy.clone();
    for conv in (1..=5usize).rev() {
        let i = conv - 1;
        grad = ops::relu_backward(&cache.pre_acts[i], &grad);
        let wname = format!("{prefix}.conv{conv}.weight");
        let bname = format!("{prefix}.conv{conv}.bias");
        let w = params.get(&wname)?;
        if conv == 3 {
            let kernel = ops::as_rank3(w, &wname)?;
            let (dx, dk, db) = ops::dwconv3x3_backward(&cache.inputs[i], kernel, &grad);
            grads.accumulate(&wname, dk.into_dyn());
            grads.accumulate(&bname, db.into_dyn());
            grad = dx;
        } else {
            let weight = ops::as_matrix(w, &wname)?;
            let (dx, dw, db) = ops::conv1x1_backward(&cache.inputs[i], weight, &grad);
            grads.accumulate(&wname, dw.into_dyn());
            grads.accumulate(&bname, db.into_dyn());
            grad = dx;
        }
    }
    Ok(grad)
}
