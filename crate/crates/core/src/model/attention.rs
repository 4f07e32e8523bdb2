//! Attention gate: a per-location sigmoid attention map computed from a
//! feature map and a deeper gating signal, used to modulate the feature map.
//!
//! Pipeline: 1x1 conv on x and on g (both to `inter_channels`, g resampled
//! bilinearly onto x's grid, the common grid) -> elementwise add -> ReLU ->
//! 1x1 conv to one channel -> sigmoid -> resample of the attention map onto
//! x's grid (an identity here since the map is already computed there) ->
//! combine with x per the configured mode.

use ndarray::{Array1, Array3};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{init_bias, init_weight, GradStore, ParamStore};
use crate::tensor::FeatureMap;

use super::{AttentionGateConfig, CombineMode};

/// Registers gate parameters under `prefix.{conv_x,conv_g,psi}`.
pub fn attention_gate_init_params(
    store: &mut ParamStore,
    config: &AttentionGateConfig,
    prefix: &str,
    seed: u64,
) {
    init_weight(
        store,
        &format!("{prefix}.conv_x.weight"),
        &[config.x_channels, config.inter_channels],
        config.x_channels,
        seed,
    );
    init_bias(store, &format!("{prefix}.conv_x.bias"), config.inter_channels);
    init_weight(
        store,
        &format!("{prefix}.conv_g.weight"),
        &[config.g_channels, config.inter_channels],
        config.g_channels,
        seed,
    );
    init_bias(store, &format!("{prefix}.conv_g.bias"), config.inter_channels);
    init_weight(
        store,
        &format!("{prefix}.psi.weight"),
        &[config.inter_channels, 1],
        config.inter_channels,
        seed,
    );
    init_bias(store, &format!("{prefix}.psi.bias"), 1);
}

pub fn attention_gate_param_count(config: &AttentionGateConfig) -> usize {
    config.x_channels * config.inter_channels
        + config.g_channels * config.inter_channels
        + config.inter_channels
        + config.inter_channels
        + config.inter_channels
        + 1
        + config.inter_channels
        + 1
}

#[derive(Debug, Clone)]
pub struct AttentionGateCache {
    x: Array3<f64>,
    g_resized: Array3<f64>,
    g_shape: (usize, usize, usize),
    sum_pre: Array3<f64>,
    relu_out: Array3<f64>,
    alpha: Array3<f64>,
    combine_mode: CombineMode,
    output: Array3<f64>,
}

impl AttentionGateCache {
    pub fn output(&self) -> &Array3<f64> {
        &self.output
    }

    /// The sigmoid attention coefficients on x's grid (single channel).
    pub fn attention(&self) -> &Array3<f64> {
        &self.alpha
    }
}

fn check_inputs(x: &FeatureMap, g: &FeatureMap, config: &AttentionGateConfig) -> Result<()> {
    config.validate()?;
    if x.channels() != config.x_channels {
        return Err(Error::Config(format!(
            "attention gate expects {} x-channels, got {}",
            config.x_channels,
            x.channels()
        )));
    }
    if g.channels() != config.g_channels {
        return Err(Error::Config(format!(
            "attention gate expects {} g-channels, got {}",
            config.g_channels,
            g.channels()
        )));
    }
    if g.height() > x.height() || g.width() > x.width() {
        return Err(Error::Config(format!(
            "gating signal {}x{} must not exceed the {}x{} feature map",
            g.height(),
            g.width(),
            x.height(),
            x.width()
        )));
    }
    x.ensure_finite("attention_gate_forward x")?;
    g.ensure_finite("attention_gate_forward g")?;
    Ok(())
}

pub fn attention_gate_forward_cached(
    x: &FeatureMap,
    g: &FeatureMap,
    config: &AttentionGateConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<AttentionGateCache> {
    check_inputs(x, g, config)?;
    let (h, w, _) = x.shape();

    let wx = params.get(&format!("{prefix}.conv_x.weight"))?;
    let bx = params.get(&format!("{prefix}.conv_x.bias"))?;
    let wg = params.get(&format!("{prefix}.conv_g.weight"))?;
    let bg = params.get(&format!("{prefix}.conv_g.bias"))?;
    let wp = params.get(&format!("{prefix}.psi.weight"))?;
    let bp = params.get(&format!("{prefix}.psi.bias"))?;

    let theta_x = ops::conv1x1_forward(
        x.values(),
        ops::as_matrix(wx, "conv_x.weight")?,
        ops::as_vector(bx, "conv_x.bias")?,
    );
    let g_resized = ops::resize_bilinear(g.values(), h, w);
    let phi_g = ops::conv1x1_forward(
        &g_resized,
        ops::as_matrix(wg, "conv_g.weight")?,
        ops::as_vector(bg, "conv_g.bias")?,
    );

    let sum_pre = &theta_x + &phi_g;
    let relu_out = ops::relu(&sum_pre);
    let psi_pre = ops::conv1x1_forward(
        &relu_out,
        ops::as_matrix(wp, "psi.weight")?,
        ops::as_vector(bp, "psi.bias")?,
    );
    let alpha = ops::sigmoid(&psi_pre);
    // The attention map already lives on x's grid; the resample to x's grid
    // required by the contract is the identity here.
    let alpha = ops::resize_bilinear(&alpha, h, w);

    let mut output = x.values().clone();
    match config.combine_mode {
        CombineMode::Multiplicative => {
            for ((i, j, c), v) in output.indexed_iter_mut() {
                let _ = c;
                *v *= alpha[[i, j, 0]];
            }
        }
        CombineMode::Additive => {
            for ((i, j, c), v) in output.indexed_iter_mut() {
                let _ = c;
                *v += alpha[[i, j, 0]];
            }
        }
    }
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("attention_gate_forward produced non-finite output".into()));
    }

    Ok(AttentionGateCache {
        x: x.values().clone(),
        g_resized,
        g_shape: g.shape(),
        sum_pre,
        relu_out,
        alpha,
        combine_mode: config.combine_mode,
        output,
    })
}

/// Output shape equals x's shape.
pub fn attention_gate_forward(
    x: &FeatureMap,
    g: &FeatureMap,
    config: &AttentionGateConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<FeatureMap> {
    let cache = attention_gate_forward_cached(x, g, config, params, prefix)?;
    FeatureMap::new(cache.output)
}

/// Returns gradients w.r.t. x and g.
pub fn attention_gate_backward(
    cache: &AttentionGateCache,
    dy: &Array3<f64>,
    params: &ParamStore,
    prefix: &str,
    grads: &mut GradStore,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let (h, w, _) = cache.x.dim();

    // Split dy into the direct x path and the attention-map path.
    let mut dx = Array3::zeros(cache.x.dim());
    let mut dalpha = Array3::zeros((h, w, 1));
    match cache.combine_mode {
        CombineMode::Multiplicative => {
            for ((i, j, c), &g) in dy.indexed_iter() {
                dx[[i, j, c]] = g * cache.alpha[[i, j, 0]];
                dalpha[[i, j, 0]] += g * cache.x[[i, j, c]];
            }
        }
        CombineMode::Additive => {
            dx.assign(dy);
            for ((i, j, _), &g) in dy.indexed_iter() {
                dalpha[[i, j, 0]] += g;
            }
        }
    }

    // Through sigmoid and the psi conv.
    let dpsi_pre = ops::sigmoid_backward(&cache.alpha, &dalpha);
    let wp_name = format!("{prefix}.psi.weight");
    let wp = params.get(&wp_name)?;
    let (drelu, dwp, dbp) =
        ops::conv1x1_backward(&cache.relu_out, ops::as_matrix(wp, "psi.weight")?, &dpsi_pre);
    grads.accumulate(&wp_name, dwp.into_dyn());
    grads.accumulate(&format!("{prefix}.psi.bias"), dbp.into_dyn());

    // Through the ReLU over the summed projections.
    let dsum = ops::relu_backward(&cache.sum_pre, &drelu);

    // x branch.
    let wx_name = format!("{prefix}.conv_x.weight");
    let wx = params.get(&wx_name)?;
    let (dx_branch, dwx, dbx) =
        ops::conv1x1_backward(&cache.x, ops::as_matrix(wx, "conv_x.weight")?, &dsum);
    grads.accumulate(&wx_name, dwx.into_dyn());
    grads.accumulate(&format!("{prefix}.conv_x.bias"), dbx.into_dyn());
    dx += &dx_branch;

    // g branch: conv backward, then through the bilinear resize.
    let wg_name = format!("{prefix}.conv_g.weight");
    let wg = params.get(&wg_name)?;
    let (dg_resized, dwg, dbg) =
        ops::conv1x1_backward(&cache.g_resized, ops::as_matrix(wg, "conv_g.weight")?, &dsum);
    grads.accumulate(&wg_name, dwg.into_dyn());
    grads.accumulate(&format!("{prefix}.conv_g.bias"), dbg.into_dyn());
    let dg = ops::resize_bilinear_backward(cache.g_shape, &dg_resized);

    Ok((dx, dg))
}
