//! The encoder E: stem conv, PEPX stages with optional attention gates,
//! global average pooling and a dense layer to the 1024-d feature vector.
//!
//! Stage layout: the first PEPX block maps the incoming width to the stage
//! width; later blocks are residual (y_j = pepx(y_{j-1}) + y_{j-1}). When a
//! stage carries an attention gate, the stage's first block output (the
//! long-range, low-level features) is gated by the stage's final output and
//! added back: pre_pool = y_n + gate(x = y_1, g = y_n). Every stage ends
//! with 2x max pooling.

use ndarray::{Array1, Array3};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{init_bias, init_weight, GradStore, ParamStore};
use crate::tensor::FeatureMap;

use super::{
    attention_gate_backward, attention_gate_forward_cached, attention_gate_init_params,
    attention_gate_param_count, pepx_backward, pepx_forward_cached, pepx_init_params,
    pepx_param_count, AttentionGateCache, AttentionGateConfig, EncoderConfig, PEPXConfig,
    PepxCache,
};

const STEM_KERNEL: usize = 7;
const STEM_STRIDE: usize = 2;
const STEM_PAD: usize = 3;

fn stage_in_channels(config: &EncoderConfig, stage_idx: usize) -> usize {
    if stage_idx == 0 {
        config.stem_channels
    } else {
        config.stages[stage_idx - 1].out_channels
    }
}

fn block_config(config: &EncoderConfig, stage_idx: usize, block_idx: usize) -> PEPXConfig {
    let w = config.stages[stage_idx].out_channels;
    let in_ch = if block_idx == 0 { stage_in_channels(config, stage_idx) } else { w };
    PEPXConfig::derived(in_ch, w)
}

fn gate_config(config: &EncoderConfig, stage_idx: usize) -> AttentionGateConfig {
    let w = config.stages[stage_idx].out_channels;
    AttentionGateConfig {
        x_channels: w,
        g_channels: w,
        inter_channels: (w / 2).max(1),
        combine_mode: config.combine_mode,
    }
}

/// Registers every encoder parameter under `prefix`.
pub fn encoder_init_params(
    store: &mut ParamStore,
    config: &EncoderConfig,
    prefix: &str,
    seed: u64,
) -> Result<()> {
    config.validate()?;
    let stem_fan_in = STEM_KERNEL * STEM_KERNEL * config.input_channels;
    init_weight(
        store,
        &format!("{prefix}.stem.conv.weight"),
        &[STEM_KERNEL, STEM_KERNEL, config.input_channels, config.stem_channels],
        stem_fan_in,
        seed,
    );
    init_bias(store, &format!("{prefix}.stem.conv.bias"), config.stem_channels);

    for (s, stage) in config.stages.iter().enumerate() {
        let stage_no = s + 1;
        for b in 0..stage.pepx_count {
            let cfg = block_config(config, s, b);
            pepx_init_params(store, &cfg, &format!("{prefix}.stage{stage_no}.pepx{}", b + 1), seed);
        }
        if stage.attention_gate {
            let gate = gate_config(config, s);
            attention_gate_init_params(store, &gate, &format!("{prefix}.stage{stage_no}.gate"), seed);
        }
    }

    let last_w = config.stages.last().expect("validated non-empty").out_channels;
    init_weight(
        store,
        &format!("{prefix}.head.dense.weight"),
        &[last_w, config.feature_dim],
        last_w,
        seed,
    );
    init_bias(store, &format!("{prefix}.head.dense.bias"), config.feature_dim);
    Ok(())
}

/// Total scalar parameter count (weights and biases) as a pure function of
/// the config.
pub fn encoder_param_count(config: &EncoderConfig) -> usize {
    let mut total =
        STEM_KERNEL * STEM_KERNEL * config.input_channels * config.stem_channels
            + config.stem_channels;
    for (s, stage) in config.stages.iter().enumerate() {
        for b in 0..stage.pepx_count {
            total += pepx_param_count(&block_config(config, s, b));
        }
        if stage.attention_gate {
            total += attention_gate_param_count(&gate_config(config, s));
        }
    }
    let last_w = config.stages.last().map(|s| s.out_channels).unwrap_or(0);
    total + last_w * config.feature_dim + config.feature_dim
}

#[derive(Debug, Clone)]
struct StageCache {
    pepx: Vec<PepxCache>,
    gate: Option<AttentionGateCache>,
    pre_pool_shape: (usize, usize, usize),
    pool_idx: Array3<usize>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Array3<f64>,
    stem_pre: Array3<f64>,
    stages: Vec<StageCache>,
    gap_input_shape: (usize, usize, usize),
    dense_input: Array1<f64>,
    dense_pre: Array1<f64>,
    features: Array1<f64>,
}

impl EncoderCache {
    /// The 1024-d encoder output.
    pub fn features(&self) -> &Array1<f64> {
        &self.features
    }
}

pub fn encoder_forward_cached(
    image: &FeatureMap,
    config: &EncoderConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<EncoderCache> {
    config.validate()?;
    let expected = (config.input_height, config.input_width, config.input_channels);
    if image.shape() != expected {
        return Err(Error::Config(format!(
            "encoder expects input {}x{}x{}, got {}x{}x{}",
            expected.0,
            expected.1,
            expected.2,
            image.height(),
            image.width(),
            image.channels()
        )));
    }
    image.ensure_finite("encoder_forward input")?;

    let stem_w = params.get(&format!("{prefix}.stem.conv.weight"))?;
    let stem_b = params.get(&format!("{prefix}.stem.conv.bias"))?;
    let stem_pre = ops::conv2d_forward(
        image.values(),
        stem_w,
        ops::as_vector(stem_b, "stem bias")?,
        STEM_STRIDE,
        STEM_PAD,
    )?;
    let mut current = ops::relu(&stem_pre);

    let mut stages = Vec::with_capacity(config.stages.len());
    for (s, stage) in config.stages.iter().enumerate() {
        let stage_no = s + 1;
        let mut pepx_caches = Vec::with_capacity(stage.pepx_count);
        let mut first_out: Option<Array3<f64>> = None;
        for b in 0..stage.pepx_count {
            let cfg = block_config(config, s, b);
            let block_prefix = format!("{prefix}.stage{stage_no}.pepx{}", b + 1);
            let fm = FeatureMap::new(current)?;
            let cache = pepx_forward_cached(&fm, &cfg, params, &block_prefix)?;
            current = if b == 0 {
                first_out = Some(cache.output().clone());
                cache.output().clone()
            } else {
                cache.output() + fm.values()
            };
            pepx_caches.push(cache);
        }

        let gate_cache = if stage.attention_gate {
            let gate = gate_config(config, s);
            let gate_prefix = format!("{prefix}.stage{stage_no}.gate");
            let x = FeatureMap::new(first_out.clone().expect("at least one block"))?;
            let g = FeatureMap::new(current.clone())?;
            let cache = attention_gate_forward_cached(&x, &g, &gate, params, &gate_prefix)?;
            current = &current + cache.output();
            Some(cache)
        } else {
            None
        };

        let pre_pool_shape = current.dim();
        let (pooled, pool_idx) = ops::maxpool2_forward(&current);
        current = pooled;
        stages.push(StageCache { pepx: pepx_caches, gate: gate_cache, pre_pool_shape, pool_idx });
    }

    let gap_input_shape = current.dim();
    let dense_input = ops::global_avg_pool_forward(&current);
    let head_w = params.get(&format!("{prefix}.head.dense.weight"))?;
    let head_b = params.get(&format!("{prefix}.head.dense.bias"))?;
    let dense_pre = ops::dense_forward(
        dense_input.view(),
        ops::as_matrix(head_w, "head dense weight")?,
        ops::as_vector(head_b, "head dense bias")?,
    );
    let features = ops::relu(&dense_pre);
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("encoder_forward produced non-finite features".into()));
    }

    Ok(EncoderCache {
        input: image.values().clone(),
        stem_pre,
        stages,
        gap_input_shape,
        dense_input,
        dense_pre,
        features,
    })
}

/// Maps an input image to a finite 1024-d feature vector; deterministic
/// given (config, params, input).
pub fn encoder_forward(
    image: &FeatureMap,
    config: &EncoderConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<Array1<f64>> {
    Ok(encoder_forward_cached(image, config, params, prefix)?.features)
}

/// Backpropagates a gradient w.r.t. the feature vector, accumulating every
/// encoder parameter gradient. Returns the gradient w.r.t. the input image.
pub fn encoder_backward(
    cache: &EncoderCache,
    dfeatures: &Array1<f64>,
    config: &EncoderConfig,
    params: &ParamStore,
    prefix: &str,
    grads: &mut GradStore,
) -> Result<Array3<f64>> {
    let dpre = ops::relu_backward(&cache.dense_pre, dfeatures);
    let head_w_name = format!("{prefix}.head.dense.weight");
    let head_w = params.get(&head_w_name)?;
    let (dgap, dw, db) = ops::dense_backward(
        cache.dense_input.view(),
        ops::as_matrix(head_w, "head dense weight")?,
        dpre.view(),
    );
    grads.accumulate(&head_w_name, dw.into_dyn());
    grads.accumulate(&format!("{prefix}.head.dense.bias"), db.into_dyn());

    let mut dcurrent = ops::global_avg_pool_backward(cache.gap_input_shape, &dgap);

    for (s, stage) in config.stages.iter().enumerate().rev() {
        let stage_no = s + 1;
        let sc = &cache.stages[s];
        let dpre_pool = ops::maxpool2_backward(sc.pre_pool_shape, &sc.pool_idx, &dcurrent);

        // Gradient w.r.t. each block output.
        let n = stage.pepx_count;
        let mut dblock: Vec<Option<Array3<f64>>> = vec![None; n];
        let add_into = |slot: &mut Option<Array3<f64>>, grad: &Array3<f64>| match slot {
            Some(acc) => *acc += grad,
            None => *slot = Some(grad.clone()),
        };

        if let Some(gate_cache) = &sc.gate {
            let gate_prefix = format!("{prefix}.stage{stage_no}.gate");
            let (dx_gate, dg_gate) =
                attention_gate_backward(gate_cache, &dpre_pool, params, &gate_prefix, grads)?;
            add_into(&mut dblock[n - 1], &dpre_pool);
            add_into(&mut dblock[n - 1], &dg_gate);
            add_into(&mut dblock[0], &dx_gate);
        } else {
            add_into(&mut dblock[n - 1], &dpre_pool);
        }

        for b in (1..n).rev() {
            let dy = dblock[b].take().expect("populated by later iterations");
            let block_prefix = format!("{prefix}.stage{stage_no}.pepx{}", b + 1);
            let dinput = pepx_backward(&sc.pepx[b], &dy, params, &block_prefix, grads)?;
            // Residual: gradient flows through the block and the skip.
            add_into(&mut dblock[b - 1], &dinput);
            add_into(&mut dblock[b - 1], &dy);
        }

        let dy1 = dblock[0].take().expect("populated above");
        let block_prefix = format!("{prefix}.stage{stage_no}.pepx1");
        dcurrent = pepx_backward(&sc.pepx[0], &dy1, params, &block_prefix, grads)?;
    }

    // Stem.
    let dstem_pre = ops::relu_backward(&cache.stem_pre, &dcurrent);
    let stem_w_name = format!("{prefix}.stem.conv.weight");
    let stem_w = params.get(&stem_w_name)?;
    let (dimage, dw, db) =
        ops::conv2d_backward(&cache.input, stem_w, &dstem_pre, STEM_STRIDE, STEM_PAD);
    grads.accumulate(&stem_w_name, dw);
    grads.accumulate(&format!("{prefix}.stem.conv.bias"), db.into_dyn());
    Ok(dimage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, relative_error};
    use crate::model::StageConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            input_height: 8,
            input_width: 8,
            input_channels: 3,
            stem_channels: 4,
            stages: vec![StageConfig::new(2, 6, true), StageConfig::new(1, 8, false)],
            feature_dim: super::super::FEATURE_DIM,
            combine_mode: super::super::CombineMode::Multiplicative,
        }
    }

    fn random_image(cfg: &EncoderConfig, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Array3::from_shape_fn(
            (cfg.input_height, cfg.input_width, cfg.input_channels),
            |_| rng.random_range(0.0..1.0),
        ))
        .unwrap()
    }

    #[test]
    fn output_length_is_1024_and_deterministic() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        encoder_init_params(&mut store, &cfg, "encoder", 9).unwrap();
        let image = random_image(&cfg, 1);
        let a = encoder_forward(&image, &cfg, &store, "encoder").unwrap();
        let b = encoder_forward(&image, &cfg, &store, "encoder").unwrap();
        assert_eq!(a.len(), 1024);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        encoder_init_params(&mut store, &cfg, "encoder", 9).unwrap();
        let image = FeatureMap::zeros(9, 8, 3).unwrap();
        assert!(matches!(
            encoder_forward(&image, &cfg, &store, "encoder"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn param_count_introspection_matches_store_and_hand_count() {
        // One stage, one block, no gate: every term is hand-checkable.
        let cfg = EncoderConfig {
            input_height: 8,
            input_width: 8,
            input_channels: 3,
            stem_channels: 4,
            stages: vec![StageConfig::new(1, 6, false)],
            feature_dim: super::super::FEATURE_DIM,
            combine_mode: super::super::CombineMode::Multiplicative,
        };
        // Stem: 7*7*3*4 + 4 = 592.
        // PEPX derived(4 -> 6): plan (4->2, 2->4, dw@4, 4->3, 3->6):
        //   weights 8 + 8 + 36 + 12 + 18 = 82, biases 2+4+4+3+6 = 19 -> 101.
        // Head: 6*1024 + 1024 = 7168.
        let expected = 592 + 101 + 7168;
        assert_eq!(encoder_param_count(&cfg), expected);

        let mut store = ParamStore::new();
        encoder_init_params(&mut store, &cfg, "encoder", 0).unwrap();
        assert_eq!(store.scalar_count("encoder."), expected);

        // And for the gated two-stage config.
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        encoder_init_params(&mut store, &cfg, "encoder", 0).unwrap();
        assert_eq!(encoder_param_count(&cfg), store.scalar_count("encoder."));
    }

    #[test]
    fn zero_params_produce_zero_features() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        encoder_init_params(&mut store, &cfg, "encoder", 9).unwrap();
        for (_, v) in store.iter_mut() {
            v.fill(0.0);
        }
        let image = random_image(&cfg, 2);
        let h = encoder_forward(&image, &cfg, &store, "encoder").unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_sum_probe_matches_finite_differences_on_param_sample() {
        let cfg = tiny_config();
        let mut store = ParamStore::new();
        encoder_init_params(&mut store, &cfg, "encoder", 13).unwrap();
        let image = random_image(&cfg, 3);

        let cache = encoder_forward_cached(&image, &cfg, &store, "encoder").unwrap();
        let ones = Array1::from_elem(1024, 1.0);
        let mut grads = GradStore::new();
        encoder_backward(&cache, &ones, &cfg, &store, "encoder", &mut grads).unwrap();

        // Sample roughly 1% of the scalar parameters, at least 2 per tensor
        // group to cover every layer kind.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let names: Vec<String> = store.names().cloned().collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for name in &names {
            let tensor = store.get(name).unwrap().clone();
            let len = tensor.len();
            let samples = (len / 100).max(2).min(len);
            let g = grads.get(name).unwrap();
            for _ in 0..samples {
                let flat_idx = rng.random_range(0..len);
                let mut f = |v: &[f64]| {
                    let mut s = store.clone();
                    let mut t = tensor.clone();
                    t.as_slice_mut().unwrap()[flat_idx] = v[0];
                    s.insert(name.clone(), t);
                    let c = encoder_forward_cached(&image, &cfg, &s, "encoder").unwrap();
                    c.features().sum()
                };
                let x0 = [tensor.as_slice().unwrap()[flat_idx]];
                let n = central_diff(&mut f, &x0, 0, 1e-3);
                analytic.push(g.as_slice().unwrap()[flat_idx]);
                numeric.push(n);
            }
        }
        let rel = relative_error(&analytic, &numeric, 1e-8);
        assert!(rel < 1e-3, "sampled param gradient rel err {rel}");
    }
}
