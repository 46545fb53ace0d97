//! Forward passes assembled on the autodiff tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

use super::{param, JointModelConfig, GROUP_NORM_EPS};

type Bindings = BTreeMap<String, Var>;

/// Pre-activation residual block: GN -> ELU -> conv3 -> GN -> ELU ->
/// conv3, plus an identity skip (1x1x1 projection when channel counts
/// differ).
pub fn residual_block<S: Scalar>(
    g: &mut Graph<S>,
    bindings: &Bindings,
    prefix: &str,
    x: Var,
    cfg: &JointModelConfig,
) -> Result<Var> {
    let eps = S::of_f64(GROUP_NORM_EPS);
    let gn1g = param(bindings, &format!("{}.gn1.gamma", prefix))?;
    let gn1b = param(bindings, &format!("{}.gn1.beta", prefix))?;
    let h = g.group_norm(x, gn1g, gn1b, cfg.groups, eps)?;
    let h = g.elu(h);
    let w1 = param(bindings, &format!("{}.conv1.weight", prefix))?;
    let b1 = param(bindings, &format!("{}.conv1.bias", prefix))?;
    let h = g.conv3d(h, w1, b1, 1, 1)?;
    let gn2g = param(bindings, &format!("{}.gn2.gamma", prefix))?;
    let gn2b = param(bindings, &format!("{}.gn2.beta", prefix))?;
    let h = g.group_norm(h, gn2g, gn2b, cfg.groups, eps)?;
    let h = g.elu(h);
    let w2 = param(bindings, &format!("{}.conv2.weight", prefix))?;
    let b2 = param(bindings, &format!("{}.conv2.bias", prefix))?;
    let h = g.conv3d(h, w2, b2, 1, 1)?;
    let skip = match bindings.get(&format!("{}.proj.weight", prefix)) {
        Some(&pw) => {
            let pb = param(bindings, &format!("{}.proj.bias", prefix))?;
            g.conv3d(x, pw, pb, 1, 0)?
        }
        None => x,
    };
    g.add(h, skip)
}

/// CBAM adapted to 3D: channel attention from pooled descriptors through
/// a shared ELU MLP, then spatial attention from channel mean/max maps
/// through a 7^3 convolution. Both gates are sigmoids.
pub fn cbam3d<S: Scalar>(g: &mut Graph<S>, bindings: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let w1 = param(bindings, &format!("{}.mlp1.weight", prefix))?;
    let b1 = param(bindings, &format!("{}.mlp1.bias", prefix))?;
    let w2 = param(bindings, &format!("{}.mlp2.weight", prefix))?;
    let b2 = param(bindings, &format!("{}.mlp2.bias", prefix))?;

    let avg = g.global_avg_pool(x)?;
    let mx = g.global_max_pool(x)?;
    let mut branches = Vec::with_capacity(2);
    for pooled in [avg, mx] {
        let h = g.linear(pooled, w1, b1)?;
        let h = g.elu(h);
        branches.push(g.linear(h, w2, b2)?);
    }
    let logits = g.add(branches[0], branches[1])?;
    let channel_gate = g.sigmoid(logits);
    let x = g.scale_channels(x, channel_gate)?;

    let maps = g.channel_mean_max(x)?;
    let sw = param(bindings, &format!("{}.spatial.weight", prefix))?;
    let sb = param(bindings, &format!("{}.spatial.bias", prefix))?;
    let smap = g.conv3d(maps, sw, sb, 1, 3)?;
    let spatial_gate = g.sigmoid(smap);
    g.scale_spatial(x, spatial_gate)
}

/// Stem convolution plus `stages` residual stages, each followed by 2x
/// max pooling. Returns the pre-pool stage outputs (skips) and the
/// bottleneck.
pub fn encoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    bindings: &Bindings,
    cfg: &JointModelConfig,
    x: Var,
) -> Result<(Vec<Var>, Var)> {
    let sh = g.value(x).shape().to_vec();
    if sh.len() != 5 || sh[1] != cfg.input_channels {
        return Err(Error::InvalidShape(format!(
            "encoder expects [N,{},D,H,W] input, got {:?}",
            cfg.input_channels, sh
        )));
    }
    let div = 1usize << cfg.stages;
    if sh[2..].iter().any(|&e| e % div != 0) {
        return Err(Error::InvalidShape(format!(
            "spatial extents {:?} must be divisible by 2^{}",
            &sh[2..],
            cfg.stages
        )));
    }
    let sw = param(bindings, "stem.weight")?;
    let sb = param(bindings, "stem.bias")?;
    let mut h = g.conv3d(x, sw, sb, 1, 1)?;
    let mut skips = Vec::with_capacity(cfg.stages);
    for i in 0..cfg.stages {
        h = residual_block(g, bindings, &format!("enc{}", i), h, cfg)?;
        if cfg.use_cbam {
            h = cbam3d(g, bindings, &format!("enc{}.cbam", i), h)?;
        }
        skips.push(h);
        h = g.maxpool3d_2x(h)?;
    }
    Ok((skips, h))
}

/// Per stage: nearest-neighbor 2x upsample, 3^3 convolution halving
/// channels, concat with the matching skip, residual block.
pub fn decoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    bindings: &Bindings,
    cfg: &JointModelConfig,
    skips: &[Var],
    bottleneck: Var,
) -> Result<Var> {
    if skips.len() != cfg.stages {
        return Err(Error::InvalidShape(format!(
            "expected {} skips, got {}",
            cfg.stages,
            skips.len()
        )));
    }
    let mut h = bottleneck;
    for i in (0..cfg.stages).rev() {
        h = g.upsample_nearest_2x(h)?;
        let uw = param(bindings, &format!("dec{}.up.weight", i))?;
        let ub = param(bindings, &format!("dec{}.up.bias", i))?;
        h = g.conv3d(h, uw, ub, 1, 1)?;
        if g.value(h).shape()[2..] != g.value(skips[i]).shape()[2..] {
            return Err(Error::InvalidShape(format!(
                "skip {} spatial extents {:?} do not match decoder stage {:?}",
                i,
                g.value(skips[i]).shape(),
                g.value(h).shape()
            )));
        }
        h = g.concat_channels(h, skips[i])?;
        h = residual_block(g, bindings, &format!("dec{}.block", i), h, cfg)?;
        if cfg.use_cbam {
            h = cbam3d(g, bindings, &format!("dec{}.cbam", i), h)?;
        }
    }
    Ok(h)
}

/// 1x1x1 convolution to a single channel followed by sigmoid.
pub fn segmentation_head<S: Scalar>(g: &mut Graph<S>, bindings: &Bindings, features: Var) -> Result<Var> {
    let w = param(bindings, "seg.weight")?;
    let b = param(bindings, "seg.bias")?;
    let logits = g.conv3d(features, w, b, 1, 0)?;
    Ok(g.sigmoid(logits))
}

/// GAP -> FC+ELU -> dropout -> FC+ELU -> FC -> softmax.
pub fn classification_head<S: Scalar>(
    g: &mut Graph<S>,
    bindings: &Bindings,
    cfg: &JointModelConfig,
    bottleneck: Var,
    training: bool,
    dropout_seed: u64,
) -> Result<Var> {
    let pooled = g.global_avg_pool(bottleneck)?;
    let w1 = param(bindings, "cls.fc1.weight")?;
    let b1 = param(bindings, "cls.fc1.bias")?;
    let h = g.linear(pooled, w1, b1)?;
    let h = g.elu(h);
    let h = g.dropout(h, cfg.dropout_rate, training, dropout_seed)?;
    let w2 = param(bindings, "cls.fc2.weight")?;
    let b2 = param(bindings, "cls.fc2.bias")?;
    let h = g.linear(h, w2, b2)?;
    let h = g.elu(h);
    let wo = param(bindings, "cls.out.weight")?;
    let bo = param(bindings, "cls.out.bias")?;
    let logits = g.linear(h, wo, bo)?;
    g.softmax(logits)
}

/// One shared encoder pass feeding both the decoder + segmentation head
/// and the classification head.
pub fn joint_forward<S: Scalar>(
    g: &mut Graph<S>,
    bindings: &Bindings,
    cfg: &JointModelConfig,
    x: Var,
    training: bool,
    dropout_seed: u64,
) -> Result<(Var, Var)> {
    let (skips, bottleneck) = encoder_forward(g, bindings, cfg, x)?;
    let features = decoder_forward(g, bindings, cfg, &skips, bottleneck)?;
    let mask_probs = segmentation_head(g, bindings, features)?;
    let class_probs = classification_head(g, bindings, cfg, bottleneck, training, dropout_seed)?;
    Ok((mask_probs, class_probs))
}

/// Encoder plus 2-class classification head (no decoder).
pub fn nonnodule_recognizer_forward<S: Scalar>(
    g: &mut Graph<S>,
    bindings: &Bindings,
    cfg_binary: &JointModelConfig,
    x: Var,
    training: bool,
    dropout_seed: u64,
) -> Result<Var> {
    if cfg_binary.texture_classes != 2 {
        return Err(Error::InvalidConfig("non-nodule recognizer requires texture_classes = 2".into()));
    }
    let (_, bottleneck) = encoder_forward(g, bindings, cfg_binary, x)?;
    classification_head(g, bindings, cfg_binary, bottleneck, training, dropout_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind_parameters, init_parameters};
    use crate::tensor::{fill_uniform, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_cfg() -> JointModelConfig {
        JointModelConfig { base_features: 8, groups: 8, ..Default::default() }
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(shape);
        fill_uniform(&mut t, &mut rng, -1.0, 1.0);
        t
    }

    #[test]
    fn encoder_shape_ladder_desk_scale() {
        let cfg = desk_cfg();
        let params = init_parameters::<f32>(&cfg, 0, false).unwrap();
        let mut g = Graph::new();
        let bindings = bind_parameters(&mut g, &params, false);
        let x = g.leaf(random_input(&[1, 1, 32, 32, 32], 1), false);
        let (skips, bottleneck) = encoder_forward(&mut g, &bindings, &cfg, x).unwrap();
        let expect_ch = [8, 16, 32, 64, 128];
        let expect_sp = [32, 16, 8, 4, 2];
        for (i, &s) in skips.iter().enumerate() {
            assert_eq!(g.value(s).shape(), &[1, expect_ch[i], expect_sp[i], expect_sp[i], expect_sp[i]]);
        }
        assert_eq!(g.value(bottleneck).shape(), &[1, 128, 1, 1, 1]);
    }

    #[test]
    fn encoder_rejects_indivisible_input() {
        let cfg = desk_cfg();
        let params = init_parameters::<f32>(&cfg, 0, false).unwrap();
        let mut g = Graph::new();
        let bindings = bind_parameters(&mut g, &params, false);
        let x = g.leaf(Tensor::zeros(&[1, 1, 24, 24, 24]), false);
        assert!(encoder_forward(&mut g, &bindings, &cfg, x).is_err());
    }

    #[test]
    fn residual_block_zeroed_second_conv_is_identity() {
        let cfg = JointModelConfig { base_features: 8, groups: 4, stages: 2, ..Default::default() };
        let mut params = init_parameters::<f32>(&cfg, 3, false).unwrap();
        // enc0 maps 8 -> 8 channels, so the skip is the identity
        params.insert("enc0.conv2.weight".into(), Tensor::zeros(&[8, 8, 3, 3, 3]));
        params.insert("enc0.conv2.bias".into(), Tensor::zeros(&[8]));
        let mut g = Graph::new();
        let bindings = bind_parameters(&mut g, &params, false);
        let input = random_input(&[1, 8, 4, 4, 4], 7);
        let x = g.leaf(input.clone(), false);
        let out = residual_block(&mut g, &bindings, "enc0", x, &cfg).unwrap();
        assert_eq!(g.value(out).data(), input.data());
    }

    #[test]
    fn joint_forward_shape_contract() {
        let cfg = desk_cfg();
        let params = init_parameters::<f32>(&cfg, 0, false).unwrap();
        let mut g = Graph::new();
        let bindings = bind_parameters(&mut g, &params, false);
        let x = g.leaf(random_input(&[1, 1, 32, 32, 32], 2), false);
        let (mask, class) = joint_forward(&mut g, &bindings, &cfg, x, false, 0).unwrap();
        assert_eq!(g.value(mask).shape(), &[1, 1, 32, 32, 32]);
        assert_eq!(g.value(class).shape(), &[1, 3]);
        assert!(g.value(mask).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let row_sum: f32 = g.value(class).data().iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = JointModelConfig { base_features: 4, groups: 2, stages: 2, ..Default::default() };
        let params = init_parameters::<f32>(&cfg, 0, false).unwrap();
        let run = || {
            let mut g = Graph::new();
            let bindings = bind_parameters(&mut g, &params, false);
            let x = g.leaf(random_input(&[1, 1, 8, 8, 8], 2), false);
            let (mask, class) = joint_forward(&mut g, &bindings, &cfg, x, false, 0).unwrap();
            (g.value(mask).clone(), g.value(class).clone())
        };
        let (m1, c1) = run();
        let (m2, c2) = run();
        assert_eq!(m1, m2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn class_probs_independent_of_decoder_weights() {
        let cfg = JointModelConfig { base_features: 4, groups: 2, stages: 2, ..Default::default() };
        let input = random_input(&[1, 1, 8, 8, 8], 5);
        let mut params = init_parameters::<f32>(&cfg, 0, false).unwrap();
        let run = |params: &crate::nn::Parameters<f32>| {
            let mut g = Graph::new();
            let bindings = bind_parameters(&mut g, params, false);
            let x = g.leaf(input.clone(), false);
            let (_, class) = joint_forward(&mut g, &bindings, &cfg, x, false, 0).unwrap();
            g.value(class).clone()
        };
        let before = run(&params);
        params.get_mut("dec1.up.weight").unwrap().data_mut()[0] += 10.0;
        let after = run(&params);
        assert_eq!(before, after);
    }

    #[test]
    fn classification_head_uniform_with_zero_final_layer() {
        let cfg = JointModelConfig { base_features: 4, groups: 2, stages: 2, ..Default::default() };
        let mut params = init_parameters::<f32>(&cfg, 0, false).unwrap();
        params.insert("cls.out.weight".into(), Tensor::zeros(&[32, 3]));
        params.insert("cls.out.bias".into(), Tensor::zeros(&[3]));
        let mut g = Graph::new();
        let bindings = bind_parameters(&mut g, &params, false);
        let x = g.leaf(random_input(&[2, 8, 2, 2, 2], 4), false);
        let probs = classification_head(&mut g, &bindings, &cfg, x, false, 0).unwrap();
        for &p in g.value(probs).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cbam_gates_stay_in_unit_interval() {
        let cfg = JointModelConfig { base_features: 4, groups: 2, stages: 2, use_cbam: true, ..Default::default() };
        let params = init_parameters::<f32>(&cfg, 0, false).unwrap();
        let mut g = Graph::new();
        let bindings = bind_parameters(&mut g, &params, false);
        let input = random_input(&[1, 4, 4, 4, 4], 9);
        let x = g.leaf(input.clone(), false);
        let out = cbam3d(&mut g, &bindings, "enc0.cbam", x).unwrap();
        // |out| <= |x| elementwise because both gates lie in (0, 1)
        for (&o, &i) in g.value(out).data().iter().zip(input.data()) {
            assert!(o.abs() <= i.abs() + 1e-6);
        }
    }

    #[test]
    fn cbam_saturated_gates_pass_input_through() {
        let cfg = JointModelConfig { base_features: 4, groups: 2, stages: 2, use_cbam: true, ..Default::default() };
        let mut params = init_parameters::<f32>(&cfg, 0, false).unwrap();
        // force both attention logit paths to large positive values
        params.insert("enc0.cbam.mlp2.weight".into(), Tensor::zeros(&[1, 4]));
        params.insert("enc0.cbam.mlp2.bias".into(), Tensor::full(&[4], 50.0));
        params.insert("enc0.cbam.spatial.weight".into(), Tensor::zeros(&[1, 2, 7, 7, 7]));
        params.insert("enc0.cbam.spatial.bias".into(), Tensor::full(&[1], 50.0));
        let mut g = Graph::new();
        let bindings = bind_parameters(&mut g, &params, false);
        let input = random_input(&[1, 4, 4, 4, 4], 11);
        let x = g.leaf(input.clone(), false);
        let out = cbam3d(&mut g, &bindings, "enc0.cbam", x).unwrap();
        for (&o, &i) in g.value(out).data().iter().zip(input.data()) {
            assert!((o - i).abs() < 1e-5);
        }
    }

    #[test]
    fn recognizer_rows_sum_to_one() {
        let cfg = JointModelConfig { base_features: 4, groups: 2, stages: 2, texture_classes: 2, ..Default::default() };
        let params = init_parameters::<f32>(&cfg, 0, true).unwrap();
        let mut g = Graph::new();
        let bindings = bind_parameters(&mut g, &params, false);
        let x = g.leaf(random_input(&[3, 1, 8, 8, 8], 6), false);
        let probs = nonnodule_recognizer_forward(&mut g, &bindings, &cfg, x, false, 0).unwrap();
        for row in g.value(probs).data().chunks(2) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
