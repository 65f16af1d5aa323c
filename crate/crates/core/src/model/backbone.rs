//! Encoder backbones with a fixed insertion boundary before the last stage.

use super::layers::{BatchNorm2d, Conv2dLayer, Linear};
use crate::tensor::{Arr, Var};
use rand_chacha::ChaCha8Rng;

/// Three hidden layers for vector tasks; the insertion point sits before the
/// final hidden layer.
pub struct MlpBackbone {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    hidden: usize,
}

impl MlpBackbone {
    pub fn new(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpBackbone {
            l1: Linear::new("backbone.l1", input_dim, hidden, rng),
            l2: Linear::new("backbone.l2", hidden, hidden, rng),
            l3: Linear::new("backbone.l3", hidden, hidden, rng),
            hidden,
        }
    }

    /// `[B, input_dim] -> [B, hidden, 1, 1]` mid features.
    pub fn stage_pre(&self, x: &Var) -> Var {
        let b = x.shape()[0];
        let h = self.l2.forward(&self.l1.forward(x).relu()).relu();
        h.reshape(&[b, self.hidden, 1, 1])
    }

    /// `[B', hidden, 1, 1] -> [B', hidden]` post-stage features (pooling over
    /// the trivial 1x1 map is the identity).
    pub fn stage_post(&self, mid: &Var, _training: bool) -> Var {
        let b = mid.shape()[0];
        self.l3.forward(&mid.reshape(&[b, self.hidden])).relu()
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        [&self.l1, &self.l2, &self.l3]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

struct BasicBlock {
    conv1: Conv2dLayer,
    bn1: BatchNorm2d,
    conv2: Conv2dLayer,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2dLayer, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2dLayer::new(
                    &format!("{name}.down.conv"),
                    in_ch,
                    out_ch,
                    1,
                    stride,
                    0,
                    false,
                    rng,
                ),
                BatchNorm2d::new(&format!("{name}.down.bn"), out_ch),
            )
        });
        BasicBlock {
            conv1: Conv2dLayer::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), out_ch),
            conv2: Conv2dLayer::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), out_ch),
            shortcut,
        }
    }

    fn forward(&self, x: &Var, training: bool) -> Var {
        let out = self.bn1.forward(&self.conv1.forward(x), training).relu();
        let out = self.bn2.forward(&self.conv2.forward(&out), training);
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x), training),
            None => x.clone(),
        };
        out.add(&skip).relu()
    }

    fn params(&self) -> Vec<(String, Var)> {
        let mut out = self.conv1.params();
        out.extend(self.bn1.params());
        out.extend(self.conv2.params());
        out.extend(self.bn2.params());
        if let Some((conv, bn)) = &self.shortcut {
            out.extend(conv.params());
            out.extend(bn.params());
        }
        out
    }

    fn bn_state(&self) -> Vec<(String, Arr)> {
        let mut out = self.bn1.state();
        out.extend(self.bn2.state());
        if let Some((_, bn)) = &self.shortcut {
            out.extend(bn.state());
        }
        out
    }

    fn load_bn_state(&self, name: &str, value: &Arr) -> bool {
        self.bn1.load_state(name, value.clone())
            || self.bn2.load_state(name, value.clone())
            || self
                .shortcut
                .as_ref()
                .is_some_and(|(_, bn)| bn.load_state(name, value.clone()))
    }
}

/// Small residual CNN in the classic 3-stage 32x32 layout
/// (width w / 2w / 4w, stride 2 between stages). `blocks_per_stage = 5`
/// reproduces the 32-layer variant; smaller values keep desk-scale runs fast.
/// The insertion point sits between stage 2 and stage 3.
pub struct ResnetBackbone {
    stem_conv: Conv2dLayer,
    stem_bn: BatchNorm2d,
    stage1: Vec<BasicBlock>,
    stage2: Vec<BasicBlock>,
    stage3: Vec<BasicBlock>,
    width: usize,
}

impl ResnetBackbone {
    pub fn new(in_channels: usize, width: usize, blocks_per_stage: usize, rng: &mut ChaCha8Rng) -> Self {
        let stage = |idx: usize, in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng| {
            (0..blocks_per_stage)
                .map(|b| {
                    BasicBlock::new(
                        &format!("backbone.stage{idx}.block{b}"),
                        if b == 0 { in_ch } else { out_ch },
                        out_ch,
                        if b == 0 { stride } else { 1 },
                        rng,
                    )
                })
                .collect::<Vec<_>>()
        };
        ResnetBackbone {
            stem_conv: Conv2dLayer::new("backbone.stem.conv", in_channels, width, 3, 1, 1, false, rng),
            stem_bn: BatchNorm2d::new("backbone.stem.bn", width),
            stage1: stage(1, width, width, 1, rng),
            stage2: stage(2, width, 2 * width, 2, rng),
            stage3: stage(3, 2 * width, 4 * width, 2, rng),
            width,
        }
    }

    /// Channels at the insertion point.
    pub fn mid_channels(&self) -> usize {
        2 * self.width
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.width
    }

    /// Stem + stages 1-2: `[B, C, H, W] -> [B, 2w, H/2, W/2]`.
    pub fn stage_pre(&self, x: &Var, training: bool) -> Var {
        let mut out = self
            .stem_bn
            .forward(&self.stem_conv.forward(x), training)
            .relu();
        for block in self.stage1.iter().chain(&self.stage2) {
            out = block.forward(&out, training);
        }
        out
    }

    /// Stage 3 + global average pooling: `[B', 2w, h, w] -> [B', 4w]`.
    pub fn stage_post(&self, mid: &Var, training: bool) -> Var {
        let mut out = mid.clone();
        for block in &self.stage3 {
            out = block.forward(&out, training);
        }
        out.mean_axes(&[2, 3], false)
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        let mut out = self.stem_conv.params();
        out.extend(self.stem_bn.params());
        for block in self.stage1.iter().chain(&self.stage2).chain(&self.stage3) {
            out.extend(block.params());
        }
        out
    }

    pub fn bn_state(&self) -> Vec<(String, Arr)> {
        let mut out = self.stem_bn.state();
        for block in self.stage1.iter().chain(&self.stage2).chain(&self.stage3) {
            out.extend(block.bn_state());
        }
        out
    }

    pub fn load_bn_state(&self, name: &str, value: &Arr) -> bool {
        self.stem_bn.load_state(name, value.clone())
            || self
                .stage1
                .iter()
                .chain(&self.stage2)
                .chain(&self.stage3)
                .any(|b| b.load_bn_state(name, value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    #[test]
    fn mlp_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = MlpBackbone::new(8, 16, &mut rng);
        let x = Var::constant(ArrayD::zeros(IxDyn(&[4, 8])));
        let mid = mlp.stage_pre(&x);
        assert_eq!(mid.shape(), vec![4, 16, 1, 1]);
        let feat = mlp.stage_post(&mid, true);
        assert_eq!(feat.shape(), vec![4, 16]);
    }

    #[test]
    fn resnet_shapes_and_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ResnetBackbone::new(3, 4, 1, &mut rng);
        let data: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Var::constant(ArrayD::from_shape_vec(IxDyn(&[2, 3, 8, 8]), data).unwrap());
        let mid = net.stage_pre(&x, true);
        assert_eq!(mid.shape(), vec![2, 8, 4, 4]);
        let feat = net.stage_post(&mid, true);
        assert_eq!(feat.shape(), vec![2, 16]);
        assert!(feat.is_finite());
    }
}
