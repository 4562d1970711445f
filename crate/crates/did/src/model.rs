//! The differentiable networks: backbone G, the two attention networks
//! A_df and A_dom, classifier heads C and C-bar, and the statistic network T
//! of the decorrelation module.
//!
//! Forward functions build onto a [`Graph`] and take registered node handles,
//! so the same code serves training (with backward) and inference.

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{DidError, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{ConvNodes, ConvParams, DwConvParams, Ledger, LinearParams, PReluParams};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Desk-scale CNN backbone: one stride-2 conv block per channel width, each
/// followed by a PReLU. The spatial reduction factor is 2^len(widths).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub channel_widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 64,
            channel_widths: vec![16, 32, 64, 64],
        }
    }
}

impl BackboneConfig {
    pub fn reduction(&self) -> usize {
        1 << self.channel_widths.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channel_widths.last().expect("validated: nonempty widths")
    }

    /// Spatial side length of the feature maps.
    pub fn feature_size(&self) -> usize {
        self.input_size / self.reduction()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_widths.is_empty() {
            return Err(DidError::Config("channel_widths must be nonempty".into()));
        }
        if self.input_size % self.reduction() != 0 || self.feature_size() == 0 {
            return Err(DidError::Config(format!(
                "input_size {} must be a positive multiple of the reduction factor {}",
                self.input_size,
                self.reduction()
            )));
        }
        Ok(())
    }
}

/// Full model shape: backbone plus the number of fake domains k (the domain
/// classifier emits k+1 logits).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fake_domains: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, fake_domains: usize) -> Result<Self> {
        backbone.validate()?;
        if fake_domains == 0 {
            return Err(DidError::Config("fake_domains must be at least 1".into()));
        }
        Ok(ModelConfig {
            backbone,
            fake_domains,
        })
    }

    pub fn domain_classes(&self) -> usize {
        self.fake_domains + 1
    }
}

/// The six parameter groups. Group membership is disjoint by construction:
/// each network owns its tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Theta,
    Psi,
    PhiDom,
    PhiT,
    Omega,
    OmegaBar,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Theta,
        Group::Psi,
        Group::PhiDom,
        Group::PhiT,
        Group::Omega,
        Group::OmegaBar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Theta => "theta",
            Group::Psi => "psi",
            Group::PhiDom => "phi_dom",
            Group::PhiT => "phi_t",
            Group::Omega => "omega",
            Group::OmegaBar => "omega_bar",
        }
    }

    pub fn from_name(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == name)
    }
}

#[derive(Clone)]
pub struct ConvBlock {
    pub conv: ConvParams,
    pub act: PReluParams,
}

#[derive(Clone)]
pub struct BackboneParams {
    pub blocks: Vec<ConvBlock>,
}

impl BackboneParams {
    pub fn new(rng: &mut ChaCha12Rng, config: &BackboneConfig) -> Self {
        let mut blocks = Vec::new();
        let mut in_c = 1;
        for &out_c in &config.channel_widths {
            blocks.push(ConvBlock {
                conv: ConvParams::new(rng, out_c, in_c, 3, 3),
                act: PReluParams::new(out_c),
            });
            in_c = out_c;
        }
        BackboneParams { blocks }
    }

    pub fn register(&self, g: &mut Graph, ledger: &mut Ledger) -> BackboneNodes {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, blk)| {
                let conv = blk.conv.register(g, &format!("theta/block{i}/conv"), ledger);
                let act = blk.act.register(g, &format!("theta/block{i}/act"), ledger);
                (conv, act)
            })
            .collect();
        BackboneNodes { blocks }
    }

    fn named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.conv.named(&format!("theta/block{i}/conv"), out);
            blk.act.named(&format!("theta/block{i}/act"), out);
        }
    }

    fn named_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.conv.named_mut(&format!("theta/block{i}/conv"), out);
            blk.act.named_mut(&format!("theta/block{i}/act"), out);
        }
    }
}

pub struct BackboneNodes {
    pub blocks: Vec<(ConvNodes, NodeId)>,
}

/// Dual-branch attention. Channel branch: spatial GAP, spatial GMP, and S-ADP
/// (channel-wise spatial conv + sum pool), concatenated and mapped by two 1x1
/// layers with a PReLU between. Spatial branch: cross-channel GAP, GMP, and
/// C-ADP (1x1 conv to one channel), concatenated and mapped by a 3x3 conv to
/// one map. The two branches fuse by broadcast-add under a sigmoid.
#[derive(Clone)]
pub struct AttentionParams {
    pub sadp: DwConvParams,
    pub ch_fc1: LinearParams,
    pub ch_act: PReluParams,
    pub ch_fc2: LinearParams,
    pub cadp: ConvParams,
    pub sp_conv: ConvParams,
}

impl AttentionParams {
    pub fn new(rng: &mut ChaCha12Rng, c: usize) -> Self {
        AttentionParams {
            sadp: DwConvParams::new(rng, c, 3, 3),
            ch_fc1: LinearParams::new(rng, c, 3 * c),
            ch_act: PReluParams::new(c),
            ch_fc2: LinearParams::new(rng, c, c),
            cadp: ConvParams::new(rng, 1, c, 1, 1),
            sp_conv: ConvParams::new(rng, 1, 3, 3, 3),
        }
    }

    pub fn register(&self, g: &mut Graph, group: &str, ledger: &mut Ledger) -> AttentionNodes {
        AttentionNodes {
            sadp: self.sadp.register(g, &format!("{group}/sadp"), ledger),
            ch_fc1: self.ch_fc1.register(g, &format!("{group}/ch_fc1"), ledger),
            ch_act: self.ch_act.register(g, &format!("{group}/ch_act"), ledger),
            ch_fc2: self.ch_fc2.register(g, &format!("{group}/ch_fc2"), ledger),
            cadp: self.cadp.register(g, &format!("{group}/cadp"), ledger),
            sp_conv: self.sp_conv.register(g, &format!("{group}/sp_conv"), ledger),
        }
    }

    fn named<'a>(&'a self, group: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.sadp.named(&format!("{group}/sadp"), out);
        self.ch_fc1.named(&format!("{group}/ch_fc1"), out);
        self.ch_act.named(&format!("{group}/ch_act"), out);
        self.ch_fc2.named(&format!("{group}/ch_fc2"), out);
        self.cadp.named(&format!("{group}/cadp"), out);
        self.sp_conv.named(&format!("{group}/sp_conv"), out);
    }

    fn named_mut<'a>(&'a mut self, group: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.sadp.named_mut(&format!("{group}/sadp"), out);
        self.ch_fc1.named_mut(&format!("{group}/ch_fc1"), out);
        self.ch_act.named_mut(&format!("{group}/ch_act"), out);
        self.ch_fc2.named_mut(&format!("{group}/ch_fc2"), out);
        self.cadp.named_mut(&format!("{group}/cadp"), out);
        self.sp_conv.named_mut(&format!("{group}/sp_conv"), out);
    }
}

pub struct AttentionNodes {
    pub sadp: ConvNodes,
    pub ch_fc1: ConvNodes,
    pub ch_act: NodeId,
    pub ch_fc2: ConvNodes,
    pub cadp: ConvNodes,
    pub sp_conv: ConvNodes,
}

/// Two-layer perceptron head over globally pooled features.
#[derive(Clone)]
pub struct HeadParams {
    pub fc1: LinearParams,
    pub act: PReluParams,
    pub fc2: LinearParams,
}

impl HeadParams {
    pub fn new(rng: &mut ChaCha12Rng, c: usize, out: usize) -> Self {
        HeadParams {
            fc1: LinearParams::new(rng, c, c),
            act: PReluParams::new(c),
            fc2: LinearParams::new(rng, out, c),
        }
    }

    pub fn register(&self, g: &mut Graph, group: &str, ledger: &mut Ledger) -> HeadNodes {
        HeadNodes {
            fc1: self.fc1.register(g, &format!("{group}/fc1"), ledger),
            act: self.act.register(g, &format!("{group}/act"), ledger),
            fc2: self.fc2.register(g, &format!("{group}/fc2"), ledger),
        }
    }

    fn named<'a>(&'a self, group: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.fc1.named(&format!("{group}/fc1"), out);
        self.act.named(&format!("{group}/act"), out);
        self.fc2.named(&format!("{group}/fc2"), out);
    }

    fn named_mut<'a>(&'a mut self, group: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.fc1.named_mut(&format!("{group}/fc1"), out);
        self.act.named_mut(&format!("{group}/act"), out);
        self.fc2.named_mut(&format!("{group}/fc2"), out);
    }
}

pub struct HeadNodes {
    pub fc1: ConvNodes,
    pub act: NodeId,
    pub fc2: ConvNodes,
}

/// Statistic network T: three 3x3 conv+ReLU layers over the channel-wise
/// concatenation of a feature pair, global average pool, and a final FC.
#[derive(Clone)]
pub struct StatisticParams {
    pub convs: Vec<ConvParams>,
    pub fc: LinearParams,
}

impl StatisticParams {
    /// `pair_channels` is the channel count of the concatenated pair (2c).
    pub fn new(rng: &mut ChaCha12Rng, pair_channels: usize, widths: &[usize; 3]) -> Self {
        let mut convs = Vec::new();
        let mut in_c = pair_channels;
        for &w in widths {
            convs.push(ConvParams::new(rng, w, in_c, 3, 3));
            in_c = w;
        }
        StatisticParams {
            convs,
            fc: LinearParams::new(rng, 1, in_c),
        }
    }

    pub fn default_widths(c: usize) -> [usize; 3] {
        let half = (c / 2).max(4);
        [c.max(4), half, half]
    }

    pub fn register(&self, g: &mut Graph, ledger: &mut Ledger) -> StatisticNodes {
        StatisticNodes {
            convs: self
                .convs
                .iter()
                .enumerate()
                .map(|(i, c)| c.register(g, &format!("phi_t/conv{i}"), ledger))
                .collect(),
            fc: self.fc.register(g, "phi_t/fc", ledger),
        }
    }

    fn named<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.named(&format!("phi_t/conv{i}"), out);
        }
        self.fc.named("phi_t/fc", out);
    }

    fn named_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.named_mut(&format!("phi_t/conv{i}"), out);
        }
        self.fc.named_mut("phi_t/fc", out);
    }
}

pub struct StatisticNodes {
    pub convs: Vec<ConvNodes>,
    pub fc: ConvNodes,
}

/// All trainable state, split into the six named groups.
#[derive(Clone)]
pub struct ParameterGroups {
    pub theta: BackboneParams,
    pub psi: AttentionParams,
    pub phi_dom: AttentionParams,
    pub phi_t: StatisticParams,
    pub omega: HeadParams,
    pub omega_bar: HeadParams,
}

impl ParameterGroups {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.backbone.validate()?;
        let c = config.backbone.out_channels();
        let rng_for = |tag: u64| ChaCha12Rng::seed_from_u64(derive_seed(seed, tag));
        Ok(ParameterGroups {
            theta: BackboneParams::new(&mut rng_for(1), &config.backbone),
            psi: AttentionParams::new(&mut rng_for(2), c),
            phi_dom: AttentionParams::new(&mut rng_for(3), c),
            phi_t: StatisticParams::new(
                &mut rng_for(4),
                2 * c,
                &StatisticParams::default_widths(c),
            ),
            omega: HeadParams::new(&mut rng_for(5), c, 1),
            omega_bar: HeadParams::new(&mut rng_for(6), c, config.domain_classes()),
        })
    }

    pub fn named_tensors(&self, group: Group) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match group {
            Group::Theta => self.theta.named(&mut out),
            Group::Psi => self.psi.named("psi", &mut out),
            Group::PhiDom => self.phi_dom.named("phi_dom", &mut out),
            Group::PhiT => self.phi_t.named(&mut out),
            Group::Omega => self.omega.named("omega", &mut out),
            Group::OmegaBar => self.omega_bar.named("omega_bar", &mut out),
        }
        out
    }

    pub fn named_tensors_mut(&mut self, group: Group) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match group {
            Group::Theta => self.theta.named_mut(&mut out),
            Group::Psi => self.psi.named_mut("psi", &mut out),
            Group::PhiDom => self.phi_dom.named_mut("phi_dom", &mut out),
            Group::PhiT => self.phi_t.named_mut(&mut out),
            Group::Omega => self.omega.named_mut("omega", &mut out),
            Group::OmegaBar => self.omega_bar.named_mut("omega_bar", &mut out),
        }
        out
    }

    pub fn param_count(&self) -> usize {
        Group::ALL
            .iter()
            .map(|&g| {
                self.named_tensors(g)
                    .iter()
                    .map(|(_, t)| t.len())
                    .sum::<usize>()
            })
            .sum()
    }
}

// ---- forward passes -------------------------------------------------------

/// G: stride-2 conv blocks with PReLU. [n,1,H,W] -> [n,c,H/r,W/r].
pub fn backbone_forward(g: &mut Graph, nodes: &BackboneNodes, image: NodeId) -> NodeId {
    let mut x = image;
    for (conv, alpha) in &nodes.blocks {
        x = g.conv2d(x, conv.w, conv.b, 2, 1);
        x = g.prelu(x, *alpha);
    }
    x
}

/// Attention map in (0,1) with the same shape as the input feature map.
pub fn attention_forward(g: &mut Graph, nodes: &AttentionNodes, input: NodeId) -> NodeId {
    // Channel branch: three pooled c-vectors -> two 1x1 layers.
    let gap = g.gap_spatial(input);
    let gmp = g.gmp_spatial(input);
    let sadp_map = g.dw_conv2d(input, nodes.sadp.w, nodes.sadp.b, 1);
    let sadp = g.sum_spatial(sadp_map);
    let ch_cat = g.concat_axis1(&[gap, gmp, sadp]);
    let ch_mid = g.linear(ch_cat, nodes.ch_fc1.w, nodes.ch_fc1.b);
    let ch_mid = g.prelu(ch_mid, nodes.ch_act);
    let ch_vec = g.linear(ch_mid, nodes.ch_fc2.w, nodes.ch_fc2.b);

    // Spatial branch: three one-channel maps -> one 3x3 conv.
    let c_mean = g.channel_mean(input);
    let c_max = g.channel_max(input);
    let c_adp = g.conv2d(input, nodes.cadp.w, nodes.cadp.b, 1, 0);
    let sp_cat = g.concat_axis1(&[c_mean, c_max, c_adp]);
    let sp_map = g.conv2d(sp_cat, nodes.sp_conv.w, nodes.sp_conv.b, 1, 1);

    let fused = g.fuse_broadcast(ch_vec, sp_map);
    g.sigmoid(fused)
}

/// Complementary decomposition: (M_df, I_df, I_os) with I_df + I_os = I_X.
pub fn decompose(
    g: &mut Graph,
    psi: &AttentionNodes,
    i_x: NodeId,
) -> (NodeId, NodeId, NodeId) {
    let m_df = attention_forward(g, psi, i_x);
    let i_df = g.mul(m_df, i_x);
    let inv = g.one_minus(m_df);
    let i_os = g.mul(inv, i_x);
    (m_df, i_df, i_os)
}

/// Domain extraction: (M_dom, I_dom) with I_dom = M_dom (x) I_os.
pub fn domain_extract(
    g: &mut Graph,
    phi_dom: &AttentionNodes,
    i_os: NodeId,
) -> (NodeId, NodeId) {
    let m_dom = attention_forward(g, phi_dom, i_os);
    let i_dom = g.mul(m_dom, i_os);
    (m_dom, i_dom)
}

/// C: pooled I_df -> scalar logit per sample, shape [n].
pub fn classify_df(g: &mut Graph, omega: &HeadNodes, i_df: NodeId) -> NodeId {
    let pooled = g.gap_spatial(i_df);
    let logits = head_forward(g, omega, pooled);
    let n = g.value(logits).shape()[0];
    g.reshape(logits, &[n])
}

/// C-bar: pooled I_dom -> k+1 domain logits per sample, shape [n,k+1].
pub fn classify_domain(g: &mut Graph, omega_bar: &HeadNodes, i_dom: NodeId) -> NodeId {
    let pooled = g.gap_spatial(i_dom);
    head_forward(g, omega_bar, pooled)
}

fn head_forward(g: &mut Graph, head: &HeadNodes, pooled: NodeId) -> NodeId {
    let h = g.linear(pooled, head.fc1.w, head.fc1.b);
    let h = g.prelu(h, head.act);
    g.linear(h, head.fc2.w, head.fc2.b)
}

/// T over a feature pair: channel concat, three conv+ReLU, pool, FC. Shape [n].
pub fn mi_statistic(
    g: &mut Graph,
    phi_t: &StatisticNodes,
    i_df: NodeId,
    i_os: NodeId,
) -> NodeId {
    assert_eq!(
        g.value(i_df).shape(),
        g.value(i_os).shape(),
        "statistic network needs a same-shape pair"
    );
    let mut x = g.concat_axis1(&[i_df, i_os]);
    for conv in &phi_t.convs {
        x = g.conv2d(x, conv.w, conv.b, 1, 1);
        x = g.relu(x);
    }
    let pooled = g.gap_spatial(x);
    let t = g.linear(pooled, phi_t.fc.w, phi_t.fc.b);
    let n = g.value(t).shape()[0];
    g.reshape(t, &[n])
}

/// Prediction rule: fake iff sigmoid(logit) >= 0.5.
pub fn predict_label(logit: f64) -> u8 {
    u8::from(crate::losses::sigmoid(logit) >= 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mini_config() -> ModelConfig {
        ModelConfig::new(
            BackboneConfig {
                input_size: 16,
                channel_widths: vec![4, 4],
            },
            2,
        )
        .unwrap()
    }

    fn rand_image(rng: &mut ChaCha12Rng, n: usize, size: usize) -> Tensor {
        let data = (0..n * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[n, 1, size, size], data)
    }

    #[test]
    fn backbone_output_shape_default_config() {
        let config = ModelConfig::new(BackboneConfig::default(), 4).unwrap();
        let params = ParameterGroups::init(&config, 1).unwrap();
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        let theta = params.theta.register(&mut g, &mut ledger);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let img = rand_image(&mut rng, 2, 64);
        let x = g.constant(img);
        let i_x = backbone_forward(&mut g, &theta, x);
        assert_eq!(g.value(i_x).shape(), &[2, 64, 4, 4]);
        assert!(g.value(i_x).all_finite());
    }

    #[test]
    fn forward_is_deterministic() {
        let config = mini_config();
        let params = ParameterGroups::init(&config, 3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let img = rand_image(&mut rng, 2, 16);
        let run = || {
            let mut g = Graph::new();
            let mut ledger = Ledger::new();
            let theta = params.theta.register(&mut g, &mut ledger);
            let psi = params.psi.register(&mut g, "psi", &mut ledger);
            let omega = params.omega.register(&mut g, "omega", &mut ledger);
            let x = g.constant(img.clone());
            let i_x = backbone_forward(&mut g, &theta, x);
            let (_, i_df, _) = decompose(&mut g, &psi, i_x);
            let s = classify_df(&mut g, &omega, i_df);
            g.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn attention_map_shape_and_range() {
        let config = mini_config();
        let params = ParameterGroups::init(&config, 7).unwrap();
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        let psi = params.psi.register(&mut g, "psi", &mut ledger);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let data = (0..2 * 4 * 4 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let feat = g.constant(Tensor::from_vec(&[2, 4, 4, 4], data));
        let m = attention_forward(&mut g, &psi, feat);
        assert_eq!(g.value(m).shape(), g.value(feat).shape());
        assert!(g.value(m).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn attention_is_half_when_final_layers_are_zero() {
        let config = mini_config();
        let mut params = ParameterGroups::init(&config, 7).unwrap();
        let c = config.backbone.out_channels();
        params.psi.ch_fc2 = LinearParams {
            weight: Tensor::zeros(&[c, c]),
            bias: Tensor::zeros(&[c]),
        };
        params.psi.sp_conv = ConvParams {
            weight: Tensor::zeros(&[1, 3, 3, 3]),
            bias: Tensor::zeros(&[1]),
        };
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        let psi = params.psi.register(&mut g, "psi", &mut ledger);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let data = (0..4 * 4 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let feat = g.constant(Tensor::from_vec(&[1, 4, 4, 4], data));
        let m = attention_forward(&mut g, &psi, feat);
        assert!(g.value(m).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decomposition_is_complementary() {
        let config = mini_config();
        let params = ParameterGroups::init(&config, 11).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        let psi = params.psi.register(&mut g, "psi", &mut ledger);
        let data = (0..3 * 4 * 4 * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let i_x = g.constant(Tensor::from_vec(&[3, 4, 4, 4], data));
        let (m_df, i_df, i_os) = decompose(&mut g, &psi, i_x);
        let sum: Vec<f64> = g
            .value(i_df)
            .iter()
            .zip(g.value(i_os).iter())
            .map(|(a, b)| a + b)
            .collect();
        let recon = Tensor::from_vec(g.value(i_x).shape(), sum);
        assert!(recon.max_abs_diff(g.value(i_x)) <= 1e-12);
        assert!(g.value(m_df).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn domain_extract_is_bounded_by_input() {
        let config = mini_config();
        let params = ParameterGroups::init(&config, 13).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        let phi_dom = params.phi_dom.register(&mut g, "phi_dom", &mut ledger);
        let data: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let i_os = g.constant(Tensor::from_vec(&[2, 4, 4, 4], data.clone()));
        let (m_dom, i_dom) = domain_extract(&mut g, &phi_dom, i_os);
        for ((&d, &o), &m) in g
            .value(i_dom)
            .iter()
            .zip(data.iter())
            .zip(g.value(m_dom).iter())
        {
            assert!(d.abs() <= o.abs() + 1e-15);
            assert!((d - m * o).abs() <= 1e-15);
        }
        // Zero input annihilates.
        let zero = g.constant(Tensor::zeros(&[2, 4, 4, 4]));
        let (_, i_dom0) = domain_extract(&mut g, &phi_dom, zero);
        assert!(g.value(i_dom0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_have_contract_shapes() {
        let config = mini_config();
        let params = ParameterGroups::init(&config, 17).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        let omega = params.omega.register(&mut g, "omega", &mut ledger);
        let omega_bar = params.omega_bar.register(&mut g, "omega_bar", &mut ledger);
        let data = (0..5 * 4 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feat = g.constant(Tensor::from_vec(&[5, 4, 4, 4], data));
        let s = classify_df(&mut g, &omega, feat);
        assert_eq!(g.value(s).shape(), &[5]);
        let d = classify_domain(&mut g, &omega_bar, feat);
        assert_eq!(g.value(d).shape(), &[5, 3]);
        assert_eq!(predict_label(0.0), 1, "boundary resolves to fake");
        assert_eq!(predict_label(-0.1), 0);
    }

    #[test]
    fn statistic_network_zero_final_layer_is_zero_map() {
        let config = mini_config();
        let mut params = ParameterGroups::init(&config, 19).unwrap();
        let in_d = params.phi_t.fc.weight.shape()[1];
        params.phi_t.fc = LinearParams {
            weight: Tensor::zeros(&[1, in_d]),
            bias: Tensor::zeros(&[1]),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        let phi_t = params.phi_t.register(&mut g, &mut ledger);
        let a: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let i_df = g.constant(Tensor::from_vec(&[2, 4, 4, 4], a));
        let i_os = g.constant(Tensor::from_vec(&[2, 4, 4, 4], b));
        let t = mi_statistic(&mut g, &phi_t, i_df, i_os);
        assert_eq!(g.value(t).shape(), &[2]);
        assert!(g.value(t).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_names_are_the_canonical_six() {
        let names: Vec<&str> = Group::ALL.iter().map(|g| g.name()).collect();
        assert_eq!(
            names,
            ["theta", "psi", "phi_dom", "phi_t", "omega", "omega_bar"]
        );
        let config = mini_config();
        let params = ParameterGroups::init(&config, 23).unwrap();
        // No tensor name may appear in two groups.
        let mut seen = std::collections::HashSet::new();
        for g in Group::ALL {
            for (name, _) in params.named_tensors(g) {
                assert!(seen.insert(name.clone()), "duplicate parameter {name}");
                assert!(name.starts_with(g.name()));
            }
        }
    }

    #[test]
    fn registration_names_match_named_tensors() {
        let config = mini_config();
        let params = ParameterGroups::init(&config, 29).unwrap();
        let mut g = Graph::new();
        let mut ledger = Ledger::new();
        params.theta.register(&mut g, &mut ledger);
        params.psi.register(&mut g, "psi", &mut ledger);
        params.phi_dom.register(&mut g, "phi_dom", &mut ledger);
        params.phi_t.register(&mut g, &mut ledger);
        params.omega.register(&mut g, "omega", &mut ledger);
        params.omega_bar.register(&mut g, "omega_bar", &mut ledger);
        let mut expected = Vec::new();
        for grp in Group::ALL {
            expected.extend(params.named_tensors(grp).into_iter().map(|(n, _)| n));
        }
        let got: Vec<String> = ledger.into_iter().map(|(n, _)| n).collect();
        assert_eq!(got, expected);
    }
}
