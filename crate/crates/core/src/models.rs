//! The two expert networks and the weighted-average combiner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{bce_on_positive, grad_check, GradCheckConfig, GradCheckReport};
use crate::io::{Checkpoint, NetworkKind};
use crate::metrics::auc_fraction;
use crate::nn::{Act, BatchNorm, Buffer, Conv3d, Dense, Flatten, Module, Param, Pool, Sequential};
use crate::ops::{self, Activation, Mode, PoolKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DwiNetConfig {
    pub blocks: usize,
    pub convs_per_block: usize,
    pub base_filters: usize,
    pub kernel: usize,
    pub head_hidden: usize,
    pub in_channels: usize,
}

impl Default for DwiNetConfig {
    fn default() -> Self {
        DwiNetConfig { blocks: 3, convs_per_block: 2, base_filters: 64, kernel: 3, head_hidden: 256, in_channels: 1 }
    }
}

impl DwiNetConfig {
    pub fn block_filters(&self) -> Vec<usize> {
        (0..self.blocks).map(|b| self.base_filters << b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdcNetConfig {
    pub stem_filters: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub head_hidden: usize,
    pub in_channels: usize,
}

impl Default for AdcNetConfig {
    fn default() -> Self {
        AdcNetConfig {
            stem_filters: 64,
            stem_kernel: 7,
            stem_stride: 2,
            pool_window: 3,
            pool_stride: 2,
            widths: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            head_hidden: 512,
            in_channels: 3,
        }
    }
}

/// Architecture of either expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetConfig {
    Dwinet(DwiNetConfig),
    Adcnet(AdcNetConfig),
}

impl NetConfig {
    pub fn kind(&self) -> NetworkKind {
        match self {
            NetConfig::Dwinet(_) => NetworkKind::Dwinet,
            NetConfig::Adcnet(_) => NetworkKind::Adcnet,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            NetConfig::Dwinet(c) => c.in_channels,
            NetConfig::Adcnet(c) => c.in_channels,
        }
    }

    pub fn default_for(kind: NetworkKind) -> Self {
        match kind {
            NetworkKind::Dwinet => NetConfig::Dwinet(DwiNetConfig::default()),
            NetworkKind::Adcnet => NetConfig::Adcnet(AdcNetConfig::default()),
        }
    }
}

/// conv-bn-relu-conv-bn plus an identity or 1³-projection shortcut, relu
/// after the sum.
pub struct BasicBlock<T> {
    pub main: Sequential<T>,
    pub shortcut: Option<Sequential<T>>,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut main = Sequential::default();
        main.push(Conv3d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false, rng));
        main.push(BatchNorm::new(&format!("{name}.bn1"), out_ch));
        main.push(Act::new(Activation::Relu));
        main.push(Conv3d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng));
        main.push(BatchNorm::new(&format!("{name}.bn2"), out_ch));
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            let mut s = Sequential::default();
            s.push(Conv3d::new(&format!("{name}.down.conv"), in_ch, out_ch, 1, stride, 0, false, rng));
            s.push(BatchNorm::new(&format!("{name}.down.bn"), out_ch));
            s
        });
        BasicBlock { main, shortcut, output: None }
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut sum = self.main.forward(x, mode)?;
        match &mut self.shortcut {
            Some(s) => sum.add_assign(&s.forward(x, mode)?)?,
            None => sum.add_assign(x)?,
        }
        let y = ops::activation(&sum, Activation::Relu);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self
            .output
            .take()
            .ok_or_else(|| Error::InvalidArgument("basic block: backward called without a forward pass".into()))?;
        let g = ops::activation_backward(Activation::Relu, &y, grad_out)?;
        let mut dx = self.main.backward(&g)?;
        match &mut self.shortcut {
            Some(s) => dx.add_assign(&s.backward(&g)?)?,
            None => dx.add_assign(&g)?,
        }
        Ok(dx)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let out = self.main.output_shape(input)?;
        let short = match &self.shortcut {
            Some(s) => s.output_shape(input)?,
            None => input.to_vec(),
        };
        if out != short {
            return Err(Error::Shape(format!("residual branch {out:?} does not match shortcut {short:?}")));
        }
        Ok(out)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.main.params();
        if let Some(s) = &self.shortcut {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.main.params_mut();
        if let Some(s) = &mut self.shortcut {
            p.extend(s.params_mut());
        }
        p
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut b = self.main.buffers();
        if let Some(s) = &self.shortcut {
            b.extend(s.buffers());
        }
        b
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut b = self.main.buffers_mut();
        if let Some(s) = &mut self.shortcut {
            b.extend(s.buffers_mut());
        }
        b
    }
}

/// A built expert: layers plus the input geometry it was validated for.
pub struct Network<T> {
    pub kind: NetworkKind,
    pub config: NetConfig,
    /// `[C, D, H, W]`.
    pub input: [usize; 4],
    pub body: Sequential<T>,
}

impl<T: Scalar> Module<T> for Network<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.ndim() != 5 || x.shape()[1..] != self.input {
            return Err(Error::Shape(format!(
                "{} expects [N, {}, {}, {}, {}], got {:?}",
                self.kind,
                self.input[0],
                self.input[1],
                self.input[2],
                self.input[3],
                x.shape()
            )));
        }
        self.body.forward(x, mode)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.body.backward(grad_out)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.body.output_shape(input)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.body.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.body.params_mut()
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        self.body.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        self.body.buffers_mut()
    }
}

impl<T: Scalar> Network<T> {
    /// Positive-class probabilities in eval mode.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<T>> {
        let out = self.forward(x, Mode::Eval)?;
        Ok(out.data().chunks(2).map(|r| r[1]).collect())
    }

    /// Prefix of the final output layer's tensors.
    pub fn head_out_prefix(&self) -> String {
        format!("{}.head.out.", self.kind)
    }

    /// `(name, shape)` for every parameter and buffer, in checkpoint order.
    pub fn census(&self) -> Vec<(String, Vec<usize>)> {
        let mut c: Vec<_> = self.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        c.extend(self.buffers().iter().map(|b| (b.name.clone(), b.value.shape().to_vec())));
        c
    }

    /// Shape after all layers up to (not including) the global pool.
    pub fn feature_shape(&self) -> Result<Vec<usize>> {
        let gap = self
            .body
            .layers
            .iter()
            .position(|l| l.output_shape(&[1, 1, 5, 5, 5]).ok() == Some(vec![1, 1, 1, 1, 1]))
            .ok_or_else(|| Error::Shape("network has no global pool".into()))?;
        let input = [1, self.input[0], self.input[1], self.input[2], self.input[3]];
        self.body.layers[..gap].iter().try_fold(input.to_vec(), |s, l| l.output_shape(&s))
    }
}

fn head<T: Scalar>(net: &mut Sequential<T>, name: &str, features: usize, hidden: usize, rng: &mut ChaCha8Rng) {
    net.push(Pool::new(PoolKind::GlobalAvg, 0, 0));
    net.push(Flatten::default());
    net.push(Dense::new(&format!("{name}.head.hidden"), features, hidden, rng));
    net.push(Act::new(Activation::Relu));
    net.push(Dense::new(&format!("{name}.head.out"), hidden, 2, rng));
    net.push(Act::new(Activation::Softmax));
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Shape(format!("input dims must be positive, got {dims:?}")));
    }
    Ok(())
}

pub fn build_dwinet<T: Scalar>(cfg: &DwiNetConfig, dims: [usize; 3], seed: u64) -> Result<Network<T>> {
    check_dims(dims)?;
    if cfg.blocks == 0 || cfg.convs_per_block == 0 || cfg.base_filters == 0 || cfg.head_hidden == 0 {
        return Err(Error::Config(
            "dwinet blocks, convs_per_block, base_filters and head_hidden must be positive".into(),
        ));
    }
    if cfg.kernel % 2 == 0 {
        return Err(Error::Config(format!("dwinet kernel must be odd for same padding, got {}", cfg.kernel)));
    }
    let div = 1usize << cfg.blocks;
    if dims.iter().any(|d| d % div != 0) {
        return Err(Error::Shape(format!("dwinet input dims {dims:?} are not divisible by 2^{} = {div}", cfg.blocks)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = Sequential::default();
    let mut ch = cfg.in_channels;
    for (b, &f) in cfg.block_filters().iter().enumerate() {
        for i in 0..cfg.convs_per_block {
            let mut conv =
                Conv3d::new(&format!("dwinet.block{b}.conv{i}"), ch, f, cfg.kernel, 1, cfg.kernel / 2, true, &mut rng);
            conv.input_grad = !(b == 0 && i == 0);
            body.push(conv);
            body.push(Act::new(Activation::Relu));
            ch = f;
        }
        body.push(BatchNorm::new(&format!("dwinet.block{b}.bn"), ch));
        body.push(Pool::new(PoolKind::Max, 2, 2));
    }
    head(&mut body, "dwinet", ch, cfg.head_hidden, &mut rng);
    let net = Network {
        kind: NetworkKind::Dwinet,
        config: NetConfig::Dwinet(cfg.clone()),
        input: [cfg.in_channels, dims[0], dims[1], dims[2]],
        body,
    };
    net.output_shape(&[1, cfg.in_channels, dims[0], dims[1], dims[2]])?;
    Ok(net)
}

pub fn build_adcnet<T: Scalar>(cfg: &AdcNetConfig, dims: [usize; 3], seed: u64) -> Result<Network<T>> {
    check_dims(dims)?;
    if cfg.widths.is_empty() || cfg.widths.contains(&0) || cfg.blocks_per_stage == 0 || cfg.stem_filters == 0 {
        return Err(Error::Config("adcnet widths, blocks_per_stage and stem_filters must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut body = Sequential::default();
    let mut stem = Conv3d::new(
        "adcnet.stem.conv",
        cfg.in_channels,
        cfg.stem_filters,
        cfg.stem_kernel,
        cfg.stem_stride,
        cfg.stem_kernel / 2,
        false,
        &mut rng,
    );
    stem.input_grad = false;
    body.push(stem);
    body.push(BatchNorm::new("adcnet.stem.bn", cfg.stem_filters));
    body.push(Act::new(Activation::Relu));
    body.push(Pool::new(PoolKind::Max, cfg.pool_window, cfg.pool_stride));
    let mut ch = cfg.stem_filters;
    for (s, &w) in cfg.widths.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            body.push(BasicBlock::new(&format!("adcnet.stage{s}.block{b}"), ch, w, stride, &mut rng));
            ch = w;
        }
    }
    head(&mut body, "adcnet", ch, cfg.head_hidden, &mut rng);
    let net = Network {
        kind: NetworkKind::Adcnet,
        config: NetConfig::Adcnet(cfg.clone()),
        input: [cfg.in_channels, dims[0], dims[1], dims[2]],
        body,
    };
    net.output_shape(&[1, cfg.in_channels, dims[0], dims[1], dims[2]]).map_err(|e| {
        Error::Shape(format!("adcnet: spatial extent reaches 0 before the head for input {dims:?} ({e})"))
    })?;
    Ok(net)
}

pub fn build_network<T: Scalar>(cfg: &NetConfig, dims: [usize; 3], seed: u64) -> Result<Network<T>> {
    match cfg {
        NetConfig::Dwinet(c) => build_dwinet(c, dims, seed),
        NetConfig::Adcnet(c) => build_adcnet(c, dims, seed),
    }
}

/// Loads `ckpt` into `net`. With `head_only_reset` the final output layer
/// keeps its fresh initialization and may be absent or differently shaped in
/// the checkpoint.
pub fn warm_start<T: Scalar>(net: &mut Network<T>, ckpt: &Checkpoint, head_only_reset: bool) -> Result<()> {
    let prefix = net.head_out_prefix();
    let kind = net.kind;
    ckpt.load_into(kind, net, |name| head_only_reset && name.starts_with(&prefix))
}

/// End-to-end finite-difference check of a freshly built network on a
/// seeded normal input of `batch` samples with alternating labels.
pub fn check_network_gradients(
    cfg: &NetConfig,
    dims: [usize; 3],
    seed: u64,
    batch: usize,
    check: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut net = build_network::<f64>(cfg, dims, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = [batch, cfg.in_channels(), dims[0], dims[1], dims[2]];
    let n: usize = shape.iter().product();
    let x = Tensor::from_vec(&shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())?;
    let labels = (0..batch).map(|i| (i % 2) as f64).collect();
    grad_check(&mut net, &x, &bce_on_positive(labels), check)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Weight on the DWI expert.
    pub w: f64,
    pub grid: Vec<f64>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { w: 0.5, grid: (0..=20).map(|i| i as f64 / 20.0).collect() }
    }
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("{what} must be in [0,1], got {p}")));
    }
    Ok(())
}

/// `w * p_dwi + (1 - w) * p_adc`.
pub fn ensemble_predict(p_dwi: f64, p_adc: f64, cfg: &EnsembleConfig) -> Result<f64> {
    check_prob(p_dwi, "p_dwi")?;
    check_prob(p_adc, "p_adc")?;
    check_prob(cfg.w, "ensemble weight")?;
    Ok(cfg.w * p_dwi + (1.0 - cfg.w) * p_adc)
}

/// Grid weight maximizing validation AUC of the combined score. Ties go to
/// the weight closest to 0.5, then to the smaller weight.
pub fn fit_ensemble_weight(val: &[(f64, f64, u8)], cfg: &EnsembleConfig) -> Result<f64> {
    if cfg.grid.is_empty() {
        return Err(Error::Config("ensemble grid is empty".into()));
    }
    let labels: Vec<u8> = val.iter().map(|v| v.2).collect();
    let mut best: Option<(u128, f64)> = None;
    for &w in &cfg.grid {
        let c = EnsembleConfig { w, grid: Vec::new() };
        let scores = val.iter().map(|&(d, a, _)| ensemble_predict(d, a, &c)).collect::<Result<Vec<_>>>()?;
        let (twice, _) = auc_fraction(&scores, &labels)?;
        let better = match best {
            None => true,
            Some((bt, bw)) => {
                twice > bt
                    || (twice == bt
                        && ((w - 0.5).abs() < (bw - 0.5).abs() || ((w - 0.5).abs() == (bw - 0.5).abs() && w < bw)))
            }
        };
        if better {
            best = Some((twice, w));
        }
    }
    Ok(best.expect("grid is non-empty").1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dwinet_widths_and_feature_map() {
        let net = build_dwinet::<f32>(&DwiNetConfig::default(), [64, 64, 64], 0).unwrap();
        assert_eq!(DwiNetConfig::default().block_filters(), vec![64, 128, 256]);
        assert_eq!(net.feature_shape().unwrap(), vec![1, 256, 8, 8, 8]);
        assert_eq!(net.output_shape(&[1, 1, 64, 64, 64]).unwrap(), vec![1, 2]);
    }

    #[test]
    fn dwinet_rejects_indivisible_dims() {
        let err = build_dwinet::<f32>(&DwiNetConfig::default(), [64, 60, 64], 0).err().unwrap();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn adcnet_rejects_tiny_input() {
        assert!(build_adcnet::<f32>(&AdcNetConfig::default(), [4, 4, 4], 0).is_err());
    }

    #[test]
    fn adcnet_census() {
        let net = build_adcnet::<f32>(&AdcNetConfig::default(), [32, 32, 32], 0).unwrap();
        let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
        let stem = names.iter().filter(|n| n.starts_with("adcnet.stem.")).count();
        let head = names.iter().filter(|n| n.starts_with("adcnet.head.")).count();
        assert_eq!(stem, 3); // conv weight, bn gamma, bn beta
        assert_eq!(head, 4);
        let mut blocks: Vec<String> = names
            .iter()
            .filter_map(|n| n.strip_prefix("adcnet.stage"))
            .map(|r| r.split('.').take(2).collect::<Vec<_>>().join("."))
            .collect();
        blocks.dedup();
        assert_eq!(blocks.len(), 8);
        // 6 per block, 3 more for each of the three projection shortcuts
        assert_eq!(names.len(), 3 + 8 * 6 + 3 * 3 + 4);
        let widths: Vec<usize> = (0..4)
            .map(|s| {
                net.params()
                    .iter()
                    .find(|p| p.name == format!("adcnet.stage{s}.block0.conv1.weight"))
                    .unwrap()
                    .value
                    .shape()[0]
            })
            .collect();
        assert_eq!(widths, vec![64, 128, 256, 512]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = DwiNetConfig { base_filters: 4, ..Default::default() };
        let a = build_dwinet::<f32>(&cfg, [16, 16, 16], 9).unwrap();
        let b = build_dwinet::<f32>(&cfg, [16, 16, 16], 9).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn ensemble_examples() {
        let c = EnsembleConfig { w: 1.0, ..Default::default() };
        assert_eq!(ensemble_predict(0.37, 0.9, &c).unwrap(), 0.37);
        let c = EnsembleConfig::default();
        assert!((ensemble_predict(0.8, 0.6, &c).unwrap() - 0.7).abs() < 1e-15);
        assert!(ensemble_predict(1.2, 0.6, &c).is_err());
        assert_eq!(c.grid.len(), 21);
        assert_eq!(c.grid[3], 0.15);
    }

    #[test]
    fn ensemble_weight_fit() {
        let labels = [0u8, 0, 0, 1, 1, 1];
        let good = [0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
        let val: Vec<_> = (0..6).map(|i| (good[i], 1.0 - good[i], labels[i])).collect();
        // every w > 0.5 ranks perfectly; the tie rule picks the one nearest 0.5
        assert_eq!(fit_ensemble_weight(&val, &EnsembleConfig::default()).unwrap(), 0.55);
        let noisy = [0.9, 0.1, 0.5, 0.2, 0.6, 0.3];
        let val: Vec<_> = (0..6).map(|i| (good[i], noisy[i], labels[i])).collect();
        let w = fit_ensemble_weight(&val, &EnsembleConfig::default()).unwrap();
        let scores: Vec<f64> = val.iter().map(|v| w * v.0 + (1.0 - w) * v.1).collect();
        assert_eq!(auc_fraction(&scores, &labels).unwrap().0, 18);
        let same: Vec<_> = (0..6).map(|i| (good[i], good[i], labels[i])).collect();
        assert_eq!(fit_ensemble_weight(&same, &EnsembleConfig::default()).unwrap(), 0.5);
        let single: Vec<_> = (0..6).map(|i| (good[i], good[i], 1)).collect();
        assert!(fit_ensemble_weight(&single, &EnsembleConfig::default()).is_err());
    }
}
