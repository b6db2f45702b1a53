//! Trainable optical front end.
//!
//! Training form: several depthwise branches (`[K,1,b,b]` each, no bias)
//! applied identically to every color plane, summed, giving `3K` maps in
//! color-major order (`c·K + j`), then SiLU and a `1×1` convolution to
//! `expand_to` channels with optional batch norm.
//!
//! Deployment form: the branches are merged into one `k×k` kernel per
//! channel, compiled into a DAD PSF, and the sensor image is decoded back
//! into the same `3K` maps.

use std::path::Path;

use rand::Rng;

use crate::dad::{self, CropMode, DadLayout};
use crate::error::{Error, Result};
use crate::optics::{optical_convolve, Psf};
use crate::tensor::layers::he_normal;
use crate::tensor::{checkpoint, Activation, BatchNorm2d, BnMode, Conv2d, Graph, ParamId, ParamStore, RunningStats, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SiluPosition {
    #[default]
    Pre1x1,
    Post1x1,
}

impl std::str::FromStr for SiluPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_1x1" => Ok(SiluPosition::Pre1x1),
            "post_1x1" => Ok(SiluPosition::Post1x1),
            _ => Err(Error::Config(format!("silu position must be pre_1x1|post_1x1, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpticalLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub branch_sizes: Vec<usize>,
    pub expand_to: usize,
    pub use_bn_after_expand: bool,
    pub crop_mode: CropMode,
    pub silu_position: SiluPosition,
}

impl Default for OpticalLayerSpec {
    fn default() -> Self {
        OpticalLayerSpec {
            channels: 12,
            kernel: 13,
            branch_sizes: vec![13, 7, 5, 3],
            expand_to: 64,
            use_bn_after_expand: true,
            crop_mode: CropMode::Same,
            silu_position: SiluPosition::Pre1x1,
        }
    }
}

impl OpticalLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Parameter("optical layer needs K >= 1".into()));
        }
        if self.expand_to < self.channels {
            return Err(Error::Parameter(format!(
                "expand_to {} must be >= K {}",
                self.expand_to, self.channels
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Parameter(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.branch_sizes.is_empty() {
            return Err(Error::Parameter("optical layer needs at least one branch".into()));
        }
        for &b in &self.branch_sizes {
            if b % 2 == 0 || b > self.kernel {
                return Err(Error::Parameter(format!(
                    "branch size {b} must be odd and <= {}",
                    self.kernel
                )));
            }
        }
        Ok(())
    }

    /// Number of decoded maps fed to the 1×1 layer.
    pub fn maps(&self) -> usize {
        3 * self.channels
    }

    /// Spatial size of the decoded maps for an `h×w` input.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match self.crop_mode {
            CropMode::Same => (h, w),
            CropMode::Full => (h + self.kernel - 1, w + self.kernel - 1),
        }
    }

    /// Multiply-accumulates of the multi-branch training form.
    pub fn branch_macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_size(h, w);
        let taps: usize = self.branch_sizes.iter().map(|b| b * b).sum();
        (self.maps() * taps * oh * ow) as u64
    }

    /// Multiply-accumulates of the merged single-kernel form.
    pub fn merged_macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_size(h, w);
        (self.maps() * self.kernel * self.kernel * oh * ow) as u64
    }

    /// Multiply-accumulates of the electronic 1×1 layer.
    pub fn expand_macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_size(h, w);
        (self.expand_to * self.maps() * oh * ow) as u64
    }

    fn padding(&self, b: usize) -> usize {
        match self.crop_mode {
            CropMode::Same => (b - 1) / 2,
            CropMode::Full => (b - 1) / 2 + (self.kernel - 1) / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RunningStats,
}

/// Plain snapshot of the layer's tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OpticalLayerParams {
    /// `[K,1,b,b]` per branch, in `branch_sizes` order
    pub branches: Vec<Tensor>,
    /// `[expand_to, 3K, 1, 1]`
    pub expand_weight: Tensor,
    pub expand_bias: Tensor,
    pub bn: Option<BnParams>,
}

impl OpticalLayerParams {
    /// Same layer with the branches merged into one `kernel`-sized branch.
    pub fn merged(&self, kernel: usize) -> Result<Self> {
        Ok(OpticalLayerParams {
            branches: vec![reparameterize(self, kernel)?],
            ..self.clone()
        })
    }

    /// Reads the tensors an [`OpticalLayer`] named `prefix` writes into a
    /// checkpoint, checking them against the layer spec.
    pub fn from_records(records: &[(String, Tensor)], prefix: &str, spec: &OpticalLayerSpec) -> Result<Self> {
        spec.validate()?;
        let get = |name: String| checkpoint::find(records, &name).cloned();
        let branches = (0..spec.branch_sizes.len())
            .map(|i| get(format!("{prefix}.branch{i}")))
            .collect::<Result<Vec<_>>>()?;
        for (t, &b) in branches.iter().zip(&spec.branch_sizes) {
            if t.shape() != [spec.channels, 1, b, b] {
                return Err(Error::shape("optical branch", &[spec.channels, 1, b, b], t.shape()));
            }
        }
        let expand_weight = get(format!("{prefix}.expand.weight"))?;
        if expand_weight.shape() != [spec.expand_to, spec.maps(), 1, 1] {
            return Err(Error::shape("optical expand", &[spec.expand_to, spec.maps(), 1, 1], expand_weight.shape()));
        }
        let bn = if spec.use_bn_after_expand {
            Some(BnParams {
                gamma: get(format!("{prefix}.bn.gamma"))?,
                beta: get(format!("{prefix}.bn.beta"))?,
                stats: RunningStats {
                    mean: get(format!("{prefix}.bn.running_mean"))?.into_data(),
                    var: get(format!("{prefix}.bn.running_var"))?.into_data(),
                },
            })
        } else {
            None
        };
        Ok(OpticalLayerParams {
            branches,
            expand_weight,
            expand_bias: get(format!("{prefix}.expand.bias"))?,
            bn,
        })
    }
}

/// Zero-pads every branch symmetrically to `kernel × kernel` and sums them.
pub fn reparameterize(params: &OpticalLayerParams, kernel: usize) -> Result<Tensor> {
    let first = params
        .branches
        .first()
        .ok_or_else(|| Error::Parameter("no branches to merge".into()))?;
    let kc = first.shape()[0];
    let mut out = vec![0.0f32; kc * kernel * kernel];
    for w in &params.branches {
        let s = w.shape();
        if s.len() != 4 || s[0] != kc || s[1] != 1 || s[2] != s[3] {
            return Err(Error::shape("reparameterize", s, &[kc, 1, kernel, kernel]));
        }
        let b = s[2];
        if b % 2 == 0 {
            return Err(Error::Parameter(format!("branch size {b} is even; it has no center")));
        }
        if b > kernel {
            return Err(Error::Parameter(format!("branch size {b} exceeds kernel {kernel}")));
        }
        let off = (kernel - b) / 2;
        for c in 0..kc {
            for i in 0..b {
                for j in 0..b {
                    out[(c * kernel + off + i) * kernel + off + j] += w.data()[(c * b + i) * b + j];
                }
            }
        }
    }
    Tensor::new(&[kc, 1, kernel, kernel], out)
}

/// Parameter handles of an optical layer inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OpticalLayer {
    pub spec: OpticalLayerSpec,
    pub branches: Vec<ParamId>,
    pub expand: Conv2d,
    pub bn: Option<BatchNorm2d>,
}

impl OpticalLayer {
    pub fn new<R: Rng + ?Sized>(spec: OpticalLayerSpec, store: &mut ParamStore, name: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let k = spec.channels;
        let branches = spec
            .branch_sizes
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let w = he_normal(&[k, 1, b, b], b * b, 1.0, rng);
                store.add(format!("{name}.branch{i}"), w, true)
            })
            .collect();
        let expand = Conv2d::new(store, &format!("{name}.expand"), spec.maps(), spec.expand_to, 1, 1, 0, true, rng);
        let bn = spec
            .use_bn_after_expand
            .then(|| BatchNorm2d::new(store, &format!("{name}.bn"), spec.expand_to));
        Ok(OpticalLayer {
            spec,
            branches,
            expand,
            bn,
        })
    }

    /// Registers existing tensors in a fresh store.
    pub fn from_params(spec: OpticalLayerSpec, params: &OpticalLayerParams) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        if params.branches.len() != spec.branch_sizes.len() {
            return Err(Error::Parameter(format!(
                "{} branch tensors for {} branch sizes",
                params.branches.len(),
                spec.branch_sizes.len()
            )));
        }
        let branches = params
            .branches
            .iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("optical.branch{i}"), t.clone(), true))
            .collect();
        let weight = store.add("optical.expand.weight", params.expand_weight.clone(), true);
        let bias = store.add("optical.expand.bias", params.expand_bias.clone(), true);
        let bn = match (&params.bn, spec.use_bn_after_expand) {
            (Some(p), true) => {
                let bn = BatchNorm2d::new(&mut store, "optical.bn", spec.expand_to);
                *store.tensor_mut(bn.gamma) = p.gamma.clone();
                *store.tensor_mut(bn.beta) = p.beta.clone();
                store.tensor_mut(bn.running_mean).data_mut().copy_from_slice(&p.stats.mean);
                store.tensor_mut(bn.running_var).data_mut().copy_from_slice(&p.stats.var);
                Some(bn)
            }
            (None, false) => None,
            _ => return Err(Error::Parameter("batch-norm params do not match use_bn_after_expand".into())),
        };
        Ok((
            OpticalLayer {
                spec,
                branches,
                expand: Conv2d {
                    weight,
                    bias: Some(bias),
                    stride: 1,
                    padding: 0,
                },
                bn,
            },
            store,
        ))
    }

    pub fn params(&self, store: &ParamStore) -> OpticalLayerParams {
        OpticalLayerParams {
            branches: self.branches.iter().map(|&id| store.tensor(id).clone().with_requires_grad(false)).collect(),
            expand_weight: store.tensor(self.expand.weight).clone().with_requires_grad(false),
            expand_bias: store
                .tensor(self.expand.bias.expect("1x1 has bias"))
                .clone()
                .with_requires_grad(false),
            bn: self.bn.as_ref().map(|bn| BnParams {
                gamma: store.tensor(bn.gamma).clone().with_requires_grad(false),
                beta: store.tensor(bn.beta).clone().with_requires_grad(false),
                stats: bn.stats(store),
            }),
        }
    }

    /// Pre-activation optical maps `[N, 3K, H', W']` of the training form.
    pub fn optical_maps(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("optical layer input", &s, &[0, 3, 0, 0]));
        }
        let (n, h, w) = (s[0], s[2], s[3]);
        if h < self.spec.kernel || w < self.spec.kernel {
            return Err(Error::Geometry(format!(
                "input {h}x{w} is smaller than the {k}x{k} optical kernel",
                k = self.spec.kernel
            )));
        }
        let planes = g.reshape(x, &[3 * n, 1, h, w])?;
        let mut sum: Option<Var> = None;
        for (&id, &b) in self.branches.iter().zip(&self.spec.branch_sizes) {
            let wb = g.param(store, id);
            let y = g.conv2d(planes, wb, None, 1, self.spec.padding(b))?;
            sum = Some(match sum {
                None => y,
                Some(acc) => g.add(acc, y)?,
            });
        }
        let y = sum.expect("validated: at least one branch");
        let (oh, ow) = self.spec.output_size(h, w);
        g.reshape(y, &[n, self.spec.maps(), oh, ow])
    }

    /// SiLU, 1×1 and optional batch norm on top of the `3K` maps.
    pub fn head(&self, g: &mut Graph, store: &mut ParamStore, maps: Var, mode: BnMode) -> Result<Var> {
        let mut y = maps;
        if self.spec.silu_position == SiluPosition::Pre1x1 {
            y = g.activation(y, Activation::Silu);
        }
        y = self.expand.forward(g, store, y)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(g, store, y, mode)?;
        }
        if self.spec.silu_position == SiluPosition::Post1x1 {
            y = g.activation(y, Activation::Silu);
        }
        Ok(y)
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: BnMode) -> Result<Var> {
        let maps = self.optical_maps(g, store, x)?;
        self.head(g, store, maps, mode)
    }
}

/// Idealized optical layer `[N,3,H,W] → [N, expand_to, H', W']` with batch
/// norm in inference mode.
pub fn forward_train(x: &Tensor, params: &OpticalLayerParams, spec: &OpticalLayerSpec) -> Result<Tensor> {
    let spec = single_or_spec(spec, params)?;
    let (layer, mut store) = OpticalLayer::from_params(spec, params)?;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = layer.forward(&mut g, &mut store, xv, BnMode::Eval)?;
    Ok(g.take_value(y))
}

/// Accepts the `branch_sizes` list or a merged single branch of size `k`.
fn single_or_spec(spec: &OpticalLayerSpec, params: &OpticalLayerParams) -> Result<OpticalLayerSpec> {
    let sizes: Vec<usize> = params.branches.iter().map(|t| t.shape()[t.rank() - 1]).collect();
    if sizes == spec.branch_sizes {
        return Ok(spec.clone());
    }
    if sizes == [spec.kernel] {
        return Ok(OpticalLayerSpec {
            branch_sizes: sizes,
            ..spec.clone()
        });
    }
    Err(Error::Parameter(format!(
        "branch tensors of sizes {sizes:?} match neither {:?} nor [{}]",
        spec.branch_sizes, spec.kernel
    )))
}

/// PSF and layout compiled from trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledOptics {
    pub psf: Psf,
    pub layout: DadLayout,
}

impl CompiledOptics {
    /// TNSR1 with the PSF as record `psf` next to the layout records.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let psf = Tensor::new(&[self.psf.height(), self.psf.width()], self.psf.intensity().to_vec())?;
        let mut recs = self.layout.to_records();
        recs.push(("psf".to_string(), psf));
        let refs: Vec<(&str, &Tensor)> = recs.iter().map(|(n, t)| (n.as_str(), t)).collect();
        checkpoint::save(path, &refs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let recs = checkpoint::load(path)?;
        let layout = DadLayout::from_records(&recs)?;
        let t = checkpoint::find(&recs, "psf")?;
        if t.shape() != [layout.psf_size().0, layout.psf_size().1] {
            return Err(Error::Format {
                offset: 0,
                message: format!("psf record {:?} does not match the layout", t.shape()),
            });
        }
        let psf = Psf::new(t.shape()[0], t.shape()[1], t.data().to_vec())?;
        Ok(CompiledOptics { psf, layout })
    }
}

/// Merges the branches and encodes them for `h×w` inputs.
pub fn compile(params: &OpticalLayerParams, spec: &OpticalLayerSpec, h: usize, w: usize) -> Result<CompiledOptics> {
    spec.validate()?;
    let merged = reparameterize(params, spec.kernel)?;
    let layout = dad::plan_layout(spec.channels, spec.kernel, h, w, dad::DEFAULT_GUARD)?;
    let (psf, layout) = dad::encode(&merged, &layout)?;
    Ok(CompiledOptics { psf, layout })
}

/// Decoded `3K` optical maps for a batch, before SiLU.
pub fn deployed_maps(x: &Tensor, compiled: &CompiledOptics, spec: &OpticalLayerSpec) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("forward_deployed input", s, &[0, 3, 0, 0]));
    }
    let layout = &compiled.layout;
    let (n, h, w) = (s[0], s[2], s[3]);
    if (h, w) != (layout.input_h, layout.input_w) {
        return Err(Error::Geometry(format!(
            "input is {h}x{w}, layout was compiled for {}x{}",
            layout.input_h, layout.input_w
        )));
    }
    if layout.channels != spec.channels || layout.kernel != spec.kernel {
        return Err(Error::Geometry(format!(
            "layout has K={} k={}, layer has K={} k={}",
            layout.channels, layout.kernel, spec.channels, spec.kernel
        )));
    }
    let planes = x.clone().with_requires_grad(false).reshape(&[3 * n, h, w])?;
    let sensor = optical_convolve(&planes, &compiled.psf)?;
    let maps = dad::decode_with(&sensor, layout, spec.crop_mode)?;
    let (oh, ow) = spec.output_size(h, w);
    maps.reshape(&[n, spec.maps(), oh, ow])
}

/// Optical convolution through the compiled PSF, DAD decoding, crop, then
/// the electronic head. Fails if the layout was compiled from different
/// kernels than `params` hold.
pub fn forward_deployed(
    x: &Tensor,
    compiled: &CompiledOptics,
    params: &OpticalLayerParams,
    spec: &OpticalLayerSpec,
) -> Result<Tensor> {
    spec.validate()?;
    let actual = dad::kernel_hash(&reparameterize(params, spec.kernel)?);
    match compiled.layout.kernel_hash {
        Some(stored) if stored == actual => {}
        Some(stored) => return Err(Error::StaleLayout { stored, actual }),
        None => return Err(Error::StaleLayout { stored: 0, actual }),
    }
    let maps = deployed_maps(x, compiled, spec)?;
    let merged = params.merged(spec.kernel)?;
    let (layer, mut store) = OpticalLayer::from_params(single_or_spec(spec, &merged)?, &merged)?;
    let mut g = Graph::new();
    let mv = g.input(maps);
    let y = layer.head(&mut g, &mut store, mv, BnMode::Eval)?;
    Ok(g.take_value(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn layer(spec: OpticalLayerSpec) -> (OpticalLayer, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let l = OpticalLayer::new(spec, &mut store, "optical", &mut rng).unwrap();
        (l, store)
    }

    #[test]
    fn spec_validation() {
        assert!(OpticalLayerSpec::default().validate().is_ok());
        let bad = OpticalLayerSpec {
            branch_sizes: vec![13, 4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OpticalLayerSpec {
            expand_to: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn merge_centers_small_branches() {
        let mut b3 = vec![0.0; 9];
        b3[4] = 1.0;
        let p = OpticalLayerParams {
            branches: vec![Tensor::zeros(&[1, 1, 13, 13]), Tensor::new(&[1, 1, 3, 3], b3).unwrap()],
            expand_weight: Tensor::zeros(&[3, 3, 1, 1]),
            expand_bias: Tensor::zeros(&[3]),
            bn: None,
        };
        let m = reparameterize(&p, 13).unwrap();
        assert_eq!(m.at(&[0, 0, 6, 6]), 1.0);
        assert_eq!(m.sum(), 1.0);
    }

    #[test]
    fn merge_rejects_even_branch() {
        let p = OpticalLayerParams {
            branches: vec![Tensor::zeros(&[1, 1, 4, 4])],
            expand_weight: Tensor::zeros(&[3, 3, 1, 1]),
            expand_bias: Tensor::zeros(&[3]),
            bn: None,
        };
        assert!(matches!(reparameterize(&p, 13), Err(Error::Parameter(_))));
    }

    #[test]
    fn merge_of_single_branch_is_identity() {
        let (l, store) = layer(OpticalLayerSpec {
            branch_sizes: vec![13],
            ..Default::default()
        });
        let p = l.params(&store);
        assert_eq!(reparameterize(&p, 13).unwrap(), p.branches[0]);
    }

    #[test]
    fn merged_macs_are_smaller() {
        let s = OpticalLayerSpec::default();
        assert!(s.merged_macs(32, 32) < s.branch_macs(32, 32));
    }

    #[test]
    fn small_input_is_rejected() {
        let (l, mut store) = layer(OpticalLayerSpec::default());
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(matches!(l.forward(&mut g, &mut store, x, BnMode::Eval), Err(Error::Geometry(_))));
    }
}
