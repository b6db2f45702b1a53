//! CIFAR-style VGG13 and ResNet18, electronic or with the optical layer in
//! place of stage 1.

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::macs::{count_trace, LayerOp, MacReport, OpKind};
use crate::error::{Error, Result};
use crate::optical_layer::{OpticalLayer, OpticalLayerSpec};
use crate::tensor::{checkpoint, Activation, BatchNorm2d, BnMode, Conv2d, Graph, Linear, ParamId, ParamStore, Tensor, Var};

pub const NUM_CLASSES: usize = 10;
const VGG_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Vgg13,
    ResNet18,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg13" => Ok(Architecture::Vgg13),
            "resnet18" => Ok(Architecture::ResNet18),
            other => Err(Error::Config(format!("unknown architecture {other:?} (vgg13|resnet18)"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Vgg13 => "vgg13",
            Architecture::ResNet18 => "resnet18",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Electronic,
    Codesign,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "electronic" => Ok(Variant::Electronic),
            "codesign" => Ok(Variant::Codesign),
            other => Err(Error::Config(format!("unknown variant {other:?} (electronic|codesign)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Electronic => "electronic",
            Variant::Codesign => "codesign",
        })
    }
}

/// Removal tokens: `stageS_convI` / `stageS_convs` for VGG13 (S in 2..=5),
/// `stageS_block2` for ResNet18 (S in 2..=4).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub variant: Variant,
    pub optical: OpticalLayerSpec,
    pub stages_removed: Vec<String>,
    /// Divides every channel width (1 = standard model).
    pub width_div: usize,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, variant: Variant) -> Self {
        ModelSpec {
            architecture,
            variant,
            optical: OpticalLayerSpec {
                expand_to: 64,
                ..Default::default()
            },
            stages_removed: Vec::new(),
            width_div: 1,
        }
    }

    /// Co-design configuration used for the MAC-reduction comparison.
    pub fn reference_codesign(architecture: Architecture) -> Self {
        let mut s = ModelSpec::new(architecture, Variant::Codesign);
        s.stages_removed = vec![match architecture {
            Architecture::Vgg13 => "stage2_conv2".to_string(),
            Architecture::ResNet18 => "stage2_block2".to_string(),
        }];
        s
    }

    /// Sets `width_div` and keeps the optical expansion equal to the stage-1 width.
    pub fn with_width_div(mut self, div: usize) -> Self {
        self.width_div = div;
        if let Some(w) = 64usize.checked_div(div) {
            self.optical.expand_to = w;
        }
        self
    }

    pub fn stage1_width(&self) -> usize {
        64 / self.width_div.max(1)
    }

    fn removed(&self, token: &str) -> bool {
        self.stages_removed.iter().any(|t| t == token)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_div == 0 || 64 % self.width_div != 0 {
            return Err(Error::Config(format!("width_div {} must divide 64", self.width_div)));
        }
        if self.variant == Variant::Codesign {
            self.optical.validate().map_err(|e| Error::Config(e.to_string()))?;
            if self.optical.expand_to != self.stage1_width() {
                return Err(Error::Config(format!(
                    "optical expand_to {} must equal the stage-1 width {}",
                    self.optical.expand_to,
                    self.stage1_width()
                )));
            }
        }
        for t in &self.stages_removed {
            let ok = match self.architecture {
                Architecture::Vgg13 => (2..=5).any(|s| {
                    [format!("stage{s}_conv1"), format!("stage{s}_conv2"), format!("stage{s}_convs")].contains(t)
                }),
                Architecture::ResNet18 => (2..=4).any(|s| *t == format!("stage{s}_block2")),
            };
            if !ok {
                return Err(Error::Config(format!(
                    "cannot remove {t:?} from {} (allowed: {})",
                    self.architecture,
                    match self.architecture {
                        Architecture::Vgg13 => "stageS_conv1|stageS_conv2|stageS_convs, S=2..5",
                        Architecture::ResNet18 => "stageS_block2, S=2..4",
                    }
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Basic {
    name: String,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Clone, Debug)]
enum Block {
    ConvBnRelu { name: String, conv: Conv2d, bn: BatchNorm2d },
    /// Optical layer followed by ReLU.
    Optical { name: String, layer: OpticalLayer },
    MaxPool { name: String },
    Basic(Box<Basic>),
    GlobalPool { name: String },
    Flatten { name: String },
    Classifier { name: String, linear: Linear },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    blocks: Vec<Block>,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    blocks: Vec<Block>,
}

impl Builder<'_> {
    fn conv_bn_relu(&mut self, name: String, c_in: usize, c_out: usize) {
        let conv = Conv2d::new(&mut self.store, &format!("{name}.conv"), c_in, c_out, 3, 1, 1, false, self.rng);
        let bn = BatchNorm2d::new(&mut self.store, &format!("{name}.bn"), c_out);
        self.blocks.push(Block::ConvBnRelu { name, conv, bn });
    }

    fn basic(&mut self, name: String, c_in: usize, c_out: usize, stride: usize) {
        let s = &mut self.store;
        let conv1 = Conv2d::new(s, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, self.rng);
        let bn1 = BatchNorm2d::new(s, &format!("{name}.bn1"), c_out);
        let conv2 = Conv2d::new(s, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, self.rng);
        let bn2 = BatchNorm2d::new(s, &format!("{name}.bn2"), c_out);
        let shortcut = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(s, &format!("{name}.shortcut.conv"), c_in, c_out, 1, stride, 0, false, self.rng),
                BatchNorm2d::new(s, &format!("{name}.shortcut.bn"), c_out),
            )
        });
        self.blocks.push(Block::Basic(Box::new(Basic {
            name,
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })));
    }

    fn optical(&mut self, spec: &OpticalLayerSpec) -> Result<()> {
        let layer = OpticalLayer::new(spec.clone(), &mut self.store, "optical", self.rng)?;
        self.blocks.push(Block::Optical {
            name: "optical".into(),
            layer,
        });
        Ok(())
    }
}

/// Builds and initializes a model; initialization is a function of `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: &mut rng,
        blocks: Vec::new(),
    };
    let d = spec.width_div;
    let codesign = spec.variant == Variant::Codesign;
    let last = match spec.architecture {
        Architecture::Vgg13 => {
            let mut c = 3;
            for (i, &w) in VGG_WIDTHS.iter().enumerate() {
                let stage = i + 1;
                let w = w / d;
                if stage == 1 && codesign {
                    b.optical(&spec.optical)?;
                    c = w;
                } else {
                    for conv in 1..=2 {
                        if spec.removed(&format!("stage{stage}_conv{conv}")) || spec.removed(&format!("stage{stage}_convs")) {
                            continue;
                        }
                        b.conv_bn_relu(format!("stage{stage}.conv{conv}"), c, w);
                        c = w;
                    }
                }
                b.blocks.push(Block::MaxPool {
                    name: format!("stage{stage}.pool"),
                });
            }
            b.blocks.push(Block::Flatten { name: "flatten".into() });
            c
        }
        Architecture::ResNet18 => {
            let w0 = RESNET_WIDTHS[0] / d;
            if codesign {
                b.optical(&spec.optical)?;
            } else {
                b.conv_bn_relu("stem".into(), 3, w0);
                b.basic("stage1.block1".into(), w0, w0, 1);
                b.basic("stage1.block2".into(), w0, w0, 1);
            }
            let mut c = w0;
            for (i, &w) in RESNET_WIDTHS.iter().enumerate().skip(1) {
                let stage = i + 1;
                let w = w / d;
                b.basic(format!("stage{stage}.block1"), c, w, 2);
                if !spec.removed(&format!("stage{stage}_block2")) {
                    b.basic(format!("stage{stage}.block2"), w, w, 1);
                }
                c = w;
            }
            b.blocks.push(Block::GlobalPool { name: "avgpool".into() });
            c
        }
    };
    let linear = Linear::new(&mut b.store, "classifier", last, NUM_CLASSES, b.rng);
    b.blocks.push(Block::Classifier {
        name: "classifier".into(),
        linear,
    });
    Ok(Model {
        spec: spec.clone(),
        store: b.store,
        blocks: b.blocks,
    })
}

impl Model {
    /// Logits `[N,10]` for input `[N,3,H,W]`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: BnMode) -> Result<Var> {
        let store = &mut self.store;
        let mut h = x;
        for block in &self.blocks {
            h = match block {
                Block::ConvBnRelu { conv, bn, .. } => {
                    let y = conv.forward(g, store, h)?;
                    let y = bn.forward(g, store, y, mode)?;
                    g.activation(y, Activation::Relu)
                }
                Block::Optical { layer, .. } => {
                    let y = layer.forward(g, store, h, mode)?;
                    g.activation(y, Activation::Relu)
                }
                Block::MaxPool { .. } => g.maxpool2d(h, 2, 2)?,
                Block::Basic(bb) => {
                    let y = bb.conv1.forward(g, store, h)?;
                    let y = bb.bn1.forward(g, store, y, mode)?;
                    let y = g.activation(y, Activation::Relu);
                    let y = bb.conv2.forward(g, store, y)?;
                    let y = bb.bn2.forward(g, store, y, mode)?;
                    let s = match &bb.shortcut {
                        Some((conv, bn)) => {
                            let s = conv.forward(g, store, h)?;
                            bn.forward(g, store, s, mode)?
                        }
                        None => h,
                    };
                    let y = g.add(y, s)?;
                    g.activation(y, Activation::Relu)
                }
                Block::GlobalPool { .. } => {
                    let y = g.global_avgpool(h)?;
                    let s = g.value(y).shape().to_vec();
                    g.reshape(y, &[s[0], s[1]])?
                }
                Block::Flatten { .. } => {
                    let s = g.value(h).shape().to_vec();
                    let n = s[0];
                    g.reshape(h, &[n, s[1..].iter().product()])?
                }
                Block::Classifier { linear, .. } => linear.forward(g, store, h)?,
            };
        }
        Ok(h)
    }

    /// Forward pass without gradient bookkeeping.
    pub fn logits(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv, mode)?;
        Ok(g.take_value(y))
    }

    pub fn optical_layer(&self) -> Option<&OpticalLayer> {
        self.blocks.iter().find_map(|b| match b {
            Block::Optical { layer, .. } => Some(layer),
            _ => None,
        })
    }

    pub fn optical_branch_ids(&self) -> Vec<ParamId> {
        self.optical_layer().map(|l| l.branches.clone()).unwrap_or_default()
    }

    /// Static list of executed ops for an input of shape `[N,C,H,W]`.
    pub fn trace(&self, input: [usize; 4]) -> Result<Vec<LayerOp>> {
        let mut ops = Vec::new();
        let mut shape = input.to_vec();
        let push = |ops: &mut Vec<LayerOp>, name: String, kind: OpKind, input: &[usize], output: Vec<usize>| {
            ops.push(LayerOp {
                name,
                kind,
                input: input.to_vec(),
                output,
            });
        };
        let conv_out = |shape: &[usize], conv: &Conv2d, store: &ParamStore| -> Result<(OpKind, Vec<usize>)> {
            let (c_out, c_in, k) = conv.dims(store);
            if shape.len() != 4 || shape[1] != c_in {
                return Err(Error::shape("conv2d", &[c_out, c_in, k, k], shape));
            }
            let o = |v: usize| (v + 2 * conv.padding - k) / conv.stride + 1;
            Ok((
                OpKind::Conv2d {
                    c_in,
                    c_out,
                    kernel: k,
                    stride: conv.stride,
                    padding: conv.padding,
                },
                vec![shape[0], c_out, o(shape[2]), o(shape[3])],
            ))
        };
        for block in &self.blocks {
            match block {
                Block::ConvBnRelu { name, conv, .. } => {
                    let (kind, out) = conv_out(&shape, conv, &self.store)?;
                    push(&mut ops, format!("{name}.conv"), kind, &shape, out.clone());
                    push(&mut ops, format!("{name}.bn"), OpKind::BatchNorm, &out, out.clone());
                    push(&mut ops, format!("{name}.relu"), OpKind::Activation, &out, out.clone());
                    shape = out;
                }
                Block::Optical { name, layer } => {
                    let s = &layer.spec;
                    let (h, w) = s.output_size(shape[2], shape[3]);
                    let maps = vec![shape[0], s.maps(), h, w];
                    push(
                        &mut ops,
                        format!("{name}.psf"),
                        OpKind::OpticalConv {
                            maps: s.maps(),
                            kernel: s.kernel,
                        },
                        &shape,
                        maps.clone(),
                    );
                    let out = vec![shape[0], s.expand_to, h, w];
                    push(&mut ops, format!("{name}.silu"), OpKind::Activation, &maps, maps.clone());
                    let (kind, _) = conv_out(&maps, &layer.expand, &self.store)?;
                    push(&mut ops, format!("{name}.expand"), kind, &maps, out.clone());
                    if s.use_bn_after_expand {
                        push(&mut ops, format!("{name}.bn"), OpKind::BatchNorm, &out, out.clone());
                    }
                    push(&mut ops, format!("{name}.relu"), OpKind::Activation, &out, out.clone());
                    shape = out;
                }
                Block::MaxPool { name } => {
                    let out = vec![shape[0], shape[1], shape[2] / 2, shape[3] / 2];
                    push(&mut ops, name.clone(), OpKind::Pool, &shape, out.clone());
                    shape = out;
                }
                Block::Basic(bb) => {
                    let n = &bb.name;
                    let (k1, o1) = conv_out(&shape, &bb.conv1, &self.store)?;
                    push(&mut ops, format!("{n}.conv1"), k1, &shape, o1.clone());
                    push(&mut ops, format!("{n}.bn1"), OpKind::BatchNorm, &o1, o1.clone());
                    push(&mut ops, format!("{n}.relu1"), OpKind::Activation, &o1, o1.clone());
                    let (k2, o2) = conv_out(&o1, &bb.conv2, &self.store)?;
                    push(&mut ops, format!("{n}.conv2"), k2, &o1, o2.clone());
                    push(&mut ops, format!("{n}.bn2"), OpKind::BatchNorm, &o2, o2.clone());
                    if let Some((conv, _)) = &bb.shortcut {
                        let (ks, os) = conv_out(&shape, conv, &self.store)?;
                        push(&mut ops, format!("{n}.shortcut.conv"), ks, &shape, os.clone());
                        push(&mut ops, format!("{n}.shortcut.bn"), OpKind::BatchNorm, &os, os.clone());
                    }
                    push(&mut ops, format!("{n}.add"), OpKind::Add, &o2, o2.clone());
                    push(&mut ops, format!("{n}.relu2"), OpKind::Activation, &o2, o2.clone());
                    shape = o2;
                }
                Block::GlobalPool { name } => {
                    let out = vec![shape[0], shape[1]];
                    push(&mut ops, name.clone(), OpKind::Pool, &shape, out.clone());
                    shape = out;
                }
                Block::Flatten { name } => {
                    let out = vec![shape[0], shape[1..].iter().product()];
                    push(&mut ops, name.clone(), OpKind::Reshape, &shape, out.clone());
                    shape = out;
                }
                Block::Classifier { name, linear } => {
                    let ws = self.store.tensor(linear.weight).shape();
                    let (d_out, d_in) = (ws[0], ws[1]);
                    if shape.len() != 2 || shape[1] != d_in {
                        return Err(Error::shape("classifier", &[d_out, d_in], &shape));
                    }
                    let out = vec![shape[0], d_out];
                    push(&mut ops, name.clone(), OpKind::Linear { d_in, d_out }, &shape, out.clone());
                    shape = out;
                }
            }
        }
        Ok(ops)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let records: Vec<(&str, &Tensor)> = self.store.named().collect();
        checkpoint::save(path, &records)
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.store.load_named(&checkpoint::load(path)?)
    }
}

/// MAC report for one forward pass at the given input shape.
pub fn count_macs(model: &Model, input: [usize; 4]) -> Result<MacReport> {
    count_trace(&model.trace(input)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_are_validated() {
        let mut s = ModelSpec::new(Architecture::ResNet18, Variant::Electronic);
        s.stages_removed = vec!["stage2_convs".into()];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.stages_removed = vec!["stage3_block2".into()];
        assert!(s.validate().is_ok());
    }

    #[test]
    fn expand_must_match_stage1_width() {
        let s = ModelSpec::new(Architecture::Vgg13, Variant::Codesign);
        let mut bad = s.clone();
        bad.width_div = 4;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(s.with_width_div(4).validate().is_ok());
    }

    #[test]
    fn small_forward_shapes() {
        for arch in [Architecture::Vgg13, Architecture::ResNet18] {
            for variant in [Variant::Electronic, Variant::Codesign] {
                let mut spec = ModelSpec::new(arch, variant).with_width_div(8);
                spec.optical.channels = 2;
                let mut m = build_model(&spec, 0).unwrap();
                let y = m.logits(&Tensor::zeros(&[2, 3, 32, 32]), BnMode::Eval).unwrap();
                assert_eq!(y.shape(), &[2, NUM_CLASSES]);
                let trace = m.trace([2, 3, 32, 32]).unwrap();
                assert_eq!(trace.last().unwrap().output, vec![2, NUM_CLASSES]);
            }
        }
    }
}
