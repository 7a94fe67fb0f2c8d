//! Architecture builders for the VGG, ResNet, WideResNet and tiny families.

use crate::error::Result;
use crate::ops::ConvGeometry;
use crate::tensor::Tensor;

use super::arch::{ArchSpec, Family, FilterMode, SurgeryMode};
use super::layer::{
    BnLayer, ConvLayer, Layer, LinearLayer, ParamKind, ParamStore, ResidualBlock, Shortcut,
};

pub(crate) struct Ctx {
    pub store: ParamStore,
    pub mode: FilterMode,
}

impl Ctx {
    pub fn new(mode: FilterMode) -> Self {
        Self {
            store: ParamStore::default(),
            mode,
        }
    }

    pub fn conv_with(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeometry,
        spatial: bool,
        bias: bool,
    ) -> Layer {
        let weight = self.store.register(
            format!("{name}.weight"),
            ParamKind::ConvWeight { spatial },
            Tensor::zeros(&[cout, cin, geom.kernel_h, geom.kernel_w]),
        );
        let bias = bias.then(|| {
            self.store
                .register(format!("{name}.bias"), ParamKind::ConvBias, Tensor::zeros(&[cout]))
        });
        Layer::Conv(ConvLayer {
            name: name.to_string(),
            cin,
            cout,
            geom,
            weight,
            bias,
            spatial,
        })
    }

    /// Spatial conv in the context's filter mode, no bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Layer {
        let geom = self.mode.geometry(stride);
        self.conv_with(name, cin, cout, geom, true, false)
    }

    pub fn pointwise(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Layer {
        self.conv_with(
            name,
            cin,
            cout,
            ConvGeometry::pointwise().with_stride(stride),
            false,
            false,
        )
    }

    pub fn bn(&mut self, name: &str, channels: usize) -> Layer {
        let mut reg = |suffix: &str, kind, value: f32| {
            self.store
                .register(format!("{name}.{suffix}"), kind, Tensor::full(&[channels], value))
        };
        let gamma = reg("weight", ParamKind::BnGamma, 1.0);
        let beta = reg("bias", ParamKind::BnBeta, 0.0);
        let running_mean = reg("running_mean", ParamKind::BnRunningMean, 0.0);
        let running_var = reg("running_var", ParamKind::BnRunningVar, 1.0);
        Layer::BatchNorm(BnLayer {
            name: name.to_string(),
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Layer {
        let weight = self.store.register(
            format!("{name}.weight"),
            ParamKind::LinearWeight,
            Tensor::zeros(&[fout, fin]),
        );
        let bias = Some(self.store.register(
            format!("{name}.bias"),
            ParamKind::LinearBias,
            Tensor::zeros(&[fout]),
        ));
        Layer::Linear(LinearLayer {
            name: name.to_string(),
            fin,
            fout,
            weight,
            bias,
        })
    }
}

pub(crate) struct Built {
    pub layers: Vec<Layer>,
    pub taps: Vec<usize>,
}

pub(crate) fn build_layers(ctx: &mut Ctx, spec: &ArchSpec, surgery: SurgeryMode) -> Result<Built> {
    Ok(match spec.family {
        Family::Vgg => vgg(ctx, spec, surgery),
        Family::ResNet => resnet(ctx, spec),
        Family::Wrn => wrn(ctx, spec),
        Family::Tiny => tiny(ctx, spec),
    })
}

/// Standard VGG channel plans; `None` marks a max-pool.
pub fn vgg_plan(depth: usize) -> Vec<Option<usize>> {
    let stages: [&[usize]; 5] = match depth {
        13 => [&[64, 64], &[128, 128], &[256, 256], &[512, 512], &[512, 512]],
        16 => [
            &[64, 64],
            &[128, 128],
            &[256, 256, 256],
            &[512, 512, 512],
            &[512, 512, 512],
        ],
        19 => [
            &[64, 64],
            &[128, 128],
            &[256, 256, 256, 256],
            &[512, 512, 512, 512],
            &[512, 512, 512, 512],
        ],
        _ => unreachable!("unsupported VGG depth {depth}"),
    };
    let mut plan = Vec::new();
    for stage in stages {
        plan.extend(stage.iter().map(|&c| Some(c)));
        plan.push(None);
    }
    plan
}

/// Whether pool number `idx` (of `count`) stays a max-pool under `surgery`.
pub fn pool_retained(surgery: SurgeryMode, idx: usize, count: usize) -> bool {
    surgery == SurgeryMode::KeepEdgePools && (idx == 0 || idx + 1 == count)
}

fn vgg(ctx: &mut Ctx, spec: &ArchSpec, surgery: SurgeryMode) -> Built {
    let plan = vgg_plan(spec.depth);
    let n_pools = plan.iter().filter(|p| p.is_none()).count();
    let n_convs = plan.len() - n_pools;
    let mut layers = Vec::new();
    let mut taps = Vec::new();
    let mut cin = spec.input[0];
    let (mut conv_idx, mut pool_idx) = (0, 0);

    for (i, item) in plan.iter().enumerate() {
        match *item {
            Some(cout) => {
                conv_idx += 1;
                let replaced_next = matches!(plan.get(i + 1), Some(None))
                    && !pool_retained(surgery, pool_idx, n_pools);
                let stride = if replaced_next { 2 } else { 1 };
                let name = format!("features.conv{conv_idx}");
                let edge = conv_idx == 1 || conv_idx == n_convs;
                let conv = if surgery == SurgeryMode::KeepEdgeConvs && edge {
                    ctx.conv_with(&name, cin, cout, ConvGeometry::square().with_stride(stride), false, false)
                } else {
                    ctx.conv(&name, cin, cout, stride)
                };
                layers.push(conv);
                layers.push(ctx.bn(&format!("features.bn{conv_idx}"), cout));
                layers.push(Layer::Relu);
                let next_cout = plan[i + 1..].iter().flatten().next().copied();
                if conv_idx == 1 || next_cout.is_some_and(|c| c > cout) {
                    let t = layers.len() - 1;
                    if taps.last() != Some(&t) {
                        taps.push(t);
                    }
                }
                cin = cout;
            }
            None => {
                if pool_retained(surgery, pool_idx, n_pools) {
                    layers.push(Layer::MaxPool2);
                }
                pool_idx += 1;
            }
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(ctx.linear("classifier", cin, spec.num_classes));
    Built { layers, taps }
}

fn resnet(ctx: &mut Ctx, spec: &ArchSpec) -> Built {
    let (blocks, bottleneck): ([usize; 4], bool) = match spec.depth {
        18 => ([2, 2, 2, 2], false),
        34 => ([3, 4, 6, 3], false),
        50 => ([3, 4, 6, 3], true),
        d => unreachable!("unsupported ResNet depth {d}"),
    };
    let expansion = if bottleneck { 4 } else { 1 };
    let mut layers = vec![
        ctx.conv("conv1", spec.input[0], 64, 1),
        ctx.bn("bn1", 64),
        Layer::Relu,
    ];
    let mut taps = vec![2];
    let mut cin = 64;
    for (s, (&planes, &count)) in [64, 128, 256, 512].iter().zip(&blocks).enumerate() {
        for b in 0..count {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let name = format!("layer{}.{b}", s + 1);
            let cout = planes * expansion;
            let body = if bottleneck {
                vec![
                    ctx.pointwise(&format!("{name}.conv1"), cin, planes, 1),
                    ctx.bn(&format!("{name}.bn1"), planes),
                    Layer::Relu,
                    ctx.conv(&format!("{name}.conv2"), planes, planes, stride),
                    ctx.bn(&format!("{name}.bn2"), planes),
                    Layer::Relu,
                    ctx.pointwise(&format!("{name}.conv3"), planes, cout, 1),
                    ctx.bn(&format!("{name}.bn3"), cout),
                ]
            } else {
                vec![
                    ctx.conv(&format!("{name}.conv1"), cin, planes, stride),
                    ctx.bn(&format!("{name}.bn1"), planes),
                    Layer::Relu,
                    ctx.conv(&format!("{name}.conv2"), planes, planes, 1),
                    ctx.bn(&format!("{name}.bn2"), planes),
                ]
            };
            let shortcut = if stride != 1 || cin != cout {
                Shortcut::Projection {
                    layers: vec![
                        ctx.pointwise(&format!("{name}.shortcut.conv"), cin, cout, stride),
                        ctx.bn(&format!("{name}.shortcut.bn"), cout),
                    ],
                    from_pre: false,
                }
            } else {
                Shortcut::Identity
            };
            layers.push(Layer::Residual(ResidualBlock {
                name,
                pre: Vec::new(),
                body,
                shortcut,
                post_relu: true,
            }));
            cin = cout;
        }
        taps.push(layers.len() - 1);
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(ctx.linear("fc", cin, spec.num_classes));
    Built { layers, taps }
}

fn wrn(ctx: &mut Ctx, spec: &ArchSpec) -> Built {
    let per_stage = (spec.depth - 4) / 6;
    let k = spec.widen;
    let mut layers = vec![ctx.conv("conv1", spec.input[0], 16, 1)];
    let mut taps = vec![0];
    let mut cin = 16;
    for (s, &width) in [16 * k, 32 * k, 64 * k].iter().enumerate() {
        for b in 0..per_stage {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let name = format!("block{}.{b}", s + 1);
            let pre = vec![ctx.bn(&format!("{name}.bn1"), cin), Layer::Relu];
            let body = vec![
                ctx.conv(&format!("{name}.conv1"), cin, width, stride),
                ctx.bn(&format!("{name}.bn2"), width),
                Layer::Relu,
                ctx.conv(&format!("{name}.conv2"), width, width, 1),
            ];
            let shortcut = if cin == width && stride == 1 {
                Shortcut::Identity
            } else {
                Shortcut::Projection {
                    layers: vec![ctx.pointwise(&format!("{name}.shortcut"), cin, width, stride)],
                    from_pre: true,
                }
            };
            layers.push(Layer::Residual(ResidualBlock {
                name,
                pre,
                body,
                shortcut,
                post_relu: false,
            }));
            cin = width;
        }
        taps.push(layers.len() - 1);
    }
    layers.push(ctx.bn("bn_final", cin));
    layers.push(Layer::Relu);
    layers.push(Layer::GlobalAvgPool);
    layers.push(ctx.linear("fc", cin, spec.num_classes));
    Built { layers, taps }
}

/// Number of convs in the first (16-channel) stage of `tiny-k`.
pub fn tiny_first_stage(k: usize) -> usize {
    k.div_ceil(2)
}

fn tiny(ctx: &mut Ctx, spec: &ArchSpec) -> Built {
    let k = spec.depth;
    let s1 = tiny_first_stage(k);
    let mut layers = Vec::new();
    let mut taps = Vec::new();
    let mut cin = spec.input[0];
    for i in 1..=k {
        let cout = if i <= s1 { 16 } else { 32 };
        let stride = if i == 1 || i == s1 + 1 { 2 } else { 1 };
        layers.push(ctx.conv(&format!("conv{i}"), cin, cout, stride));
        layers.push(ctx.bn(&format!("bn{i}"), cout));
        layers.push(Layer::Relu);
        if i == 1 || i == s1 {
            taps.push(layers.len() - 1);
        }
        cin = cout;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(ctx.linear("fc", cin, spec.num_classes));
    Built { layers, taps }
}
