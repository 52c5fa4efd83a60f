//! Encoders producing global and local features, plus the projection head
//! applied to local features by the extension model.

use imoc_diffmath::{conv_output_size, Conv2dSpec, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::rng::derive_seed;

pub const TINY_HIDDEN: [usize; 2] = [256, 128];
pub const TINY_OUT: usize = 32;

/// Largest deviation from `[-1, 1]` accepted by [`Encoder::encode`].
pub const INPUT_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Tiny,
    Small,
    Big,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Big => "big",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tiny" => Some(Variant::Tiny),
            "small" => Some(Variant::Small),
            "big" => Some(Variant::Big),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub variant: Variant,
    pub ndf: usize,
    pub nrkhs: usize,
    pub ndepth: usize,
    /// Channels, height, width. Tiny only uses the product.
    pub input: [usize; 3],
    /// Attach the local-feature projection head.
    pub projection: bool,
}

impl EncoderConfig {
    pub fn tiny(input_dim: usize) -> Self {
        EncoderConfig {
            variant: Variant::Tiny,
            ndf: 0,
            nrkhs: TINY_OUT,
            ndepth: 0,
            input: [1, 1, input_dim],
            projection: false,
        }
    }

    pub fn small(input: [usize; 3]) -> Self {
        EncoderConfig {
            variant: Variant::Small,
            ndf: 128,
            nrkhs: 1024,
            ndepth: 10,
            input,
            projection: true,
        }
    }

    pub fn big(input: [usize; 3]) -> Self {
        EncoderConfig {
            variant: Variant::Big,
            ndf: 192,
            nrkhs: 1536,
            ndepth: 8,
            input,
            projection: true,
        }
    }

    pub fn global_dim(&self) -> usize {
        match self.variant {
            Variant::Tiny => TINY_OUT,
            _ => self.nrkhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mark {
    None,
    Local,
    Global,
}

#[derive(Debug, Clone)]
struct ConvRef {
    w: usize,
    b: usize,
    spec: Conv2dSpec,
}

#[derive(Debug, Clone)]
struct Shortcut {
    conv: ConvRef,
    offset: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
enum Step {
    Linear { w: usize, b: usize, relu: bool },
    Conv { conv: ConvRef, relu: bool },
    Block {
        convs: Vec<ConvRef>,
        shortcut: Option<Shortcut>,
        mark: Mark,
        out: [usize; 3],
    },
}

/// Parameter layout and initializers recorded while a plan is built.
struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    fan_in: Vec<usize>,
    zero_init: Vec<bool>,
    layers: Vec<(String, Vec<usize>)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, fan_in: usize, zero: bool) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.fan_in.push(fan_in);
        self.zero_init.push(zero);
        self.names.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: Conv2dSpec, zero_bias: bool) -> ConvRef {
        let fan = cin * k * k;
        let w = self.add(format!("{name}.w"), vec![cout, cin, k, k], fan, false);
        let b = self.add(format!("{name}.b"), vec![cout], fan, zero_bias);
        ConvRef { w, b, spec }
    }
}

fn conv_out(layer: &str, hw: [usize; 2], k: usize, stride: usize, pad: usize) -> Result<[usize; 2]> {
    match (
        conv_output_size(hw[0], k, stride, pad),
        conv_output_size(hw[1], k, stride, pad),
    ) {
        (Some(h), Some(w)) => Ok([h, w]),
        _ => Err(CoreError::invalid(
            "build_encoder",
            format!(
                "input too small at {layer}: kernel {k} stride {stride} pad {pad} on {}x{}",
                hw[0], hw[1]
            ),
        )),
    }
}

/// `(in, out, kernel, stride, depth)` residual block specs plus the feature mark.
type BlockSpec = (usize, usize, usize, usize, usize, Mark);

fn conv_plan(cfg: &EncoderConfig, b: &mut Builder) -> Result<Vec<Step>> {
    let [c, h, w] = cfg.input;
    let (ndf, nr, nd) = (cfg.ndf, cfg.nrkhs, cfg.ndepth);
    if ndf == 0 || nr == 0 {
        return Err(CoreError::invalid("build_encoder", "ndf and nrkhs must be positive"));
    }
    let mut steps = Vec::new();
    let mut ch = c;
    let mut hw = [h, w];
    let stems: Vec<(usize, usize, usize)> = match cfg.variant {
        Variant::Small => vec![(3, 1, 0)],
        Variant::Big => vec![(5, 2, 2), (3, 1, 0)],
        Variant::Tiny => unreachable!(),
    };
    for (i, &(k, s, p)) in stems.iter().enumerate() {
        let name = format!("stem{i}");
        hw = conv_out(&name, hw, k, s, p)?;
        let conv = b.conv(&name, ch, ndf, k, Conv2dSpec::new(s, p), false);
        b.layers.push((name, vec![ndf, hw[0], hw[1]]));
        steps.push(Step::Conv { conv, relu: true });
        ch = ndf;
    }
    let blocks: Vec<BlockSpec> = match cfg.variant {
        Variant::Small => vec![
            (ndf, ndf, 1, 1, 0, Mark::None),
            (ndf, 2 * ndf, 4, 2, nd, Mark::None),
            (2 * ndf, 4 * ndf, 2, 2, nd, Mark::None),
            (4 * ndf, 4 * ndf, 3, 1, nd, Mark::Local),
            (4 * ndf, 4 * ndf, 3, 1, nd, Mark::None),
            (4 * ndf, nr, 3, 1, 1, Mark::Global),
        ],
        Variant::Big => vec![
            (ndf, 2 * ndf, 4, 2, nd, Mark::None),
            (2 * ndf, 4 * ndf, 4, 2, nd, Mark::None),
            (4 * ndf, 8 * ndf, 2, 2, nd, Mark::None),
            (8 * ndf, 8 * ndf, 3, 1, nd, Mark::Local),
            (8 * ndf, 8 * ndf, 3, 1, nd, Mark::None),
            (8 * ndf, nr, 3, 1, 1, Mark::Global),
        ],
        Variant::Tiny => unreachable!(),
    };
    for (bi, &(cin, cout, k, s, depth, mark)) in blocks.iter().enumerate() {
        let name = format!("block{bi}");
        debug_assert_eq!(cin, ch);
        let out_hw = conv_out(&format!("{name}.conv0"), hw, k, s, 0)?;
        let mut convs = vec![b.conv(&format!("{name}.conv0"), cin, cout, k, Conv2dSpec::new(s, 0), false)];
        for d in 1..depth.max(1) {
            convs.push(b.conv(&format!("{name}.conv{d}"), cout, cout, 3, Conv2dSpec::new(1, 1), false));
        }
        let shortcut = if cin == cout && k == 1 && s == 1 {
            None
        } else {
            Some(Shortcut {
                conv: b.conv(&format!("{name}.skip"), cin, cout, 1, Conv2dSpec::default(), false),
                offset: (k - 1) / 2,
                stride: s,
            })
        };
        hw = out_hw;
        ch = cout;
        b.layers.push((name, vec![cout, hw[0], hw[1]]));
        steps.push(Step::Block {
            convs,
            shortcut,
            mark,
            out: [cout, hw[0], hw[1]],
        });
    }
    Ok(steps)
}

fn tiny_plan(cfg: &EncoderConfig, b: &mut Builder) -> Vec<Step> {
    let mut width = cfg.input.iter().product::<usize>();
    let dims = [TINY_HIDDEN[0], TINY_HIDDEN[1], TINY_OUT];
    let mut steps = Vec::new();
    for (i, &out) in dims.iter().enumerate() {
        let w = b.add(format!("fc{i}.w"), vec![width, out], width, false);
        let bias = b.add(format!("fc{i}.b"), vec![out], width, false);
        b.layers.push((format!("fc{i}"), vec![out]));
        steps.push(Step::Linear {
            w,
            b: bias,
            relu: i + 1 < dims.len(),
        });
        width = out;
    }
    steps
}

#[derive(Debug, Clone)]
struct Projection {
    first: ConvRef,
    second: ConvRef,
}

/// A parameterized encoder. Parameters live in [`Encoder::params`] in the
/// order given by [`Encoder::param_names`].
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    cfg: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    steps: Vec<Step>,
    projection: Option<Projection>,
    layers: Vec<(String, Vec<usize>)>,
    local_shape: [usize; 2],
}

/// Graph handles produced by [`Encoder::forward`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    /// `[N, d]`.
    pub global: Var,
    /// `[N, d_l, h*w]` before projection.
    pub local: Var,
    /// `[N, d, h*w]` after the projection head; the raw local map when the
    /// encoder has no head.
    pub projected: Var,
}

/// Concrete features for a batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    pub global: Tensor<T>,
    pub local: Tensor<T>,
    pub projected: Tensor<T>,
}

fn layout(cfg: &EncoderConfig) -> Result<(Builder, Vec<Step>, Option<Projection>, [usize; 2])> {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        fan_in: Vec::new(),
        zero_init: Vec::new(),
        layers: Vec::new(),
    };
    if cfg.input.contains(&0) {
        return Err(CoreError::invalid("build_encoder", "input extents must be positive"));
    }
    let steps = match cfg.variant {
        Variant::Tiny => tiny_plan(cfg, &mut b),
        _ => conv_plan(cfg, &mut b)?,
    };
    let local_shape = match cfg.variant {
        Variant::Tiny => [TINY_OUT, 1],
        _ => steps
            .iter()
            .find_map(|s| match s {
                Step::Block {
                    mark: Mark::Local,
                    out,
                    ..
                } => Some([out[0], out[1] * out[2]]),
                _ => None,
            })
            .expect("conv plans mark a local layer"),
    };
    let projection = cfg.projection.then(|| {
        let dl = local_shape[0];
        let first = b.conv("proj0", dl, dl, 1, Conv2dSpec::default(), true);
        let second = b.conv("proj1", dl, cfg.global_dim(), 1, Conv2dSpec::default(), true);
        Projection { first, second }
    });
    Ok((b, steps, projection, local_shape))
}

impl<T: Real> Encoder<T> {
    /// Builds the layer plan for `cfg` and draws fan-in scaled uniform
    /// weights from `seed`. Projection-head biases start at zero.
    pub fn build(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let (b, steps, projection, local_shape) = layout(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417]));
        let params = b
            .shapes
            .iter()
            .zip(&b.fan_in)
            .zip(&b.zero_init)
            .map(|((shape, &fan), &zero)| {
                if zero {
                    return Tensor::zeros(shape);
                }
                let bound = (3.0 / fan as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            })
            .collect();
        Ok(Encoder {
            cfg,
            names: b.names,
            params,
            steps,
            projection,
            layers: b.layers,
            local_shape,
        })
    }

    /// Reassembles an encoder from saved parameters, checking names and shapes.
    pub fn from_params(cfg: EncoderConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let (b, steps, projection, local_shape) = layout(&cfg)?;
        if named.len() != b.names.len() {
            return Err(CoreError::invalid(
                "encoder_from_params",
                format!("expected {} tensors, got {}", b.names.len(), named.len()),
            ));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(CoreError::invalid(
                    "encoder_from_params",
                    format!("tensor {name} {:?} does not match {want} {shape:?}", t.shape()),
                ));
            }
            params.push(t);
        }
        Ok(Encoder {
            cfg,
            names: b.names,
            params,
            steps,
            projection,
            layers: b.layers,
            local_shape,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn global_dim(&self) -> usize {
        self.cfg.global_dim()
    }

    /// Channels and spatial positions of the raw local map.
    pub fn local_shape(&self) -> [usize; 2] {
        self.local_shape
    }

    /// Output shape of every layer, excluding the batch axis.
    pub fn layer_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.layers
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    /// Registers the parameters as gradient leaves of `g`.
    pub fn bind(&self, g: &Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.clone())).collect()
    }

    /// Registers the parameters as constants of `g`.
    pub fn bind_frozen(&self, g: &Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.clone())).collect()
    }

    fn conv(&self, g: &Graph<T>, p: &[Var], x: Var, c: &ConvRef) -> Result<Var> {
        let y = g.conv2d(x, p[c.w], c.spec)?;
        Ok(g.add_channel_bias(y, p[c.b])?)
    }

    /// Runs the encoder on `x` (`[N, C, H, W]`, or any `[N, ...]` for tiny).
    pub fn forward(&self, g: &Graph<T>, p: &[Var], x: Var) -> Result<EncoderVars> {
        let shape = g.shape(x);
        let n = shape[0];
        let per_sample: usize = shape[1..].iter().product();
        if per_sample != self.cfg.input.iter().product::<usize>() {
            return Err(CoreError::invalid(
                "encode",
                format!("input {shape:?} does not match configured {:?}", self.cfg.input),
            ));
        }
        let mut h = match self.cfg.variant {
            Variant::Tiny => g.reshape(x, vec![n, per_sample])?,
            _ => {
                let [c, hh, ww] = self.cfg.input;
                g.reshape(x, vec![n, c, hh, ww])?
            }
        };
        let mut local = None;
        for step in &self.steps {
            h = match step {
                Step::Linear { w, b, relu } => {
                    let y = g.matmul(h, p[*w])?;
                    let y = g.add_bias(y, p[*b])?;
                    if *relu {
                        g.relu(y)
                    } else {
                        y
                    }
                }
                Step::Conv { conv, relu } => {
                    let y = self.conv(g, p, h, conv)?;
                    if *relu {
                        g.relu(y)
                    } else {
                        y
                    }
                }
                Step::Block {
                    convs,
                    shortcut,
                    mark,
                    out,
                } => {
                    let mut r = h;
                    for c in convs {
                        let a = g.relu(r);
                        r = self.conv(g, p, a, c)?;
                    }
                    let skip = match shortcut {
                        None => h,
                        Some(s) => {
                            let sub = g.subsample2d(h, s.offset, s.stride, out[1], out[2])?;
                            self.conv(g, p, sub, &s.conv)?
                        }
                    };
                    let y = g.add(r, skip)?;
                    match mark {
                        Mark::Local => local = Some(g.reshape(y, vec![n, out[0], out[1] * out[2]])?),
                        Mark::Global => {
                            let flat = g.reshape(y, vec![n, out[0], out[1] * out[2]])?;
                            h = g.mean(flat, 2)?;
                            continue;
                        }
                        Mark::None => {}
                    }
                    y
                }
            };
        }
        let global = h;
        let local = match local {
            Some(l) => l,
            None => g.reshape(global, vec![n, TINY_OUT, 1])?,
        };
        let projected = match &self.projection {
            None => local,
            Some(proj) => {
                let [dl, npos] = self.local_shape;
                let l4 = g.reshape(local, vec![n, dl, npos, 1])?;
                let a = self.conv(g, p, l4, &proj.first)?;
                let a = g.relu(a);
                let b = self.conv(g, p, a, &proj.second)?;
                g.reshape(b, vec![n, self.global_dim(), npos])?
            }
        };
        Ok(EncoderVars {
            global,
            local,
            projected,
        })
    }

    /// Evaluates the encoder without recording gradients. Inputs must lie
    /// in `[-1, 1]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<EncoderOutput<T>> {
        let lim = 1.0 + INPUT_SLACK;
        if let Some(i) = x.data().iter().position(|v| !(v.to_f64_lossy().abs() <= lim)) {
            return Err(CoreError::invalid(
                "encode",
                format!("input value {} at flat index {i} outside [-1, 1]", x.data()[i]),
            ));
        }
        let g = Graph::new();
        let p = self.bind_frozen(&g);
        let xv = g.constant(x.clone());
        let out = self.forward(&g, &p, xv)?;
        Ok(EncoderOutput {
            global: (*g.value(out.global)).clone(),
            local: (*g.value(out.local)).clone(),
            projected: (*g.value(out.projected)).clone(),
        })
    }
}
