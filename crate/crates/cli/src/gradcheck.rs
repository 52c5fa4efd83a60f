//! Finite-difference suite over every graph primitive and the full losses.

use imoc_core::estimators::{
    mi_pair_loss, total_loss_base, total_loss_extension, EntropyConfig, Estimator, SimilarityConfig,
};
use imoc_core::models::{Encoder, EncoderConfig};
use imoc_core::rng::stream;
use imoc_diffmath::{finite_difference_check, Conv2dSpec, Graph, GradCheckReport, Result, Tensor, Var};
use rand::Rng;

/// One row of the suite.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub report: GradCheckReport,
}

struct Gen(rand_chacha::ChaCha8Rng);

impl Gen {
    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.random_range(-1.0..1.0))
    }

    /// Entries with magnitude in `[0.2, 1)`, away from kinks at zero.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let m = self.0.random_range(0.2..1.0);
            if self.0.random::<bool>() {
                m
            } else {
                -m
            }
        })
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.random_range(0.5..2.0))
    }
}

/// `Σ w ⊙ y` with fixed weights, turning any output into a scalar.
fn project(g: &Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y);
    let mut rng = stream(seed, &[0x9c]);
    let w = g.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var> + Sync + Send>);

fn op_cases(gen: &mut Gen) -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($p:expr),*], $f:expr) => {
            cases.push(($name, vec![$($p),*], Box::new($f)));
        };
    }
    case!("matmul", [gen.tensor(&[3, 4]), gen.tensor(&[4, 2])], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 1)
    });
    case!("matmul_transposed", [gen.tensor(&[4, 3]), gen.tensor(&[2, 4])], |g, v| {
        let y = g.matmul_t(v[0], v[1], true, true)?;
        project(g, y, 2)
    });
    case!("conv2d", [gen.tensor(&[2, 2, 5, 5]), gen.tensor(&[3, 2, 3, 3])], |g, v| {
        let y = g.conv2d(v[0], v[1], Conv2dSpec::new(2, 1))?;
        project(g, y, 3)
    });
    case!("add_bias", [gen.tensor(&[3, 4]), gen.tensor(&[4])], |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        project(g, y, 4)
    });
    case!("add_channel_bias", [gen.tensor(&[2, 3, 2, 2]), gen.tensor(&[3])], |g, v| {
        let y = g.add_channel_bias(v[0], v[1])?;
        project(g, y, 5)
    });
    case!("add", [gen.tensor(&[3, 3]), gen.tensor(&[3, 3])], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 6)
    });
    case!("sub", [gen.tensor(&[3, 3]), gen.tensor(&[3, 3])], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, 7)
    });
    case!("mul", [gen.tensor(&[3, 3]), gen.tensor(&[3, 3])], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 8)
    });
    case!("scale", [gen.tensor(&[5])], |g, v| {
        let y = g.scale(v[0], -1.7);
        project(g, y, 9)
    });
    case!("add_scalar", [gen.tensor(&[5])], |g, v| {
        let y = g.add_scalar(v[0], 0.3);
        let y = g.mul(y, y)?;
        project(g, y, 10)
    });
    case!("relu", [gen.off_zero(&[6])], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 11)
    });
    case!("tanh", [gen.tensor(&[6])], |g, v| {
        let y = g.tanh(v[0]);
        project(g, y, 12)
    });
    case!("softplus", [gen.tensor(&[6])], |g, v| {
        let y = g.softplus(v[0]);
        project(g, y, 13)
    });
    case!("exp", [gen.tensor(&[6])], |g, v| {
        let y = g.exp(v[0]);
        project(g, y, 14)
    });
    case!("log", [gen.positive(&[6])], |g, v| {
        let y = g.log(v[0])?;
        project(g, y, 15)
    });
    case!("logsumexp_axis0", [gen.tensor(&[3, 4])], |g, v| {
        let y = g.logsumexp(v[0], 0)?;
        project(g, y, 16)
    });
    case!("logsumexp_axis1", [gen.tensor(&[3, 4])], |g, v| {
        let y = g.logsumexp(v[0], 1)?;
        project(g, y, 17)
    });
    case!("masked_logsumexp", [gen.tensor(&[4, 4])], |g, v| {
        let mask = (0..16).map(|i| i % 5 != 0).collect();
        let y = g.masked_logsumexp(v[0], mask)?;
        project(g, y, 18)
    });
    case!("sum", [gen.tensor(&[3, 4])], |g, v| {
        let y = g.sum(v[0], 1)?;
        project(g, y, 19)
    });
    case!("mean", [gen.tensor(&[3, 4])], |g, v| {
        let y = g.mean(v[0], 0)?;
        project(g, y, 20)
    });
    case!("sum_all", [gen.tensor(&[3, 4])], |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.sum_all(y))
    });
    case!("mean_all", [gen.tensor(&[3, 4])], |g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.mean_all(y))
    });
    case!("pnorm_l1", [gen.off_zero(&[3, 4])], |g, v| {
        let y = g.pnorm(v[0], 1)?;
        project(g, y, 21)
    });
    case!("pnorm_l2", [gen.off_zero(&[3, 4])], |g, v| {
        let y = g.pnorm(v[0], 2)?;
        project(g, y, 22)
    });
    case!("sq_norm", [gen.tensor(&[3, 4])], |g, v| {
        let y = g.sq_norm(v[0])?;
        project(g, y, 23)
    });
    case!("reshape", [gen.tensor(&[3, 4])], |g, v| {
        let y = g.reshape(v[0], vec![2, 6])?;
        let y = g.mul(y, y)?;
        project(g, y, 24)
    });
    case!("transpose", [gen.tensor(&[3, 4])], |g, v| {
        let y = g.transpose(v[0])?;
        project(g, y, 25)
    });
    case!("take", [gen.tensor(&[3, 4])], |g, v| {
        let y = g.take(v[0], vec![0, 5, 5, 11], vec![2, 2])?;
        project(g, y, 26)
    });
    case!("select_rows", [gen.tensor(&[4, 3])], |g, v| {
        let y = g.select_rows(v[0], &[3, 1, 1])?;
        project(g, y, 27)
    });
    case!("concat_rows", [gen.tensor(&[2, 3]), gen.tensor(&[1, 3])], |g, v| {
        let y = g.concat_rows(&[v[0], v[1], v[0]])?;
        project(g, y, 28)
    });
    case!("subsample2d", [gen.tensor(&[2, 2, 6, 6])], |g, v| {
        let y = g.subsample2d(v[0], 1, 2, 2, 2)?;
        project(g, y, 29)
    });
    cases
}

/// Batch of `rows` inputs in `(-1, 1)` for `shape`.
fn inputs(gen: &mut Gen, rows: usize, shape: [usize; 3]) -> Tensor<f64> {
    let mut s = vec![rows];
    s.extend(shape);
    Tensor::from_fn(&s, |_| gen.0.random_range(-0.9..0.9))
}

/// Loss through an encoder whose parameters are the checked tensors.
fn encoder_case(
    name: &'static str,
    cfg: EncoderConfig,
    x: Tensor<f64>,
    loss: impl Fn(&Graph<f64>, Var, Var, SimilarityConfig) -> Result<Var> + Sync + Send + 'static,
) -> Case {
    let enc = Encoder::<f64>::build(cfg, 7).expect("suite encoders build");
    let params = enc.params().to_vec();
    let sim = SimilarityConfig {
        c1: enc.global_dim() as f64,
        c2: 20.0,
    };
    (
        name,
        params,
        Box::new(move |g, v| {
            let xv = g.constant(x.clone());
            let out = enc
                .forward(g, v, xv)
                .map_err(core_err)?;
            loss(g, out.global, out.projected, sim)
        }),
    )
}

fn core_err(e: imoc_core::CoreError) -> imoc_diffmath::DiffError {
    match e {
        imoc_core::CoreError::Diff(d) => d,
        other => imoc_diffmath::DiffError::InvalidArgument {
            op: "loss",
            detail: other.to_string(),
        },
    }
}

fn loss_cases(gen: &mut Gen) -> Vec<Case> {
    let beta = 0.5;
    let tiny = EncoderConfig::tiny(6);
    let small = EncoderConfig {
        ndf: 2,
        nrkhs: 4,
        ndepth: 1,
        ..EncoderConfig::small([1, 32, 32])
    };
    vec![
        encoder_case("loss_base_nce_l1", tiny.clone(), inputs(gen, 4, [1, 1, 6]), move |g, z, _, sim| {
            let ent = EntropyConfig { p: 1, squared: false };
            total_loss_base(g, z, beta, ent, Estimator::Nce, sim).map(|r| r.0).map_err(core_err)
        }),
        encoder_case("loss_base_nce_l2sq", tiny.clone(), inputs(gen, 4, [1, 1, 6]), move |g, z, _, sim| {
            let ent = EntropyConfig { p: 2, squared: true };
            total_loss_base(g, z, beta, ent, Estimator::Nce, sim).map(|r| r.0).map_err(core_err)
        }),
        encoder_case("loss_base_jsd", tiny.clone(), inputs(gen, 4, [1, 1, 6]), move |g, z, _, sim| {
            let ent = EntropyConfig { p: 2, squared: false };
            total_loss_base(g, z, beta, ent, Estimator::Jsd, sim).map(|r| r.0).map_err(core_err)
        }),
        encoder_case("loss_nce_only", tiny.clone(), inputs(gen, 6, [1, 1, 6]), |g, z, _, sim| {
            mi_pair_loss(g, z, Estimator::Nce, sim).map_err(core_err)
        }),
        encoder_case("loss_extension_tiny", tiny, inputs(gen, 4, [1, 1, 6]), move |g, z, l, sim| {
            let ent = EntropyConfig { p: 1, squared: false };
            total_loss_extension(g, z, l, beta, ent, Estimator::Nce, sim)
                .map(|r| r.0)
                .map_err(core_err)
        }),
        encoder_case("loss_extension_small", small, inputs(gen, 4, [1, 32, 32]), move |g, z, l, sim| {
            let ent = EntropyConfig { p: 1, squared: false };
            total_loss_extension(g, z, l, beta, ent, Estimator::Nce, sim)
                .map(|r| r.0)
                .map_err(core_err)
        }),
    ]
}

/// Runs every case. Each row's error is the max over all coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut gen = Gen(stream(seed, &[0x6c]));
    let mut cases = op_cases(&mut gen);
    cases.extend(loss_cases(&mut gen));
    cases
        .into_iter()
        .map(|(name, params, f)| {
            let report = finite_difference_check(&params, f)?;
            Ok(GradCheckRow {
                name: name.to_string(),
                report,
            })
        })
        .collect()
}
