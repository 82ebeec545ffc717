//! Finite-difference verification of every differentiable layer.
//!
//! Each layer is exercised on several seeded random shapes in f64. The
//! analytic gradient of `sum(layer(inputs) * probe)` (or of the loss itself
//! for loss layers) is compared against central differences for every
//! input element.

use std::fmt;

use crate::autograd::{finite_difference_grad, Graph, Var};
use crate::error::{GcnError, Result};
use crate::layers::{deconv_output_size, ConvSpec, DeconvSpec, PoolSpec};
use crate::tensor::{Init, RngState, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
/// Gradients smaller than this on both sides count as agreeing zeros.
pub const DEFAULT_ABS_FLOOR: f64 = 1e-7;
const MAX_REDRAWS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Matmul,
    FullyConnected,
    Conv2d,
    Deconv2d,
    MaxPool2d,
    LeakyRelu,
    Concat,
    Reshape,
    SoftmaxCrossEntropy,
    MsePixelLoss,
}

impl LayerKind {
    pub const ALL: [LayerKind; 10] = [
        LayerKind::Matmul,
        LayerKind::FullyConnected,
        LayerKind::Conv2d,
        LayerKind::Deconv2d,
        LayerKind::MaxPool2d,
        LayerKind::LeakyRelu,
        LayerKind::Concat,
        LayerKind::Reshape,
        LayerKind::SoftmaxCrossEntropy,
        LayerKind::MsePixelLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Matmul => "matmul",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Deconv2d => "deconv2d",
            LayerKind::MaxPool2d => "max_pool2d",
            LayerKind::LeakyRelu => "leaky_relu",
            LayerKind::Concat => "concat",
            LayerKind::Reshape => "reshape",
            LayerKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            LayerKind::MsePixelLoss => "mse_pixel_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub layers: Vec<LayerKind>,
    pub cases_per_layer: usize,
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub seed: u64,
    /// Corrupt the analytic gradient of one layer (scaled by 1.5) to
    /// exercise the failure path.
    pub inject_fault: Option<LayerKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            layers: LayerKind::ALL.to_vec(),
            cases_per_layer: 5,
            eps: DEFAULT_EPS,
            rel_tol: DEFAULT_REL_TOL,
            abs_floor: DEFAULT_ABS_FLOOR,
            seed: 0x6c61_7965_7273,
            inject_fault: None,
        }
    }
}

/// Worst disagreement found in one case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub max_rel_error: f64,
    pub input: usize,
    pub element: usize,
    pub shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct LayerReport {
    pub layer: LayerKind,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
}

impl LayerReport {
    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn worst_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.max_rel_error)
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub layers: Vec<LayerReport>,
    pub rel_tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LayerReport> {
        self.layers.iter().filter(|l| !l.passed)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            let status = if l.passed { "ok" } else { "FAIL" };
            write!(
                f,
                "{:<24} {:>4}  cases={}  worst_rel_err={:.3e}",
                l.layer.name(),
                status,
                l.cases.len(),
                l.worst_rel_error()
            )?;
            if let (false, Some(w)) = (l.passed, l.worst()) {
                write!(
                    f,
                    "  at input {} element {} (shapes {:?})",
                    w.input, w.element, w.shapes
                )?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Relative error; elements where both gradients are below `abs_floor` are
/// treated as agreeing zeros.
fn element_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale <= abs_floor {
        return 0.0;
    }
    (analytic - numeric).abs() / scale
}

/// Compare `build`'s backward pass against central differences for every
/// element of every input. `corrupt` scales the analytic gradient.
pub fn check_case<F>(
    build: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    abs_floor: f64,
    corrupt: f64,
) -> Result<CaseResult>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = CaseResult {
        max_rel_error: 0.0,
        input: 0,
        element: 0,
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| x.zeros_like());
        let numeric = finite_difference_grad(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let loss = build(&mut g, &vars)?;
                Ok(g.value(loss).item())
            },
            x,
            eps,
        )?;
        for (e, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let err = element_error(a * corrupt, n, abs_floor);
            if err > worst.max_rel_error {
                worst.max_rel_error = err;
                worst.input = i;
                worst.element = e;
            }
        }
    }
    Ok(worst)
}

fn gauss(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    Tensor::create(shape, Init::Gaussian { mean: 0.0, std: 1.0 }, rng).expect("valid shape")
}

fn between(rng: &mut RngState, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Project a non-scalar output to a scalar with a fixed random probe.
fn project(g: &mut Graph<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = g.constant(probe.clone());
    let prod = g.mul(out, p)?;
    Ok(g.sum(prod))
}

/// Values spread at least 0.05 apart, in random order, so pooling windows
/// have a unique maximum and no element sits within `eps` of a kink.
fn spread_values(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let data = idx
        .into_iter()
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.1 + 0.05 + rng.uniform(-0.01, 0.01))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn run_layer(
    layer: LayerKind,
    case: usize,
    rng: &mut RngState,
    opts: &GradcheckOptions,
) -> Result<CaseResult> {
    let corrupt = if opts.inject_fault == Some(layer) { 1.5 } else { 1.0 };
    let check = |build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]| {
        check_case(build, inputs, opts.eps, opts.abs_floor, corrupt)
    };
    match layer {
        LayerKind::Matmul => {
            let (m, k, n) = (between(rng, 1, 5), between(rng, 1, 6), between(rng, 1, 5));
            let inputs = [gauss(&[m, k], rng), gauss(&[k, n], rng)];
            let probe = gauss(&[m, n], rng);
            check(
                &|g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    project(g, y, &probe)
                },
                &inputs,
            )
        }
        LayerKind::FullyConnected => {
            let (b, i, o) = (between(rng, 1, 4), between(rng, 1, 6), between(rng, 1, 5));
            let inputs = [gauss(&[b, i], rng), gauss(&[i, o], rng), gauss(&[o], rng)];
            let probe = gauss(&[b, o], rng);
            check(
                &|g, v| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    project(g, y, &probe)
                },
                &inputs,
            )
        }
        LayerKind::Conv2d => {
            let k = between(rng, 1, 3);
            let s = between(rng, 1, 2);
            let p = if k > 1 { rng.below(2) } else { 0 };
            let oh = between(rng, 2, 3) + case % 2;
            let h = (oh - 1) * s + k - 2 * p;
            let spec = ConvSpec {
                in_channels: between(rng, 1, 3),
                out_channels: between(rng, 1, 3),
                kernel_size: k,
                stride: s,
                pad: p,
            };
            let n = between(rng, 1, 2);
            let inputs = [
                gauss(&[n, spec.in_channels, h, h], rng),
                gauss(&[spec.out_channels, spec.in_channels, k, k], rng),
                gauss(&[spec.out_channels], rng),
            ];
            let probe = gauss(&[n, spec.out_channels, oh, oh], rng);
            check(
                &|g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], &spec)?;
                    project(g, y, &probe)
                },
                &inputs,
            )
        }
        LayerKind::Deconv2d => {
            let k = between(rng, 2, 4);
            let s = between(rng, 1, 2);
            let p = rng.below(2);
            let ih = between(rng, 2, 3);
            let oh = deconv_output_size(ih, s, k, p)?;
            let spec = DeconvSpec {
                in_channels: between(rng, 1, 3),
                out_channels: between(rng, 1, 3),
                kernel_size: k,
                stride: s,
                pad: p,
            };
            let n = between(rng, 1, 2);
            let inputs = [
                gauss(&[n, spec.in_channels, ih, ih], rng),
                gauss(&[spec.in_channels, spec.out_channels, k, k], rng),
                gauss(&[spec.out_channels], rng),
            ];
            let probe = gauss(&[n, spec.out_channels, oh, oh], rng);
            check(
                &|g, v| {
                    let y = g.deconv2d(v[0], v[1], v[2], &spec)?;
                    project(g, y, &probe)
                },
                &inputs,
            )
        }
        LayerKind::MaxPool2d => {
            let spec = PoolSpec {
                kernel_size: between(rng, 2, 3),
                stride: between(rng, 1, 2),
            };
            let oh = between(rng, 2, 3);
            let h = (oh - 1) * spec.stride + spec.kernel_size;
            let (n, c) = (between(rng, 1, 2), between(rng, 1, 2));
            let inputs = [spread_values(&[n, c, h, h], rng)];
            let probe = gauss(&[n, c, oh, oh], rng);
            check(
                &|g, v| {
                    let y = g.max_pool2d(v[0], &spec)?;
                    project(g, y, &probe)
                },
                &inputs,
            )
        }
        LayerKind::LeakyRelu => {
            let slope = [0.1, 0.2, 0.0, 0.5, rng.uniform(0.0, 1.0)][case % 5];
            let shape = [between(rng, 1, 3), between(rng, 2, 6)];
            let inputs = [spread_values(&shape, rng)];
            let probe = gauss(&shape, rng);
            check(
                &|g, v| {
                    let y = g.leaky_relu(v[0], slope);
                    project(g, y, &probe)
                },
                &inputs,
            )
        }
        LayerKind::Concat => {
            let rank = between(rng, 1, 3);
            let axis = rng.below(rank);
            let base: Vec<usize> = (0..rank).map(|_| between(rng, 1, 3)).collect();
            let parts = between(rng, 2, 3);
            let inputs: Vec<Tensor<f64>> = (0..parts)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = between(rng, 1, 3);
                    gauss(&s, rng)
                })
                .collect();
            let mut out_shape = base.clone();
            out_shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
            let probe = gauss(&out_shape, rng);
            check(
                &|g, v| {
                    let y = g.concat(v, axis)?;
                    project(g, y, &probe)
                },
                &inputs,
            )
        }
        LayerKind::Reshape => {
            let (a, b, c) = (between(rng, 1, 3), between(rng, 1, 4), between(rng, 1, 3));
            let inputs = [gauss(&[a, b * c], rng)];
            let target = [c, a, b];
            let probe = gauss(&target, rng);
            check(
                &|g, v| {
                    let y = g.reshape(v[0], &target)?;
                    project(g, y, &probe)
                },
                &inputs,
            )
        }
        LayerKind::SoftmaxCrossEntropy => {
            let (b, k) = (between(rng, 1, 4), between(rng, 2, 6));
            let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
            let inputs = [gauss(&[b, k], rng)];
            check(&|g, v| g.softmax_cross_entropy(v[0], &labels), &inputs)
        }
        LayerKind::MsePixelLoss => {
            let shape = [between(rng, 1, 3), between(rng, 1, 3), between(rng, 1, 3), 2];
            let inputs = [gauss(&shape, rng), gauss(&shape, rng)];
            check(&|g, v| g.mse_pixel_loss(v[0], v[1]), &inputs)
        }
    }
}

/// Run the finite-difference suite over the selected layers.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.cases_per_layer == 0 {
        return Err(GcnError::Config("cases_per_layer must be >= 1".into()));
    }
    let root = RngState::new(opts.seed);
    let mut layers = Vec::with_capacity(opts.layers.len());
    for (li, &layer) in opts.layers.iter().enumerate() {
        let mut rng = root.fork(li as u64 + 1);
        let mut cases = Vec::with_capacity(opts.cases_per_layer);
        for case in 0..opts.cases_per_layer {
            // Redraw until the case differs in shape from earlier ones.
            let mut result = run_layer(layer, case, &mut rng, opts)?;
            for _ in 0..MAX_REDRAWS {
                if !cases.iter().any(|c: &CaseResult| c.shapes == result.shapes) {
                    break;
                }
                result = run_layer(layer, case, &mut rng, opts)?;
            }
            cases.push(result);
        }
        let passed = cases.iter().all(|c| c.max_rel_error < opts.rel_tol);
        layers.push(LayerReport {
            layer,
            cases,
            passed,
        });
    }
    Ok(GradcheckReport {
        layers,
        rel_tol: opts.rel_tol,
    })
}
