//! Central-difference gradient checking for tape functions in `f64`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of a gradient check, with the worst element located.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub elements_checked: usize,
    /// Denominator floor of the relative error, see [`noise_floor`].
    pub floor: f64,
}

/// Loss-rounding steps a central difference may be off by before it counts
/// against the check.
pub const NOISE_ULPS: f64 = 4.0;

/// `|a - n| / max(floor, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Denominator floor for a loss of magnitude `loss` and step `eps`. A
/// central difference cannot resolve slopes finer than
/// `ulp(loss) / (2 eps)`, so components below that scale (structural zeros
/// such as a shift removed by a later normalisation) are judged by absolute
/// error: they pass when within [`NOISE_ULPS`] resolution steps.
pub fn noise_floor(loss: f64, eps: f64) -> f64 {
    let resolution = loss.abs().max(1.0) * f64::EPSILON / (2.0 * eps);
    (NOISE_ULPS * resolution / DEFAULT_TOLERANCE).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of the scalar function `f` against central
/// differences with step `eps`, over every element of every input.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).clone();
    if base.numel() != 1 {
        return Err(Error::NonScalarLoss(base.shape().to_vec()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("inputs require grad"))
        .collect();

    if evaluate(&f, inputs)?.to_bits() != base.item().to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_element: 0,
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
        floor: noise_floor(base.item(), eps),
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let x = input.data()[e];
            work[i].data_mut()[e] = x + eps;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[e] = x - eps;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[e] = x;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[e];
            let err = relative_error(a, numeric, report.floor);
            report.elements_checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst_input = i;
                report.worst_element = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_report(f, inputs, eps).map(|r| r.max_rel_err)
}

/// Reduces any tensor to a scalar through fixed pseudo-random weights, so
/// every output element carries a distinct, order-one sensitivity.
pub fn weighted_sum(tape: &mut Tape<f64>, x: Var, salt: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let h = (i as u64 ^ salt)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .rotate_left(17)
                .wrapping_mul(0xBF58_476D_1CE4_E5B9);
            0.5 + (h >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    let wv = tape.constant(Tensor::new(&shape, w)?);
    let p = tape.mul(x, wv)?;
    Ok(tape.sum_all(p))
}

// ---- named suite ---------------------------------------------------------------

type Check = Box<dyn Fn(f64) -> Result<GradCheckReport>>;

/// One named entry of [`suite`].
pub struct SuiteItem {
    pub name: &'static str,
    run: Check,
}

impl SuiteItem {
    pub fn run(&self, eps: f64) -> Result<GradCheckReport> {
        (self.run)(eps)
    }
}

fn item(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Clone + 'static) -> SuiteItem {
    SuiteItem {
        name,
        run: Box::new(move |eps| grad_check_report(f.clone(), &inputs, eps)),
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("extent")
}

/// Random neighbour table whose last slot of every row is a self-pad.
fn padded_table(b: usize, n: usize, k: usize, seed: u64) -> (std::sync::Arc<crate::spatial::IndexTable>, Vec<bool>) {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(b * n * k);
    let mut valid = Vec::with_capacity(b * n * k);
    for _ in 0..b {
        for i in 0..n {
            for j in 0..k {
                let pad = j + 1 == k;
                data.push(if pad { i } else { (i + 1 + r.random_range(0..n - 1)) % n });
                valid.push(!pad);
            }
        }
    }
    (
        std::sync::Arc::new(crate::spatial::IndexTable::new(b, n, k, data).expect("table")),
        valid,
    )
}

/// Every differentiable operation, the three graph convolutions and a
/// micro end-to-end model, each reduced to a scalar with fixed weights.
pub fn suite() -> Vec<SuiteItem> {
    use crate::autodiff::{Activation, BatchNormState, EdgeInput, EdgeReduceSpec, EdgeReduction, ReduceKind};
    use crate::geometry::AngularMode;
    use crate::layers::{AggregationMode, Ctx, EdgeConv, EdgeGeometryVars, GraphBatch, ParamStore, VaConv};
    use rand::SeedableRng;
    use std::sync::Arc;

    let ws = weighted_sum;
    let mut items = vec![
        item("add", vec![uniform(&[3, 4], -1.0, 1.0, 1), uniform(&[4], -1.0, 1.0, 2)], move |t, v| {
            let y = t.add(v[0], v[1])?;
            ws(t, y, 1)
        }),
        item("sub", vec![uniform(&[3, 4], -1.0, 1.0, 3), uniform(&[3, 1], -1.0, 1.0, 4)], move |t, v| {
            let y = t.sub(v[0], v[1])?;
            ws(t, y, 2)
        }),
        item("mul", vec![uniform(&[2, 3, 4], -1.0, 1.0, 5), uniform(&[2, 1, 4], -1.0, 1.0, 6)], move |t, v| {
            let y = t.mul(v[0], v[1])?;
            ws(t, y, 3)
        }),
        item("scale", vec![uniform(&[5], -1.0, 1.0, 7)], move |t, v| {
            let y = t.scale(v[0], -2.5);
            ws(t, y, 4)
        }),
        item("leaky_relu", vec![uniform(&[4, 5], -1.0, 1.0, 8)], move |t, v| {
            let y = t.activation(v[0], Activation::LeakyRelu(0.2));
            ws(t, y, 5)
        }),
        item("cos", vec![uniform(&[6], -2.0, 2.0, 9)], move |t, v| {
            let y = t.cos(v[0]);
            ws(t, y, 6)
        }),
        item("matmul", vec![uniform(&[2, 3, 4], -1.0, 1.0, 10), uniform(&[4, 5], -1.0, 1.0, 11)], move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            ws(t, y, 7)
        }),
        item("sum", vec![uniform(&[3, 4, 2], -1.0, 1.0, 12)], move |t, v| {
            let y = t.reduce(ReduceKind::Sum, v[0], 1)?;
            ws(t, y, 8)
        }),
        item("max", vec![uniform(&[3, 4, 2], -1.0, 1.0, 13)], move |t, v| {
            let y = t.reduce(ReduceKind::Max, v[0], 1)?;
            ws(t, y, 9)
        }),
        item("sum_all", vec![uniform(&[3, 4], -1.0, 1.0, 14)], move |t, v| {
            let y = t.mul(v[0], v[0])?;
            Ok(t.sum_all(y))
        }),
        item("concat", vec![uniform(&[2, 3, 2], -1.0, 1.0, 15), uniform(&[2, 3, 1], -1.0, 1.0, 16)], move |t, v| {
            let y = t.concat(&[v[0], v[1]], 2)?;
            ws(t, y, 10)
        }),
        item("reshape", vec![uniform(&[2, 6], -1.0, 1.0, 17)], move |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            ws(t, y, 11)
        }),
        item("norm", vec![uniform(&[2, 3, 4, 3], -1.0, 1.0, 18)], move |t, v| {
            let y = t.norm(v[0])?;
            ws(t, y, 12)
        }),
        item("elevation", vec![uniform(&[2, 3, 4, 3], -1.0, 1.0, 19)], move |t, v| {
            let d = t.norm(v[0])?;
            let y = t.elevation(v[0], d)?;
            ws(t, y, 13)
        }),
        item("azimuth", vec![uniform(&[2, 3, 4, 3], -1.0, 1.0, 20)], move |t, v| {
            let y = t.azimuth(v[0])?;
            ws(t, y, 14)
        }),
        item("distance_attention", vec![uniform(&[2, 3, 5], 0.1, 1.0, 21)], move |t, v| {
            let y = t.distance_attention(v[0])?;
            ws(t, y, 15)
        }),
        item("cross_entropy", vec![uniform(&[4, 5], -2.0, 2.0, 22)], move |t, v| t.cross_entropy(v[0], &[0, 3, 4, 1])),
    ];

    for (name, training) in [("batch_norm_train", true), ("batch_norm_eval", false)] {
        let mut state = BatchNormState::new(3);
        state.running_mean = vec![0.1, -0.2, 0.3];
        state.running_var = vec![0.5, 1.2, 2.0];
        let state = Arc::new(state);
        let mut gamma = uniform(&[3], 0.5, 1.5, 24);
        gamma.data_mut()[1] = -gamma.data()[1];
        items.push(item(
            name,
            vec![uniform(&[2, 4, 3], -1.0, 1.0, 23), gamma, uniform(&[3], -0.5, 0.5, 25)],
            move |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], &state, training)?;
                ws(t, y, 16)
            },
        ));
    }

    let (idx, valid) = padded_table(2, 5, 3, 26);
    {
        let idx = idx.clone();
        items.push(item("gather", vec![uniform(&[2, 5, 3], -1.0, 1.0, 27)], move |t, v| {
            let y = t.gather_rows(v[0], &idx)?;
            ws(t, y, 17)
        }));
    }
    {
        let valid = valid.clone();
        items.push(item("masked_max", vec![uniform(&[2, 5, 3, 4], -1.0, 1.0, 28)], move |t, v| {
            let y = t.masked_max_neighbors(v[0], &valid)?;
            ws(t, y, 18)
        }));
    }
    for (name, gather, reduction) in [
        ("edge_reduce_sum", true, EdgeReduction::Sum),
        ("edge_reduce_max", false, EdgeReduction::Max),
    ] {
        let (idx, valid) = (idx.clone(), valid.clone());
        let state = Arc::new(BatchNormState::<f64>::new(4));
        let src = if gather { uniform(&[2, 5, 4], -1.0, 1.0, 29) } else { uniform(&[2, 5, 3, 4], -1.0, 1.0, 29) };
        items.push(item(
            name,
            vec![src, uniform(&[4], 0.5, 1.5, 30), uniform(&[4], -0.5, 0.5, 31), uniform(&[2, 5, 3], -1.0, 1.0, 32)],
            move |t, v| {
                let input = if gather {
                    EdgeInput::GatherDiff { y: v[0], idx: idx.clone() }
                } else {
                    EdgeInput::Dense(v[0])
                };
                let spec = EdgeReduceSpec {
                    gamma: v[1],
                    beta: v[2],
                    state: &state,
                    training: true,
                    activation: Activation::LeakyRelu(0.2),
                    weight: Some(v[3]),
                    reduction,
                    valid: &valid,
                };
                let (y, _) = t.edge_reduce(input, spec)?;
                ws(t, y, 19)
            },
        ));
    }

    // graph convolutions on random clouds with a padded neighbour table
    let (b, n, k, cin, cout) = (2, 6, 4, 3, 4);
    let (idx, valid) = padded_table(b, n, k, 33);
    let graph = Arc::new(GraphBatch { idx, valid });
    let conv_item = |name: &'static str, which: u8| {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(34);
        let va = VaConv::new(&mut store, &mut rng, "v", cin, cout, 1.0, AggregationMode::Sum, AngularMode::CosOfRatio);
        let ec = EdgeConv::new(&mut store, &mut rng, "e", cin, cout);
        let mut inputs = vec![uniform(&[b, n, cin], -1.0, 1.0, 35), uniform(&[b, n, 3], -1.0, 1.0, 36)];
        inputs.extend(store.values().iter().cloned());
        let store = Arc::new(store);
        let graph = graph.clone();
        item(name, inputs, move |t, v| {
            let mut ctx = Ctx::with_vars(t, &store, true, v[2..].to_vec())?;
            let y = match which {
                0 => {
                    let geo = EdgeGeometryVars::compute(ctx.tape, v[1], &graph)?;
                    va.local(&mut ctx, v[0], &geo, &graph)?
                }
                1 => {
                    let geo = EdgeGeometryVars::compute(ctx.tape, v[1], &graph)?;
                    va.global(&mut ctx, v[0], &geo, &graph)?
                }
                _ => ec.forward(&mut ctx, v[0], &graph)?,
            };
            ws(t, y, 20)
        })
    };
    items.push(conv_item("vaconv_local", 0));
    items.push(conv_item("vaconv_global", 1));
    items.push(conv_item("edgeconv", 2));
    items.push(micro_model_item());
    items
}

/// Micro end-to-end network: N = 16, k = 4, every width 8, training mode.
/// Four clouds, because head batch norm over two rows maps every channel
/// to +-1 and leaves the loss almost constant.
fn micro_model_item() -> SuiteItem {
    use crate::model::{Model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    let n = 16;
    let model = Model::<f64>::new(ModelConfig {
        seed: 5,
        ..ModelConfig::micro(3, n)
    })
    .expect("micro config is valid");
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(37);
    let clouds: Vec<Vec<[f64; 3]>> = (0..4)
        .map(|_| {
            (0..n)
                .map(|_| [0; 3].map(|_| r.random_range(-0.7..0.7)))
                .collect()
        })
        .collect();
    let batch = Arc::new(model.prepare(&clouds, None, None).expect("batch"));
    let mut inputs = vec![batch.positions.clone(), batch.features.clone()];
    inputs.extend(model.store.values().iter().cloned());
    let model = Arc::new(model);
    item("model_micro", inputs, move |t, v| {
        let f = model.forward_with_leaves(t, &batch, true, v)?;
        t.cross_entropy(f.logits, &[0, 2, 1, 0])
    })
}

/// Runs the suite (optionally only items whose name contains `only`).
pub fn run_suite(only: Option<&str>, eps: f64) -> Vec<(&'static str, Result<GradCheckReport>)> {
    suite()
        .into_iter()
        .filter(|it| only.is_none_or(|o| it.name.contains(o)))
        .map(|it| (it.name, it.run(eps)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ReduceKind;

    #[test]
    fn matmul_passes() {
        let a = Tensor::from_f64(&[2, 3], &[0.1, -0.4, 0.9, 1.3, 0.2, -0.7]).unwrap();
        let b = Tensor::from_f64(&[3, 2], &[0.5, 0.6, -1.1, 0.3, 0.8, -0.2]).unwrap();
        let err = grad_check(
            |t, v| {
                let m = t.matmul(v[0], v[1])?;
                weighted_sum(t, m, 1)
            },
            &[a, b],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn max_away_from_ties_passes() {
        let x = Tensor::from_f64(&[2, 3], &[0.1, 0.9, 0.4, -0.3, -0.8, 0.6]).unwrap();
        let err = grad_check(
            |t, v| {
                let m = t.reduce(ReduceKind::Max, v[0], 1)?;
                weighted_sum(t, m, 2)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn detects_wrong_gradient_and_non_scalar() {
        // abs via max(x, -x) is fine; a function whose output is not scalar is not
        let x = Tensor::from_f64(&[2], &[0.3, 0.4]).unwrap();
        assert!(matches!(
            grad_check(|t, v| Ok(t.scale(v[0], 2.0)), &[x.clone()], DEFAULT_EPS),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn detached_branch_is_caught() {
        // x * stop_grad(x): the tape sees half the true slope
        let x = Tensor::from_f64(&[3], &[0.3, -0.7, 1.1]).unwrap();
        let r = grad_check_report(
            |t, v| {
                let c = t.constant(t.value(v[0]).clone());
                let y = t.mul(v[0], c)?;
                Ok(t.sum_all(y))
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!((r.max_rel_err - 1.0 / 3.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn floor_tracks_difference_resolution() {
        assert!((noise_floor(1.0, 1e-6) - 4.0 * f64::EPSILON / 2e-6 / DEFAULT_TOLERANCE).abs() < 1e-20);
        assert_eq!(noise_floor(1e-3, 1e-6), noise_floor(1.0, 1e-6));
        assert!(noise_floor(100.0, 1e-6) > noise_floor(1.0, 1e-6));
        assert_eq!(relative_error(0.0, 0.0, 1e-8), 0.0);
    }

    #[test]
    fn suite_items_pass() {
        // the full model is exercised by the acceptance suite
        for (name, r) in suite().into_iter().filter(|i| i.name != "model_micro").map(|i| (i.name, i.run(DEFAULT_EPS))) {
            let r = r.unwrap();
            assert!(r.max_rel_err < DEFAULT_TOLERANCE, "{name}: {r:?}");
        }
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::from_f64(&[1], &[0.3]).unwrap();
        let r = grad_check(
            |t, v| {
                calls.set(calls.get() + 1.0);
                let s = t.scale(v[0], calls.get());
                Ok(t.sum_all(s))
            },
            &[x],
            DEFAULT_EPS,
        );
        assert!(matches!(r, Err(Error::NonDeterministic)));
    }
}
