//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use deconvseg::infer::{AggregationMode, PlacedMap};
use deconvseg::layers::*;
use deconvseg::net::{build_deconvnet, build_deconvnet_for_input, LayerKind, LayerSpec, Model, NetworkConfig};
use deconvseg::{BoxGeometry, Shape4, Tensor};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w).unwrap()
}

pub fn rand_tensor(s: Shape4, seed: u64) -> Tensor<f64> {
    Tensor::gaussian(s, 1.0, seed).unwrap()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-6;
pub const REL_FLOOR: f64 = 1e-6;
/// Steps tried, largest first, by the pattern-aware difference.
pub const STEP_LADDER: [f64; 7] = [1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10, 1e-11];

/// Central difference of `f` with respect to `x[i]`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Max relative error between `analytic` and central differences at every
/// index (or at `indices` when given).
pub fn check_grad(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: Option<&[usize]>,
) -> f64 {
    let h = FD_STEP;
    let all: Vec<usize> = (0..x.len()).collect();
    let idx = indices.unwrap_or(&all);
    idx.iter()
        .map(|&i| rel_err(analytic[i], central_difference(f, x, i, h), REL_FLOOR))
        .fold(0.0, f64::max)
}

fn with_data(s: Shape4, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(s, v.to_vec()).unwrap()
}

/// `sum(r * y)` as a scalar probe of a tensor-valued function.
fn probe(r: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

/// Inputs whose magnitude stays clear of zero, away from ReLU kinks.
fn off_kink(s: Shape4, seed: u64) -> Tensor<f64> {
    rand_tensor(s, seed).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

/// Inputs with distinct values inside every 2x2 window.
fn distinct(s: Shape4, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..s.len()).map(|i| i as f64 * 0.37).collect();
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    Tensor::from_vec(s, v).unwrap()
}

pub struct GradCase {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

fn conv_cases(deconv: bool, out: &mut Vec<GradCase>) {
    let label = if deconv { "deconv" } else { "conv" };
    for (k, stride, pad, h) in [(3, 1, 1, 5), (2, 2, 0, 4), (3, 2, 1, 5), (1, 1, 0, 3), (4, 1, 0, 4)] {
        let (a, b) = (3, 2);
        let wshape = shape(a, b, k, k);
        let bias_len = if deconv { b } else { a };
        let xs = shape(2, if deconv { a } else { b }, h, h);
        let x = rand_tensor(xs, 1);
        let p = ConvParams::new(rand_tensor(wshape, 2), rand_tensor(shape(1, bias_len, 1, 1), 3).into_vec(), stride, pad).unwrap();
        let fwd = |x: &Tensor<f64>, p: &ConvParams<f64>| {
            if deconv {
                deconv2d_forward(x, p).unwrap()
            } else {
                conv2d_forward(x, p).unwrap()
            }
        };
        let y = fwd(&x, &p);
        let r = rand_tensor(y.shape(), 4);
        let g = if deconv {
            deconv2d_backward(&x, &p, &r).unwrap()
        } else {
            conv2d_backward(&x, &p, &r).unwrap()
        };
        let ex = check_grad(&mut |v| probe(&r, &fwd(&with_data(xs, v), &p)), x.data(), g.d_input.data(), None);
        let ew = check_grad(
            &mut |v| {
                let q = ConvParams::new(with_data(wshape, v), p.bias.clone(), stride, pad).unwrap();
                probe(&r, &fwd(&x, &q))
            },
            p.weights.data(),
            &g.d_params[0],
            None,
        );
        let eb = check_grad(
            &mut |v| {
                let q = ConvParams::new(p.weights.clone(), v.to_vec(), stride, pad).unwrap();
                probe(&r, &fwd(&x, &q))
            },
            &p.bias,
            &g.d_params[1],
            None,
        );
        out.push(GradCase {
            name: format!("{label} k{k} s{stride} p{pad}"),
            error: ex.max(ew).max(eb),
            tolerance: 1e-4,
        });
    }
}

fn batchnorm_cases(out: &mut Vec<GradCase>) {
    for mode in [Mode::Train, Mode::Infer] {
        let xs = shape(3, 2, 3, 3);
        let x = rand_tensor(xs, 5);
        let mut st = BatchNormState::<f64>::new(2, BatchNormSettings::default()).unwrap();
        st.gamma = vec![1.3, -0.7];
        st.beta = vec![0.2, 0.5];
        // Seed running statistics from an unrelated batch.
        let (_, stats) = batchnorm_apply(&rand_tensor(xs, 6), &st, Mode::Train).unwrap();
        st.record(&stats.unwrap());
        let fwd = |x: &Tensor<f64>, st: &BatchNormState<f64>| batchnorm_apply(x, st, mode).unwrap().0;
        let r = rand_tensor(xs, 7);
        let g = batchnorm_backward_in(&x, &st, mode, &r).unwrap();
        let ex = check_grad(&mut |v| probe(&r, &fwd(&with_data(xs, v), &st)), x.data(), g.d_input.data(), None);
        let eg = check_grad(
            &mut |v| {
                let mut s2 = st.clone();
                s2.gamma = v.to_vec();
                probe(&r, &fwd(&x, &s2))
            },
            &st.gamma,
            &g.d_params[0],
            None,
        );
        let eb = check_grad(
            &mut |v| {
                let mut s2 = st.clone();
                s2.beta = v.to_vec();
                probe(&r, &fwd(&x, &s2))
            },
            &st.beta,
            &g.d_params[1],
            None,
        );
        out.push(GradCase {
            name: format!("batchnorm {mode:?}").to_lowercase(),
            error: ex.max(eg).max(eb),
            tolerance: 1e-3,
        });
    }
}

/// Finite-difference checks of every layer's backward pass.
pub fn layer_gradient_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    conv_cases(false, &mut out);
    conv_cases(true, &mut out);
    batchnorm_cases(&mut out);

    let xs = shape(2, 3, 4, 4);
    let x = off_kink(xs, 8);
    let r = rand_tensor(xs, 9);
    let d = relu_backward(&x, &r).unwrap();
    out.push(GradCase {
        name: "relu".into(),
        error: check_grad(&mut |v| probe(&r, &relu_forward(&with_data(xs, v))), x.data(), d.data(), None),
        tolerance: 1e-4,
    });

    let x = distinct(xs, 10);
    let (y, sw) = maxpool2d(&x).unwrap();
    let r = rand_tensor(y.shape(), 11);
    let d = maxpool2d_backward(&r, &sw).unwrap();
    out.push(GradCase {
        name: "maxpool".into(),
        error: check_grad(&mut |v| probe(&r, &maxpool2d(&with_data(xs, v)).unwrap().0), x.data(), d.data(), None),
        tolerance: 1e-4,
    });

    let ys = y.shape();
    let yv = rand_tensor(ys, 12);
    let r = rand_tensor(xs, 13);
    let d = maxunpool2d_backward(&r, &sw).unwrap();
    out.push(GradCase {
        name: "maxunpool".into(),
        error: check_grad(&mut |v| probe(&r, &maxunpool2d(&with_data(ys, v), &sw, xs).unwrap()), yv.data(), d.data(), None),
        tolerance: 1e-4,
    });

    let xs5 = shape(1, 2, 7, 6);
    let target = shape(1, 2, 4, 3);
    let x = rand_tensor(xs5, 14);
    let r = rand_tensor(target, 15);
    let d = uncrop_backward(&r, xs5).unwrap();
    out.push(GradCase {
        name: "crop".into(),
        error: check_grad(&mut |v| probe(&r, &crop_center(&with_data(xs5, v), target).unwrap()), x.data(), d.data(), None),
        tolerance: 1e-4,
    });

    let x = rand_tensor(xs, 16);
    let y = softmax_per_pixel(&x).unwrap();
    let r = rand_tensor(xs, 17);
    let d = softmax_backward(&y, &r).unwrap();
    out.push(GradCase {
        name: "softmax".into(),
        error: check_grad(&mut |v| probe(&r, &softmax_per_pixel(&with_data(xs, v)).unwrap()), x.data(), d.data(), None),
        tolerance: 1e-4,
    });

    let labels: Vec<u8> = (0..32).map(|i| if i % 7 == 3 { 255 } else { (i % 3) as u8 }).collect();
    let (_, d) = cross_entropy_loss(&x, &labels, 255).unwrap();
    out.push(GradCase {
        name: "cross entropy".into(),
        error: check_grad(
            &mut |v| cross_entropy_loss(&with_data(xs, v), &labels, 255).unwrap().0,
            x.data(),
            d.data(),
            None,
        ),
        tolerance: 1e-4,
    });
    out
}

/// Loss and a fingerprint of the piecewise region (ReLU signs and pooling
/// switches) the forward pass ran in.
fn loss_and_region(m: &mut Model<f64>, x: &Tensor<f64>, labels: &[u8]) -> (f64, u64) {
    let (y, trace) = m.forward(x, Mode::Train, true).unwrap();
    let trace = trace.unwrap();
    let mut h = DefaultHasher::new();
    for (i, l) in m.config().layers.iter().enumerate() {
        match l.kind {
            LayerKind::Relu => trace.outputs[i].data().iter().for_each(|v| (*v > 0.0).hash(&mut h)),
            LayerKind::Maxpool => trace.switches[i].as_ref().unwrap().indices.hash(&mut h),
            _ => {}
        }
    }
    (cross_entropy_loss(&y, labels, 255).unwrap().0, h.finish())
}

/// Central difference with the largest ladder step whose two probes stay in
/// the same piecewise region as `x`; the smallest step when none does.
fn region_difference(f: &mut dyn FnMut(&[f64]) -> (f64, u64), x: &[f64], i: usize) -> f64 {
    let (_, region) = f(x);
    let mut p = x.to_vec();
    let mut last = 0.0;
    for &h in &STEP_LADDER {
        p[i] = x[i] + h;
        let (up, ru) = f(&p);
        p[i] = x[i] - h;
        let (down, rd) = f(&p);
        last = (up - down) / (2.0 * h);
        if ru == region && rd == region {
            break;
        }
    }
    last
}

/// Relative error of a model's train-mode cross-entropy gradients against
/// central differences, over `per_tensor` random entries of every parameter
/// and of the input. Returns `(max relative error, entries checked)`.
pub fn model_gradient_error(mut model: Model<f64>, x: &Tensor<f64>, per_tensor: usize) -> (f64, usize) {
    let xs = x.shape();
    let classes = model.num_classes();
    let labels: Vec<u8> = (0..xs.n * xs.h * xs.w).map(|i| ((i / 7) % classes) as u8).collect();
    let (y, trace) = model.forward(x, Mode::Train, true).unwrap();
    let (_, d) = cross_entropy_loss(&y, &labels, 255).unwrap();
    let bp = model.backward(&trace.unwrap(), &d).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let names: Vec<String> = model.parameters().into_iter().map(|(k, _)| k).collect();
    for (pi, name) in names.iter().enumerate() {
        let base: Vec<f64> = model.parameters()[pi].1.to_vec();
        let g = &bp.grads[name];
        let mut m = model.clone();
        let mut f = |v: &[f64]| {
            m.parameters_mut()[pi].data.copy_from_slice(v);
            loss_and_region(&mut m, x, &labels)
        };
        for _ in 0..per_tensor.min(base.len()) {
            let i = rng.random_range(0..base.len());
            worst = worst.max(rel_err(g[i], region_difference(&mut f, &base, i), REL_FLOOR));
            checked += 1;
        }
    }
    let mut m = model.clone();
    let mut f = |v: &[f64]| loss_and_region(&mut m, &with_data(xs, v), &labels);
    for _ in 0..per_tensor {
        let i = rng.random_range(0..xs.len());
        worst = worst.max(rel_err(bp.d_input.data()[i], region_difference(&mut f, x.data(), i), REL_FLOOR));
        checked += 1;
    }
    (worst, checked)
}

/// Moves biases, gammas and betas off their initial values so no activation
/// sits exactly on a ReLU kink.
pub fn generic_point(mut model: Model<f64>, seed: u64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for slot in model.parameters_mut() {
        let base = if slot.name.ends_with(".gamma") { 1.0 } else { 0.0 };
        if !slot.name.ends_with(".weight") {
            for v in slot.data.iter_mut() {
                *v = base + rng.random_range(-0.2..0.2);
            }
        }
    }
    model
}

/// End-to-end check of the scale-1/16 network on 32x32 inputs.
pub fn end_to_end_gradient_error(per_tensor: usize) -> (f64, usize) {
    let model = Model::<f32>::new(build_deconvnet_for_input(3, 1.0 / 16.0, 32).unwrap(), 21)
        .unwrap()
        .cast::<f64>();
    model_gradient_error(generic_point(model, 24), &rand_tensor(shape(3, 3, 32, 32), 22), per_tensor)
}

/// Two-level encoder-decoder built from every layer type the network uses.
pub fn shallow_config(classes: usize, side: usize) -> NetworkConfig {
    let mut layers = Vec::new();
    let cbr = |spec: LayerSpec, layers: &mut Vec<LayerSpec>| {
        let n = spec.name.clone();
        layers.push(spec);
        layers.push(LayerSpec::batchnorm(format!("{n}/bn")));
        layers.push(LayerSpec::relu(format!("{n}/relu")));
    };
    cbr(LayerSpec::conv("c1", 3, 1, 1, 4), &mut layers);
    layers.push(LayerSpec::maxpool("p1"));
    cbr(LayerSpec::conv("c2", 3, 1, 1, 5), &mut layers);
    layers.push(LayerSpec::maxpool("p2"));
    cbr(LayerSpec::conv("fc", side / 4, 1, 0, 6), &mut layers);
    cbr(LayerSpec::deconv("dfc", side / 4, 1, 0, 5), &mut layers);
    layers.push(LayerSpec::maxunpool("u2", "p2"));
    cbr(LayerSpec::deconv("d2", 3, 1, 1, 4), &mut layers);
    layers.push(LayerSpec::maxunpool("u1", "p1"));
    cbr(LayerSpec::deconv("d1", 3, 1, 1, 4), &mut layers);
    layers.push(LayerSpec::conv("out", 1, 1, 0, classes));
    NetworkConfig {
        layers,
        input_shape: shape(1, 3, side, side),
        num_classes: classes,
        scale: 1.0,
    }
}

/// `(kernel, stride, pad, input extent)` of every conv/deconv layer of the
/// full network, paired with the layer name.
pub fn layer_geometries() -> Vec<(String, usize, usize, usize, usize)> {
    let cfg = build_deconvnet(21, 1.0).unwrap();
    let flow = cfg.shape_flow().unwrap();
    cfg.layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.has_weights())
        .map(|(i, l)| {
            let input = if i == 0 { flow.input } else { flow.outputs[i - 1] };
            let extent = if l.kind == LayerKind::Conv { input.h } else { flow.outputs[i].h };
            (l.name.clone(), l.kernel.unwrap(), l.stride.unwrap(), l.pad.unwrap(), extent)
        })
        .collect()
}

/// Relative mismatch of `<conv(x), y>` and `<x, deconv(y)>` for a
/// conv geometry applied to an `extent x extent` input.
pub fn adjoint_mismatch(k: usize, stride: usize, pad: usize, extent: usize, seed: u64) -> f64 {
    let (a, b) = (3, 2);
    let p = ConvParams::new(rand_tensor(shape(a, b, k, k), seed), vec![0.0; a], stride, pad).unwrap();
    let x = rand_tensor(shape(1, b, extent, extent), seed + 1);
    let cx = conv2d_forward(&x, &p).unwrap();
    let y = rand_tensor(cx.shape(), seed + 2);
    let pt = ConvParams::new(p.weights.clone(), vec![0.0; b], stride, pad).unwrap();
    let dy = deconv2d_forward(&y, &pt).unwrap();
    assert_eq!(dy.shape(), x.shape());
    let lhs = cx.dot(&y).unwrap();
    let rhs = x.dot(&dy).unwrap();
    rel_err(lhs, rhs, 1e-300)
}

/// Triple-loop reference for max/sum aggregation over placed maps.
pub fn brute_force_aggregate(maps: &[PlacedMap], mode: AggregationMode) -> Vec<f32> {
    let s = maps[0].values.shape();
    let mut out = vec![0f32; s.len()];
    for c in 0..s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc: Option<f32> = None;
                for m in maps {
                    let v = m.values.at(0, c, y, x);
                    acc = Some(match (acc, mode) {
                        (None, _) => v,
                        (Some(a), AggregationMode::Max) => a.max(v),
                        (Some(a), AggregationMode::Sum) => a + v,
                    });
                }
                out[s.offset(0, c, y, x)] = acc.unwrap();
            }
        }
    }
    out
}

/// Random placed maps with dyadic values, so sums are exact in any order.
pub fn random_placed_maps(rng: &mut ChaCha8Rng, mode: AggregationMode) -> Vec<PlacedMap> {
    let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let c = rng.random_range(1..=4);
    let count = rng.random_range(1..=5);
    (0..count)
        .map(|_| {
            let x0 = rng.random_range(0..w);
            let y0 = rng.random_range(0..h);
            let x1 = rng.random_range(x0 + 1..=w);
            let y1 = rng.random_range(y0 + 1..=h);
            let fp = BoxGeometry::new(x0, y0, x1, y1).unwrap();
            let mut values = Tensor::full(shape(1, c, h, w), mode.neutral()).unwrap();
            for k in 0..c {
                for y in y0..y1 {
                    for x in x0..x1 {
                        values.set(0, k, y, x, rng.random_range(-64i32..64) as f32 / 8.0);
                    }
                }
            }
            PlacedMap { values, footprint: fp }
        })
        .collect()
}

/// Random pooling input with even extents; about a third of the cases are
/// quantized so windows contain ties.
fn pool_case(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let s = shape(
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        2 * rng.random_range(1..=5),
        2 * rng.random_range(1..=5),
    );
    let quantize = rng.random_range(0..3) == 0;
    let v = (0..s.len())
        .map(|_| {
            let v: f64 = rng.random_range(-2.0..2.0);
            if quantize {
                v.round()
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(s, v).unwrap()
}

/// Failures of the unpooling laws over `cases` random inputs: positional
/// gather identity, pool of unpool identity on nonnegative values, at most
/// one nonzero per window, lowest-index tie-break.
pub fn unpool_law_failures(cases: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in 0..cases {
        let x = pool_case(&mut rng);
        let s = x.shape();
        let (y, sw) = maxpool2d(&x).unwrap();
        let u = maxunpool2d(&y, &sw, s).unwrap();
        // Brute-force window scan.
        for n in 0..s.n {
            for c in 0..s.c {
                for py in 0..s.h / 2 {
                    for px in 0..s.w / 2 {
                        let mut best = (0, 0);
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            if x.at(n, c, 2 * py + dy, 2 * px + dx) > x.at(n, c, 2 * py + best.0, 2 * px + best.1) {
                                best = (dy, dx);
                            }
                        }
                        let want = s.offset(n, c, 2 * py + best.0, 2 * px + best.1);
                        if sw.indices[y.shape().offset(n, c, py, px)] != want {
                            out.push(format!("case {case}: switch is not the first maximum"));
                        }
                        let mut nonzero = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let o = s.offset(n, c, 2 * py + dy, 2 * px + dx);
                            let v = u.data()[o];
                            if o == want {
                                if v != x.data()[o] {
                                    out.push(format!("case {case}: argmax value not restored"));
                                }
                            } else if v != 0.0 {
                                out.push(format!("case {case}: nonzero off the switch"));
                            }
                            nonzero += (v != 0.0) as usize;
                        }
                        if nonzero > 1 {
                            out.push(format!("case {case}: {nonzero} nonzeros in one window"));
                        }
                    }
                }
            }
        }
        let pos = rand_tensor(y.shape(), case as u64).map(f64::abs);
        let (again, _) = maxpool2d(&maxunpool2d(&pos, &sw, s).unwrap()).unwrap();
        if again != pos {
            out.push(format!("case {case}: pool(unpool(y)) != y"));
        }
    }
    out
}

/// Whether pooling switches agree between rayon pools of 1 and 4 threads.
pub fn switches_thread_independent(seed: u64) -> bool {
    let x = rand_tensor(shape(4, 8, 32, 32), seed);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| maxpool2d(&x).unwrap().1)
    };
    run(1) == run(4)
}

/// Failures of aggregation against the brute-force oracle over `instances`
/// random cases per mode, including order invariance and duplicate rules.
pub fn aggregation_failures(instances: usize, seed: u64) -> Vec<String> {
    use deconvseg::infer::aggregate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for mode in [AggregationMode::Max, AggregationMode::Sum] {
        for case in 0..instances {
            let maps = random_placed_maps(&mut rng, mode);
            let agg = aggregate(&maps, mode).unwrap();
            if agg.values.data() != brute_force_aggregate(&maps, mode).as_slice() {
                out.push(format!("{mode:?} case {case}: differs from brute force"));
            }
            let mut shuffled = maps.clone();
            for i in (1..shuffled.len()).rev() {
                let j = rng.random_range(0..=i);
                shuffled.swap(i, j);
            }
            if aggregate(&shuffled, mode).unwrap().values != agg.values {
                out.push(format!("{mode:?} case {case}: order dependent"));
            }
            let doubled: Vec<PlacedMap> = maps.iter().chain(maps.iter()).cloned().collect();
            let twice = aggregate(&doubled, mode).unwrap().values;
            let expect = match mode {
                AggregationMode::Max => agg.values.clone(),
                AggregationMode::Sum => agg.values.map(|v| 2.0 * v),
            };
            if twice != expect {
                out.push(format!("{mode:?} case {case}: duplicate rule broken"));
            }
            if mode == AggregationMode::Max {
                for m in &maps {
                    let f = m.footprint;
                    let s = m.values.shape();
                    for c in 0..s.c {
                        for y in f.y0..f.y1 {
                            for x in f.x0..f.x1 {
                                if agg.values.at(0, c, y, x) < m.values.at(0, c, y, x) {
                                    out.push(format!("max case {case}: below a contributing map"));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fixed metric fixtures with hand-counted expectations.
pub fn metric_fixture_failures() -> Vec<String> {
    use deconvseg::{ConfusionCounts, LabelMask};
    let mut out = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            out.push(name.to_string());
        }
    };

    // 4x4 with one ignored pixel.
    let gt = LabelMask::new(4, 4, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 255, 1, 2, 2, 0, 0]).unwrap();
    let pr = LabelMask::new(4, 4, vec![0, 1, 1, 1, 0, 0, 1, 2, 2, 0, 1, 1, 2, 2, 0, 2]).unwrap();
    let mut c = ConfusionCounts::new(3);
    c.accumulate(&gt, &pr).unwrap();
    let want = [[4u64, 1, 1], [0, 4, 1], [1, 0, 3]];
    let matrix_ok = (0..3).all(|g| (0..3).all(|p| c.get(g, p) == want[g][p]));
    check("4x4 hand-counted matrix", matrix_ok && c.ignored() == 1 && c.total() == 15);
    let iou = c.iou_per_class();
    check(
        "4x4 per-class IoU",
        iou == vec![Some(4.0 / 7.0), Some(4.0 / 6.0), Some(3.0 / 6.0)],
    );
    check("4x4 pixel accuracy", c.pixel_accuracy().unwrap() == 11.0 / 15.0);

    // Overlapping 2x2 blocks sharing one cell.
    let mut g = LabelMask::filled(4, 4, 0);
    let mut p = LabelMask::filled(4, 4, 0);
    for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        g.set(y, x, 1);
        p.set(y + 1, x + 1, 1);
    }
    let mut c = ConfusionCounts::new(2);
    c.accumulate(&g, &p).unwrap();
    check("2x2 blocks overlapping in one cell", c.iou_per_class()[1] == Some(1.0 / 7.0));

    // Classes 0 and 3 perfect, 1 and 2 at one half.
    let mut c = ConfusionCounts::new(4);
    c.accumulate_labels(&[0, 1, 2, 2, 3], &[0, 1, 2, 1, 3], 255).unwrap();
    check("halves and ones", c.iou_per_class() == vec![Some(1.0), Some(0.5), Some(0.5), Some(1.0)]);
    check("mean of halves and ones", c.mean_iou().unwrap() == 0.75);

    // Class 1 absent from both sides is excluded from the mean.
    let mut c = ConfusionCounts::new(3);
    c.accumulate_labels(&[0, 0, 2], &[0, 2, 2], 255).unwrap();
    check("undefined class", c.iou_per_class() == vec![Some(0.5), None, Some(0.5)]);
    check("mean skips undefined", c.mean_iou().unwrap() == 0.5);

    // Merging equals accumulating everything at once.
    let mut whole = ConfusionCounts::new(3);
    whole.accumulate_labels(&[0, 1, 2, 2, 255], &[0, 1, 1, 2, 0], 255).unwrap();
    let mut a = ConfusionCounts::new(3);
    a.accumulate_labels(&[0, 1], &[0, 1], 255).unwrap();
    let mut b = ConfusionCounts::new(3);
    b.accumulate_labels(&[2, 2, 255], &[1, 2, 0], 255).unwrap();
    a.merge(&b).unwrap();
    check("merge", a == whole);

    // 21-class random fixture against a from-scratch recount.
    let mut rng = ChaCha8Rng::seed_from_u64(2121);
    let masks: Vec<(LabelMask, LabelMask)> = (0..6)
        .map(|_| {
            let g: Vec<u8> = (0..400)
                .map(|_| if rng.random_range(0..20) == 0 { 255 } else { rng.random_range(0..21) })
                .collect();
            let p: Vec<u8> = g
                .iter()
                .map(|&v| if v != 255 && rng.random_range(0..3) > 0 { v } else { rng.random_range(0..21) })
                .collect();
            (LabelMask::new(20, 20, g).unwrap(), LabelMask::new(20, 20, p).unwrap())
        })
        .collect();
    let pairs: Vec<(&LabelMask, &LabelMask)> = masks.iter().map(|(a, b)| (a, b)).collect();
    let counts = deconvseg::metrics::confusion_over(21, &pairs).unwrap();
    let mut sum = 0.0;
    let mut defined = 0;
    for k in 0..21u8 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (g, p) in &masks {
            for (&a, &b) in g.labels().iter().zip(p.labels()) {
                if a == 255 {
                    continue;
                }
                match (a == k, b == k) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
        }
        if tp + fp + fn_ > 0 {
            sum += tp as f64 / (tp + fp + fn_) as f64;
            defined += 1;
        }
    }
    let recount = sum / defined as f64;
    check("21-class recount", (counts.mean_iou().unwrap() - recount).abs() < 1e-12);
    out
}

/// `(name, kernel, stride, pad, h, w, c)` of the full network's layer table.
pub const LAYER_TABLE: [(&str, usize, usize, usize, usize, usize, usize); 40] = [
    ("conv1-1", 3, 1, 1, 224, 224, 64),
    ("conv1-2", 3, 1, 1, 224, 224, 64),
    ("pool1", 2, 2, 0, 112, 112, 64),
    ("conv2-1", 3, 1, 1, 112, 112, 128),
    ("conv2-2", 3, 1, 1, 112, 112, 128),
    ("pool2", 2, 2, 0, 56, 56, 128),
    ("conv3-1", 3, 1, 1, 56, 56, 256),
    ("conv3-2", 3, 1, 1, 56, 56, 256),
    ("conv3-3", 3, 1, 1, 56, 56, 256),
    ("pool3", 2, 2, 0, 28, 28, 256),
    ("conv4-1", 3, 1, 1, 28, 28, 512),
    ("conv4-2", 3, 1, 1, 28, 28, 512),
    ("conv4-3", 3, 1, 1, 28, 28, 512),
    ("pool4", 2, 2, 0, 14, 14, 512),
    ("conv5-1", 3, 1, 1, 14, 14, 512),
    ("conv5-2", 3, 1, 1, 14, 14, 512),
    ("conv5-3", 3, 1, 1, 14, 14, 512),
    ("pool5", 2, 2, 0, 7, 7, 512),
    ("fc6", 7, 1, 0, 1, 1, 4096),
    ("fc7", 1, 1, 0, 1, 1, 4096),
    ("deconv-fc6", 7, 1, 0, 7, 7, 512),
    ("unpool5", 2, 2, 0, 14, 14, 512),
    ("deconv5-1", 3, 1, 1, 14, 14, 512),
    ("deconv5-2", 3, 1, 1, 14, 14, 512),
    ("deconv5-3", 3, 1, 1, 14, 14, 512),
    ("unpool4", 2, 2, 0, 28, 28, 512),
    ("deconv4-1", 3, 1, 1, 28, 28, 512),
    ("deconv4-2", 3, 1, 1, 28, 28, 512),
    ("deconv4-3", 3, 1, 1, 28, 28, 256),
    ("unpool3", 2, 2, 0, 56, 56, 256),
    ("deconv3-1", 3, 1, 1, 56, 56, 256),
    ("deconv3-2", 3, 1, 1, 56, 56, 256),
    ("deconv3-3", 3, 1, 1, 56, 56, 128),
    ("unpool2", 2, 2, 0, 112, 112, 128),
    ("deconv2-1", 3, 1, 1, 112, 112, 128),
    ("deconv2-2", 3, 1, 1, 112, 112, 64),
    ("unpool1", 2, 2, 0, 224, 224, 64),
    ("deconv1-1", 3, 1, 1, 224, 224, 64),
    ("deconv1-2", 3, 1, 1, 224, 224, 64),
    // A 1x1 kernel keeps the extent only without padding.
    ("output", 1, 1, 0, 224, 224, 21),
];

pub const TABLE_PARAMS: f64 = 252e6;

/// Mismatches between the layer table and `shapes`, the output shape of each
/// named layer.
pub fn table_mismatches(cfg: &NetworkConfig, shapes: &dyn Fn(usize) -> Shape4) -> Vec<String> {
    let mut out = Vec::new();
    for &(name, k, s, p, h, w, c) in &LAYER_TABLE {
        let Some(i) = cfg.layer_index(name) else {
            out.push(format!("{name}: missing"));
            continue;
        };
        let l = &cfg.layers[i];
        if (l.kernel, l.stride, l.pad) != (Some(k), Some(s), Some(p)) {
            out.push(format!("{name}: geometry {:?} {:?} {:?}", l.kernel, l.stride, l.pad));
        }
        let got = shapes(i);
        if (got.h, got.w, got.c) != (h, w, c) {
            out.push(format!("{name}: {}x{}x{} instead of {h}x{w}x{c}", got.h, got.w, got.c));
        }
    }
    out
}

/// Traced batch-1 forward of the full scale-1 network. Running statistics
/// are marked as recorded so inference mode can run on a fresh model.
pub fn full_network_trace_mismatches() -> Vec<String> {
    use deconvseg::net::LayerParams;
    let cfg = build_deconvnet(21, 1.0).unwrap();
    let layers: Vec<LayerParams<f32>> = Model::<f32>::new(cfg.clone(), 1)
        .unwrap()
        .layers()
        .iter()
        .cloned()
        .map(|l| match l {
            LayerParams::BatchNorm(mut b) => {
                b.stats_recorded = true;
                LayerParams::BatchNorm(b)
            }
            other => other,
        })
        .collect();
    let model = Model::from_parts(cfg.clone(), layers).unwrap();
    let x = Tensor::<f32>::gaussian(shape(1, 3, 224, 224), 1.0, 2).unwrap();
    let (y, trace) = model.infer_traced(&x).unwrap();
    let mut out = table_mismatches(&cfg, &|i| trace.outputs[i].shape());
    if y.shape() != shape(1, 21, 224, 224) || !y.all_finite() {
        out.push(format!("final output {}", y.shape()));
    }
    out
}
