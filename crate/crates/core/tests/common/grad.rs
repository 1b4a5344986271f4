//! Finite-difference gradient checks for every differentiable tape operation.
//!
//! The tape computes in f32, so central differences of its own forward pass
//! would be dominated by rounding (about 1e-7 / 2h per output). Each
//! operation therefore has an independent f64 reference implementation here.
//! The tape's forward value must match the reference, and the tape's
//! backward must match central differences of the reference. Together
//! those pin the backward pass to the derivative of the forward pass.
//!
//! The scalar objective is `sum_i c_i * y_i` with random `|c_i|` in
//! [0.5, 1.5). Entries whose perturbation flips a ReLU or abs sign anywhere
//! in the reference are skipped and counted.

use rand::Rng as _;
use sscd::nn::{BranchConfig, PretextModel, PretextTask};
use sscd::rng::{substream, Rng};
use sscd::tensor::{Tape, Var};
use sscd::Tensor;

use super::{away_from_zero, uniform};

pub const H: f64 = 1e-3;
pub const TRIALS: usize = 20;
pub const REL_TOL: f64 = 1e-3;
pub const DENOM_FLOOR: f64 = 1e-4;
pub const FORWARD_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub entries: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub max_forward: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.trials >= TRIALS
            && self.entries > 0
            && self.max_rel < REL_TOL
            && self.max_forward < FORWARD_TOL
    }
}

pub struct Arg {
    pub shape: Vec<usize>,
    pub v: Vec<f64>,
}

fn check<G, B, R>(op: &'static str, rng: &mut Rng, gen: G, build: B, reference: R) -> OpReport
where
    G: Fn(&mut Rng) -> Vec<Tensor>,
    B: Fn(&mut Tape, &[Var]) -> Var,
    R: Fn(&[Arg], &mut Vec<bool>) -> Vec<f64>,
{
    let mut rep = OpReport {
        op,
        trials: 0,
        entries: 0,
        skipped: 0,
        max_rel: 0.0,
        max_forward: 0.0,
    };
    for _ in 0..TRIALS {
        let inputs = gen(rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let y = build(&mut tape, &vars);
        let yv = tape.value(y).clone();
        let c: Vec<f32> = (0..yv.len())
            .map(|_| {
                let m = rng.random_range(0.5f32..1.5);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let cv = tape.constant(Tensor::new(yv.shape(), c.clone()).unwrap());
        let weighted = tape.mul(y, cv).unwrap();
        let objective = tape.sum(weighted).unwrap();
        tape.backward(objective).unwrap();

        let mut args: Vec<Arg> = inputs
            .iter()
            .map(|t| Arg {
                shape: t.shape().to_vec(),
                v: t.data().iter().map(|&x| x as f64).collect(),
            })
            .collect();
        let mut base_kinks = Vec::new();
        let r = reference(&args, &mut base_kinks);
        assert_eq!(r.len(), yv.len(), "{op}: reference output size");
        for (a, b) in yv.data().iter().zip(&r) {
            let e = (*a as f64 - b).abs() / b.abs().max(1.0);
            rep.max_forward = rep.max_forward.max(e);
        }
        let eval = |args: &[Arg], kinks: &mut Vec<bool>| -> f64 {
            reference(args, kinks).iter().zip(&c).map(|(y, c)| y * *c as f64).sum()
        };

        for (i, var) in vars.iter().enumerate() {
            let g: Vec<f32> = tape
                .grad(*var)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
            for j in 0..args[i].v.len() {
                let x0 = args[i].v[j];
                let (mut kp, mut km) = (Vec::new(), Vec::new());
                args[i].v[j] = x0 + H;
                let lp = eval(&args, &mut kp);
                args[i].v[j] = x0 - H;
                let lm = eval(&args, &mut km);
                args[i].v[j] = x0;
                if kp != base_kinks || km != base_kinks {
                    rep.skipped += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * H);
                let analytic = g[j] as f64;
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
                rep.max_rel = rep.max_rel.max(rel);
                rep.entries += 1;
            }
        }
        rep.trials += 1;
    }
    rep
}

// ---- f64 reference operations ----

fn conv(x: &[f64], (c, h, w): (usize, usize, usize), wt: &[f64], o: usize, k: usize, b: &[f64]) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; o * h * w];
    for co in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b[co];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - p;
                            let ix = xx as isize + kx as isize - p;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += wt[((co * c + ci) * k + ky) * k + kx]
                                * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * h + y) * w + xx] = s;
            }
        }
    }
    out
}

fn relu(v: Vec<f64>, kinks: &mut Vec<bool>) -> Vec<f64> {
    v.into_iter()
        .map(|x| {
            kinks.push(x > 0.0);
            x.max(0.0)
        })
        .collect()
}

fn abs(v: Vec<f64>, kinks: &mut Vec<bool>) -> Vec<f64> {
    v.into_iter()
        .map(|x| {
            kinks.push(x >= 0.0);
            x.abs()
        })
        .collect()
}

fn linear(x: &[f64], rows: usize, d: usize, w: &[f64], k: usize, b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * k);
    for r in 0..rows {
        for j in 0..k {
            out.push(b[j] + (0..d).map(|i| x[r * d + i] * w[j * d + i]).sum::<f64>());
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(x: &[f64], k: usize) -> Vec<f64> {
    x.chunks(k)
        .flat_map(|row| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
        })
        .collect()
}

fn gap(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c).map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

fn bce(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn chw(a: &Arg) -> (usize, usize, usize) {
    (a.shape[0], a.shape[1], a.shape[2])
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn branch_ref(args: &[Arg], x: &Arg, kinks: &mut Vec<bool>) -> Vec<f64> {
    let (mut v, mut shape) = (x.v.clone(), chw(x));
    for l in 0..3 {
        let (w, b) = (&args[2 * l], &args[2 * l + 1]);
        let o = w.shape[0];
        v = relu(conv(&v, shape, &w.v, o, w.shape[2], &b.v), kinks);
        shape = (o, shape.1, shape.2);
    }
    v
}

/// Runs the whole suite from one seed; one report per operation.
pub fn gradient_suite(seed: u64) -> Vec<OpReport> {
    let mut rng = substream(seed, "gradient-suite");
    let r = &mut rng;
    let mut out = Vec::new();

    out.push(check(
        "conv2d",
        r,
        |r| {
            let (c, o, h, w) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 3, 6), dim(r, 3, 6));
            let k = [1, 3, 5][dim(r, 0, 2)];
            vec![
                uniform(&[c, h, w], r, -1.0, 1.0),
                uniform(&[o, c, k, k], r, -1.0, 1.0),
                uniform(&[o], r, -1.0, 1.0),
            ]
        },
        |t, v| t.conv2d(v[0], v[1], v[2]).unwrap(),
        |a, _| conv(&a[0].v, chw(&a[0]), &a[1].v, a[1].shape[0], a[1].shape[2], &a[2].v),
    ));

    out.push(check(
        "relu",
        r,
        |r| vec![away_from_zero(&[dim(r, 2, 12)], r, 0.05, 2.0)],
        |t, v| t.relu(v[0]),
        |a, k| relu(a[0].v.clone(), k),
    ));

    out.push(check(
        "linear",
        r,
        |r| {
            let (d, k) = (dim(r, 1, 8), dim(r, 1, 4));
            vec![
                uniform(&[d], r, -1.0, 1.0),
                uniform(&[k, d], r, -1.0, 1.0),
                uniform(&[k], r, -1.0, 1.0),
            ]
        },
        |t, v| t.linear(v[0], v[1], v[2]).unwrap(),
        |a, _| linear(&a[0].v, 1, a[0].shape[0], &a[1].v, a[1].shape[0], &a[2].v),
    ));

    out.push(check(
        "linear_batched",
        r,
        |r| {
            let (n, d, k) = (dim(r, 2, 5), dim(r, 1, 6), dim(r, 1, 4));
            vec![
                uniform(&[n, d], r, -1.0, 1.0),
                uniform(&[k, d], r, -1.0, 1.0),
                uniform(&[k], r, -1.0, 1.0),
            ]
        },
        |t, v| t.linear(v[0], v[1], v[2]).unwrap(),
        |a, _| linear(&a[0].v, a[0].shape[0], a[0].shape[1], &a[1].v, a[1].shape[0], &a[2].v),
    ));

    out.push(check(
        "sigmoid",
        r,
        |r| vec![uniform(&[dim(r, 1, 10)], r, -4.0, 4.0)],
        |t, v| t.sigmoid(v[0]),
        |a, _| a[0].v.iter().map(|&x| sigmoid(x)).collect(),
    ));

    out.push(check(
        "softmax",
        r,
        |r| vec![uniform(&[dim(r, 2, 8)], r, -3.0, 3.0)],
        |t, v| t.softmax(v[0]).unwrap(),
        |a, _| softmax(&a[0].v, a[0].shape[0]),
    ));

    out.push(check(
        "softmax_batched",
        r,
        |r| vec![uniform(&[dim(r, 2, 4), dim(r, 2, 5)], r, -3.0, 3.0)],
        |t, v| t.softmax(v[0]).unwrap(),
        |a, _| softmax(&a[0].v, a[0].shape[1]),
    ));

    out.push(check(
        "global_avg_pool",
        r,
        |r| vec![uniform(&[dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 5)], r, -2.0, 2.0)],
        |t, v| t.global_avg_pool(v[0]).unwrap(),
        |a, _| gap(&a[0].v, a[0].shape[0], a[0].shape[1] * a[0].shape[2]),
    ));

    let pair = |r: &mut Rng| {
        let s = [dim(r, 1, 3), dim(r, 1, 4)];
        vec![uniform(&s, r, -2.0, 2.0), uniform(&s, r, -2.0, 2.0)]
    };
    out.push(check(
        "add",
        r,
        pair,
        |t, v| t.add(v[0], v[1]).unwrap(),
        |a, _| a[0].v.iter().zip(&a[1].v).map(|(x, y)| x + y).collect(),
    ));
    out.push(check(
        "sub",
        r,
        pair,
        |t, v| t.sub(v[0], v[1]).unwrap(),
        |a, _| a[0].v.iter().zip(&a[1].v).map(|(x, y)| x - y).collect(),
    ));
    out.push(check(
        "mul",
        r,
        pair,
        |t, v| t.mul(v[0], v[1]).unwrap(),
        |a, _| a[0].v.iter().zip(&a[1].v).map(|(x, y)| x * y).collect(),
    ));

    out.push(check(
        "abs",
        r,
        |r| vec![away_from_zero(&[dim(r, 2, 12)], r, 0.05, 2.0)],
        |t, v| t.abs(v[0]),
        |a, k| abs(a[0].v.clone(), k),
    ));

    out.push(check(
        "scale",
        r,
        |r| vec![uniform(&[dim(r, 1, 8)], r, -2.0, 2.0)],
        |t, v| t.scale(v[0], -1.75).unwrap(),
        |a, _| a[0].v.iter().map(|x| x * -1.75).collect(),
    ));

    out.push(check(
        "add_scalar",
        r,
        |r| vec![uniform(&[dim(r, 1, 8)], r, -2.0, 2.0)],
        |t, v| t.add_scalar(v[0], 0.625).unwrap(),
        |a, _| a[0].v.iter().map(|x| x + 0.625).collect(),
    ));

    out.push(check(
        "sum",
        r,
        |r| vec![uniform(&[dim(r, 1, 3), dim(r, 1, 6)], r, -2.0, 2.0)],
        |t, v| t.sum(v[0]).unwrap(),
        |a, _| vec![a[0].v.iter().sum()],
    ));

    out.push(check(
        "mean",
        r,
        |r| vec![uniform(&[dim(r, 1, 3), dim(r, 1, 6)], r, -2.0, 2.0)],
        |t, v| t.mean(v[0]).unwrap(),
        |a, _| vec![a[0].v.iter().sum::<f64>() / a[0].v.len() as f64],
    ));

    out.push(check(
        "l2_norm",
        r,
        |r| vec![away_from_zero(&[dim(r, 2, 10)], r, 0.05, 2.0)],
        |t, v| t.l2_norm(v[0]).unwrap(),
        |a, _| vec![norm(&a[0].v)],
    ));

    out.push(check(
        "l2_norm_over_channels",
        r,
        |r| vec![away_from_zero(&[dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)], r, 0.05, 2.0)],
        |t, v| t.l2_norm_over_channels(v[0]).unwrap(),
        |a, _| {
            let (c, h, w) = chw(&a[0]);
            (0..h * w)
                .map(|p| (0..c).map(|ch| a[0].v[ch * h * w + p].powi(2)).sum::<f64>().sqrt())
                .collect()
        },
    ));

    out.push(check(
        "reshape",
        r,
        |r| vec![uniform(&[2, 3, dim(r, 1, 4)], r, -2.0, 2.0)],
        |t, v| {
            let n = t.value(v[0]).len();
            t.reshape(v[0], &[6, n / 6]).unwrap()
        },
        |a, _| a[0].v.clone(),
    ));

    out.push(check(
        "flatten",
        r,
        |r| vec![uniform(&[dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)], r, -2.0, 2.0)],
        |t, v| t.flatten(v[0]).unwrap(),
        |a, _| a[0].v.clone(),
    ));

    for target in [0.0f32, 1.0] {
        out.push(check(
            if target == 0.0 { "bce_y0" } else { "bce_y1" },
            r,
            |r| vec![uniform(&[1], r, 0.1, 0.9)],
            move |t, v| t.bce(v[0], target).unwrap(),
            move |a, _| vec![bce(a[0].v[0], target as f64)],
        ));
    }

    out.push(check(
        "triplet_l1_loss",
        r,
        |r| {
            let d = dim(r, 2, 10);
            vec![
                uniform(&[d], r, -1.0, 1.0),
                away_from_zero(&[d], r, 0.05, 1.0),
                uniform(&[d], r, -1.0, 1.0),
            ]
        },
        |t, v| {
            // f2 is passed as an offset from f1 so every |f1 - f2| entry stays off its kink.
            let f2 = t.add(v[0], v[1]).unwrap();
            sscd::nn::triplet_l1_on_tape(t, v[0], f2, v[2], 0.5, 0.75).unwrap()
        },
        |a, k| {
            let d12: Vec<f64> = a[1].v.iter().map(|x| -x).collect();
            let d13: Vec<f64> = a[0].v.iter().zip(&a[2].v).map(|(x, y)| x - y).collect();
            let hinge = relu(vec![norm(&d12) - norm(&d13) + 0.5], k)[0];
            let l1 = abs(d12, k).iter().sum::<f64>() / a[0].v.len() as f64;
            vec![hinge + 0.75 * l1]
        },
    ));

    let cfg = BranchConfig {
        in_channels: 2,
        filters_per_layer: [3, 2, 3],
        kernel_size: 3,
    };
    let template = PretextModel::init(PretextTask::Overlap, cfg.clone(), seed).unwrap();
    let PretextModel::Overlap(model) = &template else { unreachable!() };
    for y in [0.0f32, 1.0] {
        let shapes: Vec<Vec<usize>> = template.params().iter().map(|t| t.shape().to_vec()).collect();
        out.push(check(
            if y == 0.0 { "overlap_model_bce_y0" } else { "overlap_model_bce_y1" },
            r,
            |r| {
                let mut v: Vec<Tensor> = shapes.iter().map(|s| uniform(s, r, -0.6, 0.6)).collect();
                let p = dim(r, 3, 6);
                v.push(uniform(&[2, p, p], r, -1.0, 1.0));
                v.push(uniform(&[2, p, p], r, -1.0, 1.0));
                v
            },
            |t, v| {
                let (_, prob) = model.forward_tape(t, &v[..8], v[8], v[9]).unwrap();
                t.bce(prob, y).unwrap()
            },
            |a, k| {
                let f1 = branch_ref(a, &a[8], k);
                let f2 = branch_ref(a, &a[9], k);
                let c3 = a[4].shape[0];
                let hw = a[8].shape[1] * a[8].shape[2];
                let fused: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| x - y).collect();
                let pooled = abs(gap(&fused, c3, hw), k);
                let logit = linear(&pooled, 1, c3, &a[6].v, 1, &a[7].v)[0];
                vec![bce(sigmoid(logit), y as f64)]
            },
        ));
    }

    out
}
