// Central finite-difference checker shared by the gradient tests and the
// acceptance suite.

use occludox::{Tape, Tensor, Var};

pub const H: f64 = 1e-5;
/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding are compared absolutely.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Default, Clone, Copy)]
pub struct Outcome {
    pub points: usize,
    pub worst: f64,
}

impl Outcome {
    pub fn merge(self, other: Outcome) -> Outcome {
        Outcome {
            points: self.points + other.points,
            worst: self.worst.max(other.worst),
        }
    }
}

fn value<F: Fn(&mut Tape, &[Var]) -> Var>(inputs: &[Tensor], f: &F) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = f(&mut tape, &vars);
    tape.value(root).item().expect("scalar root")
}

/// Compare the tape gradient of `f` against central differences at every
/// coordinate of every input.
pub fn check<F: Fn(&mut Tape, &[Var]) -> Var>(inputs: &[Tensor], f: F) -> Outcome {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = f(&mut tape, &vars);
    let grads = tape.backward(root).expect("backward");
    let mut out = Outcome::default();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).expect("input gradient");
        for j in 0..inputs[k].len() {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[j] += H;
            let up = value(&shifted, &f);
            shifted[k].data_mut()[j] -= 2.0 * H;
            let down = value(&shifted, &f);
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            out.points += 1;
            out.worst = out.worst.max(err);
        }
    }
    out
}

pub mod suite {
    use super::{check, Outcome};
    use occludox::rng::{seeded, uniform, SplitMix64};
    use occludox::{Reduction, Tape, Tensor, Var};

    pub const MARGIN: f64 = 1e-3;

    pub fn uniform_tensor(rng: &mut SplitMix64, dims: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| uniform(rng, lo, hi)).collect()).unwrap()
    }

    /// Values at least `MARGIN` away from zero.
    fn off_zero(rng: &mut SplitMix64, dims: &[usize]) -> Tensor {
        let t = uniform_tensor(rng, dims, 0.05, 1.0);
        let signs = uniform_tensor(rng, dims, -1.0, 1.0);
        t.zip_map(&signs, |v, s| if s < 0.0 { -v } else { v }).unwrap()
    }

    /// A shuffled ladder, so every pooling window has a clear maximum.
    fn distinct(rng: &mut SplitMix64, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
        occludox::rng::shuffle(rng, &mut v);
        Tensor::new(dims.to_vec(), v).unwrap()
    }

    /// Gap between the two largest relu outputs of every 2×2 window, or
    /// infinity when the whole window is clamped.
    fn pool_gap(t: &Tensor) -> f64 {
        let &[n, c, h, w] = t.dims() else { panic!("rank 4") };
        let mut gap = f64::INFINITY;
        for img in 0..n * c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let mut v: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| t.data()[(img * h + 2 * y + dy) * w + 2 * x + dx].max(0.0))
                        .collect();
                    v.sort_by(|a, b| b.total_cmp(a));
                    if v[0] > 0.0 {
                        gap = gap.min(v[0] - v[1]);
                    }
                }
            }
        }
        gap
    }

    fn weighted_sum(t: &mut Tape, y: Var, rng_seed: u64) -> Var {
        // A fixed random linear functional keeps every output coordinate in play.
        let w = uniform_tensor(&mut seeded(rng_seed), t.value(y).dims(), -1.0, 1.0);
        let w = t.constant(w);
        let p = t.mul(y, w).unwrap();
        t.sum(p)
    }

    fn net(t: &mut Tape, v: &[Var]) -> (Var, Var) {
        let z = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
        let r = t.relu(z);
        let p = t.max_pool2(r).unwrap();
        let f = t.flatten(p).unwrap();
        let logits = t.dense(f, v[3], v[4]).unwrap();
        (z, t.cross_entropy(logits, &[1, 3], Reduction::Mean).unwrap())
    }

    /// Draw parameters for the small conv net until no relu input or pooling
    /// window sits within `MARGIN` of a kink.
    fn net_inputs(seed: u64) -> Vec<Tensor> {
        for attempt in 0.. {
            let mut rng = seeded(seed.wrapping_add(attempt));
            let inputs = vec![
                uniform_tensor(&mut rng, &[2, 2, 4, 4], 0.0, 1.0),
                uniform_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5),
                uniform_tensor(&mut rng, &[3], -0.1, 0.1),
                uniform_tensor(&mut rng, &[4, 12], -0.5, 0.5),
                uniform_tensor(&mut rng, &[4], -0.1, 0.1),
            ];
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
            let (z, _) = net(&mut t, &v);
            let z = t.value(z);
            let near_zero = z.data().iter().any(|x| x.abs() < MARGIN);
            if !near_zero && pool_gap(z) > MARGIN {
                return inputs;
            }
        }
        unreachable!()
    }

    /// Every differentiable tape operation plus a small network, each checked
    /// at every coordinate of every input.
    pub fn run(seed: u64) -> Vec<(&'static str, Outcome)> {
        let mut rng = seeded(seed);
        let mut out = Vec::new();
        let a = uniform_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let b = uniform_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        out.push((
            "add",
            check(&[a.clone(), b.clone()], |t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                weighted_sum(t, y, 1)
            }),
        ));
        out.push((
            "sub",
            check(&[a.clone(), b.clone()], |t, v| {
                let y = t.sub(v[0], v[1]).unwrap();
                weighted_sum(t, y, 2)
            }),
        ));
        out.push((
            "mul",
            check(&[a.clone(), b.clone()], |t, v| {
                let y = t.mul(v[0], v[1]).unwrap();
                weighted_sum(t, y, 3)
            }),
        ));
        out.push((
            "scale",
            check(std::slice::from_ref(&a), |t, v| {
                let y = t.scale(v[0], -2.5);
                weighted_sum(t, y, 4)
            }),
        ));
        out.push((
            "relu",
            check(&[off_zero(&mut rng, &[3, 4])], |t, v| {
                let y = t.relu(v[0]);
                weighted_sum(t, y, 5)
            }),
        ));
        // Shift away from the clip bounds at ±0.5.
        let c = off_zero(&mut rng, &[3, 4]).map(|x| x * 0.4 + x.signum() * 0.5);
        out.push((
            "clip",
            check(&[c], |t, v| {
                let y = t.clip(v[0], -0.5, 0.5).unwrap();
                weighted_sum(t, y, 6)
            }),
        ));
        out.push((
            "max_pool2",
            check(&[distinct(&mut rng, &[1, 2, 4, 5])], |t, v| {
                let y = t.max_pool2(v[0]).unwrap();
                weighted_sum(t, y, 7)
            }),
        ));
        out.push((
            "reshape",
            check(std::slice::from_ref(&a), |t, v| {
                let y = t.reshape(v[0], &[3, 2]).unwrap();
                weighted_sum(t, y, 8)
            }),
        ));
        out.push((
            "flatten",
            check(&[uniform_tensor(&mut rng, &[2, 2, 2], -1.0, 1.0)], |t, v| {
                let y = t.flatten(v[0]).unwrap();
                weighted_sum(t, y, 9)
            }),
        ));
        let x = uniform_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let w = uniform_tensor(&mut rng, &[2, 4], -1.0, 1.0);
        let bias = uniform_tensor(&mut rng, &[2], -1.0, 1.0);
        out.push((
            "dense",
            check(&[x, w, bias], |t, v| {
                let y = t.dense(v[0], v[1], v[2]).unwrap();
                weighted_sum(t, y, 10)
            }),
        ));
        let img = uniform_tensor(&mut rng, &[2, 2, 5, 5], 0.0, 1.0);
        let k = uniform_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let kb = uniform_tensor(&mut rng, &[3], -1.0, 1.0);
        out.push((
            "conv2d",
            check(&[img.clone(), k.clone(), kb.clone()], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                weighted_sum(t, y, 11)
            }),
        ));
        out.push((
            "conv2d_strided",
            check(&[img, k, kb], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 0).unwrap();
                weighted_sum(t, y, 12)
            }),
        ));
        out.push(("sum", check(&[a], |t, v| t.sum(v[0]))));
        let logits = uniform_tensor(&mut rng, &[3, 4], -3.0, 3.0);
        out.push((
            "cross_entropy_mean",
            check(std::slice::from_ref(&logits), |t, v| {
                t.cross_entropy(v[0], &[0, 3, 1], Reduction::Mean).unwrap()
            }),
        ));
        out.push((
            "cross_entropy_sum",
            check(&[logits], |t, v| {
                t.cross_entropy(v[0], &[2, 2, 0], Reduction::Sum).unwrap()
            }),
        ));
        out.push(("conv_net", check(&net_inputs(seed), |t, v| net(t, v).1)));
        out
    }
}
