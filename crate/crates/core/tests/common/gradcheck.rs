//! Finite-difference gradient checks shared by the autodiff and acceptance suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssod::tensor::{ConvSpec, Float, Tape, Tensor, Var};
pub fn rand_tensor<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(lo..hi)))
}

pub type Build<T> = dyn Fn(&mut Tape<T>, &[Var]) -> Var;

/// Reduce an arbitrary output to a scalar with fixed pseudo-random weights.
pub fn probe_loss<T: Float>(tape: &mut Tape<T>, out: Var) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let probe = tape.constant(Tensor::from_fn(&shape, |i| T::of(((i as f64) * 0.731 + 0.3).sin())));
    let prod = tape.mul(out, probe).unwrap();
    tape.sum(prod).unwrap()
}

/// Worst `|analytic - central| / max(1, |analytic|)` over (a sample of)
/// every input element.
pub fn grad_check<T: Float>(inputs: &[Tensor<T>], build: &Build<T>, h: f64) -> f64 {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = probe_loss(&mut tape, out);
    tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let eval = |ins: &[Tensor<T>]| -> f64 {
        let mut t = Tape::<T>::no_grad();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &vs);
        let l = probe_loss(&mut t, o);
        t.value(l).item().as_f64()
    };
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        let step = (t.len() / 40).max(1);
        for e in (0..t.len()).step_by(step) {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[ti].data_mut()[e] += T::of(h);
            minus[ti].data_mut()[e] -= T::of(h);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[ti].data()[e].as_f64();
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    worst
}

pub fn away_from_zero<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(margin..1.0);
        T::of(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// Offsets whose sampling positions stay clear of bilinear kinks.
pub fn smooth_offsets<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-2i32..2) as f64 + rng.gen_range(0.15..0.85)))
}

pub struct Case<T: Float> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub build: Box<Build<T>>,
}

pub fn cases<T: Float>(seed: u64) -> Vec<Case<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv_spec = ConvSpec::new(1 + (seed % 2) as usize, 1 + (seed % 3) as usize, 1 + (seed % 2) as usize);
    let conv_in = rand_tensor(&mut rng, &[2, 2, 5, 6], -1.0, 1.0);
    let conv_w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let conv_b = rand_tensor(&mut rng, &[3], -1.0, 1.0);

    let dspec = ConvSpec::new(1, 1, 1);
    let d_in = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let d_w = rand_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let d_b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    let d_off = smooth_offsets(&mut rng, &[1, 18, 5, 5]);
    let d_mask = rand_tensor(&mut rng, &[1, 9, 5, 5], 0.1, 0.9);

    let n_in = rand_tensor(&mut rng, &[2, 3, 3, 4], -2.0, 2.0);
    let n_gain = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let n_bias = rand_tensor(&mut rng, &[3], -0.5, 0.5);

    vec![
        Case {
            name: "conv2d",
            inputs: vec![conv_in, conv_w, conv_b],
            build: Box::new(move |t: &mut Tape<T>, v: &[Var]| t.conv2d(v[0], v[1], Some(v[2]), conv_spec).unwrap()),
        },
        Case {
            name: "deform_conv2d",
            inputs: vec![d_in, d_w, d_b, d_off, d_mask],
            build: Box::new(move |t: &mut Tape<T>, v: &[Var]| {
                t.deform_conv2d(v[0], v[1], Some(v[2]), v[3], v[4], dspec).unwrap()
            }),
        },
        Case {
            name: "channel_norm",
            inputs: vec![n_in, n_gain, n_bias],
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| t.channel_norm(v[0], v[1], v[2], T::of(1e-5)).unwrap()),
        },
        Case {
            name: "relu",
            inputs: vec![away_from_zero(&mut rng, &[2, 3, 2, 2], 0.05)],
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| t.relu(v[0]).unwrap()),
        },
        Case {
            name: "sigmoid",
            inputs: vec![rand_tensor(&mut rng, &[2, 3, 2, 2], -3.0, 3.0)],
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| t.sigmoid(v[0]).unwrap()),
        },
        Case {
            name: "add_mul",
            inputs: vec![
                rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0),
                rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0),
            ],
            build: Box::new(|t: &mut Tape<T>, v: &[Var]| {
                let s = t.add(v[0], v[1]).unwrap();
                t.mul(s, v[1]).unwrap()
            }),
        },
    ]
}
