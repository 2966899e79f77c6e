use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

/// Worst relative error between the tape gradient of the scalar function
/// `f` at `x` and central finite differences with step `eps`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Multi-input form of [`finite_diff_check`]; every coordinate of every
/// input is perturbed.
pub fn finite_diff_check_many<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0].as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| match grads.get(*v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = T::of_f64(orig.as_f64() + eps);
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = T::of_f64(orig.as_f64() - eps);
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[k][i], numeric));
        }
    }
    Ok(worst)
}

/// Step used by [`op_gradient_suite`].
pub const SUITE_EPS: f64 = 1e-6;

fn suite_tensor(shape: &[usize], rng: &mut impl rand::Rng, margin: f64) -> Tensor<f64> {
    // values kept at least `margin` away from zero
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Pool inputs whose window maxima lead the runner-up by a clear gap.
fn pool_friendly(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut data = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        data[i] = rank as f64 * 0.05 - 1.0;
    }
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Central-difference check of every differentiable tape operation in double
/// precision. Each op is reduced to a scalar through a fixed random
/// weighting. Returns `(op name, worst relative error)`.
pub fn op_gradient_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let weights = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    fn reduce(t: &mut Tape<f64>, x: Var, w: &[f64]) -> Result<Var> {
        let shape = t.shape(x).to_vec();
        let wv = t.constant(shape, w.to_vec())?;
        let p = t.mul(x, wv)?;
        Ok(t.sum(p))
    }
    use rand::Rng;
    let mut out = Vec::new();

    let x = suite_tensor(&[2, 3, 5, 5], &mut rng, 0.05);
    let k = suite_tensor(&[4, 3, 3, 3], &mut rng, 0.05);
    let b = suite_tensor(&[4], &mut rng, 0.05);
    let w = weights(&mut rng, 2 * 4 * 5 * 5);
    out.push((
        "conv2d",
        finite_diff_check_many(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                reduce(t, y, &w)
            },
            &[x.clone(), k, b],
            SUITE_EPS,
        )?,
    ));
    let k2 = suite_tensor(&[2, 3, 3, 3], &mut rng, 0.05);
    let w2 = weights(&mut rng, 2 * 2 * 2 * 2);
    out.push((
        "conv2d_stride2",
        finite_diff_check_many(
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 0)?;
                reduce(t, y, &w2)
            },
            &[x.clone(), k2],
            SUITE_EPS,
        )?,
    ));

    let px = pool_friendly(&[2, 2, 4, 6], &mut rng);
    let wp = weights(&mut rng, 2 * 2 * 2 * 3);
    out.push((
        "max_pool_2x2",
        finite_diff_check(
            |t, v| {
                let (y, _) = t.max_pool_2x2(v)?;
                reduce(t, y, &wp)
            },
            &px,
            SUITE_EPS,
        )?,
    ));
    let wu = weights(&mut rng, 2 * 2 * 4 * 6);
    let small = suite_tensor(&[2, 2, 2, 3], &mut rng, 0.05);
    let indices = {
        let mut t = Tape::new();
        let v = t.leaf(&px);
        t.max_pool_2x2(v)?.1
    };
    out.push((
        "max_unpool_2x2",
        finite_diff_check(
            |t, v| {
                let y = t.max_unpool_2x2(v, &indices, 4, 6)?;
                reduce(t, y, &wu)
            },
            &small,
            SUITE_EPS,
        )?,
    ));
    let wup = weights(&mut rng, 2 * 2 * 4 * 6);
    out.push((
        "upsample_nearest_2x",
        finite_diff_check(
            |t, v| {
                let y = t.upsample_nearest_2x(v)?;
                reduce(t, y, &wup)
            },
            &small,
            SUITE_EPS,
        )?,
    ));

    let e = suite_tensor(&[2, 3, 4, 4], &mut rng, 0.05);
    let f = suite_tensor(&[2, 3, 4, 4], &mut rng, 0.05);
    let we = weights(&mut rng, e.numel());
    out.push((
        "relu",
        finite_diff_check(
            |t, v| {
                let y = t.relu(v);
                reduce(t, y, &we)
            },
            &e,
            SUITE_EPS,
        )?,
    ));
    out.push((
        "sigmoid",
        finite_diff_check(
            |t, v| {
                let y = t.sigmoid(v);
                reduce(t, y, &we)
            },
            &e,
            SUITE_EPS,
        )?,
    ));
    out.push((
        "add",
        finite_diff_check_many(
            |t, v| {
                let y = t.add(v[0], v[1])?;
                let y = t.mul(y, y)?;
                reduce(t, y, &we)
            },
            &[e.clone(), f.clone()],
            SUITE_EPS,
        )?,
    ));
    out.push((
        "mul",
        finite_diff_check_many(
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                reduce(t, y, &we)
            },
            &[e.clone(), f.clone()],
            SUITE_EPS,
        )?,
    ));
    let gate = suite_tensor(&[2, 1, 4, 4], &mut rng, 0.05);
    out.push((
        "scale_channels",
        finite_diff_check_many(
            |t, v| {
                let y = t.scale_channels(v[0], v[1])?;
                reduce(t, y, &we)
            },
            &[e.clone(), gate],
            SUITE_EPS,
        )?,
    ));
    let g = suite_tensor(&[2, 2, 4, 4], &mut rng, 0.05);
    let wc = weights(&mut rng, 2 * 5 * 4 * 4);
    out.push((
        "concat_channels",
        finite_diff_check_many(
            |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                reduce(t, y, &wc)
            },
            &[e.clone(), g],
            SUITE_EPS,
        )?,
    ));
    let scale = suite_tensor(&[3], &mut rng, 0.3);
    let shift = suite_tensor(&[3], &mut rng, 0.05);
    out.push((
        "batch_norm",
        finite_diff_check_many(
            |t, v| {
                let y = t.batch_norm(v[0], v[1], v[2], super::BatchNormMode::Train, 1e-5)?.out;
                reduce(t, y, &we)
            },
            &[e.clone(), scale, shift],
            SUITE_EPS,
        )?,
    ));
    let probs = Tensor::from_fn(vec![1, 1, 4, 4], |i| 0.05 + 0.9 * ((i * 7 % 16) as f64 / 15.0));
    let target: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
    out.push((
        "focal_loss",
        finite_diff_check(|t, v| t.focal_loss(v, &target, Some(0.25), 2.0), &probs, 1e-7)?,
    ));
    out.push(("sum", finite_diff_check(|t, v| Ok(t.sum(v)), &e, SUITE_EPS)?));
    out.push(("mean", finite_diff_check(|t, v| Ok(t.mean(v)), &e, SUITE_EPS)?));
    Ok(out)
}
