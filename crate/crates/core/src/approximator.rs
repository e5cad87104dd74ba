//! Feed-forward rectifier networks with exact reverse-mode gradients, an
//! Adam optimiser and a spectral-norm Lipschitz bound.
//!
//! Networks are generic over the float type. Training runs in `f32`; the same
//! code instantiated at `f64` is what the finite-difference checks exercise.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Scalar: Float + Debug + Send + Sync + 'static {
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Eight independent accumulators so the compiler can vectorise the loop.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            acc[j] = acc[j] + x[j] * y[j];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * *xi;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    fn row(&self, o: usize) -> &[T] {
        &self.weights[o * self.n_in..(o + 1) * self.n_in]
    }
}

/// Rectifier on hidden layers, identity on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = f32> {
    sizes: Vec<usize>,
    layers: Vec<Layer<T>>,
}

/// Activations recorded by [`Mlp::forward_cached`]; `acts[0]` is the input.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub batch: usize,
    acts: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("cache holds at least the input")
    }
}

/// Gradients shaped like the network's layers: `(d weights, d bias)` per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![T::zero(); l.weights.len()], vec![T::zero(); l.bias.len()]))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn flat(&self) -> Vec<T> {
        self.iter().copied().collect()
    }
}

impl<T: Scalar> Mlp<T> {
    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "layer sizes must list at least input and output, all positive: {sizes:?}"
            )));
        }
        Ok(())
    }

    /// Uniform `[-1/sqrt(n_in), 1/sqrt(n_in)]` initialisation, deterministic per generator state.
    pub fn new_uniform<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = 1.0 / (n_in as f64).sqrt();
                let mut draw = || T::of_f64(rng.gen_range(-bound..=bound));
                let weights = (0..n_in * n_out).map(|_| draw()).collect();
                let bias = (0..n_out).map(|_| draw()).collect();
                Layer { n_in, n_out, weights, bias }
            })
            .collect();
        Ok(Mlp { sizes: sizes.to_vec(), layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::from_flat(sizes, vec![T::zero(); param_count(sizes)])
    }

    /// Rebuilds a network from the flat layout used by [`Mlp::flat_params`].
    pub fn from_flat(sizes: &[usize], params: Vec<T>) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(Error::Dimension { expected, got: params.len() });
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("network parameter".into()));
        }
        let mut it = params.into_iter();
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let weights: Vec<T> = it.by_ref().take(n_in * n_out).collect();
                let bias: Vec<T> = it.by_ref().take(n_out).collect();
                Layer { n_in, n_out, weights, bias }
            })
            .collect();
        Ok(Mlp { sizes: sizes.to_vec(), layers })
    }

    /// Per layer: weights (row-major) then biases.
    pub fn flat_params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.sizes)
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            sizes: self.sizes.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    n_in: l.n_in,
                    n_out: l.n_out,
                    weights: l.weights.iter().map(|&x| U::of_f64(x.as_f64())).collect(),
                    bias: l.bias.iter().map(|&x| U::of_f64(x.as_f64())).collect(),
                })
                .collect(),
        }
    }

    fn check_input(&self, input: &[T], batch: usize) -> Result<()> {
        let expected = batch * self.input_dim();
        if input.len() != expected {
            return Err(Error::Dimension { expected, got: input.len() });
        }
        Ok(())
    }

    /// Evaluates a row-major `batch x input_dim` block.
    pub fn forward(&self, input: &[T], batch: usize) -> Result<Vec<T>> {
        self.check_input(input, batch)?;
        let mut cur = input.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            cur = self.apply_layer(layer, &cur, batch, li + 1 < self.layers.len());
        }
        Ok(cur)
    }

    pub fn forward_cached(&self, input: &[T], batch: usize) -> Result<ForwardCache<T>> {
        self.check_input(input, batch)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for (li, layer) in self.layers.iter().enumerate() {
            let next = self.apply_layer(layer, acts.last().unwrap(), batch, li + 1 < self.layers.len());
            acts.push(next);
        }
        Ok(ForwardCache { batch, acts })
    }

    fn apply_layer(&self, layer: &Layer<T>, x: &[T], batch: usize, hidden: bool) -> Vec<T> {
        let mut out = vec![T::zero(); batch * layer.n_out];
        for (xb, ob) in x.chunks_exact(layer.n_in).zip(out.chunks_exact_mut(layer.n_out)) {
            for (o, y) in ob.iter_mut().enumerate() {
                let z = layer.bias[o] + dot(xb, layer.row(o));
                *y = if hidden { relu(z) } else { z };
            }
        }
        out
    }

    /// Gradient of `sum(output * output_grad)` with respect to every parameter.
    pub fn backward(&self, input: &[T], batch: usize, output_grad: &[T]) -> Result<Gradients<T>> {
        let cache = self.forward_cached(input, batch)?;
        self.backward_cached(&cache, output_grad)
    }

    pub fn backward_cached(&self, cache: &ForwardCache<T>, output_grad: &[T]) -> Result<Gradients<T>> {
        let batch = cache.batch;
        let expected = batch * self.output_dim();
        if output_grad.len() != expected || cache.acts.len() != self.layers.len() + 1 {
            return Err(Error::Dimension { expected, got: output_grad.len() });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = output_grad.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let a_in = &cache.acts[li];
            let (gw, gb) = &mut grads.layers[li];
            let mut d_in = if li > 0 { vec![T::zero(); batch * layer.n_in] } else { Vec::new() };
            for b in 0..batch {
                let xb = &a_in[b * layer.n_in..(b + 1) * layer.n_in];
                for o in 0..layer.n_out {
                    let d = delta[b * layer.n_out + o];
                    if d == T::zero() {
                        continue;
                    }
                    gb[o] = gb[o] + d;
                    axpy(&mut gw[o * layer.n_in..(o + 1) * layer.n_in], xb, d);
                    if li > 0 {
                        axpy(&mut d_in[b * layer.n_in..(b + 1) * layer.n_in], layer.row(o), d);
                    }
                }
            }
            if li > 0 {
                // rectifier derivative, 0 at exactly 0
                for (d, &a) in d_in.iter_mut().zip(a_in.iter()) {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                }
                delta = d_in;
            }
        }
        Ok(grads)
    }

    /// `self <- (1 - rate) * self + rate * online`.
    pub fn soft_update_from(&mut self, online: &Mlp<T>, rate: T) {
        let keep = T::one() - rate;
        for (t, s) in self.layers.iter_mut().zip(&online.layers) {
            for (a, &b) in t.weights.iter_mut().zip(&s.weights).chain(t.bias.iter_mut().zip(&s.bias)) {
                *a = keep * *a + rate * b;
            }
        }
    }

    /// Product of per-layer spectral norms: an upper bound on the network's
    /// Lipschitz constant for 1-Lipschitz activations.
    pub fn lipschitz_upper_estimate(&self) -> f64 {
        self.layers.iter().map(|l| spectral_norm(&l.weights, l.n_out, l.n_in)).product()
    }
}

#[inline]
fn relu<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        T::zero()
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

pub const POWER_ITERATIONS: usize = 50;
pub const POWER_TOLERANCE: f64 = 1e-6;

/// Largest singular value of a row-major `rows x cols` matrix by power iteration on `W^T W`.
pub fn spectral_norm<T: Scalar>(w: &[T], rows: usize, cols: usize) -> f64 {
    let w: Vec<f64> = w.iter().map(|x| x.as_f64()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.5..1.5)).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    let mut u = vec![0.0; rows];
    for _ in 0..POWER_ITERATIONS {
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = dot(&w[r * cols..(r + 1) * cols], &v);
        }
        let mut next = vec![0.0; cols];
        for (r, &ur) in u.iter().enumerate() {
            axpy(&mut next, &w[r * cols..(r + 1) * cols], ur);
        }
        let lambda = normalize(&mut next);
        if lambda == 0.0 {
            break;
        }
        let estimate = lambda.sqrt();
        v = next;
        let converged = (estimate - sigma).abs() <= POWER_TOLERANCE * estimate;
        sigma = estimate;
        if converged {
            break;
        }
    }
    // any column norm is also attained by some unit vector
    let col_max = (0..cols)
        .map(|c| (0..rows).map(|r| w[r * cols + c].powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    sigma.max(col_max)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adaptive-moment optimiser state for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(net: &Mlp<f32>, config: AdamConfig) -> Self {
        let n = net.param_count();
        Adam { config, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One bias-corrected update. Fails without touching anything on a non-finite gradient.
    pub fn step(&mut self, net: &mut Mlp<f32>, grads: &Gradients<f32>) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradient at optimiser step {}", self.step)));
        }
        if grads.iter().count() != self.m.len() {
            return Err(Error::Dimension { expected: self.m.len(), got: grads.iter().count() });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (c.learning_rate / bc1) as f32;
        let inv_sqrt_bc2 = (1.0 / bc2.sqrt()) as f32;
        let eps = c.epsilon as f32;
        let mut k = 0;
        for (layer, (gw, gb)) in net.layers.iter_mut().zip(&grads.layers) {
            for (p, &g) in layer.weights.iter_mut().zip(gw).chain(layer.bias.iter_mut().zip(gb)) {
                let m = b1 * self.m[k] + (1.0 - b1) * g;
                let v = b2 * self.v[k] + (1.0 - b2) * g * g;
                self.m[k] = m;
                self.v[k] = v;
                *p -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
                k += 1;
            }
        }
        Ok(())
    }
}

/// Largest `|f(x) - f(y)| / |x - y|` over the given point pairs (scalar-output nets).
pub fn empirical_slope(net: &Mlp<f32>, pairs: &[(Vec<f32>, Vec<f32>)]) -> Result<f64> {
    let mut best = 0.0f64;
    let wide = net.cast::<f64>();
    for (x, y) in pairs {
        let fx = wide.forward(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), 1)?;
        let fy = wide.forward(&y.iter().map(|&v| v as f64).collect::<Vec<_>>(), 1)?;
        let dist = x
            .iter()
            .zip(y)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if dist > 0.0 {
            let num = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            best = best.max(num / dist);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs_zero() {
        let net: Mlp<f32> = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0], 1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let net: Mlp<f32> = Mlp::from_flat(&[1, 1], vec![2.0, 1.0]).unwrap();
        assert_eq!(net.forward(&[3.0], 1).unwrap(), vec![7.0]);
    }

    #[test]
    fn batch_matches_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net: Mlp<f32> = Mlp::new_uniform(&[4, 16, 16, 3], &mut rng).unwrap();
        let x: Vec<f32> = (0..32 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let all = net.forward(&x, 32).unwrap();
        for b in 0..32 {
            let row = net.forward(&x[b * 4..(b + 1) * 4], 1).unwrap();
            assert_eq!(&all[b * 3..(b + 1) * 3], row.as_slice());
        }
        assert_eq!(net.forward(&x, 32).unwrap(), all);
    }

    #[test]
    fn dimension_errors() {
        let net: Mlp<f32> = Mlp::zeros(&[2, 1]).unwrap();
        assert!(net.forward(&[1.0], 1).is_err());
        assert!(net.backward(&[1.0, 2.0], 1, &[1.0, 1.0]).is_err());
        assert!(Mlp::<f32>::from_flat(&[2, 1], vec![0.0; 2]).is_err());
        assert!(Mlp::<f32>::zeros(&[2]).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net: Mlp<f32> = Mlp::new_uniform(&[3, 8, 2], &mut rng).unwrap();
        let g = net.backward(&[0.1, 0.2, 0.3], 1, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rectifier_at_zero_blocks_gradient() {
        // hidden unit pre-activation is exactly 0 for this input
        let net: Mlp<f64> = Mlp::from_flat(&[1, 1, 1], vec![1.0, 0.0, 3.0, 0.5]).unwrap();
        let g = net.backward(&[0.0], 1, &[1.0]).unwrap();
        assert_eq!(g.layers[0], (vec![0.0], vec![0.0]));
        // output weight sees the zero activation, output bias still gets 1
        assert_eq!(g.layers[1], (vec![0.0], vec![1.0]));
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(param_count(&[3, 256, 256, 1]), 4 * 256 + 257 * 256 + 257);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: Mlp<f32> = Mlp::new_uniform(&[3, 7, 2], &mut rng).unwrap();
        assert_eq!(net.flat_params().len(), net.param_count());
        let back = Mlp::<f32>::from_flat(net.sizes(), net.flat_params()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn init_respects_bound_and_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let na: Mlp<f32> = Mlp::new_uniform(&[16, 4], &mut a).unwrap();
        let nb: Mlp<f32> = Mlp::new_uniform(&[16, 4], &mut b).unwrap();
        assert_eq!(na, nb);
        assert!(na.flat_params().iter().all(|x| x.abs() <= 0.25));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net: Mlp<f32> = Mlp::new_uniform(&[2, 4, 1], &mut rng).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(&net, AdamConfig::default());
        let zero = Gradients::zeros_like(&net);
        opt.step(&mut net, &zero).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut net: Mlp<f32> = Mlp::zeros(&[1, 1]).unwrap();
        let mut opt = Adam::new(&net, AdamConfig::default());
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].0[0] = f32::NAN;
        assert!(opt.step(&mut net, &g).is_err());
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn adam_minimises_quadratic() {
        // loss (x - 1.7)^2 where x is the bias of a 1->1 layer fed with 0
        let target = 1.7f32;
        let mut net: Mlp<f32> = Mlp::from_flat(&[1, 1], vec![0.0, -0.4]).unwrap();
        let mut opt = Adam::new(&net, AdamConfig { learning_rate: 1e-2, ..Default::default() });
        for _ in 0..2000 {
            let y = net.forward(&[0.0], 1).unwrap()[0];
            let g = net.backward(&[0.0], 1, &[2.0 * (y - target)]).unwrap();
            opt.step(&mut net, &g).unwrap();
        }
        let x = net.forward(&[0.0], 1).unwrap()[0];
        assert!((x - target).abs() < 1e-3, "x = {x}");
    }

    #[test]
    fn spectral_norm_simple_cases() {
        let net: Mlp<f32> = Mlp::from_flat(&[1, 1], vec![3.0, 0.0]).unwrap();
        assert!((net.lipschitz_upper_estimate() - 3.0).abs() < 1e-9);
        let mut eye = vec![0.0f32; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let mut flat = eye.clone();
        flat.extend([0.0; 4]);
        flat.extend(eye);
        flat.extend([0.0; 4]);
        let net: Mlp<f32> = Mlp::from_flat(&[4, 4, 4], flat).unwrap();
        assert!((net.lipschitz_upper_estimate() - 1.0).abs() < 1e-9);
        // rank-one matrix whose top singular value is 5
        let w = [3.0f64, 4.0, 0.0, 0.0];
        assert!((spectral_norm(&w, 2, 2) - 5.0).abs() < 1e-6);
        let w = [1.0f64, -1.0];
        assert!((spectral_norm(&w, 1, 2) - 2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn soft_update_interpolates() {
        let mut t: Mlp<f32> = Mlp::from_flat(&[1, 1], vec![0.0, 0.0]).unwrap();
        let s: Mlp<f32> = Mlp::from_flat(&[1, 1], vec![1.0, 2.0]).unwrap();
        t.soft_update_from(&s, 0.25);
        assert_eq!(t.flat_params(), vec![0.25, 0.5]);
        t.soft_update_from(&s, 1.0);
        assert_eq!(t.flat_params(), vec![1.0, 2.0]);
    }
}
