//! The image-embedding to text-token mapping network.
//!
//! Three residual MLP layers; the outputs of the first two are multiplied
//! elementwise by learnable conditioning vectors, and a final linear
//! projection maps the hidden state into the text encoder's token space:
//!
//! ```text
//! h1 = act(W1 x + b1) + R1 x        h1' = h1 ⊙ v1
//! h2 = act(W2 h1' + b2) + h1'       h2' = h2 ⊙ v2
//! h3 = act(W3 h2' + b3) + h2'       out = P h3
//! ```
//!
//! `R1` is the identity when the hidden width equals the input width and a
//! learned matrix otherwise.

mod io;

pub use io::{from_bytes as params_from_bytes, load_params, save_params, to_bytes as params_to_bytes, PARAMS_MAGIC, PARAMS_VERSION};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{Embedding, Space};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (T::one() + (-x).exp()),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiMapParams<T> {
    pub d_joint: usize,
    pub d_tok: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    /// Learned skip for layer 1, present only when `hidden != d_joint`.
    pub skip1: Option<Matrix<T>>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    pub w3: Matrix<T>,
    pub b3: Vec<T>,
    pub cond1: Vec<T>,
    pub cond2: Vec<T>,
    pub proj: Matrix<T>,
}

/// Names of the parameter tensors, in serialization order.
pub const TENSOR_NAMES: [&str; 10] = ["w1", "b1", "skip1", "w2", "b2", "w3", "b3", "cond1", "cond2", "proj"];

impl<T: Scalar> PiMapParams<T> {
    /// Gaussian fan-in initialization; biases zero, conditioning uniform.
    pub fn init<R: Rng + ?Sized>(d_joint: usize, d_tok: usize, hidden: usize, activation: Activation, rng: &mut R) -> Result<Self> {
        if d_joint == 0 || d_tok == 0 || hidden == 0 {
            return Err(Error::Config("mapping network dimensions must be positive".into()));
        }
        let mut gauss = |rows: usize, cols: usize| {
            let std = 1.0 / (cols as f64).sqrt();
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
        };
        let w1 = gauss(hidden, d_joint);
        let skip1 = (hidden != d_joint).then(|| gauss(hidden, d_joint));
        let w2 = gauss(hidden, hidden);
        let w3 = gauss(hidden, hidden);
        let proj = gauss(d_tok, hidden);
        let uniform = vec![T::one() / T::lit(hidden as f64); hidden];
        Ok(Self {
            d_joint,
            d_tok,
            hidden,
            activation,
            w1,
            b1: vec![T::zero(); hidden],
            skip1,
            w2,
            b2: vec![T::zero(); hidden],
            w3,
            b3: vec![T::zero(); hidden],
            cond1: uniform.clone(),
            cond2: uniform,
            proj,
        })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            d_joint: self.d_joint,
            d_tok: self.d_tok,
            hidden: self.hidden,
            activation: self.activation,
            w1: z(&self.w1),
            b1: vec![T::zero(); self.hidden],
            skip1: self.skip1.as_ref().map(z),
            w2: z(&self.w2),
            b2: vec![T::zero(); self.hidden],
            w3: z(&self.w3),
            b3: vec![T::zero(); self.hidden],
            cond1: vec![T::zero(); self.hidden],
            cond2: vec![T::zero(); self.hidden],
            proj: z(&self.proj),
        }
    }

    /// Parameter tensors as flat slices, with their names.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out: Vec<(&'static str, &[T])> = vec![("w1", self.w1.as_slice()), ("b1", &self.b1)];
        if let Some(s) = &self.skip1 {
            out.push(("skip1", s.as_slice()));
        }
        out.extend([
            ("w2", self.w2.as_slice()),
            ("b2", &self.b2[..]),
            ("w3", self.w3.as_slice()),
            ("b3", &self.b3[..]),
            ("cond1", &self.cond1[..]),
            ("cond2", &self.cond2[..]),
            ("proj", self.proj.as_slice()),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out: Vec<(&'static str, &mut [T])> = vec![("w1", self.w1.as_mut_slice()), ("b1", &mut self.b1)];
        if let Some(s) = &mut self.skip1 {
            out.push(("skip1", s.as_mut_slice()));
        }
        out.extend([
            ("w2", self.w2.as_mut_slice()),
            ("b2", &mut self.b2[..]),
            ("w3", self.w3.as_mut_slice()),
            ("b3", &mut self.b3[..]),
            ("cond1", &mut self.cond1[..]),
            ("cond2", &mut self.cond2[..]),
            ("proj", self.proj.as_mut_slice()),
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| linalg::all_finite(t))
    }

    pub fn validate(&self) -> Result<()> {
        let shape = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Shape(format!("inconsistent mapping network shape: {what}")))
            }
        };
        let h = self.hidden;
        shape(self.w1.rows() == h && self.w1.cols() == self.d_joint, "w1")?;
        shape(self.b1.len() == h && self.b2.len() == h && self.b3.len() == h, "biases")?;
        shape(self.w2.rows() == h && self.w2.cols() == h, "w2")?;
        shape(self.w3.rows() == h && self.w3.cols() == h, "w3")?;
        shape(self.cond1.len() == h && self.cond2.len() == h, "conditioning vectors")?;
        shape(self.proj.rows() == self.d_tok && self.proj.cols() == h, "proj")?;
        match &self.skip1 {
            Some(s) => shape(h != self.d_joint && s.rows() == h && s.cols() == self.d_joint, "skip1")?,
            None => shape(h == self.d_joint, "identity skip needs hidden == d_joint")?,
        }
        if !self.is_finite() {
            return Err(Error::Domain("mapping network has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> PiMapParams<U> {
        PiMapParams {
            d_joint: self.d_joint,
            d_tok: self.d_tok,
            hidden: self.hidden,
            activation: self.activation,
            w1: self.w1.cast(),
            b1: crate::scalar::cast_vec(&self.b1),
            skip1: self.skip1.as_ref().map(Matrix::cast),
            w2: self.w2.cast(),
            b2: crate::scalar::cast_vec(&self.b2),
            w3: self.w3.cast(),
            b3: crate::scalar::cast_vec(&self.b3),
            cond1: crate::scalar::cast_vec(&self.cond1),
            cond2: crate::scalar::cast_vec(&self.cond2),
            proj: self.proj.cast(),
        }
    }

    /// `self += alpha * other` over every tensor.
    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            linalg::axpy(alpha, src, dst);
        }
    }
}

/// Intermediates of one forward pass, consumed by [`PiMapParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    x: Vec<T>,
    a1: Vec<T>,
    h1: Vec<T>,
    h1c: Vec<T>,
    a2: Vec<T>,
    h2: Vec<T>,
    h2c: Vec<T>,
    a3: Vec<T>,
    h3: Vec<T>,
}

fn affine<T: Scalar>(w: &Matrix<T>, x: &[T], b: &[T]) -> Vec<T> {
    let mut a = w.matvec(x);
    linalg::axpy(T::one(), b, &mut a);
    a
}

fn hadamard<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

impl<T: Scalar> PiMapParams<T> {
    pub fn forward_cached(&self, x: &[T]) -> Result<(Vec<T>, ForwardCache<T>)> {
        if x.len() != self.d_joint {
            return Err(Error::Shape(format!(
                "mapping network expects input of length {}, got {}",
                self.d_joint,
                x.len()
            )));
        }
        let act = self.activation;
        let a1 = affine(&self.w1, x, &self.b1);
        let mut h1: Vec<T> = a1.iter().map(|&v| act.apply(v)).collect();
        match &self.skip1 {
            Some(s) => linalg::axpy(T::one(), &s.matvec(x), &mut h1),
            None => linalg::axpy(T::one(), x, &mut h1),
        }
        let h1c = hadamard(&h1, &self.cond1);
        let a2 = affine(&self.w2, &h1c, &self.b2);
        let h2: Vec<T> = a2.iter().zip(&h1c).map(|(&a, &r)| act.apply(a) + r).collect();
        let h2c = hadamard(&h2, &self.cond2);
        let a3 = affine(&self.w3, &h2c, &self.b3);
        let h3: Vec<T> = a3.iter().zip(&h2c).map(|(&a, &r)| act.apply(a) + r).collect();
        let out = self.proj.matvec(&h3);
        Ok((
            out,
            ForwardCache {
                x: x.to_vec(),
                a1,
                h1,
                h1c,
                a2,
                h2,
                h2c,
                a3,
                h3,
            },
        ))
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Accumulates the parameter gradient of `g_out · out` into `grads` and
    /// returns the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache<T>, g_out: &[T], grads: &mut Self) -> Vec<T> {
        let act = self.activation;
        grads.proj.add_outer(T::one(), g_out, &cache.h3);
        let g_h3 = self.proj.t_matvec(g_out);

        let g_a3: Vec<T> = g_h3.iter().zip(&cache.a3).map(|(&g, &a)| g * act.derivative(a)).collect();
        grads.w3.add_outer(T::one(), &g_a3, &cache.h2c);
        linalg::axpy(T::one(), &g_a3, &mut grads.b3);
        let g_h2c = linalg::add(&self.w3.t_matvec(&g_a3), &g_h3);

        linalg::axpy(T::one(), &hadamard(&g_h2c, &cache.h2), &mut grads.cond2);
        let g_h2 = hadamard(&g_h2c, &self.cond2);

        let g_a2: Vec<T> = g_h2.iter().zip(&cache.a2).map(|(&g, &a)| g * act.derivative(a)).collect();
        grads.w2.add_outer(T::one(), &g_a2, &cache.h1c);
        linalg::axpy(T::one(), &g_a2, &mut grads.b2);
        let g_h1c = linalg::add(&self.w2.t_matvec(&g_a2), &g_h2);

        linalg::axpy(T::one(), &hadamard(&g_h1c, &cache.h1), &mut grads.cond1);
        let g_h1 = hadamard(&g_h1c, &self.cond1);

        let g_a1: Vec<T> = g_h1.iter().zip(&cache.a1).map(|(&g, &a)| g * act.derivative(a)).collect();
        grads.w1.add_outer(T::one(), &g_a1, &cache.x);
        linalg::axpy(T::one(), &g_a1, &mut grads.b1);
        let mut g_x = self.w1.t_matvec(&g_a1);
        match (&self.skip1, &mut grads.skip1) {
            (Some(s), Some(gs)) => {
                gs.add_outer(T::one(), &g_h1, &cache.x);
                linalg::axpy(T::one(), &s.t_matvec(&g_h1), &mut g_x);
            }
            _ => linalg::axpy(T::one(), &g_h1, &mut g_x),
        }
        g_x
    }
}

/// Maps a joint-space image embedding to one token-space embedding.
pub fn pi_forward<T: Scalar>(x: &Embedding<T>, params: &PiMapParams<T>) -> Result<Embedding<T>> {
    if x.space() != Space::Joint {
        return Err(Error::Shape("mapping network input must be a joint-space embedding".into()));
    }
    Embedding::token(params.forward(x.values())?)
}

/// Index of the largest value; the lowest index wins ties.
fn argmax_lowest<T: Scalar>(v: &[T], skip: Option<usize>) -> usize {
    let mut best: Option<usize> = None;
    for (i, &x) in v.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        match best {
            Some(b) if x <= v[b] => {}
            _ => best = Some(i),
        }
    }
    best.expect("at least two dimensions")
}

pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Conditioning-vector initialization from template images and captions.
///
/// With `δ = |mean(images) − mean(captions)|` per dimension and `i1`, `i2`
/// the dimensions of the largest and second-largest `δ` (lowest index wins
/// ties), returns `(softmax(δ with δ[i1] = 0), softmax(δ with δ[i2] = 0))`.
pub fn init_conditioning<T: Scalar>(image_embs: &[Embedding<T>], caption_embs: &[Embedding<T>]) -> Result<(Vec<T>, Vec<T>)> {
    if image_embs.is_empty() || caption_embs.is_empty() {
        return Err(Error::Shape("conditioning init needs at least one image and one caption".into()));
    }
    let imgs: Vec<Vec<T>> = image_embs.iter().map(|e| e.values().to_vec()).collect();
    let caps: Vec<Vec<T>> = caption_embs.iter().map(|e| e.values().to_vec()).collect();
    let mi = linalg::mean_of(&imgs)?;
    let mc = linalg::mean_of(&caps)?;
    if mi.len() != mc.len() {
        return Err(Error::Shape(format!(
            "image embeddings have dimension {}, caption embeddings {}",
            mi.len(),
            mc.len()
        )));
    }
    if mi.len() < 2 {
        return Err(Error::Shape("conditioning init needs at least two dimensions".into()));
    }
    let delta: Vec<T> = mi.iter().zip(&mc).map(|(&a, &b)| (a - b).abs()).collect();
    Ok(conditioning_from_delta(&delta))
}

pub fn conditioning_from_delta<T: Scalar>(delta: &[T]) -> (Vec<T>, Vec<T>) {
    let i1 = argmax_lowest(delta, None);
    let i2 = argmax_lowest(delta, Some(i1));
    let mut d1 = delta.to_vec();
    d1[i1] = T::zero();
    let mut d2 = delta.to_vec();
    d2[i2] = T::zero();
    (softmax(&d1), softmax(&d2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::substream;

    #[test]
    fn worked_example_zeroes_the_right_dimensions() {
        let delta = [0.5, 0.1, 0.9, 0.2];
        let (v1, v2) = conditioning_from_delta(&delta);
        assert_eq!(v1, softmax(&[0.5, 0.1, 0.0, 0.2]));
        assert_eq!(v2, softmax(&[0.0, 0.1, 0.9, 0.2]));
    }

    #[test]
    fn ties_break_toward_lowest_index() {
        let (v1, v2) = conditioning_from_delta(&[0.3f64; 4]);
        assert_eq!(v1, softmax(&[0.0, 0.3, 0.3, 0.3]));
        assert_eq!(v2, softmax(&[0.3, 0.0, 0.3, 0.3]));
    }

    #[test]
    fn identical_means_give_uniform_vectors() {
        let e: Embedding<f64> = Embedding::joint(vec![0.2, -0.4, 0.1]).unwrap();
        let (v1, v2) = init_conditioning(std::slice::from_ref(&e), std::slice::from_ref(&e)).unwrap();
        for v in [v1, v2] {
            assert!(v.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let a = Embedding::joint(vec![0.2, -0.4, 0.1]).unwrap();
        let b = Embedding::joint(vec![0.2, -0.4]).unwrap();
        assert!(matches!(init_conditioning(&[a], &[b]), Err(Error::Shape(_))));
    }

    #[test]
    fn output_has_token_dimension() {
        let p = PiMapParams::<f64>::init(64, 48, 64, Activation::Tanh, &mut substream(1, "init")).unwrap();
        let x = Embedding::joint(vec![0.1; 64]).unwrap();
        let y = pi_forward(&x, &p).unwrap();
        assert_eq!(y.len(), 48);
        assert_eq!(y.space(), Space::Token);
        assert!(pi_forward(&Embedding::joint(vec![0.1; 63]).unwrap(), &p).is_err());
    }

    #[test]
    fn zero_weights_reduce_to_projected_residual_path() {
        // Exact in binary arithmetic: tanh(0) = 0, identity skips, unit
        // conditioning.
        let mut p = PiMapParams::<f64>::init(3, 2, 3, Activation::Tanh, &mut substream(2, "init")).unwrap();
        for (name, t) in p.tensors_mut() {
            if name != "proj" {
                t.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        p.cond1 = vec![1.0; 3];
        p.cond2 = vec![1.0; 3];
        p.proj = Matrix::from_vec(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.25, 4.0]).unwrap();
        let x = [0.5, -2.0, 1.0];
        assert_eq!(p.forward(&x).unwrap(), vec![-3.0, 3.0]);

        p.cond1 = vec![0.5, 0.25, 2.0];
        p.cond2 = vec![2.0, 4.0, 0.5];
        // h3 = x ⊙ v1 ⊙ v2 = [0.5, -2.0, 1.0]
        assert_eq!(p.forward(&x).unwrap(), vec![-3.0, 3.0]);
    }

    #[test]
    fn silu_derivative_matches_finite_difference() {
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let fd = (Activation::Silu.apply(x + h) - Activation::Silu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Silu.derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn validate_catches_shape_corruption() {
        let mut p = PiMapParams::<f64>::init(4, 3, 4, Activation::Tanh, &mut substream(2, "init")).unwrap();
        assert!(p.validate().is_ok());
        p.b2.pop();
        assert!(p.validate().is_err());
    }

    #[test]
    fn learned_skip_when_hidden_differs() {
        let p = PiMapParams::<f64>::init(4, 3, 6, Activation::Silu, &mut substream(2, "init")).unwrap();
        assert!(p.skip1.is_some());
        assert!(p.validate().is_ok());
        assert_eq!(p.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap().len(), 3);
    }
}
