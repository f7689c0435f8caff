use std::sync::Arc;

use crate::encoder::{Embedding, EncoderPair, EncoderPairDescriptor, MediaDescriptor, TokenElement, TokenSequence};
use crate::error::{Error, Result};
use crate::linalg::{self, axpy, normalize_vjp, normalized, Matrix};
use crate::scalar::{cast_vec, Scalar};
use crate::world::World;

/// Guards the per-token normalization against a zero injection.
const TOKEN_NORM_EPS: f64 = 1e-12;

/// Deterministic encoder pair backed by a synthetic [`World`].
///
/// The text side unit-normalizes every token embedding (a stand-in for the
/// input layer norm of a transformer text encoder), mean-pools, applies the
/// fixed linear map from token space to the joint space and normalizes.
#[derive(Debug, Clone)]
pub struct ToyEncoder<T> {
    world: Arc<World>,
    descriptor: EncoderPairDescriptor,
    /// Token space -> joint space, `d_joint x d_tok`.
    readout: Matrix<T>,
    token_embeddings: Vec<Vec<T>>,
    text_gap: Vec<T>,
}

impl<T: Scalar> ToyEncoder<T> {
    pub fn new(world: Arc<World>) -> Self {
        let cfg = &world.cfg;
        let readout64 = Matrix::from_fn(cfg.d_joint, cfg.d_tok, |r, c| {
            world
                .joint_basis
                .iter()
                .zip(&world.token_basis)
                .map(|(j, t)| j[r] * t[c])
                .sum::<f64>()
        });
        // e_w = readoutᵀ · meaning_w, exact inverse on the semantic subspace.
        let token_embeddings = world.vocab.meanings.iter().map(|m| cast_vec(&readout64.t_matvec(m))).collect();
        let descriptor = EncoderPairDescriptor {
            encoder_id: world.encoder_id(),
            d_joint: cfg.d_joint,
            d_tok: cfg.d_tok,
            normalizes_output: cfg.normalizes_output,
        };
        Self {
            text_gap: cast_vec(&world.text_gap),
            readout: readout64.cast(),
            token_embeddings,
            descriptor,
            world,
        }
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    /// Token embedding of a vocabulary word.
    pub fn word_embedding(&self, id: u32) -> Result<&[T]> {
        self.token_embeddings
            .get(id as usize)
            .map(Vec::as_slice)
            .ok_or(Error::Vocabulary(id))
    }

    pub fn readout(&self) -> &Matrix<T> {
        &self.readout
    }

    fn token_vector<'a>(&'a self, e: &'a TokenElement<T>) -> Result<&'a [T]> {
        match e {
            TokenElement::Word(id) => self.word_embedding(*id),
            TokenElement::Continuous(v) => Ok(v),
        }
    }

    fn token_scale(v: &[T]) -> T {
        (linalg::dot(v, v) + T::lit(TOKEN_NORM_EPS * TOKEN_NORM_EPS)).sqrt()
    }

    /// Forward pass keeping the intermediates the gradient needs.
    fn text_forward(&self, seq: &TokenSequence<T>) -> Result<TextForward<T>> {
        seq.validate(self.descriptor.d_tok)?;
        let n = T::lit(seq.len() as f64);
        let mut pooled = vec![T::zero(); self.descriptor.d_tok];
        for e in seq.elements() {
            let v = self.token_vector(e)?;
            axpy(T::one() / (Self::token_scale(v) * n), v, &mut pooled);
        }
        let z = self.readout.matvec(&pooled);
        let y = normalized(&z);
        let shifted = linalg::add(&y, &self.text_gap);
        let out = if self.descriptor.normalizes_output {
            normalized(&shifted)
        } else {
            shifted.clone()
        };
        Ok(TextForward { z, shifted, out })
    }
}

struct TextForward<T> {
    z: Vec<T>,
    shifted: Vec<T>,
    out: Vec<T>,
}

impl<T: Scalar> EncoderPair<T> for ToyEncoder<T> {
    fn descriptor(&self) -> &EncoderPairDescriptor {
        &self.descriptor
    }

    fn encode_image(&self, media: &MediaDescriptor) -> Result<Embedding<T>> {
        let m = match media {
            MediaDescriptor::Synthetic(m) => m,
            other => {
                return Err(Error::Decode(format!(
                    "toy encoder cannot decode non-synthetic media `{}`",
                    other.media_id()
                )))
            }
        };
        m.validate()?;
        if m.is_video {
            let frames = self.encode_frames(media)?;
            let values: Vec<Vec<T>> = frames.into_iter().map(Embedding::into_values).collect();
            let mean = linalg::mean_of(&values)?;
            let mean = if self.descriptor.normalizes_output {
                normalized(&mean)
            } else {
                mean
            };
            return Embedding::joint(mean);
        }
        let inst = self.world.instance(&m.instance_id)?;
        let bg = self.world.background(&m.background_id)?;
        let mut mix = self.world.clean_mix(inst, bg, m.background_weight);
        axpy(1.0, &self.world.noise(&m.noise_label()), &mut mix);
        let mut v = normalized(&mix);
        axpy(1.0, &self.world.image_gap, &mut v);
        if self.descriptor.normalizes_output {
            v = normalized(&v);
        }
        Embedding::joint(cast_vec(&v))
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let vocab = &self.world.vocab;
        Ok(text
            .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '<' || c == '>'))
            .filter(|w| !w.is_empty())
            .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(vocab.unk))
            .collect())
    }

    fn encode_text(&self, seq: &TokenSequence<T>) -> Result<Embedding<T>> {
        Embedding::joint(self.text_forward(seq)?.out)
    }

    fn encode_text_grad(&self, seq: &TokenSequence<T>, upstream: &[T]) -> Result<Vec<Vec<T>>> {
        let positions = seq.injection_positions();
        if positions.is_empty() {
            return Err(Error::Usage("encode_text_grad needs at least one injected token".into()));
        }
        if upstream.len() != self.descriptor.d_joint {
            return Err(Error::Shape(format!(
                "upstream has length {}, joint space is {}",
                upstream.len(),
                self.descriptor.d_joint
            )));
        }
        let fwd = self.text_forward(seq)?;
        let g_shifted = if self.descriptor.normalizes_output {
            normalize_vjp(&fwd.shifted, upstream)
        } else {
            upstream.to_vec()
        };
        let g_z = normalize_vjp(&fwd.z, &g_shifted);
        let n = T::lit(seq.len() as f64);
        let g_pooled: Vec<T> = self.readout.t_matvec(&g_z).into_iter().map(|g| g / n).collect();
        Ok(positions
            .into_iter()
            .map(|p| {
                let TokenElement::Continuous(v) = &seq.elements()[p] else {
                    unreachable!("injection position holds a continuous token")
                };
                // d(v / r)/dv = I/r - v vᵀ / r³ with r = sqrt(|v|² + eps²)
                let r = Self::token_scale(v);
                let proj = linalg::dot(v, &g_pooled) / (r * r * r);
                v.iter().zip(&g_pooled).map(|(&vi, &gi)| gi / r - vi * proj).collect()
            })
            .collect())
    }
}
