//! Similarity kernel and the contrastive objectives used for pretraining
//! and personalization, each with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::encoder::{compose_sequence, Embedding, EncoderPair, TokenSequence, TOKEN_PLACEHOLDER};
use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// `exp(cos(a, b) / τ)`
    Temperature,
    /// `exp((aᵀb/τ) / (|a||b|/τ)) = exp(cos(a, b))`; τ cancels.
    Literal,
}

/// Which space the image regularizer compares the persona token in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonSpace {
    /// Raw token when `d_tok == d_joint`, encoded prompt otherwise.
    Auto,
    /// Always the text encoding of the prompt holding the token.
    Encoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub tau: f64,
    pub include_positive_in_denominator: bool,
    pub y_star_prompt_template: String,
    pub kernel: Kernel,
    pub comparison_space: ComparisonSpace,
    /// Use localized rather than raw embeddings of the other batch items as
    /// image-loss negatives.
    pub localized_image_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            tau: 0.07,
            include_positive_in_denominator: false,
            y_star_prompt_template: format!("A photo of {TOKEN_PLACEHOLDER}"),
            kernel: Kernel::Temperature,
            comparison_space: ComparisonSpace::Auto,
            localized_image_negatives: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.y_star_prompt_template.matches(TOKEN_PLACEHOLDER).count() != 1 {
            return Err(Error::Config(format!(
                "prompt template must contain exactly one `{TOKEN_PLACEHOLDER}`"
            )));
        }
        Ok(())
    }

    fn logit_scale<T: Scalar>(&self) -> T {
        match self.kernel {
            Kernel::Temperature => T::one() / T::lit(self.tau),
            Kernel::Literal => T::one(),
        }
    }
}

/// Wraps a persona token in the prompt template as a token sequence.
pub fn prompt_sequence<T: Scalar, E: EncoderPair<T> + ?Sized>(encoder: &E, template: &str, token: &[T]) -> Result<TokenSequence<T>> {
    compose_sequence(encoder, template, |name| (name == "tok").then(|| token.to_vec()))
}

/// `d(a, b)`; fails on zero-norm input.
pub fn similarity_d<T: Scalar>(a: &[T], b: &[T], tau: T, kernel: Kernel) -> Result<T> {
    let c = checked_cosine(a, b)?;
    Ok(match kernel {
        Kernel::Temperature => (c / tau).exp(),
        Kernel::Literal => c.exp(),
    })
}

fn checked_cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cannot compare vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Domain("similarity of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Gradient of `cos(u, b)` with respect to `u`.
fn cosine_grad<T: Scalar>(u: &[T], b: &[T], cos: T) -> Vec<T> {
    let (nu, nb) = (norm(u), norm(b));
    u.iter().zip(b).map(|(&ui, &bi)| (bi / nb - cos * ui / nu) / nu).collect()
}

/// `-log(d(u, p) / Σ_n d(u, n))`, optionally adding `d(u, p)` to the
/// denominator, and its gradient with respect to `u`.
pub fn contrastive_term<T: Scalar>(u: &[T], positive: &[T], negatives: &[&[T]], cfg: &LossConfig) -> Result<(T, Vec<T>)> {
    if negatives.is_empty() {
        return Err(Error::Usage("contrastive loss needs at least one negative".into()));
    }
    let s = cfg.logit_scale::<T>();
    let cos_p = checked_cosine(u, positive)?;
    let mut denom: Vec<(T, &[T])> = negatives
        .iter()
        .map(|n| checked_cosine(u, n).map(|c| (c, *n)))
        .collect::<Result<_>>()?;
    if cfg.include_positive_in_denominator {
        denom.push((cos_p, positive));
    }
    let logits: Vec<T> = denom.iter().map(|(c, _)| *c * s).collect();
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: T = weights.iter().copied().sum();
    let loss = -(cos_p * s) + m + z.ln();

    let mut grad = linalg::scale(-s, &cosine_grad(u, positive, cos_p));
    for ((c, b), w) in denom.iter().zip(&weights) {
        linalg::axpy(s * *w / z, &cosine_grad(u, b, *c), &mut grad);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct Caption<T> {
    pub text: String,
    pub embedding: Embedding<T>,
}

impl<T: Scalar> Caption<T> {
    pub fn encode<E: EncoderPair<T> + ?Sized>(encoder: &E, text: &str) -> Result<Self> {
        Ok(Self {
            text: text.to_string(),
            embedding: encoder.encode_plain_text(text)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchItem<T> {
    pub image_raw: Embedding<T>,
    pub image_localized: Embedding<T>,
    pub specific: Caption<T>,
    pub generic: Caption<T>,
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub items: Vec<BatchItem<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn validate(&self) -> Result<()> {
        if self.items.len() < 2 {
            return Err(Error::Usage("a batch needs at least two items so negatives exist".into()));
        }
        let d = self.items[0].image_raw.len();
        for it in &self.items {
            for e in [&it.image_raw, &it.image_localized, &it.specific.embedding, &it.generic.embedding] {
                if e.len() != d {
                    return Err(Error::Shape("batch embeddings differ in dimension".into()));
                }
            }
        }
        Ok(())
    }

    /// Negative captions for the anchor: the anchor's own generic caption
    /// plus every other item's specific and generic caption, as a set, with
    /// captions identical to the anchor's specific caption removed.
    pub fn text_negatives(&self, anchor: usize) -> Vec<&Caption<T>> {
        let a = &self.items[anchor];
        let mut out: Vec<&Caption<T>> = vec![&a.generic];
        for (i, it) in self.items.iter().enumerate() {
            if i == anchor {
                continue;
            }
            for c in [&it.specific, &it.generic] {
                if c.text != a.specific.text && !out.iter().any(|o| o.text == c.text) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn image_negatives(&self, anchor: usize, localized: bool) -> Vec<&[T]> {
        self.items
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != anchor)
            .map(|(_, it)| {
                if localized {
                    it.image_localized.values()
                } else {
                    it.image_raw.values()
                }
            })
            .collect()
    }
}

/// Image regularizer for the batch item at `anchor`: keeps the projected
/// persona representation close to the anchor's raw image embedding
/// relative to the other images in the batch. Returns the loss and its
/// gradient with respect to `projected`.
pub fn image_loss<T: Scalar>(projected: &[T], anchor: usize, batch: &Batch<T>, cfg: &LossConfig) -> Result<(T, Vec<T>)> {
    batch.validate()?;
    let negatives = batch.image_negatives(anchor, cfg.localized_image_negatives);
    contrastive_term(projected, batch.items[anchor].image_raw.values(), &negatives, cfg)
}

#[derive(Debug, Clone)]
pub struct TextLossOutput<T> {
    pub loss: T,
    /// Text encoding of the templated persona prompt.
    pub encoded: Vec<T>,
    /// Gradient with respect to the encoded prompt.
    pub grad_encoded: Vec<T>,
    /// Gradient with respect to the persona token.
    pub grad_token: Vec<T>,
}

/// Text contrastive loss: the encoded persona prompt should match the
/// anchor's specific caption rather than the negative captions.
pub fn text_loss<T: Scalar, E: EncoderPair<T> + ?Sized>(
    token: &[T],
    anchor: usize,
    batch: &Batch<T>,
    cfg: &LossConfig,
    encoder: &E,
) -> Result<TextLossOutput<T>> {
    batch.validate()?;
    let seq = prompt_sequence(encoder, &cfg.y_star_prompt_template, token)?;
    let encoded = encoder.encode_text(&seq)?.into_values();
    let negatives: Vec<&[T]> = batch.text_negatives(anchor).into_iter().map(|c| c.embedding.values()).collect();
    let (loss, grad_encoded) = contrastive_term(&encoded, batch.items[anchor].specific.embedding.values(), &negatives, cfg)?;
    let grad_token = encoder.encode_text_grad(&seq, &grad_encoded)?.remove(0);
    Ok(TextLossOutput {
        loss,
        encoded,
        grad_encoded,
        grad_token,
    })
}

pub fn total_loss<T: Scalar>(lt: T, li: T, alpha: T) -> T {
    (T::one() - alpha) * lt + alpha * li
}

#[derive(Debug, Clone)]
pub struct PersonaObjective<T> {
    pub total: T,
    pub text: T,
    pub image: T,
    pub grad_token: Vec<T>,
}

/// Total personalization objective for one anchor and its gradient with
/// respect to the persona token.
pub fn persona_objective<T: Scalar, E: EncoderPair<T> + ?Sized>(
    token: &[T],
    anchor: usize,
    batch: &Batch<T>,
    cfg: &LossConfig,
    encoder: &E,
) -> Result<PersonaObjective<T>> {
    let alpha = T::lit(cfg.alpha);
    let text = text_loss(token, anchor, batch, cfg, encoder)?;
    let direct = cfg.comparison_space == ComparisonSpace::Auto && token.len() == batch.items[anchor].image_raw.len();
    let (image, grad_token) = if direct {
        let (li, g_tok) = image_loss(token, anchor, batch, cfg)?;
        let mut g = linalg::scale(T::one() - alpha, &text.grad_token);
        linalg::axpy(alpha, &g_tok, &mut g);
        (li, g)
    } else {
        let (li, g_enc) = image_loss(&text.encoded, anchor, batch, cfg)?;
        let mut g_u = linalg::scale(T::one() - alpha, &text.grad_encoded);
        linalg::axpy(alpha, &g_enc, &mut g_u);
        let seq = prompt_sequence(encoder, &cfg.y_star_prompt_template, token)?;
        (li, encoder.encode_text_grad(&seq, &g_u)?.remove(0))
    };
    Ok(PersonaObjective {
        total: total_loss(text.loss, image, alpha),
        text: text.loss,
        image,
        grad_token,
    })
}

#[derive(Debug, Clone)]
pub struct SymmetricCeOutput<T> {
    pub loss: T,
    pub grad_images: Vec<Vec<T>>,
    pub grad_texts: Vec<Vec<T>>,
}

/// Two-directional InfoNCE over the cosine similarity matrix scaled by
/// `1/τ`, matched pairs on the diagonal.
pub fn symmetric_ce_loss<T: Scalar>(images: &[Vec<T>], texts: &[Vec<T>], tau: T) -> Result<SymmetricCeOutput<T>> {
    let n = images.len();
    if n != texts.len() {
        return Err(Error::Shape(format!("{n} images but {} texts", texts.len())));
    }
    if n < 2 {
        return Err(Error::Usage("symmetric cross-entropy needs at least two pairs".into()));
    }
    let unit = |vs: &[Vec<T>]| -> Result<Vec<(Vec<T>, T)>> {
        vs.iter()
            .map(|v| {
                let nv = norm(v);
                if nv == T::zero() {
                    return Err(Error::Domain("zero-norm embedding in symmetric cross-entropy".into()));
                }
                Ok((v.iter().map(|&x| x / nv).collect(), nv))
            })
            .collect()
    };
    let a = unit(images)?;
    let b = unit(texts)?;
    let d = a[0].0.len();
    if a.iter().chain(&b).any(|(v, _)| v.len() != d) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    let inv_tau = T::one() / tau;
    let cos: Vec<Vec<T>> = a.iter().map(|(ai, _)| b.iter().map(|(bj, _)| dot(ai, bj)).collect()).collect();
    let nt = T::lit(n as f64);
    let half = T::lit(0.5);

    // dL/dS with S = cos / τ
    let mut g = vec![vec![T::zero(); n]; n];
    let mut loss = T::zero();
    let log_softmax_grad = |logits: &[T], target: usize| -> (T, Vec<T>) {
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        let l = m + z.ln() - logits[target];
        let mut p: Vec<T> = e.into_iter().map(|x| x / z).collect();
        p[target] -= T::one();
        (l, p)
    };
    for i in 0..n {
        let logits: Vec<T> = cos[i].iter().map(|&c| c * inv_tau).collect();
        let (l, p) = log_softmax_grad(&logits, i);
        loss += half * l / nt;
        for j in 0..n {
            g[i][j] += half * p[j] / nt;
        }
    }
    for j in 0..n {
        let logits: Vec<T> = (0..n).map(|i| cos[i][j] * inv_tau).collect();
        let (l, p) = log_softmax_grad(&logits, j);
        loss += half * l / nt;
        for i in 0..n {
            g[i][j] += half * p[i] / nt;
        }
    }

    let mut grad_images = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = vec![T::zero(); d];
        let mut radial = T::zero();
        for j in 0..n {
            linalg::axpy(g[i][j], &b[j].0, &mut acc);
            radial += g[i][j] * cos[i][j];
        }
        linalg::axpy(-radial, &a[i].0, &mut acc);
        grad_images.push(linalg::scale(inv_tau / a[i].1, &acc));
    }
    let mut grad_texts = Vec::with_capacity(n);
    for j in 0..n {
        let mut acc = vec![T::zero(); d];
        let mut radial = T::zero();
        for i in 0..n {
            linalg::axpy(g[i][j], &a[i].0, &mut acc);
            radial += g[i][j] * cos[i][j];
        }
        linalg::axpy(-radial, &b[j].0, &mut acc);
        grad_texts.push(linalg::scale(inv_tau / b[j].1, &acc));
    }
    Ok(SymmetricCeOutput {
        loss,
        grad_images,
        grad_texts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    fn emb(v: Vec<f64>) -> Embedding<f64> {
        Embedding::joint(v).unwrap()
    }

    fn cap(text: &str, v: Vec<f64>) -> Caption<f64> {
        Caption {
            text: text.into(),
            embedding: emb(v),
        }
    }

    #[test]
    fn kernel_special_values() {
        let a = [0.3, -0.2, 0.9];
        let tau = 0.07;
        let self_sim = similarity_d(&a, &a, tau, Kernel::Temperature).unwrap();
        assert!((self_sim / (1.0f64 / 0.07).exp() - 1.0).abs() < 1e-9);
        let ortho = similarity_d(&[1.0, 0.0], &[0.0, 2.0], tau, Kernel::Temperature).unwrap();
        assert_eq!(ortho, 1.0);
        let b = [0.1, 0.5, -0.4];
        let scaled: Vec<f64> = a.iter().map(|x| 3.0 * x).collect();
        let lhs = similarity_d(&scaled, &b, tau, Kernel::Temperature).unwrap();
        let rhs = similarity_d(&a, &b, tau, Kernel::Temperature).unwrap();
        assert!((lhs - rhs).abs() <= 1e-15 * rhs);
        assert!(matches!(
            similarity_d(&[0.0, 0.0], &[1.0, 0.0], tau, Kernel::Temperature),
            Err(Error::Domain(_))
        ));
        assert!((similarity_d(&a, &a, tau, Kernel::Literal).unwrap() - 1f64.exp()).abs() < 1e-12);
    }

    fn two_item_batch() -> Batch<f64> {
        Batch {
            items: vec![
                BatchItem {
                    image_raw: emb(vec![1.0, 0.0, 0.0]),
                    image_localized: emb(vec![1.0, 0.0, 0.0]),
                    specific: cap("s0", vec![1.0, 0.0, 0.0]),
                    generic: cap("g0", vec![0.0, 1.0, 0.0]),
                },
                BatchItem {
                    image_raw: emb(vec![0.0, 1.0, 0.0]),
                    image_localized: emb(vec![0.0, 1.0, 0.0]),
                    specific: cap("s1", vec![0.0, 0.0, 1.0]),
                    generic: cap("g1", vec![0.0, -1.0, 0.0]),
                },
            ],
        }
    }

    #[test]
    fn image_loss_with_one_orthogonal_negative() {
        let batch = two_item_batch();
        let (l, _) = image_loss(&[1.0, 0.0, 0.0], 0, &batch, &cfg()).unwrap();
        assert!((l - (-1.0 / 0.07)).abs() < 1e-12);
        let with_pos = LossConfig {
            include_positive_in_denominator: true,
            ..cfg()
        };
        let (l, _) = image_loss(&[1.0, 0.0, 0.0], 0, &batch, &with_pos).unwrap();
        let e = (1.0f64 / 0.07).exp();
        assert!((l - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!(l > 0.0);
    }

    #[test]
    fn single_item_batch_has_no_negatives() {
        let mut batch = two_item_batch();
        batch.items.pop();
        assert!(image_loss(&[1.0, 0.0, 0.0], 0, &batch, &cfg()).is_err());
    }

    #[test]
    fn text_negatives_form_a_set_and_keep_the_anchor_generic() {
        let mut batch = two_item_batch();
        let n: Vec<_> = batch.text_negatives(0).iter().map(|c| c.text.clone()).collect();
        assert_eq!(n, vec!["g0", "s1", "g1"]);
        // anchor's generic caption equal to its specific caption stays in
        batch.items[0].generic = cap("s0", vec![1.0, 0.0, 0.0]);
        batch.items[1].generic = cap("s0", vec![1.0, 0.0, 0.0]);
        let n: Vec<_> = batch.text_negatives(0).iter().map(|c| c.text.clone()).collect();
        assert_eq!(n, vec!["s0", "s1"]);
    }

    #[test]
    fn contrastive_term_three_orthogonal_negatives() {
        let u = [1.0, 0.0, 0.0, 0.0];
        let negs: Vec<&[f64]> = vec![&[0.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]];
        let (l, _) = contrastive_term(&u, &u, &negs, &cfg()).unwrap();
        assert!((l - (-1.0 / 0.07 + 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_the_stated_combination() {
        assert_eq!(total_loss(2.0, 4.0, 0.25), 2.5);
        assert_eq!(total_loss(2.0, 4.0, 0.0), 2.0);
        assert_eq!(total_loss(2.0, 4.0, 1.0), 4.0);
    }

    #[test]
    fn symmetric_ce_reference_values() {
        let tau = 0.07;
        let imgs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = symmetric_ce_loss(&imgs, &imgs, tau).unwrap();
        let e = (1.0f64 / tau).exp();
        assert!((out.loss - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        let same = vec![vec![0.3, 0.4]; 5];
        let out = symmetric_ce_loss(&same, &same, tau).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
        assert!(symmetric_ce_loss(&same, &same[..4], tau).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = LossConfig {
            y_star_prompt_template: "no slot".into(),
            ..cfg()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig { tau: 0.0, ..cfg() };
        assert!(bad.validate().is_err());
    }
}
