use super::AdamWConfig;
use crate::pimap::PiMapParams;
use crate::scalar::Scalar;

/// Adam with decoupled weight decay over every tensor of a
/// [`PiMapParams`], except those named in `frozen`.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: PiMapParams<T>,
    v: PiMapParams<T>,
    t: i32,
    frozen: Vec<&'static str>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &PiMapParams<T>, cfg: AdamWConfig, frozen: &[&'static str]) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            frozen: frozen.to_vec(),
        }
    }

    pub fn step(&mut self, params: &mut PiMapParams<T>, grads: &PiMapParams<T>, lr: T) {
        self.t += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let eps = T::lit(self.cfg.eps);
        let wd = T::lit(self.cfg.weight_decay);
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let one = T::one();
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((name, p), (_, g)), (_, m)), (_, v)) in tensors {
            if self.frozen.contains(&name) {
                continue;
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] * (one - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
