use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Adam with bias-corrected moments, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<P> {
    pub config: AdamConfig,
    m: P,
    v: P,
    t: u64,
}

impl<P: ParamSet<f64> + Clone> Adam<P> {
    pub fn new(params: &P, config: AdamConfig) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let g = grads.named_tensors();
        let mut ps = params.tensors_mut();
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        if g.len() != ps.len() || g.len() != ms.len() {
            return Err(Error::LengthMismatch { op: "adam_step", expected: ps.len(), actual: g.len() });
        }
        for ((_, gt), pt) in g.iter().zip(&ps) {
            if gt.shape() != pt.shape() {
                return Err(Error::shape("adam_step", pt.shape(), gt.shape()));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((_, gt), pt), (mt, vt)) in g.iter().zip(ps.iter_mut()).zip(ms.iter_mut().zip(vs.iter_mut())) {
            let it = pt.data_mut().iter_mut().zip(gt.data()).zip(mt.data_mut().iter_mut().zip(vt.data_mut()));
            for ((p, &gv), (m, v)) in it {
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Matrix::from_rows(&[&[1.0, -2.0]]);
        let before = p.clone();
        let mut opt = Adam::new(&p, AdamConfig::default());
        for _ in 0..3 {
            opt.step(&mut p, &Matrix::zeros(1, 2), 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Matrix::from_rows(&[&[0.5]]);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &Matrix::from_rows(&[&[1.0]]), 0.01).unwrap();
        assert!((0.5 - p.get(0, 0) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn quadratic_bowl_descends() {
        let target = Matrix::from_rows(&[&[3.0, -1.0, 0.5]]);
        let loss = |p: &Matrix| p.sub(&target).unwrap().data().iter().map(|v| v * v).sum::<f64>();
        let mut p = Matrix::zeros(1, 3);
        let mut opt = Adam::new(&p, AdamConfig::default());
        let mut prev = loss(&p);
        for _ in 0..10 {
            let g = p.sub(&target).unwrap().scale(2.0);
            opt.step(&mut p, &g, 0.1).unwrap();
            let l = loss(&p);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Matrix::zeros(1, 2);
        let mut opt = Adam::new(&p, AdamConfig::default());
        assert!(opt.step(&mut p, &Matrix::zeros(2, 1), 0.1).is_err());
    }
}
