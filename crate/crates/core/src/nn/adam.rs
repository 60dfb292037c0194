use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam with bias correction. Moments are kept per tensor, in the order the
/// owner hands its tensors over.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_tensors(lr: f64, tensors: &[&[T]]) -> Self {
        let shapes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
        Self::new(lr, &shapes)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// One bias-corrected update. Non-finite gradients are rejected before
    /// anything is touched; `names` labels tensors in the error.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(format!("adam tensor {i} changed shape")));
            }
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("tensor{i}"));
                return Err(Error::numeric(name, format!("non-finite gradient at index {bad}: {}", g[bad])));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        vec!["w".to_string()]
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [0.3f64, -7.0, 1e-3] {
            let mut p = vec![1.0f64];
            let mut adam = Adam::<f64>::new(1e-3, &[1]);
            adam.step(&mut [&mut p[..]], &[&[g]], &names()).unwrap();
            let moved = p[0] - 1.0;
            assert!((moved + 1e-3 * g.signum()).abs() < 1e-7, "g={g} moved={moved}");
            assert_eq!(adam.steps(), 1);
        }
    }

    #[test]
    fn zero_gradients_are_identity() {
        let mut p = vec![0.5f64, -2.0];
        let mut adam = Adam::<f64>::new(0.1, &[2]);
        for _ in 0..50 {
            adam.step(&mut [&mut p[..]], &[&[0.0, 0.0]], &names()).unwrap();
        }
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn three_steps_match_hand_recurrence() {
        // Hand-run of the recurrence with lr=0.01, g=2 constant, p0=1:
        // m_t = 0.1*2*(1+0.9+..), v_t = 0.001*4*(1+0.999+..),
        // with bias correction mh = 2, vh = 4 each step, so every update is
        // 0.01*2/(2+1e-8).
        let step = 0.01 * 2.0 / (2.0 + 1e-8);
        let expect = 1.0 - 3.0 * step;
        let mut p = vec![1.0f64];
        let mut adam = Adam::<f64>::new(0.01, &[1]);
        for _ in 0..3 {
            adam.step(&mut [&mut p[..]], &[&[2.0]], &names()).unwrap();
        }
        assert!((p[0] - expect).abs() < 1e-13, "{} vs {}", p[0], expect);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = vec![1.0f64, 2.0];
        let mut adam = Adam::<f64>::new(0.01, &[2]);
        let err = adam.step(&mut [&mut p[..]], &[&[0.0, f64::NAN]], &["critic.layer1.bias".to_string()]).unwrap_err();
        assert!(err.to_string().contains("critic.layer1.bias"));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(adam.steps(), 0);
    }
}
