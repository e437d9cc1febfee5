//! Adam with bias correction, plus its binary checkpoint encoding.

use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    /// First moment (running mean of gradients).
    pub m: Vec<f64>,
    /// Second moment (running mean of squared gradients).
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state for {} parameters got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Little-endian layout: `step: u64`, `len: u64`, then `m` and `v` as `f64`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.m.len() as u64).to_le_bytes())?;
        for x in self.m.iter().chain(&self.v) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let step = u64::from_le_bytes(word);
        r.read_exact(&mut word)?;
        let len = u64::from_le_bytes(word) as usize;
        let mut buf = vec![0u8; len * 16];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated adam state: {e}")))?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut state = Self::new(len);
        state.step = step;
        state.m.copy_from_slice(&vals[..len]);
        state.v.copy_from_slice(&vals[len..]);
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = AdamState::new(2);
        let mut p = vec![1.0, -1.0];
        s.update(&mut p, &[3.0, -0.5], 0.1).unwrap();
        // bias-corrected first step is lr * sign(g)
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        let mut s = AdamState::new(3);
        let mut p = vec![0.1, 0.2, 0.3];
        for _ in 0..10 {
            s.update(&mut p, &[0.0; 3], 1.0).unwrap();
        }
        assert_eq!(p, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = AdamState::new(1);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 2.0);
            s.update(&mut p, &[g], 0.05).unwrap();
        }
        assert!((p[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn binary_round_trip() {
        let mut s = AdamState::new(3);
        let mut p = vec![0.5, 0.25, -2.0];
        s.update(&mut p, &[0.1, -0.2, 0.3], 0.01).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 8);
        let back = AdamState::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2);
        assert!(s.update(&mut [0.0; 3], &[0.0; 3], 0.1).is_err());
    }
}
