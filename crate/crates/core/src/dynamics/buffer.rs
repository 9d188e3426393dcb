use crate::diffcore::Matrix;
use crate::error::{check_dim, Result};

/// Append-only store of real transitions `(s, a, s')`.
#[derive(Debug, Clone)]
pub struct TransitionBuffer {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    next_states: Vec<f64>,
}

impl TransitionBuffer {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            next_states: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push(&mut self, s: &[f64], a: &[f64], s_next: &[f64]) -> Result<()> {
        check_dim("buffer state", self.state_dim, s.len())?;
        check_dim("buffer action", self.action_dim, a.len())?;
        check_dim("buffer next state", self.state_dim, s_next.len())?;
        self.states.extend_from_slice(s);
        self.actions.extend_from_slice(a);
        self.next_states.extend_from_slice(s_next);
        Ok(())
    }

    /// `(states, actions, next_states)` for the given rows.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Matrix, Matrix) {
        let pick = |src: &[f64], dim: usize| {
            let mut data = Vec::with_capacity(idx.len() * dim);
            for &i in idx {
                data.extend_from_slice(&src[i * dim..(i + 1) * dim]);
            }
            Matrix::from_vec(idx.len(), dim, data).expect("sizes agree")
        };
        (
            pick(&self.states, self.state_dim),
            pick(&self.actions, self.action_dim),
            pick(&self.next_states, self.state_dim),
        )
    }

    pub fn all(&self) -> (Matrix, Matrix, Matrix) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.gather(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_and_gather() {
        let mut b = TransitionBuffer::new(2, 1);
        b.push(&[1.0, 2.0], &[0.5], &[1.5, 2.0]).unwrap();
        b.push(&[3.0, 4.0], &[-0.5], &[2.5, 4.0]).unwrap();
        assert!(b.push(&[1.0], &[0.5], &[1.0, 1.0]).is_err());
        assert_eq!(b.len(), 2);
        let (s, a, n) = b.gather(&[1, 1, 0]);
        assert_eq!(s.row(0), &[3.0, 4.0]);
        assert_eq!(a.row(2), &[0.5]);
        assert_eq!(n.row(1), &[2.5, 4.0]);
    }
}
