use rand::Rng;

use super::mlp::{Activation, Dense, Mlp, Param};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

/// Cluster-level projector: one shared ReLU layer feeding an ordered list of
/// per-task linear heads. Only the newest head is trained; older heads are
/// kept verbatim for test-time assignment.
#[derive(Clone, Debug)]
pub struct ClusterProjector {
    shared_first: Mlp,
    heads: Vec<Dense>,
}

impl ClusterProjector {
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let first = Dense::init(latent_dim, hidden_dim, Activation::Relu, rng);
        ClusterProjector {
            shared_first: Mlp::from_layers(vec![first], false).expect("single layer"),
            heads: Vec::new(),
        }
    }

    pub fn from_parts(shared_first: Dense, heads: Vec<Dense>) -> Result<Self> {
        if heads.iter().any(|h| h.input_dim() != shared_first.output_dim()) {
            return Err(Error::contract("cluster head width does not match shared layer"));
        }
        Ok(ClusterProjector {
            shared_first: Mlp::from_layers(vec![shared_first], false)?,
            heads,
        })
    }

    /// Appends a freshly initialized head with `clusters` outputs. The shared
    /// layer and every earlier head are left untouched.
    pub fn spawn_task_head<R: Rng + ?Sized>(&mut self, clusters: usize, rng: &mut R) -> Result<()> {
        if clusters < 1 {
            return Err(Error::Config("a task head needs at least one cluster".into()));
        }
        let hidden = self.shared_first.output_dim();
        self.heads.push(Dense::init(hidden, clusters, Activation::None, rng));
        Ok(())
    }

    pub fn shared_first(&self) -> &Mlp {
        &self.shared_first
    }

    pub fn heads(&self) -> &[Dense] {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(Dense::output_dim).collect()
    }

    fn head(&self, index: usize) -> Result<&Dense> {
        self.heads.get(index).ok_or(Error::InvalidHead {
            index,
            heads: self.heads.len(),
        })
    }

    /// Row-stochastic cluster probabilities of head `index` (0-based).
    pub fn forward(&self, h: &Tensor, index: usize) -> Result<Tensor> {
        let head = self.head(index)?;
        let hidden = self.shared_first.forward(h)?;
        Ok(head.forward(&hidden, false)?.softmax_rows())
    }

    /// Shared-layer output ĥ without the tape.
    pub fn infer_hidden(&self, h: &Matrix) -> Result<Matrix> {
        self.shared_first.infer(h)
    }

    /// Raw logits of one head, given the shared-layer output.
    pub fn infer_head_logits(&self, hidden: &Matrix, index: usize) -> Result<Matrix> {
        self.head(index)?.infer(hidden)
    }

    pub fn param_count(&self) -> usize {
        self.shared_first.param_count() + self.heads.iter().map(Dense::param_count).sum::<usize>()
    }

    /// Parameters trained while head `index` is active.
    pub(crate) fn active_params_mut(&mut self, index: usize) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = if self.shared_first.is_frozen() {
            Vec::new()
        } else {
            self.shared_first.params_mut().collect()
        };
        if let Some(head) = self.heads.get_mut(index) {
            out.extend(head.params_mut());
        }
        out
    }

    /// Largest absolute gradient on the shared layer and every head.
    pub fn max_abs_grad(&self) -> f64 {
        let heads = self
            .heads
            .iter()
            .flat_map(Dense::params)
            .filter_map(Param::grad)
            .flatten()
            .fold(0.0_f64, |m, g| m.max(g.abs()));
        heads.max(self.shared_first.max_abs_grad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn projector(seed: u64) -> ClusterProjector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cp = ClusterProjector::new(6, 5, &mut rng);
        cp.spawn_task_head(4, &mut rng).unwrap();
        cp
    }

    fn batch() -> Tensor {
        Tensor::constant(Matrix::new(3, 6, (0..18).map(|v| (v as f64).sin()).collect()).unwrap())
    }

    #[test]
    fn zero_head_gives_uniform_rows() {
        let cp = projector(1);
        let first = cp.shared_first.layers()[0].clone();
        let zero = Dense::from_values(Matrix::zeros(4, 5), vec![0.0; 4], Activation::None).unwrap();
        let cp = ClusterProjector::from_parts(first, vec![zero]).unwrap();
        let f = cp.forward(&batch(), 0).unwrap();
        assert!(f.values().iter().all(|&p| p == 0.25));
    }

    #[test]
    fn rows_are_stochastic() {
        let f = projector(2).forward(&batch(), 0).unwrap();
        for r in 0..f.rows() {
            let s: f64 = f.matrix().row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_logit_wins() {
        let cp = projector(3);
        let first = cp.shared_first.layers()[0].clone();
        let head = Dense::from_values(Matrix::zeros(4, 5), vec![20.0, 0.0, 0.0, 0.0], Activation::None).unwrap();
        let cp = ClusterProjector::from_parts(first, vec![head]).unwrap();
        let f = cp.forward(&batch(), 0).unwrap();
        // e^20 / (e^20 + 3)
        let expected = 1.0 / (1.0 + 3.0 * (-20.0f64).exp());
        assert!(expected > 0.999);
        for r in 0..3 {
            assert!((f.matrix().get(r, 0) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn spawn_preserves_existing_state() {
        let mut cp = projector(4);
        let first_before = cp.shared_first.flat_values();
        let head_before: Vec<f64> = cp.heads[0].weight.values().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        cp.spawn_task_head(3, &mut rng).unwrap();
        assert_eq!(cp.num_heads(), 2);
        assert_eq!(cp.shared_first.flat_values(), first_before);
        assert_eq!(cp.heads[0].weight.values(), &head_before[..]);
        assert_eq!(cp.head_sizes(), vec![4, 3]);

        let mut again = projector(4);
        again.spawn_task_head(3, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(again.heads[1].weight.values(), cp.heads[1].weight.values());
    }

    #[test]
    fn bad_head_requests_fail() {
        let mut cp = projector(5);
        assert!(matches!(cp.forward(&batch(), 1), Err(Error::InvalidHead { index: 1, heads: 1 })));
        assert!(cp.spawn_task_head(0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
