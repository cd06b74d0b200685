use crate::engine::Optimizer;
use crate::error::Result;
use crate::matrix::DenseMatrix;
use crate::synthetic::gaussian_matrix;

use super::config::ExperimentConfig;
use super::data::RegressionBatch;
use super::layer::{derive_seed, Linear};

/// `tanh(x W1 + b1) W2 + b2` trained with mean squared error.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, cfg: &ExperimentConfig) -> Result<Self> {
        let w1 = gaussian_matrix(input, hidden, (1.0 / input as f64).sqrt(), derive_seed(cfg.seed, &[1, 0x1417]));
        let w2 = gaussian_matrix(hidden, output, (1.0 / hidden as f64).sqrt(), derive_seed(cfg.seed, &[2, 0x1417]));
        Ok(Self {
            hidden: Linear::new("hidden", 1, &w1, cfg)?,
            out: Linear::new("out", 2, &w2, cfg)?,
        })
    }

    pub fn predict(&self, x: &DenseMatrix, step: u64) -> Result<DenseMatrix> {
        let (h, _) = self.hidden.forward(x, step)?;
        Ok(self.out.forward(&h.map(f64::tanh), step)?.0)
    }

    pub fn loss(&self, batch: &RegressionBatch, step: u64) -> Result<f64> {
        let y = self.predict(&batch.inputs, step)?;
        mse(&y, &batch.targets)
    }

    /// One optimizer step; returns the pre-update loss.
    pub fn train_step(&mut self, batch: &RegressionBatch, step: u64, opt: &mut Optimizer, lr: f64) -> Result<f64> {
        let (pre, c1) = self.hidden.forward(&batch.inputs, step)?;
        let act = pre.map(f64::tanh);
        let (y, c2) = self.out.forward(&act, step)?;
        let loss = mse(&y, &batch.targets)?;
        // Per-token gradient of the summed squared error over outputs; the
        // batch mean is left to the optimizer's scale invariance.
        let d = y.sub(&batch.targets)?.scale(2.0 / y.cols() as f64);
        let g2 = self.out.backward(&d, &c2)?;
        let dpre = g2.weight.dx.hadamard(&act.map(|a| 1.0 - a * a))?;
        let g1 = self.hidden.backward(&dpre, &c1)?;
        opt.begin_step();
        self.out.apply(&g2, lr, opt)?;
        self.hidden.apply(&g1, lr, opt)?;
        Ok(loss)
    }

    pub fn linears(&self) -> Vec<&Linear> {
        vec![&self.hidden, &self.out]
    }
}

pub(crate) fn mse(y: &DenseMatrix, t: &DenseMatrix) -> Result<f64> {
    let diff = y.sub(t)?;
    let n = diff.data().len().max(1) as f64;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / n)
}
