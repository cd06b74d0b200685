//! Seeded synthetic datasets with anisotropic activations.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::synthetic::{channel_localized_orthonormal, gaussian_matrix};

/// Regression batch: `rows = sequences * seq_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBatch {
    pub inputs: DenseMatrix,
    pub targets: DenseMatrix,
}

/// Inputs from a low-dimensional AR(1) latent process mixed into a few
/// strong outlier-channel directions over a weak isotropic floor; targets from a fixed
/// random tanh teacher that reads every input direction.
#[derive(Debug, Clone)]
pub struct RegressionTask {
    pub seq_len: usize,
    /// latent x input, rows orthonormal and scaled by the head gains.
    mixing: DenseMatrix,
    noise_std: f64,
    rho: f64,
    teacher_in: DenseMatrix,
    teacher_out: DenseMatrix,
}

const HEAD_GAINS: [f64; 2] = [12.0, 6.0];
/// Channels carrying each head direction.
const HEAD_SUPPORT: usize = 2;
const NOISE_STD: f64 = 0.5;
const LATENT_RHO: f64 = 0.9;

impl RegressionTask {
    pub fn planted(input: usize, output: usize, seq_len: usize, seed: u64) -> Self {
        let latent = HEAD_GAINS.len().min(input);
        let support = HEAD_SUPPORT.min(input / latent.max(1)).max(1);
        let basis = channel_localized_orthonormal(input, latent, latent, support, seed ^ 0xda7a_0001);
        let mixing = basis.transpose().scale_rows(&HEAD_GAINS[..latent]).expect("gains fit");
        let teacher_hidden = input;
        let teacher_in = gaussian_matrix(input, teacher_hidden, 1.0 / (input as f64).sqrt(), seed ^ 0xda7a_0002);
        let teacher_out = gaussian_matrix(
            teacher_hidden,
            output,
            1.0 / (teacher_hidden as f64).sqrt(),
            seed ^ 0xda7a_0003,
        );
        Self {
            seq_len,
            mixing,
            noise_std: NOISE_STD,
            rho: LATENT_RHO,
            teacher_in,
            teacher_out,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mixing.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.teacher_out.cols()
    }

    pub fn sample(&self, sequences: usize, rng: &mut ChaCha8Rng) -> RegressionBatch {
        let latent = self.mixing.rows();
        let rows = sequences * self.seq_len;
        let mut z = DenseMatrix::zeros(rows, latent);
        let innovation = (1.0 - self.rho * self.rho).sqrt();
        for s in 0..sequences {
            let mut state: Vec<f64> = (0..latent).map(|_| rng.sample(StandardNormal)).collect();
            for t in 0..self.seq_len {
                if t > 0 {
                    for v in state.iter_mut() {
                        let e: f64 = rng.sample(StandardNormal);
                        *v = self.rho * *v + innovation * e;
                    }
                }
                for (j, v) in state.iter().enumerate() {
                    z.set(s * self.seq_len + t, j, *v);
                }
            }
        }
        let floor = DenseMatrix::from_fn(rows, self.input_dim(), |_, _| {
            self.noise_std * rng.sample::<f64, _>(StandardNormal)
        });
        let inputs = z.matmul(&self.mixing).expect("latent dims").add(&floor).expect("same shape");
        let hidden = inputs.matmul(&self.teacher_in).expect("teacher shape").map(f64::tanh);
        let targets = hidden.matmul(&self.teacher_out).expect("teacher shape");
        RegressionBatch { inputs, targets }
    }
}

/// Token batch: `sequences` rows of `seq_len + 1` tokens (inputs and shifted targets).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub seq_len: usize,
    pub tokens: Vec<Vec<usize>>,
}

impl TokenBatch {
    pub fn sequences(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone)]
pub enum TokenSource {
    /// First-order Markov chain with low-rank transition logits.
    Markov { transitions: Vec<WeightedIndex<f64>>, vocab: usize },
    /// Byte-level windows over a text.
    Text { bytes: Vec<u8> },
}

const MARKOV_RANK: usize = 4;
const MARKOV_TEMPERATURE: f64 = 3.0;

impl TokenSource {
    pub fn markov(vocab: usize, seed: u64) -> Self {
        let e = gaussian_matrix(vocab, MARKOV_RANK, 1.0, seed ^ 0x70c3_0001);
        let f = gaussian_matrix(vocab, MARKOV_RANK, 1.0, seed ^ 0x70c3_0002);
        let logits = e.matmul(&f.transpose()).expect("rank dims");
        let scale = MARKOV_TEMPERATURE / (MARKOV_RANK as f64).sqrt();
        let transitions = (0..vocab)
            .map(|i| {
                let row = logits.row(i);
                let max = row.iter().copied().fold(f64::MIN, f64::max);
                let w: Vec<f64> = row.iter().map(|v| ((v - max) * scale).exp()).collect();
                WeightedIndex::new(w).expect("positive weights")
            })
            .collect();
        TokenSource::Markov { transitions, vocab }
    }

    pub fn text(bytes: Vec<u8>, seq_len: usize) -> Result<Self> {
        if bytes.len() <= seq_len + 1 {
            return Err(Error::Config(format!(
                "corpus of {} bytes is shorter than one window of {}",
                bytes.len(),
                seq_len + 1
            )));
        }
        Ok(TokenSource::Text { bytes })
    }

    pub fn vocab(&self) -> usize {
        match self {
            TokenSource::Markov { vocab, .. } => *vocab,
            TokenSource::Text { .. } => 256,
        }
    }

    pub fn sample(&self, sequences: usize, seq_len: usize, rng: &mut ChaCha8Rng) -> TokenBatch {
        let tokens = (0..sequences)
            .map(|_| match self {
                TokenSource::Markov { transitions, vocab } => {
                    let mut seq = Vec::with_capacity(seq_len + 1);
                    let mut cur = rng.random_range(0..*vocab);
                    seq.push(cur);
                    for _ in 0..seq_len {
                        cur = transitions[cur].sample(rng);
                        seq.push(cur);
                    }
                    seq
                }
                TokenSource::Text { bytes } => {
                    let start = rng.random_range(0..bytes.len() - seq_len);
                    bytes[start..start + seq_len + 1].iter().map(|&b| b as usize).collect()
                }
            })
            .collect();
        TokenBatch { seq_len, tokens }
    }
}

/// Independent generator for one purpose (training batches, evaluation, init).
pub fn stream_rng(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}
