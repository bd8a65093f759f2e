//! Feed-forward response scorer.
//!
//! `score = head(relu(block_L(... relu(block_1(x)))))` with a linear scalar
//! head. All arithmetic is `f64`. Gradients share the [`ScorerParams`] layout.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, MAGIC};

pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_BLOCKS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has dimension {found}, model expects {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("input contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("forward tape does not match parameter shapes")]
    StaleTape,
    #[error("parameter shapes differ")]
    ShapeMismatch,
    #[error("invalid model dimensions: {0}")]
    Dims(String),
    #[error("checkpoint is not an NRS checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0:?}")]
    Version(String),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Affine layer `y = x W + b`, `W` stored row-major as `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub blocks: Vec<Dense>,
    pub head: Head,
}

/// Gradients mirror the parameter layout.
pub type Gradients = ScorerParams;

impl ScorerParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(input_dim: usize, hidden: usize, blocks: usize) -> Result<Self, ModelError> {
        if input_dim == 0 || hidden == 0 || blocks == 0 {
            return Err(ModelError::Dims(format!(
                "input_dim={input_dim}, hidden={hidden}, blocks={blocks} must all be positive"
            )));
        }
        let blocks = (0..blocks)
            .map(|l| Dense::zeros(if l == 0 { input_dim } else { hidden }, hidden))
            .collect();
        Ok(Self {
            blocks,
            head: Head {
                weight: vec![0.0; hidden],
                bias: 0.0,
            },
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].inputs
    }

    pub fn hidden(&self) -> usize {
        self.head.weight.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Parameter groups: one per block, then the head.
    pub fn num_groups(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.weight.len() + b.bias.len()).sum::<usize>() + self.head.weight.len() + 1
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs)
            && self.head.weight.len() == other.head.weight.len()
    }

    /// The two slices (weights, bias) of group `g`.
    pub fn group(&self, g: usize) -> [&[f64]; 2] {
        match self.blocks.get(g) {
            Some(b) => [&b.weight, &b.bias],
            None => [&self.head.weight, std::slice::from_ref(&self.head.bias)],
        }
    }

    pub fn group_mut(&mut self, g: usize) -> [&mut [f64]; 2] {
        match self.blocks.get_mut(g) {
            Some(b) => [&mut b.weight, &mut b.bias],
            None => [&mut self.head.weight, std::slice::from_mut(&mut self.head.bias)],
        }
    }

    /// Every parameter slice in checkpoint order.
    pub fn slices(&self) -> Vec<&[f64]> {
        (0..self.num_groups()).flat_map(|g| self.group(g)).collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.num_groups());
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.head.weight);
        out.push(std::slice::from_mut(&mut self.head.bias));
        out
    }

    pub fn fill(&mut self, v: f64) {
        for s in self.slices_mut() {
            s.fill(v);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), ModelError> {
        if !self.same_shape(other) {
            return Err(ModelError::ShapeMismatch);
        }
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Uniform(-s, s) weights with `s = sqrt(6 / fan_in)`, zero biases.
pub fn init_params(input_dim: usize, hidden: usize, blocks: usize, seed: u64) -> Result<ScorerParams, ModelError> {
    let mut p = ScorerParams::zeros(input_dim, hidden, blocks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &mut p.blocks {
        let s = (6.0 / b.inputs as f64).sqrt();
        b.weight.iter_mut().for_each(|w| *w = rng.gen_range(-s..s));
    }
    let s = (6.0 / hidden as f64).sqrt();
    p.head.weight.iter_mut().for_each(|w| *w = rng.gen_range(-s..s));
    Ok(p)
}

/// Intermediates recorded by [`forward`]: the input and each block's
/// pre-activation and activation.
#[derive(Debug, Clone, Default)]
pub struct ForwardTape {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

pub fn forward(params: &ScorerParams, x: &[f64]) -> Result<(f64, ForwardTape), ModelError> {
    let mut tape = ForwardTape::default();
    let s = forward_into(params, x, &mut tape)?;
    Ok((s, tape))
}

/// [`forward`] reusing the buffers of an existing tape.
pub fn forward_into(params: &ScorerParams, x: &[f64], tape: &mut ForwardTape) -> Result<f64, ModelError> {
    if x.len() != params.input_dim() {
        return Err(ModelError::InputDim {
            expected: params.input_dim(),
            found: x.len(),
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite(i));
    }
    let n = params.blocks.len();
    tape.input.clear();
    tape.input.extend_from_slice(x);
    tape.pre.resize_with(n, Vec::new);
    tape.post.resize_with(n, Vec::new);
    for (l, block) in params.blocks.iter().enumerate() {
        let (done, rest) = tape.post.split_at_mut(l);
        let input = if l == 0 { &tape.input } else { &done[l - 1] };
        block.apply(input, &mut tape.pre[l]);
        let post = &mut rest[0];
        post.clear();
        post.extend(tape.pre[l].iter().map(|&z| z.max(0.0)));
    }
    let last = &tape.post[n - 1];
    Ok(last.iter().zip(&params.head.weight).map(|(a, w)| a * w).sum::<f64>() + params.head.bias)
}

pub fn backward(params: &ScorerParams, tape: &ForwardTape, dscore: f64) -> Result<Gradients, ModelError> {
    let mut g = params.zeros_like();
    backward_into(params, tape, dscore, &mut g)?;
    Ok(g)
}

/// Accumulates `dscore * d(score)/d(params)` into `grads`. The ReLU
/// derivative at exactly zero is taken as zero.
pub fn backward_into(params: &ScorerParams, tape: &ForwardTape, dscore: f64, grads: &mut Gradients) -> Result<(), ModelError> {
    let n = params.blocks.len();
    if tape.pre.len() != n
        || tape.post.len() != n
        || tape.input.len() != params.input_dim()
        || params.blocks.iter().zip(&tape.pre).any(|(b, z)| z.len() != b.outputs)
    {
        return Err(ModelError::StaleTape);
    }
    if !grads.same_shape(params) {
        return Err(ModelError::ShapeMismatch);
    }
    if dscore == 0.0 {
        return Ok(());
    }

    let last = &tape.post[n - 1];
    for (g, a) in grads.head.weight.iter_mut().zip(last) {
        *g += dscore * a;
    }
    grads.head.bias += dscore;

    // dL/d(post) for the current block
    let mut upstream: Vec<f64> = params.head.weight.iter().map(|w| dscore * w).collect();
    let mut delta = Vec::new();
    for l in (0..n).rev() {
        let block = &params.blocks[l];
        delta.clear();
        delta.extend(upstream.iter().zip(&tape.pre[l]).map(|(u, &z)| if z > 0.0 { *u } else { 0.0 }));
        let input = if l == 0 { &tape.input } else { &tape.post[l - 1] };
        let gb = &mut grads.blocks[l];
        for (g, d) in gb.bias.iter_mut().zip(&delta) {
            *g += d;
        }
        for (i, &xi) in input.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut gb.weight[i * block.outputs..(i + 1) * block.outputs];
            for (g, d) in row.iter_mut().zip(&delta) {
                *g += xi * d;
            }
        }
        if l > 0 {
            upstream.clear();
            upstream.extend((0..block.inputs).map(|i| {
                let row = &block.weight[i * block.outputs..(i + 1) * block.outputs];
                row.iter().zip(&delta).map(|(w, d)| w * d).sum::<f64>()
            }));
        }
    }
    Ok(())
}

/// Which parameter groups an optimizer step may touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub blocks: Vec<bool>,
    pub head: bool,
}

impl FreezeMask {
    pub fn all_trainable(blocks: usize) -> Self {
        Self {
            blocks: vec![true; blocks],
            head: true,
        }
    }

    /// Only the last block and the head.
    pub fn top_only(blocks: usize) -> Self {
        let mut m = Self {
            blocks: vec![false; blocks],
            head: true,
        };
        if let Some(last) = m.blocks.last_mut() {
            *last = true;
        }
        m
    }

    pub fn is_trainable(&self, group: usize) -> bool {
        self.blocks.get(group).copied().unwrap_or(self.head)
    }

    pub fn any_trainable(&self) -> bool {
        self.head || self.blocks.iter().any(|&b| b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain matrix-by-matrix evaluation, independent of `Dense::apply`.
    fn naive_score(p: &ScorerParams, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        for b in &p.blocks {
            let mut z = vec![0.0; b.outputs];
            for j in 0..b.outputs {
                let mut acc = b.bias[j];
                for i in 0..b.inputs {
                    acc += a[i] * b.weight[i * b.outputs + j];
                }
                z[j] = if acc > 0.0 { acc } else { 0.0 };
            }
            a = z;
        }
        let mut s = p.head.bias;
        for j in 0..a.len() {
            s += a[j] * p.head.weight[j];
        }
        s
    }

    fn random_input(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_params(256, 128, 3, 42).unwrap();
        let b = init_params(256, 128, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.blocks[0].inputs, a.blocks[0].outputs), (256, 128));
        assert_eq!(a.blocks[0].weight.len(), 256 * 128);
        assert!(a.blocks.iter().all(|b| b.bias.iter().all(|&x| x == 0.0)));
        assert_eq!(a.head.bias, 0.0);
        let s = (6.0f64 / 256.0).sqrt();
        assert!(a.blocks[0].weight.iter().all(|w| w.abs() < s));
        assert_ne!(a, init_params(256, 128, 3, 43).unwrap());
    }

    #[test]
    fn zero_network_scores_zero() {
        let p = ScorerParams::zeros(8, 4, 3).unwrap();
        let (s, _) = forward(&p, &random_input(8, 1)).unwrap();
        assert_eq!(s, 0.0);
        let q = init_params(8, 4, 3, 1).unwrap();
        assert_eq!(forward(&q, &[0.0; 8]).unwrap().0, 0.0);
    }

    #[test]
    fn forward_matches_naive() {
        for seed in 0..20 {
            let p = init_params(12, 8, 3, seed).unwrap();
            let x = random_input(12, seed + 100);
            let (s, _) = forward(&p, &x).unwrap();
            assert!((s - naive_score(&p, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = init_params(4, 4, 2, 0).unwrap();
        assert!(matches!(forward(&p, &[0.0; 3]), Err(ModelError::InputDim { .. })));
        assert!(matches!(forward(&p, &[0.0, f64::NAN, 0.0, 0.0]), Err(ModelError::NonFinite(1))));
    }

    #[test]
    fn head_homogeneity() {
        let p = init_params(6, 5, 3, 9).unwrap();
        let x = random_input(6, 3);
        let (s, _) = forward(&p, &x).unwrap();
        let mut q = p.clone();
        q.head.weight.iter_mut().for_each(|w| *w *= 4.0);
        q.head.bias *= 4.0;
        assert_eq!(forward(&q, &x).unwrap().0, 4.0 * s);
    }

    #[test]
    fn backward_linear_in_dscore() {
        let p = init_params(6, 5, 3, 2).unwrap();
        let (_, tape) = forward(&p, &random_input(6, 8)).unwrap();
        let zero = backward(&p, &tape, 0.0).unwrap();
        assert!(zero.slices().iter().all(|s| s.iter().all(|&x| x == 0.0)));
        let g1 = backward(&p, &tape, 1.0).unwrap();
        let mut g2 = backward(&p, &tape, 2.0).unwrap();
        g2.scale(0.5);
        assert_eq!(g1, g2);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..10 {
            let p = init_params(7, 6, 3, seed).unwrap();
            let x = random_input(7, seed * 31 + 5);
            let (_, tape) = forward(&p, &x).unwrap();
            let g = backward(&p, &tape, 1.0).unwrap();
            let gs = g.slices();
            for si in 0..gs.len() {
                for j in 0..gs[si].len() {
                    let mut plus = p.clone();
                    plus.slices_mut()[si][j] += h;
                    let mut minus = p.clone();
                    minus.slices_mut()[si][j] -= h;
                    let fd = (naive_score(&plus, &x) - naive_score(&minus, &x)) / (2.0 * h);
                    let an = gs[si][j];
                    let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
                    assert!(err < 1e-4, "seed {seed} slice {si}[{j}]: fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn stale_tape_rejected() {
        let p = init_params(4, 4, 2, 0).unwrap();
        let (_, tape) = forward(&p, &[1.0; 4]).unwrap();
        let other = init_params(5, 4, 2, 0).unwrap();
        assert!(matches!(backward(&other, &tape, 1.0), Err(ModelError::StaleTape)));
        let wider = init_params(4, 6, 2, 0).unwrap();
        assert!(matches!(backward(&wider, &tape, 1.0), Err(ModelError::StaleTape)));
    }

    #[test]
    fn freeze_masks() {
        let m = FreezeMask::top_only(3);
        assert_eq!(
            (0..4).map(|g| m.is_trainable(g)).collect::<Vec<_>>(),
            vec![false, false, true, true]
        );
        assert!(m.any_trainable());
        let none = FreezeMask {
            blocks: vec![false; 3],
            head: false,
        };
        assert!(!none.any_trainable());
    }
}
