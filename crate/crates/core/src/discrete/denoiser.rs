//! Clean-sequence predictors `x̂_0(x_t, t)` for the masked world.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::reduce::softmax_unchecked;
use crate::numkit::{tol, Activation, Mlp, RngStream};
use crate::rewards::one_hot;

/// Sequences of `len` positions over `vocab` tokens plus the mask id
/// `vocab`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqSpace {
    pub len: usize,
    pub vocab: usize,
}

impl SeqSpace {
    pub fn new(len: usize, vocab: usize) -> Result<Self> {
        if len == 0 || vocab < 2 || vocab > u8::MAX as usize - 1 {
            return Err(Error::Config(format!(
                "sequence space needs len >= 1 and 2 <= vocab < 255, got L={len}, K={vocab}"
            )));
        }
        Ok(Self { len, vocab })
    }

    pub fn mask(&self) -> u8 {
        self.vocab as u8
    }

    /// Coordinates per position in the relaxed encoding (tokens + mask).
    pub fn width(&self) -> usize {
        self.vocab + 1
    }

    /// `(K+1)^L`, saturating.
    pub fn num_states(&self) -> usize {
        let mut n: usize = 1;
        for _ in 0..self.len {
            n = n.saturating_mul(self.width());
        }
        n
    }

    pub fn all_masked(&self) -> Vec<u8> {
        vec![self.mask(); self.len]
    }

    pub fn is_masked(&self, tok: u8) -> bool {
        tok == self.mask()
    }

    pub fn check(&self, tokens: &[u8]) -> Result<()> {
        if tokens.len() != self.len {
            return Err(Error::Shape {
                expected: self.len,
                got: tokens.len(),
            });
        }
        if let Some(bad) = tokens.iter().find(|t| **t as usize > self.vocab) {
            return Err(Error::Domain(format!("token id {bad} outside 0..={}", self.vocab)));
        }
        Ok(())
    }

    /// Mixed-radix index, first position most significant.
    pub fn index(&self, tokens: &[u8]) -> usize {
        tokens
            .iter()
            .fold(0, |acc, &t| acc * self.width() + t as usize)
    }

    pub fn tokens_of(&self, mut index: usize) -> Vec<u8> {
        let mut out = vec![0u8; self.len];
        for slot in out.iter_mut().rev() {
            *slot = (index % self.width()) as u8;
            index /= self.width();
        }
        out
    }

    /// Every token array over `{0..K−1, MASK}`, in index order.
    pub fn enumerate(&self, cap: usize) -> Result<Vec<Vec<u8>>> {
        let n = self.num_states();
        if n > cap {
            return Err(Error::OracleUnavailable(format!(
                "(K+1)^L = {n} states exceeds the enumeration cap {cap}"
            )));
        }
        Ok((0..n).map(|i| self.tokens_of(i)).collect())
    }

    /// Render with `alphabet[i]` for token i and `mask_char` for the mask.
    pub fn render(&self, tokens: &[u8], alphabet: &[char], mask_char: char) -> String {
        tokens
            .iter()
            .map(|&t| {
                if self.is_masked(t) {
                    mask_char
                } else {
                    alphabet.get(t as usize).copied().unwrap_or('?')
                }
            })
            .collect()
    }

    pub fn parse(&self, text: &str, alphabet: &[char]) -> Result<Vec<u8>> {
        let toks = text
            .chars()
            .map(|c| {
                alphabet
                    .iter()
                    .position(|a| *a == c)
                    .map(|i| i as u8)
                    .ok_or_else(|| Error::Data(format!("character '{c}' not in alphabet")))
            })
            .collect::<Result<Vec<u8>>>()?;
        self.check(&toks)?;
        Ok(toks)
    }
}

/// Logit model for the clean sequence given a partially masked one.
#[derive(Debug, Clone, PartialEq)]
pub enum DiscreteDenoiser {
    /// One free `L×K` logit block per `(t, state)`, laid out as
    /// `((t−1)·S + index(state))·L·K + ℓ·K + k`.
    Tabular {
        space: SeqSpace,
        steps: usize,
        table: Vec<f64>,
    },
    /// One-hot sequence and `t/T` in, `L×K` logits out.
    Mlp {
        space: SeqSpace,
        steps: usize,
        net: Mlp,
    },
}

impl DiscreteDenoiser {
    /// Uniform predictions everywhere.
    pub fn tabular(space: SeqSpace, steps: usize) -> Result<Self> {
        let states = space.num_states();
        if states > tol::ENUMERATION_CAP {
            return Err(Error::OracleUnavailable(format!(
                "tabular denoiser over {states} states exceeds the cap {}",
                tol::ENUMERATION_CAP
            )));
        }
        Ok(Self::Tabular {
            space,
            steps,
            table: vec![0.0; steps * states * space.len * space.vocab],
        })
    }

    /// Randomly initialized hidden layers, zero output layer.
    pub fn mlp(
        space: SeqSpace,
        steps: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut widths = vec![space.len * space.width() + 1];
        widths.extend_from_slice(hidden);
        widths.push(space.len * space.vocab);
        Ok(Self::Mlp {
            space,
            steps,
            net: Mlp::zero_output(&widths, activation, 1.0, rng)?,
        })
    }

    pub fn space(&self) -> SeqSpace {
        match self {
            Self::Tabular { space, .. } | Self::Mlp { space, .. } => *space,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Self::Tabular { steps, .. } | Self::Mlp { steps, .. } => *steps,
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, Self::Tabular { .. })
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::Tabular { table, .. } => table.len(),
            Self::Mlp { net, .. } => net.num_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Tabular { table, .. } => table.clone(),
            Self::Mlp { net, .. } => net.params(),
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        match self {
            Self::Tabular { table, .. } => {
                if flat.len() != table.len() {
                    return Err(Error::Shape {
                        expected: table.len(),
                        got: flat.len(),
                    });
                }
                table.copy_from_slice(flat);
                Ok(())
            }
            Self::Mlp { net, .. } => net.set_params(flat),
        }
    }

    fn check_input(&self, tokens: &[u8], t: usize) -> Result<()> {
        self.space().check(tokens)?;
        if t == 0 || t > self.steps() {
            return Err(Error::Domain(format!(
                "denoiser timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    fn table_offset(&self, tokens: &[u8], t: usize) -> usize {
        let space = self.space();
        ((t - 1) * space.num_states() + space.index(tokens)) * space.len * space.vocab
    }

    fn mlp_input(space: SeqSpace, steps: usize, tokens: &[u8], t: usize) -> Vec<f64> {
        let mut inp = one_hot(tokens, space.vocab);
        inp.push(t as f64 / steps as f64);
        inp
    }

    /// Raw `L×K` logits, including positions that are not masked.
    pub fn logits(&self, tokens: &[u8], t: usize) -> Result<Vec<f64>> {
        self.check_input(tokens, t)?;
        let out = match self {
            Self::Tabular { space, table, .. } => {
                let off = self.table_offset(tokens, t);
                table[off..off + space.len * space.vocab].to_vec()
            }
            Self::Mlp { space, steps, net } => {
                net.forward(&Self::mlp_input(*space, *steps, tokens, t))?
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser logits".into()));
        }
        Ok(out)
    }

    /// Adds `scale · ∂(upstreamᵀ logits)/∂θ` to `grads`.
    pub fn logits_backward(
        &self,
        tokens: &[u8],
        t: usize,
        upstream: &[f64],
        scale: f64,
        grads: &mut [f64],
    ) -> Result<()> {
        self.check_input(tokens, t)?;
        match self {
            Self::Tabular { space, .. } => {
                let n = space.len * space.vocab;
                if upstream.len() != n {
                    return Err(Error::Shape {
                        expected: n,
                        got: upstream.len(),
                    });
                }
                let off = self.table_offset(tokens, t);
                for (g, u) in grads[off..off + n].iter_mut().zip(upstream) {
                    *g += scale * u;
                }
            }
            Self::Mlp { space, steps, net } => {
                net.backward_into(&Self::mlp_input(*space, *steps, tokens, t), upstream, scale, grads)?;
            }
        }
        Ok(())
    }

    /// `L×K` clean-token distribution; unmasked positions are point masses on
    /// the observed token. A fully unmasked input needs no model call and is
    /// accepted at `t = 0`.
    pub fn x0hat_probs(&self, tokens: &[u8], t: usize) -> Result<Vec<f64>> {
        let space = self.space();
        space.check(tokens)?;
        let k = space.vocab;
        let mut out = vec![0.0; space.len * k];
        let any_masked = tokens.iter().any(|x| space.is_masked(*x));
        let logits = if any_masked {
            Some(self.logits(tokens, t)?)
        } else {
            None
        };
        for (l, &tok) in tokens.iter().enumerate() {
            let row = &mut out[l * k..(l + 1) * k];
            if space.is_masked(tok) {
                let z = &logits.as_ref().expect("masked input has logits")[l * k..(l + 1) * k];
                row.copy_from_slice(&softmax_unchecked(z));
            } else {
                row[tok as usize] = 1.0;
            }
        }
        Ok(out)
    }
}
