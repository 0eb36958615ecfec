use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::signal::N_LEADS;
use crate::tensor::{Mat, Real};

/// `y = x W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub w: Mat<F>,
    pub b: Mat<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w: Mat::zeros(d_in, d_out),
            b: Mat::zeros(1, d_out),
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub(crate) fn xavier<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| F::of(rng.random_range(-limit..limit)))
            .collect();
        Self {
            w: Mat::from_vec(d_in, d_out, data),
            b: Mat::zeros(1, d_out),
        }
    }

    fn push<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        out.push((format!("{name}.w"), &self.w));
        out.push((format!("{name}.b"), &self.b));
    }

    fn push_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        out.push((format!("{name}.w"), &mut self.w));
        out.push((format!("{name}.b"), &mut self.b));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<F> {
    pub g: Mat<F>,
    pub b: Mat<F>,
}

impl<F: Real> LayerNorm<F> {
    fn new(d: usize) -> Self {
        Self {
            g: Mat::from_vec(1, d, vec![F::one(); d]),
            b: Mat::zeros(1, d),
        }
    }

    fn push<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        out.push((format!("{name}.g"), &self.g));
        out.push((format!("{name}.b"), &self.b));
    }

    fn push_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        out.push((format!("{name}.g"), &mut self.g));
        out.push((format!("{name}.b"), &mut self.b));
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
    pub ln2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Real> Block<F> {
    pub fn new<R: Rng>(d: usize, mlp: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            q: Linear::xavier(d, d, rng),
            k: Linear::xavier(d, d, rng),
            v: Linear::xavier(d, d, rng),
            o: Linear::xavier(d, d, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::xavier(d, mlp, rng),
            fc2: Linear::xavier(mlp, d, rng),
        }
    }

    fn push<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Mat<F>)>) {
        self.ln1.push(&format!("{name}.ln1"), out);
        self.q.push(&format!("{name}.attn.q"), out);
        self.k.push(&format!("{name}.attn.k"), out);
        self.v.push(&format!("{name}.attn.v"), out);
        self.o.push(&format!("{name}.attn.o"), out);
        self.ln2.push(&format!("{name}.ln2"), out);
        self.fc1.push(&format!("{name}.mlp.fc1"), out);
        self.fc2.push(&format!("{name}.mlp.fc2"), out);
    }

    fn push_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Mat<F>)>) {
        self.ln1.push_mut(&format!("{name}.ln1"), out);
        self.q.push_mut(&format!("{name}.attn.q"), out);
        self.k.push_mut(&format!("{name}.attn.k"), out);
        self.v.push_mut(&format!("{name}.attn.v"), out);
        self.o.push_mut(&format!("{name}.attn.o"), out);
        self.ln2.push_mut(&format!("{name}.ln2"), out);
        self.fc1.push_mut(&format!("{name}.mlp.fc1"), out);
        self.fc2.push_mut(&format!("{name}.mlp.fc2"), out);
    }
}

/// All trainable tensors of the autoencoder. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    pub config: ModelConfig,
    pub beat_proj: Linear<F>,
    /// `N × d_t`.
    pub beat_pos_embed: Mat<F>,
    /// `12 × d_t`.
    pub lead_embed: Mat<F>,
    /// `12 × d_t`.
    pub cls_tokens: Mat<F>,
    /// `1 × d_t`.
    pub mask_token: Mat<F>,
    pub encoder: Vec<Block<F>>,
    pub encoder_norm: LayerNorm<F>,
    pub decoder: Vec<Block<F>>,
    pub decoder_norm: LayerNorm<F>,
    pub recon_head: Linear<F>,
}

impl<F: Real> Params<F> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_t;
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let embed = |rows: usize, rng: &mut ChaCha8Rng| {
            Mat::from_vec(rows, d, (0..rows * d).map(|_| F::of(normal.sample(rng))).collect())
        };
        let beat_proj = Linear::xavier(config.beat_len, d, &mut rng);
        let beat_pos_embed = embed(config.n_beats, &mut rng);
        let lead_embed = embed(N_LEADS, &mut rng);
        let cls_tokens = embed(N_LEADS, &mut rng);
        let mask_token = embed(1, &mut rng);
        let encoder = (0..config.enc_layers)
            .map(|_| Block::new(d, config.mlp_dim, &mut rng))
            .collect();
        let decoder = (0..config.dec_layers)
            .map(|_| Block::new(d, config.mlp_dim, &mut rng))
            .collect();
        // Small output weights: an untrained model predicts close to zero.
        let recon_head = Linear {
            w: Mat::from_vec(
                d,
                config.beat_len,
                (0..d * config.beat_len)
                    .map(|_| F::of(normal.sample(&mut rng)))
                    .collect(),
            ),
            b: Mat::zeros(1, config.beat_len),
        };
        Ok(Self {
            config: config.clone(),
            beat_proj,
            beat_pos_embed,
            lead_embed,
            cls_tokens,
            mask_token,
            encoder,
            encoder_norm: LayerNorm::new(d),
            decoder,
            decoder_norm: LayerNorm::new(d),
            recon_head,
        })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = F::zero());
        }
        z
    }

    /// Named tensors in a fixed order (the checkpoint order).
    pub fn tensors(&self) -> Vec<(String, &Mat<F>)> {
        let mut out = Vec::new();
        self.beat_proj.push("beat_proj", &mut out);
        out.push(("beat_pos_embed".into(), &self.beat_pos_embed));
        out.push(("lead_embed".into(), &self.lead_embed));
        out.push(("cls_tokens".into(), &self.cls_tokens));
        out.push(("mask_token".into(), &self.mask_token));
        for (l, b) in self.encoder.iter().enumerate() {
            b.push(&format!("encoder.{l}"), &mut out);
        }
        self.encoder_norm.push("encoder_norm", &mut out);
        for (l, b) in self.decoder.iter().enumerate() {
            b.push(&format!("decoder.{l}"), &mut out);
        }
        self.decoder_norm.push("decoder_norm", &mut out);
        self.recon_head.push("recon_head", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut out = Vec::new();
        self.beat_proj.push_mut("beat_proj", &mut out);
        out.push(("beat_pos_embed".into(), &mut self.beat_pos_embed));
        out.push(("lead_embed".into(), &mut self.lead_embed));
        out.push(("cls_tokens".into(), &mut self.cls_tokens));
        out.push(("mask_token".into(), &mut self.mask_token));
        for (l, b) in self.encoder.iter_mut().enumerate() {
            b.push_mut(&format!("encoder.{l}"), &mut out);
        }
        self.encoder_norm.push_mut("encoder_norm", &mut out);
        for (l, b) in self.decoder.iter_mut().enumerate() {
            b.push_mut(&format!("decoder.{l}"), &mut out);
        }
        self.decoder_norm.push_mut("decoder_norm", &mut out);
        self.recon_head.push_mut("recon_head", &mut out);
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat<F>> {
        self.tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params<F>, scale: F) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::tensor::axpy(scale, &b.data, &mut a.data);
        }
    }

    pub fn scale(&mut self, s: F) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_nonfinite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.data.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.first_nonfinite() {
            Some(name) => Err(Error::NonFinite(format!("{what} at {name}"))),
            None => Ok(()),
        }
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        let mut out: Params<G> = Params::init(&self.config, 0).expect("config already validated");
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Whether AdamW applies weight decay to the tensor called `name`. Only
/// linear weight matrices decay; biases, norms, embeddings, cls tokens and
/// the mask token do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

/// Tensor class of a parameter name: the name with layer indices dropped.
pub fn tensor_class(name: &str) -> String {
    name.split('.')
        .filter(|part| part.parse::<usize>().is_err())
        .collect::<Vec<_>>()
        .join(".")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_decay_is_exact() {
        let p: Params<f32> = Params::init(&ModelConfig::toy(), 1).unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        for n in &names {
            let excluded = n.contains("ln")
                || n.contains("norm")
                || n.contains("embed")
                || n == "cls_tokens"
                || n == "mask_token"
                || n.ends_with(".b");
            assert_eq!(decays(n), !excluded, "{n}");
        }
        assert_eq!(tensor_class("encoder.0.attn.q.w"), "encoder.attn.q.w");
    }

    #[test]
    fn deterministic_init_and_count() {
        let cfg = ModelConfig::toy();
        let a: Params<f32> = Params::init(&cfg, 3).unwrap();
        let b: Params<f32> = Params::init(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let d = 16;
        let block = 4 * (d * d + d) + 4 * d + (d * 32 + 32) + (32 * d + d);
        let expect = (8 * d + d) + 3 * d + 12 * d * 2 + d + 2 * block + 4 * d + (d * 8 + 8);
        assert_eq!(a.num_params(), expect);
    }
}
