//! Patch vision encoder, perceiver resampler and a causal decoder with
//! tanh-gated cross-attention, plus low-rank adapters, greedy/temperature
//! generation and a binary checkpoint format.

mod checkpoint;
mod generate;
mod layers;

pub use checkpoint::{read_header, CheckpointEntry, CheckpointHeader, CHECKPOINT_MAGIC};
pub use generate::Decoding;
pub use layers::{Attention, Block, Ffn, GatedXAttn, LayerNorm, Linear, LoraAdapter, LoraTarget};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataops::ToyImage;
use crate::numerics::{GaussianInit, NumericsError, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::templates::EncodedSample;
use layers::{Builder, INIT_STD};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn default_ffn_mult() -> usize {
    4
}
fn default_xattn_every() -> usize {
    1
}
fn default_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub image_channels: usize,
    pub patch_size: usize,
    pub n_resampler_latents: usize,
    pub n_resampler_layers: usize,
    /// A gated cross-attention block precedes every k-th decoder layer.
    #[serde(default = "default_xattn_every")]
    pub xattn_every: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: BTreeSet<LoraTarget>,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// A small configuration that still trains in seconds on one core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 48,
            n_decoder_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            image_size: 16,
            image_channels: 3,
            patch_size: 4,
            n_resampler_latents: 8,
            n_resampler_layers: 1,
            xattn_every: 1,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_targets: [LoraTarget::SelfAttn, LoraTarget::CrossAttn, LoraTarget::Ffn].into(),
            max_seq_len: 160,
            seed: 0,
        }
    }

    /// The gradient-check configuration: d=16, two decoder layers, four latents.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            ffn_mult: 2,
            n_resampler_latents: 4,
            lora_rank: 2,
            lora_alpha: 4.0,
            max_seq_len: 64,
            ..Self::desk(vocab_size)
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }

    pub fn has_xattn(&self, layer: usize) -> bool {
        layer % self.xattn_every == 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1".into());
        }
        if self.xattn_every == 0 {
            return bad("xattn_every must be at least 1".into());
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("n_decoder_layers", self.n_decoder_layers),
            ("ffn_mult", self.ffn_mult),
            ("n_resampler_latents", self.n_resampler_latents),
            ("image_channels", self.image_channels),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "d_model={} layers={} heads={} vocab={} latents={} lora_rank={}",
            self.d_model,
            self.n_decoder_layers,
            self.n_heads,
            self.vocab_size,
            self.n_resampler_latents,
            self.lora_rank
        )
    }
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch: Linear,
    pub pos: ParamId,
    pub block: Block,
}

#[derive(Clone, Debug)]
pub struct ResamplerLayer {
    pub ln_media: LayerNorm,
    pub ln_latents: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct Resampler {
    pub latents: ParamId,
    pub layers: Vec<ResamplerLayer>,
    pub ln_out: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub xattn: Option<GatedXAttn>,
    pub block: Block,
}

/// Parameters plus the module structure that indexes them.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub vision: VisionEncoder,
    pub resampler: Resampler,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub ln_f: LayerNorm,
    pub lm_head: Linear,
    lora_seed_offset: u64,
}

/// Visual latents already on a tape, with the first image-marker position.
#[derive(Clone, Copy, Debug)]
pub struct Visual {
    pub latents: Var,
    pub media_pos: usize,
}

/// Next-token view of a sample: inputs, targets and the target-side mask.
pub fn shift(sample: &EncodedSample) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let ids: Vec<usize> = sample.ids.iter().map(|&i| i as usize).collect();
    let n = ids.len().saturating_sub(1);
    (ids[..n].to_vec(), ids[1..].to_vec(), sample.loss_mask[1..].to_vec())
}

impl<T: Real> Model<T> {
    /// Randomly initialised network with every parameter trainable.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = GaussianInit::new(cfg.seed);
        let mut b = Builder {
            store: &mut store,
            init: &mut init,
        };
        let (d, h, m) = (cfg.d_model, cfg.n_heads, cfg.ffn_mult);
        let vision = VisionEncoder {
            patch: b.linear("vision.patch", cfg.patch_dim(), d, true),
            pos: b.gaussian("vision.pos", &[cfg.n_patches(), d], INIT_STD),
            block: Block::build(&mut b, "vision.block", d, h, m),
        };
        let resampler = Resampler {
            latents: b.gaussian("resampler.latents", &[cfg.n_resampler_latents, d], 1.0),
            layers: (0..cfg.n_resampler_layers)
                .map(|i| {
                    let n = format!("resampler.layers.{i}");
                    ResamplerLayer {
                        ln_media: b.layer_norm(&format!("{n}.ln_media"), d),
                        ln_latents: b.layer_norm(&format!("{n}.ln_latents"), d),
                        attn: b.attention(&format!("{n}.attn"), d, h),
                        ln_ffn: b.layer_norm(&format!("{n}.ln_ffn"), d),
                        ffn: b.ffn(&format!("{n}.ffn"), d, m),
                    }
                })
                .collect(),
            ln_out: b.layer_norm("resampler.ln_out", d),
        };
        let tok_emb = b.gaussian("decoder.tok_emb", &[cfg.vocab_size, d], INIT_STD);
        let pos_emb = b.gaussian("decoder.pos_emb", &[cfg.max_seq_len, d], INIT_STD);
        let layers = (0..cfg.n_decoder_layers)
            .map(|i| {
                let n = format!("decoder.layers.{i}");
                DecoderLayer {
                    xattn: cfg
                        .has_xattn(i)
                        .then(|| GatedXAttn::build(&mut b, &format!("{n}.gated"), d, h, m)),
                    block: Block::build(&mut b, &n, d, h, m),
                }
            })
            .collect();
        let ln_f = b.layer_norm("decoder.ln_f", d);
        let lm_head = b.linear("decoder.lm_head", d, cfg.vocab_size, false);
        Ok(Self {
            cfg,
            store,
            vision,
            resampler,
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            lm_head,
            lora_seed_offset: 0x10A,
        })
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            vision: self.vision.clone(),
            resampler: self.resampler.clone(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            layers: self.layers.clone(),
            ln_f: self.ln_f.clone(),
            lm_head: self.lm_head.clone(),
            lora_seed_offset: self.lora_seed_offset,
        }
    }

    pub fn has_lora(&self) -> bool {
        self.store.iter().any(|(_, n, _)| n.ends_with(".lora_a"))
    }

    fn targeted_linears(&mut self) -> Vec<&mut Linear> {
        let targets = self.cfg.lora_targets.clone();
        let mut out: Vec<&mut Linear> = Vec::new();
        for layer in &mut self.layers {
            if let Some(x) = &mut layer.xattn {
                if targets.contains(&LoraTarget::CrossAttn) {
                    out.extend(x.attn.linears_mut());
                }
                if targets.contains(&LoraTarget::Ffn) {
                    out.extend(x.ffw.linears_mut());
                }
            }
            if targets.contains(&LoraTarget::SelfAttn) {
                out.extend(layer.block.attn.linears_mut());
            }
            if targets.contains(&LoraTarget::Ffn) {
                out.extend(layer.block.ffn.linears_mut());
            }
        }
        out
    }

    /// Freezes every existing parameter and attaches zero-initialised
    /// adapters to each projection of the configured target sublayers.
    pub fn inject_lora(&mut self) -> Result<()> {
        if self.cfg.lora_targets.is_empty() {
            return Err(ModelError::Config("lora_targets is empty".into()));
        }
        if self.has_lora() {
            return Err(ModelError::Config("adapters already injected".into()));
        }
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_trainable(id, false);
        }
        let (rank, alpha) = (self.cfg.lora_rank, self.cfg.lora_alpha);
        let mut init = GaussianInit::new(self.cfg.seed ^ self.lora_seed_offset);
        let mut store = std::mem::take(&mut self.store);
        let mut b = Builder {
            store: &mut store,
            init: &mut init,
        };
        for lin in self.targeted_linears() {
            lin.attach_lora(&mut b, rank, alpha);
        }
        self.store = store;
        Ok(())
    }

    /// Σ r·(d_in + d_out) over every adapted projection.
    pub fn lora_param_count(&self) -> usize {
        let mut n = 0;
        let mut visit = |l: &Linear| {
            if let Some(a) = &l.lora {
                n += a.rank * (l.d_in + l.d_out);
            }
        };
        for layer in &self.layers {
            if let Some(x) = &layer.xattn {
                [&x.attn.q, &x.attn.k, &x.attn.v, &x.attn.o, &x.ffw.up, &x.ffw.down]
                    .into_iter()
                    .for_each(&mut visit);
            }
            let blk = &layer.block;
            [&blk.attn.q, &blk.attn.k, &blk.attn.v, &blk.attn.o, &blk.ffn.up, &blk.ffn.down]
                .into_iter()
                .for_each(&mut visit);
        }
        n
    }

    /// Gate parameters of every gated cross-attention block.
    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| l.xattn.as_ref())
            .flat_map(|x| [x.gate_attn, x.gate_ffw])
            .collect()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.set_trainable(id, trainable);
        }
    }

    /// Non-overlapping `patch×patch` tiles flattened to rows.
    pub fn patchify(&self, img: &ToyImage) -> Result<Tensor<T>> {
        let p = self.cfg.patch_size;
        if img.height % p != 0 || img.width % p != 0 {
            return Err(ModelError::Config(format!(
                "image {}×{} not divisible by patch_size {p}",
                img.height, img.width
            )));
        }
        if img.channels != self.cfg.image_channels {
            return Err(ModelError::Config(format!(
                "image has {} channels, model expects {}",
                img.channels, self.cfg.image_channels
            )));
        }
        let (ph, pw, c) = (img.height / p, img.width / p, img.channels);
        let mut data = Vec::with_capacity(img.grid.len());
        for py in 0..ph {
            for px in 0..pw {
                for y in py * p..(py + 1) * p {
                    let at = (y * img.width + px * p) * c;
                    data.extend(img.grid[at..at + p * c].iter().map(|&v| T::of(v as f64)));
                }
            }
        }
        Ok(Tensor::new(vec![ph * pw, p * p * c], data)?)
    }

    /// Patch features `[P × d_model]`.
    pub fn vision_encode(&self, tape: &mut Tape<T>, img: &ToyImage) -> Result<Var> {
        let patches = self.patchify(img)?;
        if patches.rows() != self.cfg.n_patches() {
            return Err(ModelError::Config(format!(
                "image yields {} patches, model expects {}",
                patches.rows(),
                self.cfg.n_patches()
            )));
        }
        let x = tape.constant(patches);
        let x = self.vision.patch.forward(tape, &self.store, x)?;
        let pos = tape.param(&self.store, self.vision.pos);
        let x = tape.add(x, pos)?;
        Ok(self.vision.block.forward(tape, &self.store, x, false)?)
    }

    /// `R` latent rows summarising any number of feature rows.
    pub fn perceiver_resample(&self, tape: &mut Tape<T>, features: Var) -> Result<Var> {
        let s = &self.store;
        let mut x = tape.param(s, self.resampler.latents);
        for l in &self.resampler.layers {
            let media = l.ln_media.forward(tape, s, features)?;
            let q = l.ln_latents.forward(tape, s, x)?;
            let kv = tape.concat_rows(&[media, q])?;
            let a = l.attn.forward(tape, s, q, kv, false)?;
            x = tape.add(x, a)?;
            let h = l.ln_ffn.forward(tape, s, x)?;
            let f = l.ffn.forward(tape, s, h)?;
            x = tape.add(x, f)?;
        }
        Ok(self.resampler.ln_out.forward(tape, s, x)?)
    }

    pub fn visual_latents(&self, tape: &mut Tape<T>, img: &ToyImage) -> Result<Var> {
        let f = self.vision_encode(tape, img)?;
        self.perceiver_resample(tape, f)
    }

    /// Logits `[T × vocab]` for input ids. Gated blocks run only when
    /// `visual` is given, and only rows at or after its media position
    /// receive their output.
    pub fn decoder_forward(&self, tape: &mut Tape<T>, ids: &[usize], visual: Option<Visual>) -> Result<Var> {
        let t = ids.len();
        if t > self.cfg.max_seq_len {
            return Err(ModelError::Length {
                len: t,
                max: self.cfg.max_seq_len,
            });
        }
        let s = &self.store;
        let emb = tape.param(s, self.tok_emb);
        let x = tape.embedding(emb, ids)?;
        let pos_table = tape.param(s, self.pos_emb);
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        let mut h = tape.add(x, pos)?;
        let rows: Option<Vec<bool>> = visual.map(|v| (0..t).map(|i| i >= v.media_pos).collect());
        for layer in &self.layers {
            if let (Some(x), Some(v), Some(rows)) = (&layer.xattn, visual, &rows) {
                h = x.forward(tape, s, h, v.latents, rows)?;
            }
            h = layer.block.forward(tape, s, h, true)?;
        }
        let h = self.ln_f.forward(tape, s, h)?;
        self.lm_head.forward(tape, s, h).map_err(Into::into)
    }

    /// Masked next-token loss of one sample, conditioned on `image` when given.
    pub fn sample_loss(&self, tape: &mut Tape<T>, sample: &EncodedSample, image: Option<&ToyImage>) -> Result<Var> {
        let (inputs, targets, mask) = shift(sample);
        let visual = self.visual_for(tape, sample, image, inputs.len())?;
        let logits = self.decoder_forward(tape, &inputs, visual)?;
        Ok(tape.cross_entropy_masked(logits, &targets, &mask)?)
    }

    pub(crate) fn visual_for(
        &self,
        tape: &mut Tape<T>,
        sample: &EncodedSample,
        image: Option<&ToyImage>,
        n_inputs: usize,
    ) -> Result<Option<Visual>> {
        let Some(img) = image else { return Ok(None) };
        let media_pos = match sample.media_positions.first() {
            Some(&p) if p < n_inputs => p,
            _ => {
                return Err(ModelError::Config(
                    "image supplied for a sequence without an image marker".into(),
                ))
            }
        };
        let latents = self.visual_latents(tape, img)?;
        Ok(Some(Visual { latents, media_pos }))
    }

    /// Forward pass outside of training; returns the logits tensor.
    pub fn logits(&self, ids: &[usize], image: Option<&ToyImage>, media_pos: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let visual = match image {
            Some(img) => Some(Visual {
                latents: self.visual_latents(&mut tape, img)?,
                media_pos,
            }),
            None => None,
        };
        let out = self.decoder_forward(&mut tape, ids, visual)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests;
