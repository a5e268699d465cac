use serde::{Deserialize, Serialize};

use crate::numerics::{GaussianInit, ParamId, ParamStore, Real, Result, Tape, Tensor, Var, LAYER_NORM_EPS};

pub(crate) const INIT_STD: f64 = 0.02;

/// Registers parameters under a dotted name prefix.
pub(crate) struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub init: &'a mut GaussianInit,
}

impl<T: Real> Builder<'_, T> {
    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = self.init.tensor::<T>(shape, std).with_grad();
        self.store.insert(name, t)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.store.insert(name, Tensor::filled(shape, T::of(v)).with_grad())
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Linear {
        Linear {
            name: name.to_string(),
            d_in,
            d_out,
            w: self.gaussian(&format!("{name}.weight"), &[d_out, d_in], INIT_STD),
            b: bias.then(|| self.filled(&format!("{name}.bias"), &[d_out], 0.0)),
            lora: None,
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            g: self.filled(&format!("{name}.gain"), &[d], 1.0),
            b: self.filled(&format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn attention(&mut self, name: &str, d: usize, n_heads: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d, false),
            k: self.linear(&format!("{name}.k"), d, d, false),
            v: self.linear(&format!("{name}.v"), d, d, false),
            o: self.linear(&format!("{name}.o"), d, d, false),
            n_heads,
        }
    }

    pub fn ffn(&mut self, name: &str, d: usize, mult: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, d * mult, true),
            down: self.linear(&format!("{name}.down"), d * mult, d, true),
        }
    }
}

/// Trainable low-rank update `scale · B · A` added to a frozen projection.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

/// `y = x · Wᵀ + bias`, plus `scale · (x · Aᵀ) · Bᵀ` once an adapter is attached.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let mut y = tape.matmul_nt(x, w)?;
        if let Some(b) = self.b {
            let b = tape.param(store, b);
            y = tape.add_bias(y, b)?;
        }
        if let Some(l) = &self.lora {
            let a = tape.param(store, l.a);
            let b = tape.param(store, l.b);
            let down = tape.matmul_nt(x, a)?;
            let up = tape.matmul_nt(down, b)?;
            let up = tape.scale(up, T::of(l.scale));
            y = tape.add(y, up)?;
        }
        Ok(y)
    }

    pub(crate) fn attach_lora<T: Real>(&mut self, b: &mut Builder<'_, T>, rank: usize, alpha: f64) {
        assert!(self.lora.is_none(), "adapter already attached to {}", self.name);
        self.lora = Some(LoraAdapter {
            a: b.gaussian(&format!("{}.lora_a", self.name), &[rank, self.d_in], INIT_STD),
            b: b.filled(&format!("{}.lora_b", self.name), &[self.d_out, rank], 0.0),
            rank,
            scale: alpha / rank as f64,
        });
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.g);
        let b = tape.param(store, self.b);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Multi-head attention. Queries come from one sequence, keys and values
/// from another (the same one for self-attention).
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub n_heads: usize,
}

impl Attention {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        context: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let d = self.q.d_out;
        let dh = d / self.n_heads;
        let inv = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv);
            let probs = if causal {
                tape.causal_softmax(scores)?
            } else {
                tape.softmax_lastdim(scores)?
            };
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        self.o.forward(tape, store, merged)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 2] {
        [&mut self.up, &mut self.down]
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl Block {
    pub(crate) fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, d: usize, heads: usize, mult: usize) -> Self {
        Self {
            ln_attn: b.layer_norm(&format!("{name}.ln_attn"), d),
            attn: b.attention(&format!("{name}.self_attn"), d, heads),
            ln_ffn: b.layer_norm(&format!("{name}.ln_ffn"), d),
            ffn: b.ffn(&format!("{name}.ffn"), d, mult),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, causal: bool) -> Result<Var> {
        let h = self.ln_attn.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, causal)?;
        let x = tape.add(x, a)?;
        let h = self.ln_ffn.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(x, f)
    }
}

/// Tanh-gated cross-attention followed by a tanh-gated feed-forward layer.
/// Both gates start at zero, so the block is initially the identity.
#[derive(Clone, Debug)]
pub struct GatedXAttn {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub gate_attn: ParamId,
    pub ln_ffw: LayerNorm,
    pub ffw: Ffn,
    pub gate_ffw: ParamId,
}

impl GatedXAttn {
    pub(crate) fn build<T: Real>(b: &mut Builder<'_, T>, name: &str, d: usize, heads: usize, mult: usize) -> Self {
        Self {
            ln_attn: b.layer_norm(&format!("{name}.ln_attn"), d),
            attn: b.attention(&format!("{name}.cross_attn"), d, heads),
            gate_attn: b.filled(&format!("{name}.gate_attn"), &[1], 0.0),
            ln_ffw: b.layer_norm(&format!("{name}.ln_ffw"), d),
            ffw: b.ffn(&format!("{name}.ffw"), d, mult),
            gate_ffw: b.filled(&format!("{name}.gate_ffw"), &[1], 0.0),
        }
    }

    /// `rows[i]` selects the text positions allowed to see the image.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        visual: Var,
        rows: &[bool],
    ) -> Result<Var> {
        let h = self.ln_attn.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, visual, false)?;
        let g = tape.param(store, self.gate_attn);
        let g = tape.tanh(g);
        let a = tape.scale_by(a, g)?;
        let a = tape.mask_rows(a, rows)?;
        let x = tape.add(x, a)?;
        let h = self.ln_ffw.forward(tape, store, x)?;
        let f = self.ffw.forward(tape, store, h)?;
        let g = tape.param(store, self.gate_ffw);
        let g = tape.tanh(g);
        let f = tape.scale_by(f, g)?;
        let f = tape.mask_rows(f, rows)?;
        tape.add(x, f)
    }
}

/// Sublayers that can carry low-rank adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    SelfAttn,
    CrossAttn,
    Ffn,
}

impl LoraTarget {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "self_attn" => Some(Self::SelfAttn),
            "cross_attn" => Some(Self::CrossAttn),
            "ffn" => Some(Self::Ffn),
            _ => None,
        }
    }
}
