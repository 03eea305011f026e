//! Full backbone assembly: block pattern, per-block conditioning, forward
//! passes with optional token-mixer taps, and teacher/student construction.
//!
//! A block is `token mixer -> cross-attention -> feed-forward`, each wrapped
//! in `(1+scale)*LN(x)+shift` modulation, gated, and added to the residual
//! stream. The token mixer is either full self-attention or a bidirectional
//! state-space mixer scanning height-first or width-first. The teacher is
//! the same skeleton with every mixer forced to self-attention; all
//! non-mixer parameter names line up 1:1 between the two variants.

pub mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_into, save_checkpoint, CheckpointError, RawCheckpoint, FORMAT_VERSION,
};

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffusion::Denoiser;
use crate::nn::{
    modulate, modulate_infer, positional_encoding, AttentionLayer, CrossAttentionLayer, Ffn,
    FinalHead, Linear, Modulation, PatchEmbed, PosEncVariant, TimestepEmbedder,
};
use crate::params::{copy_matching, join, ParamSet};
use crate::ssm::{MambaLayer, ScanAxis};
use crate::tensor::{Element, Id, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(
        "unsupported resolution {h}x{w}: integer-coordinate positional encoding is tied to the \
         {base_h}x{base_w} training grid; adapt the model to normalized coordinates first"
    )]
    UnsupportedResolution { h: usize, w: usize, base_h: usize, base_w: usize },
    #[error("bad model config: {0}")]
    Config(String),
}

/// What mixes tokens in one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    SelfAttn,
    MambaHeightFirst,
    MambaWidthFirst,
}

impl BlockKind {
    /// Short tag used in pattern summaries and logs.
    pub fn tag(self) -> &'static str {
        match self {
            BlockKind::SelfAttn => "SA",
            BlockKind::MambaHeightFirst => "HM",
            BlockKind::MambaWidthFirst => "WM",
        }
    }
}

/// `groups` repetitions of `[SelfAttn, (MambaHeightFirst, MambaWidthFirst) x m]`.
pub fn build_pattern(groups: usize, mambas_per_group: usize) -> Vec<BlockKind> {
    assert!(groups >= 1, "need at least one block group");
    let mut out = Vec::with_capacity(groups * (1 + 2 * mambas_per_group));
    for _ in 0..groups {
        out.push(BlockKind::SelfAttn);
        for _ in 0..mambas_per_group {
            out.push(BlockKind::MambaHeightFirst);
            out.push(BlockKind::MambaWidthFirst);
        }
    }
    out
}

/// Static description of a backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub groups: usize,
    pub mambas_per_group: usize,
    pub d: usize,
    pub heads: usize,
    pub patch: usize,
    pub n_state: usize,
    pub expand: usize,
    pub channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub text_vocab: usize,
    pub text_dim: usize,
    pub pe: PosEncVariant,
}

impl ModelConfig {
    /// Desk-scale default: depth 14 (2 attention + 12 state-space blocks),
    /// 64 tokens on a 16x16 latent.
    pub fn toy() -> Self {
        ModelConfig {
            groups: 2,
            mambas_per_group: 3,
            d: 128,
            heads: 4,
            patch: 2,
            n_state: 32,
            expand: 2,
            channels: 4,
            latent_h: 16,
            latent_w: 16,
            text_vocab: 10,
            text_dim: 32,
            pe: PosEncVariant::Standard,
        }
    }

    /// Published-scale shape: depth 28 with attention at 0/7/14/21. Never
    /// trained here; exists so the descriptor math is checked at full size.
    pub fn paper_scale() -> Self {
        ModelConfig {
            groups: 4,
            mambas_per_group: 3,
            d: 1152,
            heads: 16,
            patch: 2,
            n_state: 256,
            expand: 2,
            channels: 4,
            latent_h: 32,
            latent_w: 32,
            text_vocab: 32_128,
            text_dim: 4096,
            pe: PosEncVariant::Standard,
        }
    }

    pub fn depth(&self) -> usize {
        self.groups * (1 + 2 * self.mambas_per_group)
    }

    pub fn pattern(&self) -> Vec<BlockKind> {
        build_pattern(self.groups, self.mambas_per_group)
    }

    /// Token grid of the base latent.
    pub fn token_grid(&self) -> (usize, usize) {
        (self.latent_h / self.patch, self.latent_w / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (ht, wt) = self.token_grid();
        ht * wt
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.groups < 1 {
            return fail("groups must be >= 1".into());
        }
        if self.d % self.heads != 0 {
            return fail(format!("width {} not divisible by {} heads", self.d, self.heads));
        }
        if self.d % 4 != 0 {
            return fail(format!("width {} must be divisible by 4 for 2-D positions", self.d));
        }
        if (self.expand * self.d) % self.heads != 0 {
            return fail(format!(
                "inner width {} not divisible by {} heads",
                self.expand * self.d,
                self.heads
            ));
        }
        if self.latent_h % self.patch != 0 || self.latent_w % self.patch != 0 {
            return fail(format!(
                "latent {}x{} not divisible by patch {}",
                self.latent_h, self.latent_w, self.patch
            ));
        }
        if self.text_vocab == 0 || self.text_dim == 0 {
            return fail("text vocabulary and embedding dim must be nonzero".into());
        }
        Ok(())
    }
}

/// One residual block.
#[derive(Clone, Debug)]
pub struct Block<E: Element> {
    pub kind: BlockKind,
    pub attn: Option<AttentionLayer<E>>,
    pub mamba: Option<MambaLayer<E>>,
    pub cross: CrossAttentionLayer<E>,
    pub ffn: Ffn<E>,
    pub modulation: Modulation<E>,
}

impl<E: Element> Block<E> {
    fn new(kind: BlockKind, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (attn, mamba) = match kind {
            BlockKind::SelfAttn => (Some(AttentionLayer::new(cfg.d, cfg.heads, rng)), None),
            BlockKind::MambaHeightFirst => (
                None,
                Some(MambaLayer::new(
                    cfg.d,
                    cfg.heads,
                    cfg.n_state,
                    cfg.expand,
                    ScanAxis::HeightFirst,
                    rng,
                )),
            ),
            BlockKind::MambaWidthFirst => (
                None,
                Some(MambaLayer::new(
                    cfg.d,
                    cfg.heads,
                    cfg.n_state,
                    cfg.expand,
                    ScanAxis::WidthFirst,
                    rng,
                )),
            ),
        };
        Block {
            kind,
            attn,
            mamba,
            cross: CrossAttentionLayer::new(cfg.d, cfg.text_dim, cfg.heads, rng),
            ffn: Ffn::new(cfg.d, rng),
            modulation: Modulation::new(cfg.d),
        }
    }

    /// Applies the token mixer to an already-modulated input.
    pub fn mix(&self, t: &mut Tape<E>, x_mod: Id, ht: usize, wt: usize) -> Id {
        match self.kind {
            BlockKind::SelfAttn => self.attn.as_ref().expect("attention mixer").forward(t, x_mod),
            _ => self.mamba.as_ref().expect("state-space mixer").forward(t, x_mod, ht, wt),
        }
    }

    /// Tape-free counterpart of [`Block::mix`].
    pub fn mix_infer(&self, x_mod: &[E], l: usize, ht: usize, wt: usize) -> Vec<E> {
        match self.kind {
            BlockKind::SelfAttn => self.attn.as_ref().expect("attention mixer").infer(x_mod, l),
            _ => self.mamba.as_ref().expect("state-space mixer").infer(x_mod, ht, wt),
        }
    }

    /// Recorded block pass; returns the new residual stream and the mixer
    /// tap pair (modulated mixer input, pre-gate mixer output).
    fn forward(
        &self,
        t: &mut Tape<E>,
        x: Id,
        t_embed: Id,
        ctx: Id,
        ht: usize,
        wt: usize,
    ) -> (Id, Id, Id) {
        let mods = self.modulation.forward(t, t_embed);
        let (a0, b0, g0) = (mods[0], mods[1], mods[2]);
        let (a1, b1, g1) = (mods[3], mods[4], mods[5]);
        let (a2, b2, g2) = (mods[6], mods[7], mods[8]);

        let tap_in = modulate(t, x, a0, b0);
        let tap_out = self.mix(t, tap_in, ht, wt);
        let gated = t.mul_row(tap_out, g0);
        let x = t.add(x, gated);

        let c_in = modulate(t, x, a1, b1);
        let c_out = self.cross.forward(t, c_in, ctx);
        let gated = t.mul_row(c_out, g1);
        let x = t.add(x, gated);

        let f_in = modulate(t, x, a2, b2);
        let f_out = self.ffn.forward(t, f_in);
        let gated = t.mul_row(f_out, g2);
        let x = t.add(x, gated);
        (x, tap_in, tap_out)
    }

    /// Tape-free block pass, mutating `x` in place; optionally captures the
    /// mixer tap pair.
    fn infer(
        &self,
        x: &mut Vec<E>,
        l: usize,
        ht: usize,
        wt: usize,
        t_embed: &[E],
        ctx: &[E],
        lc: usize,
        d: usize,
        taps: Option<&mut Vec<(Vec<E>, Vec<E>)>>,
    ) {
        let mods = self.modulation.infer(t_embed);

        let mut m_in = x.clone();
        modulate_infer(&mut m_in, l, d, &mods[0], &mods[1]);
        let m_out = self.mix_infer(&m_in, l, ht, wt);
        for r in 0..l {
            for j in 0..d {
                x[r * d + j] += mods[2][j] * m_out[r * d + j];
            }
        }
        if let Some(taps) = taps {
            taps.push((m_in, m_out));
        }

        let mut c_in = x.clone();
        modulate_infer(&mut c_in, l, d, &mods[3], &mods[4]);
        let c_out = self.cross.infer(&c_in, l, ctx, lc);
        for r in 0..l {
            for j in 0..d {
                x[r * d + j] += mods[5][j] * c_out[r * d + j];
            }
        }

        let mut f_in = x.clone();
        modulate_infer(&mut f_in, l, d, &mods[6], &mods[7]);
        let f_out = self.ffn.infer(&f_in, l);
        for r in 0..l {
            for j in 0..d {
                x[r * d + j] += mods[8][j] * f_out[r * d + j];
            }
        }
    }
}

impl<E: Element> ParamSet<E> for Block<E> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        if let Some(a) = &self.attn {
            a.visit(&join(prefix, "attn"), out);
        }
        if let Some(m) = &self.mamba {
            m.visit(&join(prefix, "mixer"), out);
        }
        self.cross.visit(&join(prefix, "cross"), out);
        self.ffn.visit(&join(prefix, "ffn"), out);
        self.modulation.visit(prefix, out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        if let Some(a) = &mut self.attn {
            a.visit_mut(&join(prefix, "attn"), out);
        }
        if let Some(m) = &mut self.mamba {
            m.visit_mut(&join(prefix, "mixer"), out);
        }
        self.cross.visit_mut(&join(prefix, "cross"), out);
        self.ffn.visit_mut(&join(prefix, "ffn"), out);
        self.modulation.visit_mut(prefix, out);
    }
}

/// Result of a recorded model pass.
pub struct ForwardRecord {
    /// Predicted noise, shaped like the input latent.
    pub out: Id,
    /// Per-block `(mixer input, pre-gate mixer output)` node pairs.
    pub taps: Vec<(Id, Id)>,
}

/// The full denoising backbone.
#[derive(Clone, Debug)]
pub struct HybridModel<E: Element> {
    pub config: ModelConfig,
    /// Whether every mixer was forced to self-attention (teacher variant).
    pub all_attention: bool,
    pub patch_embed: PatchEmbed<E>,
    pub t_embed: TimestepEmbedder<E>,
    /// `(vocab, text_dim)` caption token embedding table.
    pub text_embed: Tensor<E>,
    pub blocks: Vec<Block<E>>,
    pub head: FinalHead<E>,
}

impl<E: Element> HybridModel<E> {
    /// Hybrid (student-side) backbone per the config's block pattern.
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        Self::with_pattern(config, false, rng)
    }

    /// Same skeleton with every mixer forced to self-attention.
    pub fn new_teacher(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        Self::with_pattern(config, true, rng)
    }

    fn with_pattern(
        config: ModelConfig,
        all_attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let pattern = config.pattern();
        let blocks = pattern
            .iter()
            .map(|&k| {
                let kind = if all_attention { BlockKind::SelfAttn } else { k };
                Block::new(kind, &config, rng)
            })
            .collect();
        Ok(HybridModel {
            patch_embed: PatchEmbed::new(config.channels, config.patch, config.d, rng),
            t_embed: TimestepEmbedder::new(config.d, rng),
            text_embed: Tensor::randn(&[config.text_vocab, config.text_dim], 0.02, rng).param(),
            blocks,
            head: FinalHead::new(config.channels, config.patch, config.d),
            config,
            all_attention,
        })
    }

    /// Fresh student sharing every non-mixer weight with the teacher;
    /// state-space mixers stay at their fresh initialization. Attention
    /// blocks the student keeps are copied too (their names match).
    pub fn student_from_teacher(teacher: &HybridModel<E>, rng: &mut ChaCha8Rng) -> Self {
        assert!(teacher.all_attention, "weight donor must be the all-attention variant");
        let mut student = HybridModel::new(teacher.config.clone(), rng)
            .expect("teacher carried a valid config");
        copy_matching(teacher, &mut student);
        student
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Grid admission: the integer-coordinate embedding is tied to the base
    /// grid; the normalized variant accepts any patch-divisible latent.
    fn admit(&self, h: usize, w: usize) -> Result<(usize, usize), ModelError> {
        let cfg = &self.config;
        if h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(ModelError::Config(format!(
                "latent {h}x{w} not divisible by patch {}",
                cfg.patch
            )));
        }
        if cfg.pe == PosEncVariant::Standard && (h != cfg.latent_h || w != cfg.latent_w) {
            return Err(ModelError::UnsupportedResolution {
                h,
                w,
                base_h: cfg.latent_h,
                base_w: cfg.latent_w,
            });
        }
        Ok((h / cfg.patch, w / cfg.patch))
    }

    fn embed_caption(&self, t: &mut Tape<E>, caption: &[usize]) -> Id {
        assert!(!caption.is_empty(), "caption must contain at least one token");
        for &tok in caption {
            assert!(tok < self.config.text_vocab, "caption token {tok} outside vocabulary");
        }
        let table = t.leaf(&self.text_embed);
        t.gather_rows(table, caption)
    }

    /// Recorded forward pass. `latent` must be a `(C,h,w)` node already on
    /// the tape; returns the predicted noise and per-block mixer taps.
    pub fn forward(
        &self,
        t: &mut Tape<E>,
        latent: Id,
        step: usize,
        caption: &[usize],
    ) -> Result<ForwardRecord, ModelError> {
        let shape = t.shape_of(latent).to_vec();
        assert_eq!(shape.len(), 3, "latent must be (C,H,W), got {shape:?}");
        assert_eq!(shape[0], self.config.channels, "latent channel count mismatch");
        let (ht, wt) = self.admit(shape[1], shape[2])?;

        let tokens = self.patch_embed.forward(t, latent);
        let pe = positional_encoding::<E>(ht, wt, self.config.d, self.config.pe);
        let pe_id = t.leaf_vec(pe.shape().to_vec().as_slice(), pe.data().to_vec(), false);
        let mut x = t.add(tokens, pe_id);

        let t_embed = self.t_embed.forward(t, step as f64);
        let ctx = self.embed_caption(t, caption);

        let mut taps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (nx, tap_in, tap_out) = block.forward(t, x, t_embed, ctx, ht, wt);
            x = nx;
            taps.push((tap_in, tap_out));
        }
        let out = self.head.forward(t, x, shape[1], shape[2]);
        Ok(ForwardRecord { out, taps })
    }

    /// Tape-free forward pass.
    pub fn infer(
        &self,
        z: &[E],
        h: usize,
        w: usize,
        step: usize,
        caption: &[usize],
    ) -> Result<Vec<E>, ModelError> {
        Ok(self.infer_inner(z, h, w, step, caption, false)?.0)
    }

    /// Tape-free forward pass capturing per-block mixer tap pairs.
    pub fn infer_with_taps(
        &self,
        z: &[E],
        h: usize,
        w: usize,
        step: usize,
        caption: &[usize],
    ) -> Result<(Vec<E>, Vec<(Vec<E>, Vec<E>)>), ModelError> {
        self.infer_inner(z, h, w, step, caption, true)
    }

    fn infer_inner(
        &self,
        z: &[E],
        h: usize,
        w: usize,
        step: usize,
        caption: &[usize],
        want_taps: bool,
    ) -> Result<(Vec<E>, Vec<(Vec<E>, Vec<E>)>), ModelError> {
        let cfg = &self.config;
        assert_eq!(z.len(), cfg.channels * h * w, "latent length mismatch");
        let (ht, wt) = self.admit(h, w)?;
        let l = ht * wt;
        let d = cfg.d;

        assert!(!caption.is_empty(), "caption must contain at least one token");
        let lc = caption.len();
        let mut ctx = vec![E::ZERO; lc * cfg.text_dim];
        for (row, &tok) in caption.iter().enumerate() {
            assert!(tok < cfg.text_vocab, "caption token {tok} outside vocabulary");
            ctx[row * cfg.text_dim..(row + 1) * cfg.text_dim]
                .copy_from_slice(&self.text_embed.data()[tok * cfg.text_dim..(tok + 1) * cfg.text_dim]);
        }

        let mut x = self.patch_embed.infer(z, h, w);
        let pe = positional_encoding::<E>(ht, wt, d, cfg.pe);
        for (v, &p) in x.iter_mut().zip(pe.data()) {
            *v += p;
        }
        let t_embed = self.t_embed.infer(step as f64);

        let mut taps = Vec::new();
        for block in &self.blocks {
            let tap_sink = want_taps.then_some(&mut taps);
            block.infer(&mut x, l, ht, wt, &t_embed, &ctx, lc, d, tap_sink);
        }
        Ok((self.head.infer(&x, l, h, w), taps))
    }
}

impl<E: Element> Denoiser<E> for HybridModel<E> {
    fn predict_noise(&self, z_t: &[E], t: usize, caption: &[usize]) -> Vec<E> {
        let cfg = &self.config;
        let (h, w) = if z_t.len() == cfg.channels * cfg.latent_h * cfg.latent_w {
            (cfg.latent_h, cfg.latent_w)
        } else {
            panic!(
                "latent length {} does not match the configured {}x{} base grid",
                z_t.len(),
                cfg.latent_h,
                cfg.latent_w
            );
        };
        self.infer(z_t, h, w, t, caption).expect("base-grid inference cannot be rejected")
    }
}

impl<E: Element> ParamSet<E> for HybridModel<E> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<E>)>) {
        self.patch_embed.visit(prefix, out);
        self.t_embed.visit(&join(prefix, "t_embed"), out);
        out.push((join(prefix, "text_embed"), &self.text_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), out);
        }
        self.head.visit(prefix, out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<E>)>) {
        self.patch_embed.visit_mut(prefix, out);
        self.t_embed.visit_mut(&join(prefix, "t_embed"), out);
        out.push((join(prefix, "text_embed"), &mut self.text_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), out);
        }
        self.head.visit_mut(prefix, out);
    }
}

// ---------------------------------------------------------------------------
// Config <-> metadata plumbing
// ---------------------------------------------------------------------------

impl ModelConfig {
    /// Canonical key-sorted text form stored in checkpoints.
    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("cfg.{k}"), v);
        };
        put("groups", self.groups.to_string());
        put("mambas_per_group", self.mambas_per_group.to_string());
        put("d", self.d.to_string());
        put("heads", self.heads.to_string());
        put("patch", self.patch.to_string());
        put("n_state", self.n_state.to_string());
        put("expand", self.expand.to_string());
        put("channels", self.channels.to_string());
        put("latent_h", self.latent_h.to_string());
        put("latent_w", self.latent_w.to_string());
        put("text_vocab", self.text_vocab.to_string());
        put("text_dim", self.text_dim.to_string());
        put(
            "pe",
            match self.pe {
                PosEncVariant::Standard => "standard".into(),
                PosEncVariant::CenteredNormalized => "centered".into(),
            },
        );
        m
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        let get = |k: &str| -> Result<&String, ModelError> {
            meta.get(&format!("cfg.{k}"))
                .ok_or_else(|| ModelError::Config(format!("missing config key {k}")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Config(format!("config key {k} is not a number")))
        };
        let pe = match get("pe")?.as_str() {
            "standard" => PosEncVariant::Standard,
            "centered" => PosEncVariant::CenteredNormalized,
            other => {
                return Err(ModelError::Config(format!("unknown positional variant {other}")))
            }
        };
        let cfg = ModelConfig {
            groups: num("groups")?,
            mambas_per_group: num("mambas_per_group")?,
            d: num("d")?,
            heads: num("heads")?,
            patch: num("patch")?,
            n_state: num("n_state")?,
            expand: num("expand")?,
            channels: num("channels")?,
            latent_h: num("latent_h")?,
            latent_w: num("latent_w")?,
            text_vocab: num("text_vocab")?,
            text_dim: num("text_dim")?,
            pe,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// Keep `Linear` in the public surface of this module for downstream helpers
// that rebuild heads (adaptation swaps the positional variant only, but the
// head type is part of the model's public shape).
pub type HeadLinear<E> = Linear<E>;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            groups: 1,
            mambas_per_group: 1,
            d: 16,
            heads: 2,
            patch: 2,
            n_state: 4,
            expand: 2,
            channels: 2,
            latent_h: 4,
            latent_w: 4,
            text_vocab: 10,
            text_dim: 8,
            pe: PosEncVariant::Standard,
        }
    }

    #[test]
    fn pattern_small_cases() {
        assert_eq!(build_pattern(1, 0), vec![BlockKind::SelfAttn]);
        assert_eq!(
            build_pattern(2, 1),
            vec![
                BlockKind::SelfAttn,
                BlockKind::MambaHeightFirst,
                BlockKind::MambaWidthFirst,
                BlockKind::SelfAttn,
                BlockKind::MambaHeightFirst,
                BlockKind::MambaWidthFirst,
            ]
        );
    }

    #[test]
    fn pattern_published_scale() {
        let p = build_pattern(4, 3);
        assert_eq!(p.len(), 28);
        let sa: Vec<usize> = p
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == BlockKind::SelfAttn)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(sa, vec![0, 7, 14, 21]);
        let hm = p.iter().filter(|&&k| k == BlockKind::MambaHeightFirst).count();
        let wm = p.iter().filter(|&&k| k == BlockKind::MambaWidthFirst).count();
        assert_eq!((sa.len(), hm, wm), (4, 12, 12));

        let cfg = ModelConfig::paper_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.depth(), 28);
        // 4 of 28 blocks attend: a 1/7 share of the stack.
        assert!((4.0 / 28.0 - 1.0 / (1.0 + 2.0 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn toy_config_shape() {
        let cfg = ModelConfig::toy();
        cfg.validate().unwrap();
        assert_eq!(cfg.depth(), 14);
        assert_eq!(cfg.tokens(), 64);
        let kinds = cfg.pattern();
        assert_eq!(kinds.iter().filter(|&&k| k == BlockKind::SelfAttn).count(), 2);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny_config();
        let mut r = rng(1);
        let model: HybridModel<f64> = HybridModel::new(cfg.clone(), &mut r).unwrap();
        let z = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut r);
        let caption = [1usize, 3, 5];
        let y1 = model.infer(z.data(), 4, 4, 3, &caption).unwrap();
        let y2 = model.infer(z.data(), 4, 4, 3, &caption).unwrap();
        assert_eq!(y1.len(), 2 * 4 * 4);
        assert_eq!(y1, y2, "repeat runs must be bit-identical");
    }

    #[test]
    fn untrained_model_emits_exact_zero() {
        // Gate-zero blocks leave the stream untouched and the output head is
        // zero-initialized, so the prediction is exactly zero.
        let cfg = tiny_config();
        let mut r = rng(2);
        let model: HybridModel<f64> = HybridModel::new(cfg, &mut r).unwrap();
        let z = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut r);
        let y = model.infer(z.data(), 4, 4, 1, &[0, 2]).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gates_zero_blocks_leave_token_stream_unchanged() {
        let cfg = tiny_config();
        let mut r = rng(3);
        let model: HybridModel<f64> = HybridModel::new(cfg.clone(), &mut r).unwrap();
        let z = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut r);

        // Independent route: patch embedding plus positions only.
        let tokens = model.patch_embed.infer(z.data(), 4, 4);
        let pe = positional_encoding::<f64>(2, 2, cfg.d, cfg.pe);
        let expect: Vec<f64> = tokens.iter().zip(pe.data()).map(|(a, b)| a + b).collect();

        // Full pass with taps: the first block's mixer input is the
        // layer-norm of exactly that stream (scale 0, shift 0).
        let (_, taps) = model.infer_with_taps(z.data(), 4, 4, 2, &[1]).unwrap();
        let mut ln_expect = vec![0.0; expect.len()];
        for row in 0..4 {
            crate::tensor::ln_row(
                &expect[row * cfg.d..(row + 1) * cfg.d],
                &mut ln_expect[row * cfg.d..(row + 1) * cfg.d],
                crate::nn::LN_EPS,
            );
        }
        assert_eq!(taps.len(), cfg.depth());
        for (i, v) in taps[0].0.iter().enumerate() {
            assert!((v - ln_expect[i]).abs() < 1e-12, "tap position {i}");
        }
        // Later blocks see the same stream: gates are zero, so nothing was
        // added between blocks.
        for (b, (tap_in, _)) in taps.iter().enumerate() {
            for (i, v) in tap_in.iter().enumerate() {
                assert!((v - ln_expect[i]).abs() < 1e-12, "block {b} position {i}");
            }
        }
    }

    #[test]
    fn tap_replay_reproduces_mixer_outputs() {
        let cfg = tiny_config();
        let mut r = rng(4);
        let teacher: HybridModel<f64> = HybridModel::new_teacher(cfg, &mut r).unwrap();
        let z = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut r);
        let (_, taps) = teacher.infer_with_taps(z.data(), 4, 4, 5, &[4, 7]).unwrap();
        for (n, (tap_in, tap_out)) in taps.iter().enumerate() {
            let replay = teacher.blocks[n].mix_infer(tap_in, 4, 2, 2);
            assert_eq!(&replay, tap_out, "block {n} replay must match recorded output");
        }
    }

    #[test]
    fn tape_and_infer_paths_agree() {
        let cfg = tiny_config();
        let mut r = rng(5);
        let model: HybridModel<f64> = HybridModel::new(cfg, &mut r).unwrap();
        let z = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut r);
        let caption = [2usize, 4];

        let mut tape = Tape::new();
        let zid = tape.constant(&z);
        let rec = model.forward(&mut tape, zid, 3, &caption).unwrap();
        let y_tape = tape.val(rec.out).to_vec();
        let (y_inf, taps_inf) = model.infer_with_taps(z.data(), 4, 4, 3, &caption).unwrap();
        for (a, b) in y_tape.iter().zip(&y_inf) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(rec.taps.len(), taps_inf.len());
        for ((tin, tout), (iin, iout)) in rec.taps.iter().zip(&taps_inf) {
            for (a, b) in tape.val(*tin).iter().zip(iin) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in tape.val(*tout).iter().zip(iout) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn teacher_and_student_share_everything_but_mixers() {
        let cfg = tiny_config();
        let mut r = rng(6);
        let teacher: HybridModel<f64> = HybridModel::new_teacher(cfg, &mut r).unwrap();
        let student = HybridModel::student_from_teacher(&teacher, &mut r);

        let t_names: Vec<String> = teacher.params().into_iter().map(|(n, _)| n).collect();
        let s_names: Vec<String> = student.params().into_iter().map(|(n, _)| n).collect();
        // Non-mixer names must be common to both.
        for n in t_names.iter().filter(|n| !n.contains("attn")) {
            assert!(s_names.contains(n), "student missing {n}");
        }
        // Identical outputs at init (gates zero; shared non-mixer weights).
        let z = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut r);
        let yt = teacher.infer(z.data(), 4, 4, 2, &[1, 2]).unwrap();
        let ys = student.infer(z.data(), 4, 4, 2, &[1, 2]).unwrap();
        assert_eq!(yt, ys);

        // The copy is deep: nudging the student must not touch the teacher.
        let before = teacher.text_embed.data()[0];
        let mut student = student;
        student.text_embed.data_mut()[0] += 1.0;
        assert_eq!(teacher.text_embed.data()[0], before);
    }

    #[test]
    fn standard_positions_reject_other_grids() {
        let cfg = tiny_config();
        let mut r = rng(7);
        let model: HybridModel<f64> = HybridModel::new(cfg, &mut r).unwrap();
        let z = vec![0.0; 2 * 8 * 8];
        let err = model.infer(&z, 8, 8, 1, &[1]).unwrap_err();
        match err {
            ModelError::UnsupportedResolution { h, w, base_h, base_w } => {
                assert_eq!((h, w, base_h, base_w), (8, 8, 4, 4));
            }
            other => panic!("expected resolution rejection, got {other:?}"),
        }
    }

    #[test]
    fn normalized_positions_accept_larger_grids() {
        let mut cfg = tiny_config();
        cfg.pe = PosEncVariant::CenteredNormalized;
        let mut r = rng(8);
        let model: HybridModel<f64> = HybridModel::new(cfg, &mut r).unwrap();
        let z = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut r);
        let y = model.infer(z.data(), 8, 8, 1, &[1]).unwrap();
        assert_eq!(y.len(), 2 * 8 * 8);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn config_metadata_roundtrip() {
        let cfg = ModelConfig::toy();
        let meta = cfg.to_metadata();
        let back = ModelConfig::from_metadata(&meta).unwrap();
        assert_eq!(cfg, back);
    }
}
