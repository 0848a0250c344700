//! Tiny diffusion transformer epsilon-predictor over a 2x2 view grid.
//!
//! Tokens are ordered view-major so the SINGLE_IMAGE attention mask is
//! block-diagonal over contiguous per-view token groups. Conditioning is an
//! additive per-block bias computed from timestep + prompt embeddings, which
//! keeps every cross-token interaction inside attention and makes the
//! per-view independence invariant exact.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterKind, BlockLora, DomainId, DomainShifter, DomainSwitcher, LowRankDelta};
use crate::numerics::{NumericsError, Result, Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// Pixels per view; the full grid is 2*image_side square.
    pub image_side: usize,
    /// Views per grid axis (2 => V = 4 views).
    pub grid: usize,
    pub channels_image: usize,
    pub channels_control: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Diffusion horizon T.
    pub horizon: usize,
    /// Prompt vocabulary size (shape classes); one extra NULL row is reserved.
    pub n_prompts: usize,
    /// MLP hidden width multiplier.
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_side: 32,
            grid: 2,
            channels_image: 3,
            channels_control: 3,
            patch_size: 4,
            d_model: 128,
            n_heads: 4,
            n_blocks: 12,
            horizon: 1000,
            n_prompts: 8,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| NumericsError::Contract { op: "BackboneConfig", msg };
        if self.image_side % self.patch_size != 0 {
            return Err(bad(format!(
                "image_side {} not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(bad(format!("d_model {} must be divisible by 4", self.d_model)));
        }
        if self.n_blocks < 2 {
            return Err(bad(format!("need at least 2 blocks, got {}", self.n_blocks)));
        }
        Ok(())
    }

    pub fn full_side(&self) -> usize {
        self.image_side * self.grid
    }

    pub fn n_views(&self) -> usize {
        self.grid * self.grid
    }

    pub fn in_channels(&self) -> usize {
        self.channels_image + self.channels_control
    }

    pub fn patches_per_view_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn tokens_per_view(&self) -> usize {
        let q = self.patches_per_view_side();
        q * q
    }

    pub fn n_tokens(&self) -> usize {
        self.n_views() * self.tokens_per_view()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels() * self.patch_size * self.patch_size
    }

    pub fn out_patch_dim(&self) -> usize {
        self.channels_image * self.patch_size * self.patch_size
    }

    /// NULL prompt row index (participates in training via prompt dropout).
    pub fn null_prompt_row(&self) -> usize {
        self.n_prompts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMode {
    GridFull,
    SingleImage,
}

pub struct Linear<F: Scalar> {
    pub w: Tensor<F>, // [d_in, d_out]
    pub b: Tensor<F>, // [d_out]
}

impl<F: Scalar> Linear<F> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        Linear {
            w: Tensor::randn(&[d_in, d_out], std, rng).requires_grad(true),
            b: Tensor::zeros(&[d_out]).requires_grad(true),
        }
    }

    pub fn new_zero(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[d_in, d_out]).requires_grad(true),
            b: Tensor::zeros(&[d_out]).requires_grad(true),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.matmul(&self.w)?.add_row(&self.b)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

pub struct LayerNormParams<F: Scalar> {
    pub g: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> LayerNormParams<F> {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            g: Tensor::full(&[d], F::one()).requires_grad(true),
            b: Tensor::zeros(&[d]).requires_grad(true),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        x.layer_norm(&self.g, &self.b)
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}.g"), self.g.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Pre-norm attention + pre-norm MLP with residual connections and an
/// additive conditioning bias on the block input.
pub struct DiTBlock<F: Scalar> {
    pub cond_proj: Linear<F>,
    pub ln1: LayerNormParams<F>,
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub ln2: LayerNormParams<F>,
    pub mlp1: Linear<F>,
    pub mlp2: Linear<F>,
}

impl<F: Scalar> DiTBlock<F> {
    fn new(d: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        DiTBlock {
            // Zero init: conditioning starts as a no-op (adaLN-zero style).
            cond_proj: Linear::new_zero(d, d),
            ln1: LayerNormParams::new(d),
            wq: Linear::new(d, d, rng),
            wk: Linear::new(d, d, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            ln2: LayerNormParams::new(d),
            mlp1: Linear::new(d, d * mlp_ratio, rng),
            mlp2: Linear::new(d * mlp_ratio, d, rng),
        }
    }

    fn forward(
        &self,
        x: &Tensor<F>,
        cond: &Tensor<F>,
        mask: &Tensor<F>,
        n_heads: usize,
        lora: Option<&BlockLora<F>>,
    ) -> Result<Tensor<F>> {
        let bias = self.cond_proj.forward(cond)?; // [1, d]
        let x = x.add_row(&bias)?;

        let h = self.ln1.forward(&x)?;
        let mut q = self.wq.forward(&h)?;
        let mut k = self.wk.forward(&h)?;
        let mut v = self.wv.forward(&h)?;
        if let Some(l) = lora {
            q = q.add(&l.q.apply(&h)?)?;
            k = k.add(&l.k.apply(&h)?)?;
            v = v.add(&l.v.apply(&h)?)?;
        }
        let d = q.shape()[1];
        let dh = d / n_heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(n_heads);
        for hd in 0..n_heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let qh = q.slice_cols(lo, hi)?;
            let kh = k.slice_cols(lo, hi)?;
            let vh = v.slice_cols(lo, hi)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?.add(mask)?;
            let attn = scores.softmax_lastdim()?;
            heads.push(attn.matmul(&vh)?);
        }
        let cat = Tensor::concat_cols(&heads)?;
        let mut attn_out = self.wo.forward(&cat)?;
        if let Some(l) = lora {
            attn_out = attn_out.add(&l.o.apply(&cat)?)?;
        }
        let x = x.add(&attn_out)?;

        let h2 = self.ln2.forward(&x)?;
        let m = self.mlp2.forward(&self.mlp1.forward(&h2)?.silu()?)?;
        x.add(&m)
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        self.cond_proj.named_params(&format!("{prefix}.cond_proj"), out);
        self.ln1.named_params(&format!("{prefix}.ln1"), out);
        self.wq.named_params(&format!("{prefix}.wq"), out);
        self.wk.named_params(&format!("{prefix}.wk"), out);
        self.wv.named_params(&format!("{prefix}.wv"), out);
        self.wo.named_params(&format!("{prefix}.wo"), out);
        self.ln2.named_params(&format!("{prefix}.ln2"), out);
        self.mlp1.named_params(&format!("{prefix}.mlp1"), out);
        self.mlp2.named_params(&format!("{prefix}.mlp2"), out);
    }
}

/// Parameter-set selectors for the training recipes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamSelector {
    All,
    ShiftersOnly,
    BackboneOnly,
    /// Inclusive block index range.
    BlocksInRange(usize, usize),
    Adapter(AdapterKind),
}

/// Per-forward inputs beyond the noisy grid itself.
pub struct ForwardCtx<'a, F: Scalar> {
    pub t: usize,
    /// `None` selects the reserved NULL prompt row (CFG unconditional pass).
    pub prompt: Option<usize>,
    pub mode: AttentionMode,
    /// Per-block domain assignment; `None` disables the shifter pathway.
    pub plan: Option<&'a [DomainId]>,
    /// Domain fed to the switcher baseline, when attached.
    pub switcher_domain: Option<DomainId>,
    /// Pre-shifter block-input tap: (block index, tokens). Reads only.
    pub tap: Option<&'a mut dyn FnMut(usize, &Tensor<F>)>,
}

impl<'a, F: Scalar> ForwardCtx<'a, F> {
    pub fn new(t: usize, prompt: Option<usize>, mode: AttentionMode, plan: Option<&'a [DomainId]>) -> Self {
        ForwardCtx {
            t,
            prompt,
            mode,
            plan,
            switcher_domain: None,
            tap: None,
        }
    }
}

pub struct Backbone<F: Scalar> {
    pub cfg: BackboneConfig,
    patch_idx: Rc<Vec<usize>>,
    unpatch_idx: Rc<Vec<usize>>,
    pos: Tensor<F>,
    patch_embed: Linear<F>,
    t_mlp1: Linear<F>,
    t_mlp2: Linear<F>,
    prompt_table: Tensor<F>, // [n_prompts + 1, d]
    pub blocks: Vec<DiTBlock<F>>,
    final_ln: LayerNormParams<F>,
    head: Linear<F>,
    pub shifters: Option<Vec<DomainShifter<F>>>,
    pub lora: Option<Vec<BlockLora<F>>>,
    pub linear_adapters: Option<Vec<LowRankDelta<F>>>,
    pub spatial_adapters: Option<Vec<LowRankDelta<F>>>,
    pub switcher: Option<DomainSwitcher<F>>,
}

impl<F: Scalar> Backbone<F> {
    pub fn new(cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let patch_embed = Linear::new(cfg.patch_dim(), d, rng);
        let t_mlp1 = Linear::new(d, d, rng);
        let t_mlp2 = Linear::new(d, d, rng);
        let prompt_table = Tensor::randn(&[cfg.n_prompts + 1, d], 0.02, rng).requires_grad(true);
        let blocks = (0..cfg.n_blocks).map(|_| DiTBlock::new(d, cfg.mlp_ratio, rng)).collect();
        let final_ln = LayerNormParams::new(d);
        // Zero-init head: the model starts by predicting epsilon = 0.
        let head = Linear::new_zero(d, cfg.out_patch_dim());
        Ok(Backbone {
            patch_idx: Rc::new(build_patch_indices(&cfg)),
            unpatch_idx: Rc::new(build_unpatch_indices(&cfg)),
            pos: positional_embedding(&cfg),
            patch_embed,
            t_mlp1,
            t_mlp2,
            prompt_table,
            blocks,
            final_ln,
            head,
            shifters: None,
            lora: None,
            linear_adapters: None,
            spatial_adapters: None,
            switcher: None,
            cfg,
        })
    }

    pub fn attach_shifters(&mut self, rank: usize, rng: &mut impl Rng) -> Result<()> {
        if self.shifters.is_some() {
            return Err(NumericsError::Contract {
                op: "attach_shifters",
                msg: "shifters already attached".into(),
            });
        }
        let mut v = Vec::with_capacity(self.cfg.n_blocks);
        for _ in 0..self.cfg.n_blocks {
            v.push(DomainShifter::new(self.cfg.d_model, rank, rng)?);
        }
        self.shifters = Some(v);
        Ok(())
    }

    pub fn attach_adapter(&mut self, kind: AdapterKind, rank: usize, rng: &mut impl Rng) -> Result<()> {
        let dup = NumericsError::Contract {
            op: "attach_adapter",
            msg: format!("{} already attached", kind.label()),
        };
        let d = self.cfg.d_model;
        match kind {
            AdapterKind::Lora => {
                if self.lora.is_some() {
                    return Err(dup);
                }
                self.lora = Some((0..self.cfg.n_blocks).map(|_| BlockLora::new(d, rank, rng)).collect());
            }
            AdapterKind::LinearAdapter => {
                if self.linear_adapters.is_some() {
                    return Err(dup);
                }
                self.linear_adapters =
                    Some((0..self.cfg.n_blocks).map(|_| LowRankDelta::new(d, d, rank, rng)).collect());
            }
            AdapterKind::SpatialAdapter => {
                if self.spatial_adapters.is_some() {
                    return Err(dup);
                }
                self.spatial_adapters =
                    Some((0..self.cfg.n_blocks).map(|_| LowRankDelta::new(d, d, rank, rng)).collect());
            }
            AdapterKind::DomainSwitcher => {
                if self.switcher.is_some() {
                    return Err(dup);
                }
                // Concatenation to the timestep embedding: the conditioning
                // MLP input grows by the switcher dim; new weight rows start
                // at zero to keep the forward bit-identical on attach.
                let sw = DomainSwitcher::new(rank, rng);
                let old = &self.t_mlp1.w;
                let (d_in, d_out) = (old.shape()[0], old.shape()[1]);
                let mut data = old.data();
                data.extend(std::iter::repeat(F::zero()).take(rank * d_out));
                let mut w = Tensor::from_vec(&[d_in + rank, d_out], data)?;
                w.set_requires_grad(true);
                self.t_mlp1.w = w;
                self.switcher = Some(sw);
            }
        }
        Ok(())
    }

    pub fn detach_adapter(&mut self, kind: AdapterKind) -> Result<()> {
        let missing = NumericsError::Contract {
            op: "detach_adapter",
            msg: format!("{} not attached", kind.label()),
        };
        match kind {
            AdapterKind::Lora => {
                self.lora.take().ok_or(missing)?;
            }
            AdapterKind::LinearAdapter => {
                self.linear_adapters.take().ok_or(missing)?;
            }
            AdapterKind::SpatialAdapter => {
                self.spatial_adapters.take().ok_or(missing)?;
            }
            AdapterKind::DomainSwitcher => {
                let sw = self.switcher.take().ok_or(missing)?;
                let old = &self.t_mlp1.w;
                let (d_in, d_out) = (old.shape()[0], old.shape()[1]);
                let base_in = d_in - sw.dim;
                let data = old.data()[..base_in * d_out].to_vec();
                let mut w = Tensor::from_vec(&[base_in, d_out], data)?;
                w.set_requires_grad(true);
                self.t_mlp1.w = w;
            }
        }
        Ok(())
    }

    /// Width of the conditioning MLP input (timestep embedding, plus the
    /// switcher vector when one is attached).
    pub fn cond_embed_len(&self) -> usize {
        self.t_mlp1.w.shape()[0]
    }

    /// Predict epsilon for a noisy 6-channel grid. `x_t` has shape
    /// [in_channels, full, full]; the result has shape [3, full, full].
    pub fn forward(&self, x_t: &Tensor<F>, ctx: &mut ForwardCtx<'_, F>) -> Result<Tensor<F>> {
        let cfg = &self.cfg;
        let full = cfg.full_side();
        if x_t.shape() != [cfg.in_channels(), full, full] {
            return Err(NumericsError::ShapeMismatch {
                op: "Backbone::forward",
                lhs: x_t.shape().to_vec(),
                rhs: vec![cfg.in_channels(), full, full],
            });
        }
        if ctx.t >= cfg.horizon {
            return Err(NumericsError::Contract {
                op: "Backbone::forward",
                msg: format!("timestep {} out of horizon {}", ctx.t, cfg.horizon),
            });
        }
        if let Some(p) = ctx.prompt {
            if p >= cfg.n_prompts {
                return Err(NumericsError::Contract {
                    op: "Backbone::forward",
                    msg: format!("unknown prompt id {}", p),
                });
            }
        }
        if let Some(plan) = ctx.plan {
            if plan.len() != cfg.n_blocks {
                return Err(NumericsError::Contract {
                    op: "Backbone::forward",
                    msg: format!("plan length {} != {} blocks", plan.len(), cfg.n_blocks),
                });
            }
            if self.shifters.is_none() {
                return Err(NumericsError::Contract {
                    op: "Backbone::forward",
                    msg: "domain plan given but no shifters attached".into(),
                });
            }
        }

        let n = cfg.n_tokens();
        let tokens = x_t.gather(&self.patch_idx, &[n, cfg.patch_dim()])?;
        let mut x = self.patch_embed.forward(&tokens)?.add(&self.pos)?;

        // Conditioning embedding: sinusoidal timestep -> MLP, plus prompt row.
        let temb = timestep_embedding::<F>(ctx.t, cfg.d_model)?;
        let t_in = match (&self.switcher, ctx.switcher_domain) {
            (Some(sw), Some(dom)) => {
                let v = sw.vector(dom).reshape(&[1, sw.dim])?;
                Tensor::concat_cols(&[temb, v])?
            }
            (Some(sw), None) => {
                let v = Tensor::zeros(&[1, sw.dim]);
                Tensor::concat_cols(&[temb, v])?
            }
            (None, _) => temb,
        };
        let t_feat = self.t_mlp2.forward(&self.t_mlp1.forward(&t_in)?.silu()?)?;
        let row = ctx.prompt.unwrap_or(cfg.null_prompt_row());
        let d = cfg.d_model;
        let idx: Vec<usize> = (row * d..(row + 1) * d).collect();
        let prompt_row = self.prompt_table.gather(&Rc::new(idx), &[1, d])?;
        let cond = t_feat.add(&prompt_row)?;

        let mask = attention_mask::<F>(cfg, ctx.mode);

        for (b, block) in self.blocks.iter().enumerate() {
            if let Some(tap) = ctx.tap.as_mut() {
                tap(b, &x);
            }
            if let Some(plan) = ctx.plan {
                let shifters = self.shifters.as_ref().expect("checked above");
                x = shifters[b].shift(&x, plan[b])?;
            }
            if let Some(las) = &self.linear_adapters {
                x = x.add(&las[b].apply(&x)?)?;
            }
            let lora = self.lora.as_ref().map(|l| &l[b]);
            x = block.forward(&x, &cond, &mask, cfg.n_heads, lora)?;
            if let Some(sas) = &self.spatial_adapters {
                x = x.add(&sas[b].apply(&x)?)?;
            }
        }

        let out = self.head.forward(&self.final_ln.forward(&x)?)?;
        out.gather(&self.unpatch_idx, &[cfg.channels_image, full, full])
    }

    /// Named parameters for a selector. The partition is disjoint and stable,
    /// with names usable as checkpoint keys.
    pub fn param_groups(&self, sel: &ParamSelector) -> Result<Vec<(String, Tensor<F>)>> {
        let mut out = Vec::new();
        match sel {
            ParamSelector::All => {
                self.backbone_params(&mut out);
                self.shifter_params(&mut out);
                self.adapter_params(&mut out);
            }
            ParamSelector::BackboneOnly => self.backbone_params(&mut out),
            ParamSelector::ShiftersOnly => self.shifter_params(&mut out),
            ParamSelector::BlocksInRange(lo, hi) => {
                if lo > hi || *hi >= self.cfg.n_blocks {
                    return Err(NumericsError::Contract {
                        op: "param_groups",
                        msg: format!("block range {}..={} out of {} blocks", lo, hi, self.cfg.n_blocks),
                    });
                }
                for b in *lo..=*hi {
                    self.blocks[b].named_params(&format!("block{b:02}"), &mut out);
                }
            }
            ParamSelector::Adapter(kind) => match kind {
                AdapterKind::Lora => {
                    if let Some(l) = &self.lora {
                        for (b, bl) in l.iter().enumerate() {
                            bl.named_params(&format!("block{b:02}.lora"), &mut out);
                        }
                    }
                }
                AdapterKind::LinearAdapter => {
                    if let Some(l) = &self.linear_adapters {
                        for (b, la) in l.iter().enumerate() {
                            la.named_params(&format!("block{b:02}.linadapt"), &mut out);
                        }
                    }
                }
                AdapterKind::SpatialAdapter => {
                    if let Some(l) = &self.spatial_adapters {
                        for (b, sa) in l.iter().enumerate() {
                            sa.named_params(&format!("block{b:02}.spatadapt"), &mut out);
                        }
                    }
                }
                AdapterKind::DomainSwitcher => {
                    if let Some(sw) = &self.switcher {
                        sw.named_params("switcher", &mut out);
                    }
                }
            },
        }
        if out.is_empty() {
            return Err(NumericsError::Contract {
                op: "param_groups",
                msg: format!("selector {:?} selected no parameters", sel),
            });
        }
        Ok(out)
    }

    fn backbone_params(&self, out: &mut Vec<(String, Tensor<F>)>) {
        self.patch_embed.named_params("patch_embed", out);
        self.t_mlp1.named_params("t_mlp1", out);
        self.t_mlp2.named_params("t_mlp2", out);
        out.push(("prompt_table".into(), self.prompt_table.clone()));
        for (b, block) in self.blocks.iter().enumerate() {
            block.named_params(&format!("block{b:02}"), out);
        }
        self.final_ln.named_params("final_ln", out);
        self.head.named_params("head", out);
    }

    fn shifter_params(&self, out: &mut Vec<(String, Tensor<F>)>) {
        if let Some(shifters) = &self.shifters {
            for (b, s) in shifters.iter().enumerate() {
                s.named_params(&format!("block{b:02}.shifter"), out);
            }
        }
    }

    fn adapter_params(&self, out: &mut Vec<(String, Tensor<F>)>) {
        for kind in [
            AdapterKind::Lora,
            AdapterKind::LinearAdapter,
            AdapterKind::SpatialAdapter,
            AdapterKind::DomainSwitcher,
        ] {
            if let Ok(mut ps) = self.param_groups(&ParamSelector::Adapter(kind)) {
                out.append(&mut ps);
            }
        }
    }
}

/// Fixed 2D sin-cos positional embedding over global patch coordinates.
fn positional_embedding<F: Scalar>(cfg: &BackboneConfig) -> Tensor<F> {
    let n = cfg.n_tokens();
    let d = cfg.d_model;
    let q = cfg.patches_per_view_side();
    let quarter = d / 4;
    let mut data = vec![F::zero(); n * d];
    for v in 0..cfg.n_views() {
        let (vr, vc) = (v / cfg.grid, v % cfg.grid);
        for py in 0..q {
            for px in 0..q {
                let tok = v * q * q + py * q + px;
                let gy = (vr * q + py) as f64;
                let gx = (vc * q + px) as f64;
                for i in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    data[tok * d + i] = F::from_f64((gy * freq).sin());
                    data[tok * d + quarter + i] = F::from_f64((gy * freq).cos());
                    data[tok * d + 2 * quarter + i] = F::from_f64((gx * freq).sin());
                    data[tok * d + 3 * quarter + i] = F::from_f64((gx * freq).cos());
                }
            }
        }
    }
    Tensor::from_vec(&[n, d], data).expect("finite by construction")
}

/// Sinusoidal timestep embedding as a [1, d] constant.
fn timestep_embedding<F: Scalar>(t: usize, d: usize) -> Result<Tensor<F>> {
    let half = d / 2;
    let mut data = vec![F::zero(); d];
    for i in 0..half {
        let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
        data[i] = F::from_f64((t as f64 * freq).sin());
        data[half + i] = F::from_f64((t as f64 * freq).cos());
    }
    Tensor::from_vec(&[1, d], data)
}

/// Additive attention mask: zeros everywhere for GRID_FULL; a large negative
/// constant outside the per-view diagonal blocks for SINGLE_IMAGE. The
/// constant absorbs any finite logit, so masked weights underflow to exactly
/// zero and per-view independence is exact.
fn attention_mask<F: Scalar>(cfg: &BackboneConfig, mode: AttentionMode) -> Tensor<F> {
    let n = cfg.n_tokens();
    match mode {
        AttentionMode::GridFull => Tensor::zeros(&[n, n]),
        AttentionMode::SingleImage => {
            let tv = cfg.tokens_per_view();
            let neg = F::from_f64(-1e30);
            let mut data = vec![neg; n * n];
            for i in 0..n {
                let view = i / tv;
                for j in view * tv..(view + 1) * tv {
                    data[i * n + j] = F::zero();
                }
            }
            Tensor::from_vec(&[n, n], data).expect("finite by construction")
        }
    }
}

fn build_patch_indices(cfg: &BackboneConfig) -> Vec<usize> {
    let (s, p, g, c_in) = (cfg.image_side, cfg.patch_size, cfg.grid, cfg.in_channels());
    let full = cfg.full_side();
    let q = cfg.patches_per_view_side();
    let mut idx = Vec::with_capacity(cfg.n_tokens() * cfg.patch_dim());
    for v in 0..g * g {
        let (vr, vc) = (v / g, v % g);
        for py in 0..q {
            for px in 0..q {
                for c in 0..c_in {
                    for dy in 0..p {
                        for dx in 0..p {
                            let y = vr * s + py * p + dy;
                            let x = vc * s + px * p + dx;
                            idx.push(c * full * full + y * full + x);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse map for the 3 output channels: out pixel -> token element.
fn build_unpatch_indices(cfg: &BackboneConfig) -> Vec<usize> {
    let (s, p, g) = (cfg.image_side, cfg.patch_size, cfg.grid);
    let c_out = cfg.channels_image;
    let full = cfg.full_side();
    let q = cfg.patches_per_view_side();
    let od = cfg.out_patch_dim();
    let mut idx = vec![0usize; c_out * full * full];
    for v in 0..g * g {
        let (vr, vc) = (v / g, v % g);
        for py in 0..q {
            for px in 0..q {
                let tok = v * q * q + py * q + px;
                for c in 0..c_out {
                    for dy in 0..p {
                        for dx in 0..p {
                            let y = vr * s + py * p + dy;
                            let x = vc * s + px * p + dx;
                            let feat = c * p * p + dy * p + dx;
                            idx[c * full * full + y * full + x] = tok * od + feat;
                        }
                    }
                }
            }
        }
    }
    idx
}
