//! The UDiT network: three attention-free convolutional encoders (noisy
//! image, person, garment), a stack of DiT blocks conditioned by FiLM and
//! key-value token concatenation, cross-attention over garment features, and
//! a symmetric upsampling decoder. All parameters are resolution-agnostic so
//! one checkpoint runs at every stage resolution.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attrs::{FIELD_SIZES, NUM_ATTRIBUTES};
use crate::cond::CondBatch;
use crate::diffusion::{corrupt, draw_t_eps, v_from, Denoiser, DiffusionSchedule};
use crate::error::{Result, VtoError};
use crate::graph::{Graph, NodeId};
use crate::params::{randn, Bound, ParamSet};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UDiTConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Power of two; the DiT blocks run at input resolution divided by this.
    pub attention_downsample_factor: usize,
    pub num_dit_blocks: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub d_model: usize,
    pub num_joints: usize,
    /// Extra channels concatenated to the noisy image (3 for the
    /// super-resolution ablation that conditions on an upsampled low-res
    /// result, 0 otherwise).
    pub extra_input_channels: usize,
}

impl UDiTConfig {
    /// Desk-scale default at the given stage height (width = height / 2).
    pub fn toy(input_height: usize) -> Self {
        UDiTConfig {
            input_height,
            input_width: input_height / 2,
            base_channels: 8,
            channel_multipliers: vec![1, 2, 2, 3],
            attention_downsample_factor: 8,
            num_dit_blocks: 2,
            num_heads: 4,
            embed_dim: 32,
            d_model: 128,
            num_joints: crate::cond::NUM_JOINTS,
            extra_input_channels: 0,
        }
    }

    /// Tiny config for 64-bit finite-difference gradient verification.
    pub fn micro() -> Self {
        UDiTConfig {
            input_height: 16,
            input_width: 8,
            base_channels: 4,
            channel_multipliers: vec![1, 1, 1, 1],
            attention_downsample_factor: 8,
            num_dit_blocks: 1,
            num_heads: 2,
            embed_dim: 4,
            d_model: 8,
            num_joints: 2,
            extra_input_channels: 0,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.channels().last().unwrap()
    }

    pub fn attn_height(&self) -> usize {
        self.input_height / self.attention_downsample_factor
    }

    pub fn attn_width(&self) -> usize {
        self.input_width / self.attention_downsample_factor
    }

    /// Channels of the conditioning inputs (RGB + keypoint heatmaps).
    pub fn cond_in_channels(&self) -> usize {
        3 + self.num_joints
    }

    pub fn zt_in_channels(&self) -> usize {
        3 + self.extra_input_channels
    }

    /// The same architecture at doubled resolution (progressive stage 2).
    pub fn doubled(&self) -> Self {
        let mut c = self.clone();
        c.input_height *= 2;
        c.input_width *= 2;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.attention_downsample_factor;
        if f == 0 || !f.is_power_of_two() {
            return Err(VtoError::Config(format!(
                "attention_downsample_factor {f} must be a power of two"
            )));
        }
        if self.input_height != 2 * self.input_width {
            return Err(VtoError::Config(format!(
                "input must have a 2:1 aspect, got {}x{}",
                self.input_height, self.input_width
            )));
        }
        if self.input_height % f != 0 || self.input_width % f != 0 {
            return Err(VtoError::Config(format!(
                "input {}x{} not divisible by attention factor {f}",
                self.input_height, self.input_width
            )));
        }
        let expected_levels = f.trailing_zeros() as usize + 1;
        if self.levels() != expected_levels {
            return Err(VtoError::Config(format!(
                "factor {f} needs {expected_levels} channel multipliers, got {}",
                self.levels()
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(VtoError::Config(format!(
                "embed_dim {} must be even",
                self.embed_dim
            )));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(VtoError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.base_channels == 0 || self.num_dit_blocks == 0 || self.num_joints == 0 {
            return Err(VtoError::Config(
                "base_channels, num_dit_blocks, num_joints must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Name and shape of every parameter. Shapes depend only on channel widths,
/// never on the input resolution.
pub fn param_shapes(cfg: &UDiTConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.channels();
    let levels = cfg.levels();
    let e = cfg.embed_dim;
    let d = cfg.d_model;
    let c_last = cfg.bottleneck_channels();
    let cin_cond = cfg.cond_in_channels();
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();

    for (prefix, cin0, film) in [
        ("e_zt", cfg.zt_in_channels(), true),
        ("e_p", cin_cond, false),
        ("e_g", cin_cond, false),
    ] {
        let mut prev = cin0;
        for (l, &cl) in c.iter().enumerate() {
            v.push((format!("{prefix}.{l}.w"), vec![3, 3, prev, cl]));
            v.push((format!("{prefix}.{l}.b"), vec![cl]));
            if film {
                v.push((format!("{prefix}.{l}.film_s.w"), vec![e, cl]));
                v.push((format!("{prefix}.{l}.film_s.b"), vec![cl]));
                v.push((format!("{prefix}.{l}.film_t.w"), vec![e, cl]));
                v.push((format!("{prefix}.{l}.film_t.b"), vec![cl]));
            }
            prev = cl;
        }
    }
    for s in 0..3 {
        v.push((format!("e_g.slot_embed.{s}"), vec![cin_cond]));
    }
    v.push(("t_embed.w".into(), vec![e, e]));
    v.push(("t_embed.b".into(), vec![e]));
    for (f, &size) in FIELD_SIZES.iter().enumerate() {
        v.push((format!("attr.{f}.table"), vec![size + 1, e]));
    }
    v.push(("dit.in_proj.w".into(), vec![1, 1, 2 * c_last, d]));
    v.push(("dit.in_proj.b".into(), vec![d]));
    v.push(("dit.tkv.w".into(), vec![e, d]));
    v.push(("dit.tkv.b".into(), vec![d]));
    v.push(("dit.attrkv.w".into(), vec![e, d]));
    v.push(("dit.attrkv.b".into(), vec![d]));
    v.push(("dit.kpkv.w".into(), vec![2 * cfg.num_joints, d]));
    v.push(("dit.kpkv.b".into(), vec![d]));
    v.push(("dit.gproj.w".into(), vec![c_last, d]));
    v.push(("dit.gproj.b".into(), vec![d]));
    for i in 0..cfg.num_dit_blocks {
        v.push((format!("dit.{i}.film_s.w"), vec![e, d]));
        v.push((format!("dit.{i}.film_s.b"), vec![d]));
        v.push((format!("dit.{i}.film_t.w"), vec![e, d]));
        v.push((format!("dit.{i}.film_t.b"), vec![d]));
        for attn in ["sa", "ca"] {
            for proj in ["q", "k", "v", "o"] {
                v.push((format!("dit.{i}.{attn}.{proj}.w"), vec![d, d]));
                v.push((format!("dit.{i}.{attn}.{proj}.b"), vec![d]));
            }
        }
        v.push((format!("dit.{i}.mlp.0.w"), vec![d, 4 * d]));
        v.push((format!("dit.{i}.mlp.0.b"), vec![4 * d]));
        v.push((format!("dit.{i}.mlp.1.w"), vec![4 * d, d]));
        v.push((format!("dit.{i}.mlp.1.b"), vec![d]));
    }
    v.push(("dit.out_proj.w".into(), vec![1, 1, d, c_last]));
    v.push(("dit.out_proj.b".into(), vec![c_last]));
    for l in (0..levels).rev() {
        let cout = c[l.saturating_sub(1)];
        v.push((format!("dec.{l}.w"), vec![3, 3, 2 * c[l], cout]));
        v.push((format!("dec.{l}.b"), vec![cout]));
    }
    v.push(("dec.final.w".into(), vec![3, 3, c[0], 3]));
    v.push(("dec.final.b".into(), vec![3]));
    v
}

/// The person feature pyramid F_p: one map per E_p level. Only the last
/// (bottleneck) level is consumed by the DiT blocks; identity finetuning
/// optimizes exactly that map.
#[derive(Debug, Clone)]
pub struct PersonFeatures<F: Scalar> {
    pub pyramid: Vec<ArrayD<F>>,
}

impl<F: Scalar> PersonFeatures<F> {
    pub fn bottleneck(&self) -> &ArrayD<F> {
        self.pyramid.last().expect("empty pyramid")
    }
}

/// Per-slot garment features at the attention resolution.
#[derive(Debug, Clone)]
pub struct GarmentFeatures<F: Scalar> {
    pub slots: [ArrayD<F>; 3],
}

/// Conditioning features that do not depend on t or z_t, precomputed once
/// per sampler invocation.
#[derive(Debug, Clone)]
pub struct CondFeatures<F: Scalar> {
    /// Person bottleneck map [b, ha, wa, c_last].
    pub f_p_bot: ArrayD<F>,
    pub f_p_pyramid: Vec<ArrayD<F>>,
    /// Projected garment tokens [b, 3·ha·wa, d_model].
    pub g_tokens: ArrayD<F>,
    /// Attribute and keypoint kv tokens [b, num_attributes + 1, d_model].
    pub static_tokens: ArrayD<F>,
}

#[derive(Debug, Clone)]
pub struct UDiT<F: Scalar> {
    pub config: UDiTConfig,
    pub params: ParamSet<F>,
}

impl<F: Scalar> UDiT<F> {
    pub fn new(config: UDiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in param_shapes(&config) {
            let value = if name.ends_with(".b")
                || name.contains(".film_")
                || name == "dec.final.w"
            {
                ArrayD::<F>::zeros(IxDyn(&shape))
            } else if name.ends_with(".table") || name.starts_with("e_g.slot_embed") {
                randn(&shape, 0.1, &mut rng)
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                randn(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
            };
            params.insert(name, value);
        }
        Ok(UDiT { config, params })
    }

    pub fn from_params(config: UDiTConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        verify_params(&config, &params)?;
        Ok(UDiT { config, params })
    }

    /// Pure person-feature extraction (no t input anywhere in this path).
    pub fn encode_person(&self, person_in: &Array4<F>) -> Result<PersonFeatures<F>> {
        self.check_cond_res(person_in.dim())?;
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &self.params, |_| false);
        let x = g.constant(person_in.clone().into_dyn());
        let pyr = encode_pyramid(&mut g, &bound, &self.config, "e_p", x, None);
        Ok(PersonFeatures {
            pyramid: pyr.iter().map(|&id| g.value(id).clone()).collect(),
        })
    }

    /// Per-slot garment features (shared trunk + learned slot embedding).
    pub fn encode_garment(&self, garment_in: &Array4<F>, slot: usize) -> Result<ArrayD<F>> {
        if slot >= 3 {
            return Err(VtoError::RejectedInput(format!("unknown slot {slot}")));
        }
        self.check_cond_res(garment_in.dim())?;
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &self.params, |_| false);
        let x = g.constant(garment_in.clone().into_dyn());
        let bot = garment_bottleneck(&mut g, &bound, &self.config, x, slot);
        Ok(g.value(bot).clone())
    }

    fn check_cond_res(&self, dim: (usize, usize, usize, usize)) -> Result<()> {
        let cfg = &self.config;
        if dim.1 != cfg.input_height || dim.2 != cfg.input_width || dim.3 != cfg.cond_in_channels()
        {
            return Err(VtoError::RejectedInput(format!(
                "conditioning tensor {:?} does not match model {}x{}x{}",
                dim,
                cfg.input_height,
                cfg.input_width,
                cfg.cond_in_channels()
            )));
        }
        Ok(())
    }

    /// Everything in the conditioning path that is independent of (z_t, t).
    pub fn cond_features(&self, cond: &CondBatch<F>) -> Result<CondFeatures<F>> {
        validate_cond(&self.config, cond)?;
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &self.params, |_| false);
        let person = g.constant(cond.person_in.clone().into_dyn());
        let p_pyr = encode_pyramid(&mut g, &bound, &self.config, "e_p", person, None);
        let gtok = garment_tokens(&mut g, &bound, &self.config, cond);
        let stat = static_tokens(&mut g, &bound, &self.config, cond);
        Ok(CondFeatures {
            f_p_bot: g.value(*p_pyr.last().unwrap()).clone(),
            f_p_pyramid: p_pyr.iter().map(|&id| g.value(id).clone()).collect(),
            g_tokens: g.value(gtok).clone(),
            static_tokens: g.value(stat).clone(),
        })
    }

    /// One denoising forward pass with precomputed conditioning features.
    pub fn predict_with_features(
        &self,
        z_t: &Array4<F>,
        t: &[f64],
        feats: &CondFeatures<F>,
    ) -> Result<Array4<F>> {
        validate_zt(&self.config, z_t, t)?;
        let mut g = Graph::new();
        let bound = Bound::bind(&mut g, &self.params, |_| false);
        let z = g.constant(z_t.clone().into_dyn());
        let te = t_embedding(&mut g, &bound, &self.config, t);
        let zt_pyr = encode_pyramid(&mut g, &bound, &self.config, "e_zt", z, Some(te));
        let f_p = g.constant(feats.f_p_bot.clone());
        let gtok = g.constant(feats.g_tokens.clone());
        let stat = g.constant(feats.static_tokens.clone());
        let out = dit_and_decode(&mut g, &bound, &self.config, &zt_pyr, f_p, gtok, stat, te);
        Ok(to_array4(g.value(out)))
    }

    /// Full forward: embed → encoders → DiT → decoder.
    pub fn model_forward(&self, z_t: &Array4<F>, t: &[f64], cond: &CondBatch<F>) -> Result<Array4<F>> {
        let feats = self.cond_features(cond)?;
        self.predict_with_features(z_t, t, &feats)
    }

    /// Sampler-facing view with per-conditioning feature caching and an
    /// optional finetuned person-feature override.
    pub fn sampler(&self) -> CachedUDiT<'_, F> {
        CachedUDiT {
            model: self,
            fp_override: None,
            cache: RefCell::new(HashMap::new()),
        }
    }
}

fn verify_params<F: Scalar>(cfg: &UDiTConfig, params: &ParamSet<F>) -> Result<()> {
    let expected = param_shapes(cfg);
    let mut offenders = Vec::new();
    for (name, shape) in &expected {
        if !params.contains(name) {
            offenders.push(format!("missing {name}"));
        } else if params.get(name).shape() != shape.as_slice() {
            offenders.push(format!(
                "{name}: shape {:?}, expected {:?}",
                params.get(name).shape(),
                shape
            ));
        }
    }
    let expected_names: std::collections::HashSet<&str> =
        expected.iter().map(|(n, _)| n.as_str()).collect();
    for name in params.names() {
        if !expected_names.contains(name) {
            offenders.push(format!("unexpected {name}"));
        }
    }
    if !offenders.is_empty() {
        return Err(VtoError::Load(format!(
            "parameter set does not match config: {}",
            offenders.join("; ")
        )));
    }
    Ok(())
}

/// Progressive-training warm start: the checkpoint of a lower-resolution
/// stage is copied bitwise into a model at the new (doubled) resolution.
pub fn load_from_lower_resolution<F: Scalar>(
    checkpoint: &ParamSet<F>,
    new_config: UDiTConfig,
) -> Result<UDiT<F>> {
    UDiT::from_params(new_config, checkpoint.clone())
}

// -- scalar embedding ---------------------------------------------------------

/// Pre-linear sinusoidal features: [sin(v·w_0..), cos(v·w_0..)] with a
/// geometric frequency ladder w_i = 10000^(-i/half).
pub fn sinusoid_features(value: f64, embed_dim: usize) -> Result<Vec<f64>> {
    if embed_dim % 2 != 0 {
        return Err(VtoError::Config(format!("embed_dim {embed_dim} must be even")));
    }
    let half = embed_dim / 2;
    let mut out = Vec::with_capacity(embed_dim);
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        out.push((value * w).sin());
    }
    for i in 0..half {
        let w = 10000f64.powf(-(i as f64) / half as f64);
        out.push((value * w).cos());
    }
    Ok(out)
}

fn sinusoid_matrix<F: Scalar>(values: &[f64], embed_dim: usize) -> ArrayD<F> {
    let mut m = Array2::<F>::zeros((values.len(), embed_dim));
    for (bi, &v) in values.iter().enumerate() {
        for (j, s) in sinusoid_features(v, embed_dim).unwrap().into_iter().enumerate() {
            m[[bi, j]] = F::cast(s);
        }
    }
    m.into_dyn()
}

/// Learned scalar embedding: sinusoid ladder followed by a linear layer.
pub fn embed_scalar<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    values: &[f64],
    embed_dim: usize,
) -> NodeId {
    let sines = g.constant(sinusoid_matrix::<F>(values, embed_dim));
    let w = bound.id("t_embed.w");
    let b = bound.id("t_embed.b");
    g.linear(sines, w, b)
}

fn t_embedding<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &UDiTConfig,
    t: &[f64],
) -> NodeId {
    embed_scalar(g, bound, t, cfg.embed_dim)
}

// -- graph builders -----------------------------------------------------------

fn conv_in(g: &mut Graph<impl Scalar>, bound: &Bound, prefix: &str, x: NodeId, stride: usize) -> NodeId {
    let w = bound.id(&format!("{prefix}.w"));
    let b = bound.id(&format!("{prefix}.b"));
    let y = g.conv2d(x, w, stride);
    g.add_bias(y, b)
}

/// Shared encoder topology: one stride-1 stem level then stride-2 levels,
/// each conv → norm → (FiLM) → SiLU. Returns the per-level outputs.
fn encode_pyramid<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &UDiTConfig,
    prefix: &str,
    input: NodeId,
    t_embed: Option<NodeId>,
) -> Vec<NodeId> {
    let mut pyr = Vec::with_capacity(cfg.levels());
    let mut x = input;
    for l in 0..cfg.levels() {
        let stride = if l == 0 { 1 } else { 2 };
        let mut h = conv_in(g, bound, &format!("{prefix}.{l}"), x, stride);
        h = g.layer_norm(h, LN_EPS);
        if let Some(te) = t_embed {
            let sw = bound.id(&format!("{prefix}.{l}.film_s.w"));
            let sb = bound.id(&format!("{prefix}.{l}.film_s.b"));
            let tw = bound.id(&format!("{prefix}.{l}.film_t.w"));
            let tb = bound.id(&format!("{prefix}.{l}.film_t.b"));
            let s = g.linear(te, sw, sb);
            let t = g.linear(te, tw, tb);
            h = g.film(h, s, t);
        }
        h = g.silu(h);
        pyr.push(h);
        x = h;
    }
    pyr
}

fn garment_bottleneck<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &UDiTConfig,
    garment_in: NodeId,
    slot: usize,
) -> NodeId {
    let se = bound.id(&format!("e_g.slot_embed.{slot}"));
    let x = g.add_bias(garment_in, se);
    *encode_pyramid(g, bound, cfg, "e_g", x, None).last().unwrap()
}

/// Flattened, projected garment kv tokens of all three slots: [b, 3n, d].
fn garment_tokens<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &UDiTConfig,
    cond: &CondBatch<F>,
) -> NodeId {
    let (ha, wa, c) = (cfg.attn_height(), cfg.attn_width(), cfg.bottleneck_channels());
    let b = cond.person_in.dim().0;
    let mut flat: Option<NodeId> = None;
    for slot in 0..3 {
        let x = g.constant(cond.garment_in[slot].clone().into_dyn());
        let bot = garment_bottleneck(g, bound, cfg, x, slot);
        let tokens = g.reshape(bot, &[b, ha * wa, c]);
        flat = Some(match flat {
            None => tokens,
            Some(prev) => g.concat(prev, tokens, 1),
        });
    }
    let gw = bound.id("dit.gproj.w");
    let gb = bound.id("dit.gproj.b");
    g.linear_nd(flat.unwrap(), gw, gb)
}

/// Attribute-field and person-keypoint kv tokens: [b, num_attributes+1, d].
fn static_tokens<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &UDiTConfig,
    cond: &CondBatch<F>,
) -> NodeId {
    let b = cond.person_in.dim().0;
    let d = cfg.d_model;
    let mut tokens: Option<NodeId> = None;
    for (f, &size) in FIELD_SIZES.iter().enumerate() {
        let mut onehot = Array2::<F>::zeros((b, size + 1));
        for bi in 0..b {
            let idx = cond.attr_idx[[bi, f]] as usize;
            onehot[[bi, idx.min(size)]] = F::one();
        }
        let oh = g.constant(onehot.into_dyn());
        let table = bound.id(&format!("attr.{f}.table"));
        let emb = g.matmul(oh, table);
        let aw = bound.id("dit.attrkv.w");
        let ab = bound.id("dit.attrkv.b");
        let tok = g.linear(emb, aw, ab);
        let tok = g.reshape(tok, &[b, 1, d]);
        tokens = Some(match tokens {
            None => tok,
            Some(prev) => g.concat(prev, tok, 1),
        });
    }
    let kp = g.constant(cond.person_kp.mapv(F::cast).into_dyn());
    let kw = bound.id("dit.kpkv.w");
    let kb = bound.id("dit.kpkv.b");
    let kp_tok = g.linear(kp, kw, kb);
    let kp_tok = g.reshape(kp_tok, &[b, 1, d]);
    g.concat(tokens.unwrap(), kp_tok, 1)
}

/// Multi-head attention: queries from `q_in` [b,n,d], keys/values from
/// `kv_in` [b,m,d]; permutation-invariant over the kv token order.
fn attention<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    prefix: &str,
    q_in: NodeId,
    kv_in: NodeId,
    heads: usize,
) -> NodeId {
    let qs = g.value(q_in).shape().to_vec();
    let ms = g.value(kv_in).shape().to_vec();
    let (b, n, d) = (qs[0], qs[1], qs[2]);
    let m = ms[1];
    let dh = d / heads;

    let mut proj = |name: &str, x: NodeId, len: usize| {
        let w = bound.id(&format!("{prefix}.{name}.w"));
        let bb = bound.id(&format!("{prefix}.{name}.b"));
        let y = g.linear_nd(x, w, bb);
        let y = g.reshape(y, &[b, len, heads, dh]);
        let y = g.permute(y, &[0, 2, 1, 3]);
        g.reshape(y, &[b * heads, len, dh])
    };
    let q = proj("q", q_in, n);
    let k = proj("k", kv_in, m);
    let v = proj("v", kv_in, m);

    let kt = g.permute(k, &[0, 2, 1]);
    let scores = g.bmm(q, kt);
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax_last(scores);
    let out = g.bmm(attn, v);
    let out = g.reshape(out, &[b, heads, n, dh]);
    let out = g.permute(out, &[0, 2, 1, 3]);
    let out = g.reshape(out, &[b, n, d]);
    let ow = bound.id(&format!("{prefix}.o.w"));
    let ob = bound.id(&format!("{prefix}.o.b"));
    g.linear_nd(out, ow, ob)
}

/// DiT stack plus decoder. `extra_static` holds the attribute/keypoint kv
/// tokens; the t token is appended here since it changes per step.
#[allow(clippy::too_many_arguments)]
fn dit_and_decode<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &UDiTConfig,
    zt_pyr: &[NodeId],
    f_p_bot: NodeId,
    g_tokens: NodeId,
    extra_static: NodeId,
    t_embed: NodeId,
) -> NodeId {
    let (ha, wa, d) = (cfg.attn_height(), cfg.attn_width(), cfg.d_model);
    let b = g.value(f_p_bot).shape()[0];
    let n = ha * wa;

    let tw = bound.id("dit.tkv.w");
    let tb = bound.id("dit.tkv.b");
    let t_tok = g.linear(t_embed, tw, tb);
    let t_tok = g.reshape(t_tok, &[b, 1, d]);
    let extra = g.concat(t_tok, extra_static, 1);

    let zt_bot = *zt_pyr.last().unwrap();
    let x = g.concat(zt_bot, f_p_bot, 3);
    let x = conv_in(g, bound, "dit.in_proj", x, 1);
    let mut x = g.reshape(x, &[b, n, d]);

    for i in 0..cfg.num_dit_blocks {
        let sw = bound.id(&format!("dit.{i}.film_s.w"));
        let sb = bound.id(&format!("dit.{i}.film_s.b"));
        let tw2 = bound.id(&format!("dit.{i}.film_t.w"));
        let tb2 = bound.id(&format!("dit.{i}.film_t.b"));
        let s = g.linear(t_embed, sw, sb);
        let tt = g.linear(t_embed, tw2, tb2);

        let h = g.layer_norm(x, LN_EPS);
        let h = g.film(h, s, tt);
        let kv = g.concat(h, extra, 1);
        let a = attention(g, bound, &format!("dit.{i}.sa"), h, kv, cfg.num_heads);
        x = g.add(x, a);

        let h = g.layer_norm(x, LN_EPS);
        let a = attention(g, bound, &format!("dit.{i}.ca"), h, g_tokens, cfg.num_heads);
        x = g.add(x, a);

        let h = g.layer_norm(x, LN_EPS);
        let m0w = bound.id(&format!("dit.{i}.mlp.0.w"));
        let m0b = bound.id(&format!("dit.{i}.mlp.0.b"));
        let m1w = bound.id(&format!("dit.{i}.mlp.1.w"));
        let m1b = bound.id(&format!("dit.{i}.mlp.1.b"));
        let mh = g.linear_nd(h, m0w, m0b);
        let mh = g.silu(mh);
        let mh = g.linear_nd(mh, m1w, m1b);
        x = g.add(x, mh);
    }

    let x = g.reshape(x, &[b, ha, wa, d]);
    let mut h = conv_in(g, bound, "dit.out_proj", x, 1);

    // decoder: mirror of E_zt with skips from the noisy-image encoder only
    for l in (1..cfg.levels()).rev() {
        let c = g.concat(h, zt_pyr[l], 3);
        let y = conv_in(g, bound, &format!("dec.{l}"), c, 1);
        let y = g.layer_norm(y, LN_EPS);
        let y = g.silu(y);
        h = g.upsample2x(y);
    }
    let c = g.concat(h, zt_pyr[0], 3);
    let y = conv_in(g, bound, "dec.0", c, 1);
    let y = g.layer_norm(y, LN_EPS);
    let y = g.silu(y);
    conv_in(g, bound, "dec.final", y, 1)
}

fn validate_zt<F: Scalar>(cfg: &UDiTConfig, z_t: &Array4<F>, t: &[f64]) -> Result<()> {
    let (b, h, w, c) = z_t.dim();
    if h != cfg.input_height || w != cfg.input_width || c != cfg.zt_in_channels() {
        return Err(VtoError::RejectedInput(format!(
            "noisy image {:?} does not match model {}x{}x{}",
            z_t.dim(),
            cfg.input_height,
            cfg.input_width,
            cfg.zt_in_channels()
        )));
    }
    if t.len() != b {
        return Err(VtoError::RejectedInput(format!(
            "{} time values for batch {b}",
            t.len()
        )));
    }
    Ok(())
}

fn validate_cond<F: Scalar>(cfg: &UDiTConfig, cond: &CondBatch<F>) -> Result<()> {
    let dim = cond.person_in.dim();
    if dim.1 != cfg.input_height || dim.2 != cfg.input_width || dim.3 != cfg.cond_in_channels() {
        return Err(VtoError::RejectedInput(format!(
            "conditioning batch {:?} does not match model {}x{}x{}",
            dim,
            cfg.input_height,
            cfg.input_width,
            cfg.cond_in_channels()
        )));
    }
    for f in 0..NUM_ATTRIBUTES {
        for bi in 0..dim.0 {
            let idx = cond.attr_idx[[bi, f]];
            if idx < 0.0 || idx > FIELD_SIZES[f] as f64 {
                return Err(VtoError::RejectedInput(format!(
                    "attribute index {idx} out of range for field {f}"
                )));
            }
        }
    }
    Ok(())
}

/// Builds the complete forward pass inside an existing graph so gradients
/// can flow to every parameter (or, during finetuning, to an injected
/// person-feature bottleneck leaf passed as `fp_override`).
pub fn build_full_forward<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &UDiTConfig,
    z_node: NodeId,
    t: &[f64],
    cond: &CondBatch<F>,
    fp_override: Option<NodeId>,
) -> Result<NodeId> {
    let z_arr = to_array4(g.value(z_node));
    validate_zt(cfg, &z_arr, t)?;
    validate_cond(cfg, cond)?;
    let te = t_embedding(g, bound, cfg, t);
    let zt_pyr = encode_pyramid(g, bound, cfg, "e_zt", z_node, Some(te));
    let f_p = match fp_override {
        Some(id) => {
            let s = g.value(id).shape().to_vec();
            let want = [
                cond.person_in.dim().0,
                cfg.attn_height(),
                cfg.attn_width(),
                cfg.bottleneck_channels(),
            ];
            if s != want {
                return Err(VtoError::RejectedInput(format!(
                    "person feature override {s:?} does not match {want:?}"
                )));
            }
            id
        }
        None => {
            let person = g.constant(cond.person_in.clone().into_dyn());
            *encode_pyramid(g, bound, cfg, "e_p", person, None).last().unwrap()
        }
    };
    let gtok = garment_tokens(g, bound, cfg, cond);
    let stat = static_tokens(g, bound, cfg, cond);
    Ok(dit_and_decode(g, bound, cfg, &zt_pyr, f_p, gtok, stat, te))
}

/// The eps-space training loss as a differentiable graph node. Returns the
/// loss node plus the sampled per-sample times (for diagnostics). Matches
/// `diffusion::training_loss` for the same seed.
pub fn training_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &UDiTConfig,
    x0: &Array4<F>,
    cond: &CondBatch<F>,
    seed: u64,
    schedule: &DiffusionSchedule,
    fp_override: Option<NodeId>,
) -> Result<(NodeId, Vec<f64>)> {
    training_loss_graph_ext(g, bound, cfg, x0, cond, seed, schedule, fp_override, None)
}

/// As `training_loss_graph`, with optional extra channels concatenated to
/// the noisy image (the super-resolution ablation's upsampled low-res
/// conditioning). The loss itself stays in the 3 image channels.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_graph_ext<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    cfg: &UDiTConfig,
    x0: &Array4<F>,
    cond: &CondBatch<F>,
    seed: u64,
    schedule: &DiffusionSchedule,
    fp_override: Option<NodeId>,
    extra: Option<&Array4<F>>,
) -> Result<(NodeId, Vec<f64>)> {
    let (t, eps) = draw_t_eps::<F>(seed, x0.dim(), schedule);
    let z = corrupt(x0, &eps, &t, schedule)?;
    let _v_target = v_from(x0, &eps, &t, schedule)?;
    let mut alphas = Vec::with_capacity(t.len());
    let mut sigmas = Vec::with_capacity(t.len());
    for &ti in &t {
        let (a, s) = schedule.coefficients(ti)?;
        alphas.push(F::cast(a));
        sigmas.push(F::cast(s));
    }
    let z_full = match extra {
        None => None,
        Some(e) => {
            if e.dim().0 != z.dim().0 || e.dim().1 != z.dim().1 || e.dim().2 != z.dim().2 {
                return Err(VtoError::RejectedInput(format!(
                    "extra channels {:?} do not match noisy image {:?}",
                    e.dim(),
                    z.dim()
                )));
            }
            Some(ndarray::concatenate(ndarray::Axis(3), &[z.view(), e.view()]).unwrap())
        }
    };
    let z_node = g.constant(z.into_dyn());
    let zin_node = match z_full {
        Some(zf) => g.constant(zf.into_dyn()),
        None => z_node,
    };
    let v_hat = build_full_forward(g, bound, cfg, zin_node, &t, cond, fp_override)?;
    // eps_hat = sigma z + alpha v_hat; loss in eps-space
    let sig = g.constant(ArrayD::from_shape_vec(IxDyn(&[t.len()]), sigmas).unwrap());
    let alp = g.constant(ArrayD::from_shape_vec(IxDyn(&[t.len()]), alphas).unwrap());
    let zs = g.mul_batch(z_node, sig);
    let va = g.mul_batch(v_hat, alp);
    let eps_hat = g.add(zs, va);
    let eps_node = g.constant(eps.into_dyn());
    let loss = g.mse(eps_hat, eps_node);
    let lv = g.value(loss).first().unwrap().as_f64();
    if !lv.is_finite() {
        return Err(VtoError::Numerical(format!(
            "non-finite training loss at t={t:?}"
        )));
    }
    Ok((loss, t))
}

fn to_array4<F: Scalar>(x: &ArrayD<F>) -> Array4<F> {
    x.clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("rank-4 tensor")
}

impl<F: Scalar> Denoiser<F> for UDiT<F> {
    fn predict_v(&self, z_t: &Array4<F>, t: &[f64], cond: &CondBatch<F>) -> Result<Array4<F>> {
        self.model_forward(z_t, t, cond)
    }
}

/// Denoiser wrapper for sampling: conditioning features are computed once
/// per distinct batch (the ancestral sampler alternates between the
/// conditional and null batch every step). An optional finetuned person
/// bottleneck replaces the encoder output on non-null batches.
pub struct CachedUDiT<'a, F: Scalar> {
    model: &'a UDiT<F>,
    fp_override: Option<ArrayD<F>>,
    cache: RefCell<HashMap<usize, CondFeatures<F>>>,
}

impl<'a, F: Scalar> CachedUDiT<'a, F> {
    pub fn with_person_features(mut self, fp_bot: ArrayD<F>) -> Self {
        self.fp_override = Some(fp_bot);
        self
    }
}

fn is_null_batch<F: Scalar>(cond: &CondBatch<F>) -> bool {
    cond.person_in.iter().all(|&v| v == F::zero())
}

impl<'a, F: Scalar> Denoiser<F> for CachedUDiT<'a, F> {
    fn predict_v(&self, z_t: &Array4<F>, t: &[f64], cond: &CondBatch<F>) -> Result<Array4<F>> {
        let key = cond.person_in.as_ptr() as usize;
        if !self.cache.borrow().contains_key(&key) {
            let mut feats = self.model.cond_features(cond)?;
            if let Some(fp) = &self.fp_override {
                if !is_null_batch(cond) {
                    if fp.shape() != feats.f_p_bot.shape() {
                        return Err(VtoError::RejectedInput(format!(
                            "person feature override {:?} does not match {:?}",
                            fp.shape(),
                            feats.f_p_bot.shape()
                        )));
                    }
                    feats.f_p_bot = fp.clone();
                }
            }
            self.cache.borrow_mut().insert(key, feats);
        }
        let cache = self.cache.borrow();
        self.model.predict_with_features(z_t, t, &cache[&key])
    }
}
