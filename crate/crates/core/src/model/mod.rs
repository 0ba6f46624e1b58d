//! Dual-stream vision-language transformer with cross-modal fusion, a box
//! regression head and optional position-token vocabulary.
//!
//! Parameters live in a [`ParamStore`]; a forward pass binds them to graph
//! leaves through [`VlmModel::forward`] (or [`Forward::new`] when the caller
//! already registered them, e.g. for gradient checks).

mod params;
mod position;
mod vocab;

pub use params::{
    load_checkpoint, parse_checkpoint, render_checkpoint, save_checkpoint, Checkpoint, Param,
    ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use position::{dequantize, encode_position_tokens, position_bins, quantize};
pub use vocab::{Vocab, CLS, MASK, PAD, POS_CLOSE, POS_OPEN, SEP};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synthdata::{PatchGrid, PATCH_CHANNELS};
use crate::tensor::{Graph, Tensor, Var};

/// Smallest predicted box width/height.
pub const MIN_BOX_SIDE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_grid: usize,
    pub patch_channels: usize,
    pub hidden_dim: usize,
    pub proj_dim: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub cross_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_text_len: usize,
    /// Position-bin count when position tokens are enabled.
    pub position_bins: Option<usize>,
    pub image_extent: usize,
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_grid: 4,
            patch_channels: PATCH_CHANNELS,
            hidden_dim: 64,
            proj_dim: 32,
            vision_layers: 2,
            text_layers: 2,
            cross_layers: 2,
            heads: 4,
            mlp_ratio: 4,
            max_text_len: 32,
            position_bins: None,
            image_extent: 256,
            init_temperature: 0.07,
        }
    }
}

impl ModelConfig {
    /// Narrow one-layer configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 16,
            proj_dim: 8,
            vision_layers: 1,
            text_layers: 1,
            cross_layers: 1,
            heads: 2,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    pub fn with_position_tokens(mut self, bins: usize) -> Self {
        self.position_bins = Some(bins);
        self
    }

    pub fn patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        let positive = [
            ("patch_grid", self.patch_grid),
            ("patch_channels", self.patch_channels),
            ("hidden_dim", self.hidden_dim),
            ("proj_dim", self.proj_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("image_extent", self.image_extent),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.max_text_len < 3 {
            return bad("max_text_len must leave room for [CLS], a word and [SEP]".into());
        }
        if matches!(self.position_bins, Some(b) if b < 2) {
            return bad("position_bins must be at least 2".into());
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return bad(format!("init_temperature {} must be positive", self.init_temperature));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct Mlp {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct CrossBlock {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross_attn: Attn,
    ln3: Norm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    vision_cls: ParamId,
    vision_pos: ParamId,
    vision_blocks: Vec<Block>,
    vision_ln: Norm,
    token_embed: ParamId,
    text_pos: ParamId,
    text_blocks: Vec<Block>,
    text_ln: Norm,
    cross_blocks: Vec<CrossBlock>,
    cross_ln: Norm,
    vision_proj: Linear,
    text_proj: Linear,
    log_tau: ParamId,
    itm_head: Linear,
    bbox_hidden: Linear,
    bbox_out: Linear,
    mlm_transform: Linear,
    mlm_ln: Norm,
    mlm_bias: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.store
            .add(name, Tensor::matrix(rows, cols, data).expect("positive dims"))
    }

    fn fill(&mut self, name: String, cols: usize, value: f64) -> ParamId {
        self.store.add(
            name,
            Tensor::matrix(1, cols, vec![value; cols]).expect("positive dims"),
        )
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: Option<f64>) -> Linear {
        let std = std.unwrap_or(1.0 / (fan_in as f64).sqrt());
        Linear {
            w: self.normal(format!("{name}.w"), fan_in, fan_out, std),
            b: self.fill(format!("{name}.b"), fan_out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.fill(format!("{name}.gain"), d, 1.0),
            bias: self.fill(format!("{name}.bias"), d, 0.0),
        }
    }

    fn attn(&mut self, name: &str, d: usize, out_std: f64) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d, None),
            k: self.linear(&format!("{name}.k"), d, d, None),
            v: self.linear(&format!("{name}.v"), d, d, None),
            o: self.linear(&format!("{name}.o"), d, d, Some(out_std)),
        }
    }

    fn mlp(&mut self, name: &str, d: usize, ratio: usize, out_std: f64) -> Mlp {
        Mlp {
            up: self.linear(&format!("{name}.up"), d, d * ratio, None),
            down: self.linear(&format!("{name}.down"), d * ratio, d, Some(out_std)),
        }
    }

    fn block(&mut self, name: &str, c: &ModelConfig, out_std: f64) -> Block {
        let d = c.hidden_dim;
        Block {
            ln1: self.norm(&format!("{name}.ln1"), d),
            attn: self.attn(&format!("{name}.attn"), d, out_std),
            ln2: self.norm(&format!("{name}.ln2"), d),
            mlp: self.mlp(&format!("{name}.mlp"), d, c.mlp_ratio, out_std),
        }
    }

    fn cross_block(&mut self, name: &str, c: &ModelConfig, out_std: f64) -> CrossBlock {
        let d = c.hidden_dim;
        CrossBlock {
            ln1: self.norm(&format!("{name}.ln1"), d),
            self_attn: self.attn(&format!("{name}.self"), d, out_std),
            ln2: self.norm(&format!("{name}.ln2"), d),
            cross_attn: self.attn(&format!("{name}.cross"), d, out_std),
            ln3: self.norm(&format!("{name}.ln3"), d),
            mlp: self.mlp(&format!("{name}.mlp"), d, c.mlp_ratio, out_std),
        }
    }
}

fn build_layout(c: &ModelConfig, vocab_len: usize, seed: u64) -> (Layout, ParamStore) {
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = c.hidden_dim;
    let depth = (c.vision_layers + c.text_layers + c.cross_layers).max(1) as f64;
    let out_std = 1.0 / (d as f64 * 2.0 * depth).sqrt();
    let layout = Layout {
        patch_embed: init.linear("vision.patch", c.patch_channels, d, None),
        vision_cls: init.normal("vision.cls".into(), 1, d, 0.02),
        vision_pos: init.normal("vision.pos".into(), c.patches() + 1, d, 0.02),
        vision_blocks: (0..c.vision_layers)
            .map(|i| init.block(&format!("vision.block{i}"), c, out_std))
            .collect(),
        vision_ln: init.norm("vision.ln", d),
        token_embed: init.normal("text.embed".into(), vocab_len, d, 0.02),
        text_pos: init.normal("text.pos".into(), c.max_text_len, d, 0.02),
        text_blocks: (0..c.text_layers)
            .map(|i| init.block(&format!("text.block{i}"), c, out_std))
            .collect(),
        text_ln: init.norm("text.ln", d),
        cross_blocks: (0..c.cross_layers)
            .map(|i| init.cross_block(&format!("cross.block{i}"), c, out_std))
            .collect(),
        cross_ln: init.norm("cross.ln", d),
        vision_proj: init.linear("proj.vision", d, c.proj_dim, None),
        text_proj: init.linear("proj.text", d, c.proj_dim, None),
        log_tau: init.fill("proj.log_tau".into(), 1, c.init_temperature.ln()),
        itm_head: init.linear("head.itm", d, 2, Some(0.02)),
        bbox_hidden: init.linear("head.bbox.hidden", d, d, None),
        bbox_out: init.linear("head.bbox.out", d, 4, Some(0.02)),
        mlm_transform: init.linear("head.mlm.transform", d, d, None),
        mlm_ln: init.norm("head.mlm.ln", d),
        mlm_bias: init.fill("head.mlm.bias".into(), vocab_len, 0.0),
    };
    (layout, store)
}

#[derive(Clone, Debug)]
pub struct VlmModel {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamStore,
    layout: Layout,
}

impl VlmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(config.position_bins);
        let (layout, params) = build_layout(&config, vocab.len(), seed);
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    /// Parameter count implied by `config`, without initializing values.
    pub fn param_count_for(config: &ModelConfig) -> Result<usize> {
        Ok(Self::new(config.clone(), 0)?.param_count())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.layout.log_tau).data()[0].exp()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        self.vocab.encode(text, self.config.max_text_len)
    }

    pub fn to_checkpoint(&self, config_hash: &str, step: usize) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            config_hash: config_hash.to_string(),
            step,
            params: self.params.clone(),
        }
    }

    /// Rebuilds a model from a checkpoint; names and shapes must match the
    /// layout implied by the stored config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(ck.config.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> = model
            .params
            .iter()
            .map(|p| (p.name.as_str(), p.value.shape()))
            .collect();
        let found: Vec<(&str, &[usize])> = ck
            .params
            .iter()
            .map(|p| (p.name.as_str(), p.value.shape()))
            .collect();
        if expected != found {
            return Err(Error::parse(
                "checkpoint",
                "parameter names or shapes do not match the model configuration",
            ));
        }
        model.params.assign(ck.params.tensors())?;
        Ok(model)
    }

    /// Registers every parameter as a graph leaf.
    pub fn forward(&self, g: &mut Graph, trainable: bool) -> Forward<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect();
        Forward { model: self, vars }
    }

    /// Unit-norm features, fused [CLS] and raw states for one pair.
    pub fn encode_pair(
        &self,
        grid: &PatchGrid,
        tokens: &[usize],
        visibility: Option<&[bool]>,
    ) -> Result<EncodedPair> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, false);
        let vs = f.encode_image(&mut g, grid, visibility)?;
        let ts = f.encode_text(&mut g, tokens)?;
        let image_feat = f.image_feat(&mut g, vs)?;
        let text_feat = f.text_feat(&mut g, ts)?;
        let fused = f.fuse(&mut g, ts, tokens, vs, visibility)?;
        Ok(EncodedPair {
            image_feat: g.value(image_feat).data().to_vec(),
            text_feat: g.value(text_feat).data().to_vec(),
            cross_cls: g.value(fused).row(0).to_vec(),
            vision_states: g.value(vs).clone(),
            text_states: g.value(ts).clone(),
        })
    }

    /// Image-text matching probability for each text against one image.
    pub fn matching_scores(&self, grid: &PatchGrid, texts: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, false);
        let vs = f.encode_image(&mut g, grid, None)?;
        texts
            .iter()
            .map(|tokens| {
                let ts = f.encode_text(&mut g, tokens)?;
                let fused = f.fuse(&mut g, ts, tokens, vs, None)?;
                let logits = f.itm_logits(&mut g, fused)?;
                let l = g.value(logits).data();
                Ok(crate::tensor::sigmoid(l[1] - l[0]))
            })
            .collect()
    }

    pub fn predict_bbox(&self, grid: &PatchGrid, tokens: &[usize]) -> Result<BBox> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, false);
        let vs = f.encode_image(&mut g, grid, None)?;
        let ts = f.encode_text(&mut g, tokens)?;
        let fused = f.fuse(&mut g, ts, tokens, vs, None)?;
        let b = f.predict_bbox(&mut g, fused)?;
        bbox_of(&g, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub image_feat: Vec<f64>,
    pub text_feat: Vec<f64>,
    pub cross_cls: Vec<f64>,
    pub vision_states: Tensor,
    pub text_states: Tensor,
}

/// Reads a 1×4 corner-form box off the graph.
pub fn bbox_of(g: &Graph, v: Var) -> Result<BBox> {
    let d = g.value(v).data();
    if d.len() != 4 {
        return Err(Error::dims("bbox", g.shape(v), &[1, 4]));
    }
    BBox::new(d[0], d[1], d[2], d[3])
}

/// Model parameters bound to graph variables.
pub struct Forward<'m> {
    model: &'m VlmModel,
    vars: Vec<Var>,
}

impl<'m> Forward<'m> {
    /// `vars` must hold one variable per parameter, in store order.
    pub fn new(model: &'m VlmModel, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != model.params.len() {
            return Err(Error::dims("bind parameters", &[model.params.len()], &[vars.len()]));
        }
        Ok(Self { model, vars })
    }

    pub fn model(&self) -> &'m VlmModel {
        self.model
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    fn linear(&self, g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        let y = g.matmul(x, self.p(l.w))?;
        g.add_row(y, self.p(l.b))
    }

    fn norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Result<Var> {
        g.layer_norm(x, self.p(n.gain), self.p(n.bias))
    }

    fn attn(&self, g: &mut Graph, xq: Var, xkv: Var, a: &Attn, mask: Option<&[bool]>) -> Result<Var> {
        let q = self.linear(g, xq, &a.q)?;
        let k = self.linear(g, xkv, &a.k)?;
        let v = self.linear(g, xkv, &a.v)?;
        let h = g.attention(q, k, v, mask, self.model.config.heads)?;
        self.linear(g, h, &a.o)
    }

    fn mlp(&self, g: &mut Graph, x: Var, m: &Mlp) -> Result<Var> {
        let h = self.linear(g, x, &m.up)?;
        let h = g.gelu(h);
        self.linear(g, h, &m.down)
    }

    fn block(&self, g: &mut Graph, x: Var, b: &Block, mask: Option<&[bool]>) -> Result<Var> {
        let h = self.norm(g, x, &b.ln1)?;
        let a = self.attn(g, h, h, &b.attn, mask)?;
        let x = g.add(x, a)?;
        let h = self.norm(g, x, &b.ln2)?;
        let m = self.mlp(g, h, &b.mlp)?;
        g.add(x, m)
    }

    /// Vision states, (G²+1)×d with [CLS] in row 0. `visibility[p]` false
    /// hides patch `p` from all attention; [CLS] is always visible.
    pub fn encode_image(
        &self,
        g: &mut Graph,
        grid: &PatchGrid,
        visibility: Option<&[bool]>,
    ) -> Result<Var> {
        let c = &self.model.config;
        let l = &self.model.layout;
        if grid.side != c.patch_grid || grid.data.len() != c.patches() * c.patch_channels {
            return Err(Error::dims(
                "encode_image",
                &[grid.side, grid.side, grid.data.len() / grid.patches().max(1)],
                &[c.patch_grid, c.patch_grid, c.patch_channels],
            ));
        }
        let key_mask = vision_key_mask(visibility, c.patches())?;
        let patches = g.constant(Tensor::matrix(c.patches(), c.patch_channels, grid.data.clone())?);
        let x = self.linear(g, patches, &l.patch_embed)?;
        let x = g.concat_rows(&[self.p(l.vision_cls), x])?;
        let mut x = g.add(x, self.p(l.vision_pos))?;
        for b in &l.vision_blocks {
            x = self.block(g, x, b, key_mask.as_deref())?;
        }
        self.norm(g, x, &l.vision_ln)
    }

    /// Text states, L×d. [PAD] positions are hidden from attention.
    pub fn encode_text(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let c = &self.model.config;
        let l = &self.model.layout;
        let vocab = &self.model.vocab;
        if tokens.len() > c.max_text_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: c.max_text_len,
            });
        }
        if tokens.first() != Some(&vocab.cls()) {
            return Err(Error::Vocab("token sequence must start with [CLS]".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::Vocab(format!("#{bad}")));
        }
        let mask = pad_mask(vocab, tokens);
        let e = g.embed(tokens, self.p(l.token_embed))?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.gather_rows(self.p(l.text_pos), &positions)?;
        let mut x = g.add(e, pos)?;
        for b in &l.text_blocks {
            x = self.block(g, x, b, mask.as_deref())?;
        }
        self.norm(g, x, &l.text_ln)
    }

    /// Cross-modal states, L×d: text self-attention, then cross-attention
    /// onto the (visible) vision states, per block.
    pub fn fuse(
        &self,
        g: &mut Graph,
        text_states: Var,
        tokens: &[usize],
        vision_states: Var,
        visibility: Option<&[bool]>,
    ) -> Result<Var> {
        let c = &self.model.config;
        let l = &self.model.layout;
        if g.shape(text_states)[0] != tokens.len() {
            return Err(Error::dims("fuse", g.shape(text_states), &[tokens.len()]));
        }
        let text_mask = pad_mask(&self.model.vocab, tokens);
        let key_mask = vision_key_mask(visibility, c.patches())?;
        let mut x = text_states;
        for b in &l.cross_blocks {
            let h = self.norm(g, x, &b.ln1)?;
            let a = self.attn(g, h, h, &b.self_attn, text_mask.as_deref())?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, &b.ln2)?;
            let a = self.attn(g, h, vision_states, &b.cross_attn, key_mask.as_deref())?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, &b.ln3)?;
            let m = self.mlp(g, h, &b.mlp)?;
            x = g.add(x, m)?;
        }
        self.norm(g, x, &l.cross_ln)
    }

    /// Unit-norm projection of the vision [CLS], 1×p.
    pub fn image_feat(&self, g: &mut Graph, vision_states: Var) -> Result<Var> {
        let cls = g.gather_rows(vision_states, &[0])?;
        let p = self.linear(g, cls, &self.model.layout.vision_proj)?;
        g.normalize_rows(p)
    }

    /// Unit-norm projection of the text [CLS], 1×p.
    pub fn text_feat(&self, g: &mut Graph, text_states: Var) -> Result<Var> {
        let cls = g.gather_rows(text_states, &[0])?;
        let p = self.linear(g, cls, &self.model.layout.text_proj)?;
        g.normalize_rows(p)
    }

    /// 1/τ as a 1-element variable.
    pub fn inv_temperature(&self, g: &mut Graph) -> Var {
        let neg = g.scale(self.p(self.model.layout.log_tau), -1.0);
        g.exp(neg)
    }

    /// 1×2 matching logits (class 1 = match) from the fused [CLS].
    pub fn itm_logits(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let cls = g.gather_rows(fused, &[0])?;
        self.linear(g, cls, &self.model.layout.itm_head)
    }

    /// Raw 1×4 box head output before squashing.
    pub fn bbox_raw(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let l = &self.model.layout;
        let cls = g.gather_rows(fused, &[0])?;
        let h = self.linear(g, cls, &l.bbox_hidden)?;
        let h = g.gelu(h);
        self.linear(g, h, &l.bbox_out)
    }

    /// 1×4 corner-form box `(x1, y1, x2, y2)` from the fused [CLS].
    pub fn predict_bbox(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let raw = self.bbox_raw(g, fused)?;
        squash_bbox(g, raw)
    }

    /// Vocabulary logits (k×V) at the given token positions of the fused
    /// states; the output matrix is the transposed token embedding.
    pub fn mlm_logits(&self, g: &mut Graph, fused: Var, positions: &[usize]) -> Result<Var> {
        let l = &self.model.layout;
        let rows = g.gather_rows(fused, positions)?;
        let h = self.linear(g, rows, &l.mlm_transform)?;
        let h = g.gelu(h);
        let h = self.norm(g, h, &l.mlm_ln)?;
        let et = g.transpose(self.p(l.token_embed))?;
        let logits = g.matmul(h, et)?;
        g.add_row(logits, self.p(l.mlm_bias))
    }
}

/// Maps raw head output to a valid corner-form box: logistic squashing to
/// `(cx, cy, w, h)`, sides floored at [`MIN_BOX_SIDE`], corners clipped to
/// the unit square.
pub fn squash_bbox(g: &mut Graph, raw: Var) -> Result<Var> {
    let s = g.sigmoid(raw);
    let center = g.slice_cols(s, 0, 2)?;
    let size = g.slice_cols(s, 2, 2)?;
    let size = g.clamp_min(size, MIN_BOX_SIDE);
    let half = g.scale(size, 0.5);
    let lo = g.sub(center, half)?;
    let lo = g.clamp_min(lo, 0.0);
    let hi = g.add(center, half)?;
    let hi = g.clamp_max(hi, 1.0);
    g.concat_cols(&[lo, hi])
}

fn pad_mask(vocab: &Vocab, tokens: &[usize]) -> Option<Vec<bool>> {
    tokens
        .contains(&vocab.pad())
        .then(|| tokens.iter().map(|&t| t != vocab.pad()).collect())
}

fn vision_key_mask(visibility: Option<&[bool]>, patches: usize) -> Result<Option<Vec<bool>>> {
    let Some(vis) = visibility else {
        return Ok(None);
    };
    if vis.len() != patches {
        return Err(Error::dims("visibility mask", &[vis.len()], &[patches]));
    }
    if !vis.iter().any(|&v| v) {
        return Err(Error::DegenerateMask("every patch is masked".into()));
    }
    let mut m = Vec::with_capacity(patches + 1);
    m.push(true);
    m.extend_from_slice(vis);
    Ok(Some(m))
}
