//! The visually prompted detector.
//!
//! Pipeline per image: patch tokens with fixed sine positions, a small
//! self-attention encoder, bidirectional fusion with the per-class prompt
//! embeddings, top-`N_q` token selection by objectness (max dot product over
//! prompts), and a decoder whose learnable content queries start from boxes
//! centered on the selected tokens. Class logits are cosine similarities to
//! the fused prompts over a temperature.
//!
//! Prompts are encoded from boxes on reference scenes: a learnable query plus
//! the box's sine encoding cross-attends over the reference image's patch
//! tokens, restricted to tokens whose centers lie inside the box. The
//! prompts drawn for one class attend to each other, are projected, and are
//! mean-pooled into the class embedding.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::nn::{attention, ffn, layer_norm, linear, sine_embed, sine_embed_cols, Graph, Init, ParamStore};
use crate::synthdata::{PromptEntry, PromptPool, Scene, Split, NUM_CLASSES};
use crate::tensor::Tensor;


/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub encoder_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub cls_temperature: f64,
    pub contrastive_temperature: f64,
    /// Initial proposal side as a fraction of the image.
    pub init_box_size: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            dim: 64,
            heads: 4,
            ffn_hidden: 128,
            encoder_layers: 2,
            fusion_layers: 2,
            decoder_layers: 3,
            num_queries: 16,
            num_classes: NUM_CLASSES,
            cls_temperature: 0.07,
            contrastive_temperature: 0.07,
            init_box_size: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!("image_size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.dim < 2 || !self.dim.is_multiple_of(2) || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} must be even and divisible by heads {}", self.dim, self.heads));
        }
        if self.decoder_layers == 0 {
            return bad("decoder_layers must be at least 1".into());
        }
        if self.num_queries == 0 || self.num_queries > self.num_tokens() {
            return bad(format!("num_queries {} must be in 1..={}", self.num_queries, self.num_tokens()));
        }
        if !(self.cls_temperature > 0.0 && self.contrastive_temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(self.init_box_size > 0.0 && self.init_box_size < 1.0) {
            return bad("init_box_size must be in (0,1)".into());
        }
        Ok(())
    }

    /// Normalized `(x, y)` centers of the token grid, row-major.
    pub fn token_centers(&self) -> Vec<(f64, f64)> {
        let g = self.grid();
        (0..g * g).map(|i| (((i % g) as f64 + 0.5) / g as f64, ((i / g) as f64 + 0.5) / g as f64)).collect()
    }

    /// Fixed `[N_I, C]` positional encoding: half the features for x, half for y.
    pub fn token_positions(&self) -> Tensor {
        let half = self.dim / 2;
        let mut data = Vec::with_capacity(self.num_tokens() * self.dim);
        for (x, y) in self.token_centers() {
            data.extend(sine_embed(&[x], half));
            data.extend(sine_embed(&[y], half));
        }
        Tensor::new(self.num_tokens(), self.dim, data)
    }
}

/// Sine encoding of box coordinates, `dim` features per coordinate.
fn box_encoding(boxes: &[Box], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(boxes.len() * 4 * dim);
    for b in boxes {
        data.extend(sine_embed(&b.as_array(), dim));
    }
    Tensor::new(boxes.len(), 4 * dim, data)
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let h = config.ffn_hidden;
        let mut init = Init::new(rng);
        init.linear("patch", config.patch * config.patch * 3, c);
        for e in 0..config.encoder_layers {
            let p = format!("encoder.{e}");
            init.layer_norm(&format!("{p}.norm1"), c);
            init.attention(&format!("{p}.attn"), c);
            init.layer_norm(&format!("{p}.norm2"), c);
            init.ffn(&format!("{p}.ffn"), c, h);
        }

        init.linear("prompt.box_proj", 4 * c, c);
        init.uniform("prompt.query", 1, c, 0.1);
        init.layer_norm("prompt.norm_q", c);
        init.layer_norm("prompt.norm_kv", c);
        init.attention("prompt.cross", c);
        init.layer_norm("prompt.norm_sa", c);
        init.attention("prompt.self", c);
        init.layer_norm("prompt.norm_ffn", c);
        init.ffn("prompt.ffn", c, h);
        init.linear("prompt.align", c, c);

        for f in 0..config.fusion_layers {
            let p = format!("fusion.{f}");
            for n in ["norm_img_sa", "norm_img_ca", "norm_pr_ca", "norm_img_ffn", "norm_pr_ffn"] {
                init.layer_norm(&format!("{p}.{n}"), c);
            }
            init.attention(&format!("{p}.img_self"), c);
            init.attention(&format!("{p}.img_cross"), c);
            init.attention(&format!("{p}.pr_cross"), c);
            init.ffn(&format!("{p}.img_ffn"), c, h);
            init.ffn(&format!("{p}.pr_ffn"), c, h);
        }

        init.layer_norm("select.norm", c);
        let s = logit(config.init_box_size) as f32;
        init.constant("select.size", 1, 2, s);

        init.uniform("decoder.content", config.num_queries, c, 0.1);
        init.linear("decoder.ref_pos", 4 * c, c);
        init.linear("decoder.token_pos", c, c);
        init.layer_norm("decoder.memory_norm", c);
        for l in 0..config.decoder_layers {
            let p = format!("decoder.{l}");
            for n in ["norm_sa", "norm_img", "norm_pr", "norm_ffn", "norm_out"] {
                init.layer_norm(&format!("{p}.{n}"), c);
            }
            init.attention(&format!("{p}.self"), c);
            init.attention(&format!("{p}.img_cross"), c);
            init.attention(&format!("{p}.pr_cross"), c);
            init.ffn(&format!("{p}.ffn"), c, h);
            init.linear(&format!("{p}.box.fc1"), c, c);
            init.zero_linear(&format!("{p}.box.fc2"), c, 4);
        }

        init.uniform("anchors", config.num_classes, c, 1.0);
        Ok(Self { params: init.finish(), config })
    }

    /// Checks that `params` has exactly the layout `config` implies.
    pub fn check_layout(config: &ModelConfig, params: &ParamStore) -> Result<()> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let expected = Model::new(config.clone(), &mut rng)?.params;
        if expected.len() != params.len() {
            return Err(Error::Shape(format!("{} parameters, expected {}", params.len(), expected.len())));
        }
        for (name, t) in expected.iter() {
            let got = params.get(name).ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Shape(format!("parameter {name} has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        Ok(())
    }
}

/// Per-class prompt embeddings (unit rows), values only.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub class_ids: Vec<usize>,
    pub embeddings: Tensor,
}

fn check_scene(cfg: &ModelConfig, scene: &Scene) -> Result<()> {
    if scene.size != cfg.image_size || scene.pixels.len() != cfg.image_size * cfg.image_size * 3 {
        return Err(Error::Shape(format!(
            "scene is {}x{} with {} bytes, model expects {}x{}x3",
            scene.size,
            scene.size,
            scene.pixels.len(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    Ok(())
}

/// Patch tokens plus positions, before any attention.
fn stem(g: &mut Graph<'_>, cfg: &ModelConfig, scene: &Scene) -> Result<Var> {
    check_scene(cfg, scene)?;
    let patches = g.constant(scene.patches(cfg.patch));
    let x = linear(g, "patch", patches);
    let pos = g.constant(cfg.token_positions());
    Ok(g.add(x, pos))
}

fn transformer_block(g: &mut Graph<'_>, cfg: &ModelConfig, prefix: &str, x: Var) -> Var {
    let h = layer_norm(g, &format!("{prefix}.norm1"), x);
    let a = attention(g, &format!("{prefix}.attn"), cfg.heads, h, h, h, None);
    let x = g.add(x, a);
    let h = layer_norm(g, &format!("{prefix}.norm2"), x);
    let f = ffn(g, &format!("{prefix}.ffn"), h);
    g.add(x, f)
}

/// Image tokens `I`, `[N_I, C]`.
pub fn encode_image(g: &mut Graph<'_>, cfg: &ModelConfig, scene: &Scene) -> Result<Var> {
    let mut x = stem(g, cfg, scene)?;
    for e in 0..cfg.encoder_layers {
        x = transformer_block(g, cfg, &format!("encoder.{e}"), x);
    }
    Ok(x)
}

/// A prompt box on its reference scene.
#[derive(Debug, Clone, Copy)]
pub struct PromptRef<'a> {
    pub scene: &'a Scene,
    pub bbox: Box,
}

/// Encodes one group of prompts (the draws for one class) into `[M, C]`
/// unit-norm rows.
pub fn encode_prompts(g: &mut Graph<'_>, cfg: &ModelConfig, prompts: &[PromptRef<'_>]) -> Result<Var> {
    if prompts.is_empty() {
        return Err(Error::Shape("empty prompt group".into()));
    }
    let centers = cfg.token_centers();
    let content = g.p("prompt.query");
    let mut rows = Vec::with_capacity(prompts.len());
    for pr in prompts {
        // only tokens centered inside the box are encoded, with the image
        // encoder's blocks, so nothing outside the box can leak in
        let inside: Vec<usize> = (0..centers.len()).filter(|&t| pr.bbox.contains(centers[t].0, centers[t].1)).collect();
        if inside.is_empty() {
            return Err(Error::PromptBelowResolution(pr.bbox));
        }
        let tokens = stem(g, cfg, pr.scene)?;
        let mut x = g.gather_rows(tokens, &inside);
        for e in 0..cfg.encoder_layers {
            x = transformer_block(g, cfg, &format!("encoder.{e}"), x);
        }
        let kv = layer_norm(g, "prompt.norm_kv", x);
        let enc = g.constant(box_encoding(&[pr.bbox], cfg.dim));
        let q_pos = linear(g, "prompt.box_proj", enc);
        let q = g.add(q_pos, content);
        let qn = layer_norm(g, "prompt.norm_q", q);
        let a = attention(g, "prompt.cross", cfg.heads, qn, kv, kv, None);
        rows.push(g.add(q, a));
    }
    let mut q = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };

    let h = layer_norm(g, "prompt.norm_sa", q);
    let a = attention(g, "prompt.self", cfg.heads, h, h, h, None);
    q = g.add(q, a);
    let h = layer_norm(g, "prompt.norm_ffn", q);
    let f = ffn(g, "prompt.ffn", h);
    q = g.add(q, f);
    let v = linear(g, "prompt.align", q);
    Ok(g.l2_normalize_rows(v))
}

/// Mean-pools each group's rows and renormalizes: `[K_present, C]`.
pub fn pool_groups(g: &mut Graph<'_>, groups: &[Var]) -> Var {
    let pooled: Vec<Var> = groups
        .iter()
        .map(|&v| {
            let m = g.value(v).rows();
            if m == 1 {
                v
            } else {
                let s = g.col_sum(v);
                g.scale(s, 1.0 / m as f32)
            }
        })
        .collect();
    let all = if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled) };
    g.l2_normalize_rows(all)
}

/// Draws `m` pool entries per requested class: without replacement when the
/// pool is large enough, with replacement otherwise.
pub fn sample_prompt_entries(
    pool: &PromptPool,
    classes: &[usize],
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<PromptEntry>>> {
    if m == 0 {
        return Err(Error::Config("prompts per class must be at least 1".into()));
    }
    classes
        .iter()
        .map(|&c| {
            let entries = pool.by_class.get(c).filter(|e| !e.is_empty()).ok_or(Error::ClassNotInPool(c))?;
            Ok(if entries.len() >= m {
                index::sample(rng, entries.len(), m).into_iter().map(|i| entries[i]).collect()
            } else {
                (0..m).map(|_| entries[rng.gen_range(0..entries.len())]).collect()
            })
        })
        .collect()
}

/// Resolves sampled entries to scenes of the pool split.
pub fn resolve<'a>(pool_split: &'a Split, groups: &[Vec<PromptEntry>]) -> Result<Vec<Vec<PromptRef<'a>>>> {
    groups
        .iter()
        .map(|group| {
            group
                .iter()
                .map(|e| {
                    let scene = pool_split
                        .scene(e.scene_id)
                        .ok_or_else(|| Error::Schema(format!("prompt scene {} not in {}", e.scene_id, pool_split.name.as_str())))?;
                    Ok(PromptRef { scene, bbox: e.bbox })
                })
                .collect()
        })
        .collect()
}

/// Encodes and pools every group.
pub fn encode_prompt_set(g: &mut Graph<'_>, cfg: &ModelConfig, groups: &[Vec<PromptRef<'_>>]) -> Result<Var> {
    let encoded = groups.iter().map(|grp| encode_prompts(g, cfg, grp)).collect::<Result<Vec<_>>>()?;
    Ok(pool_groups(g, &encoded))
}

/// Bidirectional fusion; returns refined `(I', v')`.
pub fn fuse(g: &mut Graph<'_>, cfg: &ModelConfig, image: Var, prompts: Var) -> (Var, Var) {
    let (mut img, mut pr) = (image, prompts);
    for f in 0..cfg.fusion_layers {
        let p = format!("fusion.{f}");
        let h = layer_norm(g, &format!("{p}.norm_img_sa"), img);
        let a = attention(g, &format!("{p}.img_self"), cfg.heads, h, h, h, None);
        img = g.add(img, a);

        let hi = layer_norm(g, &format!("{p}.norm_img_ca"), img);
        let hp = layer_norm(g, &format!("{p}.norm_pr_ca"), pr);
        let to_prompts = attention(g, &format!("{p}.img_cross"), cfg.heads, hi, hp, hp, None);
        let to_image = attention(g, &format!("{p}.pr_cross"), cfg.heads, hp, hi, hi, None);
        img = g.add(img, to_prompts);
        pr = g.add(pr, to_image);

        let h = layer_norm(g, &format!("{p}.norm_img_ffn"), img);
        let fi = ffn(g, &format!("{p}.img_ffn"), h);
        img = g.add(img, fi);
        let h = layer_norm(g, &format!("{p}.norm_pr_ffn"), pr);
        let fp = ffn(g, &format!("{p}.pr_ffn"), h);
        pr = g.add(pr, fp);
    }
    (img, pr)
}

/// Per-token objectness `[N_I, 1]`: max over prompts of the dot product
/// of unit-normalized token and prompt features.
pub fn objectness(g: &mut Graph<'_>, image: Var, prompts: Var) -> Var {
    objectness_with(g, image, prompts, None).0
}

/// [`objectness`] with the winning prompt per token optionally fixed;
/// returns the scores and the winners used.
pub fn objectness_with(g: &mut Graph<'_>, image: Var, prompts: Var, winners: Option<&[usize]>) -> (Var, Vec<usize>) {
    let n = layer_norm(g, "select.norm", image);
    let n = g.l2_normalize_rows(n);
    let p = g.l2_normalize_rows(prompts);
    let s = g.matmul_nt(n, p);
    let winners = match winners {
        Some(w) => w.to_vec(),
        None => g.row_argmax(s),
    };
    (g.pick_cols(s, &winners), winners)
}

/// Indices of the `n_q` highest scores, best first; ties go to the lower
/// index.
pub fn select_queries(scores: &[f32], n_q: usize) -> Result<Vec<usize>> {
    if n_q > scores.len() {
        return Err(Error::Config(format!("cannot select {n_q} of {} tokens", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n_q);
    Ok(idx)
}

/// Cosine-similarity class logits `[N_q, K_present]` over a temperature.
pub fn classify(g: &mut Graph<'_>, states: Var, prompts: Var, temperature: f64) -> Var {
    let q = g.l2_normalize_rows(states);
    let p = g.l2_normalize_rows(prompts);
    let s = g.matmul_nt(q, p);
    g.scale(s, (1.0 / temperature) as f32)
}

/// One decoder layer's predictions.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub logits: Var,
    /// `[N_q, 4]` center-format boxes in `(0,1)`.
    pub boxes: Var,
}

/// Everything the losses and the reward need from one image.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub layers: Vec<LayerOutput>,
    /// Selected token indices, best first.
    pub indices: Vec<usize>,
    /// Per image token, the prompt whose similarity is its objectness.
    pub winners: Vec<usize>,
    /// Selected objectness scores as a `[1, N_q]` row.
    pub objectness: Var,
    /// Proposal boxes of the selected tokens.
    pub proposals: Var,
    /// Fused prompts `v'`.
    pub prompts: Var,
}

/// Runs the decoder from a selection.
pub fn decode(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    indices: &[usize],
    image: Var,
    prompts: Var,
) -> (Var, Vec<LayerOutput>) {
    let centers = cfg.token_centers();
    let mut center_logits = Vec::with_capacity(indices.len() * 2);
    for &i in indices {
        center_logits.push(logit(centers[i].0) as f32);
        center_logits.push(logit(centers[i].1) as f32);
    }
    let center_logits = g.constant(Tensor::new(indices.len(), 2, center_logits));
    let size = g.p("select.size");
    let ones = g.constant(Tensor::full(indices.len(), 1, 1.0));
    let size = g.matmul(ones, size);
    let mut ref_logits = g.concat_cols(&[center_logits, size]);
    let proposals = g.sigmoid(ref_logits);

    let memory = layer_norm(g, "decoder.memory_norm", image);
    let pos = g.constant(cfg.token_positions());
    let memory_keys = g.add(memory, pos);
    // the selected tokens' own features are part of each query's position
    let selected = g.gather_rows(memory, indices);
    let token_pos = linear(g, "decoder.token_pos", selected);
    let mut q = g.p("decoder.content");
    let mut layers = Vec::with_capacity(cfg.decoder_layers);
    let mut boxes_now = proposals;
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.{l}");
        // the proposal's encoding is differentiable (through the size
        // logits); later reference boxes are detached like their logits
        let src = if l == 0 { boxes_now } else { g.detach(boxes_now) };
        let enc = sine_embed_cols(g, src, cfg.dim);
        let qpos = linear(g, "decoder.ref_pos", enc);
        let qpos = g.add(qpos, token_pos);

        let h = layer_norm(g, &format!("{p}.norm_sa"), q);
        let hk = g.add(h, qpos);
        let a = attention(g, &format!("{p}.self"), cfg.heads, hk, hk, h, None);
        q = g.add(q, a);

        let h = layer_norm(g, &format!("{p}.norm_img"), q);
        let hq = g.add(h, qpos);
        let a = attention(g, &format!("{p}.img_cross"), cfg.heads, hq, memory_keys, memory, None);
        q = g.add(q, a);

        let h = layer_norm(g, &format!("{p}.norm_pr"), q);
        let a = attention(g, &format!("{p}.pr_cross"), cfg.heads, h, prompts, prompts, None);
        q = g.add(q, a);

        let h = layer_norm(g, &format!("{p}.norm_ffn"), q);
        let f = ffn(g, &format!("{p}.ffn"), h);
        q = g.add(q, f);

        let out = layer_norm(g, &format!("{p}.norm_out"), q);
        let logits = classify(g, out, prompts, cfg.cls_temperature);
        let h = linear(g, &format!("{p}.box.fc1"), out);
        let h = g.gelu(h);
        let delta = linear(g, &format!("{p}.box.fc2"), h);
        let refined = g.add(ref_logits, delta);
        let boxes = g.sigmoid(refined);
        layers.push(LayerOutput { logits, boxes });

        // later layers refine from this layer's box without back-propagating into it
        let vals = g.value(refined).clone();
        ref_logits = g.constant(vals);
        boxes_now = boxes;
    }
    (proposals, layers)
}

/// Fused features and per-token objectness for one image.
pub fn encode_and_fuse(g: &mut Graph<'_>, cfg: &ModelConfig, scene: &Scene, prompts: Var) -> Result<(Var, Var, Var)> {
    let image = encode_image(g, cfg, scene)?;
    let (img, pr) = fuse(g, cfg, image, prompts);
    let scores = objectness(g, img, pr);
    Ok((img, pr, scores))
}

/// The discrete choices of a forward pass: selected tokens and the winning
/// prompt of every token. Fixing them makes the loss smooth in the
/// parameters.
#[derive(Debug, Clone, Copy)]
pub struct Fixed<'a> {
    pub indices: &'a [usize],
    pub winners: &'a [usize],
}

/// Full forward pass for one image given pooled prompts `[K_present, C]`.
pub fn forward(g: &mut Graph<'_>, cfg: &ModelConfig, scene: &Scene, prompts: Var) -> Result<ForwardOutput> {
    forward_at(g, cfg, scene, prompts, None)
}

/// [`forward`] with its discrete choices optionally fixed.
pub fn forward_at(g: &mut Graph<'_>, cfg: &ModelConfig, scene: &Scene, prompts: Var, fixed: Option<Fixed<'_>>) -> Result<ForwardOutput> {
    if let Some(f) = fixed {
        let n = cfg.num_tokens();
        let k = g.value(prompts).rows();
        if f.indices.len() != cfg.num_queries || f.indices.iter().any(|&i| i >= n) || f.winners.len() != n || f.winners.iter().any(|&w| w >= k) {
            return Err(Error::Shape("fixed selection does not fit the model".into()));
        }
    }
    let image = encode_image(g, cfg, scene)?;
    let (img, pr) = fuse(g, cfg, image, prompts);
    let (scores, winners) = objectness_with(g, img, pr, fixed.map(|f| f.winners));
    let indices = match fixed {
        Some(f) => f.indices.to_vec(),
        None => select_queries(g.value(scores).data(), cfg.num_queries)?,
    };
    let selected = g.gather_rows(scores, &indices);
    let objectness = g.transpose(selected);
    let (proposals, layers) = decode(g, cfg, &indices, img, pr);
    Ok(ForwardOutput { layers, indices, winners, objectness, proposals, prompts: pr })
}

/// Selected-token objectness `[1, N_q]` at externally chosen indices (used
/// for the frozen reference model).
pub fn objectness_at(g: &mut Graph<'_>, cfg: &ModelConfig, scene: &Scene, prompts: Var, indices: &[usize]) -> Result<Var> {
    let (_, _, scores) = encode_and_fuse(g, cfg, scene, prompts)?;
    let selected = g.gather_rows(scores, indices);
    Ok(g.transpose(selected))
}

/// Final-layer predictions as plain values.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub class_ids: Vec<usize>,
    /// `[N_q, K_present]` logits.
    pub logits: Tensor,
    pub boxes: Vec<Box>,
    pub objectness: Vec<f32>,
    pub indices: Vec<usize>,
}

impl Model {
    /// Encodes a prompt set without gradients.
    pub fn prompt_set(&self, class_ids: &[usize], groups: &[Vec<PromptRef<'_>>]) -> Result<PromptSet> {
        let mut g = Graph::frozen(&self.params);
        let v = encode_prompt_set(&mut g, &self.config, groups)?;
        Ok(PromptSet { class_ids: class_ids.to_vec(), embeddings: g.value(v).clone() })
    }

    /// Samples `m` prompts per class from `pool` and encodes them.
    pub fn sample_prompts(
        &self,
        pool: &PromptPool,
        pool_split: &Split,
        classes: &[usize],
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PromptSet> {
        let entries = sample_prompt_entries(pool, classes, m, rng)?;
        let refs = resolve(pool_split, &entries)?;
        self.prompt_set(classes, &refs)
    }

    pub fn predict(&self, scene: &Scene, prompts: &PromptSet) -> Result<Prediction> {
        let mut g = Graph::frozen(&self.params);
        let p = g.constant(prompts.embeddings.clone());
        let out = forward(&mut g, &self.config, scene, p)?;
        let last = out.layers.last().expect("at least one decoder layer");
        Ok(Prediction {
            class_ids: prompts.class_ids.clone(),
            logits: g.value(last.logits).clone(),
            boxes: boxes_of(g.value(last.boxes)),
            objectness: g.value(out.objectness).data().to_vec(),
            indices: out.indices,
        })
    }
}

/// Converts a `[N, 4]` box tensor to boxes.
pub fn boxes_of(t: &Tensor) -> Vec<Box> {
    t.data()
        .chunks(4)
        .map(|b| Box::from_unit(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_scene, DatasetSpec, Domain};
    use rand::SeedableRng;

    fn model() -> Model {
        Model::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn scene(seed: u64) -> Scene {
        gen_scene(seed, seed, &DatasetSpec::default(), Domain::In)
    }

    fn prompts_for(m: &Model, refs: &[(&Scene, Box)]) -> Tensor {
        let mut g = Graph::frozen(&m.params);
        let group: Vec<PromptRef> = refs.iter().map(|(s, b)| PromptRef { scene: s, bbox: *b }).collect();
        let v = encode_prompts(&mut g, &m.config, &group).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn shapes_and_determinism() {
        let m = model();
        let s = scene(3);
        let mut g = Graph::frozen(&m.params);
        let i = encode_image(&mut g, &m.config, &s).unwrap();
        assert_eq!(g.value(i).shape(), (64, 64));
        let mut g2 = Graph::frozen(&m.params);
        let i2 = encode_image(&mut g2, &m.config, &s).unwrap();
        assert_eq!(g.value(i), g2.value(i2));

        let b = s.instances[0].bbox;
        let v = prompts_for(&m, &[(&s, b), (&s, b), (&s, b)]);
        assert_eq!(v.shape(), (3, 64));
        assert_eq!(v.row_slice(0), v.row_slice(1));
    }

    #[test]
    fn channel_permutation_changes_features() {
        let m = model();
        let s = scene(4);
        let mut swapped = s.clone();
        for px in swapped.pixels.chunks_mut(3) {
            px.swap(0, 2);
        }
        let run = |sc: &Scene| {
            let mut g = Graph::frozen(&m.params);
            let v = encode_image(&mut g, &m.config, sc).unwrap();
            g.value(v).clone()
        };
        assert_ne!(run(&s), run(&swapped));
    }

    #[test]
    fn prompt_locality() {
        let m = model();
        let s = scene(5);
        let b = Box::new(0.375, 0.375, 0.25, 0.25).unwrap(); // pixels 16..40
        let base = prompts_for(&m, &[(&s, b)]);
        // token centers inside b are those of patches 2..5 in both axes (pixels 16..40)
        let edit = |from: usize, to: usize| {
            let mut t = s.clone();
            for y in from..to {
                for x in from..to {
                    t.pixels[(y * 64 + x) * 3] ^= 0x55;
                }
            }
            t
        };
        let outside = {
            let mut t = s.clone();
            for y in 48..64 {
                for x in 0..64 {
                    t.pixels[(y * 64 + x) * 3 + 1] ^= 0x33;
                }
            }
            t
        };
        assert_eq!(prompts_for(&m, &[(&outside, b)]), base);
        assert_ne!(prompts_for(&m, &[(&edit(20, 30), b)]), base);
        let tiny = Box::new(0.5, 0.5, 0.02, 0.02).unwrap();
        let mut g = Graph::frozen(&m.params);
        let err = encode_prompts(&mut g, &m.config, &[PromptRef { scene: &s, bbox: tiny }]);
        assert!(matches!(err, Err(Error::PromptBelowResolution(_))));
    }

    #[test]
    fn duplicate_prompts_pool_like_one() {
        let m = model();
        let s = scene(6);
        let b = s.instances[0].bbox;
        let one = m.prompt_set(&[0], &[vec![PromptRef { scene: &s, bbox: b }]]).unwrap();
        let two = m.prompt_set(&[0], &[vec![PromptRef { scene: &s, bbox: b }; 2]]).unwrap();
        for (a, c) in one.embeddings.data().iter().zip(two.embeddings.data()) {
            assert!((a - c).abs() < 1e-6);
        }
        let norm: f32 = one.embeddings.data().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_queries(&[0.1, 0.9, 0.4, 0.7], 2).unwrap(), vec![1, 3]);
        assert_eq!(select_queries(&[0.9, 0.9, 0.5], 2).unwrap(), vec![0, 1]);
        assert!(select_queries(&[0.1], 2).is_err());
        let s = [0.3f32, -1.0, 2.5, 0.7, 0.0, 1.1];
        let mapped: Vec<f32> = s.iter().map(|v| (v * 3.0).exp() + 1.0).collect();
        assert_eq!(select_queries(&s, 3).unwrap(), select_queries(&mapped, 3).unwrap());
    }

    #[test]
    fn classify_is_cosine() {
        let m = model();
        let mut g = Graph::frozen(&m.params);
        let prompts = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]));
        let q = g.constant(Tensor::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 0.5, 0.0]]));
        let l = classify(&mut g, q, prompts, 0.07);
        let v = g.value(l);
        assert!((v.get(0, 0) - 1.0 / 0.07).abs() < 1e-4);
        assert_eq!(v.get(0, 1), 0.0);
        assert!((v.get(1, 1) - 1.0 / 0.07).abs() < 1e-4);
    }

    #[test]
    fn fusion_identity_without_blocks() {
        let cfg = ModelConfig { fusion_layers: 0, ..Default::default() };
        let m = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut g = Graph::frozen(&m.params);
        let a = g.constant(Tensor::full(64, 64, 0.3));
        let b = g.constant(Tensor::full(2, 64, -0.1));
        assert_eq!(fuse(&mut g, &m.config, a, b), (a, b));
    }

    #[test]
    fn forward_contract() {
        let m = model();
        let s = scene(7);
        let classes = [0, 4, 7, 11];
        let groups: Vec<Vec<PromptRef>> = classes.iter().map(|_| vec![PromptRef { scene: &s, bbox: s.instances[0].bbox }]).collect();
        let mut ps = m.prompt_set(&classes, &groups).unwrap();
        // distinct prompts per class
        for r in 0..4 {
            ps.embeddings.set(r, r, ps.embeddings.get(r, r) + 0.5);
        }
        let mut g = Graph::frozen(&m.params);
        let p = g.constant(ps.embeddings.clone());
        let out = forward(&mut g, &m.config, &s, p).unwrap();
        assert_eq!(out.layers.len(), 3);
        for l in &out.layers {
            assert_eq!(g.value(l.logits).shape(), (16, 4));
            assert_eq!(g.value(l.boxes).shape(), (16, 4));
        }
        // zero-initialized offsets keep the proposal boxes
        assert_eq!(g.value(out.layers[0].boxes), g.value(out.proposals));
        let pred = m.predict(&s, &ps).unwrap();
        let again = m.predict(&s, &ps).unwrap();
        assert_eq!(pred.logits, again.logits);
        assert_eq!(pred.indices, out.indices);
    }

    #[test]
    fn prompt_order_equivariance() {
        let m = model();
        let s = scene(8);
        let t = scene(9);
        let g0 = vec![PromptRef { scene: &t, bbox: t.instances[0].bbox }];
        let g1 = vec![PromptRef { scene: &s, bbox: s.instances[0].bbox }];
        let a = m.prompt_set(&[2, 5], &[g0.clone(), g1.clone()]).unwrap();
        let b = m.prompt_set(&[5, 2], &[g1, g0]).unwrap();
        let pa = m.predict(&s, &a).unwrap();
        let pb = m.predict(&s, &b).unwrap();
        assert_eq!(pa.indices, pb.indices);
        for (x, y) in pa.objectness.iter().zip(&pb.objectness) {
            assert!((x - y).abs() < 1e-5);
        }
        for q in 0..16 {
            assert!((pa.logits.get(q, 0) - pb.logits.get(q, 1)).abs() < 1e-4);
            assert!((pa.logits.get(q, 1) - pb.logits.get(q, 0)).abs() < 1e-4);
        }
    }

    #[test]
    fn finite_on_random_scenes() {
        let m = model();
        let classes: Vec<usize> = (0..12).collect();
        let refs_scene = scene(1000);
        let groups: Vec<Vec<PromptRef>> =
            classes.iter().map(|_| vec![PromptRef { scene: &refs_scene, bbox: refs_scene.instances[0].bbox }]).collect();
        let ps = m.prompt_set(&classes, &groups).unwrap();
        for seed in 0..100 {
            let sc = gen_scene(seed * 7 + 1, seed, &DatasetSpec::default(), if seed % 2 == 0 { Domain::In } else { Domain::Ood });
            let p = m.predict(&sc, &ps).unwrap();
            assert!(p.logits.is_finite());
            assert!(p.boxes.iter().all(|b| b.w > 0.0 && b.h > 0.0 && b.w <= 1.0 && b.h <= 1.0));
        }
    }
}
