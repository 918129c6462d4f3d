//! The view/map encoder pair and its prediction heads.
//!
//! Two small pre-norm vision transformers trained from scratch: one over
//! egocentric RGBD images (separate patch embeddings for the RGB and the
//! normalized depth channel, concatenated per token and passed through a
//! non-linear projection), one over top-down semantic maps (single patch
//! embedding). Each prepends a learned class token, adds learned
//! positional embeddings, and pools by taking the final class-token
//! state. Four perceptron heads read the pooled features: a pair head
//! producing the image-side contrastive embedding from `[f_s; f_t]`, a
//! map head producing the map-side embedding, an angle head squashed to
//! `(-pi, pi)` by `pi*tanh`, and a distance head squashed to `(0.5, 5.0)`
//! by a scaled sigmoid. A learnable `log_tau` completes the parameter
//! set.
//!
//! All forward passes are expressed as [`Tape`] graphs so the same code
//! path serves training (with gradients) and inference (ignore the
//! tape). Batches travel as row-blocked token matrices; see the autodiff
//! module for the layout convention.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::mapper::SemanticMap;
use crate::render::RgbdImage;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::world::ByteReader;

/// Depth channel normalization: maps the render range [0.5, 5.0] m into
/// [0, 1] via `(d - 0.5) / 4.5`.
pub const DEPTH_NORM_OFFSET: f64 = 0.5;
pub const DEPTH_NORM_SCALE: f64 = 4.5;
/// Initial temperature; stored as `log_tau = ln(0.07)`.
pub const TAU_INIT: f64 = 0.07;
/// Lower clamp applied to the temperature after optimizer updates.
pub const TAU_MIN: f64 = 0.01;
/// Weight initialization standard deviation.
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_patch: usize,
    pub map_size: usize,
    pub map_patch: usize,
    /// Token embedding width d.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// MLP hidden width inside each transformer block.
    pub mlp: usize,
    /// Contrastive embedding width e.
    pub embed: usize,
    /// Hidden width of the four prediction heads.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            image_patch: 8,
            map_size: 128,
            map_patch: 16,
            dim: 128,
            blocks: 4,
            heads: 4,
            mlp: 512,
            embed: 64,
            head_hidden: 128,
        }
    }
}

impl ModelConfig {
    /// Miniature configuration for finite-difference gradient checks.
    pub fn mini() -> Self {
        ModelConfig {
            image_size: 8,
            image_patch: 4,
            map_size: 16,
            map_patch: 8,
            dim: 16,
            blocks: 2,
            heads: 2,
            mlp: 32,
            embed: 8,
            head_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if self.image_size % self.image_patch != 0 || self.map_size % self.map_patch != 0 {
            return err("patch size must divide the input size".into());
        }
        if self.dim % 2 != 0 {
            return err("embed dim must be even (split across rgb/depth branches)".into());
        }
        if self.dim % self.heads != 0 {
            return err(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if [self.dim, self.blocks, self.heads, self.mlp, self.embed, self.head_hidden]
            .iter()
            .any(|&v| v == 0)
        {
            return err("all architecture sizes must be positive".into());
        }
        Ok(())
    }

    /// Patch tokens per image (class token excluded).
    pub fn image_tokens(&self) -> usize {
        let g = self.image_size / self.image_patch;
        g * g
    }

    pub fn map_tokens(&self) -> usize {
        let g = self.map_size / self.map_patch;
        g * g
    }

    /// Closed-form parameter count; asserted against the registry.
    ///
    /// Per encoder: patch embeddings, class token, positional table for
    /// `T+1` positions, `blocks` transformer blocks (two layer norms,
    /// four d x d attention projections, two MLP layers) and a final
    /// layer norm. Heads: two-layer perceptrons from `2d`/`d` to
    /// `head_hidden` to `embed`/1, plus the temperature scalar.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let h = d / 2;
        let block = 2 * (2 * d) + 4 * (d * d + d) + (d * self.mlp + self.mlp) + (self.mlp * d + d);
        let encoder_core = |tokens: usize| d + (tokens + 1) * d + self.blocks * block + 2 * d;
        let p2 = self.image_patch * self.image_patch;
        let img_embed = (3 * p2 * h + h) + (p2 * h + h) + (d * d + d);
        let mp2 = self.map_patch * self.map_patch;
        let map_embed = 3 * mp2 * d + d;
        let mlp2 = |input: usize, out: usize| {
            input * self.head_hidden + self.head_hidden + self.head_hidden * out + out
        };
        img_embed
            + encoder_core(self.image_tokens())
            + map_embed
            + encoder_core(self.map_tokens())
            + mlp2(2 * d, self.embed)
            + mlp2(d, self.embed)
            + mlp2(2 * d, 1)
            + mlp2(d, 1)
            + 1
    }
}

// --- parameter registry -------------------------------------------------------

/// Named parameter tensors in a fixed registration order. The order is
/// part of the model contract: gradient lists, optimizer state, and
/// checkpoints all index by it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    entries: Vec<(String, Tensor<S>)>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamSet<S> {
    /// Fresh randomly initialized parameters: centered Gaussian weights
    /// (std [`INIT_STD`]), zero biases, unit layer-norm gains,
    /// `ln(TAU_INIT)` temperature.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet { entries: Vec::new(), by_name: HashMap::new() };
        let d = cfg.dim;
        let h = d / 2;
        let p2 = cfg.image_patch * cfg.image_patch;

        p.add_gauss(&mut rng, "img.patch_rgb.w", 3 * p2, h);
        p.add_zeros("img.patch_rgb.b", 1, h);
        p.add_gauss(&mut rng, "img.patch_d.w", p2, h);
        p.add_zeros("img.patch_d.b", 1, h);
        p.add_gauss(&mut rng, "img.proj_v.w", d, d);
        p.add_zeros("img.proj_v.b", 1, d);
        p.add_encoder_core(&mut rng, "img", cfg.image_tokens(), cfg);

        let mp2 = cfg.map_patch * cfg.map_patch;
        p.add_gauss(&mut rng, "map.patch.w", 3 * mp2, d);
        p.add_zeros("map.patch.b", 1, d);
        p.add_encoder_core(&mut rng, "map", cfg.map_tokens(), cfg);

        p.add_mlp2(&mut rng, "head_i", 2 * d, cfg.head_hidden, cfg.embed);
        p.add_mlp2(&mut rng, "head_m", d, cfg.head_hidden, cfg.embed);
        p.add_mlp2(&mut rng, "head_th", 2 * d, cfg.head_hidden, 1);
        p.add_mlp2(&mut rng, "head_d", d, cfg.head_hidden, 1);
        p.add("log_tau", Tensor::scalar(S::of_f64(TAU_INIT.ln())));

        debug_assert_eq!(p.total_scalars(), cfg.param_count());
        Ok(p)
    }

    fn add(&mut self, name: &str, t: Tensor<S>) {
        let prev = self.by_name.insert(name.to_string(), self.entries.len());
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.entries.push((name.to_string(), t));
    }

    fn add_gauss(&mut self, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) {
        let data = (0..rows * cols).map(|_| S::of_f64(gauss(rng) * INIT_STD)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data));
    }

    fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.add(name, Tensor::zeros(rows, cols));
    }

    fn add_encoder_core(&mut self, rng: &mut ChaCha8Rng, pre: &str, tokens: usize, cfg: &ModelConfig) {
        let d = cfg.dim;
        self.add_gauss(rng, &format!("{pre}.cls"), 1, d);
        self.add_gauss(rng, &format!("{pre}.pos"), tokens + 1, d);
        for b in 0..cfg.blocks {
            for part in ["ln1", "ln2"] {
                self.add(&format!("{pre}.blk{b}.{part}.g"), Tensor::filled(1, d, S::one()));
                self.add_zeros(&format!("{pre}.blk{b}.{part}.b"), 1, d);
            }
            for proj in ["wq", "wk", "wv", "wo"] {
                self.add_gauss(rng, &format!("{pre}.blk{b}.{proj}"), d, d);
                self.add_zeros(&format!("{pre}.blk{b}.{}", proj.replace('w', "b")), 1, d);
            }
            self.add_gauss(rng, &format!("{pre}.blk{b}.mlp1.w"), d, cfg.mlp);
            self.add_zeros(&format!("{pre}.blk{b}.mlp1.b"), 1, cfg.mlp);
            self.add_gauss(rng, &format!("{pre}.blk{b}.mlp2.w"), cfg.mlp, d);
            self.add_zeros(&format!("{pre}.blk{b}.mlp2.b"), 1, d);
        }
        self.add(&format!("{pre}.lnf.g"), Tensor::filled(1, d, S::one()));
        self.add_zeros(&format!("{pre}.lnf.b"), 1, d);
    }

    fn add_mlp2(&mut self, rng: &mut ChaCha8Rng, pre: &str, input: usize, hidden: usize, out: usize) {
        self.add_gauss(rng, &format!("{pre}.w1"), input, hidden);
        self.add_zeros(&format!("{pre}.b1"), 1, hidden);
        self.add_gauss(rng, &format!("{pre}.w2"), hidden, out);
        self.add_zeros(&format!("{pre}.b2"), 1, out);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<S> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.entries[i].1
    }

    pub fn index(&self, name: &str) -> usize {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn by_name(&self, name: &str) -> &Tensor<S> {
        self.tensor(self.index(name))
    }

    pub fn by_name_mut(&mut self, name: &str) -> &mut Tensor<S> {
        let i = self.index(name);
        self.tensor_mut(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Zero tensors shaped like every parameter, for gradient buffers.
    pub fn grads_like(&self) -> Vec<Tensor<S>> {
        self.entries.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Convert precision through f64 (used to run gradient checks in f64
    /// on f32-trained parameters and vice versa).
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Current temperature tau = exp(log_tau).
    pub fn tau(&self) -> f64 {
        self.by_name("log_tau").item().as_f64().exp()
    }
}

/// Box-Muller standard normal.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Parameter leaves registered on a tape, index-parallel to a
/// [`ParamSet`]. Bind once per tape, then build any number of graphs.
pub struct Bound {
    ids: Vec<NodeId>,
}

pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &ParamSet<S>) -> Bound {
    let ids = (0..params.len()).map(|i| tape.param(i, params.tensor(i).clone())).collect();
    Bound { ids }
}

impl Bound {
    pub fn get<S: Scalar>(&self, params: &ParamSet<S>, name: &str) -> NodeId {
        self.ids[params.index(name)]
    }
}

// --- patch extraction ----------------------------------------------------------

/// Flatten an image into patch rows: RGB as `(T x 3p^2)`, depth as
/// `(T x p^2)` normalized to [0,1]. Patch raster order, pixel-major then
/// channel within each patch row.
pub fn image_patch_rows<S: Scalar>(img: &RgbdImage, patch: usize) -> (Tensor<S>, Tensor<S>) {
    let grid = img.width / patch;
    let t = grid * grid;
    let mut rgb = Tensor::zeros(t, 3 * patch * patch);
    let mut depth = Tensor::zeros(t, patch * patch);
    let (off, scale) = (S::of_f64(DEPTH_NORM_OFFSET), S::of_f64(1.0 / DEPTH_NORM_SCALE));
    for pr in 0..grid {
        for pc in 0..grid {
            let row = pr * grid + pc;
            let rrow = rgb.row_mut(row);
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (pr * patch + py, pc * patch + px);
                    let base = (y * img.width + x) * 3;
                    let at = (py * patch + px) * 3;
                    for ch in 0..3 {
                        rrow[at + ch] = S::of_f64(img.rgb[base + ch] as f64);
                    }
                }
            }
            let drow = depth.row_mut(row);
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (pr * patch + py, pc * patch + px);
                    let d = S::of_f64(img.depth[y * img.width + x] as f64);
                    drow[py * patch + px] = (d - off) * scale;
                }
            }
        }
    }
    (rgb, depth)
}

/// Flatten a map raster (`size x size x 3` row-major) into patch rows
/// `(T x 3p^2)`, same ordering as [`image_patch_rows`].
pub fn map_patch_rows<S: Scalar>(rgb: &[f32], size: usize, patch: usize) -> Tensor<S> {
    let grid = size / patch;
    let mut out = Tensor::zeros(grid * grid, 3 * patch * patch);
    for pr in 0..grid {
        for pc in 0..grid {
            let row = out.row_mut(pr * grid + pc);
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (pr * patch + py, pc * patch + px);
                    let base = (y * size + x) * 3;
                    let at = (py * patch + px) * 3;
                    for ch in 0..3 {
                        row[at + ch] = S::of_f64(rgb[base + ch] as f64);
                    }
                }
            }
        }
    }
    out
}

// --- encoder graphs -------------------------------------------------------------

/// Shared transformer trunk: prepend the class token to each sequence,
/// add positional embeddings, run pre-norm blocks, final layer norm, and
/// return the class-token rows (`seqs x d`).
fn transformer_trunk<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    prefix: &str,
    tokens: NodeId,
    seqs: usize,
    tokens_per_seq: usize,
    cfg: &ModelConfig,
) -> NodeId {
    let t_full = tokens_per_seq + 1;
    let g = |b: &Bound, name: String| b.get(params, &name);

    // Interleave class tokens: stack [cls x seqs; patch tokens], then
    // permute rows into (cls_0, seq_0, cls_1, seq_1, ...).
    let cls = g(bound, format!("{prefix}.cls"));
    let cls_rows = tape.gather_rows(cls, &vec![0; seqs]);
    let stacked = tape.stack_rows(&[cls_rows, tokens]);
    let mut perm = Vec::with_capacity(seqs * t_full);
    for s in 0..seqs {
        perm.push(s); // class token row for sequence s
        for i in 0..tokens_per_seq {
            perm.push(seqs + s * tokens_per_seq + i);
        }
    }
    let mut x = tape.gather_rows(stacked, &perm);

    // Positional table tiled across sequences.
    let pos = g(bound, format!("{prefix}.pos"));
    let tile: Vec<usize> = (0..seqs * t_full).map(|i| i % t_full).collect();
    let pos_tiled = tape.gather_rows(pos, &tile);
    x = tape.add(x, pos_tiled);

    for b in 0..cfg.blocks {
        let p = |part: &str| format!("{prefix}.blk{b}.{part}");
        let ln1 = {
            let gamma = g(bound, p("ln1.g"));
            let beta = g(bound, p("ln1.b"));
            tape.layer_norm(x, gamma, beta)
        };
        let q = {
            let w = g(bound, p("wq"));
            let b_ = g(bound, p("bq"));
            let h = tape.matmul(ln1, w);
            tape.add_row_bias(h, b_)
        };
        let k = {
            let w = g(bound, p("wk"));
            let b_ = g(bound, p("bk"));
            let h = tape.matmul(ln1, w);
            tape.add_row_bias(h, b_)
        };
        let v = {
            let w = g(bound, p("wv"));
            let b_ = g(bound, p("bv"));
            let h = tape.matmul(ln1, w);
            tape.add_row_bias(h, b_)
        };
        let att = tape.attention(q, k, v, seqs, cfg.heads);
        let proj = {
            let w = g(bound, p("wo"));
            let b_ = g(bound, p("bo"));
            let h = tape.matmul(att, w);
            tape.add_row_bias(h, b_)
        };
        x = tape.add(x, proj);

        let ln2 = {
            let gamma = g(bound, p("ln2.g"));
            let beta = g(bound, p("ln2.b"));
            tape.layer_norm(x, gamma, beta)
        };
        let h1 = {
            let w = g(bound, p("mlp1.w"));
            let b_ = g(bound, p("mlp1.b"));
            let h = tape.matmul(ln2, w);
            tape.add_row_bias(h, b_)
        };
        let act = tape.gelu(h1);
        let h2 = {
            let w = g(bound, p("mlp2.w"));
            let b_ = g(bound, p("mlp2.b"));
            let h = tape.matmul(act, w);
            tape.add_row_bias(h, b_)
        };
        x = tape.add(x, h2);
    }

    let lnf = {
        let gamma = g(bound, format!("{prefix}.lnf.g"));
        let beta = g(bound, format!("{prefix}.lnf.b"));
        tape.layer_norm(x, gamma, beta)
    };
    let cls_idx: Vec<usize> = (0..seqs).map(|s| s * t_full).collect();
    tape.gather_rows(lnf, &cls_idx)
}

/// Encode a batch of RGBD images; returns their pooled features
/// (`imgs.len() x dim`).
pub fn encode_rgbd_batch<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    cfg: &ModelConfig,
    imgs: &[&RgbdImage],
) -> Result<NodeId> {
    if imgs.is_empty() {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    for img in imgs {
        if img.width != cfg.image_size || img.height != cfg.image_size {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} does not match configured {}x{}",
                img.width, img.height, cfg.image_size, cfg.image_size
            )));
        }
    }
    let t = cfg.image_tokens();
    let p2 = cfg.image_patch * cfg.image_patch;
    let mut rgb_all = Tensor::zeros(imgs.len() * t, 3 * p2);
    let mut d_all = Tensor::zeros(imgs.len() * t, p2);
    for (i, img) in imgs.iter().enumerate() {
        let (rgb, depth) = image_patch_rows::<S>(img, cfg.image_patch);
        for r in 0..t {
            rgb_all.row_mut(i * t + r).copy_from_slice(rgb.row(r));
            d_all.row_mut(i * t + r).copy_from_slice(depth.row(r));
        }
    }
    let rgb_in = tape.input(rgb_all);
    let d_in = tape.input(d_all);
    let v_rgb = {
        let w = bound.get(params, "img.patch_rgb.w");
        let b = bound.get(params, "img.patch_rgb.b");
        let h = tape.matmul(rgb_in, w);
        tape.add_row_bias(h, b)
    };
    let v_d = {
        let w = bound.get(params, "img.patch_d.w");
        let b = bound.get(params, "img.patch_d.b");
        let h = tape.matmul(d_in, w);
        tape.add_row_bias(h, b)
    };
    let cat = tape.concat_cols(v_rgb, v_d);
    let proj = {
        let w = bound.get(params, "img.proj_v.w");
        let b = bound.get(params, "img.proj_v.b");
        let h = tape.matmul(cat, w);
        tape.add_row_bias(h, b)
    };
    let tokens = tape.gelu(proj);
    Ok(transformer_trunk(tape, params, bound, "img", tokens, imgs.len(), t, cfg))
}

/// Encode a batch of semantic maps; returns pooled features
/// (`maps.len() x dim`).
pub fn encode_map_batch<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    cfg: &ModelConfig,
    maps: &[&SemanticMap],
) -> Result<NodeId> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("empty map batch".into()));
    }
    for m in maps {
        if m.size != cfg.map_size {
            return Err(Error::InvalidArgument(format!(
                "map size {} does not match configured {}",
                m.size, cfg.map_size
            )));
        }
    }
    let t = cfg.map_tokens();
    let mp2 = cfg.map_patch * cfg.map_patch;
    let mut all = Tensor::zeros(maps.len() * t, 3 * mp2);
    for (i, m) in maps.iter().enumerate() {
        let rows = map_patch_rows::<S>(&m.rgb, m.size, cfg.map_patch);
        for r in 0..t {
            all.row_mut(i * t + r).copy_from_slice(rows.row(r));
        }
    }
    let input = tape.input(all);
    let tokens = {
        let w = bound.get(params, "map.patch.w");
        let b = bound.get(params, "map.patch.b");
        let h = tape.matmul(input, w);
        tape.add_row_bias(h, b)
    };
    Ok(transformer_trunk(tape, params, bound, "map", tokens, maps.len(), t, cfg))
}

// --- head graphs -----------------------------------------------------------------

fn mlp2_graph<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
) -> NodeId {
    let h = {
        let w = bound.get(params, &format!("{prefix}.w1"));
        let b = bound.get(params, &format!("{prefix}.b1"));
        let h = tape.matmul(x, w);
        tape.add_row_bias(h, b)
    };
    let act = tape.gelu(h);
    let w = bound.get(params, &format!("{prefix}.w2"));
    let b = bound.get(params, &format!("{prefix}.b2"));
    let o = tape.matmul(act, w);
    tape.add_row_bias(o, b)
}

/// Image-side contrastive embedding `c_I` from pooled source and target
/// features (`N x d` each). Rows flagged in `no_target` replace the
/// target feature with zeros, so the embedding ignores the target view.
pub fn pair_embed_batch<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    f_s: NodeId,
    f_t: NodeId,
    no_target: &[bool],
) -> NodeId {
    let (rows, cols) = tape.value(f_t).shape();
    assert_eq!(rows, no_target.len(), "mask length must match batch");
    let mut mask = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let v = if no_target[r] { S::zero() } else { S::one() };
        for c in 0..cols {
            mask.set(r, c, v);
        }
    }
    let mask_in = tape.input(mask);
    let f_t_masked = tape.mul_elem(f_t, mask_in);
    let cat = tape.concat_cols(f_s, f_t_masked);
    mlp2_graph(tape, params, bound, "head_i", cat)
}

/// Map-side contrastive embedding `c_M` (`N x embed`).
pub fn map_embed_batch<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    f_m: NodeId,
) -> NodeId {
    mlp2_graph(tape, params, bound, "head_m", f_m)
}

/// Angular offset predictions in (-pi, pi): `pi * tanh(head([f0; f1]))`,
/// one column per batch row.
pub fn predict_angle_batch<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    f0: NodeId,
    f1: NodeId,
) -> NodeId {
    let cat = tape.concat_cols(f0, f1);
    let raw = mlp2_graph(tape, params, bound, "head_th", cat);
    let t = tape.tanh(raw);
    tape.scale(t, std::f64::consts::PI)
}

/// Explorable-distance predictions in (0.5, 5.0):
/// `0.5 + 4.5 * sigmoid(head(f))`.
pub fn predict_distance_batch<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    bound: &Bound,
    f: NodeId,
) -> NodeId {
    let raw = mlp2_graph(tape, params, bound, "head_d", f);
    let s = tape.sigmoid(raw);
    tape.affine(s, DEPTH_NORM_SCALE, DEPTH_NORM_OFFSET)
}

// --- single-input conveniences ----------------------------------------------------

/// Pooled feature of one image (inference path).
pub fn encode_rgbd<S: Scalar>(
    params: &ParamSet<S>,
    cfg: &ModelConfig,
    img: &RgbdImage,
) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let f = encode_rgbd_batch(&mut tape, params, &bound, cfg, &[img])?;
    Ok(tape.value(f).row(0).to_vec())
}

/// Pooled feature of one map (inference path).
pub fn encode_map<S: Scalar>(
    params: &ParamSet<S>,
    cfg: &ModelConfig,
    m: &SemanticMap,
) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let f = encode_map_batch(&mut tape, params, &bound, cfg, &[m])?;
    Ok(tape.value(f).row(0).to_vec())
}

// --- checkpoints ----------------------------------------------------------------
//
// Little-endian container of named f32 tensors:
//   magic  b"E2MC"
//   u16    version (= 1)
//   u64    config hash, u64 global step, u32 epoch
//   u32    tensor count
//   per tensor: u32 name length, name bytes, u8 rank, u32 dims, f32 data
//
// Parameters are stored under their registry names; optimizer moments
// (when present) under "m:<name>" / "v:<name>".

const CKPT_MAGIC: &[u8; 4] = b"E2MC";
const CKPT_VERSION: u16 = 1;

/// A parsed checkpoint container: everything needed to resume training
/// bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub epoch: u32,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ck.config_hash.to_le_bytes());
    buf.extend_from_slice(&ck.step.to_le_bytes());
    buf.extend_from_slice(&ck.epoch.to_le_bytes());
    buf.extend_from_slice(&(ck.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ck.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(2);
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::format(path, "bad magic (not a checkpoint)"));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let config_hash = r.u64()?;
    let step = r.u64()?;
    let epoch = r.u32()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not utf-8"))?;
        let rank = r.u8()?;
        if rank != 2 {
            return Err(Error::format(path, format!("tensor '{name}' has rank {rank}, expected 2")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f32()?);
        }
        tensors.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if r.remaining() != 0 {
        return Err(Error::format(path, "trailing bytes after tensors"));
    }
    Ok(Checkpoint { config_hash, step, epoch, tensors })
}

/// Rebuild a [`ParamSet`] from checkpoint tensors, validating names and
/// shapes against a fresh initialization of the same configuration.
pub fn params_from_checkpoint(ck: &Checkpoint, cfg: &ModelConfig) -> Result<ParamSet<f32>> {
    let mut p = ParamSet::<f32>::init(cfg, 0)?;
    for i in 0..p.len() {
        let name = p.name(i).to_string();
        let t = ck
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint missing tensor '{name}'")))?;
        if t.shape() != p.tensor(i).shape() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                p.tensor(i).shape()
            )));
        }
        *p.tensor_mut(i) = t.clone();
    }
    Ok(p)
}
