//! Frozen promptable-segmentation backbone stub: synthetic image encoder,
//! prompt encoder, a two-way feature-fusing transformer, and a parallel mask
//! decoder. Weights are seeded at construction and never trained; gradients
//! never flow through this module, so everything runs on plain `f64` buffers.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::kernels;
use crate::params::{mix64, normal_init, unit_value, ParamSet};

const WEIGHT_MAGIC: &[u8; 8] = b"PBKB0001";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Grid side length G; image embeddings are G x G cells.
    pub grid_size: usize,
    /// Channel dim D shared by mask tokens and image cells.
    pub dim: usize,
    /// Number of mask tokens M.
    pub mask_tokens: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { grid_size: 64, dim: 256, mask_tokens: 4, seed: 0 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || !self.grid_size.is_power_of_two() {
            return Err(Error::config(format!(
                "grid_size must be a power of two, got {}",
                self.grid_size
            )));
        }
        if self.dim == 0 || self.dim % 2 != 0 {
            return Err(Error::config(format!("dim must be positive and even, got {}", self.dim)));
        }
        if self.mask_tokens == 0 {
            return Err(Error::config("mask_tokens must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// G x G x D image embedding, cell-major: value(y, x, c) at (y*G + x)*D + c.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGridEmbedding {
    pub grid_size: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub frame_index: usize,
}

impl ImageGridEmbedding {
    pub fn new(grid_size: usize, dim: usize, values: Vec<f64>, frame_index: usize) -> Result<Self> {
        if !grid_size.is_power_of_two() {
            return Err(Error::config(format!("grid_size {grid_size} is not a power of two")));
        }
        if values.len() != grid_size * grid_size * dim {
            return Err(Error::shape(format!(
                "embedding has {} values, expected {}",
                values.len(),
                grid_size * grid_size * dim
            )));
        }
        crate::numcore::ensure_finite(&values, "image embedding")?;
        Ok(ImageGridEmbedding { grid_size, dim, values, frame_index })
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Point,
    Box,
    Mask,
}

/// A visual prompt in normalized [0, 1] coordinates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub kind: PromptKind,
    /// 2 values (x, y) for a point, 4 (x1, y1, x2, y2) for a box.
    #[serde(default)]
    pub coords: Vec<f64>,
    /// Binary G x G grid, row-major, for mask prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_grid: Option<Vec<u8>>,
    #[serde(default)]
    pub frame_index: usize,
}

impl PromptSpec {
    pub fn point(x: f64, y: f64) -> Self {
        PromptSpec { kind: PromptKind::Point, coords: vec![x, y], mask_grid: None, frame_index: 0 }
    }

    pub fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        PromptSpec {
            kind: PromptKind::Box,
            coords: vec![x1, y1, x2, y2],
            mask_grid: None,
            frame_index: 0,
        }
    }

    pub fn mask(grid: Vec<u8>) -> Self {
        PromptSpec { kind: PromptKind::Mask, coords: Vec::new(), mask_grid: Some(grid), frame_index: 0 }
    }

    pub fn with_frame(mut self, frame_index: usize) -> Self {
        self.frame_index = frame_index;
        self
    }

    pub fn validate(&self, grid_size: usize) -> Result<()> {
        let in_range = |v: &f64| (0.0..=1.0).contains(v);
        match self.kind {
            PromptKind::Point => {
                if self.coords.len() != 2 || !self.coords.iter().all(in_range) {
                    return Err(Error::input(format!(
                        "point prompt needs 2 coords in [0,1], got {:?}",
                        self.coords
                    )));
                }
            }
            PromptKind::Box => {
                if self.coords.len() != 4 || !self.coords.iter().all(in_range) {
                    return Err(Error::input(format!(
                        "box prompt needs 4 coords in [0,1], got {:?}",
                        self.coords
                    )));
                }
                if self.coords[0] > self.coords[2] || self.coords[1] > self.coords[3] {
                    return Err(Error::input(
                        "box corners must satisfy x1<=x2, y1<=y2".to_string(),
                    ));
                }
            }
            PromptKind::Mask => {
                let grid = self
                    .mask_grid
                    .as_ref()
                    .ok_or_else(|| Error::input("mask prompt without grid".to_string()))?;
                if grid.len() != grid_size * grid_size {
                    return Err(Error::input(format!(
                        "mask grid has {} cells, expected {}",
                        grid.len(),
                        grid_size * grid_size
                    )));
                }
                if grid.iter().any(|&v| v > 1) {
                    return Err(Error::input("mask grid must be binary".to_string()));
                }
            }
        }
        Ok(())
    }
}

/// The frozen learnable mask-token bank.
#[derive(Debug, Clone)]
pub struct MaskTokenSet {
    pub count: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

/// Everything the fuse step hands downstream: enhanced mask tokens, the
/// updated image embedding, and the pre-fusion embedding kept around for the
/// embedding-tap ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedState {
    /// M x D.
    pub enhanced_mask_tokens: Vec<f64>,
    pub mask_token_count: usize,
    pub dim: usize,
    pub updated_image_embedding: ImageGridEmbedding,
    pub pre_ffm_embedding: ImageGridEmbedding,
}

impl FusedState {
    /// FNV-1a over every f64 bit pattern; used to assert purity of the two
    /// parallel decode paths.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |values: &[f64]| {
            for v in values {
                for b in v.to_bits().to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        };
        eat(&self.enhanced_mask_tokens);
        eat(&self.updated_image_embedding.values);
        eat(&self.pre_ffm_embedding.values);
        hash
    }
}

/// Media the backbone can encode: a decoded PNG or a seeded synthetic frame.
pub enum ImageSource<'a> {
    Png(&'a [u8]),
    Synthetic { seed: u64 },
}

pub struct Backbone {
    pub config: BackboneConfig,
    params: ParamSet,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let h = 2 * d;
        let sub = |label: &str| mix64(config.seed ^ fnv(label));
        let std = 1.0 / (d as f64).sqrt();
        let mut params = ParamSet::new();
        let mut mat = |name: &str, rows: usize, cols: usize| {
            params.insert(
                format!("backbone.{name}"),
                vec![rows, cols],
                normal_init(sub(name), std, rows * cols),
                false,
            );
        };

        mat("prompt.fourier", 2, d / 2);
        for kind in ["point", "corner1", "corner2", "mask", "empty_mask"] {
            mat(&format!("prompt.{kind}"), 1, d);
        }
        mat("mask_tokens", config.mask_tokens, d);
        for layer in 0..2 {
            for block in ["self", "t2i", "i2t"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    mat(&format!("fuse.{layer}.{block}.{w}"), d, d);
                }
            }
            mat(&format!("fuse.{layer}.mlp.w1"), d, h);
            mat(&format!("fuse.{layer}.mlp.b1"), 1, h);
            mat(&format!("fuse.{layer}.mlp.w2"), h, d);
            mat(&format!("fuse.{layer}.mlp.b2"), 1, d);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            mat(&format!("memory.{w}"), d, d);
        }
        mat("maskdec.w1", d, d);
        mat("maskdec.b1", 1, d);
        mat("maskdec.w2", d, d);
        mat("maskdec.b2", 1, d);

        Ok(Backbone { config, params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum("backbone")
    }

    pub fn mask_token_set(&self) -> MaskTokenSet {
        let p = self.params.get("backbone.mask_tokens").expect("mask tokens");
        MaskTokenSet { count: self.config.mask_tokens, dim: self.config.dim, values: p.values.clone() }
    }

    fn weight(&self, name: &str) -> &[f64] {
        &self.params.get(&format!("backbone.{name}")).expect("backbone weight").values
    }

    // ── image encoder ────────────────────────────────────────────────

    /// Deterministic embedding of a frame. Synthetic frames are a fixed
    /// pseudo-random function of (seed, y, x, channel).
    pub fn encode_image(&self, source: &ImageSource<'_>, frame_index: usize) -> Result<ImageGridEmbedding> {
        let g = self.config.grid_size;
        let d = self.config.dim;
        let values = match source {
            ImageSource::Synthetic { seed } => {
                let base = mix64(*seed ^ 0x5eed_1a6e_0f00_0d1e);
                let mut values = vec![0.0; g * g * d];
                for y in 0..g {
                    for x in 0..g {
                        for c in 0..d {
                            let pos = ((y as u64) << 42) ^ ((x as u64) << 21) ^ c as u64;
                            values[(y * g + x) * d + c] = 0.5 * unit_value(base ^ mix64(pos));
                        }
                    }
                }
                values
            }
            ImageSource::Png(bytes) => {
                let img = image::load_from_memory(bytes)
                    .map_err(|e| Error::input(format!("undecodable image: {e}")))?
                    .to_rgb8();
                let (w, h) = (img.width() as usize, img.height() as usize);
                let mut values = vec![0.0; g * g * d];
                for gy in 0..g {
                    for gx in 0..g {
                        // Average the pixel block mapped to this cell.
                        let y0 = gy * h / g;
                        let y1 = ((gy + 1) * h / g).max(y0 + 1).min(h);
                        let x0 = gx * w / g;
                        let x1 = ((gx + 1) * w / g).max(x0 + 1).min(w);
                        let mut rgb = [0.0f64; 3];
                        let mut n = 0.0;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let p = img.get_pixel(x as u32, y as u32);
                                for c in 0..3 {
                                    rgb[c] += p[c] as f64 / 255.0;
                                }
                                n += 1.0;
                            }
                        }
                        for c in 0..d {
                            let channel_gain = unit_value(mix64(0xc0_1035 ^ c as u64));
                            values[(gy * g + gx) * d + c] =
                                (2.0 * rgb[c % 3] / n - 1.0) * channel_gain;
                        }
                    }
                }
                values
            }
        };
        ImageGridEmbedding::new(g, d, values, frame_index)
    }

    // ── prompt encoder ───────────────────────────────────────────────

    /// Fourier positional features of a normalized coordinate, dim D.
    fn fourier(&self, x: f64, y: f64) -> Vec<f64> {
        let d = self.config.dim;
        let freq = self.weight("prompt.fourier"); // [2, d/2]
        let half = d / 2;
        let mut out = vec![0.0; d];
        for j in 0..half {
            let phase = 2.0 * std::f64::consts::PI * (x * freq[j] + y * freq[half + j]);
            out[j] = phase.sin();
            out[half + j] = phase.cos();
        }
        out
    }

    /// Point -> 1 token, box -> 2 corner tokens, mask -> 1 pooled token.
    pub fn encode_prompt(&self, prompt: &PromptSpec) -> Result<Vec<f64>> {
        let g = self.config.grid_size;
        let d = self.config.dim;
        prompt.validate(g)?;
        let add = |a: &mut [f64], b: &[f64]| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        };
        match prompt.kind {
            PromptKind::Point => {
                let mut tok = self.fourier(prompt.coords[0], prompt.coords[1]);
                add(&mut tok, self.weight("prompt.point"));
                Ok(tok)
            }
            PromptKind::Box => {
                let mut t1 = self.fourier(prompt.coords[0], prompt.coords[1]);
                add(&mut t1, self.weight("prompt.corner1"));
                let mut t2 = self.fourier(prompt.coords[2], prompt.coords[3]);
                add(&mut t2, self.weight("prompt.corner2"));
                t1.extend_from_slice(&t2);
                Ok(t1)
            }
            PromptKind::Mask => {
                let grid = prompt.mask_grid.as_ref().expect("validated");
                let active: Vec<usize> =
                    grid.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect();
                if active.is_empty() {
                    return Ok(self.weight("prompt.empty_mask").to_vec());
                }
                // Pool Fourier features of active cell centers.
                let mut tok = vec![0.0; d];
                for &cell in &active {
                    let y = cell / g;
                    let x = cell % g;
                    let fx = (x as f64 + 0.5) / g as f64;
                    let fy = (y as f64 + 0.5) / g as f64;
                    add(&mut tok, &self.fourier(fx, fy));
                }
                let inv = 1.0 / active.len() as f64;
                for v in tok.iter_mut() {
                    *v *= inv;
                }
                add(&mut tok, self.weight("prompt.mask"));
                Ok(tok)
            }
        }
    }

    pub fn prompt_token_count(prompt: &PromptSpec) -> usize {
        match prompt.kind {
            PromptKind::Box => 2,
            _ => 1,
        }
    }

    // ── two-way feature fusing ───────────────────────────────────────

    fn attention_block(&self, prefix: &str, q_in: &[f64], kv_in: &[f64], lq: usize, lk: usize) -> Vec<f64> {
        let d = self.config.dim;
        let q = kernels::matmul(q_in, self.weight(&format!("{prefix}.wq")), lq, d, d);
        let k = kernels::matmul(kv_in, self.weight(&format!("{prefix}.wk")), lk, d, d);
        let v = kernels::matmul(kv_in, self.weight(&format!("{prefix}.wv")), lk, d, d);
        let attended = kernels::attention(&q, &k, &v, lq, lk, d, d);
        kernels::matmul(&attended, self.weight(&format!("{prefix}.wo")), lq, d, d)
    }

    fn residual_norm(&self, x: &mut Vec<f64>, delta: &[f64], rows: usize) {
        let d = self.config.dim;
        for (a, b) in x.iter_mut().zip(delta) {
            *a += *b;
        }
        let gamma = vec![1.0; d];
        let beta = vec![0.0; d];
        *x = kernels::layer_norm_rows(x, &gamma, &beta, 1e-5, rows, d);
    }

    /// Two-way transformer over (mask tokens ++ prompt tokens) and the image
    /// grid. `memory`, when present, is the previous frame's updated
    /// embedding; the image cross-attends to it first, which is how history
    /// reaches later frames of a video.
    pub fn fuse(
        &self,
        image: &ImageGridEmbedding,
        prompt_tokens: &[f64],
        memory: Option<&ImageGridEmbedding>,
    ) -> Result<FusedState> {
        let g = self.config.grid_size;
        let d = self.config.dim;
        if image.grid_size != g || image.dim != d {
            return Err(Error::shape(format!(
                "image embedding {}x{} does not match config {}x{}",
                image.grid_size, image.dim, g, d
            )));
        }
        if prompt_tokens.len() % d != 0 || prompt_tokens.is_empty() {
            return Err(Error::shape(format!(
                "prompt token buffer of {} values is not a multiple of dim {}",
                prompt_tokens.len(),
                d
            )));
        }
        let m = self.config.mask_tokens;
        let p = prompt_tokens.len() / d;
        let cells = g * g;

        let mut tokens = self.weight("mask_tokens").to_vec();
        tokens.extend_from_slice(prompt_tokens);
        let l = m + p;

        let mut grid = image.values.clone();
        if let Some(mem) = memory {
            if mem.grid_size != g || mem.dim != d {
                return Err(Error::shape("memory embedding dims mismatch".to_string()));
            }
            let delta = self.attention_block("memory", &grid, &mem.values, cells, cells);
            self.residual_norm(&mut grid, &delta, cells);
        }

        for layer in 0..2 {
            let delta = self.attention_block(&format!("fuse.{layer}.self"), &tokens, &tokens, l, l);
            self.residual_norm(&mut tokens, &delta, l);

            let delta = self.attention_block(&format!("fuse.{layer}.t2i"), &tokens, &grid, l, cells);
            self.residual_norm(&mut tokens, &delta, l);

            let w1 = self.weight(&format!("fuse.{layer}.mlp.w1"));
            let b1 = self.weight(&format!("fuse.{layer}.mlp.b1"));
            let w2 = self.weight(&format!("fuse.{layer}.mlp.w2"));
            let b2 = self.weight(&format!("fuse.{layer}.mlp.b2"));
            let h = 2 * d;
            let mut hidden = kernels::matmul(&tokens, w1, l, d, h);
            for r in 0..l {
                for c in 0..h {
                    hidden[r * h + c] = kernels::gelu(hidden[r * h + c] + b1[c]);
                }
            }
            let mut mlp_out = kernels::matmul(&hidden, w2, l, h, d);
            for r in 0..l {
                for c in 0..d {
                    mlp_out[r * d + c] += b2[c];
                }
            }
            self.residual_norm(&mut tokens, &mlp_out, l);

            let delta = self.attention_block(&format!("fuse.{layer}.i2t"), &grid, &tokens, cells, l);
            self.residual_norm(&mut grid, &delta, cells);
        }

        crate::numcore::ensure_finite(&tokens, "fuse tokens")?;
        crate::numcore::ensure_finite(&grid, "fuse grid")?;
        Ok(FusedState {
            enhanced_mask_tokens: tokens[..m * d].to_vec(),
            mask_token_count: m,
            dim: d,
            updated_image_embedding: ImageGridEmbedding::new(g, d, grid, image.frame_index)?,
            pre_ffm_embedding: image.clone(),
        })
    }

    // ── mask decoder ─────────────────────────────────────────────────

    /// Per-cell logits: an MLP-projected first mask token dotted with every
    /// updated image cell. Pure function of the fused state.
    pub fn decode_mask(&self, fs: &FusedState) -> Result<Vec<f64>> {
        let d = self.config.dim;
        if fs.dim != d {
            return Err(Error::shape("fused state dim mismatch".to_string()));
        }
        let token = &fs.enhanced_mask_tokens[..d];
        let w1 = self.weight("maskdec.w1");
        let b1 = self.weight("maskdec.b1");
        let w2 = self.weight("maskdec.w2");
        let b2 = self.weight("maskdec.b2");
        let mut hidden = kernels::matmul(token, w1, 1, d, d);
        for c in 0..d {
            hidden[c] = kernels::gelu(hidden[c] + b1[c]);
        }
        let mut hyper = kernels::matmul(&hidden, w2, 1, d, d);
        for c in 0..d {
            hyper[c] += b2[c];
        }
        let grid = &fs.updated_image_embedding.values;
        let cells = fs.updated_image_embedding.cells();
        let mut logits = vec![0.0; cells];
        for cell in 0..cells {
            let mut s = 0.0;
            for c in 0..d {
                s += hyper[c] * grid[cell * d + c];
            }
            logits[cell] = s;
        }
        Ok(logits)
    }

    // ── weight file ──────────────────────────────────────────────────

    /// Weight file: magic, G/D/M header as little-endian u64, then the
    /// parameter table (names, shapes, little-endian f64 values).
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        for v in [self.config.grid_size, self.config.dim, self.config.mask_tokens] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.params.to_bytes());
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load_weights(path: &Path, seed: u64) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 32 || &bytes[..8] != WEIGHT_MAGIC {
            return Err(Error::data(format!("bad backbone weight file {}", path.display())));
        }
        let word = |i: usize| {
            u64::from_le_bytes(bytes[8 + i * 8..16 + i * 8].try_into().unwrap()) as usize
        };
        let config = BackboneConfig { grid_size: word(0), dim: word(1), mask_tokens: word(2), seed };
        config.validate()?;
        let params = ParamSet::from_bytes(&bytes[32..])?;
        Ok(Backbone { config, params })
    }
}

fn fnv(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Area fraction and bounding box of the positive-logit region.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaskSummary {
    pub area_fraction: f64,
    /// (x_min, y_min, x_max, y_max) in cell coordinates; None when empty.
    pub bbox: Option<(usize, usize, usize, usize)>,
}

pub fn mask_summary(logits: &[f64], grid_size: usize) -> MaskSummary {
    let mut count = 0usize;
    let mut bbox: Option<(usize, usize, usize, usize)> = None;
    for y in 0..grid_size {
        for x in 0..grid_size {
            if logits[y * grid_size + x] > 0.0 {
                count += 1;
                bbox = Some(match bbox {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    MaskSummary { area_fraction: count as f64 / (grid_size * grid_size) as f64, bbox }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Backbone {
        Backbone::new(BackboneConfig { grid_size: 8, dim: 16, mask_tokens: 4, seed: 11 }).unwrap()
    }

    #[test]
    fn synthetic_encoding_is_deterministic() {
        let bb = tiny();
        let a = bb.encode_image(&ImageSource::Synthetic { seed: 0 }, 0).unwrap();
        let b = bb.encode_image(&ImageSource::Synthetic { seed: 0 }, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ_in_most_entries() {
        let bb = tiny();
        let a = bb.encode_image(&ImageSource::Synthetic { seed: 0 }, 0).unwrap();
        let b = bb.encode_image(&ImageSource::Synthetic { seed: 1 }, 0).unwrap();
        let differing = a.values.iter().zip(&b.values).filter(|(x, y)| x != y).count();
        assert!(differing as f64 > 0.9 * a.values.len() as f64);
    }

    #[test]
    fn non_power_of_two_grid_rejected() {
        let err = Backbone::new(BackboneConfig { grid_size: 7, dim: 16, mask_tokens: 4, seed: 0 });
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn identical_points_encode_identically() {
        let bb = tiny();
        let a = bb.encode_prompt(&PromptSpec::point(0.25, 0.75)).unwrap();
        let b = bb.encode_prompt(&PromptSpec::point(0.25, 0.75)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn box_corners_produce_two_distinct_tokens() {
        let bb = tiny();
        let toks = bb.encode_prompt(&PromptSpec::bbox(0.0, 0.0, 1.0, 1.0)).unwrap();
        let d = bb.config.dim;
        assert_eq!(toks.len(), 2 * d);
        assert_ne!(&toks[..d], &toks[d..]);
    }

    #[test]
    fn empty_mask_pools_to_learned_embedding() {
        let bb = tiny();
        let g = bb.config.grid_size;
        let tok = bb.encode_prompt(&PromptSpec::mask(vec![0; g * g])).unwrap();
        assert_eq!(tok, bb.weight("prompt.empty_mask"));
    }

    #[test]
    fn out_of_range_coords_rejected() {
        let bb = tiny();
        assert!(matches!(
            bb.encode_prompt(&PromptSpec::point(1.5, 0.0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn fuse_shapes_and_determinism() {
        let bb = tiny();
        let img = bb.encode_image(&ImageSource::Synthetic { seed: 3 }, 0).unwrap();
        let prompt = bb.encode_prompt(&PromptSpec::point(0.5, 0.5)).unwrap();
        let a = bb.fuse(&img, &prompt, None).unwrap();
        let b = bb.fuse(&img, &prompt, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.enhanced_mask_tokens.len(), 4 * 16);
        assert_eq!(a.updated_image_embedding.values.len(), 8 * 8 * 16);
        assert_eq!(a.pre_ffm_embedding, img);
    }

    #[test]
    fn prompt_changes_enhanced_mask_tokens() {
        let bb = tiny();
        let img = bb.encode_image(&ImageSource::Synthetic { seed: 3 }, 0).unwrap();
        let p1 = bb.encode_prompt(&PromptSpec::point(0.1, 0.1)).unwrap();
        let p2 = bb.encode_prompt(&PromptSpec::point(0.9, 0.9)).unwrap();
        let a = bb.fuse(&img, &p1, None).unwrap();
        let b = bb.fuse(&img, &p2, None).unwrap();
        let max_diff = a
            .enhanced_mask_tokens
            .iter()
            .zip(&b.enhanced_mask_tokens)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn decode_mask_is_pure_and_shaped() {
        let bb = tiny();
        let img = bb.encode_image(&ImageSource::Synthetic { seed: 3 }, 0).unwrap();
        let prompt = bb.encode_prompt(&PromptSpec::point(0.5, 0.5)).unwrap();
        let fs = bb.fuse(&img, &prompt, None).unwrap();
        let before = fs.checksum();
        let l1 = bb.decode_mask(&fs).unwrap();
        let l2 = bb.decode_mask(&fs).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(l1.len(), 8 * 8);
        assert_eq!(fs.checksum(), before);
    }

    #[test]
    fn zero_image_embedding_gives_zero_logits() {
        let bb = tiny();
        let g = bb.config.grid_size;
        let d = bb.config.dim;
        let zero = ImageGridEmbedding::new(g, d, vec![0.0; g * g * d], 0).unwrap();
        let fs = FusedState {
            enhanced_mask_tokens: vec![0.3; bb.config.mask_tokens * d],
            mask_token_count: bb.config.mask_tokens,
            dim: d,
            updated_image_embedding: zero.clone(),
            pre_ffm_embedding: zero,
        };
        let logits = bb.decode_mask(&fs).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn memory_changes_fusion() {
        let bb = tiny();
        let img = bb.encode_image(&ImageSource::Synthetic { seed: 3 }, 1).unwrap();
        let prev = bb.encode_image(&ImageSource::Synthetic { seed: 4 }, 0).unwrap();
        let prompt = bb.encode_prompt(&PromptSpec::point(0.5, 0.5)).unwrap();
        let without = bb.fuse(&img, &prompt, None).unwrap();
        let with = bb.fuse(&img, &prompt, Some(&prev)).unwrap();
        assert_ne!(without.updated_image_embedding, with.updated_image_embedding);
    }

    #[test]
    fn weight_file_round_trip() {
        let bb = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.bin");
        bb.save_weights(&path).unwrap();
        let loaded = Backbone::load_weights(&path, bb.config.seed).unwrap();
        assert_eq!(loaded.checksum(), bb.checksum());
        assert_eq!(loaded.config, bb.config);
    }

    #[test]
    fn png_bytes_encode_deterministically() {
        let mut img = image::RgbImage::new(16, 16);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([(x * 16) as u8, (y * 16) as u8, 128]);
        }
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        let bb = tiny();
        let a = bb.encode_image(&ImageSource::Png(&bytes), 0).unwrap();
        let b = bb.encode_image(&ImageSource::Png(&bytes), 0).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            bb.encode_image(&ImageSource::Png(b"not a png"), 0),
            Err(Error::Input(_))
        ));
    }
}
