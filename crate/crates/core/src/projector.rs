//! Pixel-shuffle spatial compression plus two distinct MLP projections into
//! the decoder embedding space. Owns the token-budget arithmetic: prompted
//! and clip-final frames keep 2x2 density, all other frames drop to 4x4.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{pixel_shuffle_data, pixel_unshuffle_data, Tape, TensorId};
use crate::params::{mix64, normal_init, ParamSet, TapeBinding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameRole {
    /// The frame carrying the user's visual prompt; 2x2 shuffle.
    Prompted,
    /// Any in-between video frame; aggressive 4x4 shuffle.
    Regular,
    /// Last frame of a streaming clip; kept at 2x2 so dense history can
    /// carry over into the next clip.
    ClipFinal,
}

impl FrameRole {
    pub fn shuffle_factor(self) -> usize {
        match self {
            FrameRole::Prompted | FrameRole::ClipFinal => 2,
            FrameRole::Regular => 4,
        }
    }
}

/// Projected visual tokens for one frame slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTokens {
    pub tokens: Vec<f64>,
    pub count: usize,
    pub embed_dim: usize,
    pub role: FrameRole,
    pub frame_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub grid_size: usize,
    /// Perceiver token dim D.
    pub dim: usize,
    /// Decoder embedding dim E.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig { grid_size: 64, dim: 256, embed_dim: 64, seed: 2 }
    }
}

/// Validated space-to-depth: [G*G, D] -> [(G/r)^2, D*r*r].
pub fn pixel_shuffle(grid: &[f64], g: usize, d: usize, r: usize) -> Result<Vec<f64>> {
    if grid.len() != g * g * d {
        return Err(Error::shape(format!(
            "grid has {} values, expected {}",
            grid.len(),
            g * g * d
        )));
    }
    if r == 0 || g % r != 0 {
        return Err(Error::shape(format!("shuffle factor {r} does not divide grid {g}")));
    }
    Ok(pixel_shuffle_data(grid, g, d, r))
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(shuffled: &[f64], g: usize, d: usize, r: usize) -> Result<Vec<f64>> {
    if shuffled.len() != g * g * d {
        return Err(Error::shape(format!(
            "shuffled buffer has {} values, expected {}",
            shuffled.len(),
            g * g * d
        )));
    }
    if r == 0 || g % r != 0 {
        return Err(Error::shape(format!("shuffle factor {r} does not divide grid {g}")));
    }
    Ok(pixel_unshuffle_data(shuffled, g, d, r))
}

pub struct Projector {
    pub config: ProjectorConfig,
    params: ParamSet,
}

impl Projector {
    pub fn new(config: ProjectorConfig) -> Result<Self> {
        if config.grid_size % 4 != 0 {
            return Err(Error::config(format!(
                "grid_size {} must be divisible by 4 for the regular-frame shuffle",
                config.grid_size
            )));
        }
        let d = config.dim;
        let e = config.embed_dim;
        let h = 2 * e;
        let sub = |label: &str| mix64(config.seed ^ fnv(label));
        let mut params = ParamSet::new();
        // One visual MLP per shuffle density (their input widths differ),
        // one separate semantic MLP. Parameter sets are fully disjoint.
        for r in [2usize, 4] {
            let din = d * r * r;
            let std = 1.0 / (din as f64).sqrt();
            params.insert(
                format!("projector.visual.r{r}.w1"),
                vec![din, h],
                normal_init(sub(&format!("v{r}w1")), std, din * h),
                true,
            );
            params.insert(format!("projector.visual.r{r}.b1"), vec![h], vec![0.0; h], true);
            let std2 = 1.0 / (h as f64).sqrt();
            params.insert(
                format!("projector.visual.r{r}.w2"),
                vec![h, e],
                normal_init(sub(&format!("v{r}w2")), std2, h * e),
                true,
            );
            params.insert(format!("projector.visual.r{r}.b2"), vec![e], vec![0.0; e], true);
        }
        let std = 1.0 / (d as f64).sqrt();
        params.insert(
            "projector.semantic.w1",
            vec![d, h],
            normal_init(sub("sw1"), std, d * h),
            true,
        );
        params.insert("projector.semantic.b1", vec![h], vec![0.0; h], true);
        let std2 = 1.0 / (h as f64).sqrt();
        params.insert(
            "projector.semantic.w2",
            vec![h, e],
            normal_init(sub("sw2"), std2, h * e),
            true,
        );
        params.insert("projector.semantic.b2", vec![e], vec![0.0; e], true);
        Ok(Projector { config, params })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn trainable_parameters(&self) -> std::collections::BTreeSet<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    fn mlp_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        input: TensorId,
        prefix: &str,
    ) -> Result<TensorId> {
        let w1 = binding.id(&format!("{prefix}.w1"))?;
        let b1 = binding.id(&format!("{prefix}.b1"))?;
        let w2 = binding.id(&format!("{prefix}.w2"))?;
        let b2 = binding.id(&format!("{prefix}.b2"))?;
        let hidden = tape.matmul(input, w1)?;
        let hidden = tape.add_bias(hidden, b1)?;
        let hidden = tape.gelu(hidden)?;
        let out = tape.matmul(hidden, w2)?;
        tape.add_bias(out, b2)
    }

    /// Shuffle one frame's visual grid at its role's density and project to
    /// the decoder dim: [(G/r)^2, E].
    pub fn project_visual_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        grid: TensorId,
        role: FrameRole,
    ) -> Result<TensorId> {
        let g = self.config.grid_size;
        let r = role.shuffle_factor();
        let shuffled = tape.pixel_shuffle(grid, g, r)?;
        self.mlp_on_tape(tape, binding, shuffled, &format!("projector.visual.r{r}"))
    }

    /// Project semantic tokens: [N_s, D] -> [N_s, E].
    pub fn project_semantic_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        semantic: TensorId,
    ) -> Result<TensorId> {
        let (_, d) = tape.value(semantic).dims2()?;
        if d != self.config.dim {
            return Err(Error::shape(format!(
                "semantic tokens have dim {d}, expected {}",
                self.config.dim
            )));
        }
        self.mlp_on_tape(tape, binding, semantic, "projector.semantic")
    }

    /// Value-level visual projection for one frame.
    pub fn project_visual(&self, grid: &[f64], role: FrameRole, frame_index: usize) -> Result<ProjectedTokens> {
        let g = self.config.grid_size;
        let d = self.config.dim;
        if grid.len() != g * g * d {
            return Err(Error::shape(format!(
                "visual grid has {} values, expected {}",
                grid.len(),
                g * g * d
            )));
        }
        let mut tape = Tape::new();
        let binding = TapeBinding::bind_frozen(&mut tape, &self.params)?;
        let id = tape.constant(grid.to_vec(), vec![g * g, d])?;
        let out = self.project_visual_on_tape(&mut tape, &binding, id, role)?;
        let count = self.tokens_for_role(role);
        Ok(ProjectedTokens {
            tokens: tape.data(out).to_vec(),
            count,
            embed_dim: self.config.embed_dim,
            role,
            frame_index,
        })
    }

    /// Value-level semantic projection.
    pub fn project_semantic(&self, semantic: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.dim;
        if semantic.len() % d != 0 || semantic.is_empty() {
            return Err(Error::shape(format!(
                "semantic buffer of {} values is not a multiple of dim {d}",
                semantic.len()
            )));
        }
        let rows = semantic.len() / d;
        let mut tape = Tape::new();
        let binding = TapeBinding::bind_frozen(&mut tape, &self.params)?;
        let id = tape.constant(semantic.to_vec(), vec![rows, d])?;
        let out = self.project_semantic_on_tape(&mut tape, &binding, id)?;
        Ok(tape.data(out).to_vec())
    }

    /// Visual token count a frame contributes at its role's density.
    pub fn tokens_for_role(&self, role: FrameRole) -> usize {
        let side = self.config.grid_size / role.shuffle_factor();
        side * side
    }

    /// Frame roles for a non-streaming video: the prompted frame keeps 2x2
    /// density, everything else drops to 4x4.
    pub fn plan_roles(&self, frames: usize, prompted_frame: usize) -> Result<Vec<FrameRole>> {
        if frames == 0 {
            return Err(Error::input("video must have at least one frame".to_string()));
        }
        if prompted_frame >= frames {
            return Err(Error::input(format!(
                "prompted frame {prompted_frame} out of range for {frames} frames"
            )));
        }
        Ok((0..frames)
            .map(|i| if i == prompted_frame { FrameRole::Prompted } else { FrameRole::Regular })
            .collect())
    }

    /// Total visual tokens for an N-frame input. Non-streaming: one prompted
    /// frame plus N-1 regular frames. Streaming: one dense first slot (carry
    /// or prompted), dense clip-final last frame, regular middles; a single
    /// frame is clip-final only.
    pub fn visual_budget(&self, frames: usize, streaming: bool) -> Result<usize> {
        if frames == 0 {
            return Err(Error::input("visual budget needs >= 1 frame".to_string()));
        }
        let dense = self.tokens_for_role(FrameRole::Prompted);
        let sparse = self.tokens_for_role(FrameRole::Regular);
        Ok(if streaming {
            match frames {
                1 => dense,
                n => 2 * dense + (n - 2) * sparse,
            }
        } else {
            dense + (frames - 1) * sparse
        })
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_projector() -> Projector {
        Projector::new(ProjectorConfig::default()).unwrap()
    }

    fn tiny_projector() -> Projector {
        Projector::new(ProjectorConfig { grid_size: 8, dim: 4, embed_dim: 6, seed: 3 }).unwrap()
    }

    #[test]
    fn shuffle_counts_at_paper_scale() {
        let p = paper_projector();
        assert_eq!(p.tokens_for_role(FrameRole::Prompted), 1024);
        assert_eq!(p.tokens_for_role(FrameRole::Regular), 256);
        assert_eq!(p.tokens_for_role(FrameRole::ClipFinal), 1024);
    }

    #[test]
    fn shuffle_identity_and_element_conservation() {
        let g = 8;
        let d = 4;
        let grid: Vec<f64> = (0..g * g * d).map(|v| v as f64).collect();
        assert_eq!(pixel_shuffle(&grid, g, d, 1).unwrap(), grid);
        for r in [1usize, 2, 4] {
            let out = pixel_shuffle(&grid, g, d, r).unwrap();
            let count = (g / r) * (g / r);
            let dim = d * r * r;
            assert_eq!(out.len(), count * dim);
            assert_eq!(count * dim, g * g * d);
        }
        assert!(matches!(pixel_shuffle(&grid, g, d, 3), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn shuffle_is_a_bijection(seed in 0u64..1000, r in prop::sample::select(vec![1usize, 2, 4])) {
            let g = 8;
            let d = 3;
            let grid: Vec<f64> = (0..g * g * d)
                .map(|i| crate::params::unit_value(seed.wrapping_mul(7919) ^ i as u64))
                .collect();
            let shuffled = pixel_shuffle(&grid, g, d, r).unwrap();
            let back = pixel_unshuffle(&shuffled, g, d, r).unwrap();
            prop_assert_eq!(back, grid);
        }
    }

    #[test]
    fn projection_shapes_per_role() {
        let p = tiny_projector();
        let g = 8;
        let d = 4;
        let grid: Vec<f64> = (0..g * g * d).map(|i| (i as f64).sin()).collect();
        let prompted = p.project_visual(&grid, FrameRole::Prompted, 0).unwrap();
        assert_eq!(prompted.count, 16);
        assert_eq!(prompted.tokens.len(), 16 * 6);
        let regular = p.project_visual(&grid, FrameRole::Regular, 1).unwrap();
        assert_eq!(regular.count, 4);
        let final_frame = p.project_visual(&grid, FrameRole::ClipFinal, 2).unwrap();
        assert_eq!(final_frame.count, 16);
    }

    #[test]
    fn semantic_projection_shape_and_zero_input() {
        let p = tiny_projector();
        let out = p.project_semantic(&vec![0.0; 16 * 4]).unwrap();
        assert_eq!(out.len(), 16 * 6);
        // Zero input passes only through biases, so every row is identical.
        let first = &out[..6];
        for row in out.chunks(6) {
            assert_eq!(row, first);
        }
    }

    #[test]
    fn visual_and_semantic_mlps_share_no_parameters() {
        let p = tiny_projector();
        let visual: Vec<_> = p.params().names_with_prefix("projector").filter(|n| n.contains(".visual.")).collect();
        let semantic: Vec<_> = p.params().names_with_prefix("projector").filter(|n| n.contains(".semantic.")).collect();
        assert!(!visual.is_empty() && !semantic.is_empty());
        assert!(visual.iter().all(|v| !semantic.contains(v)));
        assert_eq!(visual.len() + semantic.len(), p.params().len());
    }

    #[test]
    fn budgets_match_published_arithmetic() {
        let p = paper_projector();
        assert_eq!(p.visual_budget(1, false).unwrap(), 1024);
        assert_eq!(p.visual_budget(2, false).unwrap(), 1280);
        assert_eq!(p.visual_budget(16, false).unwrap(), 4864);
        assert!(matches!(p.visual_budget(0, false), Err(Error::Input(_))));
    }

    #[test]
    fn streaming_budget_upgrades_final_frame() {
        let p = paper_projector();
        assert_eq!(p.visual_budget(1, true).unwrap(), 1024);
        assert_eq!(p.visual_budget(2, true).unwrap(), 2048);
        // 1024 + (F-2)*256 + 1024 at F = 5
        assert_eq!(p.visual_budget(5, true).unwrap(), 1024 + 3 * 256 + 1024);
    }

    #[test]
    fn budget_is_strictly_monotone() {
        let p = paper_projector();
        for streaming in [false, true] {
            let mut prev = 0;
            for n in 1..20 {
                let b = p.visual_budget(n, streaming).unwrap();
                assert!(b > prev, "budget must strictly increase (n={n})");
                prev = b;
            }
        }
    }

    #[test]
    fn role_plan_marks_exactly_one_prompted_frame() {
        let p = tiny_projector();
        let roles = p.plan_roles(4, 2).unwrap();
        assert_eq!(roles.iter().filter(|r| **r == FrameRole::Prompted).count(), 1);
        assert_eq!(roles[2], FrameRole::Prompted);
        assert!(p.plan_roles(4, 4).is_err());
    }

    #[test]
    fn both_mlps_pass_gradient_check() {
        let p = Projector::new(ProjectorConfig { grid_size: 4, dim: 3, embed_dim: 4, seed: 3 })
            .unwrap();
        let g = 4;
        let d = 3;
        let grid: Vec<f64> = (0..g * g * d).map(|i| crate::params::unit_value(liq(i))).collect();
        let sem: Vec<f64> = (0..2 * d).map(|i| crate::params::unit_value(liq(i + 500))).collect();
        let checks = p.params().to_check_params("projector");
        let names: Vec<String> = checks.iter().map(|c| c.name.clone()).collect();
        let report = crate::numcore::grad_check(
            |tape, ids| {
                let binding = TapeBinding::from_pairs(names.iter().map(String::as_str), ids);
                let grid_id = tape.constant(grid.clone(), vec![g * g, d])?;
                let v2 = p.project_visual_on_tape(tape, &binding, grid_id, FrameRole::Prompted)?;
                let grid_id2 = tape.constant(grid.clone(), vec![g * g, d])?;
                let v4 = p.project_visual_on_tape(tape, &binding, grid_id2, FrameRole::Regular)?;
                let sem_id = tape.constant(sem.clone(), vec![2, d])?;
                let s = p.project_semantic_on_tape(tape, &binding, sem_id)?;
                let sv2 = tape.sum_all(v2)?;
                let sv4 = tape.sum_all(v4)?;
                let ss = tape.sum_all(s)?;
                let partial = tape.add(sv2, sv4)?;
                tape.add(partial, ss)
            },
            &checks,
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "max rel err {} at {:?}", report.max_rel_err, report.worst);
    }

    fn liq(i: usize) -> u64 {
        (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }
}
