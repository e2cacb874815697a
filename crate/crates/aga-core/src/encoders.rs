//! Toy image and text encoders.
//!
//! Stand-ins for the usual pretrained backbones: a one-hidden-layer patch
//! projector on the image side, and a token-table lookup with reflective
//! windowed mixing on the text side. Both emit local embeddings (per patch /
//! per token) and a global embedding through dedicated heads, with the same
//! output shapes the grouping pipeline expects, and everything stays small
//! enough that end-to-end finite-difference checks run in seconds.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::Rng;
use crate::tape::{Tape, Tensor};
use crate::Result;

/// Shape and size configuration shared by encoders, trainer, and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Number of image patch slots (`N`).
    pub n_patches: usize,
    /// Raw features per patch (`C`).
    pub patch_features: usize,
    /// Vocabulary size for token lookups.
    pub vocab: u32,
    /// Maximum token slots per report (`M_max`).
    pub m_max: usize,
    /// Hidden width of both encoders.
    pub hidden: usize,
    /// Shared embedding dimension (`d`).
    pub embed_dim: usize,
    /// Odd window size for local token mixing.
    pub mix_window: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: d=16, h=32, a 6x6 patch grid, 24 token slots.
    pub fn desk_default() -> Self {
        EncoderConfig {
            n_patches: 36,
            patch_features: 8,
            vocab: 64,
            m_max: 24,
            hidden: 32,
            embed_dim: 16,
            mix_window: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |field: &'static str, ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig { field, message: msg.into() })
            }
        };
        check("n_patches", self.n_patches >= 1, "must be >= 1")?;
        check("patch_features", self.patch_features >= 1, "must be >= 1")?;
        check("vocab", self.vocab >= 1, "must be >= 1")?;
        check("m_max", self.m_max >= 1, "must be >= 1")?;
        check("hidden", self.hidden >= 1, "must be >= 1")?;
        check("embed_dim", self.embed_dim >= 1, "must be >= 1")?;
        check("mix_window", self.mix_window % 2 == 1, "must be odd")?;
        Ok(())
    }
}

/// One synthetic image: `n_patches x patch_features`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub patches: Vec<f64>,
}

/// One synthetic report: fixed-width token buffer plus a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSample {
    pub token_ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TextSample {
    /// Positions of real tokens, ascending.
    pub fn real_positions(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i) } else { None })
            .collect()
    }

    /// Number of real tokens.
    pub fn len_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Learnable encoder parameters, stored as flat row-major buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub patch_proj: Vec<f64>,
    pub patch_proj_bias: Vec<f64>,
    /// Also the global image head: the global embedding is this head over
    /// the mean hidden feature, which by linearity equals the mean patch
    /// embedding. Tying the heads keeps local and global paths in one
    /// space; untied heads leave the token-patch similarity space trained
    /// only by within-pair losses, whose optima fix correspondences merely
    /// up to permutation.
    pub patch_head: Vec<f64>,
    pub patch_head_bias: Vec<f64>,
    pub token_table: Vec<f64>,
    /// Also the global text head, mirroring the image side.
    pub token_head: Vec<f64>,
    pub token_head_bias: Vec<f64>,
}

impl EncoderParams {
    /// Canonical field order and shapes; checkpoint and optimizer layouts
    /// both derive from this list.
    pub fn shapes(cfg: &EncoderConfig) -> Vec<(&'static str, Vec<usize>)> {
        let (c, h, d, v) = (cfg.patch_features, cfg.hidden, cfg.embed_dim, cfg.vocab as usize);
        vec![
            ("encoder.patch_proj", vec![c, h]),
            ("encoder.patch_proj_bias", vec![h]),
            ("encoder.patch_head", vec![h, d]),
            ("encoder.patch_head_bias", vec![d]),
            ("encoder.token_table", vec![v, h]),
            ("encoder.token_head", vec![h, d]),
            ("encoder.token_head_bias", vec![d]),
        ]
    }

    /// Random initialization: normal entries scaled by 1/sqrt(fan-in) for
    /// projection matrices, unit normal token table, zero biases.
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let (c, h, d, v) = (cfg.patch_features, cfg.hidden, cfg.embed_dim, cfg.vocab as usize);
        let scaled = |rng: &mut Rng, n: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / libm::sqrt(fan_in as f64);
            (0..n).map(|_| rng.normal() * s).collect()
        };
        EncoderParams {
            patch_proj: scaled(rng, c * h, c),
            patch_proj_bias: vec![0.0; h],
            patch_head: scaled(rng, h * d, h),
            patch_head_bias: vec![0.0; d],
            token_table: rng.normal_vec(v * h),
            token_head: scaled(rng, h * d, h),
            token_head_bias: vec![0.0; d],
        }
    }

    /// Field buffers in canonical order.
    pub fn fields(&self) -> [&Vec<f64>; 7] {
        [
            &self.patch_proj,
            &self.patch_proj_bias,
            &self.patch_head,
            &self.patch_head_bias,
            &self.token_table,
            &self.token_head,
            &self.token_head_bias,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.patch_proj,
            &mut self.patch_proj_bias,
            &mut self.patch_head,
            &mut self.patch_head_bias,
            &mut self.token_table,
            &mut self.token_head,
            &mut self.token_head_bias,
        ]
    }
}

/// Tape handles for one registration of [`EncoderParams`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub patch_proj: Tensor,
    pub patch_proj_bias: Tensor,
    pub patch_head: Tensor,
    pub patch_head_bias: Tensor,
    pub token_table: Tensor,
    pub token_head: Tensor,
    pub token_head_bias: Tensor,
}

/// Register encoder parameters as differentiable leaves.
pub fn register_encoder(tape: &mut Tape, p: &EncoderParams, cfg: &EncoderConfig) -> Result<EncoderVars> {
    let shapes = EncoderParams::shapes(cfg);
    let fields = p.fields();
    let mut handles = Vec::with_capacity(fields.len());
    for ((_, shape), data) in shapes.iter().zip(fields.iter()) {
        handles.push(tape.leaf(shape, (*data).clone(), true)?);
    }
    Ok(EncoderVars {
        patch_proj: handles[0],
        patch_proj_bias: handles[1],
        patch_head: handles[2],
        patch_head_bias: handles[3],
        token_table: handles[4],
        token_head: handles[5],
        token_head_bias: handles[6],
    })
}

/// Image encoding outputs.
#[derive(Debug, Clone, Copy)]
pub struct ImageEncoding {
    /// `[n_patches x d]` local embeddings.
    pub patch_embeds: Tensor,
    /// `[d]` global embedding from the mean hidden feature.
    pub global: Tensor,
}

/// Text encoding outputs.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    /// `[m_max x d]`; masked slots are exactly zero.
    pub token_embeds: Tensor,
    /// `[m_i x d]` rows for the real tokens only, in report order.
    pub real_tokens: Tensor,
    /// `[d]` global embedding from the masked mean hidden state.
    pub global: Tensor,
    /// Positions the real rows came from.
    pub real_positions: Vec<usize>,
}

/// Encode an image: `tanh(patches . patch_proj + bias)` hidden features, a
/// linear head per patch, and a global head on the mean hidden feature.
pub fn encode_image(
    tape: &mut Tape,
    img: &ImageSample,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<ImageEncoding> {
    let (n, c) = (cfg.n_patches, cfg.patch_features);
    if img.patches.len() != n * c {
        return Err(Error::DimMismatch {
            what: "image patch buffer",
            expected: n * c,
            actual: img.patches.len(),
        });
    }
    if img.patches.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "image patches".into() });
    }
    let x = tape.constant(&[n, c], img.patches.clone())?;
    let pre = tape.linear(x, vars.patch_proj, vars.patch_proj_bias)?;
    let hidden = tape.tanh(pre);
    let patch_embeds = tape.linear(hidden, vars.patch_head, vars.patch_head_bias)?;
    let mean_hidden = tape.weighted_row_sum(hidden, &vec![1.0 / n as f64; n])?;
    let mh_row = tape.reshape(mean_hidden, &[1, cfg.hidden])?;
    let g_row = tape.linear(mh_row, vars.patch_head, vars.patch_head_bias)?;
    let global = tape.reshape(g_row, &[cfg.embed_dim])?;
    Ok(ImageEncoding { patch_embeds, global })
}

/// Reflective-boundary window averaging matrix over `m` real tokens.
/// Reflection duplicates the edge sample (-1 maps to 0), so a token's own
/// lookup always carries at least a third of its mixed state.
fn mix_matrix(m: usize, window: usize) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut w = vec![0.0; m * m];
    let reflect = |mut i: isize| -> usize {
        let m = m as isize;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= m {
                i = 2 * m - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let share = 1.0 / window as f64;
    for j in 0..m {
        for o in -half..=half {
            let src = reflect(j as isize + o);
            w[j * m + src] += share;
        }
    }
    w
}

/// Encode a report: table lookups for the real tokens, reflective window
/// mixing, `tanh`, a token head, and a global head on the mean hidden state.
/// Padded slots never influence any output.
pub fn encode_text(
    tape: &mut Tape,
    txt: &TextSample,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
) -> Result<TextEncoding> {
    if txt.token_ids.len() != cfg.m_max || txt.mask.len() != cfg.m_max {
        return Err(Error::DimMismatch {
            what: "text sample width",
            expected: cfg.m_max,
            actual: txt.token_ids.len().max(txt.mask.len()),
        });
    }
    let real_positions = txt.real_positions();
    let m_i = real_positions.len();
    if m_i == 0 {
        return Err(Error::EmptyMask);
    }
    let mut lookup_idx = Vec::with_capacity(m_i);
    for &pos in &real_positions {
        let id = txt.token_ids[pos];
        if id >= cfg.vocab {
            return Err(Error::TokenOutOfRange { position: pos, id, vocab: cfg.vocab });
        }
        lookup_idx.push(id as usize);
    }
    let lookups = tape.gather_rows(vars.token_table, &lookup_idx)?;
    let mix = mix_matrix(m_i, cfg.mix_window);
    let mix_t = tape.constant(&[m_i, m_i], mix)?;
    let mixed = tape.matmul(mix_t, lookups)?;
    let hidden = tape.tanh(mixed);
    let real_tokens = tape.linear(hidden, vars.token_head, vars.token_head_bias)?;
    let token_embeds = tape.scatter_rows(real_tokens, &real_positions, cfg.m_max)?;
    let mean_hidden = tape.weighted_row_sum(hidden, &vec![1.0 / m_i as f64; m_i])?;
    let mh_row = tape.reshape(mean_hidden, &[1, cfg.hidden])?;
    let g_row = tape.linear(mh_row, vars.token_head, vars.token_head_bias)?;
    let global = tape.reshape(g_row, &[cfg.embed_dim])?;
    Ok(TextEncoding { token_embeds, real_tokens, global, real_positions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            n_patches: 4,
            patch_features: 3,
            vocab: 10,
            m_max: 6,
            hidden: 5,
            embed_dim: 5,
            mix_window: 3,
        }
    }

    fn setup(cfg: &EncoderConfig, seed: u64) -> (Tape, EncoderVars, EncoderParams) {
        let mut rng = Rng::from_seed(seed);
        let params = EncoderParams::init(cfg, &mut rng);
        let mut tape = Tape::new();
        let vars = register_encoder(&mut tape, &params, cfg).unwrap();
        (tape, vars, params)
    }

    #[test]
    fn image_output_shapes_match_contract() {
        let cfg = tiny_cfg();
        let (mut tape, vars, _) = setup(&cfg, 1);
        let img = ImageSample { patches: vec![0.25; 12] };
        let enc = encode_image(&mut tape, &img, &vars, &cfg).unwrap();
        assert_eq!(tape.shape(enc.patch_embeds), &[4, 5]);
        assert_eq!(tape.shape(enc.global), &[5]);
    }

    #[test]
    fn zero_patches_give_equal_rows() {
        let cfg = tiny_cfg();
        let (mut tape, vars, _) = setup(&cfg, 2);
        let img = ImageSample { patches: vec![0.0; 12] };
        let enc = encode_image(&mut tape, &img, &vars, &cfg).unwrap();
        let v = tape.value(enc.patch_embeds);
        for r in 1..4 {
            assert_eq!(&v[r * 5..(r + 1) * 5], &v[0..5], "row {r} differs");
        }
    }

    #[test]
    fn image_rejects_non_finite_input() {
        let cfg = tiny_cfg();
        let (mut tape, vars, _) = setup(&cfg, 3);
        let mut patches = vec![0.0; 12];
        patches[5] = f64::NAN;
        let img = ImageSample { patches };
        assert!(matches!(
            encode_image(&mut tape, &img, &vars, &cfg),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn patch_permutation_covariance() {
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(4);
        let params = EncoderParams::init(&cfg, &mut rng);
        let patches = rng.normal_vec(12);
        // Permutation (0,1,2,3) -> (2,0,3,1)
        let perm = [2usize, 0, 3, 1];
        let mut permuted = vec![0.0; 12];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 3..(dst + 1) * 3].copy_from_slice(&patches[src * 3..(src + 1) * 3]);
        }
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let vars = register_encoder(&mut tape, &params, &cfg).unwrap();
            let enc = encode_image(&mut tape, &ImageSample { patches: data }, &vars, &cfg).unwrap();
            (tape.value(enc.patch_embeds).to_vec(), tape.value(enc.global).to_vec())
        };
        let (pe1, g1) = run(patches);
        let (pe2, g2) = run(permuted);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(&pe2[dst * 5..(dst + 1) * 5], &pe1[src * 5..(src + 1) * 5]);
        }
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn text_output_shapes_and_zero_padding() {
        let cfg = tiny_cfg();
        let (mut tape, vars, _) = setup(&cfg, 5);
        let txt = TextSample {
            token_ids: vec![3, 1, 4, 0, 0, 0],
            mask: vec![true, true, true, false, false, false],
        };
        let enc = encode_text(&mut tape, &txt, &vars, &cfg).unwrap();
        assert_eq!(tape.shape(enc.token_embeds), &[6, 5]);
        assert_eq!(tape.shape(enc.real_tokens), &[3, 5]);
        assert_eq!(tape.shape(enc.global), &[5]);
        let v = tape.value(enc.token_embeds);
        for r in 3..6 {
            assert!(v[r * 5..(r + 1) * 5].iter().all(|&x| x == 0.0), "pad row {r} not zero");
        }
    }

    #[test]
    fn pad_ids_never_change_outputs() {
        let cfg = tiny_cfg();
        let mut rng = Rng::from_seed(6);
        let params = EncoderParams::init(&cfg, &mut rng);
        let run = |pad_id: u32| {
            let mut tape = Tape::new();
            let vars = register_encoder(&mut tape, &params, &cfg).unwrap();
            let txt = TextSample {
                token_ids: vec![3, 1, 4, pad_id, pad_id, pad_id],
                mask: vec![true, true, true, false, false, false],
            };
            let enc = encode_text(&mut tape, &txt, &vars, &cfg).unwrap();
            (
                tape.value(enc.token_embeds).to_vec(),
                tape.value(enc.global).to_vec(),
            )
        };
        let (te1, g1) = run(0);
        let (te2, g2) = run(9);
        assert_eq!(te1, te2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn single_token_mixing_is_identity() {
        // With one real token the reflective window collapses onto it, so
        // mixing must not change the lookup row.
        let m = mix_matrix(1, 3);
        assert_eq!(m, vec![1.0]);
        let cfg = tiny_cfg();
        let (mut tape, vars, params) = setup(&cfg, 7);
        let txt = TextSample {
            token_ids: vec![2, 0, 0, 0, 0, 0],
            mask: vec![true, false, false, false, false, false],
        };
        let enc = encode_text(&mut tape, &txt, &vars, &cfg).unwrap();
        // Hidden row should be tanh of the raw table row.
        let h = cfg.hidden;
        let table_row = &params.token_table[2 * h..3 * h];
        let real = tape.value(enc.real_tokens);
        let mut expect = vec![0.0; cfg.embed_dim];
        for dcol in 0..cfg.embed_dim {
            let mut s = params.token_head_bias[dcol];
            for k in 0..h {
                s += libm::tanh(table_row[k]) * params.token_head[k * cfg.embed_dim + dcol];
            }
            expect[dcol] = s;
        }
        for (a, b) in real.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let cfg = tiny_cfg();
        let (mut tape, vars, _) = setup(&cfg, 8);
        let txt = TextSample { token_ids: vec![0; 6], mask: vec![false; 6] };
        assert!(matches!(
            encode_text(&mut tape, &txt, &vars, &cfg),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let cfg = tiny_cfg();
        let (mut tape, vars, _) = setup(&cfg, 9);
        let txt = TextSample {
            token_ids: vec![3, 99, 0, 0, 0, 0],
            mask: vec![true, true, false, false, false, false],
        };
        assert!(matches!(
            encode_text(&mut tape, &txt, &vars, &cfg),
            Err(Error::TokenOutOfRange { position: 1, id: 99, .. })
        ));
    }

    #[test]
    fn mix_matrix_rows_are_stochastic() {
        for (m, w) in [(1usize, 3usize), (2, 3), (5, 3), (4, 5)] {
            let mat = mix_matrix(m, w);
            for j in 0..m {
                let s: f64 = mat[j * m..(j + 1) * m].iter().sum();
                assert!((s - 1.0).abs() <= 1e-12, "m={m} w={w} row {j} sums to {s}");
            }
        }
    }
}
