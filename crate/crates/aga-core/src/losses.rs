//! Alignment losses: global contrastive, instance-aware group alignment,
//! cross-attention between group sets, and the weighted total.
//!
//! All InfoNCE-style terms share one symmetric engine: cosine similarities
//! between two equally sized row sets, temperature-scaled row softmax in
//! both directions, and the mean negative log of the diagonal. Negatives
//! always come from the same pair's sequence, never from other pairs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::rng::Rng;
use crate::tape::{Tape, Tensor};
use crate::Result;

/// Additive epsilon used by every cosine normalization.
pub const L2_EPS: f64 = 1e-8;

/// Softmax temperatures for the three loss families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
}

impl Temperatures {
    /// Stock settings: 0.3, 0.3, 0.1.
    pub fn default_values() -> Self {
        Temperatures { tau1: 0.3, tau2: 0.3, tau3: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("tau1", self.tau1), ("tau2", self.tau2), ("tau3", self.tau3)] {
            if v.is_nan() || v <= 0.0 || v.is_infinite() {
                return Err(Error::InvalidConfig { field, message: format!("temperature must be positive, got {v}") });
            }
        }
        Ok(())
    }
}

/// Loss component weights for the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    /// Stock settings: all 0.5.
    pub fn default_values() -> Self {
        LossWeights { lambda1: 0.5, lambda2: 0.5, lambda3: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig { field, message: format!("weight must be non-negative, got {v}") });
            }
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 && self.lambda3 == 0.0 {
            return Err(Error::InvalidConfig { field: "lambda1", message: "all loss weights are zero".into() });
        }
        Ok(())
    }
}

/// Learnable projections for one cross-attention direction.
#[derive(Debug, Clone, PartialEq)]
pub struct BcgaParams {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
}

impl BcgaParams {
    pub fn shapes(d: usize) -> Vec<(&'static str, Vec<usize>)> {
        vec![("wq", vec![d, d]), ("wk", vec![d, d]), ("wv", vec![d, d])]
    }

    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / libm::sqrt(d as f64);
        let draw = |rng: &mut Rng| (0..d * d).map(|_| rng.normal() * s).collect();
        BcgaParams { wq: draw(rng), wk: draw(rng), wv: draw(rng) }
    }

    pub fn fields(&self) -> [&Vec<f64>; 3] {
        [&self.wq, &self.wk, &self.wv]
    }

    pub fn fields_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.wq, &mut self.wk, &mut self.wv]
    }
}

/// Tape handles for one registration of [`BcgaParams`].
#[derive(Debug, Clone, Copy)]
pub struct BcgaVars {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

pub fn register_bcga(tape: &mut Tape, p: &BcgaParams, d: usize) -> Result<BcgaVars> {
    Ok(BcgaVars {
        wq: tape.leaf(&[d, d], p.wq.clone(), true)?,
        wk: tape.leaf(&[d, d], p.wk.clone(), true)?,
        wv: tape.leaf(&[d, d], p.wv.clone(), true)?,
    })
}

/// Cosine similarity of two vectors through eps-safe normalization.
pub fn cosine(tape: &mut Tape, a: Tensor, b: Tensor) -> Result<Tensor> {
    let an = tape.l2_normalize_rows(a, L2_EPS)?;
    let bn = tape.l2_normalize_rows(b, L2_EPS)?;
    tape.dot(an, bn)
}

/// Shared symmetric InfoNCE engine over two `[L x d]` row sets.
///
/// Row `j` of `a` is the positive of row `j` of `b`; negatives are the other
/// rows of the opposite set. Returns the mean over both directions and all
/// positions of the negative log softmax probability of the diagonal.
fn symmetric_infonce(tape: &mut Tape, a: Tensor, b: Tensor, tau: f64) -> Result<Tensor> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::ShapeMismatch { op: "symmetric_infonce", lhs: sa, rhs: sb });
    }
    let l = sa[0];
    let an = tape.l2_normalize_rows(a, L2_EPS)?;
    let bn = tape.l2_normalize_rows(b, L2_EPS)?;
    let bnt = tape.transpose(bn)?;
    let sim_ab = tape.matmul(an, bnt)?;
    let logits_ab = tape.scale(sim_ab, 1.0 / tau);
    let p_ab = tape.row_softmax(logits_ab, None)?;
    let diag_ab = tape.take_diag(p_ab)?;
    let log_ab = tape.log(diag_ab);
    let s_ab = tape.sum_all(log_ab);

    let logits_ba = tape.transpose(logits_ab)?;
    let p_ba = tape.row_softmax(logits_ba, None)?;
    let diag_ba = tape.take_diag(p_ba)?;
    let log_ba = tape.log(diag_ba);
    let s_ba = tape.sum_all(log_ba);

    let total = tape.add(s_ab, s_ba)?;
    Ok(tape.scale(total, -1.0 / (2.0 * l as f64)))
}

/// Symmetric batch-level contrastive loss over global embeddings.
/// Positives are matched image/report rows, negatives the rest of the batch.
pub fn global_loss(tape: &mut Tape, global_imgs: Tensor, global_txts: Tensor, tau1: f64) -> Result<Tensor> {
    symmetric_infonce(tape, global_imgs, global_txts, tau1)
}

/// Instance-aware group alignment: positions within one sequence are each
/// other's negatives, so no other pair is consulted.
pub fn iga_loss(tape: &mut Tape, locals: Tensor, groups: Tensor, tau2: f64) -> Result<Tensor> {
    symmetric_infonce(tape, groups, locals, tau2)
}

/// Grouped cross-modal alignment between group embeddings and their
/// cross-attended counterparts; same functional form as [`iga_loss`].
pub fn grouped_crossmodal_loss(tape: &mut Tape, groups: Tensor, crossmodal: Tensor, tau3: f64) -> Result<Tensor> {
    symmetric_infonce(tape, groups, crossmodal, tau3)
}

/// Scaled dot-product cross-attention of `queries` over `keys_values`:
/// `softmax((Q Wq)(KV Wk)^T / sqrt(d)) (KV Wv)`, row convention.
pub fn bcga_attend(tape: &mut Tape, queries: Tensor, keys_values: Tensor, vars: &BcgaVars) -> Result<Tensor> {
    let sq = tape.shape(queries).to_vec();
    let skv = tape.shape(keys_values).to_vec();
    if sq.len() != 2 || skv.len() != 2 || sq[1] != skv[1] {
        return Err(Error::ShapeMismatch { op: "bcga_attend", lhs: sq, rhs: skv });
    }
    let d = sq[1];
    let q = tape.matmul(queries, vars.wq)?;
    let k = tape.matmul(keys_values, vars.wk)?;
    let v = tape.matmul(keys_values, vars.wv)?;
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, 1.0 / libm::sqrt(d as f64));
    let beta = tape.row_softmax(scores, None)?;
    tape.matmul(beta, v)
}

/// The five loss components of one step, as tape scalars. Skipped variants
/// supply constant zeros.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_g: Tensor,
    pub l_tf: Tensor,
    pub l_vf: Tensor,
    pub l_gla: Tensor,
    pub l_gva: Tensor,
}

/// Loss component values of one step plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_g: f64,
    pub l_tf: f64,
    pub l_vf: f64,
    pub l_gla: f64,
    pub l_gva: f64,
    pub l_total: f64,
}

/// Combine component values exactly as the differentiable path does.
pub fn combine_components(l_g: f64, l_tf: f64, l_vf: f64, l_gla: f64, l_gva: f64, w: &LossWeights) -> f64 {
    w.lambda1 * l_g + (w.lambda2 * 0.5) * (l_tf + l_vf) + (w.lambda3 * 0.5) * (l_gla + l_gva)
}

/// Weighted total on the tape, with the component values retained for
/// logging. The recorded `l_total` is exactly the differentiated scalar.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    w.validate()?;
    let t1 = tape.scale(terms.l_g, w.lambda1);
    let s_iga = tape.add(terms.l_tf, terms.l_vf)?;
    let t2 = tape.scale(s_iga, w.lambda2 * 0.5);
    let s_bcga = tape.add(terms.l_gla, terms.l_gva)?;
    let t3 = tape.scale(s_bcga, w.lambda3 * 0.5);
    let t12 = tape.add(t1, t2)?;
    let total = tape.add(t12, t3)?;
    let breakdown = LossBreakdown {
        l_g: tape.scalar_value(terms.l_g),
        l_tf: tape.scalar_value(terms.l_tf),
        l_vf: tape.scalar_value(terms.l_vf),
        l_gla: tape.scalar_value(terms.l_gla),
        l_gva: tape.scalar_value(terms.l_gva),
        l_total: tape.scalar_value(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Scaled orthogonal rows: big norms keep the additive normalization
    /// epsilon far below the closed-form tolerances.
    fn scaled_eye(tape: &mut Tape, l: usize, d: usize, scale: f64) -> Tensor {
        let mut data = vec![0.0; l * d];
        for i in 0..l {
            data[i * d + i] = scale;
        }
        tape.constant(&[l, d], data).unwrap()
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let mut t = Tape::new();
        let a = t.constant(&[3], vec![100.0, -200.0, 50.0]).unwrap();
        let c = cosine(&mut t, a, a).unwrap();
        assert!(close(t.scalar_value(c), 1.0, 1e-9));
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(&[2], vec![3.0, 0.0]).unwrap();
        let b = t.constant(&[2], vec![0.0, 7.0]).unwrap();
        let c = cosine(&mut t, a, b).unwrap();
        assert!(close(t.scalar_value(c), 0.0, 1e-12));
    }

    #[test]
    fn cosine_matches_scalar_oracle() {
        let mut rng = Rng::from_seed(13);
        for _ in 0..20 {
            let a = rng.normal_vec(5);
            let b = rng.normal_vec(5);
            let mut t = Tape::new();
            let ta = t.constant(&[5], a.clone()).unwrap();
            let tb = t.constant(&[5], b.clone()).unwrap();
            let c = cosine(&mut t, ta, tb).unwrap();
            let na = libm::sqrt(a.iter().map(|v| v * v).sum::<f64>()) + L2_EPS;
            let nb = libm::sqrt(b.iter().map(|v| v * v).sum::<f64>()) + L2_EPS;
            let expect: f64 = a.iter().zip(&b).map(|(x, y)| (x / na) * (y / nb)).sum();
            assert!(close(t.scalar_value(c), expect, 1e-12));
        }
    }

    #[test]
    fn global_loss_single_pair_is_zero() {
        let mut t = Tape::new();
        let v = t.constant(&[1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let x = t.constant(&[1, 4], vec![-0.5, 0.8, 0.2, 0.4]).unwrap();
        let l = global_loss(&mut t, v, x, 0.3).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn global_loss_orthonormal_two_pair_closed_form() {
        let tau = 0.3;
        let mut t = Tape::new();
        let v = scaled_eye(&mut t, 2, 4, 1000.0);
        let x = scaled_eye(&mut t, 2, 4, 1000.0);
        let l = global_loss(&mut t, v, x, tau).unwrap();
        let expect = libm::log(1.0 + libm::exp(-1.0 / tau));
        assert!(close(t.scalar_value(l), expect, 1e-10), "{} vs {expect}", t.scalar_value(l));
    }

    #[test]
    fn global_loss_is_symmetric_in_modalities() {
        let mut rng = Rng::from_seed(3);
        let (b, d) = (4, 6);
        let vd = rng.normal_vec(b * d);
        let td = rng.normal_vec(b * d);
        let mut t = Tape::new();
        let v = t.constant(&[b, d], vd).unwrap();
        let x = t.constant(&[b, d], td).unwrap();
        let l1 = global_loss(&mut t, v, x, 0.3).unwrap();
        let l2 = global_loss(&mut t, x, v, 0.3).unwrap();
        assert!(close(t.scalar_value(l1), t.scalar_value(l2), 1e-12));
    }

    #[test]
    fn iga_loss_single_position_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(&[1, 3], vec![0.4, 0.5, -0.1]).unwrap();
        let b = t.constant(&[1, 3], vec![-0.2, 0.1, 0.7]).unwrap();
        let l = iga_loss(&mut t, a, b, 0.3).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);
    }

    #[test]
    fn iga_loss_orthonormal_closed_form() {
        let tau = 0.3;
        let mut t = Tape::new();
        let rows = scaled_eye(&mut t, 3, 5, 1000.0);
        let l = iga_loss(&mut t, rows, rows, tau).unwrap();
        let expect = libm::log(1.0 + 2.0 * libm::exp(-1.0 / tau));
        assert!(close(t.scalar_value(l), expect, 1e-10));
    }

    #[test]
    fn iga_loss_is_permutation_invariant() {
        let mut rng = Rng::from_seed(8);
        let (l, d) = (5, 4);
        let locals = rng.normal_vec(l * d);
        let groups = rng.normal_vec(l * d);
        let perm = [3usize, 0, 4, 2, 1];
        let permute = |xs: &[f64]| {
            let mut out = vec![0.0; l * d];
            for (dst, &src) in perm.iter().enumerate() {
                out[dst * d..(dst + 1) * d].copy_from_slice(&xs[src * d..(src + 1) * d]);
            }
            out
        };
        let run = |ld: Vec<f64>, gd: Vec<f64>| {
            let mut t = Tape::new();
            let a = t.constant(&[l, d], ld).unwrap();
            let b = t.constant(&[l, d], gd).unwrap();
            let loss = iga_loss(&mut t, a, b, 0.3).unwrap();
            t.scalar_value(loss)
        };
        let v1 = run(locals.clone(), groups.clone());
        let v2 = run(permute(&locals), permute(&groups));
        assert!(close(v1, v2, 1e-12));
    }

    #[test]
    fn grouped_loss_two_position_closed_form() {
        let tau = 0.1;
        let mut t = Tape::new();
        let rows = scaled_eye(&mut t, 2, 3, 1000.0);
        let l = grouped_crossmodal_loss(&mut t, rows, rows, tau).unwrap();
        let expect = libm::log(1.0 + libm::exp(-10.0));
        assert!(close(t.scalar_value(l), expect, 1e-12));
    }

    #[test]
    fn infonce_components_are_non_negative() {
        let mut rng = Rng::from_seed(10);
        for _ in 0..30 {
            let l = 2 + rng.below(4) as usize;
            let d = 3 + rng.below(3) as usize;
            let mut t = Tape::new();
            let a = t.constant(&[l, d], rng.normal_vec(l * d)).unwrap();
            let b = t.constant(&[l, d], rng.normal_vec(l * d)).unwrap();
            let loss = iga_loss(&mut t, a, b, 0.3).unwrap();
            assert!(t.scalar_value(loss) >= -1e-12);
        }
    }

    #[test]
    fn temperature_monotone_at_dominant_positive() {
        // With the positive strictly largest in every row, sharpening the
        // softmax can only shrink the loss.
        let mut t = Tape::new();
        let rows = scaled_eye(&mut t, 4, 4, 50.0);
        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.5, 0.3, 0.1, 0.05] {
            let l = iga_loss(&mut t, rows, rows, tau).unwrap();
            let v = t.scalar_value(l);
            assert!(v <= prev + 1e-15, "loss rose from {prev} to {v} at tau {tau}");
            prev = v;
        }
    }

    #[test]
    fn bcga_single_kv_row_ignores_scores() {
        let mut rng = Rng::from_seed(2);
        let d = 4;
        let params = BcgaParams::init(d, &mut rng);
        let mut t = Tape::new();
        let vars = register_bcga(&mut t, &params, d).unwrap();
        let q = t.constant(&[3, d], rng.normal_vec(3 * d)).unwrap();
        let kv_data = rng.normal_vec(d);
        let kv = t.constant(&[1, d], kv_data.clone()).unwrap();
        let out = bcga_attend(&mut t, q, kv, &vars).unwrap();
        // Expected: kv . Wv for every query row.
        let mut expect = vec![0.0; d];
        for j in 0..d {
            for k in 0..d {
                expect[j] += kv_data[k] * params.wv[k * d + j];
            }
        }
        for r in 0..3 {
            for j in 0..d {
                assert!(close(t.value(out)[r * d + j], expect[j], 1e-12));
            }
        }
    }

    #[test]
    fn bcga_identity_params_equal_rows_pass_through() {
        let d = 3;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        let params = BcgaParams { wq: eye.clone(), wk: eye.clone(), wv: eye };
        let mut t = Tape::new();
        let vars = register_bcga(&mut t, &params, d).unwrap();
        let q = t.constant(&[2, d], vec![0.3, -0.4, 0.9, 1.2, 0.0, -0.7]).unwrap();
        let z = [0.5, -1.5, 2.5];
        let kv = t.constant(&[4, d], z.repeat(4)).unwrap();
        let out = bcga_attend(&mut t, q, kv, &vars).unwrap();
        for r in 0..2 {
            for j in 0..d {
                assert!(close(t.value(out)[r * d + j], z[j], 1e-12));
            }
        }
    }

    #[test]
    fn bcga_matches_scalar_attention_oracle() {
        let mut rng = Rng::from_seed(77);
        let (j, k, d) = (3, 5, 4);
        let params = BcgaParams::init(d, &mut rng);
        let qd = rng.normal_vec(j * d);
        let kvd = rng.normal_vec(k * d);
        let mut t = Tape::new();
        let vars = register_bcga(&mut t, &params, d).unwrap();
        let q = t.constant(&[j, d], qd.clone()).unwrap();
        let kv = t.constant(&[k, d], kvd.clone()).unwrap();
        let out = bcga_attend(&mut t, q, kv, &vars).unwrap();

        // Double-loop reference with the same row convention.
        let mat = |x: &[f64], w: &[f64], rows: usize| -> Vec<f64> {
            let mut o = vec![0.0; rows * d];
            for r in 0..rows {
                for cc in 0..d {
                    for m in 0..d {
                        o[r * d + cc] += x[r * d + m] * w[m * d + cc];
                    }
                }
            }
            o
        };
        let qp = mat(&qd, &params.wq, j);
        let kp = mat(&kvd, &params.wk, k);
        let vp = mat(&kvd, &params.wv, k);
        let scale = 1.0 / libm::sqrt(d as f64);
        for r in 0..j {
            let mut scores = vec![0.0; k];
            for c in 0..k {
                for m in 0..d {
                    scores[c] += qp[r * d + m] * kp[c * d + m];
                }
                scores[c] *= scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| libm::exp(s - mx)).collect();
            let denom: f64 = exps.iter().sum();
            for cc in 0..d {
                let mut expect = 0.0;
                for c in 0..k {
                    expect += exps[c] / denom * vp[c * d + cc];
                }
                assert!(close(t.value(out)[r * d + cc], expect, 1e-10));
            }
        }
    }

    #[test]
    fn total_loss_zero_components() {
        let mut t = Tape::new();
        let z = t.scalar(0.0);
        let terms = LossTerms { l_g: z, l_tf: z, l_vf: z, l_gla: z, l_gva: z };
        let (total, bd) = total_loss(&mut t, &terms, &LossWeights::default_values()).unwrap();
        assert_eq!(t.scalar_value(total), 0.0);
        assert_eq!(bd.l_total, 0.0);
    }

    #[test]
    fn total_loss_forced_arithmetic() {
        let mut t = Tape::new();
        let terms = LossTerms {
            l_g: t.scalar(1.0),
            l_tf: t.scalar(2.0),
            l_vf: t.scalar(2.0),
            l_gla: t.scalar(4.0),
            l_gva: t.scalar(4.0),
        };
        let (_, bd) = total_loss(&mut t, &terms, &LossWeights::default_values()).unwrap();
        assert_eq!(bd.l_total, 3.5);
        assert_eq!(
            bd.l_total,
            combine_components(1.0, 2.0, 2.0, 4.0, 4.0, &LossWeights::default_values())
        );
    }

    #[test]
    fn weights_reject_all_zero_and_negative() {
        assert!(LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 }.validate().is_err());
        assert!(LossWeights { lambda1: -0.1, lambda2: 0.5, lambda3: 0.5 }.validate().is_err());
        assert!(LossWeights { lambda1: 0.5, lambda2: 0.0, lambda3: 0.0 }.validate().is_ok());
    }

    #[test]
    fn temperatures_must_be_positive() {
        assert!(Temperatures { tau1: 0.0, tau2: 0.3, tau3: 0.1 }.validate().is_err());
        assert!(Temperatures::default_values().validate().is_ok());
    }
}
