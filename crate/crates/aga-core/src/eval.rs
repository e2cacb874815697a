//! Downstream evaluation: retrieval precision, zero-shot prompt
//! classification, linear probing on frozen embeddings, grouping fidelity
//! against planted alignments, and heatmap preparation.
//!
//! Everything here is read-only over a frozen parameter set; encoders run
//! forward through a throwaway tape and only the values are kept.

use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{LabeledPair, WorldSpec};
use crate::encoders::{encode_image, encode_text, register_encoder, EncoderConfig, TextSample};
use crate::error::Error;
use crate::grouping::compute_groups;
use crate::losses::L2_EPS;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::trainer::ModelParams;
use crate::Result;

/// Cosine similarity of two raw vectors (additive-eps normalization).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(a.iter().map(|v| v * v).sum::<f64>()) + L2_EPS;
    let nb = libm::sqrt(b.iter().map(|v| v * v).sum::<f64>()) + L2_EPS;
    a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum()
}

/// Global embeddings and labels for a pair list.
pub struct EmbeddedPairs {
    pub image: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// Forward every pair through the encoders, keeping global embeddings.
pub fn embed_pairs(params: &ModelParams, enc_cfg: &EncoderConfig, pairs: &[LabeledPair]) -> Result<EmbeddedPairs> {
    let mut image = Vec::with_capacity(pairs.len());
    let mut text = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mut tape = Tape::new();
        let vars = register_encoder(&mut tape, &params.encoder, enc_cfg)?;
        let img = encode_image(&mut tape, &pair.image, &vars, enc_cfg)?;
        let txt = encode_text(&mut tape, &pair.text, &vars, enc_cfg)?;
        image.push(tape.value(img.global).to_vec());
        text.push(tape.value(txt.global).to_vec());
        labels.push(pair.label);
    }
    Ok(EmbeddedPairs { image, text, labels })
}

/// Ranked retrieval plus precision at the requested cutoffs.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Per query: candidate indices, best first (ties by candidate index).
    pub rankings: Vec<Vec<usize>>,
    /// `(K, mean precision at K)` in the requested order.
    pub precision_at: Vec<(usize, f64)>,
}

/// Rank every text candidate by cosine similarity to each image query and
/// score the fraction of the top K sharing the query's category.
pub fn retrieval_precision(
    image_embeds: &[Vec<f64>],
    text_embeds: &[Vec<f64>],
    query_cats: &[usize],
    pool_cats: &[usize],
    ks: &[usize],
) -> Result<RetrievalResult> {
    let pool = text_embeds.len();
    if pool == 0 || image_embeds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if query_cats.len() != image_embeds.len() {
        return Err(Error::DimMismatch { what: "query categories", expected: image_embeds.len(), actual: query_cats.len() });
    }
    if pool_cats.len() != pool {
        return Err(Error::DimMismatch { what: "pool categories", expected: pool, actual: pool_cats.len() });
    }
    for &k in ks {
        if k == 0 || k > pool {
            return Err(Error::KExceedsPool { k, pool });
        }
    }
    let mut rankings = Vec::with_capacity(image_embeds.len());
    for q in image_embeds {
        let mut order: Vec<usize> = (0..pool).collect();
        let sims: Vec<f64> = text_embeds.iter().map(|t| cosine_sim(q, t)).collect();
        order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
        rankings.push(order);
    }
    let precision_at = ks
        .iter()
        .map(|&k| {
            let mut total = 0.0;
            for (qi, ranking) in rankings.iter().enumerate() {
                let hits = ranking[..k].iter().filter(|&&c| pool_cats[c] == query_cats[qi]).count();
                total += hits as f64 / k as f64;
            }
            (k, total / rankings.len() as f64)
        })
        .collect();
    Ok(RetrievalResult { rankings, precision_at })
}

/// Instance-level precision at one: how often the query's own paired report
/// ranks first. Implemented as category precision with singleton categories.
pub fn instance_precision_at_one(image_embeds: &[Vec<f64>], text_embeds: &[Vec<f64>]) -> Result<f64> {
    if image_embeds.len() != text_embeds.len() {
        return Err(Error::DimMismatch { what: "paired pools", expected: image_embeds.len(), actual: text_embeds.len() });
    }
    let ids: Vec<usize> = (0..image_embeds.len()).collect();
    let res = retrieval_precision(image_embeds, text_embeds, &ids, &ids, &[1])?;
    Ok(res.precision_at[0].1)
}

/// One-vs-rest ROC-AUC by average ranks (Mann-Whitney; ties share rank).
pub fn binary_roc_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    debug_assert_eq!(n, positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank over the tie block [i, j].
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..n).filter(|&i| positive[i]).map(|i| ranks[i]).sum();
    (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Macro-averaged one-vs-rest ROC-AUC over class score columns.
pub fn macro_roc_auc(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for class in 0..num_classes {
        let col: Vec<f64> = scores.iter().map(|s| s[class]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let n_pos = pos.iter().filter(|&&p| p).count();
        if n_pos == 0 || n_pos == pos.len() {
            continue;
        }
        total += binary_roc_auc(&col, &pos);
        counted += 1;
    }
    if counted == 0 {
        0.5
    } else {
        total / counted as f64
    }
}

/// Macro-averaged F1 from predictions.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let mut total = 0.0;
    for class in 0..num_classes {
        let tp = predictions
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == class && l == class)
            .count() as f64;
        let fp = predictions
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == class && l != class)
            .count() as f64;
        let fn_ = predictions
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p != class && l == class)
            .count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        total += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    total / num_classes as f64
}

/// Zero-shot prompt classification outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    pub prompt_embeds: Vec<Vec<f64>>,
    /// Per query: cosine similarity to each class prompt.
    pub scores: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub roc_auc: f64,
}

/// Encode each class prompt, predict each image by the nearest prompt in
/// cosine similarity, and score accuracy, macro-F1, and macro ROC-AUC.
pub fn zero_shot_classify(
    image_embeds: &[Vec<f64>],
    labels: &[usize],
    world: &WorldSpec,
    params: &ModelParams,
    enc_cfg: &EncoderConfig,
) -> Result<ZeroShotResult> {
    let num_classes = world.config.num_classes;
    if num_classes < 2 {
        return Err(Error::NeedTwoClasses);
    }
    let mut prompt_embeds = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let sample = world.prompt_sample(class)?;
        let mut tape = Tape::new();
        let vars = register_encoder(&mut tape, &params.encoder, enc_cfg)?;
        let enc = encode_text(&mut tape, &sample, &vars, enc_cfg)?;
        prompt_embeds.push(tape.value(enc.global).to_vec());
    }
    let scores: Vec<Vec<f64>> = image_embeds
        .iter()
        .map(|img| prompt_embeds.iter().map(|p| cosine_sim(img, p)).collect())
        .collect();
    let predictions: Vec<usize> = scores
        .iter()
        .map(|row| {
            (0..num_classes).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();
    let correct = predictions.iter().zip(labels).filter(|&(&p, &l)| p == l).count();
    let accuracy = correct as f64 / labels.len().max(1) as f64;
    Ok(ZeroShotResult {
        accuracy,
        macro_f1: macro_f1(&predictions, labels, num_classes),
        roc_auc: macro_roc_auc(&scores, labels, num_classes),
        prompt_embeds,
        scores,
        predictions,
    })
}

/// Multinomial logistic probe trained by plain gradient descent on frozen
/// embeddings; returns macro ROC-AUC on the test set per label fraction.
pub fn linear_probe(
    train_embeds: &[Vec<f64>],
    train_labels: &[usize],
    test_embeds: &[Vec<f64>],
    test_labels: &[usize],
    fractions: &[f64],
    num_classes: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if num_classes < 2 {
        return Err(Error::NeedTwoClasses);
    }
    if train_embeds.is_empty() || test_embeds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = train_embeds[0].len();
    let mut results = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        // Deterministic stratified subsample.
        let mut chosen: Vec<usize> = Vec::new();
        let mut rng = Rng::substream(seed, "probe");
        for class in 0..num_classes {
            let mut members: Vec<usize> = (0..train_labels.len())
                .filter(|&i| train_labels[i] == class)
                .collect();
            rng.shuffle(&mut members);
            let want = libm::ceil(fraction * members.len() as f64) as usize;
            if want == 0 || members.is_empty() {
                return Err(Error::FractionTooSmall { fraction });
            }
            chosen.extend_from_slice(&members[..want.min(members.len())]);
        }
        chosen.sort_unstable();

        // Softmax regression, full-batch gradient descent.
        let n = chosen.len();
        let mut w = vec![0.0; d * num_classes];
        let mut bias = vec![0.0; num_classes];
        let lr = 0.5;
        for _ in 0..400 {
            let mut gw = vec![0.0; d * num_classes];
            let mut gb = vec![0.0; num_classes];
            for &i in &chosen {
                let x = &train_embeds[i];
                let p = softmax_logits(x, &w, &bias, num_classes);
                for c in 0..num_classes {
                    let err = p[c] - if train_labels[i] == c { 1.0 } else { 0.0 };
                    gb[c] += err;
                    for j in 0..d {
                        gw[j * num_classes + c] += x[j] * err;
                    }
                }
            }
            for j in 0..d * num_classes {
                w[j] -= lr * gw[j] / n as f64;
            }
            for c in 0..num_classes {
                bias[c] -= lr * gb[c] / n as f64;
            }
        }

        let scores: Vec<Vec<f64>> = test_embeds
            .iter()
            .map(|x| softmax_logits(x, &w, &bias, num_classes))
            .collect();
        results.push((fraction, macro_roc_auc(&scores, test_labels, num_classes)));
    }
    Ok(results)
}

fn softmax_logits(x: &[f64], w: &[f64], b: &[f64], classes: usize) -> Vec<f64> {
    let mut logits = b.to_vec();
    for (j, &xj) in x.iter().enumerate() {
        for c in 0..classes {
            logits[c] += xj * w[j * classes + c];
        }
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for l in logits.iter_mut() {
        *l = libm::exp(*l - mx);
        denom += *l;
    }
    for l in logits.iter_mut() {
        *l /= denom;
    }
    logits
}

/// Token-to-patch weights of one pair at fixed thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAlignment {
    /// `[m_i x n]` row-major alignment weights.
    pub alpha: Vec<f64>,
    pub m_i: usize,
    pub n: usize,
    /// Report positions backing each alpha row.
    pub real_positions: Vec<usize>,
}

/// Run encoding and grouping forward for one pair, keeping only alpha.
pub fn pair_alignment(
    params: &ModelParams,
    enc_cfg: &EncoderConfig,
    sigma_tg: f64,
    sigma_vg: f64,
    pair: &LabeledPair,
) -> Result<PairAlignment> {
    let mut tape = Tape::new();
    let vars = register_encoder(&mut tape, &params.encoder, enc_cfg)?;
    let img = encode_image(&mut tape, &pair.image, &vars, enc_cfg)?;
    let txt = encode_text(&mut tape, &pair.text, &vars, enc_cfg)?;
    let (align, _) = compute_groups(&mut tape, txt.real_tokens, img.patch_embeds, sigma_tg, sigma_vg)?;
    let m_i = txt.real_positions.len();
    Ok(PairAlignment {
        alpha: tape.value(align.alpha).to_vec(),
        m_i,
        n: enc_cfg.n_patches,
        real_positions: txt.real_positions,
    })
}

/// Mean planted-mass statistics over a pair list.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingFidelity {
    /// Per pair: mean alpha mass on planted patches over concept tokens.
    pub per_pair: Vec<f64>,
    pub mean: f64,
    /// Ten equal-width bins over `[0, 1]`.
    pub histogram: [usize; 10],
}

/// Sum each concept token's alpha row over its planted patch indices and
/// aggregate across pairs.
pub fn grouping_fidelity(
    params: &ModelParams,
    enc_cfg: &EncoderConfig,
    sigma_tg: f64,
    sigma_vg: f64,
    pairs: &[LabeledPair],
) -> Result<GroupingFidelity> {
    let mut per_pair = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let pa = pair_alignment(params, enc_cfg, sigma_tg, sigma_vg, pair)?;
        per_pair.push(planted_mass(&pa, pair)?);
    }
    Ok(aggregate_fidelity(per_pair))
}

/// Mean planted alpha mass of one pair's concept tokens.
pub fn planted_mass(pa: &PairAlignment, pair: &LabeledPair) -> Result<f64> {
    if pair.planted.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for group in &pair.planted {
        let row = pa
            .real_positions
            .iter()
            .position(|&p| p == group.token_pos)
            .ok_or(Error::DimMismatch {
                what: "planted token position",
                expected: pa.real_positions.len(),
                actual: group.token_pos,
            })?;
        let mass: f64 = group.patch_indices.iter().map(|&n| pa.alpha[row * pa.n + n]).sum();
        total += mass;
    }
    Ok(total / pair.planted.len() as f64)
}

/// Fold per-pair masses into the aggregate report.
pub fn aggregate_fidelity(per_pair: Vec<f64>) -> GroupingFidelity {
    let mean = if per_pair.is_empty() {
        0.0
    } else {
        per_pair.iter().sum::<f64>() / per_pair.len() as f64
    };
    let mut histogram = [0usize; 10];
    for &v in &per_pair {
        let bin = ((v * 10.0) as usize).min(9);
        histogram[bin] += 1;
    }
    GroupingFidelity { per_pair, mean, histogram }
}

/// Validate grid dimensions and max-normalize an alpha row for rendering.
pub fn heatmap_grid(alpha_row: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows * cols != alpha_row.len() {
        return Err(Error::DimMismatch {
            what: "heatmap grid",
            expected: alpha_row.len(),
            actual: rows * cols,
        });
    }
    let max = alpha_row.iter().cloned().fold(0.0f64, f64::max);
    if max == 0.0 {
        return Ok(alpha_row.to_vec());
    }
    Ok(alpha_row.iter().map(|v| v / max).collect())
}

impl WorldSpec {
    /// The class prompt as an encodable text sample.
    pub fn prompt_sample(&self, class_id: usize) -> Result<TextSample> {
        let prompt = self.class_prompts.get(class_id).ok_or(Error::InvalidConfig {
            field: "class_id",
            message: alloc::format!("class {class_id} out of range"),
        })?;
        let mut token_ids = vec![0u32; self.config.m_max];
        let mut mask = vec![false; self.config.m_max];
        for (i, &t) in prompt.iter().take(self.config.m_max).enumerate() {
            token_ids[i] = t;
            mask[i] = true;
        }
        Ok(TextSample { token_ids, mask })
    }
}
