//! Synthetic paired corpus with planted token-to-patch correspondences.
//!
//! A world fixes a set of concepts: disjoint token groups tied to frozen
//! patch-feature signatures. Each sampled pair picks a class, stamps the
//! class's concept signatures (plus noise) into disjoint rectangular regions
//! of the patch grid, and writes the concept tokens into the report among
//! random distractor tokens. The ground-truth map from each concept token to
//! its region's patch indices ships with the pair, so grouping fidelity can
//! be scored exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoders::{EncoderConfig, ImageSample, TextSample};
use crate::error::Error;
use crate::rng::Rng;
use crate::Result;

/// Size and noise knobs of the synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub num_classes: usize,
    pub concepts_per_class: usize,
    pub tokens_per_concept: usize,
    pub vocab: u32,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub m_max: usize,
    pub patch_features: usize,
    /// Standard deviation of additive patch noise (background and signal).
    pub noise_std: f64,
    /// Probability of inserting a distractor token at each slot.
    pub distractor_rate: f64,
    /// Probability that each class concept appears in a given pair (at
    /// least one always does). Below one, concept co-occurrence is broken,
    /// which makes the token-region correspondence statistically
    /// identifiable instead of only determined up to permutation.
    pub concept_rate: f64,
    /// Signatures are `signature_base * shared + signature_unique * own`
    /// over unit-normal draws. A dominant shared component makes planted
    /// regions easy to find but classes hard to tell apart from pooled
    /// features alone, so fine-grained alignment has something to add.
    pub signature_base: f64,
    pub signature_unique: f64,
    /// Inclusive range of planted region side lengths.
    pub region_min: usize,
    pub region_max: usize,
}

impl CorpusConfig {
    /// Desk-scale defaults: 3 classes, 2 concepts each, 6x6 grid.
    pub fn desk_default() -> Self {
        CorpusConfig {
            num_classes: 3,
            concepts_per_class: 2,
            tokens_per_concept: 1,
            vocab: 64,
            grid_rows: 6,
            grid_cols: 6,
            m_max: 24,
            patch_features: 8,
            noise_std: 0.1,
            distractor_rate: 0.2,
            concept_rate: 0.65,
            signature_base: 1.0,
            signature_unique: 0.35,
            region_min: 1,
            region_max: 2,
        }
    }

    pub fn n_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn n_concepts(&self) -> usize {
        self.num_classes * self.concepts_per_class
    }

    /// First distractor token id; ids below it (except pad 0) are concept
    /// tokens.
    pub fn distractor_base(&self) -> u32 {
        1 + (self.n_concepts() * self.tokens_per_concept) as u32
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, message: alloc::string::String| {
            Err(Error::InvalidConfig { field, message })
        };
        if self.num_classes == 0 {
            return bad("num_classes", "must be >= 1".into());
        }
        if self.concepts_per_class == 0 {
            return bad("concepts_per_class", "must be >= 1".into());
        }
        if self.tokens_per_concept == 0 {
            return bad("tokens_per_concept", "must be >= 1".into());
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("grid_rows", "grid must be non-empty".into());
        }
        if self.patch_features == 0 {
            return bad("patch_features", "must be >= 1".into());
        }
        if self.region_min == 0 || self.region_min > self.region_max {
            return bad("region_min", "need 1 <= region_min <= region_max".into());
        }
        if self.region_max > self.grid_rows.min(self.grid_cols) {
            return bad("region_max", "region side exceeds the grid".into());
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return bad("noise_std", format!("must be >= 0, got {}", self.noise_std));
        }
        if !(0.0..=0.95).contains(&self.distractor_rate) {
            return bad("distractor_rate", format!("must be in [0, 0.95], got {}", self.distractor_rate));
        }
        if self.concept_rate.is_nan() || self.concept_rate <= 0.0 || self.concept_rate > 1.0 {
            return bad("concept_rate", format!("must be in (0, 1], got {}", self.concept_rate));
        }
        if self.signature_base.is_nan() || self.signature_base < 0.0 || self.signature_unique.is_nan() || self.signature_unique <= 0.0 {
            return bad("signature_unique", "need signature_base >= 0 and signature_unique > 0".into());
        }
        let concept_tokens = self.concepts_per_class * self.tokens_per_concept;
        if self.m_max < concept_tokens {
            return bad(
                "m_max",
                format!("must hold all {concept_tokens} concept tokens of a class"),
            );
        }
        if u64::from(self.distractor_base()) >= u64::from(self.vocab) {
            return bad("vocab", "too small for pad + concept + distractor tokens".into());
        }
        // Disjoint region placement must always be feasible.
        let worst = self.concepts_per_class * self.region_max * self.region_max;
        if worst > self.n_patches() {
            return bad("region_max", "class regions cannot fit the grid".into());
        }
        Ok(())
    }

    /// Encoder shape config over this world.
    pub fn encoder_config(&self, hidden: usize, embed_dim: usize, mix_window: usize) -> EncoderConfig {
        EncoderConfig {
            n_patches: self.n_patches(),
            patch_features: self.patch_features,
            vocab: self.vocab,
            m_max: self.m_max,
            hidden,
            embed_dim,
            mix_window,
        }
    }
}

/// One concept: a token group tied to a visual signature.
#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub class_id: usize,
    pub tokens: Vec<u32>,
    pub signature: Vec<f64>,
}

/// Frozen world: all randomness resolved once from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    pub config: CorpusConfig,
    pub concepts: Vec<Concept>,
    /// Per class: the concept token sequence used as its textual prompt.
    pub class_prompts: Vec<Vec<u32>>,
}

/// Ground-truth group for one concept token occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedGroup {
    /// Report position of the token (equals its row among real tokens).
    pub token_pos: usize,
    /// Patch indices carrying the token's visual signature.
    pub patch_indices: Vec<usize>,
}

/// One training/eval unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub image: ImageSample,
    pub text: TextSample,
    pub label: usize,
    pub planted: Vec<PlantedGroup>,
}

/// Train/val/test pair lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<LabeledPair>,
    pub val: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
}

/// Deterministically derive a world from a seed: concept token ids are
/// assigned in blocks (id 0 is the pad), signatures drawn once and frozen,
/// and each class prompt is its concepts' token sequence.
pub fn build_world(seed: u64, config: CorpusConfig) -> Result<WorldSpec> {
    config.validate()?;
    let mut rng = Rng::substream(seed, "world");
    let shared = rng.normal_vec(config.patch_features);
    let mut concepts = Vec::with_capacity(config.n_concepts());
    let mut next_id = 1u32;
    for class_id in 0..config.num_classes {
        for _ in 0..config.concepts_per_class {
            let tokens: Vec<u32> = (0..config.tokens_per_concept)
                .map(|_| {
                    let id = next_id;
                    next_id += 1;
                    id
                })
                .collect();
            let own = rng.normal_vec(config.patch_features);
            let signature: Vec<f64> = shared
                .iter()
                .zip(&own)
                .map(|(&s, &o)| config.signature_base * s + config.signature_unique * o)
                .collect();
            concepts.push(Concept { class_id, tokens, signature });
        }
    }
    let class_prompts = (0..config.num_classes)
        .map(|class_id| {
            concepts
                .iter()
                .filter(|c| c.class_id == class_id)
                .flat_map(|c| c.tokens.iter().copied())
                .collect()
        })
        .collect();
    Ok(WorldSpec { seed, config, concepts, class_prompts })
}

/// All grid cells of a `h x w` rectangle at `(top, left)`.
fn region_cells(cfg: &CorpusConfig, top: usize, left: usize, h: usize, w: usize) -> Vec<usize> {
    let mut cells = Vec::with_capacity(h * w);
    for r in top..top + h {
        for c in left..left + w {
            cells.push(r * cfg.grid_cols + c);
        }
    }
    cells
}

/// Pick a rectangular region disjoint from `taken`, uniformly over all
/// feasible placements. Enumerating placements keeps this exact and free of
/// unbounded rejection loops.
fn place_region(cfg: &CorpusConfig, taken: &[bool], rng: &mut Rng) -> Result<Vec<usize>> {
    let mut candidates = Vec::new();
    for h in cfg.region_min..=cfg.region_max {
        for w in cfg.region_min..=cfg.region_max {
            for top in 0..=(cfg.grid_rows - h) {
                for left in 0..=(cfg.grid_cols - w) {
                    let cells = region_cells(cfg, top, left, h, w);
                    if cells.iter().all(|&c| !taken[c]) {
                        candidates.push(cells);
                    }
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::InvalidConfig {
            field: "region_max",
            message: "no disjoint region placement available".into(),
        });
    }
    let pick = rng.below(candidates.len() as u64) as usize;
    Ok(candidates.swap_remove(pick))
}

/// Sample one pair with a randomly drawn class.
pub fn sample_pair(world: &WorldSpec, rng: &mut Rng) -> Result<LabeledPair> {
    let label = rng.below(world.config.num_classes as u64) as usize;
    sample_pair_with_label(world, rng, label)
}

/// Sample one pair for a fixed class label.
pub fn sample_pair_with_label(world: &WorldSpec, rng: &mut Rng, label: usize) -> Result<LabeledPair> {
    let cfg = &world.config;
    if label >= cfg.num_classes {
        return Err(Error::InvalidConfig { field: "label", message: format!("class {label} out of range") });
    }
    let n = cfg.n_patches();
    let c = cfg.patch_features;

    // Background: pure noise patches.
    let mut patches = vec![0.0; n * c];
    for v in patches.iter_mut() {
        *v = cfg.noise_std * rng.normal();
    }

    // Pick this pair's concepts: each class concept appears with the
    // configured rate, at least one always does.
    let all_class_concepts: Vec<usize> = world
        .concepts
        .iter()
        .enumerate()
        .filter_map(|(i, con)| if con.class_id == label { Some(i) } else { None })
        .collect();
    let class_concepts: Vec<usize> = loop {
        let picked: Vec<usize> = all_class_concepts
            .iter()
            .copied()
            .filter(|_| rng.next_f64() < cfg.concept_rate)
            .collect();
        if !picked.is_empty() {
            break picked;
        }
    };
    let mut taken = vec![false; n];
    let mut regions = Vec::with_capacity(class_concepts.len());
    for &ci in &class_concepts {
        let cells = place_region(cfg, &taken, rng)?;
        for &cell in &cells {
            taken[cell] = true;
            for f in 0..c {
                patches[cell * c + f] = world.concepts[ci].signature[f] + cfg.noise_std * rng.normal();
            }
        }
        regions.push(cells);
    }

    // Report: concept tokens in order, distractors interleaved at the
    // configured rate, everything capped at m_max.
    let concept_stream: Vec<(u32, usize)> = class_concepts
        .iter()
        .enumerate()
        .flat_map(|(slot, &ci)| {
            world.concepts[ci].tokens.iter().map(move |&t| (t, slot)).collect::<Vec<_>>()
        })
        .collect();
    let dis_lo = cfg.distractor_base();
    let dis_span = cfg.vocab - dis_lo;
    let mut seq: Vec<u32> = Vec::new();
    let mut planted = Vec::new();
    for (i, &(tok, region_slot)) in concept_stream.iter().enumerate() {
        let remaining = concept_stream.len() - i;
        while seq.len() + remaining < cfg.m_max && rng.next_f64() < cfg.distractor_rate {
            seq.push(dis_lo + rng.below(dis_span as u64) as u32);
        }
        planted.push(PlantedGroup { token_pos: seq.len(), patch_indices: regions[region_slot].clone() });
        seq.push(tok);
    }
    while seq.len() < cfg.m_max && rng.next_f64() < cfg.distractor_rate {
        seq.push(dis_lo + rng.below(dis_span as u64) as u32);
    }

    let mut token_ids = vec![0u32; cfg.m_max];
    let mut mask = vec![false; cfg.m_max];
    for (i, &t) in seq.iter().enumerate() {
        token_ids[i] = t;
        mask[i] = true;
    }

    Ok(LabeledPair {
        image: ImageSample { patches },
        text: TextSample { token_ids, mask },
        label,
        planted,
    })
}

/// Generate disjoint, deterministically seeded splits with near-uniform
/// class balance (labels are assigned round-robin, then shuffled).
pub fn make_splits(world: &WorldSpec, sizes: (usize, usize, usize), rng: &mut Rng) -> Result<Splits> {
    let gen = |count: usize, rng: &mut Rng| -> Result<Vec<LabeledPair>> {
        let mut labels: Vec<usize> = (0..count).map(|i| i % world.config.num_classes).collect();
        rng.shuffle(&mut labels);
        labels
            .into_iter()
            .map(|label| sample_pair_with_label(world, rng, label))
            .collect()
    };
    Ok(Splits {
        train: gen(sizes.0, rng)?,
        val: gen(sizes.1, rng)?,
        test: gen(sizes.2, rng)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn same_seed_builds_identical_worlds() {
        let w1 = build_world(42, CorpusConfig::desk_default()).unwrap();
        let w2 = build_world(42, CorpusConfig::desk_default()).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn default_world_has_three_classes() {
        let w = build_world(1, CorpusConfig::desk_default()).unwrap();
        assert_eq!(w.config.num_classes, 3);
        assert_eq!(w.class_prompts.len(), 3);
    }

    #[test]
    fn concept_token_sets_are_disjoint_across_seeds() {
        for seed in 0..100 {
            let w = build_world(seed, CorpusConfig::desk_default()).unwrap();
            let mut seen = BTreeSet::new();
            for concept in &w.concepts {
                for &t in &concept.tokens {
                    assert!(seen.insert(t), "token {t} reused across concepts (seed {seed})");
                    assert!(t >= 1 && t < w.config.distractor_base());
                }
            }
        }
    }

    #[test]
    fn zero_noise_single_concept_patches_equal_signature() {
        let mut cfg = CorpusConfig::desk_default();
        cfg.noise_std = 0.0;
        cfg.concepts_per_class = 1;
        let w = build_world(5, cfg).unwrap();
        let mut rng = Rng::substream(5, "pairs");
        let pair = sample_pair(&w, &mut rng).unwrap();
        let c = w.config.patch_features;
        let concept = w.concepts.iter().find(|k| k.class_id == pair.label).unwrap();
        let planted_cells: BTreeSet<usize> =
            pair.planted.iter().flat_map(|p| p.patch_indices.iter().copied()).collect();
        assert!(!planted_cells.is_empty());
        for &cell in &planted_cells {
            assert_eq!(&pair.image.patches[cell * c..(cell + 1) * c], concept.signature.as_slice());
        }
        // Background patches are exactly zero at zero noise.
        for cell in 0..w.config.n_patches() {
            if !planted_cells.contains(&cell) {
                assert!(pair.image.patches[cell * c..(cell + 1) * c].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn planted_groups_are_nonempty_and_in_bounds() {
        let w = build_world(9, CorpusConfig::desk_default()).unwrap();
        let mut rng = Rng::substream(9, "pairs");
        for _ in 0..200 {
            let pair = sample_pair(&w, &mut rng).unwrap();
            let max_tokens =
                w.config.concepts_per_class * w.config.tokens_per_concept;
            assert!(!pair.planted.is_empty() && pair.planted.len() <= max_tokens);
            for group in &pair.planted {
                assert!(!group.patch_indices.is_empty());
                assert!(group.patch_indices.iter().all(|&i| i < w.config.n_patches()));
                assert!(group.token_pos < w.config.m_max);
                assert!(pair.text.mask[group.token_pos]);
                // The token at the planted position is a concept token.
                let id = pair.text.token_ids[group.token_pos];
                assert!(id >= 1 && id < w.config.distractor_base());
            }
        }
    }

    #[test]
    fn concept_regions_within_a_pair_do_not_overlap() {
        let w = build_world(31, CorpusConfig::desk_default()).unwrap();
        let mut rng = Rng::substream(31, "pairs");
        for _ in 0..100 {
            let pair = sample_pair(&w, &mut rng).unwrap();
            let mut seen = BTreeSet::new();
            let mut distinct_regions = BTreeSet::new();
            for g in &pair.planted {
                distinct_regions.insert(g.patch_indices.clone());
            }
            for region in distinct_regions {
                for cell in region {
                    assert!(seen.insert(cell), "overlapping planted regions");
                }
            }
        }
    }

    #[test]
    fn zero_distractor_rate_means_all_concept_tokens() {
        let mut cfg = CorpusConfig::desk_default();
        cfg.distractor_rate = 0.0;
        let w = build_world(3, cfg).unwrap();
        let mut rng = Rng::substream(3, "pairs");
        for _ in 0..1000 {
            let pair = sample_pair(&w, &mut rng).unwrap();
            for (pos, (&id, &m)) in pair.text.token_ids.iter().zip(&pair.text.mask).enumerate() {
                if m {
                    assert!(
                        id >= 1 && id < w.config.distractor_base(),
                        "position {pos} holds non-concept token {id}"
                    );
                }
            }
        }
    }

    #[test]
    fn splits_have_requested_sizes_and_reproduce() {
        let w = build_world(12, CorpusConfig::desk_default()).unwrap();
        let mut rng1 = Rng::substream(12, "splits");
        let s1 = make_splits(&w, (200, 20, 50), &mut rng1).unwrap();
        assert_eq!(s1.train.len(), 200);
        assert_eq!(s1.val.len(), 20);
        assert_eq!(s1.test.len(), 50);
        let mut rng2 = Rng::substream(12, "splits");
        let s2 = make_splits(&w, (200, 20, 50), &mut rng2).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn split_class_balance_is_near_uniform() {
        for seed in 0..10 {
            let w = build_world(seed, CorpusConfig::desk_default()).unwrap();
            let mut rng = Rng::substream(seed, "splits");
            let s = make_splits(&w, (120, 0, 60), &mut rng).unwrap();
            for (split, expect) in [(&s.train, 40.0), (&s.test, 20.0)] {
                let mut counts = vec![0usize; 3];
                for p in split.iter() {
                    counts[p.label] += 1;
                }
                for &count in &counts {
                    let dev = (count as f64 - expect).abs() / expect;
                    assert!(dev <= 0.1, "seed {seed}: class count {count} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = CorpusConfig::desk_default();
        cfg.vocab = 7;
        match build_world(1, cfg) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "vocab"),
            other => panic!("expected invalid config, got {other:?}"),
        }
        let mut cfg = CorpusConfig::desk_default();
        cfg.region_max = 9;
        assert!(matches!(build_world(1, cfg), Err(Error::InvalidConfig { field: "region_max", .. })));
    }
}
