//! The four subcommands, as library functions so integration tests can
//! drive them without spawning processes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use aga_core::corpus::{build_world, make_splits};
use aga_core::eval::{
    embed_pairs, grouping_fidelity, heatmap_grid, instance_precision_at_one, linear_probe,
    pair_alignment, retrieval_precision, zero_shot_classify,
};
use aga_core::rng::Rng;
use aga_core::trainer::TrainState;
use aga_core::verify;

use crate::config::{parse_variant, RunConfig};
use crate::error::CliError;
use crate::formats::{
    decode_checkpoint, decode_corpus, encode_checkpoint, encode_corpus, gates_csv_header,
    gates_csv_row, heatmap_csv, heatmap_pgm, loss_jsonl_line, CorpusFile,
};
use crate::hash::git_blob_hash;
use crate::manifest::write_manifest;

pub struct GenArgs {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub sets: Vec<(String, String)>,
}

pub struct TrainArgs {
    pub corpus: PathBuf,
    pub variant: String,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub sets: Vec<(String, String)>,
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub heatmaps: Option<usize>,
}

fn read_config_file(path: &Option<PathBuf>) -> Result<Option<String>, CliError> {
    match path {
        Some(p) => fs::read_to_string(p)
            .map(Some)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display()))),
        None => Ok(None),
    }
}

fn resolve_config(
    file: &Option<PathBuf>,
    sets: &[(String, String)],
    seed_flag: Option<u64>,
) -> Result<(RunConfig, u64, String), CliError> {
    let text = read_config_file(file)?;
    let mut overrides = sets.to_vec();
    if let Some(seed) = seed_flag {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let config = RunConfig::resolve(text.as_deref(), &overrides)?;
    let seed = config.seed()?;
    let hash = git_blob_hash(config.canonical_text().as_bytes());
    Ok((config, seed, hash))
}

fn read_corpus_file(path: &Path) -> Result<(CorpusFile, String), CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read corpus {}: {e}", path.display())))?;
    let corpus = decode_corpus(&bytes)?;
    Ok((corpus, git_blob_hash(&bytes)))
}

/// `gen`: build the world, generate splits, write corpus + world manifest.
pub fn cmd_gen(args: &GenArgs, argv: &[String]) -> Result<(), CliError> {
    let (config, seed, config_hash) = resolve_config(&args.config, &args.sets, args.seed)?;
    let corpus_cfg = config.corpus_config()?;
    let sizes = config.split_sizes()?;
    fs::create_dir_all(&args.out)?;
    write_manifest(
        &args.out,
        argv,
        &config_hash,
        seed,
        None,
        &["corpus.agac", "world.json"],
    )?;

    let world = build_world(seed, corpus_cfg)?;
    let mut rng = Rng::substream(seed, "corpus");
    let splits = make_splits(&world, sizes, &mut rng)?;
    let corpus = CorpusFile { world, splits };
    fs::write(args.out.join("corpus.agac"), encode_corpus(&corpus))?;

    let world_json = serde_json::json!({
        "seed": corpus.world.seed,
        "config": {
            "classes": corpus.world.config.num_classes,
            "concepts_per_class": corpus.world.config.concepts_per_class,
            "tokens_per_concept": corpus.world.config.tokens_per_concept,
            "vocab": corpus.world.config.vocab,
            "grid_rows": corpus.world.config.grid_rows,
            "grid_cols": corpus.world.config.grid_cols,
            "m_max": corpus.world.config.m_max,
            "patch_features": corpus.world.config.patch_features,
            "noise_std": corpus.world.config.noise_std,
            "distractor_rate": corpus.world.config.distractor_rate,
            "concept_rate": corpus.world.config.concept_rate,
            "signature_base": corpus.world.config.signature_base,
            "signature_unique": corpus.world.config.signature_unique,
            "region_min": corpus.world.config.region_min,
            "region_max": corpus.world.config.region_max,
        },
        "splits": { "train": corpus.splits.train.len(), "val": corpus.splits.val.len(), "test": corpus.splits.test.len() },
        "concepts": corpus.world.concepts.iter().map(|c| serde_json::json!({
            "class": c.class_id,
            "tokens": c.tokens,
            "signature": c.signature,
        })).collect::<Vec<_>>(),
        "class_prompts": corpus.world.class_prompts,
    });
    fs::write(
        args.out.join("world.json"),
        format!("{}\n", serde_json::to_string_pretty(&world_json).expect("world json")),
    )?;
    Ok(())
}

/// `train`: run the fit loop, streaming loss JSONL and the gate CSV, and
/// write the final checkpoint.
pub fn cmd_train(args: &TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let (corpus, corpus_hash) = read_corpus_file(&args.corpus)?;
    let variant = parse_variant(&args.variant)?;
    let (config, seed, config_hash) = resolve_config(&args.config, &args.sets, args.seed)?;
    let train_cfg = config.train_config(variant, seed)?;
    let enc_cfg = corpus
        .world
        .config
        .encoder_config(train_cfg.hidden, train_cfg.embed_dim, train_cfg.mix_window);

    fs::create_dir_all(&args.out)?;
    write_manifest(
        &args.out,
        argv,
        &config_hash,
        seed,
        Some(&corpus_hash),
        &["checkpoint.agak", "losses.jsonl", "gates.csv"],
    )?;

    let mut state = TrainState::new(train_cfg, enc_cfg)?;
    let mut losses = std::io::BufWriter::new(fs::File::create(args.out.join("losses.jsonl"))?);
    let mut gates = std::io::BufWriter::new(fs::File::create(args.out.join("gates.csv"))?);
    writeln!(gates, "{}", gates_csv_header())?;

    let out_dir = args.out.clone();
    let mut io_error: Option<std::io::Error> = None;
    let fit_result = state.fit(&corpus.splits.train, |st, info| {
        let mut write_step = || -> std::io::Result<()> {
            writeln!(losses, "{}", loss_jsonl_line(info.step, info.breakdown))?;
            writeln!(gates, "{}", gates_csv_row(info.step, info.sigma_tg, info.sigma_vg))?;
            if info.checkpoint_due {
                let bytes = encode_checkpoint(&st.checkpoint(), st.config.seed);
                fs::write(out_dir.join(format!("checkpoint_step{}.agak", info.step)), bytes)?;
            }
            Ok(())
        };
        if let Err(e) = write_step() {
            io_error = Some(e);
            // Sentinel to abort the loop; replaced by the io error below.
            return Err(aga_core::Error::EmptyBatch);
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e.into());
    }
    fit_result?;
    losses.flush()?;
    gates.flush()?;

    let bytes = encode_checkpoint(&state.checkpoint(), state.config.seed);
    fs::write(args.out.join("checkpoint.agak"), bytes)?;
    Ok(())
}

/// `eval`: run all downstream protocols on the test split and export
/// word-to-region heatmaps for the first few pairs.
pub fn cmd_eval(args: &EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let ckpt_bytes = fs::read(&args.checkpoint)
        .map_err(|e| CliError::Usage(format!("cannot read checkpoint {}: {e}", args.checkpoint.display())))?;
    let (ckpt, seed) = decode_checkpoint(&ckpt_bytes)?;
    let (corpus, corpus_hash) = read_corpus_file(&args.corpus)?;

    // The checkpoint and corpus must agree on every data-facing dimension.
    let world_cfg = &corpus.world.config;
    let pairs_dims = [
        ("n_patches", ckpt.enc_cfg.n_patches, world_cfg.n_patches()),
        ("patch_features", ckpt.enc_cfg.patch_features, world_cfg.patch_features),
        ("vocab", ckpt.enc_cfg.vocab as usize, world_cfg.vocab as usize),
        ("m_max", ckpt.enc_cfg.m_max, world_cfg.m_max),
    ];
    for (what, a, b) in pairs_dims {
        if a != b {
            return Err(CliError::Usage(format!(
                "dimension mismatch: checkpoint {what}={a}, corpus {what}={b}"
            )));
        }
    }

    fs::create_dir_all(&args.out)?;
    write_manifest(
        &args.out,
        argv,
        &git_blob_hash(&ckpt_bytes),
        seed,
        Some(&corpus_hash),
        &["results.json", "heatmaps/"],
    )?;

    let enc_cfg = &ckpt.enc_cfg;
    let test = embed_pairs(&ckpt.params, enc_cfg, &corpus.splits.test)?;
    let pool = test.text.len();
    let ks: Vec<usize> = [1usize, 5, 10].into_iter().filter(|&k| k <= pool).collect();
    let retrieval = retrieval_precision(&test.image, &test.text, &test.labels, &test.labels, &ks)?;
    let instance_p1 = instance_precision_at_one(&test.image, &test.text)?;

    let zero_shot = zero_shot_classify(&test.image, &test.labels, &corpus.world, &ckpt.params, enc_cfg)?;

    let train_emb = embed_pairs(&ckpt.params, enc_cfg, &corpus.splits.train)?;
    let fractions = [0.1, 0.5, 1.0];
    let probe = linear_probe(
        &train_emb.image,
        &train_emb.labels,
        &test.image,
        &test.labels,
        &fractions,
        corpus.world.config.num_classes,
        seed,
    )?;

    let sigma_tg = ckpt.gate_tg.sigma();
    let sigma_vg = ckpt.gate_vg.sigma();
    let fidelity = grouping_fidelity(&ckpt.params, enc_cfg, sigma_tg, sigma_vg, &corpus.splits.test)?;

    // Heatmaps: every planted token of the first few test pairs.
    let heat_dir = args.out.join("heatmaps");
    fs::create_dir_all(&heat_dir)?;
    let n_heat = args.heatmaps.unwrap_or(2).min(corpus.splits.test.len());
    for (pi, pair) in corpus.splits.test.iter().take(n_heat).enumerate() {
        let pa = pair_alignment(&ckpt.params, enc_cfg, sigma_tg, sigma_vg, pair)?;
        for group in &pair.planted {
            let row = match pa.real_positions.iter().position(|&p| p == group.token_pos) {
                Some(r) => r,
                None => continue,
            };
            let alpha_row = &pa.alpha[row * pa.n..(row + 1) * pa.n];
            let token_id = pair.text.token_ids[group.token_pos];
            let grid = heatmap_grid(alpha_row, world_cfg.grid_rows, world_cfg.grid_cols)?;
            let tag = format!("pair{pi}_pos{}_tok{token_id}", group.token_pos);
            let comment = format!("token tok{token_id} at position {} of test pair {pi}", group.token_pos);
            fs::write(
                heat_dir.join(format!("{tag}.pgm")),
                heatmap_pgm(&grid, world_cfg.grid_rows, world_cfg.grid_cols, &comment),
            )?;
            fs::write(
                heat_dir.join(format!("{tag}.csv")),
                heatmap_csv(alpha_row, world_cfg.grid_rows, world_cfg.grid_cols),
            )?;
        }
    }

    let mut retrieval_json = serde_json::Map::new();
    for &(k, p) in &retrieval.precision_at {
        retrieval_json.insert(format!("prec@{k}"), serde_json::json!(p));
    }
    retrieval_json.insert("instance_prec@1".into(), serde_json::json!(instance_p1));
    let mut probe_json = serde_json::Map::new();
    for &(fraction, auc) in &probe {
        probe_json.insert(format!("{fraction}"), serde_json::json!(auc));
    }
    let results = serde_json::json!({
        "variant": ckpt.variant.name(),
        "seed": seed,
        "retrieval": retrieval_json,
        "zero_shot": {
            "acc": zero_shot.accuracy,
            "f1": zero_shot.macro_f1,
            "roc": zero_shot.roc_auc,
        },
        "probe": probe_json,
        "fidelity": fidelity.mean,
        "fidelity_histogram": fidelity.histogram.to_vec(),
        "sigma_tg": sigma_tg,
        "sigma_vg": sigma_vg,
        "step": ckpt.step,
    });
    fs::write(
        args.out.join("results.json"),
        format!("{}\n", serde_json::to_string_pretty(&results).expect("results json")),
    )?;
    Ok(())
}

/// `verify`: run the check battery and print one line per check.
pub fn cmd_verify(filter: Option<&str>, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let outcomes = verify::run_filtered(filter);
    if outcomes.is_empty() {
        return Err(CliError::Usage(format!(
            "no verification checks match filter {:?}",
            filter.unwrap_or("")
        )));
    }
    let mut failed = 0;
    for o in &outcomes {
        if o.passed {
            writeln!(out, "[PASS] {:<32} ({})", o.name, o.area)?;
        } else {
            failed += 1;
            writeln!(out, "[FAIL] {:<32} ({}): {}", o.name, o.area, o.detail)?;
        }
    }
    writeln!(out, "result: {} passed, {} failed", outcomes.len() - failed, failed)?;
    if failed > 0 {
        return Err(CliError::VerifyFailed(failed));
    }
    Ok(())
}
