//! Versioned binary file formats (little-endian throughout), plus the CSV
//! and PGM writers.
//!
//! Corpus files carry the magic `AGAC`, checkpoints `AGAK`; both start with
//! a `u32` format version. Checkpoints store a named tensor table: name,
//! dtype (f64 or u64), rank, extents, payload. Encoding is a pure function
//! of the in-memory value, so byte-identical inputs produce byte-identical
//! files.

use aga_core::corpus::{Concept, CorpusConfig, LabeledPair, PlantedGroup, Splits, WorldSpec};
use aga_core::encoders::{EncoderConfig, ImageSample, TextSample};
use aga_core::grouping::GateState;
use aga_core::trainer::{AdamState, Checkpoint, ModelParams, Variant};

use crate::error::CliError;

pub const CORPUS_MAGIC: &[u8; 4] = b"AGAC";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AGAK";
pub const CORPUS_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

// ── byte plumbing ────────────────────────────────────────────────────

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
    fn u32s(&mut self, vs: &[u32]) {
        for &v in vs {
            self.u32(v);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8], what: &'static str) -> Self {
        Reader { data, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        if self.pos + n > self.data.len() {
            return Err(CliError::Usage(format!("truncated {} file", self.what)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CliError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CliError> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, CliError> {
        (0..n).map(|_| self.u32()).collect()
    }

    fn done(&self) -> Result<(), CliError> {
        if self.pos != self.data.len() {
            return Err(CliError::Usage(format!(
                "{} file has {} trailing bytes",
                self.what,
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn expect_header(r: &mut Reader<'_>, magic: &[u8; 4], version: u32) -> Result<(), CliError> {
    if r.take(4)? != magic {
        return Err(CliError::Usage(format!("{}: bad magic", r.what)));
    }
    let got = r.u32()?;
    if got != version {
        return Err(CliError::Usage(format!("{}: unsupported version {got}", r.what)));
    }
    Ok(())
}

// ── corpus format ────────────────────────────────────────────────────

/// Everything `gen` produces: the frozen world and the three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFile {
    pub world: WorldSpec,
    pub splits: Splits,
}

pub fn encode_corpus(c: &CorpusFile) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CORPUS_MAGIC);
    w.u32(CORPUS_VERSION);
    w.u64(c.world.seed);
    let cfg = &c.world.config;
    for v in [
        cfg.num_classes,
        cfg.concepts_per_class,
        cfg.tokens_per_concept,
        cfg.vocab as usize,
        cfg.grid_rows,
        cfg.grid_cols,
        cfg.m_max,
        cfg.patch_features,
        cfg.region_min,
        cfg.region_max,
    ] {
        w.u32(v as u32);
    }
    for v in [
        cfg.noise_std,
        cfg.distractor_rate,
        cfg.concept_rate,
        cfg.signature_base,
        cfg.signature_unique,
    ] {
        w.f64(v);
    }
    w.u32(c.world.concepts.len() as u32);
    for concept in &c.world.concepts {
        w.u32(concept.class_id as u32);
        w.u32(concept.tokens.len() as u32);
        w.u32s(&concept.tokens);
        w.f64s(&concept.signature);
    }
    w.u32(c.world.class_prompts.len() as u32);
    for prompt in &c.world.class_prompts {
        w.u32(prompt.len() as u32);
        w.u32s(prompt);
    }
    for split in [&c.splits.train, &c.splits.val, &c.splits.test] {
        w.u32(split.len() as u32);
    }
    for split in [&c.splits.train, &c.splits.val, &c.splits.test] {
        for pair in split {
            w.u32(pair.label as u32);
            w.f64s(&pair.image.patches);
            w.u32s(&pair.text.token_ids);
            for &m in &pair.text.mask {
                w.u8(m as u8);
            }
            w.u32(pair.planted.len() as u32);
            for g in &pair.planted {
                w.u32(g.token_pos as u32);
                w.u32(g.patch_indices.len() as u32);
                for &i in &g.patch_indices {
                    w.u32(i as u32);
                }
            }
        }
    }
    w.buf
}

pub fn decode_corpus(data: &[u8]) -> Result<CorpusFile, CliError> {
    let mut r = Reader::new(data, "corpus");
    expect_header(&mut r, CORPUS_MAGIC, CORPUS_VERSION)?;
    let seed = r.u64()?;
    let u = |r: &mut Reader<'_>| -> Result<usize, CliError> { Ok(r.u32()? as usize) };
    let config = CorpusConfig {
        num_classes: u(&mut r)?,
        concepts_per_class: u(&mut r)?,
        tokens_per_concept: u(&mut r)?,
        vocab: r.u32()?,
        grid_rows: u(&mut r)?,
        grid_cols: u(&mut r)?,
        m_max: u(&mut r)?,
        patch_features: u(&mut r)?,
        region_min: u(&mut r)?,
        region_max: u(&mut r)?,
        noise_std: r.f64()?,
        distractor_rate: r.f64()?,
        concept_rate: r.f64()?,
        signature_base: r.f64()?,
        signature_unique: r.f64()?,
    };
    config.validate()?;

    let n_concepts = u(&mut r)?;
    let mut concepts = Vec::with_capacity(n_concepts);
    for _ in 0..n_concepts {
        let class_id = u(&mut r)?;
        let n_tokens = u(&mut r)?;
        let tokens = r.u32s(n_tokens)?;
        let signature = r.f64s(config.patch_features)?;
        concepts.push(Concept { class_id, tokens, signature });
    }
    let n_classes = u(&mut r)?;
    if n_classes != config.num_classes {
        return Err(CliError::Usage(format!(
            "corpus: prompt table has {n_classes} classes, config says {}",
            config.num_classes
        )));
    }
    let mut class_prompts = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let len = u(&mut r)?;
        class_prompts.push(r.u32s(len)?);
    }
    let world = WorldSpec { seed, config, concepts, class_prompts };

    let n_train = u(&mut r)?;
    let n_val = u(&mut r)?;
    let n_test = u(&mut r)?;
    let mut read_split = |count: usize| -> Result<Vec<LabeledPair>, CliError> {
        let cfg = &world.config;
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            let label = r.u32()? as usize;
            if label >= cfg.num_classes {
                return Err(CliError::Usage(format!("corpus: label {label} out of range")));
            }
            let patches = r.f64s(cfg.n_patches() * cfg.patch_features)?;
            let token_ids = r.u32s(cfg.m_max)?;
            let mut mask = Vec::with_capacity(cfg.m_max);
            for _ in 0..cfg.m_max {
                mask.push(r.u8()? != 0);
            }
            let n_planted = r.u32()? as usize;
            let mut planted = Vec::with_capacity(n_planted);
            for _ in 0..n_planted {
                let token_pos = r.u32()? as usize;
                let n_idx = r.u32()? as usize;
                let mut patch_indices = Vec::with_capacity(n_idx);
                for _ in 0..n_idx {
                    let idx = r.u32()? as usize;
                    if idx >= cfg.n_patches() {
                        return Err(CliError::Usage(format!("corpus: planted index {idx} out of range")));
                    }
                    patch_indices.push(idx);
                }
                planted.push(PlantedGroup { token_pos, patch_indices });
            }
            pairs.push(LabeledPair {
                image: ImageSample { patches },
                text: TextSample { token_ids, mask },
                label,
                planted,
            });
        }
        Ok(pairs)
    };
    let train = read_split(n_train)?;
    let val = read_split(n_val)?;
    let test = read_split(n_test)?;
    r.done()?;
    Ok(CorpusFile { world, splits: Splits { train, val, test } })
}

// ── checkpoint format ────────────────────────────────────────────────

enum TensorPayload {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

fn write_tensor(w: &mut Writer, name: &str, dims: &[u64], payload: &TensorPayload) {
    w.u16(name.len() as u16);
    w.bytes(name.as_bytes());
    w.u8(match payload {
        TensorPayload::F64(_) => 0,
        TensorPayload::U64(_) => 1,
    });
    w.u8(dims.len() as u8);
    for &d in dims {
        w.u64(d);
    }
    match payload {
        TensorPayload::F64(vs) => {
            for &v in vs {
                w.f64(v);
            }
        }
        TensorPayload::U64(vs) => {
            for &v in vs {
                w.u64(v);
            }
        }
    }
}

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Full => 0,
        Variant::GlobalOnly => 1,
        Variant::NoBcga => 2,
        Variant::FixedThreshold { .. } => 3,
    }
}

/// Serialize a training checkpoint plus the run seed it belongs to.
pub fn encode_checkpoint(ckpt: &Checkpoint, seed: u64) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(ckpt.step);
    w.u8(variant_code(ckpt.variant));
    let e = &ckpt.enc_cfg;
    for v in [e.n_patches, e.patch_features, e.vocab as usize, e.m_max, e.hidden, e.embed_dim, e.mix_window] {
        w.u32(v as u32);
    }

    let names = ModelParams::names_and_shapes(&ckpt.enc_cfg);
    let fields = ckpt.params.fields();
    let mut tensors: Vec<(String, Vec<u64>, TensorPayload)> = Vec::new();
    for ((name, shape), data) in names.iter().zip(fields.iter()) {
        let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
        tensors.push((name.to_string(), dims.clone(), TensorPayload::F64((*data).clone())));
    }
    for ((name, shape), (m, v)) in names.iter().zip(ckpt.opt.m.iter().zip(&ckpt.opt.v)) {
        let dims: Vec<u64> = shape.iter().map(|&d| d as u64).collect();
        tensors.push((format!("adam.m.{name}"), dims.clone(), TensorPayload::F64(m.clone())));
        tensors.push((format!("adam.v.{name}"), dims, TensorPayload::F64(v.clone())));
    }
    tensors.push(("adam.t".into(), vec![1], TensorPayload::U64(vec![ckpt.opt.t])));
    for (prefix, gate) in [("gate_tg", &ckpt.gate_tg), ("gate_vg", &ckpt.gate_vg)] {
        let steps: Vec<u64> = gate.trajectory().iter().map(|&(s, _)| s).collect();
        let sigmas: Vec<f64> = gate.trajectory().iter().map(|&(_, s)| s).collect();
        tensors.push((format!("{prefix}.sigma"), vec![1], TensorPayload::F64(vec![gate.sigma()])));
        tensors.push((format!("{prefix}.gamma"), vec![1], TensorPayload::F64(vec![gate.gamma()])));
        tensors.push((format!("{prefix}.steps"), vec![1], TensorPayload::U64(vec![gate.step_count()])));
        tensors.push((format!("{prefix}.traj_steps"), vec![steps.len() as u64], TensorPayload::U64(steps)));
        tensors.push((format!("{prefix}.traj_sigmas"), vec![sigmas.len() as u64], TensorPayload::F64(sigmas)));
    }
    tensors.push(("rng.state".into(), vec![4], TensorPayload::U64(ckpt.rng_state.to_vec())));
    let order: Vec<u64> = ckpt.epoch_order.iter().map(|&i| i as u64).collect();
    tensors.push(("schedule.order".into(), vec![order.len() as u64], TensorPayload::U64(order)));
    tensors.push(("schedule.cursor".into(), vec![1], TensorPayload::U64(vec![ckpt.cursor as u64])));
    tensors.push(("config.seed".into(), vec![1], TensorPayload::U64(vec![seed])));

    w.u32(tensors.len() as u32);
    for (name, dims, payload) in &tensors {
        write_tensor(&mut w, name, dims, payload);
    }
    w.buf
}

struct TensorTable {
    entries: std::collections::BTreeMap<String, (Vec<u64>, TensorPayload)>,
}

impl TensorTable {
    fn f64s(&self, name: &str, want_len: usize) -> Result<Vec<f64>, CliError> {
        match self.entries.get(name) {
            Some((dims, TensorPayload::F64(vs))) => {
                let n: u64 = dims.iter().product();
                if n as usize != vs.len() || vs.len() != want_len {
                    return Err(CliError::Usage(format!(
                        "checkpoint tensor {name}: expected {want_len} values, found {}",
                        vs.len()
                    )));
                }
                Ok(vs.clone())
            }
            Some(_) => Err(CliError::Usage(format!("checkpoint tensor {name}: wrong dtype"))),
            None => Err(CliError::Usage(format!("checkpoint tensor {name} missing"))),
        }
    }

    fn u64s(&self, name: &str) -> Result<Vec<u64>, CliError> {
        match self.entries.get(name) {
            Some((_, TensorPayload::U64(vs))) => Ok(vs.clone()),
            Some(_) => Err(CliError::Usage(format!("checkpoint tensor {name}: wrong dtype"))),
            None => Err(CliError::Usage(format!("checkpoint tensor {name} missing"))),
        }
    }

    fn scalar_u64(&self, name: &str) -> Result<u64, CliError> {
        let vs = self.u64s(name)?;
        if vs.len() != 1 {
            return Err(CliError::Usage(format!("checkpoint tensor {name}: expected one value")));
        }
        Ok(vs[0])
    }

    fn scalar_f64(&self, name: &str) -> Result<f64, CliError> {
        let vs = self.f64s(name, 1)?;
        Ok(vs[0])
    }
}

/// Deserialize a checkpoint; returns the checkpoint and the run seed.
pub fn decode_checkpoint(data: &[u8]) -> Result<(Checkpoint, u64), CliError> {
    let mut r = Reader::new(data, "checkpoint");
    expect_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let step = r.u64()?;
    let vcode = r.u8()?;
    let enc_cfg = EncoderConfig {
        n_patches: r.u32()? as usize,
        patch_features: r.u32()? as usize,
        vocab: r.u32()?,
        m_max: r.u32()? as usize,
        hidden: r.u32()? as usize,
        embed_dim: r.u32()? as usize,
        mix_window: r.u32()? as usize,
    };
    enc_cfg.validate()?;

    let n_tensors = r.u32()? as usize;
    let mut entries = std::collections::BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CliError::Usage("checkpoint: tensor name is not utf-8".into()))?;
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()?);
        }
        let count: u64 = dims.iter().product();
        let payload = match dtype {
            0 => TensorPayload::F64(r.f64s(count as usize)?),
            1 => TensorPayload::U64((0..count).map(|_| r.u64()).collect::<Result<_, _>>()?),
            other => return Err(CliError::Usage(format!("checkpoint: unknown dtype {other}"))),
        };
        entries.insert(name, (dims, payload));
    }
    r.done()?;
    let table = TensorTable { entries };

    // Parameters and moments in canonical order.
    let names = ModelParams::names_and_shapes(&enc_cfg);
    let mut params = ModelParams::init(&enc_cfg, &mut aga_core::rng::Rng::from_seed(0));
    {
        let fields = params.fields_mut();
        for ((name, shape), field) in names.iter().zip(fields) {
            let want: usize = shape.iter().product();
            *field = table.f64s(name, want)?;
        }
    }
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (name, shape) in &names {
        let want: usize = shape.iter().product();
        m.push(table.f64s(&format!("adam.m.{name}"), want)?);
        v.push(table.f64s(&format!("adam.v.{name}"), want)?);
    }
    let opt = AdamState { t: table.scalar_u64("adam.t")?, m, v };

    let mut gates = Vec::new();
    for prefix in ["gate_tg", "gate_vg"] {
        let sigma = table.scalar_f64(&format!("{prefix}.sigma"))?;
        let gamma = table.scalar_f64(&format!("{prefix}.gamma"))?;
        let steps = table.scalar_u64(&format!("{prefix}.steps"))?;
        let traj_steps = table.u64s(&format!("{prefix}.traj_steps"))?;
        let traj_sigmas = table.f64s(&format!("{prefix}.traj_sigmas"), traj_steps.len())?;
        let trajectory: Vec<(u64, f64)> = traj_steps.into_iter().zip(traj_sigmas).collect();
        gates.push(GateState::restore(sigma, gamma, steps, trajectory)?);
    }
    let gate_vg = gates.pop().unwrap();
    let gate_tg = gates.pop().unwrap();

    let variant = match vcode {
        0 => Variant::Full,
        1 => Variant::GlobalOnly,
        2 => Variant::NoBcga,
        3 => Variant::FixedThreshold { sigma_tg: gate_tg.sigma(), sigma_vg: gate_vg.sigma() },
        other => return Err(CliError::Usage(format!("checkpoint: unknown variant code {other}"))),
    };

    let rng_raw = table.u64s("rng.state")?;
    if rng_raw.len() != 4 {
        return Err(CliError::Usage("checkpoint: rng.state must have 4 words".into()));
    }
    let rng_state = [rng_raw[0], rng_raw[1], rng_raw[2], rng_raw[3]];
    let epoch_order: Vec<usize> = table.u64s("schedule.order")?.into_iter().map(|v| v as usize).collect();
    let cursor = table.scalar_u64("schedule.cursor")? as usize;
    let seed = table.scalar_u64("config.seed")?;

    Ok((
        Checkpoint {
            step,
            enc_cfg,
            variant,
            params,
            opt,
            gate_tg,
            gate_vg,
            rng_state,
            epoch_order,
            cursor,
        },
        seed,
    ))
}

// ── text formats ─────────────────────────────────────────────────────

/// One gate-trajectory CSV: header plus `step,sigma_tg,sigma_vg` rows.
pub fn gates_csv_header() -> &'static str {
    "step,sigma_tg,sigma_vg"
}

pub fn gates_csv_row(step: u64, sigma_tg: f64, sigma_vg: f64) -> String {
    format!("{step},{sigma_tg},{sigma_vg}")
}

/// One loss record as a JSON line.
pub fn loss_jsonl_line(step: u64, b: &aga_core::losses::LossBreakdown) -> String {
    serde_json::json!({
        "step": step,
        "l_g": b.l_g,
        "l_tf": b.l_tf,
        "l_vf": b.l_vf,
        "l_gla": b.l_gla,
        "l_gva": b.l_gva,
        "l_total": b.l_total,
    })
    .to_string()
}

/// Render a max-normalized alpha grid as a P2 portable graymap.
pub fn heatmap_pgm(normalized: &[f64], rows: usize, cols: usize, comment: &str) -> String {
    let mut out = String::from("P2\n");
    out.push_str(&format!("# {comment}\n"));
    out.push_str(&format!("{cols} {rows}\n255\n"));
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| format!("{}", (normalized[r * cols + c] * 255.0).round() as u8))
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Raw alpha row as CSV (one grid row per line); exact round trip through
/// Rust's shortest-representation float formatting.
pub fn heatmap_csv(alpha: &[f64], rows: usize, cols: usize) -> String {
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = (0..cols).map(|c| format!("{}", alpha[r * cols + c])).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parse a heatmap CSV back into the flat alpha row.
pub fn parse_heatmap_csv(text: &str) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        for field in line.split(',') {
            let v: f64 = field
                .parse()
                .map_err(|_| CliError::Usage(format!("heatmap csv line {}: bad float {field:?}", lineno + 1)))?;
            out.push(v);
        }
    }
    Ok(out)
}
