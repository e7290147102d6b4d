use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taperkit::mlm_eval::{ppl_length_sweep, SweepOptions};
use taperkit::pretrain::{gen_synthetic_corpus, loss_csv, pretrain_mlm, PretrainOptions, SyntheticCorpusSpec};
use taperkit::sparse::{build_layout, layout_coverage_stats};
use taperkit::store::names::POS_EMB;
use taperkit::taper::{distinguishability_report, extend_positions, repeat_positions, TaperConfig};
use taperkit::transform::{variant_model, verify_consistency, ConsistencyReport, TargetOverrides, Variant};
use taperkit::{Model, ModelConfig, SparseConfig};

use crate::manifest::{sidecar, RunManifest};
use crate::*;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub corpus: SyntheticCorpusSpec,
    pub training: PretrainOptions,
}

/// A `[sparse]` table; other keys are ignored so a model config file works too.
#[derive(Clone, Debug, Default, Deserialize)]
struct SparseFile {
    #[serde(default)]
    sparse: Option<SparseConfig>,
}

pub(crate) fn dispatch(command: Command, threads: Option<usize>) -> CliResult<()> {
    match command {
        Command::Replay(args) => {
            let manifest = RunManifest::load(&args.manifest)?;
            let command = match (manifest.command, args.out) {
                (Command::Replay(_), _) => return Err(CliError::Invalid("a manifest cannot record replay".into())),
                (c, None) => c,
                (c, Some(out)) => redirect(c, out),
            };
            execute(command, threads)
        }
        other => execute(other, threads),
    }
}

fn redirect(command: Command, out: PathBuf) -> Command {
    match command {
        Command::Pretrain(a) => Command::Pretrain(PretrainArgs { out, ..a }),
        Command::Transform(a) => Command::Transform(TransformArgs { out, ..a }),
        Command::Verify(a) => Command::Verify(VerifyArgs { out: Some(out), ..a }),
        Command::PplSweep(a) => Command::PplSweep(PplSweepArgs { out, ..a }),
        Command::InspectTaper(a) => Command::InspectTaper(InspectTaperArgs { out: Some(out), ..a }),
        Command::BenchAttention(a) => Command::BenchAttention(BenchAttentionArgs { out: Some(out), ..a }),
        Command::Replay(a) => Command::Replay(a),
    }
}

fn execute(command: Command, threads: Option<usize>) -> CliResult<()> {
    let command = absolutize(command)?;
    let mut ctx = Ctx { command: command.clone(), threads, inputs: vec![], outputs: vec![], seeds: vec![] };
    match command {
        Command::Pretrain(a) => pretrain(&a, &mut ctx),
        Command::Transform(a) => transform(&a, &mut ctx),
        Command::Verify(a) => verify(&a, &mut ctx),
        Command::PplSweep(a) => ppl_sweep(&a, &mut ctx),
        Command::InspectTaper(a) => inspect_taper(&a, &mut ctx),
        Command::BenchAttention(a) => bench_attention(&a, &mut ctx),
        Command::Replay(_) => Err(CliError::Invalid("nested replay".into())),
    }
}

fn abs(p: PathBuf) -> CliResult<PathBuf> {
    std::path::absolute(&p).map_err(|source| CliError::Io { path: p, source })
}

fn abs_opt(p: Option<PathBuf>) -> CliResult<Option<PathBuf>> {
    p.map(abs).transpose()
}

fn absolutize(command: Command) -> CliResult<Command> {
    Ok(match command {
        Command::Pretrain(a) => Command::Pretrain(PretrainArgs { config: abs_opt(a.config)?, out: abs(a.out)?, ..a }),
        Command::Transform(a) => Command::Transform(TransformArgs {
            src: abs(a.src)?,
            sparse_config: abs_opt(a.sparse_config)?,
            out: abs(a.out)?,
            ..a
        }),
        Command::Verify(a) => Command::Verify(VerifyArgs { src: abs(a.src)?, tgt: abs(a.tgt)?, out: abs_opt(a.out)?, ..a }),
        Command::PplSweep(a) => Command::PplSweep(PplSweepArgs {
            src: abs(a.src)?,
            docs: abs_opt(a.docs)?,
            out: abs(a.out)?,
            ..a
        }),
        Command::InspectTaper(a) => Command::InspectTaper(InspectTaperArgs { src: abs(a.src)?, out: abs_opt(a.out)?, ..a }),
        Command::BenchAttention(a) => {
            Command::BenchAttention(BenchAttentionArgs { config: abs_opt(a.config)?, out: abs_opt(a.out)?, ..a })
        }
        Command::Replay(a) => Command::Replay(a),
    })
}

struct Ctx {
    command: Command,
    threads: Option<usize>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: Vec<u64>,
}

impl Ctx {
    fn read(&mut self, path: &Path) -> CliResult<String> {
        self.inputs.push(path.to_path_buf());
        fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
    }

    fn load_model(&mut self, path: &Path) -> CliResult<Model> {
        self.inputs.push(path.to_path_buf());
        Model::load(path).map_err(|e| match e {
            taperkit::Error::Io(source) => CliError::Io { path: path.to_path_buf(), source },
            other => other.into(),
        })
    }

    fn write(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
        }
        fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn save_model(&mut self, model: &Model, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
        }
        model.save(path).map_err(|e| match e {
            taperkit::Error::Io(source) => CliError::Io { path: path.to_path_buf(), source },
            other => other.into(),
        })?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn finish(&mut self, resolved: impl Serialize, path: &Path) -> CliResult<()> {
        let manifest = RunManifest {
            tool: "taperkit".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            resolved: serde_json::to_value(resolved).map_err(|e| CliError::Invalid(e.to_string()))?,
            seeds: self.seeds.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            threads: self.threads,
        };
        fs::write(path, manifest.to_json()).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
    }
}

fn to_json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

pub fn write_docs(docs: &[Vec<u32>]) -> String {
    let mut out = String::new();
    for doc in docs {
        let line: Vec<String> = doc.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_docs(text: &str) -> CliResult<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| t.parse().map_err(|_| CliError::Invalid(format!("line {}: bad token id {t:?}", i + 1))))
                .collect()
        })
        .collect()
}

fn read_sparse(ctx: &mut Ctx, path: Option<&Path>) -> CliResult<SparseConfig> {
    let Some(path) = path else {
        return Ok(SparseConfig::default());
    };
    let text = ctx.read(path)?;
    let file: SparseFile = toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let sparse = file.sparse.unwrap_or_default();
    sparse.validate()?;
    Ok(sparse)
}

fn pretrain(a: &PretrainArgs, ctx: &mut Ctx) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = ctx.read(path)?;
            toml::from_str::<PretrainConfig>(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?
        }
        None => PretrainConfig::default(),
    };
    cfg.training.seed = a.seed;
    cfg.model.validate()?;
    cfg.corpus.validate(Some(cfg.model.l_src))?;
    if cfg.corpus.vocab_size != cfg.model.vocab_size {
        return Err(CliError::Invalid(format!(
            "corpus vocab_size {} differs from model vocab_size {}",
            cfg.corpus.vocab_size, cfg.model.vocab_size
        )));
    }
    ctx.seeds.push(a.seed);

    let corpus = gen_synthetic_corpus(&cfg.corpus, a.seed)?;
    let steps = cfg.training.steps;
    let outcome = pretrain_mlm(&cfg.model, &corpus, &cfg.training, |step, loss| {
        if step % 100 == 0 || step == steps {
            eprintln!("step {step}/{steps} loss {loss:.4}");
        }
    })?;
    let model = Model::new(cfg.model.clone(), outcome.params)?;

    ctx.save_model(&model, &a.out.join("source.ckpt"))?;
    ctx.write(&a.out.join("loss.csv"), loss_csv(&outcome.losses))?;
    ctx.write(&a.out.join("eval_docs.txt"), write_docs(&corpus.eval))?;
    let toml_text = toml::to_string(&cfg).map_err(|e| CliError::Invalid(e.to_string()))?;
    ctx.write(&a.out.join("config.toml"), toml_text)?;
    let manifest = a.out.join("manifest.json");
    ctx.finish(&cfg, &manifest)
}

fn parse_variant(text: &str, tau: f64, seed: u64) -> CliResult<Variant> {
    if text.trim() == "taper" {
        Ok(Variant::Taper { tau })
    } else {
        Ok(Variant::parse(text, seed)?)
    }
}

fn check(report: &ConsistencyReport) -> CliResult<()> {
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Verification { max_abs_diff: report.max_abs_diff, tol: report.tol })
    }
}

#[derive(Serialize)]
struct TransformResolved<'a> {
    variant: Variant,
    target: &'a ModelConfig,
    check_samples: usize,
    check_tol: f64,
}

fn transform(a: &TransformArgs, ctx: &mut Ctx) -> CliResult<()> {
    let src = ctx.load_model(&a.src)?;
    let variant = parse_variant(&a.variant, a.tau, a.seed)?;
    let sparse = read_sparse(ctx, a.sparse_config.as_deref())?;
    let overrides = TargetOverrides { l_tgt: a.l_tgt, sparse };
    ctx.seeds.push(a.seed);

    let (tgt, mut report) = variant_model(&src, variant, &overrides)?;
    if a.check_samples > 0 {
        report.consistency = Some(verify_consistency(&src, &tgt, a.check_samples, src.config.l_src, a.check_tol, a.seed)?);
    }
    ctx.save_model(&tgt, &a.out.join("target.ckpt"))?;
    ctx.write(&a.out.join("report.json"), to_json(&report))?;
    let resolved = TransformResolved { variant, target: &tgt.config, check_samples: a.check_samples, check_tol: a.check_tol };
    ctx.finish(resolved, &a.out.join("manifest.json"))?;
    report.consistency.as_ref().map_or(Ok(()), check)
}

fn verify(a: &VerifyArgs, ctx: &mut Ctx) -> CliResult<()> {
    let src = ctx.load_model(&a.src)?;
    let tgt = ctx.load_model(&a.tgt)?;
    let max_len = a.max_len.unwrap_or(src.config.l_src);
    ctx.seeds.push(a.seed);
    let report = match a.precision {
        Precision::F32 => verify_consistency(&src, &tgt, a.samples, max_len, a.tol, a.seed)?,
        Precision::F64 => verify_consistency(&src.cast::<f64>(), &tgt.cast::<f64>(), a.samples, max_len, a.tol, a.seed)?,
    };
    let json = to_json(&report);
    print!("{json}");
    if let Some(out) = &a.out {
        ctx.write(out, &json)?;
        let resolved = serde_json::json!({ "precision": report.precision, "samples": a.samples, "max_len": report.max_len, "tol": a.tol });
        ctx.finish(resolved, &sidecar(out))?;
    }
    check(&report)
}

#[derive(Serialize)]
struct SweepResolved<'a> {
    lengths: &'a [usize],
    variants: Vec<String>,
    ratio: f64,
    max_sequences: Option<usize>,
    sparse: &'a SparseConfig,
}

fn ppl_sweep(a: &PplSweepArgs, ctx: &mut Ctx) -> CliResult<()> {
    let src = ctx.load_model(&a.src)?;
    let docs_path = match &a.docs {
        Some(p) => p.clone(),
        None => a.src.with_file_name("eval_docs.txt"),
    };
    let docs = parse_docs(&ctx.read(&docs_path)?)?;
    let variants = a
        .variants
        .iter()
        .map(|v| parse_variant(v, taperkit::taper::DEFAULT_TAU, a.seed))
        .collect::<CliResult<Vec<_>>>()?;
    if a.lengths.is_empty() || variants.is_empty() {
        return Err(CliError::Usage("need at least one length and one variant".into()));
    }
    ctx.seeds.push(a.seed);
    let opts = SweepOptions { seed: a.seed, max_sequences: a.max_sequences, ..SweepOptions::default() };
    let report = ppl_length_sweep(&src, &docs, &a.lengths, &variants, &opts)?;
    let csv = report.to_csv();
    print!("{csv}");
    ctx.write(&a.out, &csv)?;
    let resolved = SweepResolved {
        lengths: &a.lengths,
        variants: variants.iter().map(Variant::to_string).collect(),
        ratio: opts.ratio,
        max_sequences: opts.max_sequences,
        sparse: &opts.overrides.sparse,
    };
    ctx.finish(resolved, &sidecar(&a.out))
}

pub fn factors_csv(factors: &[f64]) -> String {
    let mut out = String::from("copy,factor\n");
    for (i, f) in factors.iter().enumerate() {
        out.push_str(&format!("{i},{f}\n"));
    }
    out
}

fn inspect_taper(a: &InspectTaperArgs, ctx: &mut Ctx) -> CliResult<()> {
    let src = ctx.load_model(&a.src)?;
    let cfg = &src.config;
    let l_tgt = a.l_tgt.unwrap_or(cfg.l_tgt);
    if l_tgt < cfg.l_src || l_tgt % cfg.l_src != 0 {
        return Err(CliError::Invalid(format!("l_tgt {l_tgt} is not a positive multiple of l_src {}", cfg.l_src)));
    }
    let taper = TaperConfig::new(a.tau, l_tgt / cfg.l_src)?;
    let table = src.params.get(POS_EMB)?.slice_rows(cfg.position_offset, cfg.position_offset + cfg.l_src)?;
    let tapered = distinguishability_report(&extend_positions(&table, taper)?, cfg.l_src)?;
    let repeated = distinguishability_report(&repeat_positions(&table, taper.repetitions)?, cfg.l_src)?;
    let factors = factors_csv(&taper.factors());

    match &a.out {
        None => {
            print!("{factors}\n{}\n{}", tapered.to_csv(), repeated.to_csv());
            Ok(())
        }
        Some(dir) => {
            ctx.write(&dir.join("factors.csv"), &factors)?;
            ctx.write(&dir.join("distinguishability.csv"), tapered.to_csv())?;
            ctx.write(&dir.join("distinguishability_repeated.csv"), repeated.to_csv())?;
            print!("{factors}");
            ctx.finish(taper, &dir.join("manifest.json"))
        }
    }
}

pub const COVERAGE_CSV_HEADER: &str =
    "seq_len,block_size,num_blocks,attended_pairs,fraction,min_keys_per_query,max_keys_per_query,max_keys_non_global";

fn bench_attention(a: &BenchAttentionArgs, ctx: &mut Ctx) -> CliResult<()> {
    let sparse = read_sparse(ctx, a.config.as_deref())?;
    if a.lengths.is_empty() {
        return Err(CliError::Usage("need at least one length".into()));
    }
    ctx.seeds.push(sparse.random_seed);
    let mut csv = format!("{COVERAGE_CSV_HEADER}\n");
    for &len in &a.lengths {
        let s = layout_coverage_stats(&build_layout(len, &sparse, sparse.random_seed)?);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.seq_len,
            s.block_size,
            s.num_blocks,
            s.attended_pairs,
            s.fraction,
            s.min_keys_per_query,
            s.max_keys_per_query,
            s.max_keys_non_global
        ));
    }
    print!("{csv}");
    if let Some(out) = &a.out {
        ctx.write(out, &csv)?;
        ctx.finish(&sparse, &sidecar(out))?;
    }
    Ok(())
}
