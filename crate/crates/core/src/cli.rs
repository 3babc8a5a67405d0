//! `fairlm` command line with layered config resolution and run manifests.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::datasets::{generate_corpus, load_pairs, load_triplets, SynthSpec};
use crate::error::{Error, Result};
use crate::io;
use crate::lora::{AdaptedModel, LoraConfig};
use crate::metrics::{evaluate, perplexity, EvalOptions};
use crate::model::{AttnMatrix, Checkpoint, LanguageModel, ModelConfig, ScoreMode, TransformerLM};
use crate::report::{self, ModelRecord};
use crate::tensor::FLOAT_BYTES;
use crate::tokenizer::Vocab;
use crate::training::{self, ProbeTask, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "fairlm", version, about = "Toy-scale stereotype bias evaluation and LoRA debiasing")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-bias corpus with its evaluation files.
    GenSynth {
        /// Generator spec (TOML); the built-in default when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a toy model from scratch on a one-sentence-per-line corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Score triplets and write the per-domain bias report as CSV.
    EvalBias {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long, default_value = "mean")]
        mode: ScoreMode,
        #[arg(long)]
        out: PathBuf,
        /// Count unrelated sentences in the perplexity population.
        #[arg(long)]
        include_unrelated: bool,
    },
    /// Token-weighted perplexity of a one-sentence-per-line file.
    Perplexity {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        sentences: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune LoRA adapters on the perturbed side of perturbation pairs.
    Debias {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lora_rank: Option<usize>,
        #[arg(long)]
        lora_alpha: Option<f64>,
        /// Comma-separated subset of wq,wk,wv,wo.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<AttnMatrix>>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a checkpoint with the adapters merged in.
        #[arg(long)]
        merge: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Linear probe on mean-pooled final hidden states.
    Probe {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-model checks, debias deltas and size/bias summaries.
    Report {
        #[arg(long, num_args = 1..)]
        records: Vec<PathBuf>,
        /// Include the shipped reference fixture.
        #[arg(long)]
        fixtures: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Re-run the command recorded in a manifest and compare outputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Adapter file to apply on top of the checkpoint.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

/// Partial training settings as read from a config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub grad_clip: Option<f64>,
    pub seed: Option<u64>,
    pub shuffle: Option<bool>,
}

impl TrainSection {
    fn apply(&self, mut cfg: TrainConfig, flags: &TrainFlags, seed: Option<u64>) -> TrainConfig {
        macro_rules! set {
            ($field:ident, $value:expr) => {
                if let Some(v) = $value {
                    cfg.$field = v;
                }
            };
        }
        set!(epochs, self.epochs);
        set!(batch_size, self.batch_size);
        set!(learning_rate, self.learning_rate);
        set!(beta1, self.beta1);
        set!(beta2, self.beta2);
        set!(eps, self.eps);
        set!(seed, self.seed);
        set!(shuffle, self.shuffle);
        if self.grad_clip.is_some() {
            cfg.grad_clip = self.grad_clip;
        }
        set!(epochs, flags.epochs);
        set!(batch_size, flags.batch_size);
        set!(learning_rate, flags.lr);
        if flags.grad_clip.is_some() {
            cfg.grad_clip = flags.grad_clip;
        }
        set!(seed, seed);
        cfg
    }
}

/// Model shape for `pretrain`; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let toy = ModelConfig::toy(1);
        Self {
            n_layers: toy.n_layers,
            d_model: toy.d_model,
            n_heads: toy.n_heads,
            d_ff: toy.d_ff,
            max_seq_len: toy.max_seq_len,
            seed: toy.seed,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    /// Minimum corpus frequency for a word to enter the vocabulary.
    #[serde(default = "one")]
    pub min_freq: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub targets: Option<Vec<AttnMatrix>>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebiasFile {
    #[serde(default)]
    pub lora: LoraSection,
    #[serde(default)]
    pub train: TrainSection,
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => toml::from_str(&io::read_to_string(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name, exactly as given.
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub seed: Option<u64>,
    pub float_bytes: usize,
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&io::read_to_string(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Manifest location for a file output: `<file>.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

struct Run {
    argv: Vec<String>,
    seed: Option<u64>,
    started: Instant,
}

impl Run {
    fn finish(&self, command: &str, config: Value, inputs: &[&Path], outputs: &[PathBuf], at: &Path) -> Result<()> {
        let manifest = RunManifest {
            tool: "fairlm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: self.argv.clone(),
            cwd: std::env::current_dir().map_err(|e| Error::io(".", e))?,
            seed: self.seed,
            float_bytes: FLOAT_BYTES,
            config,
            inputs: inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        io::write_atomic(at, format!("{text}\n").as_bytes())
    }
}

enum Loaded {
    Base(TransformerLM),
    Adapted(AdaptedModel),
}

impl Loaded {
    fn as_lm(&self) -> &dyn LanguageModel {
        match self {
            Loaded::Base(m) => m,
            Loaded::Adapted(a) => a,
        }
    }
}

fn load_model(args: &ModelArgs) -> Result<(Loaded, Vocab, Vec<&Path>)> {
    let ckpt = Checkpoint::load(&args.model)?;
    let vocab = ckpt.vocab()?.clone();
    let mut inputs = vec![args.model.as_path()];
    let model = match &args.adapters {
        None => Loaded::Base(ckpt.model),
        Some(p) => {
            inputs.push(p.as_path());
            Loaded::Adapted(AdaptedModel::load_adapters(ckpt.model, p)?)
        }
    };
    Ok((model, vocab, inputs))
}

fn encode_all<S: AsRef<str>>(vocab: &Vocab, lines: &[S]) -> Vec<Vec<usize>> {
    lines.iter().map(|l| vocab.encode(l.as_ref())).collect()
}

/// Parses `args` (without the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(std::iter::once(OsString::from("fairlm")).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let run = Run {
        argv,
        seed: cli.seed,
        started: Instant::now(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::GenSynth { spec, out_dir } => {
            let mut s = match &spec {
                Some(p) => SynthSpec::load(p)?,
                None => SynthSpec::default_spec(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let corpus = generate_corpus(&s)?;
            let mut outputs = corpus.write(&out_dir)?;
            let spec_out = out_dir.join("spec.toml");
            io::write_atomic(&spec_out, s.to_toml().as_bytes())?;
            outputs.push(spec_out);
            println!(
                "{} train sentences, {} triplets, {} pairs, {} probe examples -> {}",
                corpus.train.len(),
                corpus.triplets.len(),
                corpus.pairs.len(),
                corpus.probe.len(),
                out_dir.display()
            );
            let inputs: Vec<&Path> = spec.iter().map(PathBuf::as_path).collect();
            run.finish("gen-synth", json!(s), &inputs, &outputs, &out_dir.join("manifest.json"))
        }
        Command::Pretrain {
            config,
            corpus,
            out,
            train,
        } => {
            let file: PretrainFile = read_toml(config.as_deref())?;
            let lines = io::read_lines(&corpus)?;
            let vocab = Vocab::build(&lines, file.min_freq)?;
            let mc = ModelConfig {
                n_layers: file.model.n_layers,
                d_model: file.model.d_model,
                n_heads: file.model.n_heads,
                d_ff: file.model.d_ff,
                vocab_size: vocab.len(),
                max_seq_len: file.model.max_seq_len,
                seed: seed.unwrap_or(file.model.seed),
            };
            let tc = file.train.apply(TrainConfig::pretrain_default(), &train, seed);
            let seqs = encode_all(&vocab, &lines);
            if let Some(s) = seqs.iter().find(|s| s.len() > mc.max_seq_len) {
                return Err(Error::Input(format!(
                    "a corpus sentence encodes to {} tokens, above max_seq_len {}",
                    s.len(),
                    mc.max_seq_len
                )));
            }
            let (model, log) = training::pretrain(mc.clone(), &seqs, &tc)?;
            model.save(&out, Some(&vocab))?;
            let log_path = sibling(&out, "log.csv");
            io::write_atomic(&log_path, training::log_csv(&log).as_bytes())?;
            for e in &log {
                println!("epoch {} {} loss {:.6}", e.epoch, e.split, e.loss);
            }
            let inputs: Vec<&Path> = std::iter::once(corpus.as_path()).chain(config.as_deref()).collect();
            let cfg = json!({"model": mc, "train": tc, "min_freq": file.min_freq});
            run.finish("pretrain", cfg, &inputs, &[out.clone(), log_path], &manifest_path_for(&out))
        }
        Command::EvalBias {
            model,
            triplets,
            mode,
            out,
            include_unrelated,
        } => {
            let (lm, vocab, mut inputs) = load_model(&model)?;
            let ts = load_triplets(&triplets)?;
            let opts = EvalOptions {
                perplexity_includes_unrelated: include_unrelated,
            };
            let rep = evaluate(lm.as_lm(), &vocab, &ts, mode, opts)?;
            io::write_atomic(&out, rep.to_csv().as_bytes())?;
            let all = rep.overall();
            println!(
                "n {} lms {:.2} ss {:.2} icat {:.2} perplexity {:.3}",
                all.n, all.lms, all.ss, all.icat, all.perplexity
            );
            inputs.push(&triplets);
            let cfg = json!({"mode": mode, "include_unrelated": include_unrelated});
            run.finish("eval-bias", cfg, &inputs, std::slice::from_ref(&out), &manifest_path_for(&out))
        }
        Command::Perplexity { model, sentences, out } => {
            let (lm, vocab, mut inputs) = load_model(&model)?;
            let lines = io::read_lines(&sentences)?;
            let ppl = perplexity(lm.as_lm(), &vocab, &lines)?;
            println!("{ppl}");
            inputs.push(&sentences);
            match out {
                Some(o) => {
                    io::write_atomic(&o, format!("{ppl}\n").as_bytes())?;
                    run.finish("perplexity", json!({}), &inputs, std::slice::from_ref(&o), &manifest_path_for(&o))
                }
                None => Ok(()),
            }
        }
        Command::Debias {
            model,
            pairs,
            config,
            lora_rank,
            lora_alpha,
            targets,
            out,
            merge,
            train,
        } => {
            let file: DebiasFile = read_toml(config.as_deref())?;
            let ckpt = Checkpoint::load(&model)?;
            let vocab = ckpt.vocab()?.clone();
            let defaults = LoraConfig::default();
            let lc = LoraConfig {
                rank: lora_rank.or(file.lora.rank).unwrap_or(defaults.rank),
                alpha: lora_alpha.or(file.lora.alpha).unwrap_or(defaults.alpha),
                targets: targets.or(file.lora.targets).unwrap_or(defaults.targets),
                seed: seed.or(file.lora.seed).unwrap_or(defaults.seed),
            };
            let tc = file.train.apply(TrainConfig::debias_default(), &train, seed);
            let ps = load_pairs(&pairs)?;
            let perturbed: Vec<&str> = ps.iter().map(|p| p.perturbed.as_str()).collect();
            let seqs = encode_all(&vocab, &perturbed);
            let mut adapted = AdaptedModel::inject(ckpt.model, lc.clone())?;
            let log = training::debias_finetune(&mut adapted, &seqs, &tc)?;
            adapted.save_adapters(&out)?;
            let log_path = sibling(&out, "log.csv");
            io::write_atomic(&log_path, training::log_csv(&log).as_bytes())?;
            let mut outputs = vec![out.clone(), log_path];
            if let Some(m) = &merge {
                adapted.merge().save(m, Some(&vocab))?;
                outputs.push(m.clone());
            }
            let frac = adapted.trainable_fraction();
            println!(
                "trainable {} / {} ({:.4}%)",
                frac.adapter_params,
                frac.total_params,
                100.0 * frac.fraction()
            );
            for e in &log {
                println!("epoch {} {} loss {:.6}", e.epoch, e.split, e.loss);
            }
            let inputs: Vec<&Path> = [model.as_path(), pairs.as_path()].into_iter().chain(config.as_deref()).collect();
            let cfg = json!({"lora": lc, "train": tc});
            run.finish("debias", cfg, &inputs, &outputs, &manifest_path_for(&out))
        }
        Command::Probe { model, task, out } => {
            let (lm, vocab, mut inputs) = load_model(&model)?;
            let t = ProbeTask::load(&task)?;
            let r = training::downstream_probe(lm.as_lm(), &vocab, &t)?;
            let text = serde_json::to_string(&r).expect("probe result serializes");
            println!("{text}");
            inputs.push(&task);
            match out {
                Some(o) => {
                    io::write_atomic(&o, format!("{text}\n").as_bytes())?;
                    run.finish("probe", json!({}), &inputs, std::slice::from_ref(&o), &manifest_path_for(&o))
                }
                None => Ok(()),
            }
        }
        Command::Report {
            records,
            fixtures,
            out_dir,
        } => {
            let mut all: Vec<ModelRecord> = Vec::new();
            if fixtures {
                all.extend(report::fixture_records()?);
            }
            for p in &records {
                all.extend(report::load_records(p)?);
            }
            if all.is_empty() {
                return Err(Error::Input("no records: pass --records and/or --fixtures".into()));
            }
            report::validate_records(&all)?;
            let outputs = write_report(&all, &out_dir)?;
            let inputs: Vec<&Path> = records.iter().map(PathBuf::as_path).collect();
            run.finish(
                "report",
                json!({"fixtures": fixtures}),
                &inputs,
                &outputs,
                &out_dir.join("manifest.json"),
            )
        }
        Command::Replay { manifest } => replay(&manifest),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(format!(".{suffix}"));
    path.with_file_name(name)
}

fn write_report(records: &[ModelRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut outputs = Vec::new();
    let mut summary = String::new();

    let check = report::verify_fixture_arithmetic(records);
    let mut csv = String::from("model,domain,printed_icat,recomputed_icat,residual,cell_residual,pass\n");
    for r in &check.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.model, r.domain, r.printed, r.recomputed, r.residual, r.cell_residual, r.pass
        ));
    }
    let p = dir.join("icat_check.csv");
    io::write_atomic(&p, csv.as_bytes())?;
    outputs.push(p);
    let failures = check.failures();
    summary.push_str(&format!(
        "icat arithmetic: {}/{} rows pass, {} failures\n",
        check.rows.len() - failures.len(),
        check.rows.len(),
        failures.len()
    ));
    for f in &failures {
        summary.push_str(&format!("  FAIL {} / {}: printed {} recomputed {:.4}\n", f.model, f.domain, f.printed, f.recomputed));
    }

    match report::debias_delta_stats(records) {
        Ok(stats) => {
            let mut csv = String::from("domain,n,mean_drop,std_drop\n");
            summary.push_str("\nss drop after debiasing (base - debiased):\n");
            for d in &stats.domains {
                csv.push_str(&format!("{},{},{},{}\n", d.domain, d.drops.len(), d.mean, d.std));
                summary.push_str(&format!(
                    "  {:<12} {:.2} (± {:.2}), n = {}{}\n",
                    d.domain,
                    d.mean,
                    d.std,
                    d.drops.len(),
                    if d.single_pair { ", single pair" } else { "" }
                ));
            }
            csv.push_str(&format!("pooled,{},{},{}\n", stats.pooled_n, stats.pooled_mean, stats.pooled_std));
            csv.push_str(&format!("mean_of_means,{},{},\n", stats.domains.len(), stats.mean_of_means));
            summary.push_str(&format!(
                "  pooled       {:.2} (± {:.2}), n = {}\n  mean of domain means {:.2}\n",
                stats.pooled_mean, stats.pooled_std, stats.pooled_n, stats.mean_of_means
            ));
            let p = dir.join("debias_deltas.csv");
            io::write_atomic(&p, csv.as_bytes())?;
            outputs.push(p);
        }
        Err(e) => summary.push_str(&format!("\nss drop after debiasing: not computed ({e})\n")),
    }

    let mut families: Vec<&str> = records.iter().map(|r| r.family.as_str()).collect();
    families.sort_unstable();
    families.dedup();
    for fam in families {
        let recs: Vec<ModelRecord> = records.iter().filter(|r| r.family == fam).cloned().collect();
        let mut domains: Vec<&str> = recs
            .iter()
            .filter(|r| !r.debiased)
            .flat_map(|r| r.metrics.keys().map(String::as_str))
            .collect();
        domains.sort_unstable();
        domains.dedup();
        let usable: Vec<&str> = domains
            .into_iter()
            .filter(|d| recs.iter().filter(|r| !r.debiased && r.metrics.contains_key(*d)).count() >= 3)
            .collect();
        summary.push_str(&format!("\nfamily {fam}:\n"));
        if usable.is_empty() {
            summary.push_str("  fewer than 3 models; no correlations\n");
            continue;
        }
        let s = report::size_bias_summary(&recs, &usable)?;
        let slug: String = fam
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        for (name, body) in [
            (format!("scatter_{slug}.csv"), s.to_csv()),
            (format!("scatter_{slug}.svg"), s.to_svg()),
        ] {
            let p = dir.join(name);
            io::write_atomic(&p, body.as_bytes())?;
            outputs.push(p);
        }
        for line in s.to_text().lines() {
            summary.push_str(&format!("  {line}\n"));
        }
    }

    let p = dir.join("summary.txt");
    io::write_atomic(&p, summary.as_bytes())?;
    outputs.push(p);
    print!("{summary}");
    if !failures.is_empty() {
        return Err(Error::Input(format!("{} rows failed icat arithmetic", failures.len())));
    }
    Ok(outputs)
}

fn replay(path: &Path) -> Result<()> {
    let m = RunManifest::load(path)?;
    if m.command == "replay" {
        return Err(Error::Input("cannot replay a replay".into()));
    }
    std::env::set_current_dir(&m.cwd).map_err(|e| Error::io(&m.cwd, e))?;
    let cli = Cli::try_parse_from(std::iter::once("fairlm".to_string()).chain(m.argv.iter().cloned()))
        .map_err(|e| Error::Input(format!("manifest argv does not parse: {e}")))?;
    run(cli, m.argv.clone())?;
    let mut mismatched = Vec::new();
    for o in &m.outputs {
        let now = FileDigest::of(&o.path)?;
        if now.sha256 != o.sha256 {
            mismatched.push(o.path.display().to_string());
        }
    }
    if mismatched.is_empty() {
        println!("replay reproduced {} outputs byte-for-byte", m.outputs.len());
        Ok(())
    } else {
        Err(Error::Contract(format!("replay produced different bytes for {}", mismatched.join(", "))))
    }
}
