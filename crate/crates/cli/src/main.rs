// SPDX-License-Identifier: MIT OR Apache-2.0

//! `icr`: compute ICR features from activation dumps, train and evaluate
//! probes, run ablations and generalization grids, and emit reports.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icr_core::dumpio::{read_dump, validate_dump, write_dump, ActivationRecord};
use icr_core::eval::{
    auroc, baseline_attn_logdet, evaluate_features, generalization_matrix, layerwise_auroc, record_features,
    record_ppl, run_component_ablation, run_layer_ablation, token_level_detect, EvalProtocol, FeatureSet, LayerGroups,
};
use icr_core::features::{read_features, read_labels, write_features, write_labels};
use icr_core::probe::checkpoint::{load_checkpoint, save_checkpoint};
use icr_core::probe::{train_probe, ProbeConfig};
use icr_core::report::{histogram, parse_formats, Format, Report, Table};
use icr_core::score::{icr_matrix_with, IcrMode, IcrSetting, Pooling, DEFAULT_TOP_K};
use icr_core::synth::{gen_planted_records, SynthSpec};
use icr_core::{Exec, IcrError, Result};

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser, Debug)]
#[command(name = "icr", version, about = "ICR score hallucination detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Base seed; every random choice derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (or file, for `compute`).
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated report formats.
    #[arg(long, default_value = "json,csv")]
    format: String,
}

#[derive(Args, Debug, Clone)]
struct ScoreArgs {
    /// Directory of `.icrd` files.
    #[arg(long)]
    dumps: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    #[arg(long, default_value = "full")]
    setting: IcrMode,
    #[arg(long, default_value = "answer")]
    pool: Pooling,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 5)]
    runs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write planted synthetic dumps.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        examples: usize,
        #[arg(long, default_value_t = 12)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        tokens: usize,
        #[arg(long, default_value_t = 32)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value = "synth")]
        dataset: String,
        /// Attention heads to store per layer (0 = merged map only).
        #[arg(long, default_value_t = 0)]
        heads: usize,
        /// Omit answer log-probabilities.
        #[arg(long)]
        no_logprobs: bool,
        /// Share of the injected update that re-weights context tokens with
        /// permuted attention instead of Gaussian noise.
        #[arg(long, default_value_t = 0.0)]
        permuted_fraction: f64,
        #[arg(long, default_value_t = 2.0)]
        attn_scale: f64,
        #[arg(long, default_value_t = 2.0)]
        update_scale: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_scale: f64,
    },
    /// Check every dump in a directory against the format contract.
    Validate {
        #[arg(long)]
        dumps: PathBuf,
    },
    /// Pool ICR scores into a feature CSV plus a sibling `<stem>.labels.csv`.
    Compute {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        score: ScoreArgs,
    },
    /// Train one probe per run seed on all rows and save checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// 80/20 split, train per seed, report mean test AUROC.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Per-layer AUROC of pooled scores, with a score histogram.
    Layerwise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// AUROC under NONE, HS_ONLY and FULL per dataset tag.
    AblateComponents {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        score: ScoreArgs,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
    /// AUROC with early, middle or deep layers removed.
    AblateLayers {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train on each dataset, test on every dataset.
    GenMatrix {
        #[command(flatten)]
        common: Common,
        /// `name=features.csv:labels.csv`, at least twice.
        #[arg(long = "dataset", required = true, value_parser = parse_dataset_arg)]
        datasets: Vec<DatasetArg>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
    /// Per-token probabilities from a trained sequence probe.
    TokenDetect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        score: ScoreArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Perplexity and attention log-determinant baselines.
    Baselines {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dumps: PathBuf,
    },
}

#[derive(Debug, Clone)]
struct DatasetArg {
    name: String,
    features: PathBuf,
    labels: PathBuf,
}

fn parse_dataset_arg(s: &str) -> std::result::Result<DatasetArg, String> {
    let (name, paths) = s.split_once('=').ok_or("expected name=features:labels")?;
    let (f, l) = paths.split_once(':').ok_or("expected name=features:labels")?;
    if name.is_empty() || f.is_empty() || l.is_empty() {
        return Err("expected name=features:labels".into());
    }
    Ok(DatasetArg { name: name.to_string(), features: f.into(), labels: l.into() })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            common,
            examples,
            layers,
            tokens,
            hidden_dim,
            sigma,
            dataset,
            heads,
            no_logprobs,
            permuted_fraction,
            attn_scale,
            update_scale,
            noise_scale,
        } => {
            let mut spec = SynthSpec::new(common.seed, layers);
            spec.n_tokens = tokens;
            spec.hidden_dim = hidden_dim;
            spec.sigma = sigma;
            spec.dataset = dataset.clone();
            spec.with_logprob = !no_logprobs;
            spec.n_heads = heads;
            spec.ffn_permuted_fraction = permuted_fraction;
            spec.attn_logit_scale = attn_scale;
            spec.update_scale = update_scale;
            spec.ffn_noise_scale = noise_scale;
            let records = gen_planted_records(&spec, examples)?;
            ensure_dir(&common.out)?;
            for r in &records {
                write_dump(r, common.out.join(format!("{}_{}.icrd", dataset, r.example_id)))?;
            }
            say!("wrote {} dumps to {}", records.len(), common.out.display());
            Ok(())
        }
        Command::Validate { dumps } => {
            let mut bad = 0usize;
            let files = dump_files(&dumps)?;
            for path in &files {
                match read_dump(path) {
                    Ok(r) => {
                        let report = validate_dump(&r);
                        for v in &report.violations {
                            say!("{}: {}: {}", path.display(), v.location, v.message);
                        }
                        bad += usize::from(!report.is_valid());
                    }
                    Err(e) => {
                        say!("{}: {e}", path.display());
                        bad += 1;
                    }
                }
            }
            say!("{} of {} dumps valid", files.len() - bad, files.len());
            if bad > 0 {
                return Err(IcrError::Config(format!("{bad} invalid dump(s)")));
            }
            Ok(())
        }
        Command::Compute { common, score } => {
            let records = load_records(&score.dumps)?;
            let setting = IcrSetting::new(score.setting, score.k)?;
            let x = record_features(&records, setting, score.pool, Exec::auto())?;
            let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
            if let Some(parent) = common.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                ensure_dir(parent)?;
            }
            write_features(&common.out, x.view())?;
            write_labels(labels_sibling(&common.out), &labels)?;
            Ok(())
        }
        Command::Train { common, data } => {
            let (x, y) = load_data(&data)?;
            let protocol = EvalProtocol::new(common.seed, data.runs);
            ensure_dir(&common.out)?;
            let mut table = Table::new(vec!["final_train_loss".into(), "final_val_loss".into(), "epochs".into()]);
            for (r, seed) in protocol.seeds.iter().enumerate() {
                let cfg = ProbeConfig::new(x.ncols(), *seed);
                let (model, history) = train_probe(x.view(), &y, &cfg)?;
                save_checkpoint(&model, common.out.join(format!("probe_run{r}.icrp")))?;
                let last = history.epochs.last();
                table.push_row(
                    format!("run_{r}"),
                    vec![
                        last.map_or(f64::NAN, |e| e.train_loss),
                        last.map_or(f64::NAN, |e| e.val_loss),
                        history.epochs.len() as f64,
                    ],
                );
            }
            let mut report = base_report("train", &common).with_config("runs", data.runs);
            report.add_table("training", table);
            emit(&report, &common)
        }
        Command::Eval { common, data } => {
            let (x, y) = load_data(&data)?;
            let protocol = EvalProtocol::new(common.seed, data.runs);
            let r = evaluate_features(x.view(), &y, &protocol)?;
            say!("AUROC {:.4}", r.auroc);
            let mut layer = Table::new(vec!["test_auroc".into()]);
            for (l, a) in r.per_layer_auroc.iter().enumerate() {
                layer.push_row(format!("layer_{}", l + 1), vec![*a]);
            }
            let mut report = base_report("eval", &common)
                .with_config("runs", data.runs)
                .with_config("test_fraction", protocol.test_fraction);
            report.add_table("eval", r.to_table());
            report.add_table("layer_auroc", layer);
            emit(&report, &common)
        }
        Command::Layerwise { common, features, labels, bins } => {
            let x = read_features(&features)?;
            let y = read_labels(&labels)?;
            let curve = layerwise_auroc(x.view(), &y)?;
            say!("best layer {}", curve.best_layer());
            let all: Vec<f64> = x.iter().copied().collect();
            let pos: Vec<f64> = rows_for(&x, &y, 1);
            let neg: Vec<f64> = rows_for(&x, &y, 0);
            let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let hi = if hi > lo { hi } else { lo + 1.0 };
            let mut report = base_report("layerwise", &common);
            report.add_table("layerwise", curve.to_table());
            report.add_table(
                "score_histogram",
                histogram(&[("faithful", &neg), ("hallucinated", &pos)], bins.max(1), lo, hi),
            );
            emit(&report, &common)
        }
        Command::AblateComponents { common, score, runs } => {
            let records = load_records(&score.dumps)?;
            let protocol = EvalProtocol::new(common.seed, runs);
            let table = run_component_ablation(&records, score.k, score.pool, &protocol)?;
            let mut report =
                base_report("ablate-components", &common).with_config("k", score.k).with_config("pool", score.pool);
            report.add_table("components", table);
            emit(&report, &common)
        }
        Command::AblateLayers { common, data } => {
            let (x, y) = load_data(&data)?;
            let protocol = EvalProtocol::new(common.seed, data.runs);
            let groups = LayerGroups::for_layers(x.ncols());
            let table = run_layer_ablation(x.view(), &y, &groups, &protocol)?;
            let mut report = base_report("ablate-layers", &common).with_config("groups", &groups);
            report.add_table("layer_groups", table);
            emit(&report, &common)
        }
        Command::GenMatrix { common, datasets, runs } => {
            let sets = datasets
                .iter()
                .map(|d| {
                    Ok(FeatureSet {
                        name: d.name.clone(),
                        features: read_features(&d.features)?,
                        labels: read_labels(&d.labels)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let protocol = EvalProtocol::new(common.seed, runs);
            let m = generalization_matrix(&sets, &protocol)?;
            say!("average drop {:.2}%", m.avg_drop_percent);
            let mut report = base_report("gen-matrix", &common).with_config("runs", runs);
            report.add_table("generalization", m.to_table());
            report.add_table("summary", m.summary_table());
            emit(&report, &common)
        }
        Command::TokenDetect { common, score, checkpoint } => {
            let model = load_checkpoint(&checkpoint)?;
            let records = load_records(&score.dumps)?;
            let setting = IcrSetting::new(score.setting, score.k)?;
            let mut table = Table::new(vec!["token".into(), "probability".into(), "in_answer".into(), "label".into()]);
            let mut answer_scores = Vec::new();
            let mut answer_labels = Vec::new();
            for r in &records {
                let m = icr_matrix_with(r, setting, Exec::auto())?;
                let probs = token_level_detect(&model, &m)?;
                for (i, p) in probs.iter().enumerate() {
                    let in_answer = r.answer_span.range().contains(&i);
                    if in_answer {
                        answer_scores.push(*p);
                        answer_labels.push(r.label);
                    }
                    table.push_row(
                        format!("{}:{i}", r.example_id),
                        vec![i as f64, *p, f64::from(u8::from(in_answer)), f64::from(r.label)],
                    );
                }
            }
            let mut summary = Table::new(vec!["value".into()]);
            if let Ok(a) = auroc(&answer_scores, &answer_labels) {
                summary.push_row("answer_token_auroc", vec![a]);
            }
            let mut report = base_report("token-detect", &common).with_config("k", score.k);
            report.add_table("token_scores", table);
            report.add_table("summary", summary);
            emit(&report, &common)
        }
        Command::Baselines { common, dumps } => {
            let records = load_records(&dumps)?;
            let mut table = Table::new(vec!["label".into(), "ppl".into(), "attn_logdet".into()]);
            let mut ppl = Vec::new();
            let mut logdet = Vec::new();
            for r in &records {
                let p = record_ppl(r).ok();
                let d = baseline_attn_logdet(r).ok().map(|s| s.score);
                ppl.push(p);
                logdet.push(d);
                table.push_row(
                    r.example_id.clone(),
                    vec![f64::from(r.label), p.unwrap_or(f64::NAN), d.unwrap_or(f64::NAN)],
                );
            }
            let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
            let mut summary = Table::new(vec!["auroc".into()]);
            // Higher perplexity and a lower log-determinant both signal hallucination.
            if let Some(v) = complete(&ppl) {
                summary.push_row("ppl", vec![auroc(&v, &labels)?]);
            }
            if let Some(v) = complete(&logdet) {
                let neg: Vec<f64> = v.iter().map(|x| -x).collect();
                summary.push_row("attn_logdet", vec![auroc(&neg, &labels)?]);
            }
            let mut report = base_report("baselines", &common);
            report.add_table("per_example", table);
            report.add_table("summary", summary);
            emit(&report, &common)
        }
    }
}

fn complete(v: &[Option<f64>]) -> Option<Vec<f64>> {
    v.iter().copied().collect()
}

fn rows_for(x: &ndarray::Array2<f64>, y: &[u8], label: u8) -> Vec<f64> {
    x.outer_iter().zip(y).filter(|(_, &l)| l == label).flat_map(|(row, _)| row.to_vec()).collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| IcrError::io(dir, e))
}

fn labels_sibling(features: &Path) -> PathBuf {
    let stem = features.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    features.with_file_name(format!("{stem}.labels.csv"))
}

fn dump_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| IcrError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "icrd"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(IcrError::Config(format!("no .icrd files in {}", dir.display())));
    }
    Ok(files)
}

fn load_records(dir: &Path) -> Result<Vec<ActivationRecord>> {
    dump_files(dir)?.iter().map(read_dump).collect()
}

fn load_data(data: &DataArgs) -> Result<(ndarray::Array2<f64>, Vec<u8>)> {
    if data.runs == 0 {
        return Err(IcrError::Config("--runs must be at least 1".into()));
    }
    Ok((read_features(&data.features)?, read_labels(&data.labels)?))
}

fn base_report(command: &str, common: &Common) -> Report {
    Report::new(format!("{command}-seed{}", common.seed))
        .with_config("command", command)
        .with_config("seed", common.seed)
}

fn emit(report: &Report, common: &Common) -> Result<()> {
    let formats: Vec<Format> = parse_formats(&common.format)?;
    for p in report.emit(&common.out, &formats)? {
        say!("wrote {}", p.display());
    }
    Ok(())
}
