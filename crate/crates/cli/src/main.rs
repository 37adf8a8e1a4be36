use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvp_core::ablation::{
    aggregation_sweep, orthogonal_ablation, render_ablation_tsv, render_aggregation_tsv, view_ablation,
};
use mvp_core::audit::{
    anchor_similarity_stats, candidate_permutation_audit, identifier_audit, render_permutation_tsv, PermutationMode,
};
use mvp_core::data::{generate_corpus, parse_candidates, read_records, split, write_records, CorpusSpec};
use mvp_core::decoder::AggregationStrategy;
use mvp_core::model::WithStrategy;
use mvp_core::pipeline::{cost_report, render_cost_tsv, CostConfig, TournamentConfig, WindowConfig};
use mvp_core::trainer::{evaluate, load_checkpoint, save_checkpoint, train, TrainConfig};
use mvp_core::{Error, Model, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mvp", version, about = "Multi-view listwise passage reranker")]
struct Cli {
    /// Output format of reports.
    #[arg(long, value_enum, default_value_t = Format::Table, global = true)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen {
        /// Corpus spec (`key=value` lines); defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Training config (`key=value` lines); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Records scored after every epoch.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score and rank candidates for one query.
    Rank {
        #[arg(long)]
        ckpt: PathBuf,
        /// Query tokens, or a file holding them.
        #[arg(long)]
        query: String,
        /// One `pid<TAB>tokens` line per candidate.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
        /// mean, max or view:K.
        #[arg(long, default_value = "mean", value_parser = parse_agg)]
        agg: AggregationStrategy,
    },
    /// Mean nDCG@k over a record file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "mean", value_parser = parse_agg)]
        agg: AggregationStrategy,
    },
    /// Bias audits of a trained model.
    Audit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: AuditMode,
        /// Shuffle seeds for the candidate audit.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Train variants and compare them.
    Ablate(AblateArgs),
    /// Prompt and decode-step costs of the reranking pipelines.
    Cost {
        /// Comma-separated list sizes.
        #[arg(long, default_value = "100", value_delimiter = ',')]
        n: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        w: usize,
        #[arg(long, default_value_t = 10)]
        s: usize,
        #[arg(long, default_value_t = 5)]
        mt: usize,
        #[arg(long, default_value_t = 2)]
        r: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Decode steps per generated identifier.
        #[arg(long, default_value_t = 1)]
        multiplier: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AuditMode {
    Candidates,
    Identifiers,
    Anchors,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    variant: Variant,
    /// Share of records held out for testing.
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Variant {
    /// View counts to train, as `A..B` or a comma list.
    #[arg(long, value_parser = parse_views)]
    views: Option<ViewList>,
    /// Train with and without the orthogonality loss.
    #[arg(long)]
    no_orthogonal: bool,
    /// Evaluate one trained model under every aggregation.
    #[arg(long)]
    agg_sweep: bool,
}

fn parse_agg(s: &str) -> std::result::Result<AggregationStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone)]
struct ViewList(Vec<usize>);

fn parse_views(s: &str) -> std::result::Result<ViewList, String> {
    let bad = || format!("expected A..B or a comma list of view counts, got {s:?}");
    let views: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<std::result::Result<_, _>>()?
    };
    if views.is_empty() || views.contains(&0) {
        return Err(bad());
    }
    Ok(ViewList(views))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_model(path: &Path) -> Result<Model> {
    load_checkpoint(path)?.into_model(None)
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::parse(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn emit(format: Format, table: String, value: serde_json::Value) {
    match format {
        Format::Table => print!("{table}"),
        Format::Json => println!("{value}"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let format = cli.format;
    match cli.command {
        Command::Gen { spec, out, seed } => {
            let mut spec = match spec {
                Some(p) => CorpusSpec::parse(&read_text(&p)?)?,
                None => CorpusSpec::default(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let records = generate_corpus(&spec)?;
            write_records(&out, &records)?;
            emit(
                format,
                format!("wrote {} records to {}\n", records.len(), out.display()),
                json!({ "records": records.len(), "out": out }),
            );
        }
        Command::Train {
            config,
            data,
            validation,
            out,
            seed,
        } => {
            let cfg = train_config(config.as_deref(), seed)?;
            let records = read_records(&data)?;
            let validation = match validation {
                Some(p) => read_records(&p)?,
                None => Vec::new(),
            };
            let outcome = train(&cfg, &records, &validation)?;
            save_checkpoint(&out, &outcome.checkpoint())?;
            let mut table = String::from("epoch\tsteps\trank_loss\torthogonal_loss\tvalidation_ndcg\n");
            for h in &outcome.history {
                let v = h
                    .validation_ndcg
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into());
                table += &format!(
                    "{}\t{}\t{:.6}\t{:.6}\t{v}\n",
                    h.epoch, h.steps, h.rank_loss, h.orthogonal_loss
                );
            }
            emit(format, table, json!({ "history": outcome.history, "checkpoint": out }));
        }
        Command::Rank {
            ckpt,
            query,
            candidates,
            top_k,
            agg,
        } => {
            let model = load_model(&ckpt)?;
            let vocab = model.config().encoder.vocab();
            let query_text = if Path::new(&query).is_file() {
                read_text(Path::new(&query))?
            } else {
                query
            };
            let query = vocab.tokenize(&query_text)?;
            let cands = parse_candidates(&read_text(&candidates)?, &vocab)?;
            let passages: Vec<_> = cands.iter().map(|c| c.tokens.clone()).collect();
            let (scores, ranking) = model.rerank(&query, &passages, agg)?;
            let shown = top_k.unwrap_or(ranking.len()).min(ranking.len());
            let mut table = String::new();
            let mut rows = Vec::new();
            for (pos, &i) in ranking.iter().take(shown).enumerate() {
                table += &format!("{}\t{}\t{}\n", cands[i].pid, scores.scores[i], pos + 1);
                rows.push(json!({ "pid": cands[i].pid, "score": scores.scores[i], "rank": pos + 1 }));
            }
            emit(format, table, json!(rows));
        }
        Command::Eval { ckpt, data, k, agg } => {
            let model = load_model(&ckpt)?;
            let records = read_records(&data)?;
            let e = evaluate(
                &WithStrategy {
                    model: &model,
                    strategy: agg,
                },
                &records,
                k,
            )?;
            emit(
                format,
                format!(
                    "ndcg@{k}\t{:.6}\nevaluated\t{}\nskipped\t{}\n",
                    e.mean_ndcg, e.evaluated, e.skipped
                ),
                json!({ "k": k, "evaluation": e }),
            );
        }
        Command::Audit {
            ckpt,
            data,
            mode,
            seeds,
            k,
        } => {
            let model = load_model(&ckpt)?;
            let records = || -> Result<Vec<_>> {
                let path = data
                    .as_deref()
                    .ok_or_else(|| Error::Config("this audit needs --data".into()))?;
                read_records(path)
            };
            match mode {
                AuditMode::Candidates => {
                    let records = records()?;
                    let seeds: Vec<u64> = (1..=seeds).collect();
                    let reports = candidate_permutation_audit(&model, &records, &PermutationMode::ALL, &seeds, k)?;
                    let corpus = data.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
                    emit(format, render_permutation_tsv(&reports, &corpus), json!(reports));
                }
                AuditMode::Identifiers => {
                    let report = identifier_audit(&model.config().encoder.layout(), 100, 0)?;
                    let table = format!(
                        "verdict\t{}\nprompts_checked\t{}\nlayout\t{}\n",
                        report.verdict, report.prompts_checked, report.layout_dump
                    );
                    emit(format, table, json!(report));
                }
                AuditMode::Anchors => {
                    let stats = anchor_similarity_stats(&model, &records()?)?;
                    let mut table = String::from("#schema vectors\tcos_mean\tcos_std\tabs_cos_mean\tunits\n");
                    for (name, s) in [("anchors", stats.anchors), ("relevance", stats.relevance)] {
                        table += &format!("{name}\t{:.4}\t{:.4}\t{:.4}\t{}\n", s.mean, s.std, s.mean_abs, s.units);
                    }
                    emit(format, table, json!(stats));
                }
            }
        }
        Command::Ablate(args) => {
            let cfg = train_config(args.config.as_deref(), args.seed)?;
            let records = read_records(&args.data)?;
            let tf = args.test_fraction;
            let parts = split(&records, (1.0 - tf, 0.0, tf), cfg.seed)?;
            if let Some(ViewList(views)) = args.variant.views {
                let rows = view_ablation(&cfg, &views, &parts.train, &parts.test, args.k)?;
                emit(format, render_ablation_tsv(&rows), json!(rows));
            } else if args.variant.no_orthogonal {
                let rows = orthogonal_ablation(&cfg, &parts.train, &parts.test, args.k)?;
                emit(format, render_ablation_tsv(&rows), json!(rows));
            } else {
                let outcome = train(&cfg, &parts.train, &[])?;
                let rows = aggregation_sweep(&outcome.model, &parts.test, args.k)?;
                emit(format, render_aggregation_tsv(&rows), json!(rows));
            }
        }
        Command::Cost {
            n,
            w,
            s,
            mt,
            r,
            top_k,
            multiplier,
            seed,
        } => {
            let cfg = CostConfig {
                window: WindowConfig { window: w, stride: s },
                tournament: TournamentConfig { group: mt, promote: r },
                top_k,
                multiplier,
                seed,
                ..CostConfig::default()
            };
            let rows = cost_report(&n, &cfg)?;
            emit(format, render_cost_tsv(&rows), json!(rows));
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MVP_THREADS") {
        let threads: usize = v
            .parse()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| Error::Config(format!("MVP_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace(['\n', '\t'], " ");
            eprintln!("error\t{}\t{message}", e.kind());
            ExitCode::from(1)
        }
    }
}
