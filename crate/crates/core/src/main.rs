use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use xstage::assigner::{InstabilityMode, ScopeRule};
use xstage::decoder::gradcheck::DEFAULT_STEP;
use xstage::decoder::DecoderConfig;
use xstage::geometry::ImageSize;
use xstage::harness::{
    load_scenario, run_assign, run_flops, run_gradcheck, run_nms, run_simulate, save_scenario, AssignOptions, NmsOptions,
    Report, SimulateOptions,
};
use xstage::losses::{LossConfig, Normalization};
use xstage::matching::CostWeights;

#[derive(Parser)]
#[command(name = "xstage", version, about = "Cross-stage label assignment and dynamic filter reuse, at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Match, gather, merge and score the predictions of a scenario file.
    Assign {
        #[arg(long)]
        scenario: PathBuf,
        #[command(flatten)]
        assign: AssignArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run the decoder on a random pyramid and assign its predictions.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128.0)]
        image_width: f64,
        #[arg(long, default_value_t = 128.0)]
        image_height: f64,
        #[arg(long, default_value_t = 3)]
        num_ground_truths: usize,
        /// Also write the generated scenario, replayable with `assign`.
        #[arg(long)]
        save_scenario: Option<PathBuf>,
        #[command(flatten)]
        decoder: DecoderArgs,
        #[command(flatten)]
        assign: AssignArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Central-difference checks of the hand-written backward passes.
    Gradcheck {
        /// Op name, or `all`.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Closed-form FLOP and parameter tables.
    Flops {
        /// Stage described by the unindexed metrics; defaults to the last.
        #[arg(long)]
        stage: Option<usize>,
        #[command(flatten)]
        decoder: DecoderArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Detection counts before and after non-maximum suppression.
    Nms {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
        #[arg(long, default_value_t = 0.0)]
        score_threshold: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Args)]
struct OutputArgs {
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// D = 256, six stages, 100 queries.
    Base,
    /// D = 16, six stages, 12 queries.
    Desk,
}

#[derive(Args)]
struct DecoderArgs {
    /// Starting configuration; defaults to `desk` for simulate and `base` for flops.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    num_stages: Option<usize>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    content_dim: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    group_dim: Option<usize>,
    /// One value for every stage, or one per stage.
    #[arg(long, value_delimiter = ',')]
    points_in: Option<Vec<usize>>,
    #[arg(long)]
    spatial_expansion: Option<usize>,
    /// One value for every stage, or one per stage.
    #[arg(long, value_delimiter = ',')]
    channel_reuse: Option<Vec<usize>>,
    #[arg(long)]
    spatial_reuse: Option<usize>,
    #[arg(long)]
    channel_reuse_start: Option<usize>,
    #[arg(long)]
    spatial_reuse_start: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn per_stage(name: &str, values: &[usize], stages: usize) -> anyhow::Result<Vec<usize>> {
    match values.len() {
        1 => Ok(vec![values[0]; stages]),
        n if n == stages => Ok(values.to_vec()),
        n => bail!("--{name}: {n} values for {stages} stages"),
    }
}

impl DecoderArgs {
    fn build(&self, fallback: Preset) -> anyhow::Result<DecoderConfig> {
        let mut c = match self.preset.unwrap_or(fallback) {
            Preset::Base => DecoderConfig::default(),
            Preset::Desk => DecoderConfig::desk(),
        };
        if let Some(l) = self.num_stages {
            if l != c.num_stages {
                let tail = *c.points_in.last().unwrap_or(&1);
                c.points_in.resize(l, tail);
                c.channel_reuse = (0..l).collect();
                c.num_stages = l;
            }
        }
        let l = c.num_stages;
        if let Some(v) = &self.points_in {
            c.points_in = per_stage("points-in", v, l)?;
        }
        if let Some(v) = &self.channel_reuse {
            c.channel_reuse = per_stage("channel-reuse", v, l)?;
        }
        macro_rules! apply {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { c.$field = v; })* };
        }
        apply!(
            num_queries,
            content_dim,
            groups,
            group_dim,
            spatial_expansion,
            spatial_reuse,
            channel_reuse_start,
            spatial_reuse_start,
            num_classes,
            batch_size
        );
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InstabilityArg {
    Consecutive,
    AgainstFinal,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizationArg {
    MatchedQueries,
    None,
}

#[derive(Args)]
struct AssignArgs {
    /// prev_to_last, own_stage, all_stages, window:BEFORE:AFTER, or
    /// explicit:FROM-TO,FROM-TO,... with one window per stage.
    #[arg(long, default_value = "prev_to_last")]
    scope: String,
    /// IoU threshold; one value for every stage, or one per stage.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    eta: Vec<f64>,
    #[arg(long, value_enum, default_value = "consecutive")]
    instability_mode: InstabilityArg,
    #[arg(long, value_enum, default_value = "matched-queries")]
    normalization: NormalizationArg,
    #[arg(long, default_value_t = CostWeights::default().class)]
    class: f64,
    #[arg(long, default_value_t = CostWeights::default().l1)]
    l1: f64,
    #[arg(long, default_value_t = CostWeights::default().giou)]
    giou: f64,
    #[arg(long, default_value_t = CostWeights::default().alpha)]
    alpha: f64,
    #[arg(long, default_value_t = CostWeights::default().gamma)]
    gamma: f64,
}

fn parse_scope(text: &str) -> anyhow::Result<ScopeRule> {
    let bad = || anyhow!("--scope: cannot parse {text:?}");
    Ok(match text {
        "prev_to_last" => ScopeRule::PrevToLast,
        "own_stage" => ScopeRule::OwnStage,
        "all_stages" => ScopeRule::AllStages,
        _ => {
            if let Some(rest) = text.strip_prefix("window:") {
                let (b, a) = rest.split_once(':').ok_or_else(bad)?;
                ScopeRule::Window {
                    before: b.parse().map_err(|_| bad())?,
                    after: a.parse().map_err(|_| bad())?,
                }
            } else if let Some(rest) = text.strip_prefix("explicit:") {
                let windows = rest
                    .split(',')
                    .map(|w| {
                        let (f, t) = w.split_once('-')?;
                        Some((f.parse().ok()?, t.parse().ok()?))
                    })
                    .collect::<Option<Vec<(usize, usize)>>>()
                    .ok_or_else(bad)?;
                ScopeRule::Explicit(windows)
            } else {
                return Err(bad());
            }
        }
    })
}

impl AssignArgs {
    fn build(&self) -> anyhow::Result<AssignOptions> {
        Ok(AssignOptions {
            scope: parse_scope(&self.scope)?,
            eta: self.eta.clone(),
            instability_mode: match self.instability_mode {
                InstabilityArg::Consecutive => InstabilityMode::Consecutive,
                InstabilityArg::AgainstFinal => InstabilityMode::AgainstFinal,
            },
            loss: LossConfig {
                weights: CostWeights {
                    class: self.class,
                    l1: self.l1,
                    giou: self.giou,
                    alpha: self.alpha,
                    gamma: self.gamma,
                },
                normalization: match self.normalization {
                    NormalizationArg::MatchedQueries => Normalization::MatchedQueries,
                    NormalizationArg::None => Normalization::None,
                },
            },
        })
    }
}

fn emit(report: &Report, output: &OutputArgs) -> anyhow::Result<()> {
    let text = report.to_json()?;
    match &output.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Returns whether every check passed.
fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Assign {
            scenario,
            assign,
            output,
        } => {
            let s = load_scenario(&scenario)?;
            emit(&run_assign(&s, &assign.build()?)?, &output)?;
        }
        Command::Simulate {
            seed,
            image_width,
            image_height,
            num_ground_truths,
            save_scenario: save,
            decoder,
            assign,
            output,
        } => {
            let opts = SimulateOptions {
                seed,
                decoder: decoder.build(Preset::Desk)?,
                image_size: ImageSize::new(image_width, image_height)?,
                num_ground_truths,
            };
            let (scenario, report) = run_simulate(&opts, &assign.build()?)?;
            if let Some(path) = save {
                save_scenario(&scenario, path)?;
            }
            emit(&report, &output)?;
        }
        Command::Gradcheck {
            op,
            seed,
            seeds,
            step,
            output,
        } => {
            let outcome = run_gradcheck(&op, seed, seeds, step)?;
            emit(&outcome.report, &output)?;
            return Ok(outcome.passed);
        }
        Command::Flops { stage, decoder, output } => {
            emit(&run_flops(&decoder.build(Preset::Base)?, stage)?, &output)?;
        }
        Command::Nms {
            scenario,
            iou_threshold,
            score_threshold,
            output,
        } => {
            let s = load_scenario(&scenario)?;
            let opts = NmsOptions {
                iou_threshold,
                score_threshold,
            };
            emit(&run_nms(&s, &opts)?, &output)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check exceeded tolerance");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
