use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairrag::config::RunConfig;
use fairrag::fixtures::PopulationSpec;
use fairrag::harness::{self, AblationConfig, EvalPaths, HarnessError};
use fairrag::prompts::{PromptSet, PromptTemplate};
use fairrag::IntersectionalGroup;

#[derive(Parser)]
#[command(
    name = "fairrag",
    version,
    about = "Fair reference retrieval and diversity evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embedding store management
    Index {
        #[command(subcommand)]
        command: IndexCommand,
    },
    /// Retrieve Top-N for a prompt and select K references
    Retrieve {
        #[arg(long)]
        store: PathBuf,
        /// JSON object mapping query text to its embedding
        #[arg(long)]
        query_embeddings: PathBuf,
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Select K references from a ranked candidate list (JSON array)
    Select {
        #[arg(long)]
        candidates: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write one conditioning bundle per selected reference
    Bundle {
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        projector: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Diversity, CLIP score and FID for a set of generated images
    Eval {
        /// JSON object: prompt -> list of group | face observation | null
        #[arg(long)]
        classifications: PathBuf,
        #[arg(long)]
        image_embeddings: Option<PathBuf>,
        #[arg(long)]
        text_embeddings: Option<PathBuf>,
        #[arg(long)]
        gen_features: Option<PathBuf>,
        #[arg(long)]
        real_features: Option<PathBuf>,
        #[arg(long)]
        gender_prompts: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare selection variants on synthetic skewed pools
    AblationDemo {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        pool_count: usize,
        #[arg(long, default_value_t = 0.8)]
        majority_fraction: f64,
        /// Print JSON instead of the text table
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate a synthetic annotated store
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Number of groups (taken in order) under a uniform prior
        #[arg(long, default_value_t = 120)]
        groups: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the bundled evaluation prompts
    Prompts {
        #[arg(long, default_value = PromptTemplate::PHOTO)]
        template: String,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build a store from embeddings JSONL and annotations JSONL
    Build {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flags layered over `$FAIRRAG_CONFIG`.
#[derive(Args, Default)]
struct RunArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    suffix: Option<String>,
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long)]
    no_debiased_query: bool,
    #[arg(long)]
    no_balanced_sampling: bool,
    #[arg(long)]
    no_text_instruction: bool,
    #[arg(long)]
    palette: Option<PathBuf>,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, HarnessError> {
        let mut c = RunConfig::from_env()?;
        if let Some(n) = self.n {
            c.n = n;
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(s) = &self.suffix {
            c.suffix = s.clone();
        }
        if let Some(i) = &self.instruction {
            c.instruction = i.clone();
        }
        c.debiased_query &= !self.no_debiased_query;
        c.balanced_sampling &= !self.no_balanced_sampling;
        c.text_instruction &= !self.no_text_instruction;
        c.validate()?;
        Ok(c)
    }

    /// Writes to `--report-out` when given, stdout otherwise.
    fn emit(&self, text: &str) -> Result<(), HarnessError> {
        match &self.report_out {
            Some(p) => fs::write(p, text).map_err(|source| HarnessError::Io {
                path: p.display().to_string(),
                source,
            }),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

fn json_line<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Index {
            command:
                IndexCommand::Build {
                    embeddings,
                    annotations,
                    out,
                },
        } => {
            let summary = harness::index_build(&embeddings, &annotations, &out)?;
            print!("{}", json_line(&summary));
        }
        Command::Retrieve {
            store,
            query_embeddings,
            prompt,
            run,
        } => {
            let sel = harness::retrieve(&store, &query_embeddings, &prompt, &run.config()?)?;
            run.emit(&json_line(&sel))?;
        }
        Command::Select { candidates, run } => {
            let sel = harness::select(&candidates, &run.config()?)?;
            run.emit(&json_line(&sel))?;
        }
        Command::Bundle {
            selection,
            store,
            projector,
            prompt,
            out_dir,
            run,
        } => {
            let paths = harness::bundle(
                &selection,
                &store,
                &projector,
                &prompt,
                &out_dir,
                &run.config()?,
            )?;
            print!("{}", json_line(&paths));
        }
        Command::Eval {
            classifications,
            image_embeddings,
            text_embeddings,
            gen_features,
            real_features,
            gender_prompts,
            run,
        } => {
            let config = run.config()?;
            let paths = EvalPaths {
                classifications,
                image_embeddings,
                text_embeddings,
                gen_features,
                real_features,
                gender_prompts,
                palette: run.palette.clone(),
            };
            let report = harness::eval(&paths, config.cardinalities)?;
            run.emit(&report.to_json())?;
        }
        Command::AblationDemo {
            trials,
            pool_count,
            majority_fraction,
            json,
            run,
        } => {
            let c = run.config()?;
            let table = harness::ablation_demo(&AblationConfig {
                pool_count,
                majority_fraction,
                n: c.n,
                k: c.k,
                trials,
                seed: c.seed,
                ..Default::default()
            })?;
            run.emit(&if json {
                table.to_json()
            } else {
                table.render()
            })?;
        }
        Command::Synth {
            out,
            count,
            dim,
            groups,
            noise,
            seed,
        } => {
            let all = IntersectionalGroup::all();
            if groups == 0 || groups > all.len() {
                return Err(HarnessError::Usage(format!(
                    "--groups must be in 1..={}",
                    all.len()
                )));
            }
            let spec = PopulationSpec::uniform(&all[..groups], count, dim, noise, seed);
            let summary = harness::synth(&spec, &out)?;
            print!("{}", json_line(&summary));
        }
        Command::Prompts { template } => {
            let set = PromptSet::bundled_with(&PromptTemplate::new(template));
            print!("{}", json_line(&set));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
