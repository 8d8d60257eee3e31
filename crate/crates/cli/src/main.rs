use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use hashlab::config::{parse_list, Dataset, ExperimentConfig};
use hashlab::image::read_image;
use hashlab::pipeline::{self, RunPaths};
use hashlab_core::hashing::{binarize, BinaryCodeSet};
use hashlab_core::nn;
use hashlab_core::retrieval::{hamming_rank, probe_count, HammingIndex, RadiusSearcher};

#[derive(Parser)]
#[command(name = "hashlab", version, about = "Binary hashing from CNN activations for image retrieval")]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, encode and evaluate every configured method and code length.
    Run(ExpArgs),
    /// Train one model per code length and save checkpoints.
    Train(ExpArgs),
    /// Encode query and database items into code or feature files.
    Encode {
        #[command(flatten)]
        exp: ExpArgs,
        /// Checkpoint to use instead of <out>/models/model_<bits>.cbhm.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Build a Hamming lookup table from a code file and report its shape.
    Index {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long, default_value_t = 2)]
        radius: u32,
        /// Look up the code of this item id within the radius.
        #[arg(long)]
        item: Option<u32>,
    },
    /// Evaluate every code/feature file pair in <out>/codes.
    Eval {
        #[arg(long, default_value = "runs/mnist")]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        radius: u32,
    },
    /// Rank a database code file against one image.
    Query {
        #[arg(long)]
        model: PathBuf,
        /// CNNBH database code file produced with the same model.
        #[arg(long)]
        codes: PathBuf,
        /// PGM/PPM or raw channel-major image file.
        #[arg(long, conflicts_with = "item")]
        image: Option<PathBuf>,
        /// Use this dataset item as the query image.
        #[arg(long)]
        item: Option<u32>,
        #[arg(long, default_value = "mnist")]
        dataset: Dataset,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Args, Clone)]
struct ExpArgs {
    /// key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<Dataset>,
    /// Architecture template; the first fully connected layer becomes the knob.
    #[arg(long)]
    arch: Option<String>,
    /// Comma-separated code lengths.
    #[arg(long)]
    bits: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Shorten the schedule to this many epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated subset of CNNBH, LSH_pixels, L2_fc, L2_fc_plus.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report k-fold held-out errors before training each model.
    #[arg(long)]
    cv: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    n_query: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    /// Sample query and training items uniformly instead of per class.
    #[arg(long)]
    unbalanced: bool,
    #[arg(long)]
    lsh_seed: Option<u64>,
    #[arg(long)]
    radius: Option<u32>,
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.dataset) {
            (Some(path), ds) => {
                let cfg = ExperimentConfig::load(path)?;
                match ds {
                    Some(d) if d != cfg.dataset => ExperimentConfig {
                        dataset: d,
                        ..cfg
                    },
                    _ => cfg,
                }
            }
            (None, ds) => ExperimentConfig::new(ds.unwrap_or(Dataset::Mnist)),
        };
        if let Some(v) = &self.arch {
            cfg.arch = Some(v.clone());
        }
        if let Some(v) = &self.bits {
            cfg.bits = parse_list(v)?;
        }
        if let Some(v) = &self.methods {
            cfg.methods = parse_list(v)?;
        }
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        cfg.epochs = self.epochs.or(cfg.epochs);
        cfg.out = self.out.clone().unwrap_or(cfg.out);
        cfg.cv_folds = self.cv.unwrap_or(cfg.cv_folds);
        cfg.dropout = self.dropout.or(cfg.dropout);
        cfg.n_query = self.n_query.unwrap_or(cfg.n_query);
        cfg.n_train = self.n_train.unwrap_or(cfg.n_train);
        cfg.lsh_seed = self.lsh_seed.unwrap_or(cfg.lsh_seed);
        cfg.radius = self.radius.unwrap_or(cfg.radius);
        if self.unbalanced {
            cfg.balanced = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let outcome = pipeline::run(&cfg)?;
            print!("{}", hashlab::report::map_table(&outcome.results));
            println!("manifest: {}", RunPaths::new(&cfg.out).manifest().display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let data = pipeline::load_dataset(cfg.dataset)?;
            let paths = RunPaths::new(&cfg.out);
            paths.create()?;
            let split = pipeline::prepare_split(&cfg, &data, &paths)?;
            for &bits in &cfg.bits {
                let t = pipeline::train_for_bits(&cfg, &data, &split, bits)?;
                let path = paths.model(bits);
                nn::save_model(&t.model, &path)?;
                println!(
                    "{bits:>3} bits: final training error {:.4}, {:.1}s -> {}",
                    t.model.meta.final_train_error,
                    t.seconds,
                    path.display()
                );
                for (i, e) in t.cv_errors.iter().enumerate() {
                    println!("    fold {}: held-out error {e:.4}", i + 1);
                }
            }
        }
        Command::Encode { exp, model } => {
            let cfg = exp.resolve()?;
            let data = pipeline::load_dataset(cfg.dataset)?;
            let paths = RunPaths::new(&cfg.out);
            paths.create()?;
            let split = pipeline::prepare_split(&cfg, &data, &paths)?;
            let needs_model = cfg.methods.iter().any(|m| m.needs_model());
            if model.is_some() {
                ensure!(cfg.bits.len() == 1, "--model takes a single --bits value");
            }
            for &bits in &cfg.bits {
                let m = if needs_model {
                    let path = model.clone().unwrap_or_else(|| paths.model(bits));
                    Some(nn::load_model(&path).with_context(|| format!("loading {}", path.display()))?)
                } else {
                    None
                };
                for (_, path) in pipeline::encode_all(&cfg, &data, &split, bits, m.as_ref(), &paths)? {
                    println!("{}", path.display());
                }
            }
        }
        Command::Index { codes, radius, item } => {
            let set = BinaryCodeSet::load(&codes).with_context(|| format!("reading {}", codes.display()))?;
            let index = HammingIndex::build(&set)?;
            let largest = index.buckets().map(|(_, b)| b.len()).max().unwrap_or(0);
            println!("items        {}", index.len());
            println!("bits         {}", index.bits());
            println!("buckets      {}", index.bucket_count());
            println!("largest      {largest}");
            println!("probes(r={radius}) {}", probe_count(index.bits(), radius));
            if let Some(id) = item {
                let pos = set
                    .item_ids
                    .iter()
                    .position(|&i| i == id)
                    .with_context(|| format!("item {id} is not in {}", codes.display()))?;
                let found = index.lookup_within_radius(&set.codes[pos], radius)?;
                println!("within radius {radius} of item {id}: {} items", found.len());
                for f in found {
                    println!("{f}");
                }
            }
        }
        Command::Eval { out, radius } => {
            let paths = RunPaths::new(&out);
            let (results, files) = pipeline::eval_dir(&paths.codes_dir(), &paths.reports_dir(), radius)?;
            print!("{}", hashlab::report::map_table(&results));
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Query {
            model,
            codes,
            image,
            item,
            dataset,
            k,
        } => {
            let model = nn::load_model(&model).with_context(|| format!("loading {}", model.display()))?;
            let db = BinaryCodeSet::load(&codes).with_context(|| format!("reading {}", codes.display()))?;
            ensure!(
                model.arch.knob_width() == Some(db.bits),
                "model produces {:?}-bit codes, {} holds {}-bit codes",
                model.arch.knob_width(),
                codes.display(),
                db.bits
            );
            let pixels = match (image, item) {
                (Some(path), _) => read_image(&path, model.arch.input)?,
                (None, Some(id)) => {
                    let data = pipeline::load_dataset(dataset)?;
                    let pos = data
                        .ids
                        .iter()
                        .position(|&i| i == id)
                        .with_context(|| format!("item {id} not in {dataset}"))?;
                    data.image_bytes(pos).to_vec()
                }
                (None, None) => bail!("give --image or --item"),
            };
            let mut ex = model.extractor();
            let code = binarize(ex.extract_bytes(&pixels, model.knob_index())?)?;
            let mut ranked = hamming_rank(&db, &code)?;
            if k > ranked.len() {
                log::warn!("k = {k} exceeds the database size {}; returning the full ranking", ranked.len());
            }
            ranked.truncate(k);
            let labels: std::collections::HashMap<u32, Option<u16>> =
                db.item_ids.iter().copied().zip(db.labels.iter().copied()).collect();
            println!("rank\tid\tdistance\tlabel");
            for (r, (id, d)) in ranked.ids.iter().zip(&ranked.distances).enumerate() {
                let label = labels[id].map_or_else(|| "-".to_string(), |l| l.to_string());
                println!("{}\t{id}\t{d}\t{label}", r + 1);
            }
            let within = RadiusSearcher::new(&db).search(&code, 2)?;
            println!("# {} items within Hamming radius 2", within.len());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use hashlab::config::Method;

    #[test]
    fn cli_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_defaults() {
        let cli = Cli::try_parse_from([
            "hashlab", "train", "--dataset", "cifar10", "--bits", "8,16", "--epochs", "100", "--methods", "CNNBH,LSH_pixels",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else { panic!() };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.dataset, Dataset::Cifar10);
        assert_eq!(cfg.bits, vec![8, 16]);
        assert_eq!(cfg.methods, vec![Method::Cnnbh, Method::LshPixels]);
        assert_eq!(cfg.schedule().boundaries, vec![55, 77]);
        assert!(cfg.arch_for(8).unwrap().to_string().contains("H8-D0-H10"));
    }
}
