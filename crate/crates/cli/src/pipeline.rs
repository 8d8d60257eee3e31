//! Experiment steps: data, split, training, encoding and evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use hashlab_core::data::{self, LabeledImageSet, SplitSpec};
use hashlab_core::eval::{pr_sample_ranks, radius_precision, EvalReport, RankingAccumulator};
use hashlab_core::hashing::{binarize, lsh_encode, make_lsh, rectify_fc_plus, BinaryCodeSet, FeatureSet};
use hashlab_core::nn::{self, TrainedModel};
use hashlab_core::retrieval::{hamming_rank, l2_rank, RadiusSearcher};

use crate::config::{Dataset, ExperimentConfig, Method};
use crate::manifest::RunManifest;
use crate::report;

/// Precision@N cutoffs written to `precision_at_n.csv`.
pub const PRECISION_CUTOFFS: [usize; 16] = [1, 10, 20, 50, 100, 200, 300, 400, 500, 600, 700, 800, 900, 1000, 1500, 2000];

/// Dataset root: `$HASHLAB_DATA`, else the repository's `data/` directory.
pub fn data_root() -> PathBuf {
    std::env::var_os("HASHLAB_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn dataset_dir(dataset: Dataset) -> PathBuf {
    data_root().join(dataset.subdir())
}

pub fn load_dataset(dataset: Dataset) -> Result<LabeledImageSet> {
    let dir = dataset_dir(dataset);
    let set = match dataset {
        Dataset::Mnist => data::load_mnist_dir(&dir),
        Dataset::Cifar10 => data::load_cifar10_dir(&dir),
    }
    .with_context(|| format!("loading {dataset} from {}", dir.display()))?;
    log::info!("loaded {} {dataset} images from {}", set.len(), dir.display());
    Ok(set)
}

/// Output file layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.txt")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }

    pub fn model(&self, bits: usize) -> PathBuf {
        self.root.join("models").join(format!("model_{bits}.cbhm"))
    }

    pub fn codes_dir(&self) -> PathBuf {
        self.root.join("codes")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn encoded(&self, method: Method, bits: usize, role: Role) -> PathBuf {
        self.codes_dir().join(encoded_file_name(method, bits, role))
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.root.join("models"), self.codes_dir(), self.reports_dir()] {
            std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Query,
    Database,
}

impl Role {
    fn tag(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Database => "db",
        }
    }
}

pub fn encoded_file_name(method: Method, bits: usize, role: Role) -> String {
    let ext = if method.is_binary() { "cbh" } else { "cbhf" };
    format!("{}_{bits}_{}.{ext}", method.name(), role.tag())
}

/// Inverse of [`encoded_file_name`].
pub fn parse_encoded_file_name(name: &str) -> Option<(Method, usize, Role)> {
    let (stem, ext) = name.rsplit_once('.')?;
    let (rest, role) = stem.rsplit_once('_')?;
    let (method, bits) = rest.rsplit_once('_')?;
    let method: Method = method.parse().ok()?;
    let role = match role {
        "query" => Role::Query,
        "db" => Role::Database,
        _ => return None,
    };
    let want = if method.is_binary() { "cbh" } else { "cbhf" };
    (ext == want).then_some((method, bits.parse().ok()?, role))
}

/// Reuses `split.txt` in the run directory when it matches the config,
/// otherwise samples a fresh split and saves it.
pub fn prepare_split(cfg: &ExperimentConfig, data: &LabeledImageSet, paths: &RunPaths) -> Result<SplitSpec> {
    let path = paths.split();
    if path.is_file() {
        let split = SplitSpec::load(&path)?;
        if split.total == data.len()
            && split.seed == cfg.seed
            && split.balanced == cfg.balanced
            && split.query.len() == cfg.n_query
            && split.train.len() == cfg.n_train
        {
            log::info!("reusing split {}", path.display());
            return Ok(split);
        }
        log::warn!("{} does not match the configuration; resampling", path.display());
    }
    let split = data::sample_split(data, cfg.n_query, cfg.n_train, cfg.seed, cfg.balanced)?;
    split.save(&path)?;
    Ok(split)
}

pub struct Trained {
    pub model: TrainedModel,
    pub cv_errors: Vec<f64>,
    pub seconds: f64,
}

pub fn train_for_bits(cfg: &ExperimentConfig, data: &LabeledImageSet, split: &SplitSpec, bits: usize) -> Result<Trained> {
    let arch = cfg.arch_for(bits)?;
    let schedule = cfg.schedule_for(&arch);
    let train_set = data.subset(&split.train);
    log::info!(
        "training {arch} on {} images for {} epochs (boundaries {:?})",
        train_set.len(),
        schedule.total_epochs,
        schedule.boundaries
    );
    let start = Instant::now();
    let cv_errors = if cfg.cv_folds >= 2 {
        let errs = nn::cross_validate(&arch, &train_set, &schedule, cfg.cv_folds)?;
        for (i, e) in errs.iter().enumerate() {
            log::info!("fold {}/{}: held-out error {e:.4}", i + 1, cfg.cv_folds);
        }
        errs
    } else {
        Vec::new()
    };
    let mut model = nn::train(&arch, &train_set, &schedule)?;
    if !cv_errors.is_empty() {
        model.meta.validation_error = Some(cv_errors.iter().sum::<f64>() / cv_errors.len() as f64);
    }
    Ok(Trained {
        model,
        cv_errors,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoded {
    Codes(BinaryCodeSet),
    Features(FeatureSet),
}

impl Encoded {
    pub fn len(&self) -> usize {
        match self {
            Encoded::Codes(c) => c.len(),
            Encoded::Features(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Encoded::Codes(c) => c.save(path),
            Encoded::Features(f) => f.save(path),
        }
        .with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path, binary: bool) -> Result<Self> {
        let e = if binary {
            BinaryCodeSet::load(path).map(Encoded::Codes)
        } else {
            FeatureSet::load(path).map(Encoded::Features)
        };
        e.with_context(|| format!("reading {}", path.display()))
    }
}

/// Encodes the items at `positions` with a model-based method.
pub fn encode_with_model(
    model: &TrainedModel,
    method: Method,
    data: &LabeledImageSet,
    positions: &[u32],
) -> Result<Encoded> {
    ensure!(method.needs_model(), "{method} does not use a trained model");
    let (c, h, w) = model.arch.input;
    ensure!(
        (data.channels, data.height, data.width) == (c, h, w),
        "dataset images are {}x{}x{}, model expects {c}x{h}x{w}",
        data.channels,
        data.height,
        data.width
    );
    let knob = model.knob_index();
    let bits = model.arch.knob_width().expect("knob");
    let mut ex = model.extractor();
    let mut codes = BinaryCodeSet::new(bits);
    let mut feats = FeatureSet::new(bits);
    for &p in positions {
        let p = p as usize;
        let act = ex.extract_bytes(data.image_bytes(p), knob)?;
        let (id, label) = (data.ids[p], Some(u16::from(data.labels[p])));
        match method {
            Method::Cnnbh => codes.push(id, label, binarize(act)?)?,
            Method::L2Fc => feats.push(id, label, act)?,
            Method::L2FcPlus => feats.push(id, label, &rectify_fc_plus(act))?,
            Method::LshPixels => unreachable!(),
        }
    }
    Ok(if method == Method::Cnnbh {
        Encoded::Codes(codes)
    } else {
        Encoded::Features(feats)
    })
}

/// Per-pixel mean of `positions`, after scaling pixels to [0, 1].
pub fn pixel_mean(data: &LabeledImageSet, positions: &[u32]) -> Vec<f64> {
    let mut sum = vec![0.0; data.image_len()];
    for &p in positions {
        for (s, &b) in sum.iter_mut().zip(data.image_bytes(p as usize)) {
            *s += f64::from(b);
        }
    }
    let scale = 255.0 * positions.len().max(1) as f64;
    sum.iter().map(|s| s / scale).collect()
}

/// Gaussian LSH over pixels scaled to [0, 1] with `mean` subtracted.
pub fn encode_lsh_pixels(
    data: &LabeledImageSet,
    positions: &[u32],
    mean: &[f64],
    bits: usize,
    seed: u64,
) -> Result<Encoded> {
    let lsh = make_lsh(data.image_len(), bits, seed)?;
    let mut codes = BinaryCodeSet::new(bits);
    let mut x = vec![0.0; data.image_len()];
    for &p in positions {
        let p = p as usize;
        for ((v, &b), m) in x.iter_mut().zip(data.image_bytes(p)).zip(mean) {
            *v = f64::from(b) / 255.0 - m;
        }
        codes.push(data.ids[p], Some(u16::from(data.labels[p])), lsh_encode(&lsh, &x)?)?;
    }
    Ok(Encoded::Codes(codes))
}

fn labels_of<'a>(ids: &'a [u32], labels: &'a [Option<u16>]) -> Result<HashMap<u32, u16>> {
    ids.iter()
        .zip(labels)
        .map(|(&id, l)| l.map(|l| (id, l)).ok_or_else(|| anyhow!("item {id} has no label")))
        .collect()
}

/// Ranks every database item for every query and scores the rankings by
/// label agreement. Binary codes also get a radius-lookup precision.
pub fn evaluate(query: &Encoded, db: &Encoded, radius: u32) -> Result<EvalReport> {
    ensure!(!query.is_empty(), "no queries");
    ensure!(!db.is_empty(), "empty database");
    let mut acc = RankingAccumulator::new(&PRECISION_CUTOFFS, &pr_sample_ranks(db.len()));
    let mut rel = Vec::with_capacity(db.len());
    match (query, db) {
        (Encoded::Codes(q), Encoded::Codes(d)) => {
            ensure!(q.bits == d.bits, "query codes have {} bits, database {}", q.bits, d.bits);
            let db_labels = labels_of(&d.item_ids, &d.labels)?;
            let q_labels: Vec<u16> = labels_of(&q.item_ids, &q.labels)
                .map(|m| q.item_ids.iter().map(|id| m[id]).collect())?;
            let searcher = RadiusSearcher::new(d);
            let mut returned = Vec::with_capacity(q.len());
            for (code, &ql) in q.codes.iter().zip(&q_labels) {
                let ranked = hamming_rank(d, code)?;
                rel.clear();
                rel.extend(ranked.ids.iter().map(|id| db_labels[id] == ql));
                acc.add(&rel);
                returned.push(searcher.search(code, radius)?);
            }
            let r = radius_precision(&q.item_ids, &q_labels, &returned, |id| db_labels[&id])?;
            Ok(acc.finish(Some(r))?)
        }
        (Encoded::Features(q), Encoded::Features(d)) => {
            ensure!(q.dim == d.dim, "query features have {} dims, database {}", q.dim, d.dim);
            let db_labels = labels_of(&d.item_ids, &d.labels)?;
            let q_labels = labels_of(&q.item_ids, &q.labels)?;
            for (row, id) in q.rows().zip(&q.item_ids) {
                let ranked = l2_rank(d, row)?;
                let ql = q_labels[id];
                rel.clear();
                rel.extend(ranked.ids.iter().map(|id| db_labels[id] == ql));
                acc.add(&rel);
            }
            Ok(acc.finish(None)?)
        }
        _ => bail!("query and database encodings differ in kind"),
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub bits: usize,
    pub report: EvalReport,
}

/// Evaluates every query/database file pair in `codes_dir`, in method then
/// code-length order, and writes CSV and SVG reports to `reports_dir`.
pub fn eval_dir(codes_dir: &Path, reports_dir: &Path, radius: u32) -> Result<(Vec<MethodResult>, Vec<PathBuf>)> {
    let mut pairs: Vec<(Method, usize)> = Vec::new();
    for entry in std::fs::read_dir(codes_dir).with_context(|| format!("listing {}", codes_dir.display()))? {
        let name = entry?.file_name();
        if let Some((m, b, Role::Query)) = name.to_str().and_then(parse_encoded_file_name) {
            pairs.push((m, b));
        }
    }
    pairs.sort();
    ensure!(!pairs.is_empty(), "no encoded query files in {}", codes_dir.display());
    let mut results = Vec::new();
    for (method, bits) in pairs {
        let q = Encoded::load(&codes_dir.join(encoded_file_name(method, bits, Role::Query)), method.is_binary())?;
        let db_path = codes_dir.join(encoded_file_name(method, bits, Role::Database));
        let d = Encoded::load(&db_path, method.is_binary())?;
        let start = Instant::now();
        let report = evaluate(&q, &d, radius).with_context(|| format!("evaluating {method} at {bits} bits"))?;
        log::info!(
            "{method:>10} {bits:>3} bits: MAP {:.4}{} ({:.1}s)",
            report.map,
            report
                .radius2
                .map(|r| format!(", radius-{radius} precision {:.4}", r.precision))
                .unwrap_or_default(),
            start.elapsed().as_secs_f64()
        );
        results.push(MethodResult { method, bits, report });
    }
    std::fs::create_dir_all(reports_dir)?;
    let files = report::write_reports(&results, reports_dir)?;
    Ok((results, files))
}

/// Encodes the query and database items with every configured method at
/// one code length and saves the files. Returns `(manifest key, path)`.
pub fn encode_all(
    cfg: &ExperimentConfig,
    data: &LabeledImageSet,
    split: &SplitSpec,
    bits: usize,
    model: Option<&TrainedModel>,
    paths: &RunPaths,
) -> Result<Vec<(String, PathBuf)>> {
    let db = split.database();
    let mean = pixel_mean(data, &split.train);
    let mut written = Vec::new();
    for &method in &cfg.methods {
        for (role, ids) in [(Role::Query, &split.query), (Role::Database, &db)] {
            let enc = if method.needs_model() {
                let model = model.ok_or_else(|| anyhow!("{method} needs a trained {bits}-bit model"))?;
                ensure!(
                    model.arch.knob_width() == Some(bits),
                    "model knob has {:?} units, expected {bits}",
                    model.arch.knob_width()
                );
                encode_with_model(model, method, data, ids)?
            } else {
                encode_lsh_pixels(data, ids, &mean, bits, cfg.lsh_seed)?
            };
            let path = paths.encoded(method, bits, role);
            enc.save(&path)?;
            written.push((format!("codes.{method}.{bits}.{}", role.tag()), path));
        }
    }
    Ok(written)
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub results: Vec<MethodResult>,
    pub models: Vec<TrainedModel>,
}

/// Runs the configured experiment end to end in `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg.dataset)?;
    run_on(cfg, &data)
}

pub fn run_on(cfg: &ExperimentConfig, data: &LabeledImageSet) -> Result<RunOutcome> {
    cfg.validate()?;
    let paths = RunPaths::new(&cfg.out);
    paths.create()?;
    std::fs::write(paths.config(), cfg.to_text())?;
    let mut manifest = RunManifest::new(cfg);
    manifest.files.push(("config".into(), paths.config()));

    let split = prepare_split(cfg, data, &paths)?;
    manifest.files.push(("split".into(), paths.split()));
    let needs_model = cfg.methods.iter().any(|m| m.needs_model());
    let mut models = Vec::new();

    for &bits in &cfg.bits {
        if needs_model {
            let t = train_for_bits(cfg, data, &split, bits)?;
            log::info!(
                "{bits}-bit model: final training error {:.4} ({:.1}s)",
                t.model.meta.final_train_error,
                t.seconds
            );
            let path = paths.model(bits);
            nn::save_model(&t.model, &path).with_context(|| format!("writing {}", path.display()))?;
            manifest.files.push((format!("model.{bits}"), path));
            manifest.timings.push((format!("train.{bits}"), t.seconds));
            manifest.train_errors.push((bits, t.model.meta.final_train_error));
            for (i, e) in t.cv_errors.iter().enumerate() {
                manifest.cv_errors.push((bits, i, *e));
            }
            models.push(t.model);
        }
        let start = Instant::now();
        let written = encode_all(cfg, data, &split, bits, models.last(), &paths)?;
        manifest.files.extend(written);
        manifest.timings.push((format!("encode.{bits}"), start.elapsed().as_secs_f64()));
    }

    let start = Instant::now();
    let (results, reports) = eval_dir(&paths.codes_dir(), &paths.reports_dir(), cfg.radius)?;
    manifest.timings.push(("eval".into(), start.elapsed().as_secs_f64()));
    for r in reports {
        let key = format!("report.{}", r.file_name().unwrap_or_default().to_string_lossy());
        manifest.files.push((key, r));
    }
    manifest.save(&paths.manifest())?;
    Ok(RunOutcome {
        manifest,
        results,
        models,
    })
}
