//! `partq` — train, index, search, and evaluate part-quality ReID models.
//!
//! Exit codes: 0 success, 2 configuration errors, 1 runtime failures.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use partq::checkpoint;
use partq::config::RunConfig;
use partq::data::{self, LoadOptions, PixelSpec, ReidSample, SampleSets};
use partq::error::Error;
use partq::metrics::{evaluate, EvalReport, Protocol};
use partq::model::Model;
use partq::retrieval::{
    ablation_table, index_gallery, read_feature_dump, search, write_feature_dump, GalleryRecord,
    SearchParams,
};
use partq::synth::{OccluderMix, SynthConfig};
use partq::train::{TrainSet, Trainer};
use partq::viz::write_quality_overlay;

type F = f32;

#[derive(Parser)]
#[command(
    name = "partq",
    version,
    about = "Part-based person re-identification with jointly learned part quality scores"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Build a binary feature index for the gallery split
    Index(IndexArgs),
    /// Rank an indexed gallery for every query image
    Search(SearchArgs),
    /// Compute CMC / mAP for the query split against the gallery split
    Eval(EvalArgs),
    /// Render per-part quality overlays and attention heat maps
    VizQuality(VizArgs),
    /// Train and evaluate the component ablation matrix
    Ablate(AblateArgs),
    /// Generate a synthetic occluded-pedestrian dataset
    Synth(SynthArgs),
}

/// Options shared by every subcommand that builds or loads a model.
#[derive(Args, Clone)]
struct CommonOpts {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Stage-1 candidate count override
    #[arg(long)]
    n: Option<usize>,
    /// Part/global distance blend override
    #[arg(long)]
    gamma: Option<f64>,
    /// Part count override
    #[arg(long = "K")]
    parts: Option<usize>,
    /// Part embedding dimension override
    #[arg(long)]
    d: Option<usize>,
    /// Loss toggle overrides, e.g. --toggle part_id=off (repeatable)
    #[arg(long = "toggle")]
    toggles: Vec<String>,
    /// Evaluation protocol: standard | partial
    #[arg(long)]
    protocol: Option<String>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml(&std::fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(n) = self.n {
            cfg.retrieval.top_n = n;
        }
        if let Some(gamma) = self.gamma {
            cfg.retrieval.gamma = gamma;
        }
        if let Some(parts) = self.parts {
            cfg.model.parts = parts;
        }
        if let Some(d) = self.d {
            cfg.model.embed_dim = d;
            cfg.model.global_dim = d;
        }
        for toggle in &self.toggles {
            let (name, value) = toggle
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad --toggle `{toggle}`, want NAME=on|off")))?;
            let on = match value {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                other => return Err(Error::config(format!("bad toggle value `{other}`"))),
            };
            cfg.model.ablation.losses.set(name, on)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn protocol(&self) -> Result<Protocol, Error> {
        match self.protocol.as_deref() {
            None | Some("standard") => Ok(Protocol::Standard),
            Some("partial") => Ok(Protocol::Partial),
            Some(other) => Err(Error::config(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Dataset root (train/ split required)
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    out: PathBuf,
    /// Metrics log prefix; writes <prefix>.csv and <prefix>.jsonl
    #[arg(long)]
    log: Option<PathBuf>,
    /// Epoch count override
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root (gallery split is indexed)
    #[arg(long)]
    data: PathBuf,
    /// Feature dump output path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature dump produced by `partq index`
    #[arg(long)]
    index: PathBuf,
    /// Dataset root (query split is searched)
    #[arg(long)]
    data: PathBuf,
    /// Ranking report output (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report output (JSON)
    #[arg(long)]
    out: PathBuf,
    /// CMC curve output (CSV)
    #[arg(long)]
    cmc: Option<PathBuf>,
}

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to render: query | gallery | train
    #[arg(long, default_value = "query")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Maximum number of images to render
    #[arg(long, default_value_t = 16)]
    limit: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated seeds, one training run each
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Epochs per run
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    /// Report output (JSON); a CSV sits next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset root
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    identities: usize,
    #[arg(long = "images-per-identity", default_value_t = 20)]
    images_per_identity: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long = "occlusion-prob", default_value_t = 0.5)]
    occlusion_probability: f64,
    /// objects | pedestrians | both
    #[arg(long, default_value = "objects")]
    occluders: String,
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Index(args) => cmd_index(args),
        Command::Search(args) => cmd_search(args),
        Command::Eval(args) => cmd_eval(args),
        Command::VizQuality(args) => cmd_viz(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Serde(_) => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

fn pixel_spec(cfg: &RunConfig) -> PixelSpec {
    PixelSpec {
        height: cfg.model.backbone.input_height,
        width: cfg.model.backbone.input_width,
    }
}

fn to_train_set(cfg: &RunConfig, samples: &[ReidSample<F>]) -> Result<TrainSet<F>, Error> {
    let pairs = samples
        .iter()
        .map(|s| {
            let img = data::normalize_image(&s.pixels, &cfg.model.pixel_mean, &cfg.model.pixel_std);
            (img, s.identity as u32)
        })
        .collect();
    TrainSet::new(pairs)
}

fn train_model(
    mut cfg: RunConfig,
    sets: &SampleSets<F>,
    epochs: Option<usize>,
) -> Result<(Trainer<F>, RunConfig), Error> {
    if let Some(epochs) = epochs {
        cfg.train.epochs = epochs;
    }
    let train_set = to_train_set(&cfg, &sets.train)?;
    cfg.model.num_classes = train_set.num_classes();
    cfg.validate()?;
    let model = Model::<F>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), train_set)?;
    trainer.train()?;
    Ok((trainer, cfg))
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg = args.common.resolve()?;
    let opts = LoadOptions {
        require_train: true,
        require_eval: false,
        ..LoadOptions::default()
    };
    let sets = data::load_reid_dir::<F>(&args.data, &pixel_spec(&cfg), &opts)?;
    println!(
        "training on {} images / {} identities",
        sets.train.len(),
        sets.train
            .iter()
            .map(|s| s.identity)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    );
    let seed = cfg.train.seed;
    let (trainer, cfg) = match train_model(cfg, &sets, args.epochs) {
        Ok(ok) => ok,
        Err(Error::Diverged { epoch, step, detail }) => {
            // diagnostic dump next to the requested checkpoint path
            let dump = args.out.with_extension("diverged.json");
            let _ = std::fs::write(
                &dump,
                format!(
                    "{{\"epoch\":{epoch},\"step\":{step},\"detail\":{:?}}}",
                    detail
                ),
            );
            return Err(Error::Diverged { epoch, step, detail });
        }
        Err(e) => return Err(e),
    };
    if let Some(prefix) = &args.log {
        trainer.log.write_csv(&prefix.with_extension("csv"))?;
        trainer.log.write_jsonl(&prefix.with_extension("jsonl"))?;
    }
    let epochs = trainer.config().epochs;
    let model = trainer.into_model();
    checkpoint::save(&args.out, &model, Some(&cfg), seed, epochs)?;
    println!("checkpoint written to {:?}", args.out);
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model<F>, RunConfig), Error> {
    let (model, meta) = checkpoint::load::<F>(path)?;
    let run = meta.run.unwrap_or_else(|| RunConfig {
        model: meta.model.clone(),
        ..RunConfig::default()
    });
    Ok((model, run))
}

fn cmd_index(args: IndexArgs) -> Result<(), Error> {
    let (model, run) = load_model(&args.checkpoint)?;
    let spec = PixelSpec {
        height: model.cfg().backbone.input_height,
        width: model.cfg().backbone.input_width,
    };
    let sets = data::load_reid_dir::<F>(&args.data, &spec, &LoadOptions::default())?;
    let records = index_gallery(&model, &sets.gallery, run.train.batch_size())?;
    write_feature_dump(&args.out, &records)?;
    println!("indexed {} gallery images to {:?}", records.len(), args.out);
    Ok(())
}

#[derive(Serialize)]
struct SearchReportEntry {
    query_identity: i64,
    query_camera: u32,
    /// Gallery positions in final order (top segment only).
    ranked: Vec<usize>,
    ranked_identities: Vec<i64>,
    stage1_distance: Vec<f64>,
    final_distance: Vec<f64>,
}

#[derive(Serialize)]
struct SearchReport {
    config: RunConfig,
    n: usize,
    gamma: f64,
    queries: Vec<SearchReportEntry>,
}

fn cmd_search(args: SearchArgs) -> Result<(), Error> {
    let mut run = args.common.resolve()?;
    let (model, trained_run) = load_model(&args.checkpoint)?;
    // model geometry comes from the checkpoint; retrieval knobs from the CLI
    run.model = trained_run.model.clone();
    let gallery = read_feature_dump::<F>(&args.index)?;
    let spec = PixelSpec {
        height: model.cfg().backbone.input_height,
        width: model.cfg().backbone.input_width,
    };
    let opts = LoadOptions::default();
    let sets = data::load_reid_dir::<F>(&args.data, &spec, &opts)?;
    let queries = index_gallery(&model, &sets.query, run.train.batch_size())?;
    let params = SearchParams::for_model_cfg(
        model.cfg(),
        run.retrieval.top_n,
        run.retrieval.gamma,
    )?;
    let mut entries = Vec::new();
    for q in &queries {
        let result = search(q, &gallery, &params)?;
        let keep = result.order.len().min(result.n_used.max(run.retrieval.top_n));
        entries.push(SearchReportEntry {
            query_identity: q.identity,
            query_camera: q.camera,
            ranked: result.order[..keep].to_vec(),
            ranked_identities: result.order[..keep]
                .iter()
                .map(|&i| gallery[i].identity)
                .collect(),
            stage1_distance: result.stage1[..keep].iter().map(|d| *d as f64).collect(),
            final_distance: result.reranked.iter().map(|d| *d as f64).collect(),
        });
    }
    let report = SearchReport {
        n: run.retrieval.top_n,
        gamma: run.retrieval.gamma,
        config: run,
        queries: entries,
    };
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    println!("search report written to {:?}", args.out);
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    config: RunConfig,
    protocol: Protocol,
    #[serde(flatten)]
    report: EvalReport,
}

fn build_eval_records(
    model: &Model<F>,
    run: &RunConfig,
    data_dir: &Path,
) -> Result<(Vec<GalleryRecord<F>>, Vec<GalleryRecord<F>>), Error> {
    let spec = PixelSpec {
        height: model.cfg().backbone.input_height,
        width: model.cfg().backbone.input_width,
    };
    let sets = data::load_reid_dir::<F>(data_dir, &spec, &LoadOptions::default())?;
    let queries = index_gallery(model, &sets.query, run.train.batch_size())?;
    let gallery = index_gallery(model, &sets.gallery, run.train.batch_size())?;
    Ok((queries, gallery))
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let mut run = args.common.resolve()?;
    let protocol = args.common.protocol()?;
    let (model, trained_run) = load_model(&args.checkpoint)?;
    run.model = trained_run.model.clone();
    let (queries, gallery) = build_eval_records(&model, &run, &args.data)?;
    let params = SearchParams::for_model_cfg(
        model.cfg(),
        run.retrieval.top_n,
        run.retrieval.gamma,
    )?;
    let report = evaluate(&queries, &gallery, protocol, &params)?;
    println!(
        "rank1 {:.4}  rank5 {:.4}  rank10 {:.4}  mAP {:.4}  ({} queries, {} skipped)",
        report.rank1, report.rank5, report.rank10, report.map, report.num_queries,
        report.skipped_queries
    );
    if let Some(cmc_path) = &args.cmc {
        std::fs::write(cmc_path, report.cmc_csv())?;
    }
    let output = EvalOutput {
        config: run,
        protocol,
        report,
    };
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&output).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    println!("eval report written to {:?}", args.out);
    Ok(())
}

fn cmd_viz(args: VizArgs) -> Result<(), Error> {
    let (model, run) = load_model(&args.checkpoint)?;
    let spec = PixelSpec {
        height: model.cfg().backbone.input_height,
        width: model.cfg().backbone.input_width,
    };
    let mut opts = LoadOptions::default();
    opts.require_eval = args.split != "train";
    opts.require_train = args.split == "train";
    let sets = data::load_reid_dir::<F>(&args.data, &spec, &opts)?;
    let samples = match args.split.as_str() {
        "query" => &sets.query,
        "gallery" => &sets.gallery,
        "train" => &sets.train,
        other => return Err(Error::config(format!("unknown split `{other}`"))),
    };
    let chosen = &samples[..samples.len().min(args.limit)];
    let mut batch = Vec::new();
    for s in chosen {
        batch.push(s.clone());
    }
    let records = {
        // embeddings with attention maps, one batch at a time
        let mut out = Vec::new();
        for chunk in batch.chunks(run.train.batch_size().max(1)) {
            let (h, w) = (spec.height, spec.width);
            let mut arr = ndarray::Array4::<F>::zeros((chunk.len(), 3, h, w));
            for (i, s) in chunk.iter().enumerate() {
                let norm = data::normalize_image(
                    &s.pixels,
                    &model.cfg().pixel_mean,
                    &model.cfg().pixel_std,
                );
                arr.index_axis_mut(ndarray::Axis(0), i).assign(&norm);
            }
            out.extend(model.embed_batch(arr.view())?);
        }
        out
    };
    for (i, (sample, emb)) in chosen.iter().zip(records.iter()).enumerate() {
        let stem = format!("{:04}_c{}_{:03}", sample.identity, sample.camera, i);
        write_quality_overlay(sample, emb, &args.out, &stem)?;
    }
    println!("wrote {} visualizations to {:?}", chosen.len(), args.out);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let occluders = match args.occluders.as_str() {
        "objects" => OccluderMix::Objects,
        "pedestrians" => OccluderMix::Pedestrians,
        "both" => OccluderMix::Both,
        other => return Err(Error::config(format!("unknown occluder mix `{other}`"))),
    };
    let cfg = SynthConfig {
        num_identities: args.identities,
        images_per_identity: args.images_per_identity,
        height: args.height,
        width: args.width,
        occlusion_probability: args.occlusion_probability,
        occluders,
        cameras: args.cameras,
        seed: args.seed,
    };
    let sets = partq::synth::generate::<F>(&cfg)?;
    let mut seq = 0usize;
    for (split, samples) in [
        ("train", &sets.train),
        ("query", &sets.query),
        ("gallery", &sets.gallery),
    ] {
        let dir = args.out.join(split);
        for s in samples {
            data::write_sample_png(s, &dir, seq)?;
            seq += 1;
        }
    }
    println!(
        "wrote {} train / {} query / {} gallery images to {:?}",
        sets.train.len(),
        sets.query.len(),
        sets.gallery.len(),
        args.out
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationRowResult {
    row: String,
    seed: u64,
    rank1: f64,
    #[serde(rename = "mAP")]
    map: f64,
}

#[derive(Serialize)]
struct AblationReport {
    config: RunConfig,
    epochs: usize,
    rows: Vec<AblationRowResult>,
    medians: Vec<AblationRowResult>,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<(), Error> {
    let base_cfg = args.common.resolve()?;
    let protocol = args.common.protocol()?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad seed `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    let spec = pixel_spec(&base_cfg);
    let opts = LoadOptions {
        require_train: true,
        require_eval: true,
        ..LoadOptions::default()
    };
    let sets = data::load_reid_dir::<F>(&args.data, &spec, &opts)?;

    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for row in ablation_table() {
        let (name, ablation, mode) = (row.name, row.ablation, row.eval_mode);
        let mut rank1s = Vec::new();
        let mut maps = Vec::new();
        for &seed in &seeds {
            let mut cfg = base_cfg.clone();
            cfg.model.ablation = ablation;
            cfg.train.seed = seed;
            let (trainer, cfg) = train_model(cfg, &sets, Some(args.epochs))?;
            let model = trainer.into_model();
            let (queries, gallery) = {
                let q = index_gallery(&model, &sets.query, cfg.train.batch_size())?;
                let g = index_gallery(&model, &sets.gallery, cfg.train.batch_size())?;
                (q, g)
            };
            let params = SearchParams::new(mode, cfg.retrieval.top_n, cfg.retrieval.gamma)?;
            let report = evaluate(&queries, &gallery, protocol, &params)?;
            println!(
                "{name:<18} seed {seed}: rank1 {:.4} mAP {:.4}",
                report.rank1, report.map
            );
            rank1s.push(report.rank1);
            maps.push(report.map);
            rows.push(AblationRowResult {
                row: name.to_string(),
                seed,
                rank1: report.rank1,
                map: report.map,
            });
        }
        medians.push(AblationRowResult {
            row: name.to_string(),
            seed: u64::MAX,
            rank1: median(rank1s),
            map: median(maps),
        });
    }

    let mut csv = String::from("row,seed,rank1,mAP\n");
    for r in rows.iter().chain(medians.iter()) {
        let seed = if r.seed == u64::MAX {
            "median".to_string()
        } else {
            r.seed.to_string()
        };
        csv.push_str(&format!("{},{},{},{}\n", r.row, seed, r.rank1, r.map));
    }
    std::fs::write(args.out.with_extension("csv"), csv)?;
    let report = AblationReport {
        config: base_cfg,
        epochs: args.epochs,
        rows,
        medians,
    };
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    println!("ablation report written to {:?}", args.out);
    Ok(())
}
