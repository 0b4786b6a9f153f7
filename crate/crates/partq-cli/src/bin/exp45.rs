// scratch experiment for the ISA-direction and ablation-ordering criteria
use partq::config::{ModelConfig, TrainConfig};
use partq::data::normalize_image;
use partq::metrics::{evaluate, Protocol};
use partq::model::Model;
use partq::retrieval::{ablation_table, index_gallery, SearchParams};
use partq::synth::{self, OccluderMix, SynthConfig};
use partq::train::{TrainSet, Trainer};

fn getenv<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let t0 = std::time::Instant::now();
    let kind = std::env::var("KIND").unwrap_or_else(|_| "pedestrians".into());
    let occluders = match kind.as_str() {
        "objects" => OccluderMix::Objects,
        "both" => OccluderMix::Both,
        _ => OccluderMix::Pedestrians,
    };
    let synth_cfg = SynthConfig {
        num_identities: getenv("IDS", 24),
        images_per_identity: getenv("IMGS", 15),
        height: 64,
        width: 32,
        occlusion_probability: getenv("OCCP", 0.7),
        occluders,
        cameras: 4,
        seed: getenv("DSEED", 11),
    };
    let sets = synth::generate::<f32>(&synth_cfg).unwrap();
    println!(
        "dataset: {} train / {} query / {} gallery ({kind})",
        sets.train.len(),
        sets.query.len(),
        sets.gallery.len()
    );

    let rows_wanted: Vec<String> = std::env::var("ROWS")
        .unwrap_or_else(|_| "agfe-global,agfe-global-isa".into())
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let seeds: Vec<u64> = vec![0, 1, 2];
    let epochs = getenv("EPOCHS", 15);
    let lr = getenv("LR", 0.03);

    for row in ablation_table() {
        if !rows_wanted.iter().any(|w| w == row.name) {
            continue;
        }
        let mut rank1s = Vec::new();
        for &seed in &seeds {
            let mut mcfg = ModelConfig::default();
            mcfg.backbone.input_height = 64;
            mcfg.backbone.input_width = 32;
            mcfg.backbone.output_channels = 64;
            mcfg.parts = 4;
            mcfg.embed_dim = 64;
            mcfg.global_dim = 64;
            mcfg.ablation = row.ablation;

            let pairs: Vec<_> = sets
                .train
                .iter()
                .map(|s| {
                    (
                        normalize_image(&s.pixels, &mcfg.pixel_mean, &mcfg.pixel_std),
                        s.identity as u32,
                    )
                })
                .collect();
            let train_set = TrainSet::new(pairs).unwrap();
            mcfg.num_classes = train_set.num_classes();
            let model = Model::<f32>::new(mcfg, seed).unwrap();
            let tcfg = TrainConfig {
                identities_per_batch: getenv("P", 4),
                images_per_identity: getenv("A", 8),
                epochs,
                base_lr: lr,
                seed,
                erase: partq::config::EraseParams {
                    probability: getenv("ERASEP", 0.0),
                    ..Default::default()
                },
                ..TrainConfig::default()
            };
            let mut trainer = Trainer::new(model, tcfg, train_set).unwrap();
            trainer.train().unwrap();
            let model = trainer.into_model();
            let queries = index_gallery(&model, &sets.query, 64).unwrap();
            let gallery = index_gallery(&model, &sets.gallery, 64).unwrap();
            let params = SearchParams::new(row.eval_mode, 30, 0.6).unwrap();
            let report = evaluate(&queries, &gallery, Protocol::Standard, &params).unwrap();
            println!("{:<18} seed {seed}: rank1 {:.4} mAP {:.4}", row.name, report.rank1, report.map);
            rank1s.push(report.rank1);
        }
        rank1s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("{:<18} median rank1 {:.4}", row.name, rank1s[1]);
    }
    println!("total {:?}", t0.elapsed());
}
