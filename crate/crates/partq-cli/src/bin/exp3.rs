// scratch experiment for the quality-gap criterion
use ndarray::Axis;
use partq::config::{ModelConfig};
use partq::data::normalize_image;
use partq::model::Model;
use partq::synth::{self, SynthConfig, OccluderMix, part_occlusion_fractions};
use partq::train::{TrainSet, Trainer};
use partq::config::TrainConfig;
use partq::retrieval::index_gallery;

fn main() {
    let t0 = std::time::Instant::now();
    let synth_cfg = SynthConfig {
        num_identities: 50,
        images_per_identity: 20,
        height: 64,
        width: 32,
        occlusion_probability: std::env::var("OCCP").map(|v| v.parse().unwrap()).unwrap_or(0.5),
        occluders: OccluderMix::Objects,
        cameras: 4,
        seed: 11,
    };
    let sets = synth::generate::<f32>(&synth_cfg).unwrap();
    let mut mcfg = ModelConfig::default();
    mcfg.backbone.input_height = 64;
    mcfg.backbone.input_width = 32;
    mcfg.backbone.output_channels = 64;
    mcfg.parts = 4;
    mcfg.embed_dim = 64;
    mcfg.global_dim = 64;

    let pairs: Vec<_> = sets.train.iter().map(|s| {
        (normalize_image(&s.pixels, &mcfg.pixel_mean, &mcfg.pixel_std), s.identity as u32)
    }).collect();
    let train_set = TrainSet::new(pairs).unwrap();
    mcfg.num_classes = train_set.num_classes();
    let model = Model::<f32>::new(mcfg, 0).unwrap();
    let tcfg = TrainConfig {
        identities_per_batch: std::env::var("P").map(|v| v.parse().unwrap()).unwrap_or(8),
        images_per_identity: std::env::var("A").map(|v| v.parse().unwrap()).unwrap_or(8),
        epochs: std::env::var("EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(30),
        momentum_enabled: std::env::var("MOM").is_ok(),
        margin: std::env::var("MARGIN").map(|v| v.parse().unwrap()).unwrap_or(0.3),
        base_lr: std::env::var("LR").map(|v| v.parse().unwrap()).unwrap_or(0.02),
        seed: std::env::var("TSEED").map(|v| v.parse().unwrap()).unwrap_or(0),
        ..TrainConfig::default()
    };
    let mut tcfg = tcfg;
    if let Ok(p) = std::env::var("ERASEP") { tcfg.erase.probability = p.parse().unwrap(); }
    let mut trainer = Trainer::new(model, tcfg, train_set).unwrap();
    trainer.train().unwrap();
    println!("train time: {:?}", t0.elapsed());
    let first = &trainer.log.epochs[0].loss;
    let last = trainer.log.epochs.last().unwrap().loss;
    println!("loss {:.3} -> {:.3}", first.total, last.total);

    let model = trainer.into_model();
    let held: Vec<_> = sets.query.iter().chain(sets.gallery.iter()).cloned().collect();
    let records = index_gallery(&model, &held, 64).unwrap();
    let mut occ_q = Vec::new();
    let mut vis_q = Vec::new();
    for (rec, sample) in records.iter().zip(held.iter()) {
        let fr = part_occlusion_fractions(sample.mask.as_ref().unwrap(), 4);
        for k in 0..4 {
            if fr[k] > 0.5 { occ_q.push(rec.quality[k] as f64); }
            else { vis_q.push(rec.quality[k] as f64); }
        }
    }
    // per-part breakdown
    let mut per_part: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); 4];
    for (rec, sample) in records.iter().zip(held.iter()) {
        let fr = part_occlusion_fractions(sample.mask.as_ref().unwrap(), 4);
        for k in 0..4 {
            if fr[k] > 0.5 { per_part[k].0.push(rec.quality[k] as f64); }
            else { per_part[k].1.push(rec.quality[k] as f64); }
        }
    }
    for k in 0..4 {
        let (o, v) = &per_part[k];
        let mo = if o.is_empty() { f64::NAN } else { o.iter().sum::<f64>() / o.len() as f64 };
        let mv = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        println!("part {k}: occluded n={} q={:.3} | visible n={} q={:.3}", o.len(), mo, v.len(), mv);
    }
    let mo = occ_q.iter().sum::<f64>() / occ_q.len() as f64;
    let mv = vis_q.iter().sum::<f64>() / vis_q.len() as f64;
    println!("occluded parts: {} mean q {:.4}", occ_q.len(), mo);
    println!("visible parts:  {} mean q {:.4}", vis_q.len(), mv);
    println!("gap: {:.4}  total time {:?}", mv - mo, t0.elapsed());
    let _ = Axis(0);
}
