//! Pretext pretraining, head replacement and fine-tuning of the desk network
//! on a small phantom set, with per-epoch losses.
//!
//! cargo run --release --example train_desk

use ribcam::model::{replace_final_layer, ArchSpec};
use ribcam::phantom::{generate_dataset, DatasetSplit, PhantomSpec};
use ribcam::trainer::{fine_tune, predict_dataset, pretrain_pretext, TrainConfig};

fn main() -> ribcam::Result<()> {
    let split = DatasetSplit {
        train_metastasis: 60,
        train_trauma: 60,
        test_metastasis: 20,
        test_trauma: 20,
    };
    let data = generate_dataset(&split, &PhantomSpec::metastasis(0), &PhantomSpec::trauma(0), 5)?;

    let arch = ArchSpec::desk();
    let (pre, log) = pretrain_pretext(&arch, &TrainConfig::pretext(), 5)?;
    for r in &log.records {
        println!("pretext epoch {:>2}  loss {:.4}  accuracy {:.3}", r.epoch, r.loss, r.accuracy);
    }

    let base = replace_final_layer(&pre, 2, 5)?;
    let config = TrainConfig {
        epochs: 10,
        batch_size: 32,
        ..TrainConfig::desk()
    };
    let (net, log) = fine_tune(&base, &data.train, &config)?;
    for r in &log.records {
        println!("fine-tune epoch {:>2}  loss {:.4}  accuracy {:.3}", r.epoch, r.loss, r.accuracy);
    }

    let preds = predict_dataset(&net, &data.test)?;
    let correct = preds.iter().zip(&data.test).filter(|(p, c)| p.label == c.label).count();
    println!("test accuracy {}/{}", correct, data.test.len());
    Ok(())
}
