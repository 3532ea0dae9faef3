//! Trains a quick desk model, then writes Grad-CAM and CAM overlays for one
//! test metastasis and reports IoU and the pointing game.
//!
//! cargo run --release --example grad_cam_overlay -- [out_dir]

use std::path::PathBuf;

use ribcam::cam::{heatmap, localization_score, overlay_colormap, CamMethod};
use ribcam::io::write_rgb_png;
use ribcam::model::{replace_final_layer, ArchSpec};
use ribcam::phantom::{generate_dataset, DatasetSplit, LesionLabel, PhantomSpec};
use ribcam::trainer::{fine_tune, pretrain_pretext, TrainConfig};

fn main() -> ribcam::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "overlays".into()));
    std::fs::create_dir_all(&out).map_err(|e| ribcam::Error::io(&out, e))?;

    let split = DatasetSplit {
        train_metastasis: 80,
        train_trauma: 80,
        test_metastasis: 4,
        test_trauma: 4,
    };
    let data = generate_dataset(&split, &PhantomSpec::metastasis(0), &PhantomSpec::trauma(0), 3)?;

    // The GAP head supports both methods.
    let (pre, _) = pretrain_pretext(&ArchSpec::desk_gap(), &TrainConfig::pretext(), 3)?;
    let base = replace_final_layer(&pre, 2, 3)?;
    let (net, _) = fine_tune(&base, &data.train, &TrainConfig { epochs: 10, batch_size: 32, ..TrainConfig::desk() })?;

    let case = data.test.iter().find(|c| c.label == LesionLabel::Metastasis).expect("test metastasis");
    for method in [CamMethod::GradCam, CamMethod::Cam] {
        let h = heatmap(&net, &case.image, LesionLabel::Metastasis, method)?;
        let loc = localization_score(&h, &case.mask, 0.5)?;
        println!("{:<8} iou {:.3}  pointing hit {}", method.as_str(), loc.iou, loc.pointing_hit);
        let path = out.join(format!("{}-{}.png", case.image.id, method.as_str()));
        write_rgb_png(&path, &overlay_colormap(&case.image, &h, 0.5)?)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
