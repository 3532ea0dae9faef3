//! Renders one phantom per class, prints its lesion geometry and writes the
//! images and masks as PNG.
//!
//! cargo run --release --example generate_phantoms -- [out_dir]

use std::path::PathBuf;

use ribcam::io::{save_mask_png, save_scan_png};
use ribcam::phantom::{generate_case, lesion_geometry_stats, render_noiseless, PhantomSpec};

fn main() -> ribcam::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "phantoms".into()));
    std::fs::create_dir_all(&out).map_err(|e| ribcam::Error::io(&out, e))?;
    for spec in [PhantomSpec::metastasis(1), PhantomSpec::trauma(1)] {
        let case = generate_case(&spec)?;
        let geom = lesion_geometry_stats(&render_noiseless(&spec)?.lesion_support())?;
        println!(
            "{:<10} elongation {:.2}  mask pixels {}",
            spec.lesion_label.as_str(),
            geom.moment_ratio,
            case.mask.count()
        );
        save_scan_png(&out.join(format!("{}.png", spec.lesion_label.as_str())), &case.image)?;
        save_mask_png(&out.join(format!("{}-mask.png", spec.lesion_label.as_str())), &case.mask)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
