//! The command-line pipeline driven in-process on a small configuration.
//!
//! cargo run --release --example run_pipeline -- [out_dir]

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "example-run".into());
    std::fs::create_dir_all(&out).expect("output directory");
    let cfg = format!("{out}/small.cfg");
    std::fs::write(
        &cfg,
        "seed = 1\nimage_side = 128\ntrain_metastasis = 40\ntrain_trauma = 40\n\
         test_metastasis = 20\ntest_trauma = 20\nepochs = 10\nbatch_size = 32\nablation_sizes = 40,80\n",
    )
    .expect("config file");
    for step in ["gen-data", "pretrain", "train", "eval", "cam", "ablate", "report"] {
        let code = ribcam::cli::run(["ribcam", step, "--config", &cfg, "--out", &out]);
        println!("{step:<9} exit {code}");
        if code != 0 {
            std::process::exit(code);
        }
    }
    print!("{}", std::fs::read_to_string(format!("{out}/report/summary.txt")).unwrap_or_default());
}
