fn main() {
    std::process::exit(ribcam::cli::run(std::env::args_os()));
}
