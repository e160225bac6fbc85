fn main() {
    std::process::exit(atlas_kit::cli::run(std::env::args_os()));
}
