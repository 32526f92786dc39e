fn main() {
    std::process::exit(demo_shaping::harness::cli::run(std::env::args_os()));
}
