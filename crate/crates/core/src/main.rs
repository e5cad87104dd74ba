fn main() {
    std::process::exit(geo_iql::cli::run(std::env::args_os()));
}
