fn main() {
    std::process::exit(ncdepth::cli::run());
}
