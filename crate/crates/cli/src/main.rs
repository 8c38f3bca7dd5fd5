fn main() {
    std::process::exit(semsplat_cli::run(std::env::args_os()));
}
