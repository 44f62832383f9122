fn main() {
    std::process::exit(dfc_dit_cli::run(std::env::args_os()));
}
