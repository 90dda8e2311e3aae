fn main() {
    std::process::exit(sra_core::cli::cli_dispatch(std::env::args_os()));
}
