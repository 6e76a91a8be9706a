fn main() {
    let code = fedadmm::cli::run_cli(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
