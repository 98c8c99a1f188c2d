fn main() {
    let code = drekf_sim::cli::main_with_args(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
