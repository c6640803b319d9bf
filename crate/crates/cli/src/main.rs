fn main() {
    std::process::exit(stoch_unfold_cli::run(std::env::args_os()));
}
