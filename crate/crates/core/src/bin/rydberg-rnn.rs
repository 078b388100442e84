fn main() {
    std::process::exit(rydberg_rnn::cli::main_with_args(std::env::args_os()));
}
