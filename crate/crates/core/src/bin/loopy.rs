fn main() {
    std::process::exit(loopy_rnn::cli::run(std::env::args_os()));
}
