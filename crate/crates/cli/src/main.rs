fn main() {
    std::process::exit(bigru_cnn_cli::main_with_args(std::env::args_os()));
}
