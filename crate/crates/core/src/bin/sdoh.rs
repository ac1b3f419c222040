fn main() {
    std::process::exit(sdoh_extract::cli::main_with_args(std::env::args_os()));
}
