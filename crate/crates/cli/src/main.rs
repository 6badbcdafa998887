fn main() {
    std::process::exit(nested_lqg_cli::run(std::env::args_os()));
}
