fn main() {
    std::process::exit(dlglc::pipeline::cli::main_from(std::env::args_os()));
}
