fn main() {
    std::process::exit(muon_memory::cli::main_with_args(std::env::args_os()));
}
