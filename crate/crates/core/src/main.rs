fn main() {
    cdrl::cli::init_logging();
    std::process::exit(cdrl::cli::main_with(std::env::args_os()));
}
